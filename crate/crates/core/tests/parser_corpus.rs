use std::path::Path;

use plateline::gateway::parse::{parse_knowledge, parse_knowledge_with, ExtractMode};
use plateline::model::ParseErrorKind;
use proptest::prelude::*;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    file: String,
    outcome: String,
}

fn corpus() -> Vec<(Case, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/parser");
    let cases: Vec<Case> = serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    cases
        .into_iter()
        .map(|c| {
            let text = std::fs::read_to_string(dir.join(&c.file)).unwrap();
            (c, text)
        })
        .collect()
}

fn outcome(raw: &str) -> &'static str {
    match parse_knowledge(raw) {
        Ok(_) => "ok",
        Err(e) => match e.kind {
            ParseErrorKind::NoJson => "no_json",
            ParseErrorKind::Malformed => "malformed",
            ParseErrorKind::SchemaViolation => "schema_violation",
        },
    }
}

#[test]
fn corpus_matches_expected_outcomes() {
    let cases = corpus();
    assert_eq!(cases.len(), 30);
    let mut wrong = Vec::new();
    for (c, text) in &cases {
        let got = outcome(text);
        if got != c.outcome {
            wrong.push(format!("{}: expected {}, got {got}", c.file, c.outcome));
        }
    }
    assert!(wrong.is_empty(), "{wrong:#?}");
}

#[test]
fn corpus_successes_keep_the_dish() {
    for (c, text) in corpus() {
        if c.outcome == "ok" {
            let k = parse_knowledge(&text).unwrap();
            assert!(k.food_name.contains("Peking Duck"), "{}", c.file);
            assert_eq!(k.recipe_ingredients().len(), 3, "{}", c.file);
        }
    }
}

#[test]
fn corpus_errors_carry_an_excerpt() {
    for (c, text) in corpus() {
        if let Err(e) = parse_knowledge(&text) {
            assert!(!e.message.is_empty(), "{}", c.file);
            assert!(e.raw_excerpt.chars().count() <= 160, "{}", c.file);
        }
    }
}

#[test]
fn greedy_mode_fails_where_balanced_recovers() {
    let cases = corpus();
    let text = &cases
        .iter()
        .find(|(c, _)| c.file.contains("prose_braces_first"))
        .unwrap()
        .1;
    assert!(parse_knowledge_with(text, ExtractMode::Balanced).is_ok());
    assert!(parse_knowledge_with(text, ExtractMode::Greedy).is_err());
}

const ALPHABET: &[u8] = b"{}[]\":,\\ \n\tabcxyz019.-`'";

/// Random mutation of a corpus entry: byte flips, insertions, deletions,
/// truncation and splices of JSON punctuation.
fn mutate(rng: &mut impl Rng, base: &str) -> String {
    let mut bytes = base.as_bytes().to_vec();
    for _ in 0..rng.random_range(1..=8) {
        let pick = ALPHABET[rng.random_range(0..ALPHABET.len())];
        match rng.random_range(0..5) {
            0 if !bytes.is_empty() => {
                let i = rng.random_range(0..bytes.len());
                bytes[i] = pick;
            }
            1 => {
                let i = rng.random_range(0..=bytes.len());
                bytes.insert(i, pick);
            }
            2 if !bytes.is_empty() => {
                let i = rng.random_range(0..bytes.len());
                bytes.remove(i);
            }
            3 => {
                let n = rng.random_range(0..=bytes.len());
                bytes.truncate(n);
            }
            _ => {
                let i = rng.random_range(0..=bytes.len());
                bytes.splice(i..i, (0..rng.random_range(1..16)).map(|_| rng.random::<u8>()));
            }
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[test]
fn fuzz_ten_thousand_inputs_never_panic() {
    let cases = corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut kinds = [0usize; 4];
    for _ in 0..10_000 {
        let base = &cases[rng.random_range(0..cases.len())].1;
        let raw = mutate(&mut rng, base);
        let r = std::panic::catch_unwind(|| outcome(&raw));
        let got = r.unwrap_or_else(|_| panic!("parser panicked on {raw:?}"));
        let slot = ["ok", "no_json", "malformed", "schema_violation"]
            .iter()
            .position(|k| *k == got)
            .unwrap();
        kinds[slot] += 1;
        // Greedy mode must be just as total.
        let _ = parse_knowledge_with(&raw, ExtractMode::Greedy);
    }
    assert_eq!(kinds.iter().sum::<usize>(), 10_000);
    assert!(kinds.iter().all(|&n| n > 0), "{kinds:?}");
}

proptest! {
    #[test]
    fn any_string_parses_to_some_outcome(raw in "\\PC{0,400}") {
        let _ = outcome(&raw);
    }

    #[test]
    fn brace_free_wrappers_do_not_change_the_result(
        pre in "[^{}]{0,80}",
        post in "[^{}]{0,80}",
        fence in proptest::bool::ANY,
    ) {
        let body = &corpus()[1].1;
        let inner = if fence { format!("```json\n{body}\n```") } else { body.clone() };
        let wrapped = format!("{pre}{inner}{post}");
        prop_assert_eq!(parse_knowledge(&wrapped).unwrap(), parse_knowledge(body).unwrap());
    }
}
