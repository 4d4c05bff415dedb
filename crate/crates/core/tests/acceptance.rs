//! Acceptance checks, one line per criterion. Exits non-zero if any fails.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use plateline::gateway::parse::parse_knowledge;
use plateline::math::{softmax, LogitVector};
use plateline::metrics::classification::{all_per_class, build_confusion, top_k_accuracy};
use plateline::metrics::detection::{ciou_loss, iou, BBox};
use plateline::metrics::text::{bleu, corpus_bleu, lcs_length, rouge_l, tokenize, Smoothing, TokenSequence};
use plateline::model::{FoodClass, ParseErrorKind, PredictionRecord};
use plateline::pipeline::{collect_error_set, load_records, run_pipeline, Overrides, RunConfig, RunOptions};
use plateline::sep::{sep_aggregate, StubEmbedder};
use plateline::vision::{stub_classify, ClassList, ConfusionRule, ConfusionSpec, ManifestEntry, Split};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

/// Candidate, reference, LCS length, recall, precision.
type RougeCase<'a> = (&'a [&'a str], &'a [&'a str], usize, f64, f64);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn toy() -> PathBuf {
    manifest_dir().join("tests/fixtures/toy")
}

fn seq(tokens: &[&str]) -> TokenSequence {
    tokenize(&tokens.join(" "))
}

fn class(id: &str) -> FoodClass {
    FoodClass::new(id).unwrap()
}

// ---------------------------------------------------------------- 1

/// Clipped matches and candidate n-gram total by linear scans.
fn oracle_clipped(cand: &[String], refs: &[Vec<String>], n: usize) -> (u64, u64) {
    if cand.len() < n {
        return (0, 0);
    }
    let grams: Vec<&[String]> = (0..=cand.len() - n).map(|i| &cand[i..i + n]).collect();
    let count_in = |hay: &[String], g: &[String]| -> u64 {
        if hay.len() < n {
            return 0;
        }
        (0..=hay.len() - n).filter(|&i| &hay[i..i + n] == g).count() as u64
    };
    let mut seen: Vec<&[String]> = Vec::new();
    let mut clipped = 0;
    for g in &grams {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let in_cand = count_in(cand, g);
        let max_ref = refs.iter().map(|r| count_in(r, g)).max().unwrap_or(0);
        clipped += in_cand.min(max_ref);
    }
    (clipped, grams.len() as u64)
}

/// BLEU-4 with uniform weights over the summed statistics of `segments`.
fn oracle_bleu(segments: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    let mut m = [0u64; 4];
    let mut t = [0u64; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in segments {
        for n in 1..=4 {
            let (a, b) = oracle_clipped(cand, refs, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
        c += cand.len();
        let mut best = refs[0].len();
        for x in refs {
            let (dx, db) = (x.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if dx < db || (dx == db && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    if c == 0 || m.contains(&0) {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let log_mean: f64 = (0..4).map(|i| (m[i] as f64 / t[i] as f64).ln()).sum::<f64>() / 4.0;
    bp * log_mean.exp()
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: &[&str], len: usize) -> Vec<String> {
    (0..len)
        .map(|_| vocab[rng.random_range(0..vocab.len())].to_owned())
        .collect()
}

fn criterion_1() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab = ["the", "cat", "sat", "on", "mat", "dog"];
    let mut nonzero = 0;
    let mut worst = 0.0f64;
    for corpus in 0..20 {
        let v = &vocab[..rng.random_range(3..=vocab.len())];
        let segments: Vec<(Vec<String>, Vec<Vec<String>>)> = (0..rng.random_range(1..=5))
            .map(|_| {
                let len = rng.random_range(4..=14);
                let cand = random_tokens(&mut rng, v, len);
                let refs = (0..rng.random_range(1..=3))
                    .map(|_| {
                        if rng.random::<bool>() {
                            let len = rng.random_range(3..=16);
                            return random_tokens(&mut rng, v, len);
                        }
                        // An edited copy of the candidate: substitutions, drops, additions.
                        let mut r = cand.clone();
                        for _ in 0..rng.random_range(0..=3) {
                            let i = rng.random_range(0..r.len());
                            match rng.random_range(0..3) {
                                0 => r[i] = v[rng.random_range(0..v.len())].to_owned(),
                                1 if r.len() > 2 => {
                                    r.remove(i);
                                }
                                _ => r.insert(i, v[rng.random_range(0..v.len())].to_owned()),
                            }
                        }
                        r
                    })
                    .collect();
                (cand, refs)
            })
            .collect();
        let as_seq = |t: &Vec<String>| tokenize(&t.join(" "));
        let typed: Vec<(TokenSequence, Vec<TokenSequence>)> = segments
            .iter()
            .map(|(c, rs)| (as_seq(c), rs.iter().map(as_seq).collect()))
            .collect();
        let want = oracle_bleu(&segments);
        let got = corpus_bleu(&typed, 4, Smoothing::None).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-6, || {
            format!("corpus {corpus}: BLEU {got} vs oracle {want}")
        })?;
        for (seg, (c, rs)) in segments.iter().zip(&typed) {
            let want = oracle_bleu(std::slice::from_ref(seg));
            let got = bleu(c, rs, 4, Smoothing::None).map_err(|e| e.to_string())?;
            worst = worst.max((got - want).abs());
            ensure((got - want).abs() <= 1e-6, || {
                format!("corpus {corpus}: sentence BLEU {got} vs {want}")
            })?;
        }
        if want > 0.0 {
            nonzero += 1;
        }
    }
    ensure(nonzero >= 10, || format!("only {nonzero}/20 corpora had non-zero BLEU"))?;

    let two_thirds = 2.0 / 3.0;
    let cases: [RougeCase; 4] = [
        (
            &["the", "cat", "sat"],
            &["the", "cat", "ran"],
            2,
            two_thirds,
            two_thirds,
        ),
        (
            &["police", "killed", "the", "gunman"],
            &["the", "gunman", "kill", "police"],
            2,
            0.5,
            0.5,
        ),
        (&["a", "b", "c", "d"], &["a", "c", "d", "b"], 3, 0.75, 0.75),
        (&["x"], &["a", "b"], 0, 0.0, 0.0),
    ];
    for (cand, reference, lcs, r, p) in cases {
        let (c, rf) = (seq(cand), seq(reference));
        let s = rouge_l(&c, &rf, 1.0).map_err(|e| e.to_string())?;
        let f = if r + p == 0.0 { 0.0 } else { 2.0 * r * p / (r + p) };
        ensure(
            lcs_length(&c, &rf) == lcs && s.recall == r && s.precision == p && s.f == f,
            || format!("ROUGE-L {cand:?}/{reference:?}: {s:?}"),
        )?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "20 corpora, {nonzero} non-zero, max |BLEU - oracle| = {worst:.1e}; 4 ROUGE-L hand cases exact; {:.0} ms",
        elapsed.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------- 2

fn random_records(rng: &mut ChaCha8Rng, classes: &[FoodClass], n: usize) -> Vec<PredictionRecord> {
    (0..n)
        .map(|i| {
            let t = rng.random_range(0..classes.len());
            let mut order: Vec<usize> = (0..classes.len()).collect();
            for j in (1..order.len()).rev() {
                order.swap(j, rng.random_range(0..=j));
            }
            // Bias towards the true class so accuracy is not ~20%.
            if rng.random::<f64>() < 0.6 {
                let pos = order.iter().position(|&x| x == t).unwrap();
                order.swap(0, pos);
            }
            let mut probs: Vec<f64> = (0..classes.len()).map(|_| rng.random::<f64>()).collect();
            probs.sort_by(|a, b| b.total_cmp(a));
            let z: f64 = probs.iter().sum();
            let top_k: Vec<(FoodClass, f64)> = order
                .iter()
                .zip(&probs)
                .map(|(&c, p)| (classes[c].clone(), p / z))
                .collect();
            PredictionRecord {
                image_id: format!("img_{i:04}"),
                true_class: classes[t].clone(),
                predicted_class: top_k[0].0.clone(),
                confidence: top_k[0].1,
                top_k: Some(top_k),
                source: None,
            }
        })
        .collect()
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// LCS by enumerating subsequences of binary sequences (alphabet {a, b},
/// length <= 8). A subsequence of length `l` with bits `v` is key `(1 << l) | v`.
fn subsequence_set(bits: u32, len: u32) -> [u64; 8] {
    let mut set = [0u64; 8];
    for mask in 0u32..(1 << len) {
        let mut key = 1u32;
        for i in 0..len {
            if mask & (1 << i) != 0 {
                key = (key << 1) | ((bits >> i) & 1);
            }
        }
        set[(key / 64) as usize] |= 1 << (key % 64);
    }
    set
}

fn criterion_2() -> Check {
    let classes: Vec<FoodClass> = [
        "mapo_tofu",
        "peking_duck",
        "egg_tarts",
        "steamed_fish",
        "zha_jiang_mian",
    ]
    .into_iter()
    .map(class)
    .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for set in 0..50 {
        let records = random_records(&mut rng, &classes, 200);
        let cm = build_confusion(&classes, &records).map_err(|e| e.to_string())?;
        for s in all_per_class(&cm) {
            let c = &s.class;
            let tp = records
                .iter()
                .filter(|r| &r.true_class == c && &r.predicted_class == c)
                .count();
            let predicted = records.iter().filter(|r| &r.predicted_class == c).count();
            let actual = records.iter().filter(|r| &r.true_class == c).count();
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            ensure(
                s.precision == p && s.recall == r && s.f1 == f1 && s.support == actual as u64,
                || format!("set {set} class {c}: {s:?} vs P={p} R={r} F1={f1}"),
            )?;
        }
        let correct = records.iter().filter(|r| r.true_class == r.predicted_class).count();
        let top1 = top_k_accuracy(&records, 1).map_err(|e| e.to_string())?;
        ensure(top1 == ratio(correct, 200) && cm.accuracy() == top1, || {
            format!("set {set}: top-1 {top1}")
        })?;
        let in3 = records
            .iter()
            .filter(|r| r.top_k.as_ref().unwrap()[..3].iter().any(|(c, _)| c == &r.true_class))
            .count();
        ensure(
            top_k_accuracy(&records, 3).map_err(|e| e.to_string())? == ratio(in3, 200),
            || format!("set {set}: top-3"),
        )?;
    }

    let mut seqs = Vec::new();
    for len in 0..=8u32 {
        for bits in 0..(1u32 << len) {
            let tokens: Vec<&str> = (0..len).map(|i| if bits >> i & 1 == 1 { "b" } else { "a" }).collect();
            seqs.push((seq(&tokens), subsequence_set(bits, len)));
        }
    }
    let mut pairs = 0u64;
    for (x, sx) in &seqs {
        for (y, sy) in &seqs {
            let mut best = 0;
            for w in (0..8).rev() {
                let common = sx[w] & sy[w];
                if common != 0 {
                    let key = w as u32 * 64 + 63 - common.leading_zeros();
                    best = 31 - key.leading_zeros();
                    break;
                }
            }
            let got = lcs_length(x, y);
            ensure(got == best as usize, || {
                format!("LCS {:?} / {:?}: {got} vs {best}", x.tokens(), y.tokens())
            })?;
            pairs += 1;
        }
    }
    Ok(format!(
        "50 sets x 200 records exact; LCS oracle agrees on {pairs} sequence pairs"
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    for i in 0..1000 {
        let n = rng.random_range(2..=20);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let shift = rng.random_range(-100.0..100.0);
        let p = softmax(&LogitVector::new(z.clone()).map_err(|e| e.to_string())?);
        let q = softmax(&LogitVector::new(z.iter().map(|v| v + shift).collect()).map_err(|e| e.to_string())?);
        let sum: f64 = p.values().iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        ensure((sum - 1.0).abs() <= 1e-9, || format!("vector {i}: sum {sum}"))?;
        let d = p
            .values()
            .iter()
            .zip(q.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_shift = worst_shift.max(d);
        ensure(d <= 1e-9, || format!("vector {i}: shift changed probabilities by {d}"))?;
        let arg_z = (0..n).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
        ensure(p.argmax() == arg_z, || format!("vector {i}: argmax moved"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let box_ = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        BBox::new(x, y, x + rng.random_range(0.01..8.0), y + rng.random_range(0.01..8.0)).unwrap()
    };
    for i in 0..1000 {
        let (a, b) = (box_(&mut rng), box_(&mut rng));
        let self_loss = ciou_loss(&a, &a).map_err(|e| e.to_string())?;
        ensure(self_loss.abs() <= 1e-12, || {
            format!("pair {i}: ciou(a, a) = {self_loss}")
        })?;
        let l = ciou_loss(&a, &b).map_err(|e| e.to_string())?;
        let bound = 1.0 - iou(&a, &b).map_err(|e| e.to_string())?;
        ensure(l >= bound - 1e-12, || format!("pair {i}: ciou {l} < 1 - iou {bound}"))?;
    }
    Ok(format!(
        "1000 logit vectors (max |sum - 1| = {worst_sum:.1e}, max shift drift = {worst_shift:.1e}); 1000 box pairs"
    ))
}

// ---------------------------------------------------------------- 4

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

fn criterion_4() -> Check {
    #[derive(serde::Deserialize)]
    struct Case {
        file: String,
        outcome: String,
    }
    let dir = manifest_dir().join("tests/fixtures/parser");
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
    let cases: Vec<Case> = serde_json::from_str(&read(&dir.join("expected.json"))?).map_err(|e| e.to_string())?;
    let mut texts = Vec::new();
    let mut passed = 0;
    for c in &cases {
        let text = read(&dir.join(&c.file))?;
        let got = outcome(&text);
        ensure(got == c.outcome, || {
            format!("{}: expected {}, got {got}", c.file, c.outcome)
        })?;
        passed += 1;
        texts.push(text);
    }
    ensure(cases.len() == 30, || format!("corpus has {} fixtures", cases.len()))?;

    let prev_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut crashes = 0;
    for _ in 0..10_000 {
        let mut bytes = texts[rng.random_range(0..texts.len())].clone().into_bytes();
        for _ in 0..rng.random_range(1..=8) {
            let i = rng.random_range(0..=bytes.len());
            match rng.random_range(0..3) {
                0 => bytes.insert(i, b"{}[]\":,\\ x"[rng.random_range(0..10)]),
                1 => bytes.truncate(i),
                _ => bytes
                    .splice(i..i, (0..rng.random_range(1..12)).map(|_| rng.random::<u8>()))
                    .for_each(drop),
            }
        }
        let raw = String::from_utf8_lossy(&bytes).into_owned();
        if std::panic::catch_unwind(|| outcome(&raw)).is_err() {
            crashes += 1;
        }
    }
    std::panic::set_hook(prev_hook);
    ensure(crashes == 0, || format!("{crashes} crashes in 10000 fuzz inputs"))?;
    Ok(format!(
        "{passed}/30 fixtures as expected; 10000 fuzz inputs, 0 crashes"
    ))
}

// ---------------------------------------------------------------- 5, 7

fn toy_config(out: &Path, cache: &Path) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::load(&toy().join("run.json")).map_err(|e| e.to_string())?;
    cfg.apply(&Overrides {
        output_dir: Some(out.to_owned()),
        cache_dir: Some(cache.to_owned()),
        ..Default::default()
    });
    Ok(cfg)
}

fn criterion_5() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = toy_config(&tmp.path().join("out"), &tmp.path().join("cache"))?;
    let out = run_pipeline(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
    let records = load_records(&out.run_dir).map_err(|e| e.to_string())?;
    let set = collect_error_set(&records);
    let result = sep_aggregate(&set.pairs, &StubEmbedder::default(), cfg.sep_threshold).map_err(|e| e.to_string())?;
    let mean_for = |t: &str, p: &str| {
        result
            .by_confusion
            .iter()
            .find(|c| c.true_class.id() == t && c.predicted_class.id() == p)
            .map(|c| c.mean)
            .ok_or_else(|| format!("no {t} -> {p} pairs"))
    };
    let mismatch = mean_for("mapo_tofu", "kung_pao_chicken")?;
    let similarity = mean_for("spicy_crayfish", "spicy_sauteed_shrimp")?;
    let gap = mismatch - similarity;
    let line = format!("mean SEP mismatch {mismatch:.4}, similarity {similarity:.4}, gap {gap:.4} (need >= 0.2)");
    ensure(gap >= 0.2, || line.clone())?;
    Ok(line)
}

fn criterion_7() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = tmp.path().join("cache");
    let started = Instant::now();
    let first =
        run_pipeline(&toy_config(&tmp.path().join("a"), &cache)?, RunOptions::default()).map_err(|e| e.to_string())?;
    let cold = started.elapsed();
    ensure(first.summary.complete && first.summary.records == 10, || {
        "toy run incomplete".into()
    })?;
    ensure(cold < Duration::from_secs(5), || format!("cold run took {cold:?}"))?;

    let second =
        run_pipeline(&toy_config(&tmp.path().join("b"), &cache)?, RunOptions::default()).map_err(|e| e.to_string())?;
    ensure(second.summary.cache_hits == second.summary.generations, || {
        "warm run missed the cache".into()
    })?;
    let bytes = |dir: &Path, f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
    for f in ["records.jsonl", "report.md"] {
        ensure(bytes(&first.run_dir, f)? == bytes(&second.run_dir, f)?, || {
            format!("warm rerun changed {f}")
        })?;
    }

    let cfg = toy_config(&tmp.path().join("c"), &cache)?;
    let partial = run_pipeline(
        &cfg,
        RunOptions {
            stop_after: Some(5),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(!partial.summary.complete, || "stop_after did not interrupt".into())?;
    let resumed = run_pipeline(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
    ensure(resumed.summary.resumed_with == 5, || {
        "resume did not reuse the prefix".into()
    })?;
    for f in ["records.jsonl", "report.md"] {
        ensure(bytes(&first.run_dir, f)? == bytes(&resumed.run_dir, f)?, || {
            format!("resumed run changed {f}")
        })?;
    }
    Ok(format!(
        "toy run {:.0} ms; warm rerun and kill-and-resume byte-identical (records.jsonl, report.md)",
        cold.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Check {
    let classes = ClassList::load(&toy().join("classes.txt")).map_err(|e| e.to_string())?;
    let ids = classes.classes().to_vec();
    let entries: Vec<ManifestEntry> = (0..2000)
        .map(|i| ManifestEntry {
            image_id: format!("img_{i:04}"),
            true_class: ids[i % ids.len()].clone(),
            split: Split::Test,
            image_ref: None,
        })
        .collect();
    let spec = ConfusionSpec {
        rules: (0..ids.len())
            .map(|i| ConfusionRule {
                from: ids[i].clone(),
                to: ids[(i + 1) % ids.len()].clone(),
                rate: 0.11,
            })
            .collect(),
        seed: 42,
    };
    let records = stub_classify(&entries, &spec, &classes).map_err(|e| e.to_string())?;
    let top1 = top_k_accuracy(&records, 1).map_err(|e| e.to_string())?;
    ensure((top1 - 0.89).abs() <= 0.01, || {
        format!("stub Top-1 {:.2}% outside 89% +/- 1%", top1 * 100.0)
    })?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = toy_config(&tmp.path().join("out"), &tmp.path().join("cache"))?;
    let out = run_pipeline(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
    let generation = out
        .report
        .and_then(|r| r.generation)
        .ok_or("toy run produced no generation report")?;
    let row = &generation.rows[0];
    ensure(row.bleu4 == Some(1.0) && row.rouge_l == Some(1.0), || {
        format!(
            "candidates = references gave BLEU {:?}, ROUGE-L {:?}",
            row.bleu4, row.rouge_l
        )
    })?;
    Ok(format!(
        "2000-entry stub at 11% error, seed 42: Top-1 {:.2}%; candidates = references: BLEU-4 1.0, ROUGE-L 1.0",
        top1 * 100.0
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let responses = dir.join("responses");
    std::fs::create_dir_all(&responses).map_err(|e| e.to_string())?;
    let mut class_list = String::new();
    let mut manifest = String::new();
    let mut references = String::new();
    for i in 0..100 {
        let id = format!("dish_{i:03}");
        let steps = [format!("Prepare dish {i}."), "Cook until done.".to_owned()];
        let knowledge = serde_json::json!({
            "food_name": format!("Dish {i}"),
            "recipe": {"ingredients": ["rice", "salt"], "steps": steps},
            "calories": "300 kcal",
            "nutrition": "Balanced.",
            "youtube_tutorial_link": format!("https://www.youtube.com/watch?v=d{i}"),
        });
        let mut text = serde_json::to_string_pretty(&knowledge).unwrap();
        if i == 37 {
            // A trailing comma makes this one response malformed.
            text = text.replacen("\"Balanced.\",", "\"Balanced.\",,", 1);
        }
        std::fs::write(responses.join(format!("{id}.txt")), format!("Here you go:\n{text}\n"))
            .map_err(|e| e.to_string())?;
        class_list.push_str(&format!("{id}\n"));
        manifest.push_str(&format!(
            "{{\"image_id\":\"r{i:03}\",\"true_class\":\"{id}\",\"split\":\"test\"}}\n"
        ));
        references.push_str(&format!(
            "{}\n",
            serde_json::json!({"class_id": id, "reference_text": steps.join(" ")})
        ));
    }
    let files = [
        ("classes.txt", class_list),
        ("manifest.jsonl", manifest),
        ("references.jsonl", references),
        (
            "provider.json",
            r#"{"provider_id": "canned-100", "kind": "canned", "model": "fixture-v1", "fixtures": "responses"}"#.into(),
        ),
        (
            "run.json",
            r#"{"run_id": "reliability", "class_list": "classes.txt", "manifest": "manifest.jsonl",
                "backend": {"kind": "stub"}, "provider": "provider.json", "references": "references.jsonl",
                "output_dir": "out", "cache_dir": "cache"}"#
                .into(),
        ),
    ];
    for (name, body) in files {
        std::fs::write(dir.join(name), body).map_err(|e| e.to_string())?;
    }
    let cfg = RunConfig::load(&dir.join("run.json")).map_err(|e| e.to_string())?;
    let out = run_pipeline(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
    let report = out.report.ok_or("run produced no report")?;
    let row = &report.generation.as_ref().ok_or("no generation report")?.rows[0];
    let md = report.to_markdown();
    ensure(
        row.parse_valid == 99
            && row.parse_attempts == 100
            && row.parse_reliability == Some(0.99)
            && md.contains("| 99.0% (99/100) |"),
        || {
            format!(
                "reliability {}/{} = {:?}",
                row.parse_valid, row.parse_attempts, row.parse_reliability
            )
        },
    )?;
    let failed: HashSet<_> = load_records(&out.run_dir)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|r| !r.parse_outcome.is_knowledge())
        .map(|r| r.image_id)
        .collect();
    ensure(failed == HashSet::from(["r037".to_owned()]), || {
        format!("unexpected failures {failed:?}")
    })?;
    Ok("100 responses, 1 malformed: parse reliability 99/100 = 99.0%".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("metric oracles (BLEU-4, ROUGE-L)", criterion_1),
        ("classification metrics and LCS brute force", criterion_2),
        ("softmax and CIoU invariants", criterion_3),
        ("parser corpus and fuzz", criterion_4),
        ("SEP ordering on the toy run", criterion_5),
        ("substitute headline numbers", criterion_6),
        ("end-to-end determinism", criterion_7),
        ("parse reliability", criterion_8),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
