//! Semantic error propagation: how far the generated knowledge for a
//! misclassified image drifts from what the correct class would have
//! produced, measured as `1 − cos` between sentence embeddings and averaged
//! over the misclassified set.

pub mod providers;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FoodClass, GeneratedKnowledge};

pub use providers::{
    embedder_from_spec, EmbeddingProvider, FileEmbedder, RemoteEmbedder, RemoteEmbedderConfig, StubEmbedder,
};

/// Default boundary between the two error cases.
pub const DEFAULT_CASE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SepError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("provider mismatch: {0} vs {1}")]
    ProviderMismatch(String, String),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding quota exceeded: {0}")]
    QuotaExceeded(String),
    #[error("the misclassified set is empty")]
    EmptyErrorSet,
    #[error("embedding has a non-finite component")]
    NonFinite,
    #[error("embedding has zero norm")]
    ZeroVector,
}

/// Unit-length sentence embedding tagged with the provider that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    provider_id: String,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit L2 norm.
    pub fn new(values: Vec<f64>, provider_id: &str) -> Result<Self, SepError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SepError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(SepError::ZeroVector);
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
            provider_id: provider_id.to_owned(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }
}

/// `1 − u·v`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, SepError> {
    if u.provider_id != v.provider_id {
        return Err(SepError::ProviderMismatch(u.provider_id.clone(), v.provider_id.clone()));
    }
    if u.dim() != v.dim() {
        return Err(SepError::DimensionMismatch(u.dim(), v.dim()));
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    /// Wrong dish from an unrelated family; the output diverges strongly.
    Mismatch,
    /// Wrong but closely related dish; the output looks nearly right.
    Similarity,
}

impl ErrorKind {
    pub fn label(self) -> &'static str {
        match self {
            ErrorKind::Mismatch => "High Semantic Mismatch",
            ErrorKind::Similarity => "High Semantic Similarity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub kind: ErrorKind,
    pub threshold_used: f64,
}

/// `Mismatch` iff `d_sem >= threshold`.
pub fn classify_error_case(d_sem: f64, threshold: f64) -> ErrorCase {
    let kind = if d_sem >= threshold {
        ErrorKind::Mismatch
    } else {
        ErrorKind::Similarity
    };
    ErrorCase {
        kind,
        threshold_used: threshold,
    }
}

/// Food name, ingredients, steps and nutrition joined by single spaces.
pub fn serialize_for_embedding(k: &GeneratedKnowledge) -> String {
    let parts = std::iter::once(k.food_name.as_str())
        .chain(k.recipe.ingredients.iter().map(String::as_str))
        .chain(k.recipe.steps.iter().map(String::as_str))
        .chain(std::iter::once(k.nutrition.as_str()));
    parts.flat_map(str::split_whitespace).collect::<Vec<_>>().join(" ")
}

/// A misclassified image with knowledge generated for both classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub image_id: String,
    pub predicted_class: FoodClass,
    pub true_class: FoodClass,
    pub predicted_knowledge: GeneratedKnowledge,
    pub true_knowledge: GeneratedKnowledge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SepPair {
    pub image_id: String,
    pub predicted_class: FoodClass,
    pub true_class: FoodClass,
    pub d_sem: f64,
    pub case: ErrorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSep {
    pub predicted_class: FoodClass,
    pub true_class: FoodClass,
    pub count: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SepResult {
    pub provider_id: String,
    pub threshold: f64,
    pub per_pair: Vec<SepPair>,
    pub mean_overall: f64,
    pub mean_by_case: BTreeMap<ErrorKind, f64>,
    /// Mean per (true → predicted) confusion, ordered by true then predicted class.
    pub by_confusion: Vec<ConfusionSep>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn sep_aggregate(
    errors: &[ErrorPair],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<SepResult, SepError> {
    if errors.is_empty() {
        return Err(SepError::EmptyErrorSet);
    }
    let mut texts = Vec::with_capacity(errors.len() * 2);
    for e in errors {
        texts.push(serialize_for_embedding(&e.predicted_knowledge));
        texts.push(serialize_for_embedding(&e.true_knowledge));
    }
    let vectors = provider.embed(&texts)?;

    let mut per_pair = Vec::with_capacity(errors.len());
    for (e, pair) in errors.iter().zip(vectors.chunks(2)) {
        let d_sem = cosine_distance(&pair[0], &pair[1])?;
        per_pair.push(SepPair {
            image_id: e.image_id.clone(),
            predicted_class: e.predicted_class.clone(),
            true_class: e.true_class.clone(),
            d_sem,
            case: classify_error_case(d_sem, threshold).kind,
        });
    }

    let all: Vec<f64> = per_pair.iter().map(|p| p.d_sem).collect();
    let mut by_case: BTreeMap<ErrorKind, Vec<f64>> = BTreeMap::new();
    let mut by_confusion: BTreeMap<(FoodClass, FoodClass), Vec<f64>> = BTreeMap::new();
    for p in &per_pair {
        by_case.entry(p.case).or_default().push(p.d_sem);
        by_confusion
            .entry((p.true_class.clone(), p.predicted_class.clone()))
            .or_default()
            .push(p.d_sem);
    }

    Ok(SepResult {
        provider_id: provider.provider_id().to_owned(),
        threshold,
        mean_overall: mean(&all),
        mean_by_case: by_case.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
        by_confusion: by_confusion
            .into_iter()
            .map(|((true_class, predicted_class), v)| ConfusionSep {
                predicted_class,
                true_class,
                count: v.len(),
                mean: mean(&v),
            })
            .collect(),
        per_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Recipe;

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec(), "t").unwrap()
    }

    fn knowledge(name: &str, ingredients: &[&str], steps: &[&str]) -> GeneratedKnowledge {
        GeneratedKnowledge {
            food_name: name.into(),
            recipe: Recipe {
                ingredients: ingredients.iter().map(|s| s.to_string()).collect(),
                steps: steps.iter().map(|s| s.to_string()).collect(),
            },
            calories: "300-400 kcal".into(),
            nutrition: "Rich in protein.".into(),
            youtube_tutorial_link: "https://youtu.be/x".into(),
        }
    }

    fn fc(s: &str) -> FoodClass {
        FoodClass::new(s).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = unit(&[1.0, 0.0]);
        assert_eq!(cosine_distance(&u, &u).unwrap(), 0.0);
        assert_eq!(cosine_distance(&u, &unit(&[0.0, 1.0])).unwrap(), 1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = cosine_distance(&u, &unit(&[h, h])).unwrap();
        assert!((d - 0.292893218813452).abs() < 1e-12);
        assert!((cosine_distance(&u, &unit(&[-1.0, 0.0])).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        let a = unit(&[1.0, 0.0]);
        assert_eq!(
            cosine_distance(&a, &unit(&[1.0, 0.0, 0.0])),
            Err(SepError::DimensionMismatch(2, 3))
        );
        let other = EmbeddingVector::new(vec![1.0, 0.0], "x").unwrap();
        assert!(matches!(
            cosine_distance(&a, &other),
            Err(SepError::ProviderMismatch(..))
        ));
        assert_eq!(EmbeddingVector::new(vec![0.0, 0.0], "t"), Err(SepError::ZeroVector));
        assert_eq!(EmbeddingVector::new(vec![f64::NAN, 1.0], "t"), Err(SepError::NonFinite));
    }

    #[test]
    fn normalized_on_construction() {
        let v = unit(&[3.0, 4.0]);
        assert_eq!(v.values(), &[0.6, 0.8]);
    }

    #[test]
    fn case_boundaries() {
        assert_eq!(classify_error_case(0.85, 0.5).kind, ErrorKind::Mismatch);
        assert_eq!(classify_error_case(0.15, 0.5).kind, ErrorKind::Similarity);
        assert_eq!(classify_error_case(0.5, 0.5).kind, ErrorKind::Mismatch);
        assert_eq!(classify_error_case(0.3, 0.2).threshold_used, 0.2);
    }

    #[test]
    fn serialization_golden() {
        let k = knowledge(
            "Mapo  Tofu",
            &["tofu", "minced pork"],
            &["Cube the tofu.", " Simmer in  chili bean paste. "],
        );
        assert_eq!(
            serialize_for_embedding(&k),
            "Mapo Tofu tofu minced pork Cube the tofu. Simmer in chili bean paste. Rich in protein."
        );
        assert_eq!(serialize_for_embedding(&k), serialize_for_embedding(&k.clone()));
        let mut permuted = k.clone();
        permuted.recipe.ingredients.reverse();
        assert_ne!(serialize_for_embedding(&k), serialize_for_embedding(&permuted));
    }

    #[test]
    fn aggregate_identical_is_zero() {
        let k = knowledge("Rice", &["rice"], &["Boil."]);
        let pairs = vec![ErrorPair {
            image_id: "i".into(),
            predicted_class: fc("a"),
            true_class: fc("b"),
            predicted_knowledge: k.clone(),
            true_knowledge: k,
        }];
        let r = sep_aggregate(&pairs, &StubEmbedder::default(), 0.5).unwrap();
        assert_eq!(r.mean_overall, 0.0);
        assert_eq!(r.per_pair[0].case, ErrorKind::Similarity);
        assert_eq!(r.mean_by_case.len(), 1);
    }

    #[test]
    fn aggregate_empty_fails() {
        assert_eq!(
            sep_aggregate(&[], &StubEmbedder::default(), 0.5),
            Err(SepError::EmptyErrorSet)
        );
    }

    #[test]
    fn near_duplicates_score_below_disjoint() {
        let vocab_a = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"];
        let vocab_b = ["india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa"];
        let mut pairs = Vec::new();
        for i in 0..5 {
            let base: Vec<&str> = vocab_a.iter().cycle().skip(i).take(8).copied().collect();
            let mut near = base.clone();
            near[7] = "zulu";
            pairs.push(ErrorPair {
                image_id: format!("sim{i}"),
                predicted_class: fc("spicy_sauteed_shrimp"),
                true_class: fc("spicy_crayfish"),
                predicted_knowledge: knowledge("x", &near, &["stir"]),
                true_knowledge: knowledge("x", &base, &["stir"]),
            });
            let other: Vec<&str> = vocab_b.iter().cycle().skip(i).take(8).copied().collect();
            pairs.push(ErrorPair {
                image_id: format!("mis{i}"),
                predicted_class: fc("kung_pao_chicken"),
                true_class: fc("mapo_tofu"),
                predicted_knowledge: GeneratedKnowledge {
                    food_name: "y".into(),
                    nutrition: "low".into(),
                    ..knowledge("y", &other, &["roast"])
                },
                true_knowledge: knowledge("x", &base, &["stir"]),
            });
        }
        let r = sep_aggregate(&pairs, &StubEmbedder::default(), 0.5).unwrap();
        let recomputed = r.per_pair.iter().map(|p| p.d_sem).sum::<f64>() / r.per_pair.len() as f64;
        assert_eq!(r.mean_overall, recomputed);
        let sim = r
            .by_confusion
            .iter()
            .find(|c| c.true_class == fc("spicy_crayfish"))
            .unwrap();
        let mis = r.by_confusion.iter().find(|c| c.true_class == fc("mapo_tofu")).unwrap();
        assert!(sim.mean < mis.mean, "{} vs {}", sim.mean, mis.mean);
        assert!(r.mean_by_case[&ErrorKind::Similarity] < r.mean_by_case[&ErrorKind::Mismatch]);
    }
}
