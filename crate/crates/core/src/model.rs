//! Domain types shared by every pipeline stage.
//!
//! Class ids are the single canonical identity of a dish. Display names are
//! always derived from the id and never stored on their own.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid class id {0:?}: expected lowercase words of [a-z0-9] joined by single underscores")]
    InvalidClassId(String),
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceRange(f64),
    #[error("top-k probability {0} outside [0, 1]")]
    TopKRange(f64),
    #[error("top-k probabilities must be non-increasing")]
    TopKOrder,
    #[error("top-k head {head} does not match predicted class {predicted}")]
    TopKHead { head: String, predicted: String },
    #[error("image id must not be empty")]
    EmptyImageId,
}

/// Canonical dish label, e.g. `mapo_tofu`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FoodClass(String);

impl FoodClass {
    pub fn new(id: impl Into<String>) -> Result<Self, ModelError> {
        let id = id.into();
        if is_valid_class_id(&id) {
            Ok(Self(id))
        } else {
            Err(ModelError::InvalidClassId(id))
        }
    }

    /// Inverse of [`FoodClass::display_name`]: spaces become underscores.
    pub fn from_display_name(name: &str) -> Result<Self, ModelError> {
        Self::new(name.replace(' ', "_"))
    }

    pub fn id(&self) -> &str {
        &self.0
    }

    /// The id with every underscore replaced by a single space.
    pub fn display_name(&self) -> String {
        self.0.replace('_', " ")
    }
}

fn is_valid_class_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .split('_')
            .all(|word| !word.is_empty() && word.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()))
}

impl TryFrom<String> for FoodClass {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<FoodClass> for String {
    fn from(value: FoodClass) -> Self {
        value.0
    }
}

impl fmt::Display for FoodClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One classified image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub true_class: FoodClass,
    pub predicted_class: FoodClass,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<Vec<(FoodClass, f64)>>,
    /// Backend that produced the prediction (remote endpoints tag their id here).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.true_class == self.predicted_class
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_id.is_empty() {
            return Err(ModelError::EmptyImageId);
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ModelError::ConfidenceRange(self.confidence));
        }
        if let Some(top_k) = &self.top_k {
            let mut prev = f64::INFINITY;
            for (_, p) in top_k {
                if !(0.0..=1.0).contains(p) {
                    return Err(ModelError::TopKRange(*p));
                }
                if *p > prev {
                    return Err(ModelError::TopKOrder);
                }
                prev = *p;
            }
            if let Some((head, _)) = top_k.first() {
                if head != &self.predicted_class {
                    return Err(ModelError::TopKHead {
                        head: head.to_string(),
                        predicted: self.predicted_class.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// The first `k` ranked classes. With no ranking only the top-1 prediction is known.
    pub fn ranked(&self, k: usize) -> Vec<&FoodClass> {
        match &self.top_k {
            Some(list) => list.iter().take(k).map(|(c, _)| c).collect(),
            None => vec![&self.predicted_class],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub ingredients: Vec<String>,
    pub steps: Vec<String>,
}

/// The structured payload requested from the generative model.
///
/// Serializes in the same nested shape the prompt asks for, so a value can be
/// fed back through [`validate_knowledge`] unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedKnowledge {
    pub food_name: String,
    pub recipe: Recipe,
    pub calories: String,
    pub nutrition: String,
    pub youtube_tutorial_link: String,
}

impl GeneratedKnowledge {
    pub fn recipe_ingredients(&self) -> &[String] {
        &self.recipe.ingredients
    }

    pub fn recipe_steps(&self) -> &[String] {
        &self.recipe.steps
    }
}

/// Every key that failed validation, grouped by failure type.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SchemaViolation {
    pub missing_keys: Vec<String>,
    pub wrong_shape_keys: Vec<String>,
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "schema violation")?;
        if !self.missing_keys.is_empty() {
            write!(f, "; missing: {}", self.missing_keys.join(", "))?;
        }
        if !self.wrong_shape_keys.is_empty() {
            write!(f, "; wrong shape: {}", self.wrong_shape_keys.join(", "))?;
        }
        Ok(())
    }
}

impl std::error::Error for SchemaViolation {}

pub const KNOWLEDGE_KEYS: [&str; 5] = ["food_name", "recipe", "calories", "nutrition", "youtube_tutorial_link"];

/// Checks a parsed document against the five-key knowledge contract.
///
/// Total over any JSON value. Unknown extra keys are ignored.
pub fn validate_knowledge(candidate: &Value) -> Result<GeneratedKnowledge, SchemaViolation> {
    let mut violation = SchemaViolation::default();
    let Some(obj) = candidate.as_object() else {
        violation.wrong_shape_keys.push("$".to_owned());
        return Err(violation);
    };

    let text_field = |key: &str, require_non_empty: bool, v: &mut SchemaViolation| -> String {
        match obj.get(key) {
            None => {
                v.missing_keys.push(key.to_owned());
                String::new()
            }
            Some(Value::String(s)) if !require_non_empty || !s.trim().is_empty() => s.clone(),
            Some(_) => {
                v.wrong_shape_keys.push(key.to_owned());
                String::new()
            }
        }
    };

    let food_name = text_field("food_name", true, &mut violation);

    let mut ingredients = Vec::new();
    let mut steps = Vec::new();
    match obj.get("recipe") {
        None => violation.missing_keys.push("recipe".to_owned()),
        Some(Value::Object(recipe)) => {
            for (key, out) in [("ingredients", &mut ingredients), ("steps", &mut steps)] {
                let path = format!("recipe.{key}");
                match recipe.get(key) {
                    None => violation.missing_keys.push(path),
                    Some(value) => match string_list(value) {
                        Some(list) if !list.is_empty() => *out = list,
                        _ => violation.wrong_shape_keys.push(path),
                    },
                }
            }
        }
        Some(_) => violation.wrong_shape_keys.push("recipe".to_owned()),
    }

    let calories = text_field("calories", false, &mut violation);
    let nutrition = text_field("nutrition", false, &mut violation);
    let link = text_field("youtube_tutorial_link", false, &mut violation);
    if obj.contains_key("youtube_tutorial_link")
        && !violation.wrong_shape_keys.iter().any(|k| k == "youtube_tutorial_link")
        && !is_url_shaped(&link)
    {
        violation.wrong_shape_keys.push("youtube_tutorial_link".to_owned());
    }

    if violation.missing_keys.is_empty() && violation.wrong_shape_keys.is_empty() {
        Ok(GeneratedKnowledge {
            food_name,
            recipe: Recipe { ingredients, steps },
            calories,
            nutrition,
            youtube_tutorial_link: link,
        })
    } else {
        Err(violation)
    }
}

fn string_list(value: &Value) -> Option<Vec<String>> {
    value
        .as_array()?
        .iter()
        .map(|v| v.as_str().map(str::to_owned))
        .collect()
}

/// Scheme plus host; the link is never fetched.
pub fn is_url_shaped(s: &str) -> bool {
    url::Url::parse(s.trim())
        .map(|u| u.host_str().is_some_and(|h| !h.is_empty()))
        .unwrap_or(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latency {
    pub classify: f64,
    pub generate: f64,
}

/// Why a structured parse of a raw response failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseErrorKind {
    NoJson,
    Malformed,
    SchemaViolation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub message: String,
    pub raw_excerpt: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Result of asking the generative stage about one class.
///
/// `GenerationFailed` covers transport problems where no raw response exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseOutcome {
    Knowledge(GeneratedKnowledge),
    Error(ParseError),
    GenerationFailed { kind: String, message: String },
}

impl ParseOutcome {
    pub fn knowledge(&self) -> Option<&GeneratedKnowledge> {
        match self {
            ParseOutcome::Knowledge(k) => Some(k),
            _ => None,
        }
    }

    pub fn is_knowledge(&self) -> bool {
        matches!(self, ParseOutcome::Knowledge(_))
    }

    /// True when a raw response was obtained, whether or not it parsed.
    pub fn has_response(&self) -> bool {
        !matches!(self, ParseOutcome::GenerationFailed { .. })
    }
}

impl From<Result<GeneratedKnowledge, ParseError>> for ParseOutcome {
    fn from(value: Result<GeneratedKnowledge, ParseError>) -> Self {
        match value {
            Ok(k) => ParseOutcome::Knowledge(k),
            Err(e) => ParseOutcome::Error(e),
        }
    }
}

/// Second generation for the true class of a misclassified image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueClassGeneration {
    pub prompt_hash: String,
    pub raw_response: String,
    pub parse_outcome: ParseOutcome,
    pub latency_ms: f64,
}

/// Full provenance for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub image_id: String,
    pub prediction: PredictionRecord,
    pub prompt_hash: String,
    pub raw_response: String,
    pub parse_outcome: ParseOutcome,
    pub latency_ms: Latency,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_class_generation: Option<TrueClassGeneration>,
}
