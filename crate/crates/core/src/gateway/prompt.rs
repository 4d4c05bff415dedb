use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{FoodClass, KNOWLEDGE_KEYS};

/// Placeholder replaced by the class display name.
pub const SLOT: &str = "{food}";

/// Version tag of the built-in structured-output template.
pub const DEFAULT_TEMPLATE_VERSION: &str = "v1";

const JSON_ONLY: &str = "MUST be a valid JSON object";

const STRUCTURED_BODY: &str = concat!(
    "You are an expert cuisine assistant. For the food ",
    "named '{food}', ",
    "provide the following information. ",
    "Your response MUST be a valid JSON object with no ",
    "other text... outside of it. ",
    "The JSON structure must have the following keys:\n",
    "- 'food_name': string\n",
    "- 'recipe': { 'ingredients': [], 'steps': [] }\n",
    "- 'calories': string (e.g., '300-400 kcal').\n",
    "- 'nutrition': string (a summary...).\n",
    "- 'youtube_tutorial_link': string (A URL...)",
);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template body must contain the slot {SLOT} exactly once")]
    Slot,
    #[error("template body does not mention required key '{0}'")]
    MissingKey(&'static str),
    #[error("template body lacks the JSON-only instruction")]
    MissingInstruction,
    #[error("unknown template version {0:?}")]
    UnknownVersion(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    version: String,
    body: String,
}

impl PromptTemplate {
    pub fn new(version: impl Into<String>, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        if body.matches(SLOT).count() != 1 {
            return Err(TemplateError::Slot);
        }
        for key in KNOWLEDGE_KEYS {
            if !body.contains(&format!("'{key}'")) {
                return Err(TemplateError::MissingKey(key));
            }
        }
        if !body.contains(JSON_ONLY) {
            return Err(TemplateError::MissingInstruction);
        }
        Ok(Self {
            version: version.into(),
            body,
        })
    }

    /// The built-in template asking for the five-key JSON object.
    pub fn structured() -> Self {
        Self::new(DEFAULT_TEMPLATE_VERSION, STRUCTURED_BODY).expect("built-in template is valid")
    }

    pub fn by_version(version: &str) -> Result<Self, TemplateError> {
        match version {
            DEFAULT_TEMPLATE_VERSION => Ok(Self::structured()),
            other => Err(TemplateError::UnknownVersion(other.to_owned())),
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn body(&self) -> &str {
        &self.body
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::structured()
    }
}

pub fn build_prompt(c: &FoodClass, template: &PromptTemplate) -> String {
    template.body.replace(SLOT, &c.display_name())
}

/// Hex SHA-256 over the fields that determine a generation. Used both as the
/// record's prompt hash and as the response-cache key.
pub fn prompt_hash(template_version: &str, provider_id: &str, model: &str, class: &FoodClass) -> String {
    let mut h = Sha256::new();
    for part in [template_version, provider_id, model, class.id()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}
