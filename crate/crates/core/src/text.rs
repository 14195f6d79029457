//! Query tokenization, vocabulary and word embeddings.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::tensor::{Result as TensorResult, Var};

pub const UNKNOWN_ID: usize = 0;
pub const PADDING_ID: usize = 1;
const FIRST_TOKEN_ID: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextError {
    #[error("query {0:?} contains no tokens")]
    EmptyQuery(String),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
}

/// Lowercases, splits on whitespace and strips punctuation at token edges.
pub fn tokenize(text: &str) -> Result<Vec<String>, TextError> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|t| t.to_lowercase().trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(TextError::EmptyQuery(text.to_string()));
    }
    Ok(tokens)
}

/// Token → id map with reserved unknown (0) and padding (1) ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Ids are assigned by descending frequency, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self, TextError> {
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for q in corpus {
            // Queries without tokens contribute nothing.
            if let Ok(tokens) = tokenize(q.as_ref()) {
                for t in tokens {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (t, _))| (t, i + FIRST_TOKEN_ID))
            .collect();
        Ok(Self { tokens })
    }

    /// Total id count including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + FIRST_TOKEN_ID
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens.get(token).copied().unwrap_or(UNKNOWN_ID)
    }

    pub fn encode(&self, text: &str) -> Result<TokenizedQuery, TextError> {
        let surface = tokenize(text)?;
        let ids = surface.iter().map(|t| self.id(t)).collect();
        Ok(TokenizedQuery {
            token_ids: ids,
            surface_tokens: surface,
        })
    }

    /// Sorted-key JSON form.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedQuery {
    pub token_ids: Vec<usize>,
    pub surface_tokens: Vec<String>,
}

impl TokenizedQuery {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Gathers the `L × d` query features from an embedding table.
pub fn embed<'t>(query: &TokenizedQuery, table: Var<'t>) -> TensorResult<Var<'t>> {
    table.gather_rows(&query.token_ids)
}
