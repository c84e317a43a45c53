//! Caption conditioning over a closed vocabulary.
//!
//! Each category name maps to one learned vector; one extra row is the null
//! embedding used for classifier-free guidance. An optional frozen linear
//! projection accepts vectors from an external text encoder instead.

use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Config("vocabulary has duplicate entries".into()));
        }
        Ok(Self { names })
    }

    /// The procedural-scene categories.
    pub fn categories() -> Self {
        Self {
            names: crate::dataset::scene::CATEGORIES.iter().map(|c| c.name.to_string()).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Token id of a caption. Matching ignores case, surrounding
    /// whitespace and a leading article.
    pub fn token(&self, caption: &str) -> Result<i64> {
        let norm = Self::normalize(caption);
        self.names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(&norm))
            .map(|i| i as i64)
            .ok_or_else(|| Error::UnknownCaption(caption.to_string()))
    }

    pub fn null_token(&self) -> i64 {
        self.names.len() as i64
    }

    /// Lowercased, trimmed caption without a leading article.
    pub fn normalize(caption: &str) -> String {
        let lower = caption.trim().to_ascii_lowercase();
        for article in ["a ", "an ", "the "] {
            if let Some(rest) = lower.strip_prefix(article) {
                return rest.trim().to_string();
            }
        }
        lower
    }
}

/// `[seq, dim]` caption embedding. Sequences have length one here.
#[derive(Debug)]
pub struct TextEmbedding {
    pub data: Tensor,
    pub is_null: bool,
}

#[derive(Debug)]
pub struct TextEncoder {
    vocab: Vocabulary,
    table: nn::Embedding,
    external: Option<nn::Linear>,
    dim: i64,
}

impl TextEncoder {
    pub fn new(vs: nn::Path, vocab: Vocabulary, dim: i64, external_dim: Option<i64>) -> Self {
        let rows = vocab.len() as i64 + 1;
        let table = nn::embedding(
            &vs / "table",
            rows,
            dim,
            nn::EmbeddingConfig {
                ws_init: nn::Init::Randn { mean: 0.0, stdev: 1.0 },
                ..Default::default()
            },
        );
        let external = external_dim.map(|ed| {
            let p = &vs / "external";
            // Placeholder values until real projection weights are loaded.
            let scale = 1.0 / (ed as f64).sqrt();
            let ws = Tensor::ones([dim, ed], (tch::Kind::Float, p.device())) * scale;
            nn::Linear {
                ws: p.add("weight", ws, false),
                bs: Some(p.add("bias", Tensor::zeros([dim], (tch::Kind::Float, p.device())), false)),
            }
        });
        Self { vocab, table, external, dim }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> i64 {
        self.dim
    }

    /// `[B, dim]` embeddings for token ids (the null token included).
    pub fn embed_tokens(&self, tokens: &[i64]) -> Tensor {
        self.table.forward(&Tensor::from_slice(tokens))
    }

    pub fn encode(&self, caption: &str) -> Result<TextEmbedding> {
        let tok = self.vocab.token(caption)?;
        Ok(TextEmbedding {
            data: self.embed_tokens(&[tok]),
            is_null: false,
        })
    }

    pub fn null(&self) -> TextEmbedding {
        TextEmbedding {
            data: self.embed_tokens(&[self.vocab.null_token()]),
            is_null: true,
        }
    }

    /// Projects an externally computed text vector `[B, external_dim]`
    /// through the frozen slot.
    pub fn project_external(&self, v: &Tensor) -> Result<TextEmbedding> {
        let lin = self
            .external
            .as_ref()
            .ok_or_else(|| Error::Config("model has no external text projection".into()))?;
        Ok(TextEmbedding {
            data: lin.forward(v),
            is_null: false,
        })
    }
}
