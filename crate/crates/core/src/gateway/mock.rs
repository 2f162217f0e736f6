use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::{Backend, BackendReply, DecodingParams, GatewayError};
use crate::util::{derived_rng, sha256_hex};

/// Computes a completion for prompts that have no canned reply.
pub trait Responder: Send + Sync {
    fn respond(&self, prompt: &str) -> Option<String>;
}

impl<F> Responder for F
where
    F: Fn(&str) -> Option<String> + Send + Sync,
{
    fn respond(&self, prompt: &str) -> Option<String> {
        self(prompt)
    }
}

/// Deterministic in-process backend.
///
/// Completions are looked up by prompt hash, then delegated to an optional
/// [`Responder`]. A strict mock (the default) fails on anything else.
/// Embeddings are canned or a normalized sum of hash-seeded word vectors.
#[derive(Clone)]
pub struct MockBackend {
    model: String,
    canned: HashMap<String, String>,
    canned_embeddings: HashMap<String, Vec<f32>>,
    responder: Option<Arc<dyn Responder>>,
    embed_dim: usize,
    strict: bool,
}

impl MockBackend {
    pub fn new(model: impl Into<String>) -> Self {
        MockBackend {
            model: model.into(),
            canned: HashMap::new(),
            canned_embeddings: HashMap::new(),
            responder: None,
            embed_dim: 64,
            strict: true,
        }
    }

    pub fn with_completion(mut self, prompt: &str, completion: impl Into<String>) -> Self {
        self.canned.insert(sha256_hex(prompt), completion.into());
        self
    }

    pub fn with_embedding(mut self, text: &str, vector: Vec<f32>) -> Self {
        self.canned_embeddings.insert(sha256_hex(text), vector);
        self
    }

    pub fn with_responder(mut self, responder: impl Responder + 'static) -> Self {
        self.responder = Some(Arc::new(responder));
        self
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim.max(1);
        self
    }

    /// Unknown prompts complete to the empty string instead of failing.
    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
    }
}

impl Backend for MockBackend {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn chat(&self, prompt: &str, _params: &DecodingParams) -> Result<BackendReply, GatewayError> {
        let hash = sha256_hex(prompt);
        let text = match self.canned.get(&hash) {
            Some(t) => Some(t.clone()),
            None => self.responder.as_ref().and_then(|r| r.respond(prompt)),
        };
        match text {
            Some(text) => Ok(BackendReply { text, usage: None }),
            None if self.strict => Err(GatewayError::MockMiss { prompt_hash: hash }),
            None => Ok(BackendReply {
                text: String::new(),
                usage: None,
            }),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let hash = sha256_hex(text);
        if let Some(v) = self.canned_embeddings.get(&hash) {
            return Ok(v.clone());
        }
        // sum of per-word random directions, so shared vocabulary means similar vectors
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let keys = if words.is_empty() { vec![hash] } else { words };
        let mut v = vec![0f32; self.embed_dim];
        for key in &keys {
            let mut rng = derived_rng(0, key);
            v.iter_mut().for_each(|x| *x += rng.gen_range(-1.0f32..1.0));
        }
        let norm = v
            .iter()
            .map(|x| x * x)
            .sum::<f32>()
            .sqrt()
            .max(f32::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}
