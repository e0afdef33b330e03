//! On-disk call cache keyed by `(fingerprint, sample_index)`.
//!
//! One file per key, written atomically (temp file + rename), so readers
//! never observe partial entries and concurrent writers of the same key
//! settle on one complete value. The stored value is the normalized
//! completion JSON, which keeps the cache gateway-agnostic: scripted and
//! HTTP runs share the same resumability story.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChatMessage, Completion, FinishReason, Gateway, GatewayError, GenerationParams};

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    fingerprint: String,
    sample_index: u32,
    text: String,
    finish_reason: FinishReason,
}

pub struct CachedGateway<G> {
    inner: G,
    dir: PathBuf,
}

impl<G: Gateway> CachedGateway<G> {
    pub fn new(inner: G, dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| GatewayError::Cache {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self { inner, dir })
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }

    fn entry_path(&self, fingerprint: &str, sample_index: u32) -> PathBuf {
        self.dir.join(format!("{fingerprint}-{sample_index}.json"))
    }

    fn read_entry(&self, path: &Path) -> Option<Completion> {
        let text = std::fs::read_to_string(path).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        Some(Completion {
            text: entry.text,
            finish_reason: entry.finish_reason,
            request_fingerprint: entry.fingerprint,
        })
    }

    fn write_entry(&self, path: &Path, entry: &CacheEntry) -> Result<(), GatewayError> {
        let cache_err = |message: String| GatewayError::Cache {
            path: path.display().to_string(),
            message,
        };
        let tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| cache_err(e.to_string()))?;
        serde_json::to_writer(&tmp, entry).map_err(|e| cache_err(e.to_string()))?;
        tmp.persist(path).map_err(|e| cache_err(e.to_string()))?;
        Ok(())
    }
}

impl<G: Gateway> Gateway for CachedGateway<G> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        let fingerprint = super::request_fingerprint(self.inner.model_name(), messages, params);
        let path = self.entry_path(&fingerprint, sample_index);
        if let Some(hit) = self.read_entry(&path) {
            return Ok(hit);
        }
        let completion = self.inner.complete(messages, params, sample_index)?;
        self.write_entry(
            &path,
            &CacheEntry {
                fingerprint: completion.request_fingerprint.clone(),
                sample_index,
                text: completion.text.clone(),
                finish_reason: completion.finish_reason,
            },
        )?;
        Ok(completion)
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}
