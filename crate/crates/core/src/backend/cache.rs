//! Content-addressed on-disk store of raw backend responses.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::wire::{CompletionRequest, RequestKind};
use crate::error::{Error, Result};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub backend_id: String,
    pub model: String,
    pub prompt_digest: String,
    pub params_digest: String,
    pub kind: RequestKind,
}

impl CacheKey {
    pub fn new(
        backend_id: &str,
        model: &str,
        request: &CompletionRequest,
        kind: RequestKind,
    ) -> Self {
        let params = serde_json::json!({
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "logprobs": request.logprobs,
            "echo": request.echo,
            "num_beams": request.num_beams,
            "seed": request.seed,
        });
        Self {
            backend_id: backend_id.to_string(),
            model: model.to_string(),
            prompt_digest: sha256_hex(request.prompt.as_bytes()),
            params_digest: sha256_hex(params.to_string().as_bytes()),
            kind,
        }
    }

    /// Hex digest naming this key's cache file.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.backend_id.as_str(),
            self.model.as_str(),
            self.prompt_digest.as_str(),
            self.params_digest.as_str(),
            self.kind.as_str(),
        ] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// One file per key digest, holding the raw JSON response body.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest()))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<String>> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(body) => Ok(Some(body)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Write through a temporary file and rename, so readers see either the
    /// old state or the complete body.
    pub fn put(&self, key: &CacheKey, body: &str) -> Result<()> {
        let path = self.path_for(key);
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            key.digest(),
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::SeqCst)
        ));
        fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(prompt: &str, temperature: f64) -> CompletionRequest {
        CompletionRequest {
            model: "m".into(),
            prompt: prompt.into(),
            max_tokens: 4,
            temperature,
            top_p: 1.0,
            logprobs: 0,
            echo: false,
            num_beams: None,
            seed: None,
            continuation_offset: None,
        }
    }

    #[test]
    fn keys_differ_by_every_component() {
        let base = CacheKey::new("b", "m", &request("p", 0.0), RequestKind::Generate);
        assert_eq!(
            base,
            CacheKey::new("b", "m", &request("p", 0.0), RequestKind::Generate)
        );
        assert_eq!(
            base.digest(),
            CacheKey::new("b", "m", &request("p", 0.0), RequestKind::Generate).digest()
        );
        let variants = [
            CacheKey::new("b2", "m", &request("p", 0.0), RequestKind::Generate),
            CacheKey::new("b", "m2", &request("p", 0.0), RequestKind::Generate),
            CacheKey::new("b", "m", &request("q", 0.0), RequestKind::Generate),
            CacheKey::new("b", "m", &request("p", 1.0), RequestKind::Generate),
            CacheKey::new("b", "m", &request("p", 0.0), RequestKind::Score),
        ];
        for v in variants {
            assert_ne!(base.digest(), v.digest());
        }
    }

    #[test]
    fn prompt_digest_is_sha256_of_utf8() {
        let k = CacheKey::new("b", "m", &request("abc", 0.0), RequestKind::Generate);
        assert_eq!(
            k.prompt_digest,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let k = CacheKey::new("b", "m", &request("p", 0.0), RequestKind::Generate);
        assert_eq!(cache.get(&k).unwrap(), None);
        cache.put(&k, r#"{"choices":[{"text":"x"}]}"#).unwrap();
        assert_eq!(
            cache.get(&k).unwrap().as_deref(),
            Some(r#"{"choices":[{"text":"x"}]}"#)
        );
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
    }
}
