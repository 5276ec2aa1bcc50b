//! SHA-256 helpers used for cache keys and the run manifest.

use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

/// Incremental digest over a sequence of length-prefixed fields, so that
/// `("ab", "c")` and `("a", "bc")` never collide.
#[derive(Default, Clone)]
pub struct FieldHasher {
    inner: Sha256,
}

impl FieldHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(mut self, bytes: impl AsRef<[u8]>) -> Self {
        let bytes = bytes.as_ref();
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
        self
    }

    pub fn finish_hex(self) -> String {
        hex::encode(self.finish_bytes())
    }

    pub fn finish_bytes(self) -> [u8; 32] {
        self.inner.finalize().into()
    }
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

pub fn file_sha256_hex(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(fs::read(path)?))
}
