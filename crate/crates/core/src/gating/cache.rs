use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ByteReader, TransformerModel};
use crate::synth::ToolId;

use super::encode_tool;

const MAGIC: &[u8; 4] = b"PTEC";
const VERSION: u32 = 1;

/// Tool-document embeddings keyed by tool id and a hash of the document tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingCache {
    entries: BTreeMap<(ToolId, [u8; 32]), Vec<f64>>,
}

pub fn document_hash(document: &[usize]) -> [u8; 32] {
    let mut h = Sha256::new();
    for id in document {
        h.update((*id as u64).to_le_bytes());
    }
    h.finalize().into()
}

impl EmbeddingCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, tool: ToolId, document: &[usize]) -> Option<&Vec<f64>> {
        self.entries.get(&(tool, document_hash(document)))
    }

    /// Cached embedding, computing and storing it on a miss.
    pub fn embed(&mut self, model: &TransformerModel, tool: ToolId, document: &[usize]) -> Result<Vec<f64>> {
        let key = (tool, document_hash(document));
        if let Some(v) = self.entries.get(&key) {
            return Ok(v.clone());
        }
        let v = encode_tool(model, document)?;
        self.entries.insert(key, v.clone());
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for ((tool, hash), v) in &self.entries {
            buf.extend_from_slice(&tool.to_le_bytes());
            buf.extend_from_slice(hash);
            buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not an embedding cache"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { expected: VERSION, found: version });
        }
        let count = r.u64()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let tool = r.u32()?;
            let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let dim = r.u64()? as usize;
            if dim > bytes.len() / 8 {
                return Err(Error::format(path, "embedding longer than file"));
            }
            let v = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.insert((tool, hash), v);
        }
        r.finish()?;
        Ok(Self { entries })
    }
}
