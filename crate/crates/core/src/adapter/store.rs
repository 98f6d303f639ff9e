use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{write_tensors, ByteReader, ModelConfig, Site};
use crate::rng::Rng;
use crate::synth::ToolId;

use super::{init_adapter, AdapterConfig, Attach, LowRankAdapter, SiteFactors};

const MAGIC: &[u8; 4] = b"PTAD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1 + 8 + 8 * 4;
const INDEX_ENTRY_LEN: usize = 4 + 8 + 8;

/// All adapters of one run, sharing rank, scale and attachment sites.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStore {
    config: AdapterConfig,
    layers: usize,
    hidden: usize,
    d_ff: usize,
    adapters: BTreeMap<ToolId, LowRankAdapter>,
}

impl AdapterStore {
    pub fn new(config: AdapterConfig, model: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, layers: model.layers, hidden: model.hidden, d_ff: model.d_ff, adapters: BTreeMap::new() })
    }

    /// One freshly initialized adapter per tool, each from its own sub-stream.
    pub fn init(config: AdapterConfig, model: &ModelConfig, tools: &[ToolId], rng: &Rng) -> Result<Self> {
        let mut store = Self::new(config, model)?;
        for &id in tools {
            let mut sub = rng.substream(&format!("adapter/{id}"));
            store.insert(init_adapter(id, config, model, &mut sub)?)?;
        }
        Ok(store)
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn ids(&self) -> Vec<ToolId> {
        self.adapters.keys().copied().collect()
    }

    pub fn get(&self, id: ToolId) -> Result<&LowRankAdapter> {
        self.adapters.get(&id).ok_or_else(|| Error::UnknownTool(id.to_string()))
    }

    pub fn get_mut(&mut self, id: ToolId) -> Result<&mut LowRankAdapter> {
        self.adapters.get_mut(&id).ok_or_else(|| Error::UnknownTool(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &LowRankAdapter> {
        self.adapters.values()
    }

    /// Adapters in ascending tool-id order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LowRankAdapter> {
        self.adapters.values_mut()
    }

    pub fn insert(&mut self, adapter: LowRankAdapter) -> Result<()> {
        if adapter.config != self.config {
            return Err(Error::Config(format!("adapter for tool {} has a different rank/scale/sites", adapter.tool)));
        }
        if adapter.factors.len() != self.layers * 2 {
            return Err(Error::shape("store insert", format!("{} sites for {} layers", adapter.factors.len(), self.layers)));
        }
        for (i, f) in adapter.factors.iter().enumerate() {
            let site = Site::ALL[i % 2];
            let expected = self.shapes(site);
            match (f, expected) {
                (None, None) => {}
                (Some(f), Some((a, b))) if f.a.shape() == a && f.b.shape() == b => {}
                _ => return Err(Error::shape("store insert", format!("factor shapes at site {i}"))),
            }
        }
        self.adapters.insert(adapter.tool, adapter);
        Ok(())
    }

    fn shapes(&self, site: Site) -> Option<([usize; 2], [usize; 2])> {
        if !self.config.attach.includes(site) {
            return None;
        }
        let r = self.config.rank;
        let (out, inp) = match site {
            Site::Up => (self.d_ff, self.hidden),
            Site::Down => (self.hidden, self.d_ff),
        };
        Some(([out, r], [inp, r]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut head = Vec::with_capacity(HEADER_LEN);
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&(self.config.rank as u64).to_le_bytes());
        head.extend_from_slice(&self.config.scale.to_le_bytes());
        head.push(self.config.attach.code());
        head.extend_from_slice(&self.config.init_std.to_le_bytes());
        for x in [self.layers, self.hidden, self.d_ff, self.adapters.len()] {
            head.extend_from_slice(&(x as u64).to_le_bytes());
        }
        let mut blocks = Vec::new();
        let mut index = Vec::with_capacity(self.adapters.len() * INDEX_ENTRY_LEN);
        let data_start = (HEADER_LEN + self.adapters.len() * INDEX_ENTRY_LEN) as u64;
        for (id, adapter) in &self.adapters {
            let mut block = Vec::new();
            let tensors: Vec<Tensor> = adapter.tensors().into_iter().cloned().collect();
            write_tensors(&mut block, &tensors);
            index.extend_from_slice(&id.to_le_bytes());
            index.extend_from_slice(&(data_start + blocks.len() as u64).to_le_bytes());
            index.extend_from_slice(&(block.len() as u64).to_le_bytes());
            blocks.extend_from_slice(&block);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = File::create(path)?;
        f.write_all(&head)?;
        f.write_all(&index)?;
        f.write_all(&blocks)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_inner(path, None)
    }

    /// Reads only the listed tools' blocks.
    pub fn load_selected(path: &Path, tools: &[ToolId]) -> Result<Self> {
        Self::load_inner(path, Some(tools))
    }

    /// Tool ids present in a store file, without reading any factors.
    pub fn list(path: &Path) -> Result<(AdapterConfig, Vec<ToolId>)> {
        let mut f = File::open(path)?;
        let (store, index) = read_header(&mut f, path)?;
        Ok((store.config, index.keys().copied().collect()))
    }

    fn load_inner(path: &Path, tools: Option<&[ToolId]>) -> Result<Self> {
        let mut f = File::open(path)?;
        let (mut store, index) = read_header(&mut f, path)?;
        let wanted: Vec<ToolId> = match tools {
            Some(t) => {
                if let Some(missing) = t.iter().find(|id| !index.contains_key(id)) {
                    return Err(Error::UnknownTool(missing.to_string()));
                }
                t.to_vec()
            }
            None => index.keys().copied().collect(),
        };
        for id in wanted {
            let (offset, len) = index[&id];
            f.seek(SeekFrom::Start(offset))?;
            let mut bytes = vec![0u8; len as usize];
            f.read_exact(&mut bytes).map_err(|_| Error::format(path, "truncated adapter block"))?;
            let mut r = ByteReader::new(&bytes, path);
            let mut factors = Vec::with_capacity(store.layers * 2);
            for i in 0..store.layers * 2 {
                factors.push(match store.shapes(Site::ALL[i % 2]) {
                    Some((a, b)) => Some(SiteFactors { a: r.tensor(a.to_vec())?, b: r.tensor(b.to_vec())? }),
                    None => None,
                });
            }
            r.finish()?;
            store.insert(LowRankAdapter { tool: id, config: store.config, factors })?;
        }
        Ok(store)
    }
}

type Index = BTreeMap<ToolId, (u64, u64)>;

fn read_header(f: &mut File, path: &Path) -> Result<(AdapterStore, Index)> {
    let mut head = vec![0u8; HEADER_LEN];
    f.read_exact(&mut head).map_err(|_| Error::format(path, "truncated header"))?;
    let mut r = ByteReader::new(&head, path);
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not an adapter store"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { expected: VERSION, found: version });
    }
    let rank = r.u64()? as usize;
    let scale = r.f64()?;
    let attach = Attach::from_code(r.take(1)?[0]).ok_or_else(|| Error::format(path, "unknown attachment code"))?;
    let init_std = r.f64()?;
    let layers = r.u64()? as usize;
    let hidden = r.u64()? as usize;
    let d_ff = r.u64()? as usize;
    let count = r.u64()? as usize;
    let config = AdapterConfig { rank, scale, attach, init_std };
    config.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let file_len = f.metadata()?.len();
    let index_len = count.checked_mul(INDEX_ENTRY_LEN).filter(|&n| (HEADER_LEN + n) as u64 <= file_len);
    let Some(index_len) = index_len else {
        return Err(Error::format(path, "truncated index"));
    };
    let mut raw = vec![0u8; index_len];
    f.read_exact(&mut raw)?;
    let mut r = ByteReader::new(&raw, path);
    let mut index = Index::new();
    for _ in 0..count {
        let id = r.u32()?;
        let offset = r.u64()?;
        let len = r.u64()?;
        if offset.checked_add(len).is_none_or(|end| end > file_len) {
            return Err(Error::format(path, format!("block for tool {id} runs past end of file")));
        }
        if index.insert(id, (offset, len)).is_some() {
            return Err(Error::format(path, format!("tool {id} listed twice")));
        }
    }
    let store = AdapterStore { config, layers, hidden, d_ff, adapters: BTreeMap::new() };
    Ok((store, index))
}
