use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use seqbench_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{Family, Model, ModelConfig};
use crate::error::ModelError;

const MAGIC: &[u8; 8] = b"SQBCKPT1";
const VERSION: u32 = 1;

/// JSON sidecar written next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub family: Family,
    pub emb: usize,
    pub seqlen: usize,
    pub seed: u64,
    pub epoch: usize,
    pub val_metric: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    num_items: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Binary layout: magic, `u32` version, length-prefixed JSON header, `u32`
/// tensor count, then per tensor a length-prefixed name, `u32` rank, `u64`
/// dims and little-endian `f64` data. The sidecar is `<path>.json`.
pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        num_items: model.num_items,
    })
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    let side = sidecar(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(&side, json + "\n").map_err(io_err(&side))
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }
}

/// Restores a model and its sidecar metadata. Tensor names and shapes must
/// match what the stored config builds.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), ModelError> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(path))?;
    let mut c = Cursor { buf: &raw, at: 0 };
    if c.take(8)? != MAGIC {
        return Err(ModelError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = c.u32()? as u32;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = c.u32()?;
    let header: Header = serde_json::from_slice(c.take(hlen)?).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let template = Model::new(&header.config, header.num_items, &mut crate::seeding::stream(0, &[]))?;
    let count = c.u32()?;
    if count != template.params().len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            template.params().len()
        )));
    }
    let mut store = ParamStore::new();
    for i in 0..count {
        let nlen = c.u32()?;
        let name = String::from_utf8(c.take(nlen)?.to_vec()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
        let expected = &template.params().tensors()[i];
        if name != template.params().names()[i] || shape != expected.shape() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor `{name}` with shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let bytes = c.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        store.push(name, Tensor::from_vec(&shape, data)?, template.params().has_pad_row(i));
    }
    if c.at != raw.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    let side = sidecar(path);
    let meta_text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let meta = serde_json::from_str(&meta_text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    Ok((Model::from_parts(header.config, header.num_items, store), meta))
}
