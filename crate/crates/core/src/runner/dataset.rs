use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_sequences, five_core_filter, load_canonical, parse_reader, write_canonical, DatasetFormat, SequenceData};
use crate::error::{DataError, RunError};

const PIPELINE_TAG: &[u8] = b"five-core/v1";
const STATS_FILE: &str = "stats.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub format: DatasetFormat,
    pub source_sha256: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

pub struct PreparedDataset {
    pub data: SequenceData,
    pub stats: DatasetStats,
    pub dir: PathBuf,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses, 5-core filters and sequences raw bytes.
pub fn preprocess_bytes(name: &str, format: DatasetFormat, raw: &[u8], source: &str) -> Result<(SequenceData, DatasetStats), DataError> {
    let interactions = parse_reader(format, raw, source)?;
    let data = build_sequences(&five_core_filter(&interactions));
    let stats = DatasetStats {
        name: name.to_string(),
        format,
        source_sha256: hex(&Sha256::digest(raw)),
        users: data.users.len(),
        items: data.num_items(),
        interactions: data.num_interactions(),
    };
    Ok((data, stats))
}

fn write_dir(dir: &Path, data: &SequenceData, stats: &DatasetStats) -> Result<(), RunError> {
    write_canonical(dir, data)?;
    let json = serde_json::to_string_pretty(stats).expect("stats serialize");
    let path = dir.join(STATS_FILE);
    fs::write(&path, json + "\n").map_err(|e| RunError::io(path, e))
}

/// Writes the processed dataset to `out` in the canonical layout.
pub fn preprocess(name: &str, format: DatasetFormat, input: &Path, out: &Path) -> Result<DatasetStats, RunError> {
    let raw = fs::read(input).map_err(|e| DataError::io(input, e))?;
    let (data, stats) = preprocess_bytes(name, format, &raw, &input.display().to_string())?;
    write_dir(out, &data, &stats)?;
    Ok(stats)
}

/// Loads a directory written by [`preprocess`].
pub fn load_processed(dir: &Path) -> Result<PreparedDataset, RunError> {
    let data = load_canonical(dir)?;
    let path = dir.join(STATS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let stats = serde_json::from_str(&text).map_err(|e| DataError::Canonical(format!("{}: {e}", path.display())))?;
    Ok(PreparedDataset {
        data,
        stats,
        dir: dir.to_path_buf(),
    })
}

/// Content-addressed cache under `cache_root`: the same raw bytes and format
/// always map to the same directory, which is built once and then reused.
pub fn prepare_cached(name: &str, format: DatasetFormat, input: &Path, cache_root: &Path) -> Result<PreparedDataset, RunError> {
    let raw = fs::read(input).map_err(|e| DataError::io(input, e))?;
    let mut h = Sha256::new();
    h.update(PIPELINE_TAG);
    h.update(format.to_string().as_bytes());
    h.update([0]);
    h.update(&raw);
    let key = hex(&h.finalize()[..8]);
    let dir = cache_root.join(&key);
    if dir.join(STATS_FILE).exists() {
        return load_processed(&dir);
    }
    let (data, stats) = preprocess_bytes(name, format, &raw, &input.display().to_string())?;
    let tmp = cache_root.join(format!(".{key}.{}", std::process::id()));
    write_dir(&tmp, &data, &stats)?;
    if let Err(e) = fs::rename(&tmp, &dir) {
        let _ = fs::remove_dir_all(&tmp);
        if !dir.join(STATS_FILE).exists() {
            return Err(RunError::io(&dir, e));
        }
    }
    Ok(PreparedDataset { data, stats, dir })
}
