use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{SequenceData, UserSequence, Vocab};
use crate::error::DataError;

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const USERS_FILE: &str = "users.tsv";

/// Writes `interactions.tsv` (`user_id \t item_id \t timestamp`, sorted by
/// user then time) and the `raw_key \t id` sidecars for items and users.
pub fn write_canonical(dir: &Path, data: &SequenceData) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let write = |name: &str, body: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| DataError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).map_err(|e| DataError::io(&path, e))
    };
    write(INTERACTIONS_FILE, &|w| {
        for u in &data.users {
            for (item, ts) in u.items.iter().zip(&u.timestamps) {
                writeln!(w, "{}\t{}\t{}", u.user, item, ts)?;
            }
        }
        Ok(())
    })?;
    write(VOCAB_FILE, &|w| {
        for (key, id) in data.vocab.iter() {
            writeln!(w, "{key}\t{id}")?;
        }
        Ok(())
    })?;
    write(USERS_FILE, &|w| {
        for u in &data.users {
            writeln!(w, "{}\t{}", u.raw_user, u.user)?;
        }
        Ok(())
    })
}

fn read_pairs(path: &Path) -> Result<Vec<(String, usize)>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (key, id) = l.rsplit_once('\t').ok_or_else(|| bad(path, i, "expected `key \\t id`"))?;
            let id = id.parse().map_err(|_| bad(path, i, "bad id"))?;
            Ok((key.to_string(), id))
        })
        .collect()
}

fn bad(path: &Path, line: usize, msg: &str) -> DataError {
    DataError::Canonical(format!("{}:{}: {msg}", path.display(), line + 1))
}

/// Reads a directory produced by [`write_canonical`] back into sequences
/// with ids exactly as stored.
pub fn load_canonical(dir: &Path) -> Result<SequenceData, DataError> {
    let items = read_pairs(&dir.join(VOCAB_FILE))?;
    if items.iter().enumerate().any(|(i, (_, id))| *id != i + 1) {
        return Err(DataError::Canonical("item ids must be 1..m in order".into()));
    }
    let vocab = Vocab::from_keys(items.into_iter().map(|(k, _)| k).collect());
    let user_keys = read_pairs(&dir.join(USERS_FILE))?;
    if user_keys.iter().enumerate().any(|(i, (_, id))| *id != i) {
        return Err(DataError::Canonical("user ids must be 0..n in order".into()));
    }
    let mut users: Vec<UserSequence> = user_keys
        .into_iter()
        .map(|(raw_user, user)| UserSequence {
            user,
            raw_user,
            items: Vec::new(),
            timestamps: Vec::new(),
        })
        .collect();

    let path = dir.join(INTERACTIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(&path, i, "expected 3 tab-separated fields"));
        }
        let user: usize = f[0].parse().map_err(|_| bad(&path, i, "bad user id"))?;
        let item: usize = f[1].parse().map_err(|_| bad(&path, i, "bad item id"))?;
        let ts: i64 = f[2].parse().map_err(|_| bad(&path, i, "bad timestamp"))?;
        if item == 0 || item > vocab.len() {
            return Err(bad(&path, i, "item id outside vocabulary"));
        }
        let seq = users.get_mut(user).ok_or_else(|| bad(&path, i, "unknown user id"))?;
        if seq.timestamps.last().is_some_and(|&last| ts < last) {
            return Err(bad(&path, i, "timestamps out of order"));
        }
        seq.items.push(item);
        seq.timestamps.push(ts);
    }
    Ok(SequenceData { vocab, users })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_sequences, Interaction};

    #[test]
    fn round_trip() {
        let log: Vec<Interaction> = (0..40)
            .map(|i| Interaction {
                user: format!("u{}", i % 4),
                item: format!("item {}", (i * 7) % 9),
                rating: 1.0,
                timestamp: 1000 - i,
            })
            .collect();
        let data = build_sequences(&log);
        let dir = tempfile::tempdir().unwrap();
        write_canonical(dir.path(), &data).unwrap();
        assert_eq!(load_canonical(dir.path()).unwrap(), data);
    }

    #[test]
    fn rejects_unknown_item() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(VOCAB_FILE), "a\t1\n").unwrap();
        fs::write(dir.path().join(USERS_FILE), "x\t0\n").unwrap();
        fs::write(dir.path().join(INTERACTIONS_FILE), "0\t2\t5\n").unwrap();
        assert!(matches!(load_canonical(dir.path()), Err(DataError::Canonical(_))));
    }
}
