use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::DataError;

/// One observed user-item event. Ratings are kept only for provenance; every
/// event counts as implicit positive feedback.
#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// `u.data` (tab), `ratings.dat` (`::`) or `ratings.csv` (comma, header).
    Movielens,
    /// `user,item,rating,timestamp`, no header.
    Amazon,
    /// Foursquare check-in TSV with a UTC time string in the last column.
    Foursquare,
    /// `user_id \t item_id \t timestamp` as written by `write_canonical`.
    Canonical,
}

impl FromStr for DatasetFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "movielens" => Ok(Self::Movielens),
            "amazon" => Ok(Self::Amazon),
            "foursquare" => Ok(Self::Foursquare),
            "canonical" => Ok(Self::Canonical),
            _ => Err(DataError::UnknownFormat(s.to_string())),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Movielens => "movielens",
            Self::Amazon => "amazon",
            Self::Foursquare => "foursquare",
            Self::Canonical => "canonical",
        })
    }
}

pub fn parse_dataset(format: DatasetFormat, path: &Path) -> Result<Vec<Interaction>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_reader(format, BufReader::new(file), &path.display().to_string())
}

/// Parses any buffered source. Lines are decoded lossily so stray non-UTF-8
/// bytes in free-text columns (Foursquare categories) do not abort parsing.
pub fn parse_reader<R: BufRead>(format: DatasetFormat, mut reader: R, source_name: &str) -> Result<Vec<Interaction>, DataError> {
    let mut out = Vec::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| DataError::io(source_name, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let text = String::from_utf8_lossy(&buf);
        let line = text.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            msg,
        };
        let parsed = match format {
            DatasetFormat::Movielens => {
                if line_no == 1 && line.starts_with("userId") {
                    continue;
                }
                let sep = if line.contains("::") {
                    "::"
                } else if line.contains('\t') {
                    "\t"
                } else {
                    ","
                };
                rating_line(line, sep).map_err(err)?
            }
            DatasetFormat::Amazon => rating_line(line, ",").map_err(err)?,
            DatasetFormat::Foursquare => foursquare_line(line).map_err(err)?,
            DatasetFormat::Canonical => canonical_line(line).map_err(err)?,
        };
        out.push(parsed);
    }
    Ok(out)
}

fn timestamp(field: &str) -> Result<i64, String> {
    let field = field.trim();
    let ts = match field.parse::<i64>() {
        Ok(v) => v,
        Err(_) => {
            let f: f64 = field.parse().map_err(|_| format!("bad timestamp `{field}`"))?;
            if f.fract() != 0.0 || !f.is_finite() {
                return Err(format!("bad timestamp `{field}`"));
            }
            f as i64
        }
    };
    if ts < 0 {
        return Err(format!("negative timestamp {ts}"));
    }
    Ok(ts)
}

fn rating_line(line: &str, sep: &str) -> Result<Interaction, String> {
    let fields: Vec<&str> = line.split(sep).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields separated by {sep:?}, found {}", fields.len()));
    }
    let rating = fields[2]
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("bad rating `{}`", fields[2]))?;
    key(fields[0]).and_then(|user| {
        Ok(Interaction {
            user,
            item: key(fields[1])?,
            rating,
            timestamp: timestamp(fields[3])?,
        })
    })
}

fn key(field: &str) -> Result<String, String> {
    let k = field.trim();
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok(k.to_string())
}

fn foursquare_line(line: &str) -> Result<Interaction, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(format!("expected at least 3 tab-separated fields, found {}", fields.len()));
    }
    let when = fields[fields.len() - 1].trim();
    let ts = chrono::DateTime::parse_from_str(when, "%a %b %d %H:%M:%S %z %Y")
        .map_err(|e| format!("bad UTC time `{when}`: {e}"))?
        .timestamp();
    if ts < 0 {
        return Err(format!("negative timestamp {ts}"));
    }
    Ok(Interaction {
        user: key(fields[0])?,
        item: key(fields[1])?,
        rating: 1.0,
        timestamp: ts,
    })
}

fn canonical_line(line: &str) -> Result<Interaction, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
    }
    Ok(Interaction {
        user: key(fields[0])?,
        item: key(fields[1])?,
        rating: 1.0,
        timestamp: timestamp(fields[2])?,
    })
}
