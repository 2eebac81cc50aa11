use std::fs;
use std::path::{Path, PathBuf};

use super::results::{read_results, RESULT_COLUMNS};
use crate::error::RunError;

const METRICS: [(&str, &str); 8] = [
    ("p10", "P@10"),
    ("r10", "R@10"),
    ("ndcg10", "NDCG@10"),
    ("map10", "MAP@10"),
    ("p20", "P@20"),
    ("r20", "R@20"),
    ("ndcg20", "NDCG@20"),
    ("map20", "MAP@20"),
];

fn col(name: &str) -> usize {
    RESULT_COLUMNS.iter().position(|c| *c == name).expect("known column")
}

/// One markdown table per dataset, one row per results row. In each metric
/// column every cell equal to the maximum is bold and every cell equal to
/// the next distinct value is underlined. Cells keep the CSV text verbatim.
pub fn markdown_report(rows: &[Vec<String>]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    for r in rows {
        if !datasets.contains(&r[0].as_str()) {
            datasets.push(&r[0]);
        }
    }
    let mut out = String::new();
    for ds in datasets {
        let block: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == ds).collect();
        let mut models: Vec<&str> = block.iter().map(|r| r[1].as_str()).collect();
        models.sort_unstable();
        models.dedup();
        let plain = models.len() == block.len();
        out.push_str(&format!("## {ds}\n\n| Model |"));
        for (_, title) in METRICS {
            out.push_str(&format!(" {title} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(METRICS.len()));
        out.push('\n');

        let marks: Vec<Vec<&str>> = METRICS
            .iter()
            .map(|(key, _)| {
                let c = col(key);
                let vals: Vec<f64> = block.iter().map(|r| r[c].parse().unwrap_or(f64::NAN)).collect();
                let mut distinct: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
                distinct.sort_by(|a, b| b.total_cmp(a));
                distinct.dedup();
                vals.iter()
                    .map(|v| {
                        if distinct.first() == Some(v) {
                            "**"
                        } else if distinct.get(1) == Some(v) {
                            "u"
                        } else {
                            ""
                        }
                    })
                    .collect()
            })
            .collect();
        for (i, r) in block.iter().enumerate() {
            let label = if plain {
                r[1].clone()
            } else {
                format!("{} (d={}, L={})", r[1], r[2], r[3])
            };
            out.push_str(&format!("| {label} |"));
            for (m, (key, _)) in METRICS.iter().enumerate() {
                let v = &r[col(key)];
                let cell = match marks[m][i] {
                    "**" => format!("**{v}**"),
                    "u" => format!("<u>{v}</u>"),
                    _ => v.clone(),
                };
                out.push_str(&format!(" {cell} |"));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Renders `results` into `<out>/tables.md`.
pub fn write_markdown_report(results: &Path, out: &Path) -> Result<PathBuf, RunError> {
    let rows = read_results(results)?;
    fs::create_dir_all(out).map_err(|e| RunError::io(out, e))?;
    let path = out.join("tables.md");
    fs::write(&path, markdown_report(&rows)).map_err(|e| RunError::io(&path, e))?;
    Ok(path)
}
