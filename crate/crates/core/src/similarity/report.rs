use std::collections::BTreeMap;
use std::path::Path;

use super::{Criterion, SimilarityMatrix, Stage, Target};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const HEADER: [&str; 7] = ["layer", "target", "criterion", "stage", "i", "j", "score"];

type Key = (usize, Target, Criterion, Stage);

/// One row per unordered head pair `i < j`, sorted by
/// (layer, target, criterion, stage, i, j).
pub fn export_similarity_report(matrices: &[SimilarityMatrix], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut sorted: Vec<&SimilarityMatrix> = matrices.iter().collect();
    sorted.sort_by_key(|m| (m.layer, m.target, m.criterion, m.stage));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(HEADER).map_err(io)?;
    for m in sorted {
        let h = m.n_heads();
        for i in 0..h {
            for j in i + 1..h {
                w.write_record([
                    m.layer.to_string(),
                    m.target.to_string(),
                    m.criterion.to_string(),
                    m.stage.to_string(),
                    i.to_string(),
                    j.to_string(),
                    // Display for f64 is the shortest exact round-trip form
                    m.score(i, j).to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rebuilds the matrices written by [`export_similarity_report`]. The head
/// count is inferred from the largest index; `skipped_tokens` is not stored.
pub fn read_similarity_report(path: &Path) -> Result<Vec<SimilarityMatrix>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut groups: BTreeMap<Key, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::io(path, e.into()))?;
        let bad = |msg: String| Error::Parse {
            location: format!("{}:{}", path.display(), line + 2),
            message: msg,
        };
        if rec.len() != HEADER.len() {
            return Err(bad(format!("expected {} fields, found {}", HEADER.len(), rec.len())));
        }
        let num = |k: usize| rec[k].parse::<usize>().map_err(|e| bad(e.to_string()));
        let key = (
            num(0)?,
            rec[1].parse().map_err(|e: Error| bad(e.to_string()))?,
            rec[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            rec[3].parse().map_err(|e: Error| bad(e.to_string()))?,
        );
        let score = rec[6].parse::<f64>().map_err(|e| bad(e.to_string()))?;
        groups.entry(key).or_default().push((num(4)?, num(5)?, score));
    }
    Ok(groups
        .into_iter()
        .map(|((layer, target, criterion, stage), entries)| {
            let h = entries.iter().map(|&(_, j, _)| j + 1).max().unwrap_or(1);
            let diag = match criterion {
                Criterion::Cos => 1.0,
                Criterion::Dist => 0.0,
            };
            let mut scores = Matrix::identity(h).scale(diag);
            for (i, j, s) in entries {
                scores[(i, j)] = s;
                scores[(j, i)] = s;
            }
            SimilarityMatrix {
                layer,
                target,
                criterion,
                stage,
                scores,
                skipped_tokens: 0,
            }
        })
        .collect())
}
