use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::evict::HeadScores;
use crate::{Error, Result};

/// Writes rows as CSV with a header derived from the row type. `None` fields are
/// left empty.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_csv_file<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

/// One token of one head in a score dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub layer: usize,
    pub head: usize,
    pub token: usize,
    pub outlier: Option<f64>,
    pub attention: Option<f64>,
    pub score: Option<f64>,
}

pub fn score_rows(scores: &[HeadScores]) -> Vec<ScoreRow> {
    let mut out = Vec::new();
    for hs in scores {
        let n = [&hs.outlier, &hs.attention, &hs.blended]
            .iter()
            .filter_map(|s| s.as_ref().map(|v| v.len()))
            .max()
            .unwrap_or(0);
        let at = |s: &Option<crate::ScoreVector>, i: usize| s.as_ref().map(|v| v.scores[i]);
        for token in 0..n {
            out.push(ScoreRow {
                layer: hs.layer,
                head: hs.head,
                token,
                outlier: at(&hs.outlier, token),
                attention: at(&hs.attention, token),
                score: at(&hs.blended, token),
            });
        }
    }
    out
}
