//! Attention history: score rows, dense causal matrices and JSONL dumps.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Modality;

/// One post-softmax attention row for a (layer, head, step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub layer: usize,
    pub head: usize,
    /// Sequence position of the query token.
    pub step: usize,
    /// Sequence position of each attended cache row.
    pub columns: Vec<usize>,
    /// Whether each attended row is an aggregated cluster row.
    pub aggregated: Vec<bool>,
    pub scores: Vec<f64>,
}

/// A collection of score rows, possibly spanning several layers and heads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionRecord {
    pub rows: Vec<ScoreRow>,
}

impl AttentionRecord {
    pub fn new(rows: Vec<ScoreRow>) -> Self {
        Self { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct (layer, head) pairs in first-seen order.
    pub fn heads(&self) -> Vec<(usize, usize)> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&(r.layer, r.head)) {
                seen.push((r.layer, r.head));
            }
        }
        seen
    }

    pub fn head_slice(&self, layer: usize, head: usize) -> AttentionRecord {
        AttentionRecord {
            rows: self
                .rows
                .iter()
                .filter(|r| r.layer == layer && r.head == head)
                .cloned()
                .collect(),
        }
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.scores.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense lower-triangular attention matrix `a[i][j]`, `j <= i`, over an
/// unpruned sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    rows: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    /// Builds from explicit rows. Row `i` must have exactly `i + 1` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::Shape {
                    what: "causal attention row",
                    expected: i + 1,
                    actual: r.len(),
                });
            }
        }
        Ok(Self { rows })
    }

    /// Builds from a single head's record, requiring the columns of row `i`
    /// to be exactly positions `0..=i` with no aggregated rows.
    pub fn from_head_record(record: &AttentionRecord) -> Result<Self> {
        let mut rows: Vec<&ScoreRow> = record.rows.iter().collect();
        rows.sort_by_key(|r| r.step);
        let mut out = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let contiguous = r.step == i
                && r.columns.len() == i + 1
                && r.columns.iter().enumerate().all(|(j, c)| *c == j)
                && !r.aggregated.iter().any(|a| *a);
            if !contiguous {
                return Err(Error::Precondition(
                    "head record is not a full unpruned causal history",
                ));
            }
            out.push(r.scores.clone());
        }
        Self::from_rows(out)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `a[i][j]`, zero above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.rows[i][j]
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// `sum_{i >= j} a[i][j]` for every column `j`.
    pub fn column_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.rows.len()];
        for row in &self.rows {
            for (m, a) in mass.iter_mut().zip(row) {
                *m += a;
            }
        }
        mass
    }
}

/// A line in the attention dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DumpRecord {
    Attention(ScoreRow),
    /// Sink weights computed at a sparsification event.
    Penalty {
        layer: usize,
        head: usize,
        step: usize,
        beta: f64,
        weights: Vec<f64>,
    },
    /// Saliency vector computed at a sparsification event.
    Saliency {
        layer: usize,
        head: usize,
        step: usize,
        scores: Vec<f64>,
    },
    /// Modality of every sequence position, written once at the end.
    Sequence {
        modalities: Vec<Modality>,
    },
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[DumpRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<DumpRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Splits a dump into its attention record and the trailing modality list.
pub fn split_dump(records: &[DumpRecord]) -> (AttentionRecord, Option<Vec<Modality>>) {
    let mut rows = Vec::new();
    let mut modalities = None;
    for r in records {
        match r {
            DumpRecord::Attention(row) => rows.push(row.clone()),
            DumpRecord::Sequence { modalities: m } => modalities = Some(m.clone()),
            _ => {}
        }
    }
    (AttentionRecord::new(rows), modalities)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rejects_ragged_rows() {
        assert!(AttentionMatrix::from_rows(vec![vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn column_mass_sums_below_diagonal() {
        let m = AttentionMatrix::from_rows(vec![vec![1.0], vec![0.25, 0.75]]).unwrap();
        assert_eq!(m.column_mass(), vec![1.25, 0.75]);
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![
            DumpRecord::Attention(ScoreRow {
                layer: 0,
                head: 1,
                step: 0,
                columns: vec![0],
                aggregated: vec![false],
                scores: vec![1.0],
            }),
            DumpRecord::Penalty {
                layer: 0,
                head: 1,
                step: 0,
                beta: 0.1,
                weights: vec![1.0],
            },
            DumpRecord::Sequence {
                modalities: vec![Modality::Image],
            },
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"kind\":\"attention\""));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), recs);
    }
}
