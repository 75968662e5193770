//! Diagnostics over attention dumps: long-tail recall curves, per-modality
//! score densities and attention-sink detection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Modality, TokenSequence};
use crate::par::*;

/// Default sink threshold as a multiple of the median column mass.
pub const DEFAULT_SINK_MULTIPLE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub fractions_kept: Vec<f64>,
    pub recall_at_fraction: Vec<f64>,
}

impl RecallCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,recall\n");
        for (f, r) in self.fractions_kept.iter().zip(&self.recall_at_fraction) {
            let _ = writeln!(s, "{f},{r}");
        }
        s
    }
}

/// Attention mass captured by the top `ceil(f * L)` scores of one row.
pub fn row_recall(scores: &[f64], fraction: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let keep = ((fraction * sorted.len() as f64).ceil() as usize).min(sorted.len());
    let total: f64 = sorted.iter().sum();
    let top: f64 = sorted[..keep].iter().sum();
    if keep == sorted.len() {
        // Same summation order as `total`.
        return 1.0;
    }
    top / total
}

/// Recall per fraction: averaged over rows within each (layer, head), then
/// macro-averaged across heads. Fractions are sorted ascending.
pub fn recall_curve(record: &AttentionRecord, fractions: &[f64]) -> Result<RecallCurve> {
    if record.is_empty() {
        return Err(Error::EmptyInput("attention record"));
    }
    if fractions.is_empty() {
        return Err(Error::EmptyInput("fractions"));
    }
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::Precondition("fractions must lie in (0, 1]"));
    }
    let mut fr = fractions.to_vec();
    fr.sort_by(f64::total_cmp);

    let heads = record.heads();
    let per_head: Vec<Vec<f64>> = heads
        .par_iter()
        .map(|&(l, h)| {
            let rows: Vec<&[f64]> = record
                .rows
                .iter()
                .filter(|r| r.layer == l && r.head == h)
                .map(|r| r.scores.as_slice())
                .collect();
            fr.iter()
                .map(|&f| rows.iter().map(|r| row_recall(r, f)).sum::<f64>() / rows.len() as f64)
                .collect()
        })
        .collect();
    let recall = (0..fr.len())
        .map(|i| per_head.iter().map(|h| h[i]).sum::<f64>() / per_head.len() as f64)
        .collect();
    Ok(RecallCurve {
        fractions_kept: fr,
        recall_at_fraction: recall,
    })
}

/// Histograms of received attention scores split by the modality of the
/// attended column, over shared bins on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    pub edges: Vec<f64>,
    pub image: Vec<usize>,
    pub text: Vec<usize>,
}

impl DensityHistogram {
    pub fn total(&self) -> usize {
        self.image.iter().sum::<usize>() + self.text.iter().sum::<usize>()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,image_count,text_count\n");
        for b in 0..self.image.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.image[b],
                self.text[b]
            );
        }
        s
    }
}

fn bin_of(score: f64, bins: usize) -> usize {
    ((score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

pub fn modality_density(
    record: &AttentionRecord,
    sequence: &TokenSequence,
    bins: usize,
) -> Result<DensityHistogram> {
    if bins == 0 {
        return Err(Error::Precondition("at least one histogram bin"));
    }
    let mut image = vec![0; bins];
    let mut text = vec![0; bins];
    for row in &record.rows {
        for (col, score) in row.columns.iter().zip(&row.scores) {
            let m = sequence.modality(*col).ok_or(Error::Shape {
                what: "modality tags",
                expected: col + 1,
                actual: sequence.len(),
            })?;
            let b = bin_of(*score, bins);
            if m.is_image() {
                image[b] += 1;
            } else {
                text[b] += 1;
            }
        }
    }
    Ok(DensityHistogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        image,
        text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkEntry {
    pub position: usize,
    pub cumulative_mass: f64,
    pub modality: Modality,
    pub sink: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub entries: Vec<SinkEntry>,
    pub median_mass: f64,
    pub threshold_multiple: f64,
}

impl SinkReport {
    pub fn sinks(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.sink)
            .map(|e| e.position)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("position,cumulative_mass,modality,sink_flag\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.position,
                e.cumulative_mass,
                e.modality.as_str(),
                u8::from(e.sink)
            );
        }
        s
    }
}

/// Column attention mass per sequence position, summed over all rows of
/// the record (every layer and head it contains).
pub fn column_mass_by_position(record: &AttentionRecord) -> BTreeMap<usize, f64> {
    let mut mass = BTreeMap::new();
    for row in &record.rows {
        for (col, score) in row.columns.iter().zip(&row.scores) {
            *mass.entry(*col).or_insert(0.0) += score;
        }
    }
    mass
}

/// Flags positions whose cumulative received mass exceeds
/// `threshold_multiple` times the median over positions.
pub fn detect_sinks(
    record: &AttentionRecord,
    sequence: &TokenSequence,
    threshold_multiple: f64,
) -> Result<SinkReport> {
    if record.is_empty() {
        return Err(Error::EmptyInput("attention record"));
    }
    if threshold_multiple.is_nan() || threshold_multiple <= 1.0 {
        return Err(Error::Precondition("threshold multiple must exceed 1"));
    }
    let mass = column_mass_by_position(record);
    let mut sorted: Vec<f64> = mass.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let cutoff = threshold_multiple * median;
    let entries = mass
        .into_iter()
        .map(|(position, m)| {
            let modality = sequence.modality(position).ok_or(Error::Shape {
                what: "modality tags",
                expected: position + 1,
                actual: sequence.len(),
            })?;
            Ok(SinkEntry {
                position,
                cumulative_mass: m,
                modality,
                sink: m > cutoff,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SinkReport {
        entries,
        median_mass: median,
        threshold_multiple,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScoreRow;

    fn row(step: usize, columns: Vec<usize>, scores: Vec<f64>) -> ScoreRow {
        ScoreRow {
            layer: 0,
            head: 0,
            step,
            aggregated: vec![false; columns.len()],
            columns,
            scores,
        }
    }

    fn text_seq(n: usize) -> TokenSequence {
        TokenSequence::from_parts(&[], &vec![1; n], &[])
    }

    #[test]
    fn uniform_row_half_recall() {
        assert!((row_recall(&[0.1; 10], 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_hot_full_recall() {
        let mut r = vec![0.0; 20];
        r[7] = 1.0;
        assert_eq!(row_recall(&r, 0.1), 1.0);
    }

    #[test]
    fn power_law_top_one_percent() {
        let raw: Vec<f64> = (1..=1000).map(|r| (r as f64).powi(-3)).collect();
        let z: f64 = raw.iter().sum();
        let scores: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let direct: f64 = raw[..10].iter().sum::<f64>() / z;
        let got = row_recall(&scores, 0.01);
        assert!(direct > 0.9);
        assert!((got - direct).abs() < 1e-9);
    }

    #[test]
    fn curve_is_monotone_and_ends_at_one() {
        let rec = AttentionRecord::new(vec![
            row(0, vec![0, 1, 2], vec![0.7, 0.2, 0.1]),
            row(1, vec![0, 1, 2], vec![0.3, 0.3, 0.4]),
        ]);
        let c = recall_curve(&rec, &[1.0, 0.2, 0.5]).unwrap();
        assert_eq!(c.fractions_kept, vec![0.2, 0.5, 1.0]);
        for w in c.recall_at_fraction.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert_eq!(*c.recall_at_fraction.last().unwrap(), 1.0);
        assert!(recall_curve(&AttentionRecord::default(), &[0.5]).is_err());
        assert!(recall_curve(&rec, &[0.0]).is_err());
    }

    #[test]
    fn density_all_image_leaves_text_empty() {
        let rec = AttentionRecord::new(vec![row(1, vec![0, 1], vec![0.4, 0.6])]);
        let seq = TokenSequence::from_parts(&[1, 2], &[], &[]);
        let h = modality_density(&rec, &seq, 4).unwrap();
        assert!(h.text.iter().all(|c| *c == 0));
        assert_eq!(h.total(), 2);
    }

    #[test]
    fn density_hand_binned() {
        // Positions 0,1 image; 2,3 text.
        let rec = AttentionRecord::new(vec![
            row(0, vec![0], vec![1.0]),
            row(1, vec![0, 1], vec![0.3, 0.7]),
            row(2, vec![0, 1, 2], vec![0.1, 0.1, 0.8]),
            row(3, vec![0, 1, 2, 3], vec![0.05, 0.15, 0.3, 0.5]),
        ]);
        let seq = TokenSequence::from_parts(&[5, 6], &[7, 8], &[]);
        let h = modality_density(&rec, &seq, 4).unwrap();
        // Bins [0,.25) [.25,.5) [.5,.75) [.75,1].
        assert_eq!(h.image, vec![4, 1, 1, 1]);
        assert_eq!(h.text, vec![0, 1, 1, 1]);
        assert_eq!(h.total(), 10);
    }

    #[test]
    fn density_rejects_short_tags() {
        let rec = AttentionRecord::new(vec![row(0, vec![0, 3], vec![0.5, 0.5])]);
        assert!(matches!(
            modality_density(&rec, &text_seq(2), 4),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn uniform_attention_has_no_sinks() {
        let rows = (0..8)
            .map(|i| row(i, (0..8).collect(), vec![0.125; 8]))
            .collect();
        let r = detect_sinks(&AttentionRecord::new(rows), &text_seq(8), 4.0).unwrap();
        assert!(r.sinks().is_empty());
    }

    #[test]
    fn dominant_first_column_is_flagged() {
        let n = 10;
        let rows = (0..n)
            .map(|i| {
                let mut s = vec![0.1 / (n - 1) as f64; n];
                s[0] = 0.9;
                row(i, (0..n).collect(), s)
            })
            .collect();
        let r = detect_sinks(&AttentionRecord::new(rows), &text_seq(n), 4.0).unwrap();
        assert_eq!(r.sinks(), vec![0]);
        assert!(r
            .to_csv()
            .starts_with("position,cumulative_mass,modality,sink_flag\n0,"));
    }

    #[test]
    fn sink_threshold_must_exceed_one() {
        let rec = AttentionRecord::new(vec![row(0, vec![0], vec![1.0])]);
        assert!(detect_sinks(&rec, &text_seq(1), 1.0).is_err());
    }
}
