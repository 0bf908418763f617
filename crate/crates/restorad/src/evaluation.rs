//! Anomaly scoring and ranking metrics.
//!
//! The anomaly score of an image is the discrepancy between it and its
//! restoration. AUC is the Mann-Whitney statistic (ties counted half) via
//! average ranks; average precision is the area under the precision-recall
//! step curve using the right-max precision envelope, with ties resolved by
//! a stable descending sort. Both are recomputable from the persisted
//! entries alone.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ImageRecord, ImageStore, Label};
use crate::generator::Generator;
use crate::nn::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("average precision needs at least one positive")]
    NoPositives,
    #[error("scores and labels have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How per-pixel discrepancies reduce to one score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Mean,
    Max,
    /// Mean of the largest `topk_fraction` of pixels.
    TopkMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_mode: ScoreMode,
    pub topk_fraction: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_mode: ScoreMode::Mean,
            topk_fraction: 0.01,
            batch_size: 32,
        }
    }
}

/// Per-pixel channel-mean absolute difference, `[H, W]`, values in [0, 2].
pub fn heatmap(x: &Array3<f64>, x_prime: &Array3<f64>) -> Result<Array2<f64>, EvalError> {
    if x.shape() != x_prime.shape() {
        return Err(EvalError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.shape(),
            x_prime.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut map = Array2::zeros((h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                map[[y, xx]] += (x_prime[[ci, y, xx]] - x[[ci, y, xx]]).abs();
            }
        }
    }
    map.mapv_inplace(|v| v / c as f64);
    Ok(map)
}

/// Reduce an input/restoration pair to a scalar anomaly score.
pub fn anomaly_score(
    x: &Array3<f64>,
    x_prime: &Array3<f64>,
    mode: ScoreMode,
    topk_fraction: f64,
) -> Result<f64, EvalError> {
    let map = heatmap(x, x_prime)?;
    let score = match mode {
        ScoreMode::Mean => map.mean().unwrap_or(0.0),
        ScoreMode::Max => map.iter().copied().fold(0.0, f64::max),
        ScoreMode::TopkMean => {
            let mut vals: Vec<f64> = map.iter().copied().collect();
            vals.sort_by(|a, b| b.partial_cmp(a).expect("finite heatmap"));
            let k = ((vals.len() as f64 * topk_fraction).ceil() as usize).clamp(1, vals.len());
            vals[..k].iter().sum::<f64>() / k as f64
        }
    };
    Ok(score)
}

fn check_metric_inputs(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    Ok(())
}

/// Area under the ROC curve: `P(score_pos > score_neg) + 0.5 P(tie)`,
/// computed through tie-averaged ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_metric_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // average rank within tie groups, ranks starting at 1
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Stable descending order by score (ties keep their input order).
fn ranked_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    order
}

/// Average precision: area under the precision-recall step curve with the
/// precision envelope `max_{k' >= k} precision@k'`, positives ranked by a
/// stable descending sort.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_metric_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let order = ranked_descending(scores);
    let n = order.len();
    // precision at every cut, then envelope from the tail
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(n);
    for (k, &idx) in order.iter().enumerate() {
        if labels[idx] {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut envelope = precision.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        if labels[idx] {
            ap += envelope[k];
        }
    }
    Ok(ap / n_pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub score: f64,
    pub label: Label,
}

/// Per-image scores plus summary metrics and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub entries: Vec<ScoreEntry>,
    pub auc: f64,
    pub ap: f64,
    pub config_fingerprint: String,
    pub checkpoint_iteration: u64,
    pub score_mode: ScoreMode,
    /// How equal scores are ordered for AP: stable sort by input position.
    pub tie_policy: String,
}

impl ScoreReport {
    pub fn labels(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.label == Label::Abnormal).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Entries as lines, then a summary block, in one text file.
    pub fn save_text(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = Vec::new();
        for e in &self.entries {
            writeln!(out, "{}\t{:.12}\t{}", e.id, e.score, e.label).expect("in-memory write");
        }
        writeln!(out).expect("in-memory write");
        writeln!(out, "auc\t{:.12}", self.auc).expect("in-memory write");
        writeln!(out, "ap\t{:.12}", self.ap).expect("in-memory write");
        writeln!(out, "n\t{}", self.entries.len()).expect("in-memory write");
        writeln!(out, "checkpoint_iteration\t{}", self.checkpoint_iteration).expect("in-memory write");
        writeln!(out, "config_fingerprint\t{}", self.config_fingerprint).expect("in-memory write");
        writeln!(out, "tie_policy\t{}", self.tie_policy).expect("in-memory write");
        std::fs::write(path, out).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<(), EvalError> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, body).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Score every test record with the generator in inference mode.
pub fn evaluate(
    generator: &Generator,
    test: &[ImageRecord],
    store: &mut ImageStore,
    cfg: &EvalConfig,
    config_fingerprint: &str,
    checkpoint_iteration: u64,
) -> Result<ScoreReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    store.preload(test)?;
    let mut entries = Vec::with_capacity(test.len());
    for chunk in test.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&ImageRecord> = chunk.iter().collect();
        let batch = store.batch(&refs)?;
        let restored = generator.restore(&batch)?;
        for (bi, rec) in chunk.iter().enumerate() {
            let x = batch.index_axis(Axis(0), bi).to_owned();
            let y = restored.index_axis(Axis(0), bi).to_owned();
            let score = anomaly_score(&x, &y, cfg.score_mode, cfg.topk_fraction)?;
            entries.push(ScoreEntry {
                id: rec.id.clone(),
                score,
                label: rec.label,
            });
        }
    }
    let labels: Vec<bool> = entries.iter().map(|e| e.label == Label::Abnormal).collect();
    let scores: Vec<f64> = entries.iter().map(|e| e.score).collect();
    let auc = auc(&scores, &labels)?;
    let ap = average_precision(&scores, &labels)?;
    Ok(ScoreReport {
        entries,
        auc,
        ap,
        config_fingerprint: config_fingerprint.to_string(),
        checkpoint_iteration,
        score_mode: cfg.score_mode,
        tie_policy: "stable_sort".to_string(),
    })
}

/// Restore a single batch and return per-image heatmaps.
pub fn heatmaps_for_batch(
    generator: &Generator,
    batch: &Array4<f64>,
) -> Result<Vec<Array2<f64>>, EvalError> {
    let restored = generator.restore(batch)?;
    let mut maps = Vec::with_capacity(batch.shape()[0]);
    for bi in 0..batch.shape()[0] {
        let x = batch.index_axis(Axis(0), bi).to_owned();
        let y = restored.index_axis(Axis(0), bi).to_owned();
        maps.push(heatmap(&x, &y)?);
    }
    Ok(maps)
}

/// Write a heatmap as an 8-bit grayscale PNG (min-max normalized) plus a
/// sidecar JSON holding the normalization bounds and raw values.
pub fn export_heatmap(map: &Array2<f64>, png_path: &Path, sidecar_path: &Path) -> Result<(), EvalError> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = ((map[[y, x]] - min) / span * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(png_path).map_err(|e| EvalError::Io {
        path: png_path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        min: f64,
        max: f64,
        height: usize,
        width: usize,
        values: &'a [f64],
    }
    let values: Vec<f64> = map.iter().copied().collect();
    let body = serde_json::to_string(&Sidecar {
        min,
        max,
        height: h,
        width: w,
        values: &values,
    })
    .expect("sidecar serializes");
    std::fs::write(sidecar_path, body).map_err(|source| EvalError::Io {
        path: sidecar_path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    /// O(n^2) pairwise AUC oracle.
    pub(crate) fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// Brute-force AP oracle: explicit precision-at-k scan with an O(n^2)
    /// suffix-max for the envelope.
    pub(crate) fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let order = ranked_descending(scores);
        let n = order.len();
        let n_pos = labels.iter().filter(|&&l| l).count();
        let prec_at = |k: usize| -> f64 {
            let tp = order[..=k].iter().filter(|&&i| labels[i]).count();
            tp as f64 / (k + 1) as f64
        };
        let mut ap = 0.0;
        for (k, &idx) in order.iter().enumerate() {
            if labels[idx] {
                let best = (k..n).map(prec_at).fold(0.0, f64::max);
                ap += best;
            }
        }
        ap / n_pos as f64
    }

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1], &[true]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn ap_trivial_cases() {
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        // single positive ranked last of n gives 1/n
        let scores = [0.9, 0.8, 0.7, 0.1];
        let labels = [false, false, false, true];
        assert!((average_precision(&scores, &labels).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(
            average_precision(&[0.1], &[false]),
            Err(EvalError::NoPositives)
        ));
    }

    #[test]
    fn metrics_match_oracles_on_random_instances() {
        for trial in 0..200u64 {
            let mut rng = derive_rng(40, "metric", &[trial]);
            let n = rng.random_range(2..=30);
            let mut scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            // quantize some trials to force ties
            if trial % 3 == 0 {
                scores = scores.iter().map(|s| (s * 8.0).round() / 8.0).collect();
            }
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if !labels.contains(&true) {
                labels[0] = true;
            }
            if !labels.contains(&false) {
                labels[n - 1] = false;
            }
            let a = auc(&scores, &labels).unwrap();
            assert!((a - auc_oracle(&scores, &labels)).abs() < 1e-9, "trial {trial}");
            let p = average_precision(&scores, &labels).unwrap();
            assert!((p - ap_oracle(&scores, &labels)).abs() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transforms() {
        for trial in 0..50u64 {
            let mut rng = derive_rng(41, "mono", &[trial]);
            let n = rng.random_range(3..=30);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            if !labels.contains(&true) {
                labels[0] = true;
            }
            if !labels.contains(&false) {
                labels[n - 1] = false;
            }
            let base = auc(&scores, &labels).unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.5 * s + 11.0).collect();
            assert!((auc(&exp, &labels).unwrap() - base).abs() < 1e-12);
            assert!((auc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_complement_under_label_flip() {
        for trial in 0..50u64 {
            let mut rng = derive_rng(42, "flip", &[trial]);
            let n = rng.random_range(3..=25);
            // distinct scores: no ties
            let scores: Vec<f64> = (0..n).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if !labels.contains(&true) {
                labels[0] = true;
            }
            if !labels.contains(&false) {
                labels[n - 1] = false;
            }
            let a = auc(&scores, &labels).unwrap();
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            let b = auc(&scores, &flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_at_least_prevalence() {
        for trial in 0..100u64 {
            let mut rng = derive_rng(43, "prev", &[trial]);
            let n = rng.random_range(2..=30);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if !labels.contains(&true) {
                labels[0] = true;
            }
            let prevalence = labels.iter().filter(|&&l| l).count() as f64 / n as f64;
            let ap = average_precision(&scores, &labels).unwrap();
            assert!(
                ap >= prevalence - 1e-12,
                "trial {trial}: ap {ap} below prevalence {prevalence}"
            );
        }
    }

    #[test]
    fn heatmap_and_score_basics() {
        let x = Array3::from_elem((1, 4, 4), 0.25);
        let same = heatmap(&x, &x).unwrap();
        assert!(same.iter().all(|&v| v == 0.0));

        let mut y = x.clone();
        y[[0, 2, 3]] = 0.75;
        let map = heatmap(&x, &y).unwrap();
        let nonzero: Vec<(usize, usize)> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| map[[r, c]] != 0.0)
            .collect();
        assert_eq!(nonzero, vec![(2, 3)]);

        let shifted = x.mapv(|v| v + 0.2);
        let s = anomaly_score(&x, &shifted, ScoreMode::Mean, 0.01).unwrap();
        assert!((s - 0.2).abs() < 1e-12);
        let m = anomaly_score(&x, &y, ScoreMode::Max, 0.01).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_is_zero_iff_identical() {
        let mut rng = derive_rng(44, "score", &[]);
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.random_range(-1.0..1.0));
        assert_eq!(anomaly_score(&x, &x, ScoreMode::Mean, 0.01).unwrap(), 0.0);
        let mut y = x.clone();
        y[[1, 4, 4]] += 1e-6;
        assert!(anomaly_score(&x, &y, ScoreMode::Mean, 0.01).unwrap() > 0.0);

        // random pair equals the elementwise oracle
        let z = Array3::from_shape_fn((2, 5, 5), |_| rng.random_range(-1.0..1.0));
        let oracle: f64 = (0..5)
            .flat_map(|h| (0..5).map(move |w| (h, w)))
            .map(|(h, w)| {
                ((z[[0, h, w]] - x[[0, h, w]]).abs() + (z[[1, h, w]] - x[[1, h, w]]).abs()) / 2.0
            })
            .sum::<f64>()
            / 25.0;
        let s = anomaly_score(&x, &z, ScoreMode::Mean, 0.01).unwrap();
        assert!((s - oracle).abs() < 1e-12);
    }
}
