//! Synthetic-shapes dataset generator: a fixed smooth background with mild
//! per-image noise for normal images, plus one to three bright elliptical
//! blobs for abnormal ones. Blob cores exceed the background by at least 0.5
//! in normalized ([-1, 1]) units, so the anomaly signal is unambiguous.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png encode error at {path}: {source}")]
    Png {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// Fractions of the generated pool assigned to each manifest split.
/// Normals: half feed the normal-train pool, the rest splits between the
/// unlabeled pool and the test set; abnormals split between unlabeled and test.
const NORMAL_TRAIN_FRAC: f64 = 0.5;
const NORMAL_UNLABELED_FRAC: f64 = 0.3;
const ABNORMAL_UNLABELED_FRAC: f64 = 0.6;

#[derive(Debug, Clone, Serialize)]
pub struct ShapeSummary {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub size: usize,
    pub seed: u64,
    pub manifest: PathBuf,
}

/// The shared background, in [0.12, 0.58] of unit intensity.
fn background(size: usize) -> Array2<f64> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        let u = y as f64 / (size - 1).max(1) as f64;
        let v = x as f64 / (size - 1).max(1) as f64;
        let wave = 0.18
            * (std::f64::consts::PI * u * 1.3 + 0.4).sin()
            * (std::f64::consts::PI * v * 1.1 - 0.2).cos();
        let bump = 0.10 * (-((u - 0.35).powi(2) + (v - 0.55).powi(2)) / 0.08).exp();
        0.30 + wave + bump
    })
}

fn render_normal(base: &Array2<f64>, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let offset = rng.random_range(-0.03..0.03);
    let noise = Normal::new(0.0, 0.015).expect("valid normal");
    base.mapv(|v| (v + offset + noise.sample(rng)).clamp(0.0, 1.0))
}

fn add_blobs(img: &mut Array2<f64>, rng: &mut rand_chacha::ChaCha8Rng) {
    let size = img.shape()[0];
    let count = rng.random_range(1..=3usize);
    for _ in 0..count {
        let scale = size as f64 / 64.0;
        let rx = rng.random_range(3.0 * scale..=8.0 * scale);
        let ry = rng.random_range(3.0 * scale..=8.0 * scale);
        let margin_x = rx.ceil() as usize + 2;
        let margin_y = ry.ceil() as usize + 2;
        let cx = rng.random_range(margin_x..size - margin_x) as f64;
        let cy = rng.random_range(margin_y..size - margin_y) as f64;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let bright = rng.random_range(0.32..0.42);
        let (sin, cos) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let ex = (dx * cos + dy * sin) / rx;
                let ey = (-dx * sin + dy * cos) / ry;
                let rho = (ex * ex + ey * ey).sqrt();
                let add = if rho <= 1.0 {
                    bright
                } else if rho <= 1.3 {
                    bright * (1.3 - rho) / 0.3
                } else {
                    0.0
                };
                if add > 0.0 {
                    img[[y, x]] = (img[[y, x]] + add).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn save_gray(img: &Array2<f64>, path: &Path) -> Result<(), ShapeError> {
    let size = img.shape()[0];
    let mut out = image::GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let v = (img[[y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    out.save(path).map_err(|source| ShapeError::Png {
        path: path.to_path_buf(),
        source,
    })
}

/// Generate the image tree and manifest under `out_dir`.
pub fn make_synthetic(
    n_normal: usize,
    n_abnormal: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<ShapeSummary, ShapeError> {
    if size < 8 {
        return Err(ShapeError::Invalid(format!("size {size} too small")));
    }
    if n_normal == 0 {
        return Err(ShapeError::Invalid("need at least one normal image".into()));
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|source| ShapeError::Io {
        path: img_dir.clone(),
        source,
    })?;

    let base = background(size);
    let mut rows: Vec<(String, String, &str, &str)> = Vec::new();

    let normal_train_cut = (n_normal as f64 * NORMAL_TRAIN_FRAC).round() as usize;
    let normal_unlabeled_cut =
        normal_train_cut + (n_normal as f64 * NORMAL_UNLABELED_FRAC).round() as usize;
    for i in 0..n_normal {
        let mut rng = derive_rng(seed, "shape_normal", &[i as u64]);
        let img = render_normal(&base, &mut rng);
        let id = format!("n{i:05}");
        let rel = format!("images/{id}.png");
        save_gray(&img, &out_dir.join(&rel))?;
        let split = if i < normal_train_cut {
            "normal_train"
        } else if i < normal_unlabeled_cut.min(n_normal) {
            "unlabeled_pool"
        } else {
            "test"
        };
        rows.push((id, rel, "normal", split));
    }

    let abnormal_unlabeled_cut = (n_abnormal as f64 * ABNORMAL_UNLABELED_FRAC).round() as usize;
    for i in 0..n_abnormal {
        let mut rng = derive_rng(seed, "shape_abnormal", &[i as u64]);
        let mut img = render_normal(&base, &mut rng);
        add_blobs(&mut img, &mut rng);
        let id = format!("a{i:05}");
        let rel = format!("images/{id}.png");
        save_gray(&img, &out_dir.join(&rel))?;
        let split = if i < abnormal_unlabeled_cut {
            "unlabeled_pool"
        } else {
            "test"
        };
        rows.push((id, rel, "abnormal", split));
    }

    let manifest = out_dir.join("manifest.csv");
    let mut body = String::from("id,path,label,split\n");
    for (id, rel, label, split) in &rows {
        body.push_str(&format!("{id},{rel},{label},{split}\n"));
    }
    std::fs::write(&manifest, body).map_err(|source| ShapeError::Io {
        path: manifest.clone(),
        source,
    })?;

    Ok(ShapeSummary {
        n_normal,
        n_abnormal,
        size,
        seed,
        manifest,
    })
}

/// Render one abnormal image in memory together with its clean counterpart
/// (same per-image noise). Used by tests to measure blob contrast.
pub fn render_abnormal_with_clean(
    size: usize,
    seed: u64,
    index: u64,
) -> (Array2<f64>, Array2<f64>) {
    let base = background(size);
    let mut rng = derive_rng(seed, "shape_abnormal", &[index]);
    let clean = render_normal(&base, &mut rng);
    let mut img = clean.clone();
    add_blobs(&mut img, &mut rng);
    (img, clean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        make_synthetic(10, 4, 32, 5, &a).unwrap();
        make_synthetic(10, 4, 32, 5, &b).unwrap();

        let normals: Vec<_> = std::fs::read_dir(a.join("images"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.starts_with('n'))
            .collect();
        assert_eq!(normals.len(), 10);

        let pa = std::fs::read(a.join("images/n00003.png")).unwrap();
        let pb = std::fs::read(b.join("images/n00003.png")).unwrap();
        assert_eq!(pa, pb, "same seed must produce identical pixel data");
        let ma = std::fs::read(a.join("manifest.csv")).unwrap();
        let mb = std::fs::read(b.join("manifest.csv")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn blobs_exceed_background_by_half_normalized() {
        for idx in 0..10 {
            let (abnormal, clean) = render_abnormal_with_clean(64, 9, idx);
            // somewhere the lift is at least 0.25 in unit intensity = 0.5 in [-1, 1]
            let max_lift = abnormal
                .iter()
                .zip(clean.iter())
                .map(|(a, c)| a - c)
                .fold(0.0f64, f64::max);
            assert!(
                max_lift * 2.0 >= 0.5,
                "blob contrast {max_lift} too low at index {idx}"
            );
        }
    }

    #[test]
    fn manifest_pools_cover_all_roles() {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic(20, 10, 16, 1, dir.path()).unwrap();
        let records = crate::data::load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(records.len(), 30);
        use crate::data::{Label, Split};
        let count = |s: Split, l: Label| {
            records
                .iter()
                .filter(|r| r.split == s && r.audit_label() == l)
                .count()
        };
        assert!(count(Split::NormalTrain, Label::Normal) > 0);
        assert!(count(Split::UnlabeledTrain, Label::Normal) > 0);
        assert!(count(Split::UnlabeledTrain, Label::Abnormal) > 0);
        assert!(count(Split::Test, Label::Normal) > 0);
        assert!(count(Split::Test, Label::Abnormal) > 0);
    }
}
