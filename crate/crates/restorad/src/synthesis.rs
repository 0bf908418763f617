//! Pseudo-anomaly synthesis by foreign-patch interpolation: inside a random
//! rectangle the output is a convex combination of the source image and a
//! donor image; outside it the source is untouched. The corruption mask is
//! kept so downstream checks can audit locality.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("source shape {0:?} does not match donor shape {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
}

/// Knobs for the patch corruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Rectangle side as a fraction of the image side, drawn uniformly.
    pub patch_fraction_lo: f64,
    pub patch_fraction_hi: f64,
    /// Interpolation strength toward the donor, drawn uniformly.
    pub alpha_lo: f64,
    pub alpha_hi: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            patch_fraction_lo: 0.1,
            patch_fraction_hi: 0.4,
            alpha_lo: 0.2,
            alpha_hi: 1.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ok_frac = 0.0 < self.patch_fraction_lo
            && self.patch_fraction_lo <= self.patch_fraction_hi
            && self.patch_fraction_hi <= 1.0;
        let ok_alpha =
            0.0 <= self.alpha_lo && self.alpha_lo <= self.alpha_hi && self.alpha_hi <= 1.0;
        if !ok_frac {
            return Err(SynthError::InvalidParams(format!(
                "patch fraction range ({}, {}) must satisfy 0 < lo <= hi <= 1",
                self.patch_fraction_lo, self.patch_fraction_hi
            )));
        }
        if !ok_alpha {
            return Err(SynthError::InvalidParams(format!(
                "alpha range ({}, {}) must satisfy 0 <= lo <= hi <= 1",
                self.alpha_lo, self.alpha_hi
            )));
        }
        Ok(())
    }
}

/// A corrupted image together with its provenance.
#[derive(Debug, Clone)]
pub struct PseudoAnomaly {
    /// The corrupted image, `[C, H, W]`.
    pub image: Array3<f64>,
    /// Id of the source image the corruption was applied to.
    pub source_id: String,
    /// 1 inside the corrupted rectangle, 0 elsewhere.
    pub mask: Array2<u8>,
    /// Interpolation strength that was drawn.
    pub alpha: f64,
}

fn draw_side(rng: &mut ChaCha8Rng, lo: f64, hi: f64, extent: usize) -> usize {
    // Resample a few times if rounding collapses the side, then clamp.
    for _ in 0..16 {
        let frac = rng.random_range(lo..=hi);
        let side = (frac * extent as f64).round() as usize;
        if side >= 1 {
            return side.min(extent);
        }
    }
    1
}

/// Corrupt `source` with a rectangle of `donor` content.
pub fn synthesize_pseudo(
    source: &Array3<f64>,
    donor: &Array3<f64>,
    source_id: &str,
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<PseudoAnomaly, SynthError> {
    params.validate()?;
    if source.shape() != donor.shape() {
        return Err(SynthError::ShapeMismatch(
            source.shape().to_vec(),
            donor.shape().to_vec(),
        ));
    }
    let (c, h, w) = (source.shape()[0], source.shape()[1], source.shape()[2]);

    let ph = draw_side(rng, params.patch_fraction_lo, params.patch_fraction_hi, h);
    let pw = draw_side(rng, params.patch_fraction_lo, params.patch_fraction_hi, w);
    let top = rng.random_range(0..=h - ph);
    let left = rng.random_range(0..=w - pw);
    let alpha = rng.random_range(params.alpha_lo..=params.alpha_hi);

    let mut image = source.clone();
    let mut mask = Array2::<u8>::zeros((h, w));
    for ci in 0..c {
        for y in top..top + ph {
            for x in left..left + pw {
                image[[ci, y, x]] = (1.0 - alpha) * source[[ci, y, x]] + alpha * donor[[ci, y, x]];
            }
        }
    }
    for y in top..top + ph {
        for x in left..left + pw {
            mask[[y, x]] = 1;
        }
    }

    Ok(PseudoAnomaly {
        image,
        source_id: source_id.to_string(),
        mask,
        alpha,
    })
}

/// Corrupt every image of a batch, pairing element `i` with donor `i+1`
/// (wrapping). A single-image batch degenerates to alpha = 0 with itself as
/// donor, so the output equals the source.
pub fn paired_batch(
    normals: &Array4<f64>,
    ids: &[String],
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f64>, Vec<Array2<u8>>, Vec<f64>), SynthError> {
    let b = normals.shape()[0];
    if b == 0 {
        return Err(SynthError::InvalidParams("empty batch".into()));
    }
    assert_eq!(ids.len(), b, "one id per batch element");
    let mut pseudo = normals.clone();
    let mut masks = Vec::with_capacity(b);
    let mut alphas = Vec::with_capacity(b);
    for i in 0..b {
        let source = normals.index_axis(Axis(0), i).to_owned();
        let donor_idx = (i + 1) % b;
        let donor = normals.index_axis(Axis(0), donor_idx).to_owned();
        let effective = if b == 1 {
            SynthParams {
                alpha_lo: 0.0,
                alpha_hi: 0.0,
                ..*params
            }
        } else {
            *params
        };
        let out = synthesize_pseudo(&source, &donor, &ids[i], &effective, rng)?;
        pseudo.index_axis_mut(Axis(0), i).assign(&out.image);
        masks.push(out.mask);
        alphas.push(out.alpha);
    }
    Ok((pseudo, masks, alphas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::Array3;
    use rand::Rng;

    fn rand_img(seed: u64, c: usize, s: usize) -> Array3<f64> {
        let mut rng = derive_rng(seed, "synth_test", &[]);
        Array3::from_shape_fn((c, s, s), |_| rng.random_range(-1.0..1.0))
    }

    fn params(alo: f64, ahi: f64) -> SynthParams {
        SynthParams {
            alpha_lo: alo,
            alpha_hi: ahi,
            ..SynthParams::default()
        }
    }

    #[test]
    fn alpha_zero_is_identity() {
        let src = rand_img(1, 1, 16);
        let donor = rand_img(2, 1, 16);
        let mut rng = derive_rng(0, "t", &[]);
        let out = synthesize_pseudo(&src, &donor, "s", &params(0.0, 0.0), &mut rng).unwrap();
        assert_eq!(out.image, src);
    }

    #[test]
    fn alpha_one_copies_donor_inside_mask() {
        let src = rand_img(3, 1, 16);
        let donor = rand_img(4, 1, 16);
        let mut rng = derive_rng(1, "t", &[]);
        let out = synthesize_pseudo(&src, &donor, "s", &params(1.0, 1.0), &mut rng).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let expect = if out.mask[[y, x]] == 1 {
                    donor[[0, y, x]]
                } else {
                    src[[0, y, x]]
                };
                assert_eq!(out.image[[0, y, x]], expect);
            }
        }
        assert!(out.mask.iter().any(|&m| m == 1));
    }

    #[test]
    fn alpha_half_midpoint() {
        let src = Array3::from_elem((1, 8, 8), -1.0);
        let donor = Array3::from_elem((1, 8, 8), 1.0);
        let mut rng = derive_rng(2, "t", &[]);
        let out = synthesize_pseudo(&src, &donor, "s", &params(0.5, 0.5), &mut rng).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if out.mask[[y, x]] == 1 { 0.0 } else { -1.0 };
                assert!((out.image[[0, y, x]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let src = rand_img(1, 1, 16);
        let donor = rand_img(2, 1, 8);
        let mut rng = derive_rng(3, "t", &[]);
        assert!(matches!(
            synthesize_pseudo(&src, &donor, "s", &SynthParams::default(), &mut rng),
            Err(SynthError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn locality_outside_mask_over_many_draws() {
        let src = rand_img(5, 1, 24);
        let donor = rand_img(6, 1, 24);
        for i in 0..100 {
            let mut rng = derive_rng(10, "loc", &[i]);
            let out =
                synthesize_pseudo(&src, &donor, "s", &SynthParams::default(), &mut rng).unwrap();
            for y in 0..24 {
                for x in 0..24 {
                    if out.mask[[y, x]] == 0 {
                        assert_eq!(out.image[[0, y, x]], src[[0, y, x]]);
                    }
                }
            }
            // mask must be a single axis-aligned rectangle
            let rows: Vec<usize> = (0..24).filter(|&y| (0..24).any(|x| out.mask[[y, x]] == 1)).collect();
            let cols: Vec<usize> = (0..24).filter(|&x| (0..24).any(|y| out.mask[[y, x]] == 1)).collect();
            for y in rows[0]..=*rows.last().unwrap() {
                for x in cols[0]..=*cols.last().unwrap() {
                    assert_eq!(out.mask[[y, x]], 1, "mask not a filled rectangle");
                }
            }
        }
    }

    #[test]
    fn outputs_stay_in_range() {
        let src = rand_img(7, 1, 16);
        let donor = rand_img(8, 1, 16);
        for i in 0..50 {
            let mut rng = derive_rng(11, "range", &[i]);
            let out =
                synthesize_pseudo(&src, &donor, "s", &SynthParams::default(), &mut rng).unwrap();
            assert!(out.image.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn paired_batch_pairs_and_replays() {
        let mut batch = Array4::zeros((2, 1, 8, 8));
        batch.index_axis_mut(Axis(0), 0).assign(&rand_img(20, 1, 8));
        batch.index_axis_mut(Axis(0), 1).assign(&rand_img(21, 1, 8));
        let ids = vec!["a".to_string(), "b".to_string()];

        let mut rng = derive_rng(30, "pair", &[]);
        let (pseudo, masks, _) = paired_batch(&batch, &ids, &params(1.0, 1.0), &mut rng).unwrap();
        // element 0 derives from source 0 with donor 1, and vice versa
        for (i, donor_idx) in [(0usize, 1usize), (1, 0)] {
            for y in 0..8 {
                for x in 0..8 {
                    let expect = if masks[i][[y, x]] == 1 {
                        batch[[donor_idx, 0, y, x]]
                    } else {
                        batch[[i, 0, y, x]]
                    };
                    assert_eq!(pseudo[[i, 0, y, x]], expect);
                }
            }
        }

        let mut rng2 = derive_rng(30, "pair", &[]);
        let (pseudo2, _, _) = paired_batch(&batch, &ids, &params(1.0, 1.0), &mut rng2).unwrap();
        assert_eq!(pseudo, pseudo2, "same seed must replay");
    }

    #[test]
    fn paired_batch_of_one_returns_source() {
        let mut batch = Array4::zeros((1, 1, 8, 8));
        batch.index_axis_mut(Axis(0), 0).assign(&rand_img(22, 1, 8));
        let mut rng = derive_rng(31, "pair1", &[]);
        let (pseudo, _, alphas) =
            paired_batch(&batch, &["only".into()], &SynthParams::default(), &mut rng).unwrap();
        assert_eq!(pseudo, batch);
        assert_eq!(alphas[0], 0.0);
    }
}
