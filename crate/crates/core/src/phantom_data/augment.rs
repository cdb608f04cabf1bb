//! Training-time augmentation of scans and scan pairs.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Intensity used to fill voxels shifted in from outside the volume.
pub const BACKGROUND: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Largest translation per axis as a fraction of its extent.
    pub max_shift_fraction: f64,
    pub flip_probability: f64,
    pub blur_sigma_max: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift_fraction: 0.15,
            flip_probability: 0.5,
            blur_sigma_max: 0.9,
            noise_sigma: 0.001,
        }
    }
}

/// Geometric part of an augmentation, shared by both members of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTransform {
    /// Integer voxel shift per axis `[H, W, D]`.
    pub shift: [i64; 3],
    /// Mirror along the width axis.
    pub flip: bool,
}

impl PairTransform {
    pub fn identity() -> Self {
        Self { shift: [0; 3], flip: false }
    }

    pub fn sample(rng: &mut impl Rng, shape: [usize; 3], cfg: &AugmentConfig) -> Self {
        let mut shift = [0i64; 3];
        for (s, &n) in shift.iter_mut().zip(&shape) {
            let m = (cfg.max_shift_fraction * n as f64).floor() as i64;
            *s = rng.gen_range(-m..=m);
        }
        Self {
            shift,
            flip: rng.gen_bool(cfg.flip_probability.clamp(0.0, 1.0)),
        }
    }

    /// Applies shift then flip, filling uncovered voxels with `fill`.
    pub fn apply(&self, src: &[f64], shape: [usize; 3], fill: f64) -> Vec<f64> {
        let [hn, wn, dn] = shape;
        let mut out = vec![fill; src.len()];
        for h in 0..hn {
            for w in 0..wn {
                let ws = if self.flip { wn - 1 - w } else { w };
                for d in 0..dn {
                    let sh = h as i64 - self.shift[0];
                    let sw = ws as i64 - self.shift[1];
                    let sd = d as i64 - self.shift[2];
                    if (0..hn as i64).contains(&sh) && (0..wn as i64).contains(&sw) && (0..dn as i64).contains(&sd) {
                        out[(h * wn + w) * dn + d] = src[((sh as usize) * wn + sw as usize) * dn + sd as usize];
                    }
                }
            }
        }
        out
    }
}

/// Separable Gaussian blur over the `H` and `W` axes with edge clamping.
pub fn gaussian_blur_inplane(src: &[f64], shape: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let [hn, wn, dn] = shape;
    let idx = |h: usize, w: usize, d: usize| (h * wn + w) * dn + d;
    let pass = |input: &[f64], along_h: bool| {
        let mut out = vec![0.0; input.len()];
        for h in 0..hn {
            for w in 0..wn {
                for d in 0..dn {
                    let mut acc = 0.0;
                    for (j, kv) in kernel.iter().enumerate() {
                        let o = j as i64 - radius;
                        let v = if along_h {
                            input[idx((h as i64 + o).clamp(0, hn as i64 - 1) as usize, w, d)]
                        } else {
                            input[idx(h, (w as i64 + o).clamp(0, wn as i64 - 1) as usize, d)]
                        };
                        acc += kv * v;
                    }
                    out[idx(h, w, d)] = acc;
                }
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub volume: Vec<f64>,
    pub roi: Vec<f64>,
    /// Geometric draw used; pass it as `paired_with` for the second member.
    pub transform: PairTransform,
    pub blur_sigma: f64,
}

/// Augments one scan. The geometric transform is drawn unless `paired_with`
/// supplies the partner's; blur and noise are always drawn afresh.
pub fn augment(
    volume: &[f64],
    roi: &[f64],
    shape: [usize; 3],
    rng: &mut impl Rng,
    paired_with: Option<PairTransform>,
    cfg: &AugmentConfig,
) -> Augmented {
    let transform = paired_with.unwrap_or_else(|| PairTransform::sample(rng, shape, cfg));
    let moved = transform.apply(volume, shape, BACKGROUND);
    let roi = transform.apply(roi, shape, 0.0);
    let blur_sigma = if cfg.blur_sigma_max > 0.0 { rng.gen_range(0.0..=cfg.blur_sigma_max) } else { 0.0 };
    let mut out = gaussian_blur_inplane(&moved, shape, blur_sigma);
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
        out.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    Augmented {
        volume: out,
        roi,
        transform,
        blur_sigma,
    }
}
