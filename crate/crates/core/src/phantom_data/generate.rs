//! Analytic rendering of layered retina-like volumes with growing drusen,
//! fluid after conversion, and smooth inter-visit deformation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PhantomConfig;
use crate::error::{MorphError, Result};

/// Relative boundary positions between ILM (0) and BM (1) and the intensity
/// step taken at each.
const LAYERS: [(f64, f64); 9] = [
    (0.00, 1.40),  // vitreous -> nerve fibre layer
    (0.12, -0.40), // ganglion cells
    (0.25, 0.20),  // inner plexiform
    (0.40, -0.60), // inner nuclear
    (0.52, 0.50),  // outer plexiform
    (0.62, -0.60), // outer nuclear
    (0.84, 0.70),  // photoreceptor segments
    (0.92, 0.30),  // pigment epithelium
    (1.00, -0.70), // choroid
];
const VITREOUS: f64 = -0.9;
const DRUSEN_INTENSITY: f64 = 0.35;
const FLUID_INTENSITY: f64 = -0.75;
const EDGE_WIDTH: f64 = 0.6;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One drusen-like deposit lifting the pigment epithelium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Centre along width and depth (voxels).
    pub center: [f64; 2],
    /// Gaussian widths along width and depth.
    pub sigma: [f64; 2],
    /// Peak lift (rows) at time 0.
    pub amplitude0: f64,
    /// Lift growth per month (non-negative).
    pub growth: f64,
}

impl Lesion {
    pub fn amplitude(&self, t: f64) -> f64 {
        self.amplitude0 + self.growth * t
    }
}

/// Per-eye anatomy shared by every visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeAnatomy {
    pub ilm_row: f64,
    pub thickness: f64,
    /// Quadratic sag of the layers across the width.
    pub curvature: f64,
    pub lesions: Vec<Lesion>,
    /// Texture waves: wave vector `(k_h, k_w, k_d)` and phase.
    pub texture: Vec<([f64; 3], f64)>,
    pub texture_amplitude: f64,
}

/// Smooth visit-specific displacement: rigid shift plus low-frequency waves.
/// Each component depends only on the two other axes, so its own axis
/// derivative is zero and the map never folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitDeformation {
    pub shift: [f64; 3],
    pub wave_amplitude: [f64; 3],
    pub wave_phase: [f64; 3],
}

impl VisitDeformation {
    pub fn identity() -> Self {
        Self {
            shift: [0.0; 3],
            wave_amplitude: [0.0; 3],
            wave_phase: [0.0; 3],
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let mut s = Self::identity();
        let depth_scale = [1.0, 1.0, 0.2];
        for a in 0..3 {
            s.shift[a] = rng.gen_range(-amplitude..=amplitude) * depth_scale[a];
            s.wave_amplitude[a] = rng.gen_range(0.0..=0.5 * amplitude) * depth_scale[a];
            s.wave_phase[a] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        s
    }

    /// Displacement at voxel `(h, w, d)` of a volume with size `dims`.
    pub fn at(&self, p: [f64; 3], dims: [usize; 3]) -> [f64; 3] {
        let tau = std::f64::consts::TAU;
        let frac = |a: usize| p[a] / dims[a] as f64;
        let u_h = self.shift[0] + self.wave_amplitude[0] * (tau * (frac(1) + 0.5 * frac(2)) + self.wave_phase[0]).sin();
        let u_w = self.shift[1] + self.wave_amplitude[1] * (tau * (frac(0) + frac(2)) + self.wave_phase[1]).sin();
        let u_d = self.shift[2] + self.wave_amplitude[2] * (tau * (frac(0) + frac(1)) + self.wave_phase[2]).sin();
        [u_h, u_w, u_d]
    }

    /// Smallest `1 + du_i/dx_i` over the volume (exactly 1 by construction).
    pub fn min_axis_jacobian(&self) -> f64 {
        1.0
    }
}

impl EyeAnatomy {
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &PhantomConfig, lesions: Vec<Lesion>) -> Self {
        let [h, _, _] = cfg.shape;
        let scale = h as f64 / 48.0;
        let texture = (0..6)
            .map(|_| {
                let k = [rng.gen_range(0.3..1.6), rng.gen_range(0.15..0.9), rng.gen_range(0.2..1.2)];
                (k, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self {
            ilm_row: (14.0 + rng.gen_range(-1.5..1.5)) * scale,
            thickness: (20.0 + rng.gen_range(-1.0..1.0)) * scale,
            curvature: rng.gen_range(-2.0..2.0) * scale,
            lesions,
            texture,
            texture_amplitude: cfg.texture_amplitude,
        }
    }

    /// Total lift of all lesions at tissue position `(x, z)` and time `t`.
    fn lift(&self, x: f64, z: f64, t: f64) -> f64 {
        self.lesions
            .iter()
            .map(|l| {
                let dx = (x - l.center[0]) / l.sigma[0];
                let dz = (z - l.center[1]) / l.sigma[1];
                l.amplitude(t).max(0.0) * (-0.5 * (dx * dx + dz * dz)).exp()
            })
            .sum()
    }

    /// Sum of peak lifts, the quantity compared with the conversion threshold.
    pub fn load(&self, t: f64) -> f64 {
        self.lesions.iter().map(|l| l.amplitude(t).max(0.0)).sum()
    }

    fn boundaries(&self, x: f64, width: usize) -> (f64, f64) {
        let c = (x / width as f64 - 0.5) * 2.0;
        let ilm = self.ilm_row + self.curvature * c * c;
        (ilm, ilm + self.thickness)
    }

    fn band(&self, yf: f64, ilm: f64, bm: f64) -> f64 {
        let span = bm - ilm;
        let mut v = VITREOUS;
        for &(pos, step) in &LAYERS {
            v += step * logistic((yf - (ilm + pos * span)) / EDGE_WIDTH);
        }
        v
    }

    fn texture_at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self.texture.iter().map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum();
        self.texture_amplitude * s / (self.texture.len() as f64).sqrt()
    }
}

/// Renders one visit: returns `(volume, roi)` in `[H,W,D]` order.
pub fn render(
    anatomy: &EyeAnatomy,
    deformation: &VisitDeformation,
    t: f64,
    converted: bool,
    dims: [usize; 3],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let [hn, wn, dn] = dims;
    let mut vol = vec![0.0; hn * wn * dn];
    let mut roi = vec![0.0; hn * wn * dn];
    let fluid_at = converted.then(|| {
        anatomy
            .lesions
            .iter()
            .max_by(|a, b| a.amplitude(t).total_cmp(&b.amplitude(t)))
            .map(|l| l.center)
    });
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    for h in 0..hn {
        for w in 0..wn {
            for d in 0..dn {
                let p = [h as f64, w as f64, d as f64];
                let u = deformation.at(p, dims);
                let (y, x, z) = (p[0] + u[0], p[1] + u[1], p[2] + u[2]);
                let (ilm, bm) = anatomy.boundaries(x, wn);
                let lift = anatomy.lift(x, z, t).min(0.8 * (bm - ilm));
                let top = bm - lift;
                // Layers between the ILM and the lifted epithelium are compressed.
                let yf = if y <= ilm { y } else if y < bm { ilm + (y - ilm) * (bm - ilm) / (top - ilm) } else { y };
                let layered = anatomy.band(yf.min(bm + (y - bm).max(0.0)), ilm, bm);
                let in_drusen = logistic((y - top) / 0.5) * logistic((bm - y) / 0.5) * (lift / (lift + 0.3));
                let mut v = layered * (1.0 - in_drusen) + DRUSEN_INTENSITY * in_drusen;
                if let Some(Some(c)) = fluid_at {
                    let fy = (y - (top - 2.0)) / 2.0;
                    let fx = (x - c[0]) / 5.0;
                    let fz = (z - c[1]) / 1.8;
                    let r2 = fy * fy + fx * fx + fz * fz;
                    let wf = logistic((1.0 - r2) / 0.15);
                    v = v * (1.0 - wf) + FLUID_INTENSITY * wf;
                }
                let tissue = logistic((y - ilm) / EDGE_WIDTH) * logistic((bm + 3.0 - y) / EDGE_WIDTH);
                v += tissue * anatomy.texture_at([y, x, z]);
                if noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                let i = (h * wn + w) * dn + d;
                vol[i] = v.clamp(-1.0, 1.0);
                roi[i] = if y >= ilm - 2.0 && y <= bm + 4.0 { 1.0 } else { 0.0 };
            }
        }
    }
    (vol, roi)
}

/// Lesions whose total load crosses `threshold` at `conversion_time`
/// (`None` = never within any finite time when `growth_total` is 0).
pub fn sample_lesions(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    conversion_time: Option<f64>,
) -> Result<Vec<Lesion>> {
    let [_, wn, dn] = cfg.shape;
    let n = rng.gen_range(cfg.lesion_count[0]..=cfg.lesion_count[1].max(cfg.lesion_count[0]));
    if n == 0 {
        return Err(MorphError::Config("lesion_count must allow at least one lesion".into()));
    }
    let thr = cfg.conversion_threshold;
    let (load0, growth_total) = match conversion_time {
        Some(tc) if thr > 0.0 => {
            let load0 = rng.gen_range(0.2..0.8) * thr;
            (load0, (thr - load0) / tc.max(1e-6))
        }
        Some(_) => (0.0, 0.0),
        None => (rng.gen_range(0.1..0.6) * thr, rng.gen_range(0.0..=cfg.non_converter_growth) * thr),
    };
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    Ok(weights
        .iter()
        .map(|&wt| Lesion {
            center: [rng.gen_range(0.2..0.8) * wn as f64, rng.gen_range(0.25..0.75) * dn as f64],
            sigma: [rng.gen_range(2.5..4.5) * wn as f64 / 48.0, rng.gen_range(1.0..2.0) * dn as f64 / 8.0],
            amplitude0: load0 * wt / wsum,
            growth: growth_total * wt / wsum,
        })
        .collect())
}
