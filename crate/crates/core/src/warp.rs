//! Differentiable morphing transform: trilinear warping by a voxel-unit
//! displacement field followed by an additive intensity map.
//!
//! Displacement channel `k` moves along spatial axis `k` (height, width,
//! depth). Sample coordinates are clamped to the volume boundary.

use crate::error::{shape_err, MorphError, Result};
use crate::par;
use crate::tensor::{GradFn, Tensor};

/// Deformation field `[3,H,W,D]` plus additive map `[1,H,W,D]`.
#[derive(Debug, Clone)]
pub struct MorphTransform {
    pub deformation: Tensor,
    pub additive: Tensor,
}

impl MorphTransform {
    pub fn identity(spatial: [usize; 3]) -> Self {
        let [h, w, d] = spatial;
        Self {
            deformation: Tensor::zeros(&[3, h, w, d]),
            additive: Tensor::zeros(&[1, h, w, d]),
        }
    }

    pub fn apply(&self, vol: &Tensor) -> Result<Tensor> {
        morph(vol, &self.deformation, &self.additive)
    }
}

#[derive(Clone, Copy)]
struct AxisSample {
    i0: usize,
    i1: usize,
    frac: f64,
    /// Sample fell outside and was clamped; no gradient flows to the field.
    clamped: bool,
}

#[inline]
fn axis_sample(q: f64, n: usize) -> AxisSample {
    let max = (n - 1) as f64;
    let clamped = !(0.0..=max).contains(&q);
    let q = q.clamp(0.0, max);
    let i0 = (q.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let frac = if i1 == i0 { 0.0 } else { q - i0 as f64 };
    AxisSample { i0, i1, frac, clamped }
}

struct Sampler {
    dims: [usize; 3],
}

impl Sampler {
    #[inline]
    fn samples(&self, disp: &[f64], voxel: usize) -> [AxisSample; 3] {
        let [h, w, d] = self.dims;
        let plane = h * w * d;
        let (ph, pw, pd) = (voxel / (w * d), (voxel / d) % w, voxel % d);
        [
            axis_sample(ph as f64 + disp[voxel], h),
            axis_sample(pw as f64 + disp[plane + voxel], w),
            axis_sample(pd as f64 + disp[2 * plane + voxel], d),
        ]
    }

    #[inline]
    fn index(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.dims[1] + b) * self.dims[2] + c
    }
}

struct WarpFn {
    vol: Tensor,
    disp: Tensor,
}

impl GradFn for WarpFn {
    fn name(&self) -> &'static str {
        "apply_deformation"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.vol, &self.disp]
    }
    fn backward(&self, _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let s = self.vol.shape();
        let sampler = Sampler { dims: [s[1], s[2], s[3]] };
        let plane = s[1] * s[2] * s[3];
        let channels = s[0];
        let v = self.vol.data();
        let disp = self.disp.data();
        let mut gv = self.vol.requires_grad().then(|| vec![0.0; v.len()]);
        let mut gd = self.disp.requires_grad().then(|| vec![0.0; disp.len()]);
        for p in 0..plane {
            let [sh, sw, sd] = sampler.samples(disp, p);
            let hs = [(sh.i0, 1.0 - sh.frac, -1.0), (sh.i1, sh.frac, 1.0)];
            let ws = [(sw.i0, 1.0 - sw.frac, -1.0), (sw.i1, sw.frac, 1.0)];
            let ds = [(sd.i0, 1.0 - sd.frac, -1.0), (sd.i1, sd.frac, 1.0)];
            let mut dq = [0.0; 3];
            for c in 0..channels {
                let g = grad[c * plane + p];
                if g == 0.0 {
                    continue;
                }
                let base = c * plane;
                for &(a, wa, da) in &hs {
                    for &(b, wb, db) in &ws {
                        for &(e, we, de) in &ds {
                            let idx = base + sampler.index(a, b, e);
                            if let Some(gv) = gv.as_mut() {
                                gv[idx] += g * wa * wb * we;
                            }
                            let val = g * v[idx];
                            dq[0] += val * da * wb * we;
                            dq[1] += val * wa * db * we;
                            dq[2] += val * wa * wb * de;
                        }
                    }
                }
            }
            if let Some(gd) = gd.as_mut() {
                for (k, smp) in [sh, sw, sd].iter().enumerate() {
                    if !smp.clamped && smp.i1 != smp.i0 {
                        gd[k * plane + p] = dq[k];
                    }
                }
            }
        }
        vec![gv, gd]
    }
}

fn check_shapes(op: &'static str, vol: &Tensor, disp: &Tensor) -> Result<()> {
    if vol.ndim() != 4 {
        return Err(shape_err(op, "rank", 4, vol.ndim()));
    }
    if disp.ndim() != 4 || disp.shape()[0] != 3 {
        return Err(shape_err(op, "displacement channels", 3, format!("{:?}", disp.shape())));
    }
    for (a, name) in ["height", "width", "depth"].iter().enumerate() {
        if vol.shape()[a + 1] != disp.shape()[a + 1] {
            return Err(shape_err(op, name, vol.shape()[a + 1], disp.shape()[a + 1]));
        }
    }
    Ok(())
}

/// Samples `vol` at `p + D(p)` for every voxel `p`.
pub fn apply_deformation(vol: &Tensor, disp: &Tensor) -> Result<Tensor> {
    check_shapes("apply_deformation", vol, disp)?;
    if disp.data().iter().any(|v| v.is_nan()) {
        return Err(MorphError::NonFinite("apply_deformation"));
    }
    let s = vol.shape();
    let sampler = Sampler { dims: [s[1], s[2], s[3]] };
    let plane = s[1] * s[2] * s[3];
    let v = vol.data();
    let dd = disp.data();
    let row = s[2] * s[3];
    let mut out = vec![0.0; v.len()];
    par::for_each_chunk_mut(&mut out, row, |r, chunk| {
        let c = r * row / plane;
        let base = c * plane;
        let p0 = (r * row) % plane;
        for (j, o) in chunk.iter_mut().enumerate() {
            let [sh, sw, sd] = sampler.samples(dd, p0 + j);
            let mut acc = 0.0;
            for (a, wa) in [(sh.i0, 1.0 - sh.frac), (sh.i1, sh.frac)] {
                for (b, wb) in [(sw.i0, 1.0 - sw.frac), (sw.i1, sw.frac)] {
                    for (e, we) in [(sd.i0, 1.0 - sd.frac), (sd.i1, sd.frac)] {
                        acc += wa * wb * we * v[base + sampler.index(a, b, e)];
                    }
                }
            }
            *o = acc;
        }
    });
    Ok(Tensor::from_op(
        s.to_vec(),
        out,
        Box::new(WarpFn {
            vol: vol.clone(),
            disp: disp.clone(),
        }),
    ))
}

/// `apply_deformation(vol, D) + A`.
pub fn morph(vol: &Tensor, disp: &Tensor, additive: &Tensor) -> Result<Tensor> {
    let warped = apply_deformation(vol, disp)?;
    warped.add(additive)
}

/// Warps a binary mask; the result is a soft mask in `[0, 1]`.
pub fn warp_mask(mask: &Tensor, disp: &Tensor) -> Result<Tensor> {
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(MorphError::InvalidArgument("warp_mask", "mask must be binary".into()));
    }
    apply_deformation(mask, disp)
}
