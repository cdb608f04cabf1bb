use super::{GradFn, Tensor};
use crate::error::{shape_err, MorphError, Result};

/// Source taps for one output index (align-corners = false, edge clamped).
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn resample_axis(x: &[f64], shape: &[usize], axis: usize, n_out: usize) -> (Vec<f64>, Vec<usize>) {
    let (outer, n_in, inner) = split(shape, axis);
    let t = taps(n_in, n_out);
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        for (j, tap) in t.iter().enumerate() {
            let a = &x[(o * n_in + tap.i0) * inner..][..inner];
            let b = &x[(o * n_in + tap.i1) * inner..][..inner];
            let dst = &mut out[(o * n_out + j) * inner..][..inner];
            for k in 0..inner {
                dst[k] = a[k] + tap.frac * (b[k] - a[k]);
            }
        }
    }
    let mut s = shape.to_vec();
    s[axis] = n_out;
    (out, s)
}

struct ResampleFn {
    input: Tensor,
    axis: usize,
}

impl GradFn for ResampleFn {
    fn name(&self) -> &'static str {
        "linear_resample"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (outer, n_in, inner) = split(self.input.shape(), self.axis);
        let n_out = out.shape()[self.axis];
        let t = taps(n_in, n_out);
        let mut g = vec![0.0; self.input.numel()];
        for o in 0..outer {
            for (j, tap) in t.iter().enumerate() {
                let src = (o * n_out + j) * inner;
                for k in 0..inner {
                    let gv = grad[src + k];
                    g[(o * n_in + tap.i0) * inner + k] += gv * (1.0 - tap.frac);
                    g[(o * n_in + tap.i1) * inner + k] += gv * tap.frac;
                }
            }
        }
        vec![Some(g)]
    }
}

fn resample_tensor(x: &Tensor, axis: usize, n_out: usize) -> Tensor {
    let (data, shape) = resample_axis(x.data(), x.shape(), axis, n_out);
    Tensor::from_op(
        shape,
        data,
        Box::new(ResampleFn {
            input: x.clone(),
            axis,
        }),
    )
}

fn check(x: &Tensor, out: [usize; 3]) -> Result<()> {
    if x.ndim() != 4 {
        return Err(shape_err("trilinear_resize", "rank", 4, x.ndim()));
    }
    for a in 0..4 {
        if x.shape()[a] == 0 {
            return Err(shape_err("trilinear_resize", a, "> 0", 0));
        }
    }
    if out.iter().any(|&n| n == 0) {
        return Err(MorphError::InvalidArgument("trilinear_resize", "non-positive output size".into()));
    }
    Ok(())
}

/// Trilinear resize of `x[C,H,W,D]` to the given spatial size
/// (align-corners = false, applied as three separable linear passes).
pub fn trilinear_resize_to(x: &Tensor, out: [usize; 3]) -> Result<Tensor> {
    check(x, out)?;
    let mut y = x.clone();
    for (a, &n) in out.iter().enumerate() {
        if y.shape()[a + 1] != n {
            y = resample_tensor(&y, a + 1, n);
        }
    }
    Ok(y)
}

/// Upsamples `x[C,H,W,D]` to `[C, sh*H, sw*W, sd*D]`.
pub fn trilinear_resize(x: &Tensor, scale: [usize; 3]) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(shape_err("trilinear_resize", "rank", 4, x.ndim()));
    }
    if scale.iter().any(|&s| s == 0) {
        return Err(MorphError::InvalidArgument("trilinear_resize", "zero scale".into()));
    }
    let s = x.shape();
    trilinear_resize_to(x, [s[1] * scale[0], s[2] * scale[1], s[3] * scale[2]])
}

/// Non-differentiable trilinear resampling of a plain `[C,H,W,D]` buffer.
pub fn resample_linear(data: &[f64], shape: [usize; 4], out: [usize; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut s = shape.to_vec();
    for (a, &n) in out.iter().enumerate() {
        if s[a + 1] != n {
            let (d, ns) = resample_axis(&cur, &s, a + 1, n);
            cur = d;
            s = ns;
        }
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn constant_preserved_exactly() {
        let x = Tensor::full(&[2, 3, 3, 2], 0.37);
        let y = trilinear_resize(&x, [2, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[2, 6, 6, 4]);
        assert!(y.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn ramp_doubling_pattern() {
        let x = Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        let y = trilinear_resize(&x, [2, 1, 1]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x: Vec<f64> = (0..18).map(|i| ((i * 5) % 7) as f64 * 0.2 - 0.5).collect();
        for scale in [[2, 2, 1], [2, 2, 2]] {
            let w: Vec<f64> = (0..18 * 4 * scale[2]).map(|i| ((i * 3) % 11) as f64 * 0.1 - 0.4).collect();
            let shape_out = [1, 6, 6, 2 * scale[2]];
            let wt = Tensor::new(&shape_out, w).unwrap();
            let err = grad_check(|t| Ok(trilinear_resize(t, scale)?.mul(&wt)?.sum()), &x, &[1, 3, 3, 2], 1e-6).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(trilinear_resize(&Tensor::zeros(&[1, 0, 2, 2]), [2, 2, 1]).is_err());
    }

    #[test]
    fn downsampling_plain_buffer() {
        let ones = vec![1.0; 48 * 48 * 8];
        let r = resample_linear(&ones, [1, 48, 48, 8], [3, 3, 4]);
        assert_eq!(r.len(), 36);
        assert!(r.iter().all(|&v| v == 1.0));
    }
}
