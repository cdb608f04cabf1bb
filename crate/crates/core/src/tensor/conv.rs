use super::{GradFn, Tensor};
use crate::error::{shape_err, MorphError, Result};
use crate::par;

/// Stride and grouping of a 3D convolution. Padding is always "same" for odd
/// kernels (zero padding of `k/2` on each side before striding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: [1, 1, 1],
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    cout: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    ins: [usize; 3],
    outs: [usize; 3],
}

impl Geom {
    /// Output index range `[lo, hi)` that reads a valid input coordinate for
    /// kernel tap `k` along `axis`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis] as isize;
        let p = self.pad[axis] as isize;
        let n = self.ins[axis] as isize;
        let m = self.outs[axis] as isize;
        let off = k as isize - p;
        // i = o*s + off in [0, n)
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let last = n - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(m) };
        (lo.max(0) as usize, hi.max(lo) as usize)
    }

    fn in_plane(&self) -> usize {
        self.ins.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.outs.iter().product()
    }

    fn taps(&self) -> usize {
        self.k.iter().product()
    }

    /// True when, for tap `kd`, output rows along the last axis map onto whole
    /// contiguous input rows so consecutive `w` rows can be merged.
    fn merge_rows(&self, kd: usize) -> bool {
        self.stride[2] == 1 && self.stride[1] == 1 && kd == self.pad[2] && self.outs[2] == self.ins[2]
    }

    /// Visits every contiguous run `(out_offset, in_offset, len)` touched by
    /// tap `(kh, kw, kd)`.
    #[inline]
    fn for_runs(&self, kh: usize, kw: usize, kd: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (h0, h1) = self.valid(0, kh);
        let (w0, w1) = self.valid(1, kw);
        let (d0, d1) = self.valid(2, kd);
        if h0 >= h1 || w0 >= w1 || d0 >= d1 {
            return;
        }
        let [_, win, din] = self.ins;
        let [_, wout, dout] = self.outs;
        let [sh, sw, sd] = self.stride;
        let [ph, pw, pd] = self.pad;
        if self.merge_rows(kd) {
            let len = (w1 - w0) * dout;
            for oh in h0..h1 {
                let ih = oh * sh + kh - ph;
                let iw = w0 + kw - pw;
                f((oh * wout + w0) * dout, (ih * win + iw) * din, len);
            }
        } else if sd == 1 {
            for oh in h0..h1 {
                let ih = oh * sh + kh - ph;
                for ow in w0..w1 {
                    let iw = ow * sw + kw - pw;
                    f((oh * wout + ow) * dout + d0, (ih * win + iw) * din + d0 + kd - pd, d1 - d0);
                }
            }
        } else {
            for oh in h0..h1 {
                let ih = oh * sh + kh - ph;
                for ow in w0..w1 {
                    let iw = ow * sw + kw - pw;
                    for od in d0..d1 {
                        f((oh * wout + ow) * dout + od, (ih * win + iw) * din + od * sd + kd - pd, 1);
                    }
                }
            }
        }
    }
}

fn geometry(input: &Tensor, weights: &Tensor, spec: ConvSpec) -> Result<Geom> {
    if input.ndim() != 4 {
        return Err(shape_err("conv3d", "input rank", 4, input.ndim()));
    }
    if weights.ndim() != 5 {
        return Err(shape_err("conv3d", "weight rank", 5, weights.ndim()));
    }
    let s = input.shape();
    let w = weights.shape();
    let groups = spec.groups;
    if groups == 0 || s[0] % groups != 0 {
        return Err(shape_err("conv3d", "channels (input)", format!("divisible by groups={groups}"), s[0]));
    }
    if w[0] % groups != 0 {
        return Err(shape_err("conv3d", "channels (output)", format!("divisible by groups={groups}"), w[0]));
    }
    if w[1] != s[0] / groups {
        return Err(shape_err("conv3d", "channels (weight in)", s[0] / groups, w[1]));
    }
    let mut k = [0; 3];
    let mut outs = [0; 3];
    let names = ["height", "width", "depth"];
    for a in 0..3 {
        k[a] = w[2 + a];
        if k[a] % 2 == 0 {
            return Err(shape_err("conv3d", format!("kernel {}", names[a]), "odd", k[a]));
        }
        if spec.stride[a] == 0 {
            return Err(MorphError::InvalidArgument("conv3d", format!("zero stride on {}", names[a])));
        }
        if s[1 + a] == 0 {
            return Err(shape_err("conv3d", names[a], "> 0", 0));
        }
        outs[a] = s[1 + a].div_ceil(spec.stride[a]);
    }
    Ok(Geom {
        cin: s[0],
        cout: w[0],
        groups,
        cin_g: s[0] / groups,
        cout_g: w[0] / groups,
        k,
        stride: spec.stride,
        pad: [k[0] / 2, k[1] / 2, k[2] / 2],
        ins: [s[1], s[2], s[3]],
        outs,
    })
}

fn forward(g: &Geom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let op = g.out_plane();
    let ip = g.in_plane();
    let taps = g.taps();
    let mut out = vec![0.0; g.cout * op];
    par::for_each_chunk_mut(&mut out, op, |co, plane| {
        let grp = co / g.cout_g;
        for cil in 0..g.cin_g {
            let ci = grp * g.cin_g + cil;
            let src = &x[ci * ip..(ci + 1) * ip];
            let wbase = (co * g.cin_g + cil) * taps;
            for kh in 0..g.k[0] {
                for kw in 0..g.k[1] {
                    for kd in 0..g.k[2] {
                        let wv = w[wbase + (kh * g.k[1] + kw) * g.k[2] + kd];
                        g.for_runs(kh, kw, kd, |o, i, len| {
                            for (dst, s) in plane[o..o + len].iter_mut().zip(&src[i..i + len]) {
                                *dst += wv * s;
                            }
                        });
                    }
                }
            }
        }
    });
    out
}

fn grad_input(g: &Geom, w: &[f64], gout: &[f64]) -> Vec<f64> {
    let op = g.out_plane();
    let ip = g.in_plane();
    let taps = g.taps();
    let mut gin = vec![0.0; g.cin * ip];
    par::for_each_chunk_mut(&mut gin, ip, |ci, plane| {
        let grp = ci / g.cin_g;
        let cil = ci % g.cin_g;
        for col in 0..g.cout_g {
            let co = grp * g.cout_g + col;
            let go = &gout[co * op..(co + 1) * op];
            let wbase = (co * g.cin_g + cil) * taps;
            for kh in 0..g.k[0] {
                for kw in 0..g.k[1] {
                    for kd in 0..g.k[2] {
                        let wv = w[wbase + (kh * g.k[1] + kw) * g.k[2] + kd];
                        g.for_runs(kh, kw, kd, |o, i, len| {
                            for (dst, s) in plane[i..i + len].iter_mut().zip(&go[o..o + len]) {
                                *dst += wv * s;
                            }
                        });
                    }
                }
            }
        }
    });
    gin
}

fn grad_weight(g: &Geom, x: &[f64], gout: &[f64]) -> Vec<f64> {
    let op = g.out_plane();
    let ip = g.in_plane();
    let taps = g.taps();
    let per_co = g.cin_g * taps;
    let mut gw = vec![0.0; g.cout * per_co];
    par::for_each_chunk_mut(&mut gw, per_co, |co, wrow| {
        let grp = co / g.cout_g;
        let go = &gout[co * op..(co + 1) * op];
        for cil in 0..g.cin_g {
            let ci = grp * g.cin_g + cil;
            let src = &x[ci * ip..(ci + 1) * ip];
            for kh in 0..g.k[0] {
                for kw in 0..g.k[1] {
                    for kd in 0..g.k[2] {
                        let mut acc = 0.0;
                        g.for_runs(kh, kw, kd, |o, i, len| {
                            for (a, b) in go[o..o + len].iter().zip(&src[i..i + len]) {
                                acc += a * b;
                            }
                        });
                        wrow[cil * taps + (kh * g.k[1] + kw) * g.k[2] + kd] = acc;
                    }
                }
            }
        }
    });
    gw
}

struct Conv3dFn {
    geom: Geom,
    input: Tensor,
    weights: Tensor,
}

impl GradFn for Conv3dFn {
    fn name(&self) -> &'static str {
        "conv3d"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input, &self.weights]
    }
    fn backward(&self, _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let gi = self
            .input
            .requires_grad()
            .then(|| grad_input(&self.geom, self.weights.data(), grad));
        let gw = self
            .weights
            .requires_grad()
            .then(|| grad_weight(&self.geom, self.input.data(), grad));
        vec![gi, gw]
    }
}

/// 3D cross-correlation of `input[C_in,H,W,D]` with
/// `weights[C_out, C_in/groups, kh, kw, kd]`.
///
/// Output spatial size is `ceil(n / stride)` per axis.
pub fn conv3d(input: &Tensor, weights: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let geom = geometry(input, weights, spec)?;
    debug_assert_eq!(geom.cout / geom.groups, geom.cout_g);
    let data = forward(&geom, input.data(), weights.data());
    let shape = vec![geom.cout, geom.outs[0], geom.outs[1], geom.outs[2]];
    Ok(Tensor::from_op(
        shape,
        data,
        Box::new(Conv3dFn {
            geom,
            input: input.clone(),
            weights: weights.clone(),
        }),
    ))
}
