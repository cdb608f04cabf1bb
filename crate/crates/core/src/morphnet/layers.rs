//! Parameterised building blocks shared by the encoder, decoders, comparator
//! and classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{MorphError, Result};
use crate::tensor::{concat, conv3d, layer_norm, ConvSpec, Parameter, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Visits every parameter of a network component in a fixed order.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.clone()));
        out
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.data().len());
        n
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |p| p.set_trainable(trainable));
    }

    fn zero_grad(&self) {
        self.visit(&mut |p| p.zero_grad());
    }
}

/// Deterministic initialiser: every parameter draws from a stream keyed by
/// the model seed and its own name, so adding or reordering layers leaves
/// the other initial values untouched.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Parameter {
        let n = shape.iter().product();
        let mut rng = self.rng(name);
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Parameter::new(name, shape, data).expect("shape")
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Parameter {
        let n = shape.iter().product();
        Parameter::new(name, shape, vec![value; n]).expect("shape")
    }
}

/// 3D convolution with optional per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub spec: ConvSpec,
}

impl Conv {
    /// He-normal weights for a `c_in -> c_out` convolution with kernel `k`.
    pub fn new(init: &Init, name: &str, c_in: usize, c_out: usize, k: [usize; 3], spec: ConvSpec, bias: bool) -> Self {
        let per_group = c_in / spec.groups;
        let fan_in = (per_group * k[0] * k[1] * k[2]) as f64;
        let weight = init.normal(&format!("{name}.weight"), &[c_out, per_group, k[0], k[1], k[2]], (2.0 / fan_in).sqrt());
        let bias = bias.then(|| init.constant(&format!("{name}.bias"), &[c_out], 0.0));
        Self { weight, bias, spec }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv3d(x, &self.weight.value(), self.spec)?;
        match &self.bias {
            Some(b) => y.channel_affine(None, Some(&b.value())),
            None => Ok(y),
        }
    }
}

impl Module for Conv {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Layer normalisation over a whole `[C,H,W,D]` map with per-channel affine.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl Norm {
    pub fn new(init: &Init, name: &str, channels: usize) -> Self {
        Self {
            gain: init.constant(&format!("{name}.gain"), &[channels], 1.0),
            bias: init.constant(&format!("{name}.bias"), &[channels], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, NORM_EPS)?.channel_affine(Some(&self.gain.value()), Some(&self.bias.value()))
    }

    /// Normalisation followed by ELU.
    pub fn pre_activate(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.elu())
    }
}

impl Module for Norm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.gain);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Three orthogonal-plane convolutions: half the filters in the B-scan plane
/// (3×3×1), a quarter each in the 1×3×3 and 3×1×3 planes.
#[derive(Debug, Clone)]
pub struct PlaneConvs {
    pub in_plane: Conv,
    pub wd_plane: Conv,
    pub hd_plane: Conv,
}

impl PlaneConvs {
    pub fn new(init: &Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        if c_out % 4 != 0 || c_out == 0 {
            return Err(MorphError::InvalidArgument(
                "s3dconv",
                format!("channel count {c_out} is not a positive multiple of 4"),
            ));
        }
        let p = c_out / 4;
        let spec = ConvSpec::default();
        Ok(Self {
            in_plane: Conv::new(init, &format!("{name}.hw"), c_in, 2 * p, [3, 3, 1], spec, false),
            wd_plane: Conv::new(init, &format!("{name}.wd"), c_in, p, [1, 3, 3], spec, false),
            hd_plane: Conv::new(init, &format!("{name}.hd"), c_in, p, [3, 1, 3], spec, false),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.in_plane.forward(x)?;
        let b = self.wd_plane.forward(x)?;
        let c = self.hd_plane.forward(x)?;
        concat(&[&a, &b, &c])
    }
}

impl Module for PlaneConvs {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.in_plane.visit(f);
        self.wd_plane.visit(f);
        self.hd_plane.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.in_plane.visit_mut(f);
        self.wd_plane.visit_mut(f);
        self.hd_plane.visit_mut(f);
    }
}

/// Separable 3D convolution block: norm, ELU, then [`PlaneConvs`]; keeps the
/// channel count.
#[derive(Debug, Clone)]
pub struct S3DConv {
    pub norm: Norm,
    pub convs: PlaneConvs,
}

impl S3DConv {
    pub fn new(init: &Init, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            convs: PlaneConvs::new(init, name, channels, channels)?,
            norm: Norm::new(init, &format!("{name}.norm"), channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.norm.gain.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().first() != Some(&self.channels()) {
            return Err(crate::error::shape_err(
                "s3dconv",
                "channels",
                self.channels(),
                x.shape().first().copied().unwrap_or(0),
            ));
        }
        self.convs.forward(&self.norm.pre_activate(x)?)
    }
}

impl Module for S3DConv {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.norm.visit(f);
        self.convs.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm.visit_mut(f);
        self.convs.visit_mut(f);
    }
}

/// `concat(x, s3d(s3d(x)))`: doubles the channel count.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub first: S3DConv,
    pub second: S3DConv,
}

impl EncoderBlock {
    pub fn new(init: &Init, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            first: S3DConv::new(init, &format!("{name}.s3d0"), channels)?,
            second: S3DConv::new(init, &format!("{name}.s3d1"), channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.second.forward(&self.first.forward(x)?)?;
        concat(&[x, &y])
    }
}

impl Module for EncoderBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.first.visit(f);
        self.second.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.first.visit_mut(f);
        self.second.visit_mut(f);
    }
}

/// Strided depthwise 3×3×3 convolution followed by a pointwise mix.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub depthwise: Conv,
    pub pointwise: Conv,
}

impl Downsample {
    pub fn new(init: &Init, name: &str, channels: usize, stride: [usize; 3]) -> Self {
        let dw = ConvSpec { stride, groups: channels };
        Self {
            depthwise: Conv::new(init, &format!("{name}.dw"), channels, channels, [3, 3, 3], dw, false),
            pointwise: Conv::new(init, &format!("{name}.pw"), channels, channels, [1, 1, 1], ConvSpec::default(), true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise.forward(x)?)
    }
}

impl Module for Downsample {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.depthwise.visit(f);
        self.pointwise.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.depthwise.visit_mut(f);
        self.pointwise.visit_mut(f);
    }
}

/// Pre-activated pointwise MLP: norm, ELU, 1×1×1, ELU, 1×1×1.
#[derive(Debug, Clone)]
pub struct Pathway {
    pub norm: Norm,
    pub hidden: Conv,
    pub out: Conv,
}

impl Pathway {
    pub fn new(init: &Init, name: &str, c_in: usize, c_hidden: usize, c_out: usize) -> Self {
        let spec = ConvSpec::default();
        Self {
            norm: Norm::new(init, &format!("{name}.norm"), c_in),
            hidden: Conv::new(init, &format!("{name}.fc0"), c_in, c_hidden, [1, 1, 1], spec, true),
            out: Conv::new(init, &format!("{name}.fc1"), c_hidden, c_out, [1, 1, 1], spec, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden.forward(&self.norm.pre_activate(x)?)?.elu();
        self.out.forward(&h)
    }
}

impl Module for Pathway {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.norm.visit(f);
        self.hidden.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm.visit_mut(f);
        self.hidden.visit_mut(f);
        self.out.visit_mut(f);
    }
}

fn nth_param_mut<M: Module>(model: &mut M, target: usize, f: &mut dyn FnMut(&mut Parameter)) {
    let mut j = 0;
    model.visit_mut(&mut |p| {
        if j == target {
            f(p);
        }
        j += 1;
    });
}

/// Finite-difference check of every trainable parameter of `model`.
///
/// For each parameter tensor the `per_tensor` coordinates with the largest
/// analytic gradient are perturbed by `±h`. Returns the worst relative error
/// and the coordinate where it occurred. A coordinate whose analytic gradient
/// is exactly zero passes when the central difference is within rounding
/// noise of the loss (`1e-7 * max(1, |loss|)`).
pub fn module_grad_check<M, F>(model: &mut M, loss: F, h: f64, per_tensor: usize) -> Result<(f64, String)>
where
    M: Module,
    F: Fn(&M) -> Result<Tensor>,
{
    model.zero_grad();
    let base = loss(model)?;
    base.backward()?;
    let noise = 1e-7 * base.item().abs().max(1.0);
    let mut probes: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    let mut k = 0;
    model.visit(&mut |p| {
        if p.trainable() {
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.data().len()]);
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
            probes.push((k, order.into_iter().take(per_tensor).map(|i| (i, g[i])).collect()));
        }
        k += 1;
    });
    model.zero_grad();
    let mut worst = (0.0f64, String::new());
    for (target, coords) in probes {
        for (i, analytic) in coords {
            let set = |model: &mut M, value: Option<f64>, delta: f64| {
                let mut seen = (0.0, String::new());
                nth_param_mut(model, target, &mut |p| {
                    let mut d = p.data().to_vec();
                    seen = (d[i], format!("{}[{i}]", p.name()));
                    d[i] = value.unwrap_or(d[i]) + delta;
                    p.set_data(d).expect("same length");
                });
                seen
            };
            let (original, name) = set(model, None, h);
            let plus = loss(model)?.item();
            set(model, Some(original), -h);
            let minus = loss(model)?.item();
            set(model, Some(original), 0.0);
            let numeric = (plus - minus) / (2.0 * h);
            let err = if analytic == 0.0 && numeric.abs() < noise {
                0.0
            } else {
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
            };
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    Ok(worst)
}
