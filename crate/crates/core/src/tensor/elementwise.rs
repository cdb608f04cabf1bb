use super::{GradFn, Tensor};
use crate::error::{shape_err, MorphError, Result};
use crate::par;

/// Pointwise nonlinearities used by the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Sigmoid,
    Softplus,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Affine(f64, f64),
    Square,
    Exp,
    Ln,
    Recip,
    Relu,
    Abs,
    Clamp(f64, f64),
    Act(Activation),
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softplus_inverse(y: f64) -> f64 {
    // y > 0; ln(e^y - 1) computed without overflow for large y.
    y + (-(-y).exp_m1()).ln()
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Affine(a, b) => {
                if b == 0.0 {
                    a * x
                } else {
                    a * x + b
                }
            }
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Recip => 1.0 / x,
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Abs => x.abs(),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Act(Activation::Elu) => elu(x),
            Unary::Act(Activation::Sigmoid) => sigmoid(x),
            Unary::Act(Activation::Softplus) => softplus(x),
        }
    }

    /// dy/dx given input and output.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Affine(a, _) => a,
            Unary::Square => 2.0 * x,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Recip => -y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            // Subgradient 0 at the kink.
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Act(Activation::Elu) => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Act(Activation::Sigmoid) => y * (1.0 - y),
            Unary::Act(Activation::Softplus) => sigmoid(x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Affine(..) => "affine",
            Unary::Square => "square",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Recip => "recip",
            Unary::Relu => "relu",
            Unary::Abs => "abs",
            Unary::Clamp(..) => "clamp",
            Unary::Act(Activation::Elu) => "elu",
            Unary::Act(Activation::Sigmoid) => "sigmoid",
            Unary::Act(Activation::Softplus) => "softplus",
        }
    }
}

struct UnaryFn {
    op: Unary,
    input: Tensor,
}

impl GradFn for UnaryFn {
    fn name(&self) -> &'static str {
        self.op.name()
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.input.data();
        let y = out.data();
        let g = grad
            .iter()
            .zip(x.iter().zip(y))
            .map(|(g, (&x, &y))| g * self.op.derivative(x, y))
            .collect();
        vec![Some(g)]
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryFn {
    op: Binary,
    lhs: Tensor,
    rhs: Tensor,
}

impl GradFn for BinaryFn {
    fn name(&self) -> &'static str {
        match self.op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.lhs, &self.rhs]
    }
    fn backward(&self, _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let want_l = self.lhs.requires_grad();
        let want_r = self.rhs.requires_grad();
        match self.op {
            Binary::Add => vec![want_l.then(|| grad.to_vec()), want_r.then(|| grad.to_vec())],
            Binary::Sub => vec![want_l.then(|| grad.to_vec()), want_r.then(|| grad.iter().map(|g| -g).collect())],
            Binary::Mul => vec![
                want_l.then(|| grad.iter().zip(self.rhs.data()).map(|(g, r)| g * r).collect()),
                want_r.then(|| grad.iter().zip(self.lhs.data()).map(|(g, l)| g * l).collect()),
            ],
        }
    }
}

struct ScalarMulFn {
    input: Tensor,
    factor: Tensor,
}

impl GradFn for ScalarMulFn {
    fn name(&self) -> &'static str {
        "scalar_mul"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input, &self.factor]
    }
    fn backward(&self, _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let s = self.factor.item();
        let gx = self.input.requires_grad().then(|| grad.iter().map(|g| g * s).collect());
        let gs = self.factor.requires_grad().then(|| {
            let prod: Vec<f64> = grad.iter().zip(self.input.data()).map(|(g, x)| g * x).collect();
            vec![super::pairwise_sum(&prod)]
        });
        vec![gx, gs]
    }
}

/// y[c, ...] = x[c, ...] * gain[c] + bias[c]
struct ChannelAffineFn {
    input: Tensor,
    gain: Option<Tensor>,
    bias: Option<Tensor>,
}

impl GradFn for ChannelAffineFn {
    fn name(&self) -> &'static str {
        "channel_affine"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.input];
        v.extend(self.gain.iter());
        v.extend(self.bias.iter());
        v
    }
    fn backward(&self, _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let c = self.input.shape()[0];
        let plane = self.input.numel() / c;
        let x = self.input.data();
        let mut res = Vec::new();
        res.push(self.input.requires_grad().then(|| match &self.gain {
            Some(gain) => {
                let gd = gain.data();
                grad.iter().enumerate().map(|(i, g)| g * gd[i / plane]).collect()
            }
            None => grad.to_vec(),
        }));
        if let Some(gain) = &self.gain {
            res.push(gain.requires_grad().then(|| {
                (0..c)
                    .map(|ch| {
                        let r = ch * plane..(ch + 1) * plane;
                        let prod: Vec<f64> = grad[r.clone()].iter().zip(&x[r]).map(|(g, x)| g * x).collect();
                        super::pairwise_sum(&prod)
                    })
                    .collect()
            }));
        }
        if let Some(bias) = &self.bias {
            res.push(
                bias.requires_grad()
                    .then(|| (0..c).map(|ch| super::pairwise_sum(&grad[ch * plane..(ch + 1) * plane])).collect()),
            );
        }
        res
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, "all", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

impl Tensor {
    fn unary(&self, op: Unary) -> Tensor {
        let data = par::map_slice(self.data(), |x| op.apply(x));
        if !self.requires_grad() {
            return Tensor::new(self.shape(), data).expect("shape preserved");
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Box::new(UnaryFn {
                op,
                input: self.clone(),
            }),
        )
    }

    fn binary(&self, other: &Tensor, op: Binary, name: &'static str) -> Result<Tensor> {
        check_same(name, self, other)?;
        let data: Vec<f64> = match op {
            Binary::Add => self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect(),
            Binary::Sub => self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect(),
            Binary::Mul => self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect(),
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Box::new(BinaryFn {
                op,
                lhs: self.clone(),
                rhs: other.clone(),
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Mul, "mul")
    }

    /// `c * x`.
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Unary::Affine(c, 0.0))
    }

    /// `x + c`.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Unary::Affine(1.0, c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary(Unary::Square)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(Unary::Ln)
    }

    pub fn recip(&self) -> Tensor {
        self.unary(Unary::Recip)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Unary::Relu)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Unary::Abs)
    }

    /// Clamps into `[lo, hi]`; no gradient outside the open interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn activation(&self, kind: Activation) -> Tensor {
        self.unary(Unary::Act(kind))
    }

    pub fn elu(&self) -> Tensor {
        self.activation(Activation::Elu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.activation(Activation::Sigmoid)
    }

    pub fn softplus(&self) -> Tensor {
        self.activation(Activation::Softplus)
    }

    /// Multiplies every element by the value of a one-element tensor.
    pub fn mul_scalar(&self, factor: &Tensor) -> Result<Tensor> {
        if factor.numel() != 1 {
            return Err(shape_err("mul_scalar", "numel", 1, factor.numel()));
        }
        let s = factor.item();
        let data = par::map_slice(self.data(), |x| x * s);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Box::new(ScalarMulFn {
                input: self.clone(),
                factor: factor.clone(),
            }),
        ))
    }

    /// Per-channel (axis 0) gain and bias.
    pub fn channel_affine(&self, gain: Option<&Tensor>, bias: Option<&Tensor>) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(MorphError::InvalidArgument("channel_affine", "rank-0 input".into()));
        }
        let c = self.shape()[0];
        for t in gain.iter().chain(bias.iter()) {
            if t.numel() != c {
                return Err(shape_err("channel_affine", 0, c, t.numel()));
            }
        }
        let plane = self.numel() / c;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let gd = gain.map(|g| g.data());
        let bd = bias.map(|b| b.data());
        par::for_each_chunk_mut(&mut out, plane.max(1), |ch, o| {
            let src = &x[ch * plane..(ch + 1) * plane];
            let gv = gd.map_or(1.0, |g| g[ch]);
            let bv = bd.map_or(0.0, |b| b[ch]);
            for (o, &v) in o.iter_mut().zip(src) {
                *o = if gd.is_some() { v * gv + bv } else { v + bv };
            }
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Box::new(ChannelAffineFn {
                input: self.clone(),
                gain: gain.cloned(),
                bias: bias.cloned(),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn activation_values() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        assert_eq!(x.elu().item(), 0.0);
        assert_eq!(x.sigmoid().item(), 0.5);
        let m1 = Tensor::new(&[1], vec![-1.0]).unwrap();
        assert!((m1.elu().item() - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((m1.elu().item() + 0.6321).abs() < 1e-4);
        let v = Tensor::new(&[3], vec![-10.0, 0.0, 10.0]).unwrap().softplus();
        assert!(v.data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 7.0, 40.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn activation_gradients() {
        let x = [-1.3, -0.2, 0.4, 2.1, -3.0];
        for kind in [Activation::Elu, Activation::Sigmoid, Activation::Softplus] {
            let err = grad_check(|t| Ok(t.activation(kind).square().sum()), &x, &[5], 1e-6).unwrap();
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    #[test]
    fn abs_subgradient_is_zero_at_origin() {
        let x = Tensor::leaf(&[3], vec![0.0, 2.0, -2.0]).unwrap();
        x.abs().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, -1.0]);
    }

    #[test]
    fn channel_affine_gradients() {
        let x = [0.3, -0.1, 0.8, 1.2, -0.7, 0.05];
        let gain = Tensor::new(&[2], vec![1.5, -0.5]).unwrap();
        let err = grad_check(
            |t| Ok(t.channel_affine(Some(&gain), None)?.square().sum()),
            &x,
            &[2, 3],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7);
        let xt = Tensor::new(&[2, 3], x.to_vec()).unwrap();
        let err = grad_check(
            |g| Ok(xt.channel_affine(Some(g), Some(&gain))?.square().sum()),
            &[0.7, 1.1],
            &[2],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7);
    }

    #[test]
    fn shape_mismatch_reports_error() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(a.add(&b), Err(MorphError::Shape { .. })));
    }
}
