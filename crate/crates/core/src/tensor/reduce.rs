use super::{GradFn, Tensor};
use crate::error::{MorphError, Result};
use crate::par;

const BLOCK: usize = 128;

/// Deterministic pairwise summation.
///
/// The input is cut into 128-element blocks, each summed left to right; block
/// sums are then combined by adding adjacent pairs level by level (an odd
/// trailing element is carried up unchanged). The association tree depends
/// only on the length, so the result is bit-stable across thread counts.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= BLOCK {
        return xs.iter().fold(0.0, |a, &b| a + b);
    }
    let nblocks = xs.len().div_ceil(BLOCK);
    let mut level: Vec<f64> = if nblocks >= 64 {
        par::map_range(nblocks, |b| {
            let end = ((b + 1) * BLOCK).min(xs.len());
            xs[b * BLOCK..end].iter().fold(0.0, |a, &v| a + v)
        })
    } else {
        xs.chunks(BLOCK).map(|c| c.iter().fold(0.0, |a, &v| a + v)).collect()
    };
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|p| if p.len() == 2 { p[0] + p[1] } else { p[0] })
            .collect();
    }
    level[0]
}

/// Reductions available on tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Global average pooling over all axes after the first (channel) axis.
    Gap,
    L2Norm,
    L1Norm,
}

struct ReduceFn {
    kind: Reduction,
    input: Tensor,
}

impl GradFn for ReduceFn {
    fn name(&self) -> &'static str {
        match self.kind {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
            Reduction::Gap => "gap",
            Reduction::L2Norm => "l2norm",
            Reduction::L1Norm => "l1norm",
        }
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.input.numel();
        let x = self.input.data();
        let g = match self.kind {
            Reduction::Sum => vec![grad[0]; n],
            Reduction::Mean => vec![grad[0] / n as f64; n],
            Reduction::Gap => {
                let c = self.input.shape()[0];
                let plane = n / c;
                (0..n).map(|i| grad[i / plane] / plane as f64).collect()
            }
            Reduction::L2Norm => {
                let norm = out.item();
                if norm == 0.0 {
                    vec![0.0; n]
                } else {
                    let s = grad[0] / norm;
                    x.iter().map(|v| v * s).collect()
                }
            }
            Reduction::L1Norm => x
                .iter()
                .map(|&v| {
                    if v > 0.0 {
                        grad[0]
                    } else if v < 0.0 {
                        -grad[0]
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        vec![Some(g)]
    }
}

impl Tensor {
    /// Applies a reduction. `Gap` yields shape `[C]`; the others a scalar.
    pub fn reduce(&self, kind: Reduction) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(MorphError::Empty("reduce"));
        }
        let x = self.data();
        let (shape, data) = match kind {
            Reduction::Sum => (vec![1], vec![pairwise_sum(x)]),
            Reduction::Mean => (vec![1], vec![pairwise_sum(x) / x.len() as f64]),
            Reduction::Gap => {
                if self.ndim() < 2 {
                    return Err(MorphError::InvalidArgument("reduce", "gap needs a channel axis".into()));
                }
                let c = self.shape()[0];
                let plane = x.len() / c;
                if plane == 0 {
                    return Err(MorphError::Empty("reduce"));
                }
                let v = (0..c)
                    .map(|ch| pairwise_sum(&x[ch * plane..(ch + 1) * plane]) / plane as f64)
                    .collect();
                (vec![c], v)
            }
            Reduction::L2Norm => {
                let sq = par::map_slice(x, |v| v * v);
                (vec![1], vec![pairwise_sum(&sq).sqrt()])
            }
            Reduction::L1Norm => {
                let ab = par::map_slice(x, f64::abs);
                (vec![1], vec![pairwise_sum(&ab)])
            }
        };
        Ok(Tensor::from_op(
            shape,
            data,
            Box::new(ReduceFn {
                kind,
                input: self.clone(),
            }),
        ))
    }

    pub fn sum(&self) -> Tensor {
        self.reduce(Reduction::Sum).unwrap_or_else(|_| Tensor::scalar(0.0))
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.reduce(Reduction::Mean)
    }

    pub fn l2norm(&self) -> Result<Tensor> {
        self.reduce(Reduction::L2Norm)
    }

    pub fn l1norm(&self) -> Result<Tensor> {
        self.reduce(Reduction::L1Norm)
    }

    pub fn gap(&self) -> Result<Tensor> {
        self.reduce(Reduction::Gap)
    }
}
