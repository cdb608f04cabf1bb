use super::{GradFn, Tensor};
use crate::error::{shape_err, MorphError, Result};

struct ConcatFn {
    parts: Vec<Tensor>,
}

impl GradFn for ConcatFn {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        self.parts.iter().collect()
    }
    fn backward(&self, _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut offset = 0;
        self.parts
            .iter()
            .map(|p| {
                let n = p.numel();
                let g = p.requires_grad().then(|| grad[offset..offset + n].to_vec());
                offset += n;
                g
            })
            .collect()
    }
}

/// Concatenates along axis 0 (channels).
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(MorphError::Empty("concat"))?;
    let tail = &first.shape()[1..];
    let mut channels = 0;
    for p in parts {
        if p.ndim() != first.ndim() || &p.shape()[1..] != tail {
            return Err(shape_err("concat", "1..", format!("{tail:?}"), format!("{:?}", &p.shape()[1..])));
        }
        channels += p.shape()[0];
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(tail);
    Ok(Tensor::from_op(
        shape,
        data,
        Box::new(ConcatFn {
            parts: parts.iter().map(|&p| p.clone()).collect(),
        }),
    ))
}

struct NarrowFn {
    input: Tensor,
    offset: usize,
}

impl GradFn for NarrowFn {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.input.numel()];
        g[self.offset..self.offset + grad.len()].copy_from_slice(grad);
        vec![Some(g)]
    }
}

struct ReshapeFn {
    input: Tensor,
}

impl GradFn for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

/// y[i] = x[i+1] - x[i] along `axis`, zero in the last slice.
struct DiffFn {
    input: Tensor,
    axis: usize,
}

fn strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl GradFn for DiffFn {
    fn name(&self) -> &'static str {
        "forward_diff"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (outer, n, inner) = strides(self.input.shape(), self.axis);
        let mut g = vec![0.0; grad.len()];
        for o in 0..outer {
            for i in 0..n.saturating_sub(1) {
                let base = (o * n + i) * inner;
                for k in 0..inner {
                    let gv = grad[base + k];
                    g[base + k] -= gv;
                    g[base + inner + k] += gv;
                }
            }
        }
        vec![Some(g)]
    }
}

/// Forward difference along `axis`; the last slice along that axis is zero.
pub fn forward_diff(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(MorphError::InvalidArgument("forward_diff", format!("axis {axis} out of range")));
    }
    let (outer, n, inner) = strides(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..n.saturating_sub(1) {
            let base = (o * n + i) * inner;
            for k in 0..inner {
                out[base + k] = d[base + inner + k] - d[base + k];
            }
        }
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        Box::new(DiffFn {
            input: x.clone(),
            axis,
        }),
    ))
}

impl Tensor {
    /// Channels `start..start+len` along axis 0.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = *self.shape().first().ok_or(MorphError::Empty("narrow"))?;
        if start + len > c {
            return Err(shape_err("narrow", 0, format!("<= {c}"), start + len));
        }
        let plane = self.numel() / c.max(1);
        let offset = start * plane;
        let data = self.data()[offset..offset + len * plane].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        Ok(Tensor::from_op(
            shape,
            data,
            Box::new(NarrowFn {
                input: self.clone(),
                offset,
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(shape_err("reshape", "numel", self.numel(), n));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Box::new(ReshapeFn { input: self.clone() }),
        ))
    }
}
