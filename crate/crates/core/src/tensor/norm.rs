use super::{pairwise_sum, GradFn, Tensor};
use crate::error::{MorphError, Result};
use crate::par;

struct LayerNormFn {
    input: Tensor,
    inv_std: f64,
}

impl GradFn for LayerNormFn {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = grad.len() as f64;
        let y = out.data();
        let mean_g = pairwise_sum(grad) / n;
        let gy: Vec<f64> = grad.iter().zip(y).map(|(g, y)| g * y).collect();
        let mean_gy = pairwise_sum(&gy) / n;
        let s = self.inv_std;
        let gx = grad
            .iter()
            .zip(y)
            .map(|(g, y)| (g - mean_g - y * mean_gy) * s)
            .collect();
        vec![Some(gx)]
    }
}

/// Normalises over every element (channel and spatial axes) to zero mean and
/// unit variance. The learned affine is applied separately with
/// [`Tensor::channel_affine`].
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.numel() == 0 {
        return Err(MorphError::Empty("layer_norm"));
    }
    if eps <= 0.0 {
        return Err(MorphError::InvalidArgument("layer_norm", "eps must be positive".into()));
    }
    let d = x.data();
    let n = d.len() as f64;
    let mean = pairwise_sum(d) / n;
    let sq = par::map_slice(d, |v| (v - mean) * (v - mean));
    let var = pairwise_sum(&sq) / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let y = par::map_slice(d, |v| (v - mean) * inv_std);
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        y,
        Box::new(LayerNormFn {
            input: x.clone(),
            inv_std,
        }),
    ))
}
