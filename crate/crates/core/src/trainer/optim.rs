//! Adam with decoupled weight decay and a triangular cyclic learning rate.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{MorphError, Result};
use crate::morphnet::Module;

const M_PREFIX: &str = "adam.m:";
const V_PREFIX: &str = "adam.v:";

/// Moment accumulators for every trainable parameter, in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((&self.m[i], &self.v[i]))
    }

    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        for i in 0..self.names.len() {
            let n = self.m[i].len();
            ck.push(&format!("{M_PREFIX}{}", self.names[i]), &[n], &self.m[i])?;
            ck.push(&format!("{V_PREFIX}{}", self.names[i]), &[n], &self.v[i])?;
        }
        Ok(())
    }

    /// Rebuilds moments saved by [`OptimState::save_into`]; `step` is taken
    /// from the checkpoint manifest.
    pub fn load_from(ck: &Checkpoint, weight_decay: f64) -> Result<Self> {
        let mut s = Self::new(weight_decay);
        s.step = ck.manifest.step;
        for name in ck.names() {
            if let Some(param) = name.strip_prefix(M_PREFIX) {
                let (_, m) = ck.get(name).expect("listed name");
                let (_, v) = ck
                    .get(&format!("{V_PREFIX}{param}"))
                    .ok_or_else(|| MorphError::Checkpoint(format!("second moment of {param} missing")))?;
                s.names.push(param.to_string());
                s.m.push(m.to_vec());
                s.v.push(v.to_vec());
            }
        }
        Ok(s)
    }
}

/// One bias-corrected Adam update of all trainable parameters of `modules`,
/// followed by decoupled decay `p -= lr * wd * p`. Missing gradients count as
/// zero. Any non-finite gradient aborts before a parameter is touched.
pub fn adam_step(modules: &mut [&mut dyn Module], state: &mut OptimState, lr: f64) -> Result<()> {
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    let mut bad: Option<String> = None;
    for m in modules.iter() {
        m.visit(&mut |p| {
            if !p.trainable() {
                return;
            }
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.data().len()]);
            if bad.is_none() {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    bad = Some(format!("gradient of {}[{i}] is {}", p.name(), g[i]));
                }
            }
            grads.push((p.name().to_string(), g));
        });
    }
    if let Some(msg) = bad {
        return Err(MorphError::Divergence(msg));
    }
    if state.names.is_empty() {
        state.names = grads.iter().map(|(n, _)| n.clone()).collect();
        state.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    } else if state.names.len() != grads.len() || state.names.iter().zip(&grads).any(|(a, (b, _))| a != b) {
        return Err(MorphError::Checkpoint("optimizer state does not match the trainable parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    let mut k = 0;
    let mut result = Ok(());
    for module in modules.iter_mut() {
        module.visit_mut(&mut |p| {
            if !p.trainable() || result.is_err() {
                return;
            }
            let g = &grads[k].1;
            let (m, v) = (&mut state.m[k], &mut state.v[k]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
                data[i] -= lr * wd * data[i];
            }
            k += 1;
            result = p.set_data(data);
        });
    }
    result
}

/// Triangular learning-rate wave repeating every epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicLrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub steps_per_epoch: usize,
}

impl CyclicLrSchedule {
    pub fn at(&self, global_step: u64) -> f64 {
        let len = self.steps_per_epoch.max(1);
        cyclic_lr((global_step % len as u64) as usize, len, self)
    }
}

/// `lr_min` at step 0, `lr_max` at `epoch_len / 2`, linear in between and
/// back down towards `lr_min` at the end of the epoch.
pub fn cyclic_lr(step: usize, epoch_len: usize, sched: &CyclicLrSchedule) -> f64 {
    let half = epoch_len / 2;
    if half == 0 {
        return sched.lr_min;
    }
    let span = sched.lr_max - sched.lr_min;
    let step = step.min(epoch_len - 1);
    if step <= half {
        sched.lr_min + span * step as f64 / half as f64
    } else {
        sched.lr_max - span * (step - half) as f64 / (epoch_len - half) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameter;

    struct One(Parameter);

    impl Module for One {
        fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
            f(&mut self.0)
        }
    }

    fn set_grad(p: &One, g: f64) {
        p.0.zero_grad();
        p.0.raw().mul_scalar(&crate::tensor::Tensor::scalar(g)).unwrap().sum().backward().unwrap();
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = One(Parameter::new("p", &[1], vec![0.7]).unwrap());
        set_grad(&p, 1.0);
        let mut s = OptimState::new(0.0);
        adam_step(&mut [&mut p], &mut s, 1e-3).unwrap();
        let delta = p.0.data()[0] - 0.7;
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((delta - expected).abs() < 1e-15, "{delta}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn constant_gradient_keeps_unit_steps() {
        // With a constant gradient the bias-corrected ratio stays exactly 1.
        let mut p = One(Parameter::new("p", &[1], vec![0.0]).unwrap());
        let mut s = OptimState::new(0.0);
        for _ in 0..5 {
            set_grad(&p, -2.5);
            adam_step(&mut [&mut p], &mut s, 0.01).unwrap();
        }
        assert!((p.0.data()[0] - 0.05).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op_without_decay() {
        let mut p = One(Parameter::new("p", &[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut s = OptimState::new(0.0);
        adam_step(&mut [&mut p], &mut s, 0.1).unwrap();
        assert_eq!(p.0.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let mut p = One(Parameter::new("p", &[2], vec![1.0, -4.0]).unwrap());
        let mut s = OptimState::new(0.01);
        for _ in 0..3 {
            adam_step(&mut [&mut p], &mut s, 0.5).unwrap();
        }
        let f = (1.0f64 - 0.5 * 0.01).powi(3);
        assert_eq!(p.0.data(), &[f, -4.0 * f]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = One(Parameter::new("p", &[1], vec![1.0]).unwrap());
        set_grad(&p, f64::NAN);
        let mut s = OptimState::new(0.0);
        let err = adam_step(&mut [&mut p], &mut s, 0.1).unwrap_err();
        assert!(matches!(err, MorphError::Divergence(_)));
        assert_eq!(p.0.data(), &[1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut p = One(Parameter::new("p", &[1], vec![1.0]).unwrap());
        p.0.set_trainable(false);
        let mut s = OptimState::new(0.5);
        adam_step(&mut [&mut p], &mut s, 0.1).unwrap();
        assert_eq!(p.0.data(), &[1.0]);
        assert!(s.names().is_empty());
    }

    #[test]
    fn cyclic_lr_shape() {
        let s = CyclicLrSchedule {
            lr_min: 1e-6,
            lr_max: 1e-4,
            steps_per_epoch: 200,
        };
        assert_eq!(cyclic_lr(0, 200, &s), 1e-6);
        assert_eq!(cyclic_lr(100, 200, &s), 1e-4);
        let inc = (1e-4 - 1e-6) / 100.0;
        let end = cyclic_lr(199, 200, &s);
        assert!(end >= 1e-6 && end - 1e-6 <= inc * (1.0 + 1e-12));
        assert_eq!(s.at(200), 1e-6);
        for k in 1..200 {
            let (a, b) = (cyclic_lr(k - 1, 200, &s), cyclic_lr(k, 200, &s));
            assert!(if k <= 100 { b > a } else { b < a });
        }
        let odd = cyclic_lr(7 / 2, 7, &s);
        assert_eq!(odd, 1e-4);
        assert_eq!(cyclic_lr(0, 1, &s), 1e-6);
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let mut p = One(Parameter::new("p", &[2], vec![1.0, 2.0]).unwrap());
        let mut s = OptimState::new(1e-3);
        set_grad(&p, 0.3);
        adam_step(&mut [&mut p], &mut s, 0.1).unwrap();
        let mut ck = Checkpoint::new(crate::checkpoint::CheckpointKind::Ssl, &crate::config::RunConfig::default());
        ck.manifest.step = s.step;
        s.save_into(&mut ck).unwrap();
        assert_eq!(OptimState::load_from(&ck, 1e-3).unwrap(), s);
    }
}
