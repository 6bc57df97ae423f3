use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{OptimizerSnapshot, ParamRegistry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bias-corrected ADAM with per-parameter first and second moments.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that holds a gradient.
    pub fn step(&mut self, reg: &mut ParamRegistry<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::one() - T::lit(self.beta1.powi(t));
        let bc2 = T::one() - T::lit(self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (name, p) in reg.iter_mut() {
            if p.kind.is_buffer() {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            if m.len() != n {
                return Err(Error::invalid(format!(
                    "adam: moment for `{name}` has {} elements, parameter has {n}",
                    m.len()
                )));
            }
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as `adam.m.<name>` / `adam.v.<name>` tensors for a checkpoint trailer.
    pub fn snapshot(&self, reg: &ParamRegistry<T>) -> OptimizerSnapshot<T> {
        let mut tensors = Vec::new();
        for (name, (m, v)) in &self.moments {
            let shape = reg
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_else(|| vec![m.len()]);
            tensors.push((
                format!("adam.m.{name}"),
                Tensor::new(&shape, m.clone()).expect("shape"),
            ));
            tensors.push((
                format!("adam.v.{name}"),
                Tensor::new(&shape, v.clone()).expect("shape"),
            ));
        }
        OptimizerSnapshot {
            tensors,
            step: self.step,
        }
    }

    pub fn from_snapshot(
        lr: f64,
        snap: &OptimizerSnapshot<T>,
        reg: &ParamRegistry<T>,
    ) -> Result<Self> {
        let mut state = Self::new(lr);
        state.step = snap.step;
        let mut firsts = IndexMap::new();
        let mut seconds = IndexMap::new();
        for (key, t) in &snap.tensors {
            if let Some(name) = key.strip_prefix("adam.m.") {
                firsts.insert(name.to_string(), t);
            } else if let Some(name) = key.strip_prefix("adam.v.") {
                seconds.insert(name.to_string(), t);
            } else {
                return Err(Error::invalid(format!(
                    "unexpected optimizer tensor `{key}`"
                )));
            }
        }
        for (name, m) in firsts {
            let v = seconds.get(&name).ok_or_else(|| Error::ParamMismatch {
                name: name.clone(),
                msg: "first moment without second moment".into(),
            })?;
            match reg.get(&name) {
                Some(p) if p.shape() == m.shape() && p.shape() == v.shape() => {}
                _ => {
                    return Err(Error::ParamMismatch {
                        name,
                        msg: "optimizer moment does not match any parameter".into(),
                    })
                }
            }
            state
                .moments
                .insert(name, (m.data().to_vec(), v.data().to_vec()));
        }
        Ok(state)
    }
}
