use super::params::{Gradients, ParamSet};
use super::tensor::{Scalar, Tensor};
use super::MathError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>, config: AdamConfig) -> Self {
        Self {
            first: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            second: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &Gradients<f32>, lr: f64) -> Result<(), MathError> {
        if !(lr > 0.0) {
            return Err(MathError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(MathError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        let ids: Vec<_> = params.iter().map(|(id, _, t)| (id, t.numel())).collect();
        for &(id, n) in &ids {
            let g = grads.get(id);
            if g.len() != n || self.first[id.0].len() != n {
                return Err(MathError::ShapeMismatch {
                    op: "adam_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
        for (id, _) in ids {
            let g = grads.get(id);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = params.get(id);
            let mut data = p.to_vec();
            for k in 0..data.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let denom = v[k].sqrt() / bc2_sqrt + eps;
                data[k] -= step_size * m[k] / denom;
            }
            let shape = p.shape().to_vec();
            params.set(id, Tensor::new(&shape, data)?)?;
        }
        Ok(())
    }
}

impl<F: Scalar> ParamSet<F> {
    /// Sum of squared differences to another parameter set with the same layout.
    pub fn squared_distance(&self, other: &ParamSet<F>) -> F {
        self.iter()
            .zip(other.iter())
            .flat_map(|((_, _, a), (_, _, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .collect::<Vec<_>>()
            })
            .sum()
    }
}
