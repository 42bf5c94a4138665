use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{MathError, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::sim::{Observation, PrivilegedInfo, ACT_DIM, OBS_DIM, PRIV_DIM};

use super::features::{normalize_obs, normalize_privileged};
use super::layers::{check_dim, lookup, Mlp};
use super::{LatentVector, ModelError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    pub obs_dim: usize,
    pub priv_dim: usize,
    pub latent_dim: usize,
    pub act_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            obs_dim: OBS_DIM,
            priv_dim: PRIV_DIM,
            latent_dim: 12,
            act_dim: ACT_DIM,
            encoder_hidden: vec![256, 256, 256],
            policy_hidden: vec![512, 256, 128],
            value_hidden: vec![512, 256, 128],
            init_log_std: -2.0,
        }
    }
}

/// Privileged encoder, Gaussian policy on `(o, l)` and a value head on `(o, l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub spec: TeacherSpec,
    pub encoder: Mlp,
    pub policy: Mlp,
    pub value: Mlp,
    pub log_std: ParamId,
}

pub struct PolicyOutput {
    pub mean: Var,
    pub log_std: Var,
    pub last_hidden: Var,
}

/// Diagonal Gaussian with a state-independent standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec<[f32; ACT_DIM]>,
    pub log_std: [f32; ACT_DIM],
}

impl TeacherModel {
    pub fn init(spec: TeacherSpec, params: &mut ParamSet<f32>, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let encoder = Mlp::init(params, "encoder", spec.priv_dim, &spec.encoder_hidden, spec.latent_dim, 1.0, rng)?;
        let input = spec.obs_dim + spec.latent_dim;
        let policy = Mlp::init(params, "policy", input, &spec.policy_hidden, spec.act_dim, 0.01, rng)?;
        let value = Mlp::init(params, "value", input, &spec.value_hidden, 1, 1.0, rng)?;
        let log_std = params.add("log_std", Tensor::full(&[spec.act_dim], spec.init_log_std as f32))?;
        Ok(Self {
            spec,
            encoder,
            policy,
            value,
            log_std,
        })
    }

    pub fn bind<F: Scalar>(spec: TeacherSpec, params: &ParamSet<F>) -> Result<Self, ModelError> {
        let encoder = Mlp::bind(params, "encoder", spec.encoder_hidden.len() + 1)?;
        let policy = Mlp::bind(params, "policy", spec.policy_hidden.len() + 1)?;
        let value = Mlp::bind(params, "value", spec.value_hidden.len() + 1)?;
        let log_std = lookup(params, "log_std")?;
        check_dim("encoder input", spec.priv_dim, encoder.input_dim())?;
        check_dim("latent", spec.latent_dim, encoder.output_dim())?;
        check_dim("policy input", spec.obs_dim + spec.latent_dim, policy.input_dim())?;
        check_dim("policy output", spec.act_dim, policy.output_dim())?;
        Ok(Self {
            spec,
            encoder,
            policy,
            value,
            log_std,
        })
    }

    /// Parameters of the policy body and log-std (not encoder, not value head).
    pub fn policy_param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.policy.layers.len())
            .flat_map(|i| [format!("policy.{i}.weight"), format!("policy.{i}.bias")])
            .collect();
        names.push("log_std".into());
        names
    }

    pub fn encode<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamSet<F>, privileged: Var) -> Result<Var, MathError> {
        Ok(self.encoder.forward(tape, params, privileged)?.output)
    }

    pub fn policy<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamSet<F>, obs: Var, latent: Var) -> Result<PolicyOutput, MathError> {
        let x = tape.concat_cols(obs, latent)?;
        let out = self.policy.forward(tape, params, x)?;
        Ok(PolicyOutput {
            mean: out.output,
            log_std: tape.param(params, self.log_std)?,
            last_hidden: out.last_hidden,
        })
    }

    pub fn value<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamSet<F>, obs: Var, latent: Var) -> Result<Var, MathError> {
        let x = tape.concat_cols(obs, latent)?;
        Ok(self.value.forward(tape, params, x)?.output)
    }

    pub fn obs_tensor<F: Scalar>(&self, obs: &[&[f32]]) -> Result<Tensor<F>, ModelError> {
        let mut data = Vec::with_capacity(obs.len() * OBS_DIM);
        for o in obs {
            check_dim("observation", self.spec.obs_dim, o.len())?;
            normalize_obs(o, &mut data);
        }
        Ok(Tensor::new(&[obs.len(), OBS_DIM], data.into_iter().map(|v| F::of(v as f64)).collect())?)
    }

    pub fn privileged_tensor<F: Scalar>(&self, privileged: &[&[f32]]) -> Result<Tensor<F>, ModelError> {
        let mut data = Vec::with_capacity(privileged.len() * PRIV_DIM);
        for e in privileged {
            check_dim("privileged info", self.spec.priv_dim, e.len())?;
            normalize_privileged(e, &mut data);
        }
        Ok(Tensor::new(&[privileged.len(), PRIV_DIM], data.into_iter().map(|v| F::of(v as f64)).collect())?)
    }

    /// `l = mu(e)` for a batch of privileged vectors.
    pub fn encoder_forward(&self, params: &ParamSet<f32>, privileged: &[&[f32]]) -> Result<Vec<LatentVector>, ModelError> {
        let mut tape = Tape::eval();
        let e = tape.constant(self.privileged_tensor(privileged)?)?;
        let l = self.encode(&mut tape, params, e)?;
        Ok(tape.value(l).data().chunks(self.spec.latent_dim).map(|c| LatentVector(c.to_vec())).collect())
    }

    /// Action distribution for observations paired with given latents.
    pub fn teacher_forward(&self, params: &ParamSet<f32>, obs: &[&[f32]], latents: &[LatentVector]) -> Result<ActionDistribution, ModelError> {
        check_dim("latent batch", obs.len(), latents.len())?;
        let mut ldata = Vec::with_capacity(latents.len() * self.spec.latent_dim);
        for l in latents {
            check_dim("latent", self.spec.latent_dim, l.0.len())?;
            ldata.extend_from_slice(&l.0);
        }
        let mut tape = Tape::eval();
        let o = tape.constant(self.obs_tensor(obs)?)?;
        let l = tape.constant(Tensor::new(&[latents.len(), self.spec.latent_dim], ldata)?)?;
        let out = self.policy(&mut tape, params, o, l)?;
        Ok(self.distribution(&tape, &out))
    }

    pub fn distribution(&self, tape: &Tape<f32>, out: &PolicyOutput) -> ActionDistribution {
        let mean = tape
            .value(out.mean)
            .data()
            .chunks(ACT_DIM)
            .map(|c| std::array::from_fn(|i| c[i]))
            .collect();
        let ls = tape.value(out.log_std).data();
        ActionDistribution {
            mean,
            log_std: std::array::from_fn(|i| ls[i]),
        }
    }

    /// Deterministic (mean) actions straight from observations and privileged info.
    pub fn act(&self, params: &ParamSet<f32>, obs: &[Observation], privileged: &[PrivilegedInfo]) -> Result<Vec<[f32; ACT_DIM]>, ModelError> {
        let mut tape = Tape::eval();
        let o: Vec<&[f32]> = obs.iter().map(|o| o.as_slice()).collect();
        let e: Vec<&[f32]> = privileged.iter().map(|e| e.as_slice()).collect();
        let ov = tape.constant(self.obs_tensor(&o)?)?;
        let ev = tape.constant(self.privileged_tensor(&e)?)?;
        let l = self.encode(&mut tape, params, ev)?;
        let out = self.policy(&mut tape, params, ov, l)?;
        Ok(self.distribution(&tape, &out).mean)
    }
}
