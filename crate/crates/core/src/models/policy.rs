use std::collections::VecDeque;

use crate::math::{ParamSet, Tape, Tensor};
use crate::sim::{Observation, PrivilegedInfo, ACT_DIM, OBS_DIM};

use super::checkpoint::{CheckpointError, ModelKind, PolicyCheckpoint};
use super::tcn::{HistoryBatch, TcnModel};
use super::teacher::TeacherModel;
use super::transformer::{TransformerModel, WindowBatch};
use super::ModelError;

/// Per-episode history kept by sequence policies. Holds observations and the
/// actions that were executed after them, newest last.
#[derive(Clone, Debug, Default)]
pub struct Memory {
    obs: VecDeque<[f32; OBS_DIM]>,
    actions: VecDeque<[f32; ACT_DIM]>,
    capacity: usize,
}

impl Memory {
    pub fn new(capacity: usize) -> Self {
        Self {
            obs: VecDeque::with_capacity(capacity + 1),
            actions: VecDeque::with_capacity(capacity + 1),
            capacity: capacity.max(1),
        }
    }

    pub fn reset(&mut self) {
        self.obs.clear();
        self.actions.clear();
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn push_obs(&mut self, o: &Observation) {
        if self.obs.len() == self.capacity {
            self.obs.pop_front();
            self.actions.pop_front();
        }
        self.obs.push_back(o.0);
    }

    fn push_action(&mut self, a: [f32; ACT_DIM]) {
        debug_assert_eq!(self.actions.len() + 1, self.obs.len());
        self.actions.push_back(a);
    }

    /// Appends the last `len` steps as a Transformer window; the pending
    /// action of the newest step is a zero placeholder.
    pub fn push_window(&self, len: usize, batch: &mut WindowBatch) {
        const PENDING: [f32; ACT_DIM] = [0.0; ACT_DIM];
        let n = self.obs.len();
        let start = n.saturating_sub(len);
        batch.push((start..n).map(|i| (&self.obs[i][..], self.actions.get(i).map_or(&PENDING[..], |a| &a[..]))));
    }

    /// Appends a TCN history of `(o_j, a_{j-1})` entries, zero-padded at the front.
    pub fn push_history(&self, history: usize, batch: &mut HistoryBatch) {
        const NONE: [f32; ACT_DIM] = [0.0; ACT_DIM];
        let n = self.obs.len();
        let pad = history.saturating_sub(n);
        let start = n.saturating_sub(history);
        let entries = (0..pad).map(|_| None).chain((start..n).map(|j| {
            let prev = if j == 0 { &NONE[..] } else { &self.actions[j - 1][..] };
            Some((&self.obs[j][..], prev))
        }));
        batch.push(entries);
    }
}

/// Actions chosen for a batch plus the policy's last hidden layer activations.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub actions: Vec<[f32; ACT_DIM]>,
    pub hidden: Vec<Vec<f32>>,
}

/// Deterministic (eval-mode, mean-action) runner for any checkpoint kind.
#[derive(Clone, Debug)]
pub struct Policy {
    pub kind: ModelKind,
    pub params: ParamSet<f32>,
    teacher: Option<TeacherModel>,
    transformer: Option<TransformerModel>,
    tcn: Option<TcnModel>,
}

impl Policy {
    pub fn from_checkpoint(ckpt: &PolicyCheckpoint) -> Result<Self, CheckpointError> {
        let p = &ckpt.params;
        let teacher = match (&ckpt.spec.teacher, ckpt.kind) {
            (Some(s), ModelKind::Teacher | ModelKind::LatentTransformer | ModelKind::TcnStudent) => {
                Some(TeacherModel::bind(s.clone(), p)?)
            }
            _ => None,
        };
        let transformer = match (&ckpt.spec.transformer, ckpt.kind) {
            (Some(s), ModelKind::Transformer | ModelKind::LatentTransformer) => Some(TransformerModel::bind(s.clone(), p)?),
            _ => None,
        };
        let tcn = match (&ckpt.spec.tcn, ckpt.kind) {
            (Some(s), ModelKind::TcnStudent | ModelKind::TcnActor) => Some(TcnModel::bind(s.clone(), p)?),
            _ => None,
        };
        let policy = Self {
            kind: ckpt.kind,
            params: ckpt.params.clone(),
            teacher,
            transformer,
            tcn,
        };
        match ckpt.kind {
            ModelKind::LatentTransformer => {
                let (t, tr) = (policy.teacher.as_ref().unwrap(), policy.transformer.as_ref().unwrap());
                ModelError::check(t.spec.latent_dim, tr.spec.output_dim, "transformer latent output")?;
            }
            ModelKind::TcnStudent => {
                let (t, c) = (policy.teacher.as_ref().unwrap(), policy.tcn.as_ref().unwrap());
                ModelError::check(t.spec.latent_dim, c.spec.output_dim, "tcn latent output")?;
            }
            ModelKind::Transformer => {
                let tr = policy.transformer.as_ref().unwrap();
                ModelError::check(ACT_DIM, tr.spec.output_dim, "transformer action output")?;
            }
            ModelKind::TcnActor => {
                let c = policy.tcn.as_ref().unwrap();
                ModelError::check(ACT_DIM, c.spec.output_dim, "tcn action output")?;
            }
            ModelKind::Teacher => {}
        }
        Ok(policy)
    }

    /// Only the teacher reads privileged information.
    pub fn needs_privileged(&self) -> bool {
        self.kind == ModelKind::Teacher
    }

    pub fn teacher(&self) -> Option<&TeacherModel> {
        self.teacher.as_ref()
    }

    pub fn transformer(&self) -> Option<&TransformerModel> {
        self.transformer.as_ref()
    }

    pub fn tcn(&self) -> Option<&TcnModel> {
        self.tcn.as_ref()
    }

    pub fn new_memory(&self) -> Memory {
        let t = self.transformer.as_ref().map_or(1, |m| m.spec.context_length);
        let h = self.tcn.as_ref().map_or(1, |m| m.spec.history);
        Memory::new(t.max(h))
    }

    /// Records `obs` in each memory, picks actions and records them as executed.
    /// `privileged` is only consulted by the teacher.
    pub fn act(
        &self,
        memories: &mut [Memory],
        obs: &[Observation],
        privileged: Option<&[PrivilegedInfo]>,
    ) -> Result<PolicyStep, ModelError> {
        ModelError::check(obs.len(), memories.len(), "memory batch")?;
        for (m, o) in memories.iter_mut().zip(obs) {
            m.push_obs(o);
        }
        let step = self.compute(memories, obs, privileged)?;
        for (m, a) in memories.iter_mut().zip(&step.actions) {
            m.push_action(*a);
        }
        Ok(step)
    }

    fn compute(&self, memories: &[Memory], obs: &[Observation], privileged: Option<&[PrivilegedInfo]>) -> Result<PolicyStep, ModelError> {
        let params = &self.params;
        match self.kind {
            ModelKind::Teacher => {
                let t = self.teacher.as_ref().unwrap();
                let e = privileged.ok_or(ModelError::NeedsPrivileged("teacher"))?;
                ModelError::check(obs.len(), e.len(), "privileged batch")?;
                let o: Vec<&[f32]> = obs.iter().map(|o| o.as_slice()).collect();
                let e: Vec<&[f32]> = e.iter().map(|e| e.as_slice()).collect();
                let mut tape = Tape::eval();
                let ov = tape.constant(t.obs_tensor(&o)?)?;
                let ev = tape.constant(t.privileged_tensor(&e)?)?;
                let l = t.encode(&mut tape, params, ev)?;
                let out = t.policy(&mut tape, params, ov, l)?;
                Ok(PolicyStep {
                    actions: t.distribution(&tape, &out).mean,
                    hidden: rows(tape.value(out.last_hidden)),
                })
            }
            ModelKind::Transformer | ModelKind::LatentTransformer => {
                let tr = self.transformer.as_ref().unwrap();
                let len = memories.iter().map(|m| m.len().min(tr.spec.context_length)).max().unwrap_or(1);
                let mut batch = WindowBatch::new(len, tr.spec.obs_dim, tr.spec.act_dim);
                for m in memories {
                    m.push_window(len, &mut batch);
                }
                let mut tape = Tape::eval();
                let out = tr.forward(&mut tape, params, &batch, false)?;
                let pred = tape.value(out.predictions);
                let hid = tape.value(out.hidden);
                let last: Vec<usize> = batch.valid.iter().enumerate().map(|(b, &v)| b * len + v - 1).collect();
                let hidden: Vec<Vec<f32>> = last.iter().map(|&r| hid.row(r).to_vec()).collect();
                if self.kind == ModelKind::Transformer {
                    let actions = last.iter().map(|&r| to_action(pred.row(r))).collect();
                    return Ok(PolicyStep { actions, hidden });
                }
                let latents: Vec<f32> = last.iter().flat_map(|&r| pred.row(r).iter().copied()).collect();
                let step = self.teacher_body(obs, latents)?;
                Ok(PolicyStep {
                    actions: step.actions,
                    hidden,
                })
            }
            ModelKind::TcnStudent | ModelKind::TcnActor => {
                let c = self.tcn.as_ref().unwrap();
                let mut batch = HistoryBatch::new(c.spec.history, c.spec.obs_dim, c.spec.act_dim);
                for m in memories {
                    m.push_history(c.spec.history, &mut batch);
                }
                let mut tape = Tape::eval();
                let out = c.forward(&mut tape, params, &batch)?;
                let pred = tape.value(out.output);
                if self.kind == ModelKind::TcnActor {
                    return Ok(PolicyStep {
                        actions: (0..obs.len()).map(|r| to_action(pred.row(r))).collect(),
                        hidden: rows(tape.value(out.last_hidden)),
                    });
                }
                self.teacher_body(obs, pred.to_vec())
            }
        }
    }

    /// Frozen teacher policy applied to observations and estimated latents.
    fn teacher_body(&self, obs: &[Observation], latents: Vec<f32>) -> Result<PolicyStep, ModelError> {
        let t = self.teacher.as_ref().unwrap();
        let o: Vec<&[f32]> = obs.iter().map(|o| o.as_slice()).collect();
        let mut tape = Tape::eval();
        let ov = tape.constant(t.obs_tensor(&o)?)?;
        let lv = tape.constant(Tensor::new(&[obs.len(), t.spec.latent_dim], latents)?)?;
        let out = t.policy(&mut tape, &self.params, ov, lv)?;
        Ok(PolicyStep {
            actions: t.distribution(&tape, &out).mean,
            hidden: rows(tape.value(out.last_hidden)),
        })
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    t.data().chunks(t.cols()).map(|c| c.to_vec()).collect()
}

fn to_action(row: &[f32]) -> [f32; ACT_DIM] {
    std::array::from_fn(|i| row[i])
}
