use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{MathError, ParamSet, Scalar, Tape, Tensor, Var};
use crate::sim::{ACT_DIM, OBS_DIM};

use super::features::{normalize_action, normalize_obs};
use super::layers::{check_dim, Linear};
use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnSpec {
    /// Number of past `(observation, previous action)` entries consumed.
    pub history: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub output_dim: usize,
}

impl Default for TcnSpec {
    fn default() -> Self {
        Self {
            history: 50,
            obs_dim: OBS_DIM,
            act_dim: ACT_DIM,
            channels: 64,
            kernel: 5,
            dilations: vec![1, 3, 9],
            output_dim: 12,
        }
    }
}

impl TcnSpec {
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.act_dim
    }

    /// Number of past entries that can influence the newest output.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().map(|d| (self.kernel - 1) * d).sum::<usize>()
    }
}

/// Fixed-length histories, oldest entry first; missing entries are zero rows
/// in normalized input space.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryBatch {
    pub batch: usize,
    pub history: usize,
    pub width: usize,
    /// Normalized entries `[batch, history, width]`.
    pub data: Vec<f32>,
}

impl HistoryBatch {
    pub fn new(history: usize, obs_dim: usize, act_dim: usize) -> Self {
        Self {
            batch: 0,
            history,
            width: obs_dim + act_dim,
            data: Vec::new(),
        }
    }

    /// Appends one history of exactly `history` entries.
    pub fn push<'a>(&mut self, entries: impl IntoIterator<Item = Option<(&'a [f32], &'a [f32])>>) {
        let start = self.data.len();
        for e in entries {
            match e {
                Some((o, a)) => {
                    normalize_obs(o, &mut self.data);
                    normalize_action(a, &mut self.data);
                }
                None => self.data.resize(self.data.len() + self.width, 0.0),
            }
        }
        assert_eq!(self.data.len() - start, self.history * self.width, "history length");
        self.batch += 1;
    }
}

/// Causal dilated 1-D convolutions over the history followed by a linear head
/// on the newest time step.
#[derive(Clone, Debug, PartialEq)]
pub struct TcnModel {
    pub spec: TcnSpec,
    convs: Vec<Linear>,
    head: Linear,
}

pub struct TcnOutput {
    pub output: Var,
    pub last_hidden: Var,
}

impl TcnModel {
    pub fn init(spec: TcnSpec, params: &mut ParamSet<f32>, rng: &mut impl Rng) -> Result<Self, ModelError> {
        if spec.kernel == 0 || spec.dilations.is_empty() || spec.history == 0 {
            return Err(ModelError::InvalidSpec("tcn needs a kernel, dilations and history".into()));
        }
        let mut input = spec.input_dim();
        let mut convs = Vec::new();
        for i in 0..spec.dilations.len() {
            convs.push(Linear::init(params, &format!("tcn.conv{i}"), input * spec.kernel, spec.channels, 1.0, rng)?);
            input = spec.channels;
        }
        let head = Linear::init(params, "tcn.head", spec.channels, spec.output_dim, 0.5, rng)?;
        Ok(Self { spec, convs, head })
    }

    pub fn bind<F: Scalar>(spec: TcnSpec, params: &ParamSet<F>) -> Result<Self, ModelError> {
        let convs: Vec<Linear> = (0..spec.dilations.len())
            .map(|i| Linear::bind(params, &format!("tcn.conv{i}")))
            .collect::<Result<_, _>>()?;
        let head = Linear::bind(params, "tcn.head")?;
        check_dim("tcn input", spec.input_dim() * spec.kernel, convs[0].input)?;
        check_dim("tcn output", spec.output_dim, head.output)?;
        Ok(Self { spec, convs, head })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamSet<F>, input: &HistoryBatch) -> Result<TcnOutput, ModelError> {
        check_dim("history length", self.spec.history, input.history)?;
        check_dim("history width", self.spec.input_dim(), input.width)?;
        let (b, hl) = (input.batch, input.history);
        let data = input.data.iter().map(|&v| F::of(v as f64)).collect();
        let mut x = tape.constant(Tensor::new(&[b * hl, input.width], data)?)?;
        let mut width = input.width;
        for (conv, &dil) in self.convs.iter().zip(&self.spec.dilations) {
            x = self.conv(tape, params, conv, x, b, hl, width, dil)?;
            width = self.spec.channels;
        }
        let last: Vec<Option<u32>> = (0..b).map(|bi| Some((bi * hl + hl - 1) as u32)).collect();
        let last_hidden = tape.gather_rows(x, width, Arc::new(last))?;
        let output = self.head.forward(tape, params, last_hidden)?;
        Ok(TcnOutput { output, last_hidden })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
        conv: &Linear,
        x: Var,
        b: usize,
        hl: usize,
        width: usize,
        dilation: usize,
    ) -> Result<Var, MathError> {
        let k = self.spec.kernel;
        // Tap j of output t reads input t - (k-1-j)*dilation; before the start it reads zeros.
        let mut idx = Vec::with_capacity(b * hl * k);
        for bi in 0..b {
            for t in 0..hl {
                for j in 0..k {
                    let back = (k - 1 - j) * dilation;
                    idx.push((t >= back).then(|| (bi * hl + t - back) as u32));
                }
            }
        }
        let cols = tape.gather_rows(x, width, Arc::new(idx))?;
        let cols = tape.reshape(cols, &[b * hl, k * width])?;
        let y = conv.forward(tape, params, cols)?;
        tape.elu(y)
    }

    /// Eval-mode outputs for each history in the batch.
    pub fn predict(&self, params: &ParamSet<f32>, input: &HistoryBatch) -> Result<Vec<Vec<f32>>, ModelError> {
        let mut tape = Tape::eval();
        let out = self.forward(&mut tape, params, input)?;
        Ok(tape
            .value(out.output)
            .data()
            .chunks(self.spec.output_dim)
            .map(|c| c.to_vec())
            .collect())
    }
}
