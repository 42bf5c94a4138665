use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{MathError, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::sim::{ACT_DIM, OBS_DIM};

use super::features::{normalize_action, normalize_obs};
use super::layers::{check_dim, lookup, Linear};
use super::ModelError;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerSpec {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
    /// Maximum number of observation-action pairs in a window.
    pub context_length: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Width of the prediction head: `act_dim` for action students, the
    /// latent size when the Transformer regresses the teacher latent.
    pub output_dim: usize,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        Self {
            num_layers: 3,
            embed_dim: 256,
            num_heads: 4,
            dropout_rate: 0.05,
            context_length: 20,
            obs_dim: OBS_DIM,
            act_dim: ACT_DIM,
            output_dim: ACT_DIM,
        }
    }
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad("embed_dim must be divisible by num_heads");
        }
        if self.context_length == 0 {
            return bad("context_length must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.num_layers == 0 || self.obs_dim == 0 || self.act_dim == 0 || self.output_dim == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }
}

/// Windows of interleaved `(o_1, a_1, ..., o_L, a_L)` tokens, right-padded to
/// a common length. The action at the last valid step of a window never
/// influences any prediction, so it may be a placeholder.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub len: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Raw observations `[batch, len, obs_dim]`.
    pub obs: Vec<f32>,
    /// Raw actions `[batch, len, act_dim]`.
    pub actions: Vec<f32>,
    /// Number of valid steps per window.
    pub valid: Vec<usize>,
}

impl WindowBatch {
    pub fn new(len: usize, obs_dim: usize, act_dim: usize) -> Self {
        Self {
            batch: 0,
            len,
            obs_dim,
            act_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            valid: Vec::new(),
        }
    }

    /// Appends one window given as `(obs, action)` steps; pads up to `len`.
    pub fn push<'a>(&mut self, steps: impl IntoIterator<Item = (&'a [f32], &'a [f32])>) {
        let mut n = 0;
        for (o, a) in steps {
            assert!(n < self.len, "window longer than batch length");
            assert_eq!(o.len(), self.obs_dim, "observation width");
            assert_eq!(a.len(), self.act_dim, "action width");
            self.obs.extend_from_slice(o);
            self.actions.extend_from_slice(a);
            n += 1;
        }
        self.obs.resize(self.obs.len() + (self.len - n) * self.obs_dim, 0.0);
        self.actions.resize(self.actions.len() + (self.len - n) * self.act_dim, 0.0);
        self.valid.push(n);
        self.batch += 1;
    }

    /// Row weights (1 valid, 0 padding) over the `batch * len` prediction rows.
    pub fn mask<F: Scalar>(&self) -> Vec<F> {
        self.valid
            .iter()
            .flat_map(|&v| (0..self.len).map(move |i| if i < v { F::one() } else { F::zero() }))
            .collect()
    }
}

/// Softmax attention weights of each layer, `[batch, heads, tokens, tokens]`
/// with rows indexed by query and columns by key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub tokens: usize,
    pub heads: usize,
    pub layers: Vec<Tensor<f32>>,
}

impl AttentionTrace {
    pub fn row(&self, layer: usize, b: usize, head: usize, query: usize) -> &[f32] {
        let t = self.tokens;
        let start = ((b * self.heads + head) * t + query) * t;
        &self.layers[layer].data()[start..start + t]
    }
}

pub struct TransformerOutput {
    /// `[batch * len, output_dim]`, one row per observation token.
    pub predictions: Var,
    /// Final normalized hidden state at observation tokens, `[batch * len, embed_dim]`.
    pub hidden: Var,
    pub trace: Option<AttentionTrace>,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    qkv: Linear,
    proj: Linear,
    ln2: (ParamId, ParamId),
    fc1: Linear,
    fc2: Linear,
}

/// GPT-style causal Transformer over observation and action tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub spec: TransformerSpec,
    obs_embed: Linear,
    act_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: Linear,
}

fn layer_norm_params(params: &mut ParamSet<f32>, name: &str, dim: usize) -> Result<(ParamId, ParamId), ModelError> {
    Ok((
        params.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
        params.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
    ))
}

fn bind_layer_norm<F: Scalar>(params: &ParamSet<F>, name: &str) -> Result<(ParamId, ParamId), ModelError> {
    Ok((lookup(params, &format!("{name}.gain"))?, lookup(params, &format!("{name}.bias"))?))
}

fn apply_layer_norm<F: Scalar>(tape: &mut Tape<F>, params: &ParamSet<F>, ln: (ParamId, ParamId), x: Var) -> Result<Var, MathError> {
    let n = tape.layer_norm(x, LN_EPS)?;
    let g = tape.param(params, ln.0)?;
    let b = tape.param(params, ln.1)?;
    let y = tape.mul_row(n, g)?;
    tape.add_row(y, b)
}

impl TransformerModel {
    pub fn init(spec: TransformerSpec, params: &mut ParamSet<f32>, rng: &mut impl Rng) -> Result<Self, ModelError> {
        spec.validate()?;
        let d = spec.embed_dim;
        let obs_embed = Linear::init(params, "obs_embed", spec.obs_dim, d, 1.0, rng)?;
        let act_embed = Linear::init(params, "act_embed", spec.act_dim, d, 1.0, rng)?;
        let pos: Vec<f32> = (0..2 * spec.context_length * d)
            .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * 0.02)
            .collect();
        let pos_embed = params.add("pos_embed", Tensor::new(&[2 * spec.context_length, d], pos)?)?;
        let resid_gain = 1.0 / (2.0 * spec.num_layers as f64).sqrt();
        let blocks = (0..spec.num_layers)
            .map(|i| {
                let p = format!("blocks.{i}");
                Ok(Block {
                    ln1: layer_norm_params(params, &format!("{p}.ln1"), d)?,
                    qkv: Linear::init(params, &format!("{p}.qkv"), d, 3 * d, 1.0, rng)?,
                    proj: Linear::init(params, &format!("{p}.proj"), d, d, resid_gain, rng)?,
                    ln2: layer_norm_params(params, &format!("{p}.ln2"), d)?,
                    fc1: Linear::init(params, &format!("{p}.fc1"), d, 4 * d, 1.0, rng)?,
                    fc2: Linear::init(params, &format!("{p}.fc2"), 4 * d, d, resid_gain, rng)?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        let ln_f = layer_norm_params(params, "ln_f", d)?;
        let head = Linear::init(params, "head", d, spec.output_dim, 0.1, rng)?;
        Ok(Self {
            spec,
            obs_embed,
            act_embed,
            pos_embed,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn bind<F: Scalar>(spec: TransformerSpec, params: &ParamSet<F>) -> Result<Self, ModelError> {
        spec.validate()?;
        let obs_embed = Linear::bind(params, "obs_embed")?;
        let act_embed = Linear::bind(params, "act_embed")?;
        let pos_embed = lookup(params, "pos_embed")?;
        let blocks = (0..spec.num_layers)
            .map(|i| {
                let p = format!("blocks.{i}");
                Ok(Block {
                    ln1: bind_layer_norm(params, &format!("{p}.ln1"))?,
                    qkv: Linear::bind(params, &format!("{p}.qkv"))?,
                    proj: Linear::bind(params, &format!("{p}.proj"))?,
                    ln2: bind_layer_norm(params, &format!("{p}.ln2"))?,
                    fc1: Linear::bind(params, &format!("{p}.fc1"))?,
                    fc2: Linear::bind(params, &format!("{p}.fc2"))?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        let ln_f = bind_layer_norm(params, "ln_f")?;
        let head = Linear::bind(params, "head")?;
        check_dim("obs embedding", spec.obs_dim, obs_embed.input)?;
        check_dim("embedding", spec.embed_dim, obs_embed.output)?;
        check_dim("head", spec.output_dim, head.output)?;
        check_dim("positions", 2 * spec.context_length * spec.embed_dim, params.get(pos_embed).numel())?;
        Ok(Self {
            spec,
            obs_embed,
            act_embed,
            pos_embed,
            blocks,
            ln_f,
            head,
        })
    }

    fn token_inputs<F: Scalar>(&self, batch: &WindowBatch) -> Result<(Tensor<F>, Tensor<F>), ModelError> {
        let (b, l) = (batch.batch, batch.len);
        check_dim("window observations", b * l * self.spec.obs_dim, batch.obs.len())?;
        check_dim("window actions", b * l * self.spec.act_dim, batch.actions.len())?;
        let mut obs = Vec::with_capacity(batch.obs.len());
        for o in batch.obs.chunks(self.spec.obs_dim) {
            normalize_obs(o, &mut obs);
        }
        let mut act = Vec::with_capacity(batch.actions.len());
        for a in batch.actions.chunks(self.spec.act_dim) {
            normalize_action(a, &mut act);
        }
        let cast = |v: Vec<f32>| v.into_iter().map(|x| F::of(x as f64)).collect::<Vec<F>>();
        Ok((
            Tensor::new(&[b * l, self.spec.obs_dim], cast(obs))?,
            Tensor::new(&[b * l, self.spec.act_dim], cast(act))?,
        ))
    }

    /// Predicts one output per observation token. Position `i` only sees
    /// tokens up to and including observation `i`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
        batch: &WindowBatch,
        want_trace: bool,
    ) -> Result<TransformerOutput, ModelError> {
        let (b, l) = (batch.batch, batch.len);
        if b == 0 || l == 0 || batch.valid.iter().any(|&v| v == 0) {
            return Err(ModelError::EmptyWindow);
        }
        if l > self.spec.context_length {
            return Err(ModelError::WindowTooLong {
                len: l,
                max: self.spec.context_length,
            });
        }
        let d = self.spec.embed_dim;
        let h = self.spec.num_heads;
        let dh = d / h;
        let s = 2 * l;
        let rate = self.spec.dropout_rate;

        let (obs_t, act_t) = self.token_inputs::<F>(batch)?;
        let obs_in = tape.constant(obs_t)?;
        let act_in = tape.constant(act_t)?;
        let ot = self.obs_embed.forward(tape, params, obs_in)?;
        let at = self.act_embed.forward(tape, params, act_in)?;
        // [B*L, 2d] viewed as [B*2L, d] interleaves o_i, a_i.
        let tokens = tape.concat_cols(ot, at)?;
        let tokens = tape.reshape(tokens, &[b * s, d])?;
        let pos_table = tape.param(params, self.pos_embed)?;
        let pos_idx: Vec<Option<u32>> = (0..b * s).map(|r| Some((r % s) as u32)).collect();
        let pos = tape.gather_rows(pos_table, d, Arc::new(pos_idx))?;
        let mut x = tape.add(tokens, pos)?;
        x = tape.dropout(x, rate, 0)?;

        // Row index of (batch, token, q/k/v, head) inside the qkv projection viewed as rows of dh.
        let split = |which: usize| -> Arc<Vec<Option<u32>>> {
            let mut idx = Vec::with_capacity(b * h * s);
            for bi in 0..b {
                for hi in 0..h {
                    for t in 0..s {
                        idx.push(Some((((bi * s + t) * 3 + which) * h + hi) as u32));
                    }
                }
            }
            Arc::new(idx)
        };
        let (q_idx, k_idx, v_idx) = (split(0), split(1), split(2));
        let mut merge = Vec::with_capacity(b * s * h);
        for bi in 0..b {
            for t in 0..s {
                for hi in 0..h {
                    merge.push(Some(((bi * h + hi) * s + t) as u32));
                }
            }
        }
        let merge = Arc::new(merge);
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut trace = want_trace.then(|| AttentionTrace {
            tokens: s,
            heads: h,
            layers: Vec::new(),
        });

        for (li, blk) in self.blocks.iter().enumerate() {
            let layer_id = 1 + li as u64 * 4;
            let n1 = apply_layer_norm(tape, params, blk.ln1, x)?;
            let qkv = blk.qkv.forward(tape, params, n1)?;
            let q = tape.gather_rows(qkv, dh, q_idx.clone())?;
            let q = tape.reshape(q, &[b * h, s, dh])?;
            let k = tape.gather_rows(qkv, dh, k_idx.clone())?;
            let k = tape.reshape(k, &[b * h, s, dh])?;
            let v = tape.gather_rows(qkv, dh, v_idx.clone())?;
            let v = tape.reshape(v, &[b * h, s, dh])?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax(scores, true)?;
            if let Some(tr) = trace.as_mut() {
                tr.layers.push(tape.value(weights).cast::<f32>().reshape(&[b, h, s, s])?);
            }
            let z = tape.batch_matmul(weights, v, false)?;
            let z = tape.gather_rows(z, dh, merge.clone())?;
            let z = tape.reshape(z, &[b * s, d])?;
            let att = blk.proj.forward(tape, params, z)?;
            let att = tape.dropout(att, rate, layer_id)?;
            x = tape.add(x, att)?;

            let n2 = apply_layer_norm(tape, params, blk.ln2, x)?;
            let f = blk.fc1.forward(tape, params, n2)?;
            let f = tape.elu(f)?;
            let f = blk.fc2.forward(tape, params, f)?;
            let f = tape.dropout(f, rate, layer_id + 1)?;
            x = tape.add(x, f)?;
        }
        let obs_rows: Vec<Option<u32>> = (0..b)
            .flat_map(|bi| (0..l).map(move |i| Some((bi * s + 2 * i) as u32)))
            .collect();
        let xo = tape.gather_rows(x, d, Arc::new(obs_rows))?;
        let hidden = apply_layer_norm(tape, params, self.ln_f, xo)?;
        let predictions = self.head.forward(tape, params, hidden)?;
        Ok(TransformerOutput {
            predictions,
            hidden,
            trace,
        })
    }

    /// Eval-mode predictions at the last valid observation of each window.
    pub fn predict_last(&self, params: &ParamSet<f32>, batch: &WindowBatch) -> Result<Vec<Vec<f32>>, ModelError> {
        let mut tape = Tape::eval();
        let out = self.forward(&mut tape, params, batch, false)?;
        let p = tape.value(out.predictions);
        Ok(batch
            .valid
            .iter()
            .enumerate()
            .map(|(bi, &v)| p.row(bi * batch.len + v - 1).to_vec())
            .collect())
    }
}
