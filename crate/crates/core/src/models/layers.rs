use rand::Rng;

use crate::math::{MathError, ParamId, ParamSet, Scalar, Tape, Tensor, Var};

use super::ModelError;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Xavier-uniform weights scaled by `gain`, zero bias.
    pub fn init(params: &mut ParamSet<f32>, name: &str, input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let bound = gain * (6.0 / (input + output) as f64).sqrt();
        let w: Vec<f32> = (0..input * output)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) as f32 * bound as f32)
            .collect();
        let weight = params.add(format!("{name}.weight"), Tensor::new(&[input, output], w)?)?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn bind<F: Scalar>(params: &ParamSet<F>, name: &str) -> Result<Self, ModelError> {
        let weight = lookup(params, &format!("{name}.weight"))?;
        let bias = lookup(params, &format!("{name}.bias"))?;
        let shape = params.get(weight).shape();
        if shape.len() != 2 || params.get(bias).shape() != [shape[1]] {
            return Err(ModelError::BadParam(name.to_string()));
        }
        Ok(Self {
            weight,
            bias,
            input: shape[0],
            output: shape[1],
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamSet<F>, x: Var) -> Result<Var, MathError> {
        let w = tape.param(params, self.weight)?;
        let b = tape.param(params, self.bias)?;
        let y = tape.matmul(x, w, false)?;
        tape.add_row(y, b)
    }
}

pub(crate) fn lookup<F: Scalar>(params: &ParamSet<F>, name: &str) -> Result<ParamId, ModelError> {
    params.id(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

/// ELU multilayer perceptron; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct MlpOutput {
    pub output: Var,
    /// Activation of the last hidden layer (the input when there is none).
    pub last_hidden: Var,
}

impl Mlp {
    pub fn init(
        params: &mut ParamSet<f32>,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 1.0 };
                Linear::init(params, &format!("{name}.{i}"), dims[i], dims[i + 1], gain, rng)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn bind<F: Scalar>(params: &ParamSet<F>, name: &str, depth: usize) -> Result<Self, ModelError> {
        let layers: Vec<Linear> = (0..depth)
            .map(|i| Linear::bind(params, &format!("{name}.{i}")))
            .collect::<Result<_, _>>()?;
        for pair in layers.windows(2) {
            if pair[0].output != pair[1].input {
                return Err(ModelError::BadParam(name.to_string()));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, params: &ParamSet<F>, x: Var) -> Result<MlpOutput, MathError> {
        let mut h = x;
        let mut last_hidden = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, params, h)?;
            if i + 1 < self.layers.len() {
                h = tape.elu(h)?;
                last_hidden = h;
            }
        }
        Ok(MlpOutput {
            output: h,
            last_hidden,
        })
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::Dimension { what, expected, got });
    }
    Ok(())
}
