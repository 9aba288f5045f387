use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::ConvGeom;
use super::tape::{Tape, Var};
use super::{GradError, ParamSet, Tensor};

/// The supported layer kinds. Layers with parameters own
/// `"{name}.weight"` and `"{name}.bias"` in the bound [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    /// `[n, inputs] -> [n, outputs]`, weight `[inputs, outputs]`.
    Dense { inputs: usize, outputs: usize },
    /// Weight `[out_channels, in_channels, k, k]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Weight `[in_channels, out_channels, k, k]`; `out_side` fixes the
    /// output-padding ambiguity of strided transposed convolutions.
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        out_side: usize,
    },
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    /// Per-example reshape; the batch axis is kept.
    Reshape { shape: Vec<usize> },
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// `(weight shape, bias shape, fan-in)` for layers with parameters.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs], inputs)),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
            )),
            LayerKind::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![in_channels, out_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
            )),
            _ => None,
        }
    }
}

/// A sequential network: the computation description consumed by
/// [`forward`] and the per-example gradient routines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Shape of one example, without the batch axis.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Parameters bound to tape leaves, in [`ParamSet`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            names.push(name.to_string());
            vars.push(tape.leaf(t.clone()));
        }
        Self { names, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var, GradError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| GradError::MissingParam(name.to_string()))
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Self {
        Self { input_shape, layers }
    }

    /// Per-example output shape, or the first layer that rejects its input.
    pub fn output_shape(&self) -> Result<Vec<usize>, GradError> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer_output_shape(layer, &shape)?;
        }
        Ok(shape)
    }

    /// Fresh parameters: weights uniform in `+-1/sqrt(fan_in)`, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut params = ParamSet::new();
        for layer in &self.layers {
            if let Some((w_shape, b_shape, fan_in)) = layer.param_shapes() {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = w_shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                let w = Tensor::new(w_shape, data).expect("weight shape");
                params.insert(layer.weight_name(), w).expect("unique layer names");
                params
                    .insert(layer.bias_name(), Tensor::zeros(&b_shape))
                    .expect("unique layer names");
            }
        }
        params
    }

    /// Verifies that `params` holds every tensor the layers need, with the right shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<(), GradError> {
        for layer in &self.layers {
            if let Some((w_shape, b_shape, _)) = layer.param_shapes() {
                for (name, shape) in [(layer.weight_name(), w_shape), (layer.bias_name(), b_shape)] {
                    let t = params.get(&name).ok_or_else(|| GradError::MissingParam(name.clone()))?;
                    if t.shape() != shape.as_slice() {
                        return Err(GradError::ShapeMismatch {
                            context: format!("parameter {name}"),
                            expected: shape,
                            actual: t.shape().to_vec(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Records the network on `tape` for a batched input `x: [n, ..input_shape]`.
    pub fn apply(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var, GradError> {
        let shape = tape.shape(x);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(GradError::ShapeMismatch {
                context: "network input".into(),
                expected: self.input_shape.clone(),
                actual: shape.to_vec(),
            });
        }
        let mut h = x;
        for layer in &self.layers {
            h = apply_layer(tape, params, layer, h)?;
        }
        Ok(h)
    }
}

fn layer_mismatch(layer: &Layer, expected: Vec<usize>, actual: &[usize]) -> GradError {
    GradError::ShapeMismatch {
        context: format!("layer {}", layer.name),
        expected,
        actual: actual.to_vec(),
    }
}

/// Per-example output shape of one layer.
fn layer_output_shape(layer: &Layer, input: &[usize]) -> Result<Vec<usize>, GradError> {
    match &layer.kind {
        LayerKind::Dense { inputs, outputs } => {
            if input != [*inputs] {
                return Err(layer_mismatch(layer, vec![*inputs], input));
            }
            Ok(vec![*outputs])
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            if input.len() != 3 || input[0] != *in_channels {
                return Err(layer_mismatch(layer, vec![*in_channels, 0, 0], input));
            }
            let g = ConvGeom::forward(*kernel, *stride, *padding, input[1], input[2])
                .ok_or_else(|| layer_mismatch(layer, vec![*in_channels, *kernel, *kernel], input))?;
            Ok(vec![*out_channels, g.out_h, g.out_w])
        }
        LayerKind::ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            out_side,
        } => {
            if input.len() != 3 || input[0] != *in_channels {
                return Err(layer_mismatch(layer, vec![*in_channels, 0, 0], input));
            }
            ConvGeom::transposed(*kernel, *stride, *padding, input[1], input[2], *out_side, *out_side)
                .ok_or_else(|| layer_mismatch(layer, vec![*in_channels, *out_side, *out_side], input))?;
            Ok(vec![*out_channels, *out_side, *out_side])
        }
        LayerKind::Reshape { shape } => {
            if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                return Err(layer_mismatch(layer, shape.clone(), input));
            }
            Ok(shape.clone())
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::LeakyRelu { .. } | LayerKind::Tanh | LayerKind::Sigmoid => Ok(input.to_vec()),
    }
}

fn apply_layer(tape: &mut Tape, params: &BoundParams, layer: &Layer, x: Var) -> Result<Var, GradError> {
    let in_shape = tape.shape(x).to_vec();
    let n = in_shape[0];
    // Validates the per-example shape and gives the per-example output shape.
    let out_shape = layer_output_shape(layer, &in_shape[1..])?;
    let weight = || params.get(&layer.weight_name());
    let bias = || params.get(&layer.bias_name());
    Ok(match &layer.kind {
        LayerKind::Dense { .. } => {
            let h = tape.matmul(x, weight()?);
            tape.add_bias(h, bias()?)
        }
        LayerKind::Conv2d {
            kernel, stride, padding, ..
        } => {
            let g = ConvGeom::forward(*kernel, *stride, *padding, in_shape[2], in_shape[3]).expect("validated");
            let h = tape.conv(x, weight()?, g);
            tape.add_bias(h, bias()?)
        }
        LayerKind::ConvTranspose2d {
            kernel,
            stride,
            padding,
            out_side,
            ..
        } => {
            let g = ConvGeom::transposed(*kernel, *stride, *padding, in_shape[2], in_shape[3], *out_side, *out_side)
                .expect("validated");
            let h = tape.conv_transpose(x, weight()?, g);
            tape.add_bias(h, bias()?)
        }
        LayerKind::LeakyRelu { slope } => tape.leaky_relu(x, *slope),
        LayerKind::Tanh => tape.tanh(x),
        LayerKind::Sigmoid => tape.sigmoid(x),
        LayerKind::Reshape { .. } | LayerKind::Flatten => {
            let mut shape = vec![n];
            shape.extend(out_shape);
            tape.reshape(x, &shape)?
        }
    })
}

/// Evaluates `net` on a batched input. Pure: no state is kept between calls.
pub fn forward(model: &ParamSet, net: &Network, input: &Tensor) -> Result<Tensor, GradError> {
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, model);
    let x = tape.leaf(input.clone());
    let y = net.apply(&mut tape, &params, x)?;
    Ok(tape.value(y).clone())
}
