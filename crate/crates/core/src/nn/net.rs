use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu if pre > T::zero() => T::one(),
            Activation::Relu => T::zero(),
            Activation::Identity => T::one(),
        }
    }
}

/// Fully connected layer. `weights` is row-major with shape (outputs, inputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
            activation,
        }
    }

    /// He-uniform initialization for relu layers, Glorot-uniform otherwise.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            Activation::Identity => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        let weights = (0..inputs * outputs)
            .map(|_| T::of(rng.gen_range(-limit..limit)))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![T::zero(); outputs],
            activation,
        }
    }

    fn pre_activation(&self, input: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, &b)| {
            row.iter().zip(input).fold(b, |acc, (&w, &x)| acc + w * x)
        }));
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DenseNet<T> {
    pub layers: Vec<Dense<T>>,
}

/// Activations recorded by [`DenseNet::forward_recorded`] for a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    /// Input of each layer.
    inputs: Vec<Vec<T>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T> Tape<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }
}

/// Parameter gradients laid out like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &DenseNet<T>) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().chain(self.bias.iter_mut()).zip(other.weights.iter().chain(&other.bias)) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    /// Gradients flattened in parameter order (layer by layer, weights then bias).
    pub fn flat(&self) -> Vec<T> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

impl<T: Scalar> DenseNet<T> {
    /// Builds a network with relu hidden layers of the given widths and an
    /// output layer with `output_activation`.
    pub fn new<R: Rng>(
        input: usize,
        hidden: &[usize],
        output: usize,
        output_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &width in hidden {
            layers.push(Dense::init(fan_in, width, Activation::Relu, rng));
            fan_in = width;
        }
        layers.push(Dense::init(fan_in, output, output_activation, rng));
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::DimensionMismatch {
                    expected: l.inputs * l.outputs,
                    got: l.weights.len(),
                });
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.inputs != l.outputs {
                    return Err(Error::DimensionMismatch {
                        expected: l.outputs,
                        got: next.inputs,
                    });
                }
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter in layer {i}")));
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Dense::parameter_count).sum()
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::DimensionMismatch {
                expected: self.input_len(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        let mut current = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.pre_activation(&current, &mut next);
            next.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    /// Activations of every layer, first hidden layer first.
    pub fn activations(&self, input: &[T]) -> Result<Vec<Vec<T>>> {
        let tape = self.forward_recorded(input)?;
        let mut acts: Vec<Vec<T>> = tape.inputs.into_iter().skip(1).collect();
        acts.push(tape.output);
        Ok(acts)
    }

    pub fn forward_recorded(&self, input: &[T]) -> Result<Tape<T>> {
        self.check_input(input)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            output: Vec::new(),
        };
        let mut current = input.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::with_capacity(layer.outputs);
            layer.pre_activation(&current, &mut pre);
            let out: Vec<T> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            tape.inputs.push(std::mem::replace(&mut current, out));
            tape.pre.push(pre);
        }
        tape.output = current;
        Ok(tape)
    }

    /// Reverse-mode pass: accumulates parameter gradients of a scalar loss
    /// into `grads` given `d_output` = dLoss/dOutput, and returns dLoss/dInput.
    pub fn backward(&self, tape: &Tape<T>, d_output: &[T], grads: &mut Gradients<T>) -> Vec<T> {
        let mut delta = d_output.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[i];
            for (d, &p) in delta.iter_mut().zip(&tape.pre[i]) {
                *d *= layer.activation.derivative(p);
            }
            let gw = &mut grads.weights[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                grads.bias[i][o] += d;
                for (g, &x) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let mut d_input = vec![T::zero(); layer.inputs];
            for (row, &d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                if d == T::zero() {
                    continue;
                }
                for (di, &w) in d_input.iter_mut().zip(row) {
                    *di += w * d;
                }
            }
            delta = d_input;
        }
        delta
    }

    /// Mutable view of every parameter in [`Gradients::flat`] order.
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn parameters(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }
}
