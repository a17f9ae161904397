use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{affine_forward, Matrix};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// out×in
    pub weight: Matrix,
    /// 1×out
    pub bias: Matrix,
}

/// Fully connected network with `tanh` hidden layers and an affine output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
    activation: Activation,
}

impl Mlp {
    /// Weights uniform in ±1/sqrt(fan_in), biases zero.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "an MLP needs at least an input and an output size, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSpec(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let weights = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, weights).expect("sized above"),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            activation: Activation::Tanh,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two sizes")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Weight and bias arrays in layer order.
    pub fn arrays(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays().map(Matrix::len).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&Matrix::row_vector(input))?.into_vec())
    }

    /// Row-wise evaluation of a B×in batch.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects {} inputs, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (j, layer) in self.layers.iter().enumerate() {
            h = affine_forward(&h, &layer.weight, &layer.bias);
            if j < last {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Places the parameters on `tape`, differentiable or frozen.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param_ref(&l.weight), tape.param_ref(&l.bias))
                } else {
                    (tape.constant_ref(&l.weight), tape.constant_ref(&l.bias))
                }
            })
            .collect();
        BoundMlp { layers }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Reassembles handles listed in [`Mlp::arrays`] order.
    pub fn from_vars(vars: &[Var]) -> Self {
        Self {
            layers: vars.chunks(2).map(|p| (p[0], p[1])).collect(),
        }
    }

    pub fn apply(&self, tape: &mut Tape<'_>, input: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (j, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if j < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Parameter handles in the same order as [`Mlp::arrays`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::init(&[3, 64, 1], 7).unwrap();
        let b = Mlp::init(&[3, 64, 1], 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Mlp::init(&[3, 64, 1], 8).unwrap());
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(matches!(Mlp::init(&[1], 0), Err(Error::InvalidSpec(_))));
        assert!(matches!(Mlp::init(&[], 0), Err(Error::InvalidSpec(_))));
        assert!(matches!(Mlp::init(&[2, 0, 1], 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn biases_start_at_zero_and_weights_are_bounded() {
        let m = Mlp::init(&[2, 2], 1).unwrap();
        assert_eq!(m.layers()[0].bias.as_slice(), &[0.0, 0.0]);
        let m = Mlp::init(&[16, 64, 1], 3).unwrap();
        assert!(m.layers()[0].weight.max_abs() <= 0.25);
        assert!(m.layers()[1].weight.max_abs() <= 0.125);
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut m = Mlp::init(&[3, 4, 2], 5).unwrap();
        for l in m.layers_mut() {
            l.weight = Matrix::zeros(l.weight.rows(), l.weight.cols());
        }
        m.layers_mut()[1].bias = Matrix::row_vector(&[0.7, -1.1]);
        assert_eq!(m.forward(&[9.0, -3.0, 1.0]).unwrap(), vec![0.7, -1.1]);
    }

    #[test]
    fn identity_single_layer() {
        let mut m = Mlp::init(&[1, 1], 0).unwrap();
        m.layers_mut()[0].weight = Matrix::scalar(1.0);
        assert_eq!(m.forward(&[2.5]).unwrap(), vec![2.5]);
    }

    #[test]
    fn forward_is_pure_and_checks_shape() {
        let m = Mlp::init(&[4, 8, 1], 11).unwrap();
        let x = [0.1, -0.2, 0.3, 0.9];
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn tape_and_direct_forward_agree_bitwise() {
        let m = Mlp::init(&[5, 64, 3], 2).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0, 0.0, 0.25], vec![1.0; 5]]).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.apply(&mut tape, xv).unwrap();
        assert_eq!(tape.value(out), &m.forward_batch(&x).unwrap());
    }
}
