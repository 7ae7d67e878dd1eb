use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::tape::{softplus, Mat, Tape, Var};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
        }
    }

    fn apply_var(self, x: Var<'_>) -> Var<'_> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
            Activation::Softplus => x.softplus(),
        }
    }
}

/// Fully connected network acting on rows: an `n × widths[0]` input maps to
/// `n × widths.last()`. Weights are stored `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Mat>,
    hidden: Activation,
    output: Option<Activation>,
}

impl Mlp {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(
        widths: &[usize],
        hidden: Activation,
        output: Option<Activation>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {widths:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive sd");
            let mut w = Mat::zeros(fan_in, fan_out);
            // row-major fill so the draw order matches the checkpoint layout
            for i in 0..fan_in {
                for j in 0..fan_out {
                    w[(i, j)] = dist.sample(rng);
                }
            }
            weights.push(w);
            biases.push(Mat::zeros(1, fan_out));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
            hidden,
            output,
        })
    }

    pub fn from_parts(
        widths: Vec<usize>,
        weights: Vec<Mat>,
        biases: Vec<Mat>,
        hidden: Activation,
        output: Option<Activation>,
    ) -> Result<Self> {
        if widths.len() < 2 || weights.len() != widths.len() - 1 || biases.len() != weights.len() {
            return Err(Error::Shape("layer count mismatch".into()));
        }
        for (i, pair) in widths.windows(2).enumerate() {
            if weights[i].shape() != (pair[0], pair[1]) || biases[i].shape() != (1, pair[1]) {
                return Err(Error::Shape(format!("layer {i} does not match widths {widths:?}")));
            }
        }
        if weights.iter().chain(&biases).any(|m| m.iter().any(|x| !x.is_finite())) {
            return Err(Error::Domain("non-finite network parameter".into()));
        }
        Ok(Self {
            widths,
            weights,
            biases,
            hidden,
            output,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Option<Activation> {
        self.output
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Parameters in layer order: `W0, b0, W1, b1, …`.
    pub fn params(&self) -> Vec<&Mat> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn biases(&self) -> &[Mat] {
        &self.biases
    }

    pub fn last_layer_mut(&mut self) -> (&mut Mat, &mut Mat) {
        let i = self.weights.len() - 1;
        (&mut self.weights[i], &mut self.biases[i])
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_width() {
            return Err(Error::Shape(format!(
                "network expects width {}, got {cols}",
                self.input_width()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Mat) -> Result<Mat> {
        self.check_input(input.ncols())?;
        let last = self.weights.len() - 1;
        let mut h = input.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = &h * w;
            for mut row in h.row_iter_mut() {
                row += b;
            }
            let act = if i < last { Some(self.hidden) } else { self.output };
            if let Some(act) = act {
                h.apply(|x| *x = act.apply(*x));
            }
        }
        Ok(h)
    }

    /// Records every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> MlpVars<'t> {
        MlpVars {
            layers: self
                .weights
                .iter()
                .zip(&self.biases)
                .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
                .collect(),
            hidden: self.hidden,
            output: self.output,
            input_width: self.input_width(),
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct MlpVars<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    hidden: Activation,
    output: Option<Activation>,
    input_width: usize,
}

impl<'t> MlpVars<'t> {
    pub fn forward(&self, input: Var<'t>) -> Result<Var<'t>> {
        if input.shape().1 != self.input_width {
            return Err(Error::Shape(format!(
                "network expects width {}, got {}",
                self.input_width,
                input.shape().1
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w).add_row(b);
            let act = if i < last { Some(self.hidden) } else { self.output };
            if let Some(act) = act {
                h = act.apply_var(h);
            }
        }
        Ok(h)
    }

    /// Parameter handles in the same order as [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = Mlp::new(&[3, 4, 2], Activation::Tanh, None, &mut rng::seeded(1, 0)).unwrap();
        for p in net.params_mut() {
            p.fill(0.0);
        }
        let y = net.forward(&Mat::from_row_slice(1, 3, &[1.0, -2.0, 3.0])).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_identity() {
        let net = Mlp::from_parts(
            vec![2, 2],
            vec![Mat::identity(2, 2)],
            vec![Mat::from_element(1, 2, 1.0)],
            Activation::Tanh,
            None,
        )
        .unwrap();
        let y = net.forward(&Mat::from_row_slice(1, 2, &[0.5, -3.0])).unwrap();
        assert_eq!(y, Mat::from_row_slice(1, 2, &[1.5, -2.0]));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let net = Mlp::new(&[3, 2], Activation::Relu, None, &mut rng::seeded(1, 0)).unwrap();
        assert!(matches!(net.forward(&Mat::zeros(1, 4)), Err(Error::Shape(_))));
        assert!(Mlp::new(&[3], Activation::Relu, None, &mut rng::seeded(1, 0)).is_err());
    }

    #[test]
    fn parameter_count_is_exact() {
        let net = Mlp::new(&[24, 64, 64, 48], Activation::Tanh, None, &mut rng::seeded(1, 0)).unwrap();
        assert_eq!(net.parameter_count(), 24 * 64 + 64 + 64 * 64 + 64 + 64 * 48 + 48);
        let total: usize = net.params().iter().map(|m| m.len()).sum();
        assert_eq!(total, net.parameter_count());
    }

    #[test]
    fn tape_forward_matches_plain() {
        let net = Mlp::new(&[3, 5, 2], Activation::Softplus, Some(Activation::Tanh), &mut rng::seeded(4, 0))
            .unwrap();
        let x = Mat::from_row_slice(2, 3, &[0.1, 0.2, 0.3, -1.0, 0.5, 2.0]);
        let tape = Tape::new();
        let y = net.bind(&tape).forward(tape.leaf(x.clone())).unwrap().value();
        let plain = net.forward(&x).unwrap();
        assert!((y - plain).abs().max() < 1e-15);
    }
}
