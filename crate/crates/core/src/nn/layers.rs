//! Message-passing and dense layers.
//!
//! Layer parameters live outside any tape; `forward` registers them on the
//! step's tape and records the bound vars so the trainer can read gradients
//! back in a stable order.

use super::matrix::Matrix;
use super::sparse::GraphOperator;
use super::tape::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    GcnConv,
    SageConv,
    GraphConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "layer dims must be positive");
        Self {
            kind,
            in_dim,
            out_dim,
            activation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Dense/GCN: [W]; SAGE/GraphConv: [W_self, W_neigh].
    pub weights: Vec<Matrix>,
    pub bias: Matrix,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    m
}

impl Layer {
    pub fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let n_weight_mats = match spec.kind {
            LayerKind::Dense | LayerKind::GcnConv => 1,
            LayerKind::SageConv | LayerKind::GraphConv => 2,
        };
        let weights = (0..n_weight_mats)
            .map(|_| glorot(spec.in_dim, spec.out_dim, rng))
            .collect();
        Self {
            spec,
            weights,
            bias: Matrix::zeros(1, spec.out_dim),
        }
    }

    /// Register parameters and compute the layer output. Bound parameter vars
    /// are appended to `bindings` in the same order as [`Layer::params`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        op: Option<&GraphOperator>,
        input: Var,
        bindings: &mut Vec<Var>,
    ) -> Var {
        let weight_vars: Vec<Var> = self.weights.iter().map(|w| tape.param(w.clone())).collect();
        let bias_var = tape.param(self.bias.clone());
        bindings.extend(weight_vars.iter().copied());
        bindings.push(bias_var);

        let needs_op = !matches!(self.spec.kind, LayerKind::Dense);
        let op = if needs_op {
            Some(op.expect("message-passing layer requires a graph operator"))
        } else {
            None
        };

        let pre = match self.spec.kind {
            LayerKind::Dense => tape.matmul(input, weight_vars[0]),
            LayerKind::GcnConv => {
                let propagated = tape.spmm(op.unwrap().gcn.clone(), input);
                tape.matmul(propagated, weight_vars[0])
            }
            LayerKind::SageConv => {
                let self_part = tape.matmul(input, weight_vars[0]);
                let mean = tape.spmm(op.unwrap().mean.clone(), input);
                let neigh_part = tape.matmul(mean, weight_vars[1]);
                tape.add(self_part, neigh_part)
            }
            LayerKind::GraphConv => {
                let self_part = tape.matmul(input, weight_vars[0]);
                let agg = tape.spmm(op.unwrap().raw.clone(), input);
                let neigh_part = tape.matmul(agg, weight_vars[1]);
                tape.add(self_part, neigh_part)
            }
        };
        let biased = tape.add_row_bias(pre, bias_var);
        match self.spec.activation {
            Activation::Relu => tape.relu(biased),
            Activation::Identity => biased,
        }
    }

    /// Parameter matrices in binding order (weights then bias).
    pub fn params(&self) -> Vec<&Matrix> {
        self.weights.iter().chain(std::iter::once(&self.bias)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .chain(std::iter::once(&mut self.bias))
            .collect()
    }
}
