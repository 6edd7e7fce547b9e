//! The Conformal GNN (triple-quantile head), the Residual GNN, and the
//! task-specific decoders.
//!
//! Both models share the same skeleton: a message-passing trunk followed by
//! linear heads. The Conformal GNN carries three heads (mean, lower quantile,
//! upper quantile) over one shared trunk; the Residual GNN carries a single
//! head predicting signed residuals. Edge-weight tasks decode embeddings with
//! inner products; the directed variant splits the embedding width into
//! source and target halves.

use crate::graph::onehot_labels;
use crate::nn::{
    Activation, Adam, GraphOperator, Layer, LayerKind, LayerSpec, Matrix, NnError, Tape, Var,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model is configured for {expected:?}, not {got:?}")]
    TaskMismatch { expected: TaskKind, got: TaskKind },
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("directed decoder needs an even embedding width, got {0}")]
    OddEmbedWidth(usize),
    #[error("the directed decoder only applies to edge-weight prediction")]
    DirectedNonEdgeTask,
    #[error("classification needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("empty target set for training")]
    EmptyTargets,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint format version {got} unsupported (expected {want})")]
    BadVersion { got: u32, want: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    EdgeWeight,
    NodeRegression,
    NodeClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArch {
    /// Undirected graph autoencoder: one embedding per node.
    Gae,
    /// Directed variant: embedding split into source/target halves.
    DiGae,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: TaskKind,
    pub arch: ModelArch,
    pub encoder: LayerKind,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// Embedding width for edge-weight decoding.
    pub embed_dim: usize,
    /// Number of classes for classification tasks.
    pub n_classes: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(ModelError::BadAlpha(self.alpha));
        }
        if self.arch == ModelArch::DiGae {
            if self.task != TaskKind::EdgeWeight {
                return Err(ModelError::DirectedNonEdgeTask);
            }
            if self.embed_dim % 2 != 0 {
                return Err(ModelError::OddEmbedWidth(self.embed_dim));
            }
        }
        if self.task == TaskKind::NodeClassification && self.n_classes < 2 {
            return Err(ModelError::TooFewClasses(self.n_classes));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        match self.task {
            TaskKind::EdgeWeight => self.embed_dim,
            TaskKind::NodeRegression => 1,
            TaskKind::NodeClassification => self.n_classes,
        }
    }

    fn trunk_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(self.n_layers);
        let mut in_dim = self.feature_dim;
        for _ in 0..self.n_layers {
            specs.push(LayerSpec::new(
                self.encoder,
                in_dim,
                self.hidden_dim,
                Activation::Relu,
            ));
            in_dim = self.hidden_dim;
        }
        specs
    }

    fn head_spec(&self) -> LayerSpec {
        LayerSpec::new(
            LayerKind::Dense,
            self.hidden_dim,
            self.head_dim(),
            Activation::Identity,
        )
    }
}

/// Per-target (mean, lower-quantile, upper-quantile) estimates. Lower never
/// exceeds upper: crossing quantile heads are swapped per target at
/// prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriplePrediction {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TriplePrediction {
    fn canonicalize(mut self) -> Self {
        for (lo, hi) in self.lower.iter_mut().zip(self.upper.iter_mut()) {
            if lo > hi {
                std::mem::swap(lo, hi);
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Classification triple: mean logits plus probability-scale quantile bands
/// (post-softmax), canonicalized so lower <= upper per (node, class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTriplePrediction {
    pub logits: Matrix,
    /// softmax of the mean logits; rows sum to 1.
    pub probs: Matrix,
    pub lower: Matrix,
    pub upper: Matrix,
}

/// Signed residual estimates for regression-style targets, with the
/// magnitude accessor the scores consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPrediction {
    pub signed: Vec<f64>,
}

impl ResidualPrediction {
    pub fn magnitude(&self, target: usize) -> f64 {
        self.signed[target].abs()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.signed.iter().map(|v| v.abs()).collect()
    }
}

/// Row-normalized class probabilities from logits (overflow-safe softmax).
pub fn classify_probs(logits: &Matrix) -> Matrix {
    logits.softmax_rows()
}

fn trunk_and_heads(config: &ModelConfig, n_heads: usize) -> (Vec<Layer>, Vec<Layer>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let trunk = config
        .trunk_specs()
        .into_iter()
        .map(|spec| Layer::init(spec, &mut rng))
        .collect();
    let heads = (0..n_heads)
        .map(|_| Layer::init(config.head_spec(), &mut rng))
        .collect();
    (trunk, heads)
}

fn forward_trunk(
    trunk: &[Layer],
    tape: &mut Tape,
    op: &GraphOperator,
    x: Var,
    bindings: &mut Vec<Var>,
) -> Var {
    let mut h = x;
    for layer in trunk {
        h = layer.forward(tape, Some(op), h, bindings);
    }
    h
}

/// Decode per-edge weights from an embedding head output.
fn decode_edges(
    tape: &mut Tape,
    arch: ModelArch,
    embedding: Var,
    edges: Rc<Vec<(u32, u32)>>,
    embed_dim: usize,
) -> Var {
    match arch {
        ModelArch::Gae => tape.edge_inner(embedding, embedding, edges),
        ModelArch::DiGae => {
            let half = embed_dim / 2;
            let src = tape.slice_cols(embedding, 0..half);
            let dst = tape.slice_cols(embedding, half..embed_dim);
            tape.edge_inner(src, dst, edges)
        }
    }
}

/// The triple-quantile predictor: shared trunk, three linear heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformalGnn {
    pub config: ModelConfig,
    trunk: Vec<Layer>,
    /// mean, lower, upper.
    heads: Vec<Layer>,
}

impl ConformalGnn {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (trunk, heads) = trunk_and_heads(&config, 3);
        Ok(Self {
            config,
            trunk,
            heads,
        })
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.all_layers()
            .iter()
            .flat_map(|l| l.params().into_iter().map(|p| p.shape()))
            .collect()
    }

    fn all_layers(&self) -> Vec<&Layer> {
        self.trunk.iter().chain(self.heads.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.all_layers().into_iter().flat_map(|l| l.params()).collect()
    }

    fn expect_task(&self, got: TaskKind) -> Result<(), ModelError> {
        if self.config.task != got {
            return Err(ModelError::TaskMismatch {
                expected: self.config.task,
                got,
            });
        }
        Ok(())
    }

    /// Trunk plus the three head outputs (pre-decoder), binding every
    /// parameter onto the tape.
    fn forward_heads(
        &self,
        tape: &mut Tape,
        op: &GraphOperator,
        features: &Matrix,
        bindings: &mut Vec<Var>,
    ) -> [Var; 3] {
        let x = tape.constant(features.clone());
        let h = forward_trunk(&self.trunk, tape, op, x, bindings);
        let mean = self.heads[0].forward(tape, None, h, bindings);
        let lower = self.heads[1].forward(tape, None, h, bindings);
        let upper = self.heads[2].forward(tape, None, h, bindings);
        [mean, lower, upper]
    }

    /// Edge-weight predictions for an explicit edge list.
    pub fn forward_edges(
        &self,
        op: &GraphOperator,
        features: &Matrix,
        edges: &[(u32, u32)],
    ) -> Result<TriplePrediction, ModelError> {
        self.expect_task(TaskKind::EdgeWeight)?;
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let heads = self.forward_heads(&mut tape, op, features, &mut bindings);
        let edges = Rc::new(edges.to_vec());
        let mean = decode_edges(
            &mut tape,
            self.config.arch,
            heads[0],
            Rc::clone(&edges),
            self.config.embed_dim,
        );
        let lower = decode_edges(
            &mut tape,
            self.config.arch,
            heads[1],
            Rc::clone(&edges),
            self.config.embed_dim,
        );
        let upper = decode_edges(
            &mut tape,
            self.config.arch,
            heads[2],
            edges,
            self.config.embed_dim,
        );
        Ok(TriplePrediction {
            mean: tape.value(mean).data().to_vec(),
            lower: tape.value(lower).data().to_vec(),
            upper: tape.value(upper).data().to_vec(),
        }
        .canonicalize())
    }

    /// Full n-by-n weight matrices for each quantile (edge-weight task).
    pub fn forward_edge_matrices(
        &self,
        op: &GraphOperator,
        features: &Matrix,
    ) -> Result<(Matrix, Matrix, Matrix), ModelError> {
        self.expect_task(TaskKind::EdgeWeight)?;
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let heads = self.forward_heads(&mut tape, op, features, &mut bindings);
        let dense = |tape: &Tape, h: Var| {
            let z = tape.value(h);
            match self.config.arch {
                ModelArch::Gae => z.matmul_bt(z),
                ModelArch::DiGae => {
                    let half = self.config.embed_dim / 2;
                    let src = z.slice_cols(0, half);
                    let dst = z.slice_cols(half, self.config.embed_dim);
                    src.matmul_bt(&dst)
                }
            }
        };
        let mean = dense(&tape, heads[0]);
        let mut lower = dense(&tape, heads[1]);
        let mut upper = dense(&tape, heads[2]);
        for idx in 0..lower.data().len() {
            if lower.data()[idx] > upper.data()[idx] {
                let (a, b) = (lower.data()[idx], upper.data()[idx]);
                lower.data_mut()[idx] = b;
                upper.data_mut()[idx] = a;
            }
        }
        Ok((mean, lower, upper))
    }

    /// Per-node regression predictions.
    pub fn forward_nodes(
        &self,
        op: &GraphOperator,
        features: &Matrix,
    ) -> Result<TriplePrediction, ModelError> {
        self.expect_task(TaskKind::NodeRegression)?;
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let heads = self.forward_heads(&mut tape, op, features, &mut bindings);
        Ok(TriplePrediction {
            mean: tape.value(heads[0]).data().to_vec(),
            lower: tape.value(heads[1]).data().to_vec(),
            upper: tape.value(heads[2]).data().to_vec(),
        }
        .canonicalize())
    }

    /// Classification predictions: mean logits (and softmax probabilities)
    /// plus probability-scale quantile bands.
    pub fn forward_classes(
        &self,
        op: &GraphOperator,
        features: &Matrix,
    ) -> Result<ClassTriplePrediction, ModelError> {
        self.expect_task(TaskKind::NodeClassification)?;
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let heads = self.forward_heads(&mut tape, op, features, &mut bindings);
        let logits = tape.value(heads[0]).clone();
        let probs = classify_probs(&logits);
        let mut lower = tape.value(heads[1]).softmax_rows();
        let mut upper = tape.value(heads[2]).softmax_rows();
        for idx in 0..lower.data().len() {
            if lower.data()[idx] > upper.data()[idx] {
                let (a, b) = (lower.data()[idx], upper.data()[idx]);
                lower.data_mut()[idx] = b;
                upper.data_mut()[idx] = a;
            }
        }
        Ok(ClassTriplePrediction {
            logits,
            probs,
            lower,
            upper,
        })
    }

    /// One full-batch training step on edge-weight targets. Returns the loss.
    pub fn train_step_edges(
        &mut self,
        op: &GraphOperator,
        features: &Matrix,
        train_edges: &[(u32, u32)],
        train_weights: &[f64],
        adam: &mut Adam,
    ) -> Result<f64, ModelError> {
        self.expect_task(TaskKind::EdgeWeight)?;
        if train_edges.is_empty() {
            return Err(ModelError::EmptyTargets);
        }
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let heads = self.forward_heads(&mut tape, op, features, &mut bindings);
        let edges = Rc::new(train_edges.to_vec());
        let n = train_edges.len();
        let target = Rc::new(Matrix::from_vec(n, 1, train_weights.to_vec()));
        let ones = Rc::new(Matrix::from_vec(n, 1, vec![1.0; n]));

        let mean_pred = decode_edges(
            &mut tape,
            self.config.arch,
            heads[0],
            Rc::clone(&edges),
            self.config.embed_dim,
        );
        let lower_pred = decode_edges(
            &mut tape,
            self.config.arch,
            heads[1],
            Rc::clone(&edges),
            self.config.embed_dim,
        );
        let upper_pred = decode_edges(
            &mut tape,
            self.config.arch,
            heads[2],
            edges,
            self.config.embed_dim,
        );

        let sq_sum = tape.masked_sq_sum(mean_pred, Rc::clone(&target), Rc::clone(&ones));
        let sq = tape.scale(sq_sum, 1.0 / n as f64);
        let alpha = self.config.alpha;
        let lo_loss =
            tape.pinball_masked(lower_pred, Rc::clone(&target), Rc::clone(&ones), alpha / 2.0)?;
        let hi_loss = tape.pinball_masked(upper_pred, target, ones, 1.0 - alpha / 2.0)?;
        let partial = tape.add(sq, lo_loss);
        let loss = tape.add(partial, hi_loss);
        self.apply_step(&mut tape, loss, &bindings, adam)
    }

    /// One full-batch training step on node-regression targets.
    pub fn train_step_node_reg(
        &mut self,
        op: &GraphOperator,
        features: &Matrix,
        masked_labels: &[f64],
        mask: &[bool],
        adam: &mut Adam,
    ) -> Result<f64, ModelError> {
        self.expect_task(TaskKind::NodeRegression)?;
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(ModelError::EmptyTargets);
        }
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let heads = self.forward_heads(&mut tape, op, features, &mut bindings);
        let n = masked_labels.len();
        let target = Rc::new(Matrix::from_vec(n, 1, masked_labels.to_vec()));
        let mask_m = Rc::new(Matrix::from_vec(
            n,
            1,
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        ));
        let sq_sum = tape.masked_sq_sum(heads[0], Rc::clone(&target), Rc::clone(&mask_m));
        let sq = tape.scale(sq_sum, 1.0 / n_masked as f64);
        let alpha = self.config.alpha;
        let lo_loss =
            tape.pinball_masked(heads[1], Rc::clone(&target), Rc::clone(&mask_m), alpha / 2.0)?;
        let hi_loss = tape.pinball_masked(heads[2], target, mask_m, 1.0 - alpha / 2.0)?;
        let partial = tape.add(sq, lo_loss);
        let loss = tape.add(partial, hi_loss);
        self.apply_step(&mut tape, loss, &bindings, adam)
    }

    /// One full-batch training step on node-classification targets.
    pub fn train_step_node_class(
        &mut self,
        op: &GraphOperator,
        features: &Matrix,
        onehot: &Matrix,
        mask: &[bool],
        adam: &mut Adam,
    ) -> Result<f64, ModelError> {
        self.expect_task(TaskKind::NodeClassification)?;
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(ModelError::EmptyTargets);
        }
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let heads = self.forward_heads(&mut tape, op, features, &mut bindings);
        let onehot_rc = Rc::new(onehot.clone());
        let mask_rc = Rc::new(mask.to_vec());
        let ce = tape.cross_entropy_masked(heads[0], Rc::clone(&onehot_rc), mask_rc)?;

        // Quantile heads train on the probability scale against one-hot rows.
        let mut mask_entries = Matrix::zeros(onehot.rows(), onehot.cols());
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..onehot.cols() {
                    mask_entries.set(r, c, 1.0);
                }
            }
        }
        let mask_entries = Rc::new(mask_entries);
        let alpha = self.config.alpha;
        let lower_probs = tape.softmax_rows(heads[1]);
        let upper_probs = tape.softmax_rows(heads[2]);
        let lo_loss = tape.pinball_masked(
            lower_probs,
            Rc::clone(&onehot_rc),
            Rc::clone(&mask_entries),
            alpha / 2.0,
        )?;
        let hi_loss =
            tape.pinball_masked(upper_probs, onehot_rc, mask_entries, 1.0 - alpha / 2.0)?;
        let partial = tape.add(ce, lo_loss);
        let loss = tape.add(partial, hi_loss);
        self.apply_step(&mut tape, loss, &bindings, adam)
    }

    fn apply_step(
        &mut self,
        tape: &mut Tape,
        loss: Var,
        bindings: &[Var],
        adam: &mut Adam,
    ) -> Result<f64, ModelError> {
        let loss_value = tape.value(loss).scalar_value();
        tape.backward(loss)?;
        let grads: Vec<Option<Matrix>> =
            bindings.iter().map(|&v| tape.grad(v).cloned()).collect();
        let mut params = self.params_mut();
        adam.step(&mut params, &grads);
        Ok(loss_value)
    }
}

/// The residual predictor: same trunk skeleton, one signed-output head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualGnn {
    pub config: ModelConfig,
    trunk: Vec<Layer>,
    head: Layer,
}

impl ResidualGnn {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (trunk, mut heads) = trunk_and_heads(&config, 1);
        Ok(Self {
            config,
            trunk,
            head: heads.pop().unwrap(),
        })
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| l.params().into_iter().map(|p| p.shape()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.trunk
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| l.params())
            .collect()
    }

    fn forward_head(
        &self,
        tape: &mut Tape,
        op: &GraphOperator,
        features: &Matrix,
        bindings: &mut Vec<Var>,
    ) -> Var {
        let x = tape.constant(features.clone());
        let h = forward_trunk(&self.trunk, tape, op, x, bindings);
        self.head.forward(tape, None, h, bindings)
    }

    /// Signed residual estimates for an edge list.
    pub fn forward_edges(
        &self,
        op: &GraphOperator,
        features: &Matrix,
        edges: &[(u32, u32)],
    ) -> Result<ResidualPrediction, ModelError> {
        if self.config.task != TaskKind::EdgeWeight {
            return Err(ModelError::TaskMismatch {
                expected: self.config.task,
                got: TaskKind::EdgeWeight,
            });
        }
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let h = self.forward_head(&mut tape, op, features, &mut bindings);
        let pred = decode_edges(
            &mut tape,
            self.config.arch,
            h,
            Rc::new(edges.to_vec()),
            self.config.embed_dim,
        );
        Ok(ResidualPrediction {
            signed: tape.value(pred).data().to_vec(),
        })
    }

    /// Signed residual estimates per node (regression).
    pub fn forward_nodes(
        &self,
        op: &GraphOperator,
        features: &Matrix,
    ) -> Result<ResidualPrediction, ModelError> {
        if self.config.task != TaskKind::NodeRegression {
            return Err(ModelError::TaskMismatch {
                expected: self.config.task,
                got: TaskKind::NodeRegression,
            });
        }
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let h = self.forward_head(&mut tape, op, features, &mut bindings);
        Ok(ResidualPrediction {
            signed: tape.value(h).data().to_vec(),
        })
    }

    /// Signed per-class residual estimates (classification): n x K.
    pub fn forward_class_residuals(
        &self,
        op: &GraphOperator,
        features: &Matrix,
    ) -> Result<Matrix, ModelError> {
        if self.config.task != TaskKind::NodeClassification {
            return Err(ModelError::TaskMismatch {
                expected: self.config.task,
                got: TaskKind::NodeClassification,
            });
        }
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let h = self.forward_head(&mut tape, op, features, &mut bindings);
        Ok(tape.value(h).clone())
    }

    /// One full-batch step towards signed residual labels on edge targets.
    pub fn train_step_edges(
        &mut self,
        op: &GraphOperator,
        features: &Matrix,
        val_edges: &[(u32, u32)],
        residual_labels: &[f64],
        adam: &mut Adam,
    ) -> Result<f64, ModelError> {
        if val_edges.is_empty() {
            return Err(ModelError::EmptyTargets);
        }
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let h = self.forward_head(&mut tape, op, features, &mut bindings);
        let pred = decode_edges(
            &mut tape,
            self.config.arch,
            h,
            Rc::new(val_edges.to_vec()),
            self.config.embed_dim,
        );
        let n = val_edges.len();
        let target = Rc::new(Matrix::from_vec(n, 1, residual_labels.to_vec()));
        let ones = Rc::new(Matrix::from_vec(n, 1, vec![1.0; n]));
        let sq_sum = tape.masked_sq_sum(pred, target, ones);
        let loss = tape.scale(sq_sum, 1.0 / n as f64);
        self.apply_step(&mut tape, loss, &bindings, adam)
    }

    /// One full-batch step towards signed residual labels on node targets.
    /// For classification, `residual_labels` is n x K; otherwise n x 1.
    pub fn train_step_nodes(
        &mut self,
        op: &GraphOperator,
        features: &Matrix,
        residual_labels: &Matrix,
        mask: &[bool],
        adam: &mut Adam,
    ) -> Result<f64, ModelError> {
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(ModelError::EmptyTargets);
        }
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let h = self.forward_head(&mut tape, op, features, &mut bindings);
        let mut mask_m = Matrix::zeros(residual_labels.rows(), residual_labels.cols());
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..residual_labels.cols() {
                    mask_m.set(r, c, 1.0);
                }
            }
        }
        let sq_sum = tape.masked_sq_sum(h, Rc::new(residual_labels.clone()), Rc::new(mask_m));
        let loss = tape.scale(sq_sum, 1.0 / (n_masked * residual_labels.cols()) as f64);
        self.apply_step(&mut tape, loss, &bindings, adam)
    }

    fn apply_step(
        &mut self,
        tape: &mut Tape,
        loss: Var,
        bindings: &[Var],
        adam: &mut Adam,
    ) -> Result<f64, ModelError> {
        let loss_value = tape.value(loss).scalar_value();
        tape.backward(loss)?;
        let grads: Vec<Option<Matrix>> =
            bindings.iter().map(|&v| tape.grad(v).cloned()).collect();
        let mut params = self.params_mut();
        adam.step(&mut params, &grads);
        Ok(loss_value)
    }
}

/// Residual labels for classification: softmax of the mean logits minus the
/// one-hot truth, one K-vector per node.
pub fn class_residual_labels(
    pred: &ClassTriplePrediction,
    labels: &[u32],
    n_classes: usize,
) -> Matrix {
    let onehot = onehot_labels(labels, n_classes);
    pred.probs.sub(&onehot)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    format_version: u32,
    model: T,
}

/// Write a model checkpoint. JSON round-trips f64 exactly (shortest-roundtrip
/// formatting), so a reloaded model forwards bit-identically.
pub fn save_checkpoint<T: Serialize>(model: &T, path: &Path) -> Result<(), ModelError> {
    let payload = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        model,
    };
    let json = serde_json::to_string_pretty(&payload)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ModelError> {
    let raw = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&raw)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadVersion {
            got: version,
            want: CHECKPOINT_VERSION,
        });
    }
    let model = value
        .get("model")
        .cloned()
        .ok_or_else(|| ModelError::Parse(serde::de::Error::custom("missing model field")))?;
    Ok(serde_json::from_value(model)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge_config() -> ModelConfig {
        ModelConfig {
            task: TaskKind::EdgeWeight,
            arch: ModelArch::Gae,
            encoder: LayerKind::GcnConv,
            feature_dim: 3,
            hidden_dim: 8,
            n_layers: 2,
            embed_dim: 4,
            n_classes: 0,
            alpha: 0.1,
            seed: 1,
        }
    }

    fn ring_operator(n: usize) -> GraphOperator {
        let mut entries = Vec::new();
        for i in 0..n as u32 {
            let j = (i + 1) % n as u32;
            entries.push((i, j, 1.0));
            entries.push((j, i, 1.0));
        }
        GraphOperator::from_entries(n, &entries)
    }

    fn random_features(n: usize, f: usize, seed: u64) -> Matrix {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, f);
        for v in m.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn edge_forward_shapes() {
        let model = ConformalGnn::new(edge_config()).unwrap();
        let op = ring_operator(5);
        let x = random_features(5, 3, 2);
        let (mean, lower, upper) = model.forward_edge_matrices(&op, &x).unwrap();
        assert_eq!(mean.shape(), (5, 5));
        assert_eq!(lower.shape(), (5, 5));
        assert_eq!(upper.shape(), (5, 5));
        for idx in 0..25 {
            assert!(lower.data()[idx] <= upper.data()[idx]);
        }
    }

    #[test]
    fn triple_prediction_canonicalizes_crossings() {
        let t = TriplePrediction {
            mean: vec![0.0, 0.0],
            lower: vec![2.0, -1.0],
            upper: vec![1.0, 5.0],
        }
        .canonicalize();
        assert_eq!(t.lower, vec![1.0, -1.0]);
        assert_eq!(t.upper, vec![2.0, 5.0]);
    }

    #[test]
    fn classify_probs_rows_sum_to_one() {
        let logits = Matrix::from_vec(2, 3, vec![0.0, 0.0, 0.0, 1000.0, 0.0, -5.0]);
        let probs = classify_probs(&logits);
        for r in 0..2 {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(probs.row(r).iter().all(|&p| p >= 0.0));
        }
        assert!((probs.get(0, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert!(probs.get(1, 0) > 0.999);
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let model = ConformalGnn::new(edge_config()).unwrap();
        let op = ring_operator(5);
        let x = random_features(5, 3, 2);
        assert!(matches!(
            model.forward_nodes(&op, &x),
            Err(ModelError::TaskMismatch { .. })
        ));
    }

    #[test]
    fn digae_requires_even_embedding() {
        let config = ModelConfig {
            arch: ModelArch::DiGae,
            embed_dim: 5,
            ..edge_config()
        };
        assert!(matches!(
            ConformalGnn::new(config),
            Err(ModelError::OddEmbedWidth(5))
        ));
    }

    #[test]
    fn constant_label_training_converges_to_constant() {
        // Squared loss against a constant label: the mean head must approach
        // the constant (closed-form minimizer of the squared loss).
        let config = ModelConfig {
            task: TaskKind::NodeRegression,
            n_classes: 0,
            ..edge_config()
        };
        let mut model = ConformalGnn::new(config).unwrap();
        let op = ring_operator(12);
        let x = random_features(12, 3, 5);
        let labels = vec![2.5; 12];
        let mask = vec![true; 12];
        let mut adam = Adam::new(0.01, &model.param_shapes()).unwrap();
        let first = model
            .train_step_node_reg(&op, &x, &labels, &mask, &mut adam)
            .unwrap();
        let mut last = first;
        for _ in 0..4000 {
            last = model
                .train_step_node_reg(&op, &x, &labels, &mask, &mut adam)
                .unwrap();
        }
        // The pinball subgradient never vanishes at its kink, so the last
        // iterate orbits the optimum at lr scale; a small-lr polish phase
        // shrinks the orbit below the tolerance.
        let mut fine = Adam::new(2e-4, &model.param_shapes()).unwrap();
        for _ in 0..4000 {
            last = model
                .train_step_node_reg(&op, &x, &labels, &mask, &mut fine)
                .unwrap();
        }
        assert!(last < first, "loss should decrease: {first} -> {last}");
        let pred = model.forward_nodes(&op, &x).unwrap();
        for &m in &pred.mean {
            assert!((m - 2.5).abs() < 1e-2, "mean head off constant: {m}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let model = ConformalGnn::new(edge_config()).unwrap();
        let op = ring_operator(5);
        let x = random_features(5, 3, 7);
        let before = model.forward_edges(&op, &x, &[(0, 1), (2, 3)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded: ConformalGnn = load_checkpoint(&path).unwrap();
        let after = loaded.forward_edges(&op, &x, &[(0, 1), (2, 3)]).unwrap();
        for (a, b) in before.mean.iter().zip(&after.mean) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in before.lower.iter().zip(&after.lower) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

