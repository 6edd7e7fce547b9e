//! The crossly-training loop: alternating Conformal GNN and Residual GNN
//! phases.
//!
//! Odd iterations train the conformal model on the training targets; even
//! iterations recompute residual labels from the *current* conformal model on
//! the validation targets and train the residual model against them. Each
//! model keeps its own optimizer across phases (warm restart). Calibration
//! and test labels are never read anywhere in the loop.

use crate::graph::{mask_labels, mask_labels_onehot, Graph, Phase, SplitMask, TargetKind};
use crate::models::{
    class_residual_labels, ConformalGnn, ModelError, ResidualGnn, TaskKind,
};
use crate::nn::{Adam, GraphOperator, Matrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("loop limit must be at least 1")]
    ZeroLoopLimit,
    #[error("training split is empty")]
    EmptyTrain,
    #[error("validation split is empty but the loop has residual phases")]
    EmptyVal,
    #[error("split kind {got:?} does not match task {task:?}")]
    SplitTaskMismatch { got: TargetKind, task: TaskKind },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossTrainConfig {
    /// Alg-1 loop limit n: total number of alternating phases.
    pub loop_limit: usize,
    pub epochs_per_phase: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CrossTrainConfig {
    fn default() -> Self {
        Self {
            loop_limit: 6,
            epochs_per_phase: 100,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Conformal,
    Residual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub iteration: usize,
    pub kind: PhaseKind,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub phases: Vec<PhaseRecord>,
}

impl TrainHistory {
    pub fn phase_kinds(&self) -> Vec<PhaseKind> {
        self.phases.iter().map(|p| p.kind).collect()
    }

    /// Final loss of each conformal phase, in order.
    pub fn conformal_phase_losses(&self) -> Vec<f64> {
        self.phases
            .iter()
            .filter(|p| p.kind == PhaseKind::Conformal)
            .filter_map(|p| p.losses.last().copied())
            .collect()
    }
}

/// Inputs the loop needs per task, precomputed once.
struct TaskData {
    train_edges: Vec<(u32, u32)>,
    train_weights: Vec<f64>,
    val_edges: Vec<(u32, u32)>,
    val_weights: Vec<f64>,
    train_labels: Vec<f64>,
    train_mask: Vec<bool>,
    val_labels: Vec<f64>,
    val_mask: Vec<bool>,
    train_onehot: Option<Matrix>,
    class_labels: Vec<u32>,
}

fn gather_task_data(
    graph: &Graph,
    split: &SplitMask,
    task: TaskKind,
) -> Result<TaskData, TrainingError> {
    let mut data = TaskData {
        train_edges: Vec::new(),
        train_weights: Vec::new(),
        val_edges: Vec::new(),
        val_weights: Vec::new(),
        train_labels: Vec::new(),
        train_mask: Vec::new(),
        val_labels: Vec::new(),
        val_mask: Vec::new(),
        train_onehot: None,
        class_labels: Vec::new(),
    };
    match task {
        TaskKind::EdgeWeight => {
            if split.target_kind != TargetKind::Edges {
                return Err(TrainingError::SplitTaskMismatch {
                    got: split.target_kind,
                    task,
                });
            }
            let weights = graph
                .weights()
                .ok_or(crate::graph::GraphError::MissingWeights)?;
            for (id, &edge) in graph.edges().iter().enumerate() {
                match split.phase_of(id) {
                    Phase::Train => {
                        data.train_edges.push(edge);
                        data.train_weights.push(weights[id]);
                    }
                    Phase::Val => {
                        data.val_edges.push(edge);
                        data.val_weights.push(weights[id]);
                    }
                    _ => {}
                }
            }
        }
        TaskKind::NodeRegression => {
            if split.target_kind != TargetKind::Nodes {
                return Err(TrainingError::SplitTaskMismatch {
                    got: split.target_kind,
                    task,
                });
            }
            let (labels, mask) = mask_labels(graph, split, Phase::Train)?;
            data.train_labels = labels;
            data.train_mask = mask;
            let (labels, mask) = mask_labels(graph, split, Phase::Val)?;
            data.val_labels = labels;
            data.val_mask = mask;
        }
        TaskKind::NodeClassification => {
            if split.target_kind != TargetKind::Nodes {
                return Err(TrainingError::SplitTaskMismatch {
                    got: split.target_kind,
                    task,
                });
            }
            let (onehot, mask) = mask_labels_onehot(graph, split, Phase::Train)?;
            data.train_onehot = Some(onehot);
            data.train_mask = mask;
            let (_, val_mask) = mask_labels_onehot(graph, split, Phase::Val)?;
            data.val_mask = val_mask;
            if let Some(crate::graph::Labels::Class { labels, .. }) = graph.node_labels() {
                data.class_labels = labels.clone();
            }
        }
    }
    Ok(data)
}

/// Residual labels on validation targets from the current conformal model:
/// truth minus mean prediction for regression-style tasks, softmax minus
/// one-hot per class for classification. Labels are zeroed off the
/// validation mask so only validation rows can carry signal.
fn residual_labels_for_val(
    conformal: &ConformalGnn,
    op: &GraphOperator,
    features: &Matrix,
    data: &TaskData,
    task: TaskKind,
    n_classes: usize,
) -> Result<Matrix, ModelError> {
    match task {
        TaskKind::EdgeWeight => {
            let pred = conformal.forward_edges(op, features, &data.val_edges)?;
            let labels: Vec<f64> = data
                .val_weights
                .iter()
                .zip(&pred.mean)
                .map(|(&w, &p)| w - p)
                .collect();
            Ok(Matrix::from_vec(labels.len(), 1, labels))
        }
        TaskKind::NodeRegression => {
            let pred = conformal.forward_nodes(op, features)?;
            let mut labels = Matrix::zeros(data.val_labels.len(), 1);
            for i in 0..data.val_labels.len() {
                if data.val_mask[i] {
                    labels.set(i, 0, data.val_labels[i] - pred.mean[i]);
                }
            }
            Ok(labels)
        }
        TaskKind::NodeClassification => {
            let pred = conformal.forward_classes(op, features)?;
            let full = class_residual_labels(&pred, &data.class_labels, n_classes);
            let mut labels = Matrix::zeros(full.rows(), full.cols());
            for r in 0..full.rows() {
                if data.val_mask[r] {
                    for c in 0..full.cols() {
                        labels.set(r, c, full.get(r, c));
                    }
                }
            }
            Ok(labels)
        }
    }
}

/// Run the alternating loop. Phase `i` (1-based) trains the conformal model
/// when odd and the residual model when even, for `epochs_per_phase`
/// full-batch steps each.
pub fn cross_train(
    conformal: &mut ConformalGnn,
    residual: &mut ResidualGnn,
    graph: &Graph,
    split: &SplitMask,
    op: &GraphOperator,
    cfg: &CrossTrainConfig,
) -> Result<TrainHistory, TrainingError> {
    if cfg.loop_limit == 0 {
        return Err(TrainingError::ZeroLoopLimit);
    }
    let task = conformal.config.task;
    let data = gather_task_data(graph, split, task)?;
    let train_empty = match task {
        TaskKind::EdgeWeight => data.train_edges.is_empty(),
        _ => !data.train_mask.iter().any(|&m| m),
    };
    if train_empty {
        return Err(TrainingError::EmptyTrain);
    }
    let val_empty = match task {
        TaskKind::EdgeWeight => data.val_edges.is_empty(),
        _ => !data.val_mask.iter().any(|&m| m),
    };
    if cfg.loop_limit >= 2 && val_empty {
        return Err(TrainingError::EmptyVal);
    }

    let features = graph.features();
    let mut conformal_adam = Adam::new(cfg.learning_rate, &conformal.param_shapes())?;
    let mut residual_adam = Adam::new(cfg.learning_rate, &residual.param_shapes())?;
    let mut history = TrainHistory::default();

    for i in 1..=cfg.loop_limit {
        if i % 2 == 1 {
            let mut losses = Vec::with_capacity(cfg.epochs_per_phase);
            for _ in 0..cfg.epochs_per_phase {
                let loss = match task {
                    TaskKind::EdgeWeight => conformal.train_step_edges(
                        op,
                        features,
                        &data.train_edges,
                        &data.train_weights,
                        &mut conformal_adam,
                    )?,
                    TaskKind::NodeRegression => conformal.train_step_node_reg(
                        op,
                        features,
                        &data.train_labels,
                        &data.train_mask,
                        &mut conformal_adam,
                    )?,
                    TaskKind::NodeClassification => conformal.train_step_node_class(
                        op,
                        features,
                        data.train_onehot.as_ref().unwrap(),
                        &data.train_mask,
                        &mut conformal_adam,
                    )?,
                };
                losses.push(loss);
            }
            history.phases.push(PhaseRecord {
                iteration: i,
                kind: PhaseKind::Conformal,
                losses,
            });
        } else {
            // Labels regenerated from the current conformal model each
            // residual phase.
            let labels = residual_labels_for_val(
                conformal,
                op,
                features,
                &data,
                task,
                residual.config.n_classes,
            )?;
            let mut losses = Vec::with_capacity(cfg.epochs_per_phase);
            for _ in 0..cfg.epochs_per_phase {
                let loss = match task {
                    TaskKind::EdgeWeight => residual.train_step_edges(
                        op,
                        features,
                        &data.val_edges,
                        labels.data(),
                        &mut residual_adam,
                    )?,
                    _ => residual.train_step_nodes(
                        op,
                        features,
                        &labels,
                        &data.val_mask,
                        &mut residual_adam,
                    )?,
                };
                losses.push(loss);
            }
            history.phases.push(PhaseRecord {
                iteration: i,
                kind: PhaseKind::Residual,
                losses,
            });
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, split_targets, Labels};
    use crate::models::{ModelArch, ModelConfig};
    use crate::nn::LayerKind;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node_reg_setup(n: usize) -> (Graph, SplitMask, GraphOperator) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut edges = Vec::new();
        for i in 0..n as u32 {
            edges.push((i, (i + 1) % n as u32));
        }
        let mut features = Matrix::zeros(n, 2);
        for v in features.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let labels: Vec<f64> = (0..n).map(|i| features.get(i, 0) * 2.0 + 0.5).collect();
        let graph = build_graph(n, &edges, features, None, Some(Labels::Real(labels)), false)
            .unwrap();
        let split = split_targets(
            &graph,
            TargetKind::Nodes,
            (0.3, 0.3, 0.2, 0.2),
            5,
        )
        .unwrap();
        let entries: Vec<(u32, u32, f64)> = graph
            .edges()
            .iter()
            .flat_map(|&(a, b)| [(a, b, 1.0), (b, a, 1.0)])
            .collect();
        let op = GraphOperator::from_entries(n, &entries);
        (graph, split, op)
    }

    fn models(alpha: f64, seed: u64) -> (ConformalGnn, ResidualGnn) {
        let config = ModelConfig {
            task: TaskKind::NodeRegression,
            arch: ModelArch::Gae,
            encoder: LayerKind::GcnConv,
            feature_dim: 2,
            hidden_dim: 8,
            n_layers: 2,
            embed_dim: 4,
            n_classes: 0,
            alpha,
            seed,
        };
        (
            ConformalGnn::new(config).unwrap(),
            ResidualGnn::new(ModelConfig { seed: seed + 1, ..config }).unwrap(),
        )
    }

    #[test]
    fn phase_sequence_alternates() {
        let (graph, split, op) = node_reg_setup(24);
        let (mut conformal, mut residual) = models(0.1, 7);
        let cfg = CrossTrainConfig {
            loop_limit: 4,
            epochs_per_phase: 2,
            learning_rate: 1e-2,
            seed: 0,
        };
        let history =
            cross_train(&mut conformal, &mut residual, &graph, &split, &op, &cfg).unwrap();
        assert_eq!(
            history.phase_kinds(),
            vec![
                PhaseKind::Conformal,
                PhaseKind::Residual,
                PhaseKind::Conformal,
                PhaseKind::Residual
            ]
        );
    }

    #[test]
    fn loop_limit_one_leaves_residual_at_init() {
        let (graph, split, op) = node_reg_setup(24);
        let (mut conformal, mut residual) = models(0.1, 7);
        let before: Vec<Matrix> = residual.params().into_iter().cloned().collect();
        let cfg = CrossTrainConfig {
            loop_limit: 1,
            epochs_per_phase: 3,
            learning_rate: 1e-2,
            seed: 0,
        };
        let history =
            cross_train(&mut conformal, &mut residual, &graph, &split, &op, &cfg).unwrap();
        assert_eq!(history.phase_kinds(), vec![PhaseKind::Conformal]);
        for (a, b) in residual.params().iter().zip(&before) {
            assert_eq!(*a, b, "residual params changed with loop_limit 1");
        }
    }

    #[test]
    fn zero_loop_limit_rejected() {
        let (graph, split, op) = node_reg_setup(24);
        let (mut conformal, mut residual) = models(0.1, 7);
        let cfg = CrossTrainConfig {
            loop_limit: 0,
            epochs_per_phase: 1,
            learning_rate: 1e-2,
            seed: 0,
        };
        assert!(matches!(
            cross_train(&mut conformal, &mut residual, &graph, &split, &op, &cfg),
            Err(TrainingError::ZeroLoopLimit)
        ));
    }

    #[test]
    fn residual_labels_match_current_conformal_exactly() {
        let (graph, split, op) = node_reg_setup(24);
        let (mut conformal, mut residual) = models(0.1, 7);
        let cfg = CrossTrainConfig {
            loop_limit: 1,
            epochs_per_phase: 5,
            learning_rate: 1e-2,
            seed: 0,
        };
        cross_train(&mut conformal, &mut residual, &graph, &split, &op, &cfg).unwrap();
        // After phase 1, the even branch would use labels equal to
        // y_val - mean prediction from the current conformal model, exactly.
        let data = gather_task_data(&graph, &split, TaskKind::NodeRegression).unwrap();
        let labels = residual_labels_for_val(
            &conformal,
            &op,
            graph.features(),
            &data,
            TaskKind::NodeRegression,
            0,
        )
        .unwrap();
        let pred = conformal.forward_nodes(&op, graph.features()).unwrap();
        for i in 0..graph.n_nodes() {
            if data.val_mask[i] {
                let expect = data.val_labels[i] - pred.mean[i];
                assert_eq!(labels.get(i, 0).to_bits(), expect.to_bits());
            } else {
                assert_eq!(labels.get(i, 0), 0.0);
            }
        }
    }

    #[test]
    fn perfect_conformal_model_drives_residuals_to_zero() {
        // If residual labels are all zero, the trained residual magnitudes
        // must approach zero (zero-target regression).
        let (graph, split, op) = node_reg_setup(24);
        let config = ModelConfig {
            task: TaskKind::NodeRegression,
            arch: ModelArch::Gae,
            encoder: LayerKind::GcnConv,
            feature_dim: 2,
            hidden_dim: 8,
            n_layers: 2,
            embed_dim: 4,
            n_classes: 0,
            alpha: 0.1,
            seed: 21,
        };
        let mut residual = ResidualGnn::new(config).unwrap();
        let mut adam = Adam::new(0.02, &residual.param_shapes()).unwrap();
        let zeros = Matrix::zeros(graph.n_nodes(), 1);
        let val_mask: Vec<bool> = split
            .assignment()
            .iter()
            .map(|&p| p == Phase::Val)
            .collect();
        for _ in 0..600 {
            residual
                .train_step_nodes(&op, graph.features(), &zeros, &val_mask, &mut adam)
                .unwrap();
        }
        let pred = residual.forward_nodes(&op, graph.features()).unwrap();
        for (i, &is_val) in val_mask.iter().enumerate() {
            if is_val {
                assert!(
                    pred.magnitude(i) < 1e-2,
                    "val residual magnitude {} at node {i}",
                    pred.magnitude(i)
                );
            }
        }
    }
}
