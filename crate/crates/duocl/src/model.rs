//! The dual-tower embedding model: a raw visual extractor with a projection
//! head into the joint space, and a text encoder over fixed per-class tokens.
//! Both towers carry a low-rank adapter on their output layer; the adapter
//! down-projection is frozen after initialization and the up-projection starts
//! at zero, so a freshly adapted model reproduces the base model exactly.

use std::collections::{BTreeMap, HashMap};
use std::ops::Deref;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::graph::NodeId;
use crate::tensor::{softmax_slice, Shape};
use crate::{Graph, Tensor};

/// Low-rank adapter on one linear layer: `W_eff = W + up * down`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// rank x in_dim, frozen after initialization.
    down: Tensor,
    /// out_dim x rank, trainable, zero at insertion.
    up: Tensor,
}

impl LoraAdapter {
    pub fn new(down: Tensor, out_dim: usize) -> Self {
        let rank = down.rows();
        LoraAdapter {
            down,
            up: Tensor::zeros(Shape::matrix(out_dim, rank)),
        }
    }

    pub fn down(&self) -> &Tensor {
        &self.down
    }

    pub fn up(&self) -> &Tensor {
        &self.up
    }

    pub fn up_mut(&mut self) -> &mut Tensor {
        &mut self.up
    }

    pub fn zero_up(&mut self) {
        self.up = self.up.zeros_like();
    }

    fn delta(&self) -> Tensor {
        self.up.matmul2(&self.down)
    }
}

/// Two-layer bias-free perceptron with a low-rank adapter on the output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tower {
    /// hidden x in
    pub w1: Tensor,
    /// out x hidden
    pub w2: Tensor,
    pub adapter: LoraAdapter,
}

impl Tower {
    fn effective_w2(&self) -> Tensor {
        self.w2.add(&self.adapter.delta())
    }

    /// Unnormalized tower output.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.w1.matvec(x).relu();
        self.effective_w2().matvec(&h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotLabel {
    TeacherPrevTask,
    TextReferenceBase,
}

/// Frozen deep copy of the model at a point in time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    label: SnapshotLabel,
    model: DualTowerModel,
}

impl Snapshot {
    pub fn label(&self) -> SnapshotLabel {
        self.label
    }

    pub fn model(&self) -> &DualTowerModel {
        &self.model
    }
}

impl Deref for Snapshot {
    type Target = DualTowerModel;

    fn deref(&self) -> &DualTowerModel {
        &self.model
    }
}

/// Which weight groups become trainable leaves when building a forward graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct GraphPlan {
    /// Base tower weights and the projection head.
    pub train_base: bool,
    /// Adapter up-projections.
    pub train_adapters: bool,
}

/// Node ids of a visual forward pass added to a graph.
pub struct VisualNodes {
    /// Normalized raw feature r̄(x).
    pub raw_norm: NodeId,
    /// Normalized joint embedding v̄(x).
    pub joint_norm: NodeId,
}

/// Scale of the frozen adapter down-projection entries. Larger values speed up
/// effective adaptation for a given learning rate on the up-projection.
const LORA_DOWN_SCALE: f64 = 16.0;

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("dimensions are consistent")
}

pub fn random_unit_vector(rng: &mut impl Rng, dim: usize) -> Tensor {
    let v = random_matrix(rng, 1, dim, 1.0);
    let (u, _) = Tensor::vector(v.data().to_vec()).l2_normalize();
    u
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DualTowerModel {
    pub config: ModelConfig,
    pub visual: Tower,
    /// joint_dim x raw_dim projection head, frozen after base alignment.
    pub projection: Tensor,
    pub text: Tower,
    /// Fixed unit token per registered class, ordered by class id.
    class_tokens: BTreeMap<usize, Tensor>,
    /// Count of degenerate-norm normalization events observed in forwards.
    #[serde(skip, default)]
    degenerate_events: AtomicU64,
}

impl Clone for DualTowerModel {
    fn clone(&self) -> Self {
        DualTowerModel {
            config: self.config.clone(),
            visual: self.visual.clone(),
            projection: self.projection.clone(),
            text: self.text.clone(),
            class_tokens: self.class_tokens.clone(),
            degenerate_events: AtomicU64::new(0),
        }
    }
}

impl DualTowerModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Self {
        let c = &config;
        let vis_w1 = random_matrix(rng, c.hidden_dim, c.input_dim, (c.input_dim as f64).sqrt().recip());
        let vis_w2 = random_matrix(rng, c.raw_dim, c.hidden_dim, (c.hidden_dim as f64).sqrt().recip());
        let vis_down = random_matrix(
            rng,
            c.lora_rank,
            c.hidden_dim,
            LORA_DOWN_SCALE / (c.hidden_dim as f64).sqrt(),
        );
        let txt_w1 = random_matrix(
            rng,
            c.hidden_dim,
            c.class_token_dim,
            (c.class_token_dim as f64).sqrt().recip(),
        );
        let txt_w2 = random_matrix(rng, c.joint_dim, c.hidden_dim, (c.hidden_dim as f64).sqrt().recip());
        let txt_down = random_matrix(
            rng,
            c.lora_rank,
            c.hidden_dim,
            LORA_DOWN_SCALE / (c.hidden_dim as f64).sqrt(),
        );
        let projection = random_matrix(rng, c.joint_dim, c.raw_dim, (c.raw_dim as f64).sqrt().recip());
        let raw_dim = c.raw_dim;
        let joint_dim = c.joint_dim;
        DualTowerModel {
            config,
            visual: Tower {
                w1: vis_w1,
                w2: vis_w2,
                adapter: LoraAdapter::new(vis_down, raw_dim),
            },
            projection,
            text: Tower {
                w1: txt_w1,
                w2: txt_w2,
                adapter: LoraAdapter::new(txt_down, joint_dim),
            },
            class_tokens: BTreeMap::new(),
            degenerate_events: AtomicU64::new(0),
        }
    }

    /// Register a class with a fresh random unit token. No-op if present.
    pub fn register_class(&mut self, class_id: usize, rng: &mut impl Rng) {
        let dim = self.config.class_token_dim;
        self.class_tokens
            .entry(class_id)
            .or_insert_with(|| random_unit_vector(rng, dim));
    }

    pub fn class_token(&self, class_id: usize) -> Result<&Tensor, ModelError> {
        self.class_tokens
            .get(&class_id)
            .ok_or(ModelError::UnknownClass(class_id))
    }

    pub fn registered_classes(&self) -> Vec<usize> {
        self.class_tokens.keys().copied().collect()
    }

    pub fn degenerate_event_count(&self) -> u64 {
        self.degenerate_events.load(Ordering::Relaxed)
    }

    fn note_degenerate(&self, fired: bool) {
        if fired {
            self.degenerate_events.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.rank() != 1 || x.len() != self.config.input_dim {
            return Err(ModelError::InputDim {
                got: x.len(),
                expected: self.config.input_dim,
            });
        }
        Ok(())
    }

    /// Normalized raw visual feature r̄(x).
    pub fn encode_raw(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        let (r, degenerate) = self.visual.forward(x).l2_normalize();
        self.note_degenerate(degenerate);
        Ok(r)
    }

    /// Normalized joint-space visual embedding v̄(x) = normalize(P r(x)).
    pub fn encode_visual(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        let r = self.visual.forward(x);
        let (v, degenerate) = self.projection.matvec(&r).l2_normalize();
        self.note_degenerate(degenerate);
        Ok(v)
    }

    /// Normalized text embedding of a registered class.
    pub fn encode_text(&self, class_id: usize) -> Result<Tensor, ModelError> {
        let token = self.class_token(class_id)?;
        let (u, degenerate) = self.text.forward(token).l2_normalize();
        self.note_degenerate(degenerate);
        Ok(u)
    }

    /// Cross-modal cosine logits v̄(x)ᵀu_c for each class in `class_set`.
    pub fn clip_logits(&self, x: &Tensor, class_set: &[usize]) -> Result<Vec<f64>, ModelError> {
        if class_set.is_empty() {
            return Err(ModelError::EmptyClassSet);
        }
        let v = self.encode_visual(x)?;
        class_set
            .iter()
            .map(|&c| Ok(self.encode_text(c)?.dot(&v)))
            .collect()
    }

    /// Temperature-scaled softmax over the cross-modal logits.
    pub fn clip_probs(
        &self,
        x: &Tensor,
        class_set: &[usize],
        tau: f64,
    ) -> Result<Vec<f64>, ModelError> {
        let logits = self.clip_logits(x, class_set)?;
        Ok(probs_from_logits(&logits, tau))
    }

    pub fn take_snapshot(&self, label: SnapshotLabel) -> Snapshot {
        Snapshot {
            label,
            model: self.clone(),
        }
    }

    /// Snapshot with the text adapter up-projection zeroed: the text tower
    /// reverts to its base weights while the visual tower is untouched.
    pub fn text_reference(&self) -> Snapshot {
        let mut model = self.clone();
        model.text.adapter.zero_up();
        Snapshot {
            label: SnapshotLabel::TextReferenceBase,
            model,
        }
    }

    /// Leaf bindings for graphs built by the forward-graph methods.
    pub fn weight_bindings(&self, bindings: &mut HashMap<String, Tensor>) {
        bindings.insert("vis.w1".into(), self.visual.w1.clone());
        bindings.insert("vis.w2".into(), self.visual.w2.clone());
        bindings.insert("vis.a".into(), self.visual.adapter.down.clone());
        bindings.insert("vis.b".into(), self.visual.adapter.up.clone());
        bindings.insert("proj".into(), self.projection.clone());
        bindings.insert("txt.w1".into(), self.text.w1.clone());
        bindings.insert("txt.w2".into(), self.text.w2.clone());
        bindings.insert("txt.a".into(), self.text.adapter.down.clone());
        bindings.insert("txt.b".into(), self.text.adapter.up.clone());
    }

    fn tower_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        prefix: &str,
        plan: GraphPlan,
    ) -> NodeId {
        let leaf = |g: &mut Graph, name: String, trainable: bool| {
            if trainable {
                g.param(name)
            } else {
                g.input(name)
            }
        };
        let w1 = leaf(g, format!("{prefix}.w1"), plan.train_base);
        let w2 = leaf(g, format!("{prefix}.w2"), plan.train_base);
        let a = g.input(format!("{prefix}.a"));
        let b = leaf(g, format!("{prefix}.b"), plan.train_adapters);
        let h_lin = g.matmul(w1, x);
        let h = g.relu(h_lin);
        let delta = g.matmul(b, a);
        let w2eff = g.add(w2, delta);
        g.matmul(w2eff, h)
    }

    /// Add the visual forward pass for input node `x` to `g`.
    pub fn visual_forward_graph(&self, g: &mut Graph, x: NodeId, plan: GraphPlan) -> VisualNodes {
        let r = self.tower_graph(g, x, "vis", plan);
        let raw_norm = g.normalize(r);
        let proj = if plan.train_base {
            g.param("proj")
        } else {
            g.input("proj")
        };
        let v = g.matmul(proj, r);
        let joint_norm = g.normalize(v);
        VisualNodes {
            raw_norm,
            joint_norm,
        }
    }

    /// Add the text forward pass for a registered class to `g`; the class
    /// token is embedded as a constant. Returns the normalized embedding node.
    pub fn text_forward_graph(
        &self,
        g: &mut Graph,
        class_id: usize,
        plan: GraphPlan,
    ) -> Result<NodeId, ModelError> {
        let token = self.class_token(class_id)?.clone();
        let x = g.constant(token);
        let u = self.tower_graph(g, x, "txt", plan);
        Ok(g.normalize(u))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Stable temperature-scaled softmax over raw logits.
pub fn probs_from_logits(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&s| s / tau).collect();
    softmax_slice(&scaled)
}
