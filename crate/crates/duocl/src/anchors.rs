//! Seed selection and dual-targeted projected gradient descent.
//!
//! Seeds are the incoming samples most aligned with an old class under the
//! frozen teacher. Each seed is perturbed within an L-infinity budget so the
//! teacher maps it toward that old class's text semantics while staying close
//! to the class's raw-space prototype. The resulting anchors carry their
//! target class for distillation and drift estimation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::config::DpgdConfig;
use crate::error::PipelineError;
use crate::graph::NodeId;
use crate::model::{probs_from_logits, GraphPlan, Snapshot};
use crate::stream::Sample;
use crate::{Graph, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seed {
    /// Index into the task's train split.
    pub sample_index: usize,
    pub x: Tensor,
    pub true_new_class: usize,
    pub target_old_class: usize,
    /// Teacher cross-modal cosine toward the target class.
    pub seed_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Anchor {
    pub target_class: usize,
    pub seed_index: usize,
    pub delta: Tensor,
    pub x_adv: Tensor,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn for_class(&self, c: usize) -> Vec<&Anchor> {
        self.anchors
            .iter()
            .filter(|a| a.target_class == c)
            .collect()
    }

    pub fn target_classes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.anchors.iter().map(|a| a.target_class).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.anchors).expect("anchors serialize")
    }
}

/// Teacher cross-modal similarity of a sample toward an old class.
pub fn seed_score(teacher: &Snapshot, x: &Tensor, c: usize) -> Result<f64, PipelineError> {
    let v = teacher.encode_visual(x)?;
    let u = teacher.encode_text(c)?;
    Ok(v.dot(&u))
}

/// Top-`k_seed` samples per old class by teacher similarity, ties broken by
/// smaller dataset index. Empty `c_old` disables the anchor machinery.
pub fn select_seeds(
    teacher: &Snapshot,
    data: &[Sample],
    c_old: &[usize],
    k_seed: usize,
) -> Result<BTreeMap<usize, Vec<Seed>>, PipelineError> {
    let mut out = BTreeMap::new();
    if c_old.is_empty() {
        return Ok(out);
    }
    // score every sample once per class; embeddings are reused across classes
    let visuals: Vec<Tensor> = data
        .iter()
        .map(|s| teacher.encode_visual(&s.x))
        .collect::<Result<_, _>>()?;
    for &c in c_old {
        let u = teacher.encode_text(c)?;
        let mut scored: Vec<(usize, f64)> = visuals.iter().map(|v| v.dot(&u)).enumerate().collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("scores are finite")
                .then(a.0.cmp(&b.0))
        });
        let seeds = scored
            .into_iter()
            .take(k_seed)
            .map(|(i, score)| Seed {
                sample_index: i,
                x: data[i].x.clone(),
                true_new_class: data[i].label,
                target_old_class: c,
                seed_score: score,
            })
            .collect();
        out.insert(c, seeds);
    }
    Ok(out)
}

/// Negative log teacher softmax over the old classes at the target class.
pub fn adv_loss(
    teacher: &Snapshot,
    x_pert: &Tensor,
    c: usize,
    c_old: &[usize],
    tau: f64,
) -> Result<f64, PipelineError> {
    let logits = teacher.clip_logits(x_pert, c_old)?;
    let probs = probs_from_logits(&logits, tau);
    let idx = c_old
        .iter()
        .position(|&j| j == c)
        .expect("target class is an old class");
    Ok(-probs[idx].ln())
}

/// Raw-space prototype attraction: 1 - r̄(x)ᵀ μ.
pub fn visual_anchor_loss(
    teacher: &Snapshot,
    x_pert: &Tensor,
    prototype: &Tensor,
) -> Result<f64, PipelineError> {
    let r = teacher.encode_raw(x_pert)?;
    Ok(1.0 - r.dot(prototype))
}

/// Text-targeting term plus `lambda_p` times the prototype attraction term.
pub fn dual_objective(
    teacher: &Snapshot,
    x_pert: &Tensor,
    c: usize,
    c_old: &[usize],
    prototype: Option<&Tensor>,
    cfg: &DpgdConfig,
) -> Result<f64, PipelineError> {
    let mut total = adv_loss(teacher, x_pert, c, c_old, cfg.temperature)?;
    if cfg.lambda_p > 0.0 {
        let proto = prototype.ok_or(PipelineError::MissingPrototype(c))?;
        total += cfg.lambda_p * visual_anchor_loss(teacher, x_pert, proto)?;
    }
    Ok(total)
}

/// Componentwise clamp onto the L-infinity ball of radius `eps`.
pub fn project_linf(delta: &Tensor, eps: f64) -> Tensor {
    Tensor::vector(delta.data().iter().map(|&v| v.clamp(-eps, eps)).collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Differentiable targeting objective for one (target class, old-class set),
/// reusable across seeds and iterations. Leaves: `x0` (seed), `delta`.
pub struct DpgdObjective {
    graph: Graph,
    root: NodeId,
    lambda_p: f64,
}

impl DpgdObjective {
    pub fn new(
        teacher: &Snapshot,
        c: usize,
        c_old: &[usize],
        prototype: Option<&Tensor>,
        cfg: &DpgdConfig,
    ) -> Result<Self, PipelineError> {
        let mut g = Graph::new();
        let x0 = g.input("x0");
        let delta = g.param("delta");
        let x = g.add(x0, delta);
        let nodes = teacher
            .model()
            .visual_forward_graph(&mut g, x, GraphPlan::default());

        // teacher text embeddings are fixed during the attack
        let mut text_rows = Vec::with_capacity(c_old.len());
        for &j in c_old {
            text_rows.push(teacher.encode_text(j)?);
        }
        let d = text_rows[0].len();
        let flat: Vec<f64> = text_rows.iter().flat_map(|u| u.data().to_vec()).collect();
        let text_matrix = Tensor::matrix(c_old.len(), d, flat).expect("row lengths agree");
        let u_mat = g.constant(text_matrix);

        let logits = g.matmul(u_mat, nodes.joint_norm);
        let scaled = g.scale(logits, cfg.temperature.recip());
        let logp = g.log_softmax(scaled);
        let idx = c_old
            .iter()
            .position(|&j| j == c)
            .expect("target class is an old class");
        let mut one_hot = vec![0.0; c_old.len()];
        one_hot[idx] = 1.0;
        let oh = g.constant(Tensor::vector(one_hot));
        let picked = g.dot(oh, logp);
        let text_term = g.scale(picked, -1.0);

        let root = if cfg.lambda_p > 0.0 {
            let proto = prototype.ok_or(PipelineError::MissingPrototype(c))?;
            let mu = g.constant(proto.clone());
            let cos = g.dot(nodes.raw_norm, mu);
            let one = g.scalar_const(1.0);
            let vis_term = g.sub(one, cos);
            let weighted = g.scale(vis_term, cfg.lambda_p);
            g.add(text_term, weighted)
        } else {
            text_term
        };

        Ok(DpgdObjective {
            graph: g,
            root,
            lambda_p: cfg.lambda_p,
        })
    }

    fn bindings(&self, teacher: &Snapshot, x0: &Tensor, delta: &Tensor) -> HashMap<String, Tensor> {
        let mut b = HashMap::new();
        teacher.model().weight_bindings(&mut b);
        b.insert("x0".into(), x0.clone());
        b.insert("delta".into(), delta.clone());
        b
    }

    pub fn value(
        &self,
        teacher: &Snapshot,
        x0: &Tensor,
        delta: &Tensor,
    ) -> Result<f64, PipelineError> {
        let eval = self.graph.evaluate(&self.bindings(teacher, x0, delta))?;
        Ok(eval.value(self.root).item())
    }

    pub fn grad_delta(
        &self,
        teacher: &Snapshot,
        x0: &Tensor,
        delta: &Tensor,
    ) -> Result<Tensor, PipelineError> {
        let bindings = self.bindings(teacher, x0, delta);
        let eval = self.graph.evaluate(&bindings)?;
        let grads = self.graph.gradient(&eval, self.root)?;
        Ok(grads["delta"].clone())
    }

    pub fn lambda_p(&self) -> f64 {
        self.lambda_p
    }
}

/// One sign-gradient step followed by projection onto the budget.
pub fn pgd_step(
    objective: &DpgdObjective,
    teacher: &Snapshot,
    x0: &Tensor,
    delta: &Tensor,
    cfg: &DpgdConfig,
) -> Result<Tensor, PipelineError> {
    let grad = objective.grad_delta(teacher, x0, delta)?;
    let stepped = Tensor::vector(
        delta
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&d, &g)| d - cfg.gamma * sign(g))
            .collect(),
    );
    Ok(project_linf(&stepped, cfg.epsilon))
}

/// Build the full anchor set: `k_seed` anchors per old class, each the result
/// of `k_adv` sign steps from a zero perturbation.
pub fn build_anchor_set(
    teacher: &Snapshot,
    data: &[Sample],
    c_old: &[usize],
    prototypes: &BTreeMap<usize, Tensor>,
    cfg: &DpgdConfig,
) -> Result<AnchorSet, PipelineError> {
    let mut anchors = Vec::new();
    let seeds = select_seeds(teacher, data, c_old, cfg.k_seed)?;
    for (&c, class_seeds) in &seeds {
        let prototype = prototypes.get(&c);
        if cfg.lambda_p > 0.0 && prototype.is_none() {
            return Err(PipelineError::MissingPrototype(c));
        }
        let objective = DpgdObjective::new(teacher, c, c_old, prototype, cfg)?;
        for seed in class_seeds {
            let mut delta = Tensor::vector(vec![0.0; seed.x.len()]);
            for _ in 0..cfg.k_adv {
                delta = pgd_step(&objective, teacher, &seed.x, &delta, cfg)?;
            }
            anchors.push(Anchor {
                target_class: c,
                seed_index: seed.sample_index,
                x_adv: seed.x.add(&delta),
                delta,
            });
        }
    }
    Ok(AnchorSet { anchors })
}
