//! Prototype lifecycle: estimation for new classes, anchor-induced drift
//! transfer for old classes, and dual-path fused inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anchors::Anchor;
use crate::error::PipelineError;
use crate::model::{DualTowerModel, Snapshot};
use crate::stream::Sample;
use crate::Tensor;

/// One unit-norm raw-space vector per seen class, versioned per task.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrototypeBank {
    prototypes: BTreeMap<usize, Tensor>,
    pub task_version: usize,
}

impl PrototypeBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, class: usize) -> Result<&Tensor, PipelineError> {
        self.prototypes
            .get(&class)
            .ok_or(PipelineError::MissingPrototype(class))
    }

    pub fn classes(&self) -> Vec<usize> {
        self.prototypes.keys().copied().collect()
    }

    pub fn map(&self) -> &BTreeMap<usize, Tensor> {
        &self.prototypes
    }

    pub fn insert(&mut self, class: usize, prototype: Tensor) {
        self.prototypes.insert(class, prototype);
    }
}

/// Per-class drift statistics gathered from anchors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftEstimate {
    pub class: usize,
    /// Weighted average raw-space displacement.
    pub displacement: Tensor,
    /// Anchor-prototype proximity gate.
    pub gate: f64,
    /// Per-anchor reliability weights.
    pub weights: Vec<f64>,
    /// True when non-positive reliability mass forced uniform weights.
    pub uniform_fallback: bool,
}

/// Result of advancing the bank across a task boundary.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub bank: PrototypeBank,
    /// Old classes whose transferred prototype degenerated and was kept as-is.
    pub degenerate_classes: Vec<usize>,
    pub drifts: Vec<DriftEstimate>,
}

/// Mean of normalized raw features per class, renormalized to the sphere.
pub fn estimate_new_prototypes(
    model: &DualTowerModel,
    data: &[Sample],
    classes: &[usize],
) -> Result<BTreeMap<usize, Tensor>, PipelineError> {
    let mut out = BTreeMap::new();
    for &c in classes {
        let mut sum: Option<Tensor> = None;
        for sample in data.iter().filter(|s| s.label == c) {
            let r = model.encode_raw(&sample.x)?;
            sum = Some(match sum {
                Some(acc) => acc.add(&r),
                None => r,
            });
        }
        let sum = sum.ok_or(PipelineError::EmptyClass(c))?;
        let (proto, _) = sum.l2_normalize();
        out.insert(c, proto);
    }
    Ok(out)
}

/// Raw-space displacement of each anchor between teacher and updated model.
pub fn anchor_displacements(
    teacher: &Snapshot,
    model: &DualTowerModel,
    anchors: &[&Anchor],
) -> Result<Vec<Tensor>, PipelineError> {
    anchors
        .iter()
        .map(|a| {
            let after = model.encode_raw(&a.x_adv)?;
            let before = teacher.encode_raw(&a.x_adv)?;
            Ok(after.sub(&before))
        })
        .collect()
}

/// Teacher-space anchor-prototype cosines and their normalization to weights.
/// A non-positive score sum falls back to uniform weights.
pub fn reliability_weights(
    teacher: &Snapshot,
    anchors_of_c: &[&Anchor],
    prototype: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>, bool), PipelineError> {
    let scores: Vec<f64> = anchors_of_c
        .iter()
        .map(|a| Ok(teacher.encode_raw(&a.x_adv)?.dot(prototype)))
        .collect::<Result<_, PipelineError>>()?;
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        let n = scores.len() as f64;
        let weights = vec![1.0 / n; scores.len()];
        return Ok((scores, weights, true));
    }
    let weights = scores.iter().map(|s| s / total).collect();
    Ok((scores, weights, false))
}

/// Weighted average displacement.
pub fn class_drift(displacements: &[Tensor], weights: &[f64]) -> Tensor {
    debug_assert_eq!(displacements.len(), weights.len());
    let mut acc = displacements[0].scale(weights[0]);
    for (d, &w) in displacements.iter().zip(weights).skip(1) {
        acc = acc.add(&d.scale(w));
    }
    acc
}

/// Unweighted mean teacher anchor-prototype cosine.
pub fn proximity_gate(
    teacher: &Snapshot,
    anchors_of_c: &[&Anchor],
    prototype: &Tensor,
) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for a in anchors_of_c {
        total += teacher.encode_raw(&a.x_adv)?.dot(prototype);
    }
    Ok(total / anchors_of_c.len() as f64)
}

/// Move old prototypes along gated drift and merge new-class prototypes.
/// A transferred prototype whose norm degenerates keeps its previous value.
pub fn transfer_prototypes(
    bank: &PrototypeBank,
    drifts: &[DriftEstimate],
    new_prototypes: BTreeMap<usize, Tensor>,
) -> TransferOutcome {
    let mut next = PrototypeBank {
        prototypes: BTreeMap::new(),
        task_version: bank.task_version + 1,
    };
    let mut degenerate_classes = Vec::new();
    let drift_by_class: BTreeMap<usize, &DriftEstimate> =
        drifts.iter().map(|d| (d.class, d)).collect();
    for (&c, old) in &bank.prototypes {
        let transferred = match drift_by_class.get(&c) {
            // exactly zero drift (an unchanged model) must leave the stored
            // prototype bit-identical, so skip the renormalization
            Some(d) if d.displacement.scale(d.gate).norm() == 0.0 => old.clone(),
            Some(d) => {
                let moved = old.add(&d.displacement.scale(d.gate));
                if moved.norm() < 1e-8 {
                    degenerate_classes.push(c);
                    old.clone()
                } else {
                    moved.l2_normalize().0
                }
            }
            None => old.clone(),
        };
        next.prototypes.insert(c, transferred);
    }
    for (c, proto) in new_prototypes {
        next.prototypes.insert(c, proto);
    }
    TransferOutcome {
        bank: next,
        degenerate_classes,
        drifts: drifts.to_vec(),
    }
}

/// Full bank advance for one task boundary: estimate drift for every old
/// class that received anchors, then transfer and merge.
pub fn advance_bank(
    bank: &PrototypeBank,
    teacher: &Snapshot,
    model: &DualTowerModel,
    anchors_by_class: &BTreeMap<usize, Vec<&Anchor>>,
    new_prototypes: BTreeMap<usize, Tensor>,
) -> Result<TransferOutcome, PipelineError> {
    let mut drifts = Vec::new();
    for (&c, class_anchors) in anchors_by_class {
        if class_anchors.is_empty() {
            continue;
        }
        let prototype = bank.get(c)?;
        let displacements = anchor_displacements(teacher, model, class_anchors)?;
        let (_, weights, uniform_fallback) =
            reliability_weights(teacher, class_anchors, prototype)?;
        let displacement = class_drift(&displacements, &weights);
        let gate = proximity_gate(teacher, class_anchors, prototype)?;
        drifts.push(DriftEstimate {
            class: c,
            displacement,
            gate,
            weights,
            uniform_fallback,
        });
    }
    Ok(transfer_prototypes(bank, &drifts, new_prototypes))
}

/// Fused logits s_clip + beta * s_v over `c_seen` and the argmax prediction,
/// ties broken toward the smallest class id.
pub fn dual_path_predict(
    model: &DualTowerModel,
    bank: &PrototypeBank,
    x: &Tensor,
    c_seen: &[usize],
    beta: f64,
) -> Result<(Vec<f64>, usize), PipelineError> {
    let clip_logits = model.clip_logits(x, c_seen)?;
    let fused = if beta == 0.0 {
        clip_logits
    } else {
        let r = model.encode_raw(x)?;
        c_seen
            .iter()
            .zip(&clip_logits)
            .map(|(&c, &s_clip)| Ok(s_clip + beta * r.dot(bank.get(c)?)))
            .collect::<Result<Vec<f64>, PipelineError>>()?
    };
    let mut best = 0;
    for i in 1..fused.len() {
        if fused[i] > fused[best] {
            best = i;
        }
    }
    Ok((fused, c_seen[best]))
}
