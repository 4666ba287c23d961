//! Continual-learning evaluation: the accuracy matrix with Avg/Last, forward
//! and backward transfer, forgetting, and the JSD-based drift probe.
//! All divergences are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{MetricsError, PipelineError};
use crate::model::{DualTowerModel, Snapshot};
use crate::stream::Sample;
use crate::training::kl_div;

/// R[i][j] = accuracy on task j's test set after training stage i, defined
/// for j <= i plus the pre-training evaluations R[j-1][j] used by FWT.
/// Stages also record the union accuracy over all classes seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub stage: usize,
    pub task: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub num_tasks: usize,
    entries: Vec<MatrixEntry>,
    /// Union-test-set accuracy after each completed stage.
    union_acc: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            num_tasks,
            entries: Vec::new(),
            union_acc: Vec::new(),
        }
    }

    pub fn set(&mut self, stage: usize, task: usize, accuracy: f64) {
        debug_assert!((0.0..=1.0).contains(&accuracy));
        match self
            .entries
            .iter_mut()
            .find(|e| e.stage == stage && e.task == task)
        {
            Some(e) => e.accuracy = accuracy,
            None => self.entries.push(MatrixEntry {
                stage,
                task,
                accuracy,
            }),
        }
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.stage == stage && e.task == task)
            .map(|e| e.accuracy)
    }

    pub fn push_union_accuracy(&mut self, accuracy: f64) {
        debug_assert!((0.0..=1.0).contains(&accuracy));
        self.union_acc.push(accuracy);
    }

    pub fn union_accuracies(&self) -> &[f64] {
        &self.union_acc
    }

    /// Completed stages, by union evaluations recorded.
    pub fn stages(&self) -> usize {
        self.union_acc.len()
    }
}

fn require_stages(have: usize, need: usize) -> Result<(), MetricsError> {
    if have < need {
        return Err(MetricsError::TooFewTasks { need, have });
    }
    Ok(())
}

fn entry(m: &AccuracyMatrix, stage: usize, task: usize) -> Result<f64, MetricsError> {
    m.get(stage, task)
        .ok_or(MetricsError::MissingPreEval { i: stage, j: task })
}

/// (Avg, Last) over `t` completed stages: Last is the final union accuracy,
/// Avg the mean union accuracy across stages.
pub fn avg_last(m: &AccuracyMatrix, t: usize) -> Result<(f64, f64), MetricsError> {
    require_stages(t.min(m.stages()), 1)?;
    require_stages(m.stages(), t)?;
    let avg = m.union_acc[..t].iter().sum::<f64>() / t as f64;
    Ok((avg, m.union_acc[t - 1]))
}

/// Mean over j < t-1 of R[t-1][j] - R[j][j] (stages 0-indexed).
pub fn bwt(m: &AccuracyMatrix, t: usize) -> Result<f64, MetricsError> {
    require_stages(t, 2)?;
    let last = t - 1;
    let mut total = 0.0;
    for j in 0..last {
        total += entry(m, last, j)? - entry(m, j, j)?;
    }
    Ok(total / last as f64)
}

/// Mean over j >= 1 of the pre-training evaluations R[j-1][j].
pub fn fwt(m: &AccuracyMatrix, t: usize) -> Result<f64, MetricsError> {
    require_stages(t, 2)?;
    let mut total = 0.0;
    for j in 1..t {
        total += entry(m, j - 1, j)?;
    }
    Ok(total / (t - 1) as f64)
}

/// Mean over j < t-1 of (max over stages i in j..t of R[i][j]) - R[t-1][j].
pub fn forgetting(m: &AccuracyMatrix, t: usize) -> Result<f64, MetricsError> {
    require_stages(t, 2)?;
    let last = t - 1;
    let mut total = 0.0;
    for j in 0..last {
        let mut best = f64::NEG_INFINITY;
        for i in j..t {
            best = best.max(entry(m, i, j)?);
        }
        total += best - entry(m, last, j)?;
    }
    Ok(total / last as f64)
}

fn check_distribution(p: &[f64]) -> Result<(), MetricsError> {
    if p.is_empty() {
        return Err(MetricsError::InvalidDistribution("empty".into()));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(MetricsError::InvalidDistribution(
            "negative or non-finite mass".into(),
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(MetricsError::InvalidDistribution(format!(
            "mass sums to {sum}"
        )));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats; symmetric, bounded by ln 2.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    check_distribution(p)?;
    check_distribution(q)?;
    if p.len() != q.len() {
        return Err(MetricsError::InvalidDistribution(format!(
            "lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl_div(p, &m) + 0.5 * kl_div(q, &m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftPartition {
    /// Own-class teacher cosine below the cohort median.
    Boundary,
    Core,
}

/// Per-sample cross-modal drift measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftRecord {
    pub sample_id: usize,
    pub own_class_cosine: f64,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub jsd: f64,
    pub partition: DriftPartition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftSummary {
    pub boundary_mean_jsd: f64,
    pub core_mean_jsd: f64,
    pub boundary_count: usize,
    pub core_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftProbe {
    pub records: Vec<DriftRecord>,
    pub summary: DriftSummary,
}

/// Measure per-sample JSD between the teacher's and the updated model's
/// cross-modal distributions over a fixed class set, then split the cohort at
/// the median own-class teacher cosine into boundary and core halves.
pub fn drift_probe(
    teacher: &Snapshot,
    model: &DualTowerModel,
    samples: &[Sample],
    class_set: &[usize],
    tau: f64,
) -> Result<DriftProbe, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::EmptySampleSet);
    }
    let mut records = Vec::with_capacity(samples.len());
    for (sample_id, s) in samples.iter().enumerate() {
        let pre = teacher.clip_probs(&s.x, class_set, tau)?;
        let post = model.clip_probs(&s.x, class_set, tau)?;
        let own_class_cosine = teacher
            .encode_visual(&s.x)?
            .dot(&teacher.encode_text(s.label)?);
        let jsd = jsd(&pre, &post)?;
        records.push(DriftRecord {
            sample_id,
            own_class_cosine,
            pre,
            post,
            jsd,
            partition: DriftPartition::Core,
        });
    }

    // median split with deterministic tie-breaking: the lower half of the
    // cosine order is the boundary, so partition sizes differ by at most one
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .own_class_cosine
            .partial_cmp(&records[b].own_class_cosine)
            .unwrap()
            .then(a.cmp(&b))
    });
    let boundary_count = records.len() / 2;
    for (rank, &idx) in order.iter().enumerate() {
        records[idx].partition = if rank < boundary_count {
            DriftPartition::Boundary
        } else {
            DriftPartition::Core
        };
    }

    let mean_of = |part: DriftPartition| {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.partition == part)
            .map(|r| r.jsd)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let summary = DriftSummary {
        boundary_mean_jsd: mean_of(DriftPartition::Boundary),
        core_mean_jsd: mean_of(DriftPartition::Core),
        boundary_count,
        core_count: records.len() - boundary_count,
    };
    Ok(DriftProbe { records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::SnapshotLabel;
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(seed: u64, t: usize) -> AccuracyMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = AccuracyMatrix::new(t);
        for i in 0..t {
            for j in 0..=i {
                m.set(i, j, rng.gen_range(0.0..1.0));
            }
            if i + 1 < t {
                m.set(i, i + 1, rng.gen_range(0.0..1.0));
            }
            m.push_union_accuracy(rng.gen_range(0.0..1.0));
        }
        m
    }

    #[test]
    fn avg_last_single_stage() {
        let mut m = AccuracyMatrix::new(1);
        m.set(0, 0, 0.9);
        m.push_union_accuracy(0.9);
        let (avg, last) = avg_last(&m, 1).unwrap();
        assert_eq!(avg, 0.9);
        assert_eq!(last, 0.9);
    }

    #[test]
    fn avg_is_mean_of_stage_accuracies() {
        let mut m = AccuracyMatrix::new(2);
        m.push_union_accuracy(0.9);
        m.push_union_accuracy(0.8);
        let (avg, last) = avg_last(&m, 2).unwrap();
        assert!((avg - 0.85).abs() < 1e-15);
        assert_eq!(last, 0.8);
    }

    #[test]
    fn avg_last_matches_scalar_recomputation() {
        let m = random_matrix(1, 4);
        let (avg, last) = avg_last(&m, 4).unwrap();
        let u = m.union_accuracies();
        let expected_avg = (u[0] + u[1] + u[2] + u[3]) / 4.0;
        assert!((avg - expected_avg).abs() < 1e-12);
        assert_eq!(last, u[3]);
    }

    #[test]
    fn zero_stages_is_error() {
        let m = AccuracyMatrix::new(3);
        assert!(avg_last(&m, 0).is_err());
        assert!(bwt(&m, 1).is_err());
        assert!(fwt(&m, 1).is_err());
        assert!(forgetting(&m, 1).is_err());
    }

    #[test]
    fn bwt_single_term() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 0.9);
        m.set(1, 0, 0.8);
        m.set(1, 1, 0.7);
        assert!((bwt(&m, 2).unwrap() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn bwt_zero_without_degradation() {
        let mut m = AccuracyMatrix::new(3);
        for i in 0..3 {
            for j in 0..=i {
                m.set(i, j, 0.8);
            }
        }
        assert_eq!(bwt(&m, 3).unwrap(), 0.0);
    }

    #[test]
    fn bwt_matches_brute_force() {
        let m = random_matrix(2, 5);
        let got = bwt(&m, 5).unwrap();
        let mut expected = 0.0;
        for j in 0..4 {
            expected += m.get(4, j).unwrap() - m.get(j, j).unwrap();
        }
        expected /= 4.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn fwt_hand_example() {
        let mut m = AccuracyMatrix::new(3);
        m.set(0, 1, 0.6);
        m.set(1, 2, 0.8);
        assert!((fwt(&m, 3).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn fwt_missing_pre_eval_is_error() {
        let mut m = AccuracyMatrix::new(3);
        m.set(0, 1, 0.6);
        assert!(matches!(
            fwt(&m, 3),
            Err(MetricsError::MissingPreEval { i: 1, j: 2 })
        ));
    }

    #[test]
    fn forgetting_hand_example() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 0.9);
        m.set(1, 0, 0.7);
        m.set(1, 1, 0.8);
        assert!((forgetting(&m, 2).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn forgetting_zero_for_nondecreasing_columns() {
        let mut m = AccuracyMatrix::new(3);
        for i in 0..3 {
            for j in 0..=i {
                m.set(i, j, 0.5 + 0.1 * i as f64);
            }
        }
        assert_eq!(forgetting(&m, 3).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_matches_max_scan_oracle() {
        let m = random_matrix(3, 6);
        let got = forgetting(&m, 6).unwrap();
        let mut expected = 0.0;
        for j in 0..5 {
            let mut best = f64::NEG_INFINITY;
            for i in j..6 {
                best = best.max(m.get(i, j).unwrap());
            }
            expected += best - m.get(5, j).unwrap();
        }
        expected /= 5.0;
        assert!((got - expected).abs() < 1e-12);
        assert!(got >= 0.0);
    }

    #[test]
    fn forgetting_equals_negated_bwt_for_monotone_decay() {
        // columns non-increasing after their diagonal: the max is the diagonal
        let mut m = AccuracyMatrix::new(4);
        for i in 0..4 {
            for j in 0..=i {
                m.set(i, j, 0.9 - 0.05 * (i - j) as f64);
            }
        }
        let f = forgetting(&m, 4).unwrap();
        let b = bwt(&m, 4).unwrap();
        assert!((f + b).abs() < 1e-12);
    }

    #[test]
    fn jsd_basic_values() {
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let max = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((max - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn jsd_symmetric_bounded_and_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let draw = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect::<Vec<f64>>()
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            let a = jsd(&p, &q).unwrap();
            let b = jsd(&q, &p).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!((0.0..=2.0f64.ln() + 1e-12).contains(&a));

            // independent scalar recomputation
            let mut expected = 0.0;
            for i in 0..p.len() {
                let m = 0.5 * (p[i] + q[i]);
                expected += 0.5 * p[i] * (p[i] / m).ln() + 0.5 * q[i] * (q[i] / m).ln();
            }
            assert!((a - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn jsd_rejects_invalid_distributions() {
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[-0.5, 1.5], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
        assert!(jsd(&[], &[]).is_err());
    }

    fn toy_model(seed: u64, classes: usize) -> DualTowerModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DualTowerModel::new(ModelConfig::default(), &mut rng);
        for c in 0..classes {
            m.register_class(c, &mut rng);
        }
        m
    }

    fn random_samples(seed: u64, n: usize, classes: &[usize]) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Sample {
                x: Tensor::vector((0..32).map(|_| rng.gen_range(0.0..1.0)).collect()),
                label: classes[i % classes.len()],
            })
            .collect()
    }

    #[test]
    fn identical_models_have_zero_drift() {
        let m = toy_model(5, 4);
        let teacher = m.take_snapshot(SnapshotLabel::TeacherPrevTask);
        let samples = random_samples(6, 9, &[0, 1, 2, 3]);
        let probe = drift_probe(&teacher, &m, &samples, &[0, 1, 2, 3], 0.07).unwrap();
        for r in &probe.records {
            assert!(r.jsd.abs() < 1e-12);
        }
        assert_eq!(probe.summary.boundary_count, 4);
        assert_eq!(probe.summary.core_count, 5);
    }

    #[test]
    fn drift_positive_after_update_and_split_balanced() {
        let mut m = toy_model(7, 4);
        let teacher = m.take_snapshot(SnapshotLabel::TeacherPrevTask);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in m.visual.adapter.up_mut().data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let samples = random_samples(9, 20, &[0, 1, 2, 3]);
        let probe = drift_probe(&teacher, &m, &samples, &[0, 1, 2, 3], 0.07).unwrap();
        assert!(probe.records.iter().any(|r| r.jsd > 0.0));
        let diff = probe.summary.boundary_count.abs_diff(probe.summary.core_count);
        assert!(diff <= 1);
        // boundary holds the lower cosines
        let max_boundary = probe
            .records
            .iter()
            .filter(|r| r.partition == DriftPartition::Boundary)
            .map(|r| r.own_class_cosine)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_core = probe
            .records
            .iter()
            .filter(|r| r.partition == DriftPartition::Core)
            .map(|r| r.own_class_cosine)
            .fold(f64::INFINITY, f64::min);
        assert!(max_boundary <= min_core);
    }

    #[test]
    fn empty_sample_set_rejected() {
        let m = toy_model(10, 2);
        let teacher = m.take_snapshot(SnapshotLabel::TeacherPrevTask);
        assert!(matches!(
            drift_probe(&teacher, &m, &[], &[0, 1], 0.07),
            Err(PipelineError::EmptySampleSet)
        ));
    }
}
