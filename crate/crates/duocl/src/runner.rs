//! End-to-end experiment runner: per-task loop over the synthetic stream,
//! ablation grid, and the perturbation-iteration sweep. Stages are strictly
//! sequential; learning at stage t sees only task t's train split through the
//! provider interface.

use std::collections::BTreeMap;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::anchors::{build_anchor_set, Anchor, AnchorSet};
use crate::config::{ExperimentConfig, MethodFlags};
use crate::error::{PipelineError, RunnerError};
use crate::metrics::{
    avg_last, bwt, drift_probe, forgetting, fwt, AccuracyMatrix, DriftProbe,
};
use crate::model::{probs_from_logits, DualTowerModel, SnapshotLabel};
use crate::prototypes::{
    dual_path_predict, estimate_new_prototypes, transfer_prototypes, advance_bank, PrototypeBank,
};
use crate::stream::{domain, generate_stream, generate_pretrain_set, sub_rng, Sample, TaskProvider};
use crate::training::{
    build_text_subgraphs, pretrain, register_classes, train_task, StepRecord,
};

/// Headline continual-learning metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub avg: f64,
    pub last: f64,
    pub fwt: f64,
    pub bwt: f64,
    pub forgetting: f64,
}

/// Per-task anchor synthesis statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorStats {
    pub task: usize,
    pub count: usize,
    /// Mean teacher probability of each anchor's target old class.
    pub mean_target_prob: f64,
}

/// Complete provenance of one experiment run. Wall-clock time is kept out of
/// serialization so run artifacts are byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config_hash: String,
    pub flags: MethodFlags,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub metrics: MetricsSummary,
    /// Loss history per task, in stage order.
    pub task_histories: Vec<Vec<StepRecord>>,
    pub anchor_stats: Vec<AnchorStats>,
    /// Drift probes for stages 1..T: teacher before the stage vs the model
    /// after it, on all earlier tasks' test samples over the old class set.
    pub drift: Vec<DriftProbe>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Stable hash of the full configuration, for provenance records.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let encoded = serde_json::to_string(cfg).expect("config serializes");
    let mut h = DefaultHasher::new();
    encoded.hash(&mut h);
    format!("{:016x}", h.finish())
}

/// Initialize the model and run the base-alignment phase on a held-out split.
pub fn pretrained_base(cfg: &ExperimentConfig) -> Result<DualTowerModel, PipelineError> {
    let seed = cfg.stream.seed;
    let mut rng = sub_rng(seed, domain::MODEL_INIT, 0);
    let mut model = DualTowerModel::new(cfg.model.clone(), &mut rng);
    let data = generate_pretrain_set(
        cfg.pretrain.num_classes,
        cfg.pretrain.samples_per_class,
        cfg.model.input_dim,
        cfg.stream.cluster_spread,
        seed,
    );
    pretrain(&mut model, &data, &cfg.pretrain, seed)?;
    Ok(model)
}

fn accuracy(
    model: &DualTowerModel,
    bank: &PrototypeBank,
    samples: &[&Sample],
    class_set: &[usize],
    beta: f64,
) -> Result<f64, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::EmptySampleSet);
    }
    let mut correct = 0usize;
    for s in samples {
        let (_, pred) = dual_path_predict(model, bank, &s.x, class_set, beta)?;
        if pred == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn anchors_by_class(set: &AnchorSet) -> BTreeMap<usize, Vec<&Anchor>> {
    let mut out: BTreeMap<usize, Vec<&Anchor>> = BTreeMap::new();
    for a in &set.anchors {
        out.entry(a.target_class).or_default().push(a);
    }
    out
}

fn anchor_stats(
    task: usize,
    set: &AnchorSet,
    teacher: &crate::model::Snapshot,
    c_old: &[usize],
    tau: f64,
) -> Result<AnchorStats, PipelineError> {
    let mut total = 0.0;
    for a in &set.anchors {
        let probs = probs_from_logits(&teacher.clip_logits(&a.x_adv, c_old)?, tau);
        let pos = c_old
            .iter()
            .position(|&c| c == a.target_class)
            .expect("target class is an old class");
        total += probs[pos];
    }
    let count = set.anchors.len();
    Ok(AnchorStats {
        task,
        count,
        mean_target_prob: if count == 0 { 0.0 } else { total / count as f64 },
    })
}

/// Run the full per-task pipeline on an existing stream with a pretrained
/// base model. This is the core loop: snapshot the teacher, forge anchors,
/// freeze text subgraphs, train adapters, advance the prototype bank, then
/// evaluate the accuracy matrix and the drift probe.
pub fn run_with_base(
    provider: &impl TaskProvider,
    cfg: &ExperimentConfig,
    base: &DualTowerModel,
) -> Result<RunRecord, RunnerError> {
    let start = Instant::now();
    let seed = cfg.stream.seed;
    let flags = cfg.flags;
    let num_tasks = provider.num_tasks();

    let mut model = base.clone();
    let mut bank = PrototypeBank::new();
    let mut matrix = AccuracyMatrix::new(num_tasks);
    let mut task_histories = Vec::with_capacity(num_tasks);
    let mut stats = Vec::new();
    let mut drift = Vec::new();

    // effective weights: disabled components contribute nothing to the loss
    let mut train_cfg = cfg.train.clone();
    if !flags.acgd {
        train_cfg.lambda_acgd = 0.0;
    }
    if !flags.tsgr {
        train_cfg.lambda_gr = 0.0;
    }
    let beta = if flags.visual_branch {
        cfg.inference.beta
    } else {
        0.0
    };

    let mut seen: Vec<usize> = Vec::new();
    for t in 0..num_tasks {
        let c_t: Vec<usize> = provider.classes(t).to_vec();
        let c_old = seen.clone();
        register_classes(&mut model, c_t.iter().copied(), seed);
        seen.extend(c_t.iter().copied());
        seen.sort_unstable();

        // zero-shot pre-evaluation on the incoming task, before any update
        if t >= 1 {
            let samples: Vec<&Sample> = provider.test_split(t).iter().collect();
            let acc = accuracy(&model, &bank, &samples, &seen, 0.0)?;
            matrix.set(t - 1, t, acc);
        }

        let teacher = model.take_snapshot(SnapshotLabel::TeacherPrevTask);
        let train_split = provider.train_split(t);

        let need_anchors = t >= 1 && (flags.acgd || flags.prototype_transfer);
        let anchors = if need_anchors {
            let set = build_anchor_set(&teacher, train_split, &c_old, bank.map(), &cfg.dpgd)?;
            stats.push(anchor_stats(t, &set, &teacher, &c_old, cfg.dpgd.temperature)?);
            set
        } else {
            AnchorSet {
                anchors: Vec::new(),
            }
        };

        // G^0 is recovered at any point by zeroing the text adapter; class
        // tokens are seeded per class id, so this is stable across stages
        let subgraphs = if flags.tsgr {
            build_text_subgraphs(
                &model.text_reference(),
                &c_t,
                &seen,
                train_cfg.k_neighbors,
                train_cfg.tau_t,
            )?
        } else {
            Vec::new()
        };

        let mut rng = sub_rng(seed, domain::TASK_TRAINING, t as u64);
        let history = train_task(
            &mut model,
            train_split,
            &c_t,
            &c_old,
            &anchors,
            &teacher,
            &subgraphs,
            &train_cfg,
            &mut rng,
        )?;
        task_histories.push(history);

        // prototype lifecycle: estimate new classes, transfer old ones
        let new_protos = estimate_new_prototypes(&model, train_split, &c_t)?;
        let outcome = if flags.prototype_transfer && t >= 1 {
            advance_bank(
                &bank,
                &teacher,
                &model,
                &anchors_by_class(&anchors),
                new_protos,
            )?
        } else {
            transfer_prototypes(&bank, &[], new_protos)
        };
        bank = outcome.bank;

        // accuracy matrix row for this stage, plus the union accuracy
        let mut union: Vec<&Sample> = Vec::new();
        for j in 0..=t {
            let samples: Vec<&Sample> = provider.test_split(j).iter().collect();
            let acc = accuracy(&model, &bank, &samples, &seen, beta)?;
            matrix.set(t, j, acc);
            union.extend(provider.test_split(j).iter());
        }
        matrix.push_union_accuracy(accuracy(&model, &bank, &union, &seen, beta)?);

        if t >= 1 {
            let old_tests: Vec<Sample> = (0..t)
                .flat_map(|j| provider.test_split(j).iter().cloned())
                .collect();
            drift.push(drift_probe(
                &teacher,
                &model,
                &old_tests,
                &c_old,
                train_cfg.temperature,
            )?);
        }
    }

    let (avg, last) = avg_last(&matrix, num_tasks)?;
    let metrics = if num_tasks >= 2 {
        MetricsSummary {
            avg,
            last,
            fwt: fwt(&matrix, num_tasks)?,
            bwt: bwt(&matrix, num_tasks)?,
            forgetting: forgetting(&matrix, num_tasks)?,
        }
    } else {
        MetricsSummary {
            avg,
            last,
            fwt: 0.0,
            bwt: 0.0,
            forgetting: 0.0,
        }
    };

    Ok(RunRecord {
        label: flags.label(),
        config_hash: config_hash(cfg),
        flags,
        seed,
        matrix,
        metrics,
        task_histories,
        anchor_stats: stats,
        drift,
        wall_clock: start.elapsed(),
    })
}

/// Generate the stream, pretrain the base, and run one experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord, RunnerError> {
    cfg.validate().map_err(RunnerError::Config)?;
    let stream = generate_stream(&cfg.stream)?;
    let base = pretrained_base(cfg)?;
    run_with_base(&stream, cfg, &base)
}

/// The component ablation grid: incremental rows from the plain fine-tuning
/// baseline up to the full method.
pub fn ablation_grid() -> Vec<MethodFlags> {
    vec![
        MethodFlags::none(),
        MethodFlags {
            acgd: true,
            ..MethodFlags::none()
        },
        MethodFlags {
            acgd: true,
            tsgr: true,
            ..MethodFlags::none()
        },
        MethodFlags {
            acgd: true,
            tsgr: true,
            prototype_transfer: true,
            ..MethodFlags::none()
        },
        MethodFlags::default(),
    ]
}

/// Run the ablation grid on one shared stream and pretrained base.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>, RunnerError> {
    cfg.validate().map_err(RunnerError::Config)?;
    let stream = generate_stream(&cfg.stream)?;
    let base = pretrained_base(cfg)?;
    ablation_grid()
        .into_iter()
        .map(|flags| {
            let mut run_cfg = cfg.clone();
            run_cfg.flags = flags;
            run_with_base(&stream, &run_cfg, &base)
        })
        .collect()
}

/// Perturbation-iteration sweep values.
pub const KADV_SWEEP: [usize; 5] = [0, 5, 10, 20, 40];

/// Run the full method once per perturbation-iteration count, sharing the
/// stream and pretrained base across runs.
pub fn run_kadv_sweep(cfg: &ExperimentConfig) -> Result<Vec<(usize, RunRecord)>, RunnerError> {
    cfg.validate().map_err(RunnerError::Config)?;
    let stream = generate_stream(&cfg.stream)?;
    let base = pretrained_base(cfg)?;
    KADV_SWEEP
        .iter()
        .map(|&k| {
            let mut run_cfg = cfg.clone();
            run_cfg.dpgd.k_adv = k;
            Ok((k, run_with_base(&stream, &run_cfg, &base)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{PretrainConfig, StreamSpec, TrainConfig};
    use std::cell::RefCell;
    use std::collections::BTreeSet;

    fn small_cfg(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.stream = StreamSpec {
            num_tasks: 3,
            classes_per_task: 2,
            train_per_class: 16,
            test_per_class: 8,
            seed,
            ..StreamSpec::default()
        };
        cfg.pretrain = PretrainConfig {
            steps: 20,
            batch_size: 16,
            num_classes: 6,
            samples_per_class: 8,
            ..PretrainConfig::default()
        };
        cfg.train = TrainConfig {
            epochs: 2,
            batch_size: 16,
            anchor_batch_size: 4,
            ..TrainConfig::default()
        };
        cfg.dpgd.k_adv = 3;
        cfg.dpgd.k_seed = 2;
        cfg
    }

    #[test]
    fn run_produces_complete_record() {
        let cfg = small_cfg(50);
        let rec = run_experiment(&cfg).unwrap();
        assert_eq!(rec.matrix.stages(), 3);
        assert_eq!(rec.task_histories.len(), 3);
        assert_eq!(rec.drift.len(), 2);
        assert_eq!(rec.anchor_stats.len(), 2);
        // matrix fully populated including pre-evaluations
        for i in 0..3 {
            for j in 0..=i {
                assert!(rec.matrix.get(i, j).is_some());
            }
        }
        assert!(rec.matrix.get(0, 1).is_some());
        assert!(rec.matrix.get(1, 2).is_some());
        assert!((0.0..=1.0).contains(&rec.metrics.last));
        assert!(rec.metrics.forgetting >= 0.0);
    }

    #[test]
    fn identical_seeds_give_identical_metrics() {
        let cfg = small_cfg(51);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn baseline_skips_anchors_and_regularizers() {
        let mut cfg = small_cfg(52);
        cfg.flags = MethodFlags::none();
        let rec = run_experiment(&cfg).unwrap();
        assert!(rec.anchor_stats.is_empty());
        for h in &rec.task_histories {
            assert!(h.iter().all(|s| s.loss_acgd == 0.0 && s.loss_tsgr == 0.0));
        }
        assert_eq!(rec.label, "baseline");
    }

    #[test]
    fn full_method_exercises_all_terms() {
        let cfg = small_cfg(53);
        let rec = run_experiment(&cfg).unwrap();
        // from task 2 on, both auxiliary losses contribute
        let h = &rec.task_histories[1];
        assert!(h.iter().any(|s| s.loss_acgd > 0.0));
        assert!(h.iter().any(|s| s.loss_tsgr > 0.0));
        assert_eq!(rec.label, "acgd+tsgr+ptransfer+vbranch");
    }

    #[test]
    fn ablation_grid_shape() {
        let grid = ablation_grid();
        assert_eq!(grid.len(), 5);
        assert_eq!(grid[0], MethodFlags::none());
        assert_eq!(grid[4], MethodFlags::default());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = small_cfg(54);
        assert_eq!(config_hash(&cfg), config_hash(&cfg));
        let mut other = cfg.clone();
        other.train.lambda_acgd = 7.0;
        assert_ne!(config_hash(&cfg), config_hash(&other));
    }

    /// Provider double that records which train splits were requested.
    struct TrackingProvider<'a> {
        inner: &'a crate::stream::Stream,
        train_accesses: RefCell<Vec<usize>>,
    }

    impl TaskProvider for TrackingProvider<'_> {
        fn num_tasks(&self) -> usize {
            self.inner.num_tasks()
        }
        fn classes(&self, task: usize) -> &[usize] {
            self.inner.classes(task)
        }
        fn train_split(&self, task: usize) -> &[Sample] {
            self.train_accesses.borrow_mut().push(task);
            self.inner.train_split(task)
        }
        fn test_split(&self, task: usize) -> &[Sample] {
            self.inner.test_split(task)
        }
    }

    #[test]
    fn training_never_reads_earlier_train_splits() {
        let cfg = small_cfg(55);
        let stream = generate_stream(&cfg.stream).unwrap();
        let base = pretrained_base(&cfg).unwrap();
        let provider = TrackingProvider {
            inner: &stream,
            train_accesses: RefCell::new(Vec::new()),
        };
        run_with_base(&provider, &cfg, &base).unwrap();
        // accesses must be non-decreasing: stage t touches only split t
        let accesses = provider.train_accesses.borrow();
        assert!(!accesses.is_empty());
        let mut sorted = accesses.clone();
        sorted.sort_unstable();
        assert_eq!(*accesses, sorted);
        let distinct: BTreeSet<usize> = accesses.iter().copied().collect();
        assert_eq!(distinct.len(), cfg.stream.num_tasks);
    }
}
