//! Synthetic class-incremental stream generation and deterministic seeding.
//!
//! Each class is a Gaussian cluster around a unit direction, affinely mapped
//! into [0,1] per coordinate. A new class direction is a convex mix between a
//! fresh draw and a random earlier class direction with weight `overlap`,
//! which creates shared visual patterns across tasks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::StreamSpec;
use crate::error::StreamError;
use crate::model::random_unit_vector;
use crate::Tensor;

/// Seeding domains. One master seed fans out to independent sub-streams keyed
/// by (domain, index), so toggling one pipeline component never perturbs the
/// random draws of another.
pub mod domain {
    pub const STREAM: u64 = 1;
    pub const PRETRAIN_DATA: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const CLASS_TOKENS: u64 = 4;
    pub const PRETRAIN_STEPS: u64 = 5;
    pub const TASK_TRAINING: u64 = 6;
}

/// Independent RNG for (master, domain, index).
pub fn sub_rng(master: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&domain.to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskData {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stream {
    pub tasks: Vec<TaskData>,
    /// Generative unit direction per class, kept for diagnostics.
    pub class_directions: BTreeMap<usize, Tensor>,
}

impl Stream {
    /// Classes of tasks 0..=t in id order.
    pub fn classes_through(&self, t: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.tasks[..=t]
            .iter()
            .flat_map(|task| task.classes.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Read-only access to per-task splits. The experiment runner goes through
/// this trait so a test double can verify that learning stage t touches no
/// earlier task's train split.
pub trait TaskProvider {
    fn num_tasks(&self) -> usize;
    fn classes(&self, task: usize) -> &[usize];
    fn train_split(&self, task: usize) -> &[Sample];
    fn test_split(&self, task: usize) -> &[Sample];
}

impl TaskProvider for Stream {
    fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn classes(&self, task: usize) -> &[usize] {
        &self.tasks[task].classes
    }

    fn train_split(&self, task: usize) -> &[Sample] {
        &self.tasks[task].train
    }

    fn test_split(&self, task: usize) -> &[Sample] {
        &self.tasks[task].test
    }
}

/// Map a direction-space point into the [0,1] input box.
fn into_input_box(point: &[f64]) -> Tensor {
    Tensor::vector(
        point
            .iter()
            .map(|&v| (0.5 + 0.5 * v).clamp(0.0, 1.0))
            .collect(),
    )
}

fn sample_around(dir: &Tensor, spread: f64, rng: &mut impl Rng) -> Tensor {
    let point: Vec<f64> = dir
        .data()
        .iter()
        .map(|&d| {
            let z: f64 = rng.sample(StandardNormal);
            d + spread * z
        })
        .collect();
    into_input_box(&point)
}

/// Draw a class direction, mixing with a random earlier direction by `overlap`.
fn class_direction(
    rng: &mut impl Rng,
    dim: usize,
    overlap: f64,
    earlier: &[Tensor],
) -> Tensor {
    let fresh = random_unit_vector(rng, dim);
    if overlap == 0.0 || earlier.is_empty() {
        return fresh;
    }
    let pick = rng.gen_range(0..earlier.len());
    let mixed = fresh.scale(1.0 - overlap).add(&earlier[pick].scale(overlap));
    let (dir, _) = mixed.l2_normalize();
    dir
}

pub fn generate_stream(spec: &StreamSpec) -> Result<Stream, StreamError> {
    spec.validate().map_err(StreamError::InvalidSpec)?;
    let mut dir_rng = sub_rng(spec.seed, domain::STREAM, 0);
    let mut directions: Vec<Tensor> = Vec::new();
    let mut class_directions = BTreeMap::new();
    let mut tasks = Vec::with_capacity(spec.num_tasks);

    for t in 0..spec.num_tasks {
        let classes: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            let dir = class_direction(&mut dir_rng, spec.input_dim, spec.overlap, &directions);
            let mut sample_rng = sub_rng(spec.seed, domain::STREAM, 1 + c as u64);
            for _ in 0..spec.train_per_class {
                train.push(Sample {
                    x: sample_around(&dir, spec.cluster_spread, &mut sample_rng),
                    label: c,
                });
            }
            for _ in 0..spec.test_per_class {
                test.push(Sample {
                    x: sample_around(&dir, spec.cluster_spread, &mut sample_rng),
                    label: c,
                });
            }
            class_directions.insert(c, dir.clone());
            directions.push(dir);
        }
        tasks.push(TaskData {
            task_id: t,
            classes,
            train,
            test,
        });
    }
    Ok(Stream {
        tasks,
        class_directions,
    })
}

/// Class ids for the held-out pretrain split, disjoint from any CL stream.
pub const PRETRAIN_CLASS_BASE: usize = 1_000_000;

/// Generate the base-alignment split: fresh classes drawn with the same
/// cluster process but independent directions.
pub fn generate_pretrain_set(
    num_classes: usize,
    samples_per_class: usize,
    input_dim: usize,
    cluster_spread: f64,
    master_seed: u64,
) -> Vec<Sample> {
    let mut rng = sub_rng(master_seed, domain::PRETRAIN_DATA, 0);
    let mut out = Vec::with_capacity(num_classes * samples_per_class);
    for i in 0..num_classes {
        let dir = random_unit_vector(&mut rng, input_dim);
        for _ in 0..samples_per_class {
            out.push(Sample {
                x: sample_around(&dir, cluster_spread, &mut rng),
                label: PRETRAIN_CLASS_BASE + i,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StreamSpec;

    fn small_spec(seed: u64, overlap: f64) -> StreamSpec {
        StreamSpec {
            num_tasks: 3,
            classes_per_task: 2,
            train_per_class: 10,
            test_per_class: 5,
            input_dim: 16,
            cluster_spread: 0.15,
            overlap,
            seed,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_stream(&small_spec(3, 0.5)).unwrap();
        let b = generate_stream(&small_spec(3, 0.5)).unwrap();
        for (ta, tb) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(ta.train, tb.train);
            assert_eq!(ta.test, tb.test);
        }
    }

    #[test]
    fn class_sets_disjoint_and_ordered() {
        let s = generate_stream(&small_spec(1, 0.5)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for task in &s.tasks {
            for &c in &task.classes {
                assert!(seen.insert(c), "class {c} appears twice");
            }
        }
        assert_eq!(s.classes_through(1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn samples_inside_unit_box() {
        let s = generate_stream(&small_spec(2, 0.5)).unwrap();
        for task in &s.tasks {
            for sample in task.train.iter().chain(&task.test) {
                assert!(sample.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn overlap_raises_direction_similarity() {
        let mean_max_cos = |overlap: f64| -> f64 {
            let mut total = 0.0;
            let mut count = 0;
            for seed in 0..10 {
                let s = generate_stream(&small_spec(seed, overlap)).unwrap();
                for t in 1..s.tasks.len() {
                    let old: Vec<&Tensor> = s.tasks[..t]
                        .iter()
                        .flat_map(|task| task.classes.iter())
                        .map(|c| &s.class_directions[c])
                        .collect();
                    for c in &s.tasks[t].classes {
                        let d = &s.class_directions[c];
                        let max_cos = old
                            .iter()
                            .map(|o| o.dot(d))
                            .fold(f64::NEG_INFINITY, f64::max);
                        total += max_cos;
                        count += 1;
                    }
                }
            }
            total / count as f64
        };
        let independent = mean_max_cos(0.0);
        let shared = mean_max_cos(0.8);
        assert!(
            shared > independent,
            "overlap 0.8 gave {shared}, overlap 0 gave {independent}"
        );
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = small_spec(1, 0.5);
        spec.num_tasks = 0;
        assert!(generate_stream(&spec).is_err());
    }

    #[test]
    fn sub_rng_streams_independent() {
        let mut a = sub_rng(9, domain::STREAM, 0);
        let mut b = sub_rng(9, domain::TASK_TRAINING, 0);
        let va: u64 = a.gen();
        let vb: u64 = b.gen();
        assert_ne!(va, vb);
    }

    #[test]
    fn pretrain_split_uses_reserved_class_ids() {
        let set = generate_pretrain_set(3, 4, 16, 0.15, 5);
        assert_eq!(set.len(), 12);
        assert!(set.iter().all(|s| s.label >= PRETRAIN_CLASS_BASE));
    }
}
