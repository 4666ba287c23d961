//! Configuration types with their default hyperparameters, plus TOML loading.

use std::path::Path;

use serde::{Deserialize, Serialize};

/// Dimensions and temperature of the dual-tower model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Raw visual feature dimension (prototype space).
    pub raw_dim: usize,
    /// Joint embedding dimension shared by both towers.
    pub joint_dim: usize,
    pub hidden_dim: usize,
    pub lora_rank: usize,
    pub class_token_dim: usize,
    /// Classification softmax temperature.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            raw_dim: 64,
            joint_dim: 32,
            hidden_dim: 64,
            lora_rank: 4,
            class_token_dim: 32,
            temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            self.input_dim,
            self.raw_dim,
            self.joint_dim,
            self.hidden_dim,
            self.lora_rank,
            self.class_token_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err("all model dimensions must be >= 1".into());
        }
        if self.lora_rank > self.hidden_dim {
            return Err("lora_rank exceeds adapted layer input dimension".into());
        }
        if self.temperature <= 0.0 {
            return Err("temperature must be positive".into());
        }
        Ok(())
    }
}

/// Base-tower alignment phase that stands in for large-scale pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of synthetic pretrain classes, disjoint from the CL stream.
    pub num_classes: usize,
    pub samples_per_class: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            learning_rate: 0.01,
            batch_size: 64,
            num_classes: 20,
            samples_per_class: 20,
        }
    }
}

/// Dual-targeted PGD anchor synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpgdConfig {
    /// L-infinity perturbation budget.
    pub epsilon: f64,
    /// Sign-step size.
    pub gamma: f64,
    pub k_adv: usize,
    /// Weight of the raw-space prototype attraction term.
    pub lambda_p: f64,
    /// Seeds (and hence anchors) per old class.
    pub k_seed: usize,
    /// Softmax temperature inside the targeting objective.
    pub temperature: f64,
}

impl Default for DpgdConfig {
    fn default() -> Self {
        DpgdConfig {
            epsilon: 4.0 / 255.0,
            gamma: 1.5e-3,
            k_adv: 10,
            lambda_p: 0.5,
            k_seed: 5,
            temperature: 0.07,
        }
    }
}

impl DpgdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epsilon <= 0.0 || self.gamma <= 0.0 {
            return Err("epsilon and gamma must be positive".into());
        }
        // k_adv = 0 is allowed: anchors then equal their seeds (sweep baseline)
        if self.lambda_p < 0.0 {
            return Err("lambda_p must be non-negative".into());
        }
        if self.k_seed < 1 {
            return Err("k_seed must be >= 1".into());
        }
        if self.temperature <= 0.0 {
            return Err("temperature must be positive".into());
        }
        Ok(())
    }
}

/// Per-task optimization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub anchor_batch_size: usize,
    pub learning_rate: f64,
    pub cosine_decay: bool,
    pub lambda_acgd: f64,
    pub lambda_gr: f64,
    /// Distillation temperature for anchor-guided cross-modal distillation.
    pub tau_a: f64,
    /// Temperature of the text-neighborhood similarity distributions.
    pub tau_t: f64,
    /// Neighbors per text subgraph.
    pub k_neighbors: usize,
    /// Classification softmax temperature.
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            anchor_batch_size: 32,
            learning_rate: 0.001,
            cosine_decay: true,
            lambda_acgd: 5.0,
            lambda_gr: 1.0,
            tau_a: 20.0,
            tau_t: 0.05,
            k_neighbors: 10,
            temperature: 0.07,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 || self.batch_size == 0 || self.anchor_batch_size == 0 {
            return Err("epochs and batch sizes must be positive".into());
        }
        if self.k_neighbors < 1 {
            return Err("k_neighbors must be >= 1".into());
        }
        if self.tau_a <= 0.0 || self.tau_t <= 0.0 || self.temperature <= 0.0 {
            return Err("temperatures must be positive".into());
        }
        if self.learning_rate < 0.0 {
            return Err("learning_rate must be non-negative".into());
        }
        Ok(())
    }
}

/// Synthetic class-incremental stream shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    /// Gaussian cluster spread per coordinate.
    pub cluster_spread: f64,
    /// Fraction of a new class direction shared with a random earlier class.
    pub overlap: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            num_tasks: 5,
            classes_per_task: 4,
            train_per_class: 100,
            test_per_class: 50,
            input_dim: 32,
            cluster_spread: 0.15,
            overlap: 0.5,
            seed: 7,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_tasks < 1 || self.classes_per_task < 1 {
            return Err("num_tasks and classes_per_task must be >= 1".into());
        }
        if self.train_per_class < 1 || self.test_per_class < 1 {
            return Err("samples per class must be >= 1".into());
        }
        if self.input_dim < 1 {
            return Err("input_dim must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err("overlap must lie in [0, 1]".into());
        }
        if self.cluster_spread < 0.0 {
            return Err("cluster_spread must be non-negative".into());
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }
}

/// Independent on/off switches for the pipeline components, spanning the
/// ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodFlags {
    pub acgd: bool,
    pub tsgr: bool,
    pub prototype_transfer: bool,
    pub visual_branch: bool,
}

impl Default for MethodFlags {
    fn default() -> Self {
        MethodFlags {
            acgd: true,
            tsgr: true,
            prototype_transfer: true,
            visual_branch: true,
        }
    }
}

impl MethodFlags {
    pub fn none() -> Self {
        MethodFlags {
            acgd: false,
            tsgr: false,
            prototype_transfer: false,
            visual_branch: false,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.acgd {
            parts.push("acgd");
        }
        if self.tsgr {
            parts.push("tsgr");
        }
        if self.prototype_transfer {
            parts.push("ptransfer");
        }
        if self.visual_branch {
            parts.push("vbranch");
        }
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub dpgd: DpgdConfig,
    pub train: TrainConfig,
    pub flags: MethodFlags,
    pub inference: InferenceConfig,
}

/// Dual-path fusion parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Visual-branch coefficient in the fused logits.
    pub beta: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { beta: 0.5 }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.stream.validate()?;
        self.model.validate()?;
        self.dpgd.validate()?;
        self.train.validate()?;
        if self.stream.input_dim != self.model.input_dim {
            return Err("stream.input_dim must match model.input_dim".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, String> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        Self::from_toml_str(&s)
    }
}
