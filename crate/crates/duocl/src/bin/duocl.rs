//! Command-line front end for the continual-learning harness.
//!
//! Configuration precedence: built-in defaults, then an optional TOML config
//! file, then command-line flags. Exit codes: 0 success, 1 configuration
//! error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use duocl::config::ExperimentConfig;
use duocl::report::{drift_csv, emit_report};
use duocl::runner::{
    pretrained_base, run_ablation, run_experiment, run_kadv_sweep, run_with_base, RunRecord,
};
use duocl::stream::generate_stream;

#[derive(Parser)]
#[command(name = "duocl", about = "Continual-learning harness on a synthetic dual-tower model")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run only the base-alignment phase and store the resulting model.
    Pretrain,
    /// Run the full pipeline once with the configured method flags.
    Run,
    /// Run the component ablation grid on a shared stream and base model.
    Ablate,
    /// Sweep the perturbation iteration count over {0, 5, 10, 20, 40}.
    SweepKadv,
    /// Compare boundary/core drift with and without distillation.
    DriftProbe,
    /// Print the summary table of an existing metrics.json.
    Metrics {
        /// Path to a previously written metrics.json.
        #[arg(long, default_value = "out/metrics.json")]
        input: PathBuf,
    },
}

#[derive(Args, Default)]
struct Overrides {
    // stream
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    num_tasks: Option<usize>,
    #[arg(long, global = true)]
    classes_per_task: Option<usize>,
    #[arg(long, global = true)]
    train_per_class: Option<usize>,
    #[arg(long, global = true)]
    test_per_class: Option<usize>,
    #[arg(long, global = true)]
    input_dim: Option<usize>,
    #[arg(long, global = true)]
    cluster_spread: Option<f64>,
    #[arg(long, global = true)]
    overlap: Option<f64>,

    // model
    #[arg(long, global = true)]
    raw_dim: Option<usize>,
    #[arg(long, global = true)]
    joint_dim: Option<usize>,
    #[arg(long, global = true)]
    hidden_dim: Option<usize>,
    #[arg(long, global = true)]
    lora_rank: Option<usize>,
    #[arg(long, global = true)]
    class_token_dim: Option<usize>,
    /// Classification softmax temperature (model, targeting, and training).
    #[arg(long, global = true)]
    temperature: Option<f64>,

    // pretrain
    #[arg(long, global = true)]
    pretrain_steps: Option<usize>,
    #[arg(long, global = true)]
    pretrain_lr: Option<f64>,
    #[arg(long, global = true)]
    pretrain_batch: Option<usize>,
    #[arg(long, global = true)]
    pretrain_classes: Option<usize>,
    #[arg(long, global = true)]
    pretrain_samples: Option<usize>,

    // anchor synthesis
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    k_adv: Option<usize>,
    #[arg(long, global = true)]
    lambda_p: Option<f64>,
    #[arg(long, global = true)]
    k_seed: Option<usize>,

    // training
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    anchor_batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    /// Disable the cosine learning-rate decay schedule.
    #[arg(long, global = true)]
    no_cosine_decay: bool,
    #[arg(long, global = true)]
    lambda_acgd: Option<f64>,
    #[arg(long, global = true)]
    lambda_gr: Option<f64>,
    #[arg(long, global = true)]
    tau_a: Option<f64>,
    #[arg(long, global = true)]
    tau_t: Option<f64>,
    #[arg(long, global = true)]
    k_neighbors: Option<usize>,

    // method flags
    #[arg(long, global = true)]
    no_acgd: bool,
    #[arg(long, global = true)]
    no_tsgr: bool,
    #[arg(long, global = true)]
    no_prototype_transfer: bool,
    #[arg(long, global = true)]
    no_visual_branch: bool,

    // inference
    #[arg(long, global = true)]
    beta: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(self.seed, cfg.stream.seed);
        set!(self.num_tasks, cfg.stream.num_tasks);
        set!(self.classes_per_task, cfg.stream.classes_per_task);
        set!(self.train_per_class, cfg.stream.train_per_class);
        set!(self.test_per_class, cfg.stream.test_per_class);
        set!(self.cluster_spread, cfg.stream.cluster_spread);
        set!(self.overlap, cfg.stream.overlap);
        if let Some(d) = self.input_dim {
            cfg.stream.input_dim = d;
            cfg.model.input_dim = d;
        }

        set!(self.raw_dim, cfg.model.raw_dim);
        set!(self.joint_dim, cfg.model.joint_dim);
        set!(self.hidden_dim, cfg.model.hidden_dim);
        set!(self.lora_rank, cfg.model.lora_rank);
        set!(self.class_token_dim, cfg.model.class_token_dim);
        if let Some(t) = self.temperature {
            cfg.model.temperature = t;
            cfg.dpgd.temperature = t;
            cfg.train.temperature = t;
        }

        set!(self.pretrain_steps, cfg.pretrain.steps);
        set!(self.pretrain_lr, cfg.pretrain.learning_rate);
        set!(self.pretrain_batch, cfg.pretrain.batch_size);
        set!(self.pretrain_classes, cfg.pretrain.num_classes);
        set!(self.pretrain_samples, cfg.pretrain.samples_per_class);

        set!(self.epsilon, cfg.dpgd.epsilon);
        set!(self.gamma, cfg.dpgd.gamma);
        set!(self.k_adv, cfg.dpgd.k_adv);
        set!(self.lambda_p, cfg.dpgd.lambda_p);
        set!(self.k_seed, cfg.dpgd.k_seed);

        set!(self.epochs, cfg.train.epochs);
        set!(self.batch_size, cfg.train.batch_size);
        set!(self.anchor_batch_size, cfg.train.anchor_batch_size);
        set!(self.learning_rate, cfg.train.learning_rate);
        if self.no_cosine_decay {
            cfg.train.cosine_decay = false;
        }
        set!(self.lambda_acgd, cfg.train.lambda_acgd);
        set!(self.lambda_gr, cfg.train.lambda_gr);
        set!(self.tau_a, cfg.train.tau_a);
        set!(self.tau_t, cfg.train.tau_t);
        set!(self.k_neighbors, cfg.train.k_neighbors);

        if self.no_acgd {
            cfg.flags.acgd = false;
        }
        if self.no_tsgr {
            cfg.flags.tsgr = false;
        }
        if self.no_prototype_transfer {
            cfg.flags.prototype_transfer = false;
        }
        if self.no_visual_branch {
            cfg.flags.visual_branch = false;
        }

        set!(self.beta, cfg.inference.beta);
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_toml_file(path)?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn print_headline(records: &[RunRecord]) {
    for r in records {
        println!(
            "{}: avg={:.4} last={:.4} fwt={:.4} bwt={:.4} forgetting={:.4}",
            r.label, r.metrics.avg, r.metrics.last, r.metrics.fwt, r.metrics.bwt,
            r.metrics.forgetting
        );
    }
}

fn execute(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), String> {
    let out = &cli.out;
    match &cli.command {
        Command::Pretrain => {
            let model = pretrained_base(cfg).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
            let path = out.join("pretrained_model.json");
            std::fs::write(&path, model.to_json()).map_err(|e| e.to_string())?;
            println!("wrote {}", path.display());
        }
        Command::Run => {
            let record = run_experiment(cfg).map_err(|e| e.to_string())?;
            emit_report(out, std::slice::from_ref(&record)).map_err(|e| e.to_string())?;
            print_headline(std::slice::from_ref(&record));
            println!("artifacts in {}", out.display());
        }
        Command::Ablate => {
            let records = run_ablation(cfg).map_err(|e| e.to_string())?;
            emit_report(out, &records).map_err(|e| e.to_string())?;
            print_headline(&records);
            println!("artifacts in {}", out.display());
        }
        Command::SweepKadv => {
            let sweep = run_kadv_sweep(cfg).map_err(|e| e.to_string())?;
            let mut records = Vec::with_capacity(sweep.len());
            let mut csv = String::from("k_adv,last,forgetting,mean_anchor_target_prob\n");
            for (k, mut record) in sweep {
                record.label = format!("kadv{k}");
                let mean_prob = if record.anchor_stats.is_empty() {
                    0.0
                } else {
                    record
                        .anchor_stats
                        .iter()
                        .map(|s| s.mean_target_prob)
                        .sum::<f64>()
                        / record.anchor_stats.len() as f64
                };
                csv.push_str(&format!(
                    "{k},{},{},{mean_prob}\n",
                    record.metrics.last, record.metrics.forgetting
                ));
                records.push(record);
            }
            emit_report(out, &records).map_err(|e| e.to_string())?;
            std::fs::write(out.join("kadv_sweep.csv"), csv).map_err(|e| e.to_string())?;
            print_headline(&records);
            println!("artifacts in {}", out.display());
        }
        Command::DriftProbe => {
            // compare the plain fine-tuning update against distillation
            let stream = generate_stream(&cfg.stream).map_err(|e| e.to_string())?;
            let base = pretrained_base(cfg).map_err(|e| e.to_string())?;
            let mut runs = Vec::new();
            for (name, acgd) in [("baseline", false), ("acgd", true)] {
                let mut variant = cfg.clone();
                variant.flags = duocl::config::MethodFlags::none();
                variant.flags.acgd = acgd;
                let record =
                    run_with_base(&stream, &variant, &base).map_err(|e| e.to_string())?;
                runs.push((name, record));
            }
            std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
            for (name, record) in &runs {
                for (stage_offset, probe) in record.drift.iter().enumerate() {
                    let path = out.join(format!("drift_{}_stage{}.csv", name, stage_offset + 1));
                    std::fs::write(&path, drift_csv(probe)).map_err(|e| e.to_string())?;
                }
                for (stage_offset, probe) in record.drift.iter().enumerate() {
                    println!(
                        "{name} stage {}: boundary_jsd={:.6} core_jsd={:.6}",
                        stage_offset + 1,
                        probe.summary.boundary_mean_jsd,
                        probe.summary.core_mean_jsd
                    );
                }
            }
            println!("artifacts in {}", out.display());
        }
        Command::Metrics { input } => {
            #[derive(Deserialize)]
            struct Row {
                label: String,
                metrics: duocl::runner::MetricsSummary,
            }
            let text = std::fs::read_to_string(input).map_err(|e| e.to_string())?;
            let rows: Vec<Row> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            println!(
                "{:<28} {:>8} {:>8} {:>8} {:>8} {:>10}",
                "run", "Avg", "Last", "FWT", "BWT", "Forgetting"
            );
            for r in rows {
                println!(
                    "{:<28} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
                    r.label, r.metrics.avg, r.metrics.last, r.metrics.fwt, r.metrics.bwt,
                    r.metrics.forgetting
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(1);
        }
    };
    match execute(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::from(2)
        }
    }
}
