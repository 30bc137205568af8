//! `vitkit` command-line front end.
//!
//! Exit codes: 0 on success, 1 on invalid arguments or configuration, 2 when
//! a run fails (I/O, non-finite loss, a failed check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use vitkit::analyzer::{count_flops, memory_estimate, SCHEMA_VERSION};
use vitkit::bench::{bench, BenchConfig, Exec};
use vitkit::checkpoint::{load_checkpoint, save_checkpoint};
use vitkit::data::{load_cifar10, synth_split, Dataset, Split};
use vitkit::finetune::{finetune_resolution, freeze_verify, ADAMW_LR, SGD_LR};
use vitkit::gradcheck::{check_model, TOLERANCE};
use vitkit::masking::{commutation_check, sample_mask, MimHead, DEFAULT_MASK_RATIO};
use vitkit::optim::OptimizerConfig;
use vitkit::stems::{patch_independence_check, StemModule};
use vitkit::train::{default_lr, evaluate, pretrain_mim, train, TrainConfig};
use vitkit::vit::{interpolate_pos_embed, Resample};
use vitkit::{build_model, Forward, Layout, Model, Rng, Scope, StemKind, StemNorm, Tensor, TuneScope, ViTConfig};

/// Synthetic and CIFAR-10 images are generated / stored at this side and
/// resized to `--res`.
const NATIVE_RES: usize = 32;

#[derive(Parser, Debug)]
#[command(name = "vitkit", version, about = "Miniature ViTs with sequential and parallel block layouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-form parameter, FLOP and activation-memory report (JSON).
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 224)]
        res: usize,
        /// Batch size for the activation-memory estimate.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised training from scratch; writes metrics.csv, model.vtc and report.json.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked patch-regression pretraining; writes mim.csv, model.vtc and report.json.
    PretrainMim {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long = "mask-ratio", default_value_t = DEFAULT_MASK_RATIO)]
        mask_ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resolution change plus scoped fine-tuning of a checkpoint.
    Finetune {
        /// Checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = TuneArg::Full)]
        tune: TuneArg,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Target resolution; defaults to the checkpoint's.
        #[arg(long)]
        res: Option<usize>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequential vs parallel throughput (CSV).
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated layouts; defaults to the model's own.
        #[arg(long, value_delimiter = ',', value_parser = parse_layout)]
        layouts: Vec<Layout>,
        /// Execution modes; defaults to seq,par when every layout has P > 1,
        /// otherwise seq.
        #[arg(long, value_delimiter = ',', value_enum)]
        exec: Vec<ExecArg>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 8])]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 224)]
        res: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patch independence and mask commutation of a stem (JSON).
    Masktest {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 224)]
        res: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long = "mask-ratio", default_value_t = DEFAULT_MASK_RATIO)]
        mask_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the model's cross-entropy gradients (JSON).
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Coordinates probed per tensor.
        #[arg(long, default_value_t = 8)]
        coords: usize,
        #[arg(long, value_enum, default_value_t = ExecArg::Par)]
        exec: ExecArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Ti)]
    model: Preset,
    /// Width, depth and heads of a `--model custom`.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Block layout `NxP`: N layers of P parallel branches.
    #[arg(long, value_parser = parse_layout)]
    layout: Option<Layout>,
    #[arg(long, value_enum, default_value_t = StemArg::Linear)]
    stem: StemArg,
    /// Stem normalization; defaults to the stem's standard choice.
    #[arg(long = "stem-norm", value_enum)]
    stem_norm: Option<NormArg>,
    /// Output classes; defaults to 1000, or the dataset's for training.
    #[arg(long)]
    classes: Option<usize>,
    /// LayerScale initial value; off when absent.
    #[arg(long)]
    layerscale: Option<f64>,
    /// Stochastic-depth rate; defaults to the preset's.
    #[arg(long = "sd-rate")]
    sd_rate: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long, value_enum, default_value_t = DatasetArg::Synthetic)]
    dataset: DatasetArg,
    /// Directory holding data_batch_{1..5}.bin and test_batch.bin.
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    /// Training samples (synthetic default 2000; CIFAR default all).
    #[arg(long = "train-size")]
    train_size: Option<usize>,
    /// Evaluation samples (synthetic default 500; CIFAR default all).
    #[arg(long = "test-size")]
    test_size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long, value_enum, default_value_t = OptArg::Adamw)]
    optimizer: OptArg,
    /// Base learning rate (cosine decay); defaults depend on the command.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size", default_value_t = 64)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = ExecArg::Par)]
    exec: ExecArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Preset {
    Ti,
    S,
    B,
    L,
    Custom,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum StemArg {
    Linear,
    Conv,
    Hmlp,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum NormArg {
    Bn,
    Ln,
    None,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum TuneArg {
    Full,
    Attn,
    Ffn,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum ExecArg {
    Seq,
    Par,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum OptArg {
    Adamw,
    Sgd,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum DatasetArg {
    Synthetic,
    Cifar10,
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    s.parse().map_err(|e: vitkit::Error| e.to_string())
}

impl ExecArg {
    fn forward(self) -> Forward {
        match self {
            ExecArg::Seq => Forward::Sequential,
            ExecArg::Par => Forward::Parallel,
        }
    }

    fn exec(self) -> Exec {
        match self {
            ExecArg::Seq => Exec::Seq,
            ExecArg::Par => Exec::Par,
        }
    }
}

/// A failed command and its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<vitkit::Error> for Failure {
    fn from(e: vitkit::Error) -> Self {
        if e.is_validation() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

impl ModelArgs {
    fn config(&self, res: usize, dataset_classes: Option<usize>) -> CliResult<ViTConfig> {
        let custom = [self.width, self.depth, self.heads];
        let mut cfg = match self.model {
            Preset::Custom => match custom {
                [Some(w), Some(d), Some(h)] => ViTConfig::custom(w, d, h),
                _ => return Err(Failure::Usage("--model custom needs --width, --depth and --heads".into())),
            },
            preset => {
                if custom.iter().any(Option::is_some) {
                    return Err(Failure::Usage("--width/--depth/--heads apply only to --model custom".into()));
                }
                match preset {
                    Preset::Ti => ViTConfig::tiny(),
                    Preset::S => ViTConfig::small(),
                    Preset::B => ViTConfig::base(),
                    _ => ViTConfig::large(),
                }
            }
        };
        if let Some(layout) = self.layout {
            cfg = cfg.with_layout(layout);
        }
        cfg = cfg.with_stem(match self.stem {
            StemArg::Linear => StemKind::Linear,
            StemArg::Conv => StemKind::Conv,
            StemArg::Hmlp => StemKind::Hmlp,
        });
        if let Some(norm) = self.stem_norm {
            cfg = cfg.with_stem_norm(match norm {
                NormArg::Bn => StemNorm::Bn,
                NormArg::Ln => StemNorm::Ln,
                NormArg::None => StemNorm::None,
            });
        }
        if let Some(n) = self.classes.or(dataset_classes) {
            cfg = cfg.with_classes(n);
        }
        if let Some(rate) = self.sd_rate {
            cfg = cfg.with_sd_rate(rate);
        }
        cfg = cfg.with_image_size(res).with_layerscale(self.layerscale);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl DataArgs {
    /// Train and test splits at `res`.
    fn load(&self, res: usize, seed: u64) -> CliResult<(Dataset<f32>, Dataset<f32>)> {
        let (mut train, mut test) = match self.dataset {
            DatasetArg::Synthetic => {
                let n_train = self.train_size.unwrap_or(2000);
                let n_test = self.test_size.unwrap_or(500);
                synth_split(seed, n_train, n_test, NATIVE_RES, 10)?
            }
            DatasetArg::Cifar10 => {
                let dir = self
                    .data_dir
                    .as_ref()
                    .ok_or_else(|| Failure::Usage("--dataset cifar10 needs --data-dir".into()))?;
                let batches: Vec<PathBuf> = (1..=5)
                    .map(|i| dir.join(format!("data_batch_{i}.bin")))
                    .filter(|p| p.exists())
                    .collect();
                if batches.is_empty() {
                    return Err(Failure::Runtime(format!("no data_batch_*.bin files in {}", dir.display())));
                }
                let mut train = load_cifar10(&batches, Split::Train)?;
                let mut test = load_cifar10(&[dir.join("test_batch.bin")], Split::Test)?;
                if let Some(n) = self.train_size {
                    train = train.take(n);
                }
                if let Some(n) = self.test_size {
                    test = test.take(n);
                }
                (train, test)
            }
        };
        if res != NATIVE_RES {
            train = train.resized(res);
            test = test.resized(res);
        }
        Ok((train, test))
    }
}

impl RunArgs {
    fn train_config(&self, epochs: usize, default_lr: f64) -> TrainConfig {
        let opt = match self.optimizer {
            OptArg::Adamw => OptimizerConfig::adamw(self.lr.unwrap_or(default_lr)),
            OptArg::Sgd => OptimizerConfig::sgd(self.lr.unwrap_or(default_lr)),
        };
        let mut tc = TrainConfig::new(epochs, self.batch_size, opt, self.seed);
        tc.exec = self.exec.forward();
        tc
    }
}

/// Writes `text` to `out`, or stdout when absent.
fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON value serializes");
    s.push('\n');
    s
}

fn to_value<S: serde::Serialize>(x: &S) -> Value {
    serde_json::to_value(x).expect("report serializes")
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Analyze { model, res, batch, out } => {
            let cfg = model.config(res, None)?;
            let mut report = to_value(&count_flops(&cfg, res)?);
            report["memory"] = to_value(&memory_estimate(&cfg, res, batch)?);
            emit(out.as_deref(), &pretty(&report))
        }
        Command::Train {
            model,
            data,
            run,
            res,
            epochs,
            out,
        } => {
            let (train_set, test_set) = data.load(res, run.seed)?;
            let cfg = model.config(res, Some(test_set.num_classes))?;
            let tc = run.train_config(epochs, default_lr(&cfg));
            let (m, log) = train(&cfg, &train_set, Some(&test_set), &tc)?;
            fs::create_dir_all(&out)?;
            log.write_csv(out.join("metrics.csv"))?;
            save_checkpoint(&m, out.join("model.vtc"))?;
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "train",
                "config": to_value(&cfg),
                "train": to_value(&tc),
                "params": m.param_count(),
                "final": to_value(&log.last()),
            });
            emit(Some(&out.join("report.json")), &pretty(&report))
        }
        Command::PretrainMim {
            model,
            data,
            run,
            res,
            epochs,
            mask_ratio,
            out,
        } => {
            let (train_set, _) = data.load(res, run.seed)?;
            let cfg = model.config(res, Some(train_set.num_classes))?;
            let tc = run.train_config(epochs, default_lr(&cfg));
            let mut rng = Rng::stream(run.seed, 0);
            let mut m: Model<f32> = build_model(&cfg, &mut rng)?;
            let mut head = MimHead::for_model(&m, &mut rng);
            let log = pretrain_mim(&mut m, &mut head, &train_set, &tc, Some(mask_ratio))?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("mim.csv"), log.to_csv())?;
            save_checkpoint(&m, out.join("model.vtc"))?;
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "pretrain-mim",
                "config": to_value(&cfg),
                "train": to_value(&tc),
                "mask_ratio": mask_ratio,
                "final": to_value(&log.rows.last()),
            });
            emit(Some(&out.join("report.json")), &pretty(&report))
        }
        Command::Finetune {
            checkpoint,
            tune,
            data,
            run,
            res,
            epochs,
            out,
        } => {
            let pre: Model<f32> = load_checkpoint(&checkpoint)?;
            let res = res.unwrap_or(pre.config.image_size);
            let (train_set, test_set) = data.load(res, run.seed)?;
            let scope = TuneScope::new(match tune {
                TuneArg::Full => Scope::Full,
                TuneArg::Attn => Scope::Attn,
                TuneArg::Ffn => Scope::Ffn,
            });
            let lr = match run.optimizer {
                OptArg::Adamw => ADAMW_LR,
                OptArg::Sgd => SGD_LR,
            };
            let tc = run.train_config(epochs, lr);
            let start = interpolate_pos_embed(pre.clone(), res, Resample::Bicubic)?;
            let (_, before) = evaluate(&start, &test_set, tc.batch_size, tc.exec)?;
            let outcome = finetune_resolution(pre, res, &scope, &tc, &train_set, Some(&test_set))?;
            let frozen_ok = freeze_verify(&start, &outcome.model, &scope)?;
            fs::create_dir_all(&out)?;
            outcome.log.write_csv(out.join("metrics.csv"))?;
            save_checkpoint(&outcome.model, out.join("model.vtc"))?;
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "command": "finetune",
                "resolution": res,
                "train": to_value(&tc),
                "scope": to_value(&outcome.report),
                "eval_acc_before": before,
                "final": to_value(&outcome.log.last()),
                "freeze_verified": frozen_ok,
            });
            emit(Some(&out.join("report.json")), &pretty(&report))?;
            if frozen_ok {
                Ok(())
            } else {
                Err(Failure::Runtime("frozen tensors changed during fine-tuning".into()))
            }
        }
        Command::Bench {
            model,
            layouts,
            exec,
            batches,
            res,
            repeats,
            warmups,
            seed,
            out,
        } => {
            let base = model.config(res, None)?;
            let mut cfg = BenchConfig::new(if layouts.is_empty() { vec![base.layout()] } else { layouts }, batches);
            cfg.execs = if exec.is_empty() {
                if cfg.layouts.iter().all(|l| l.branches > 1) {
                    vec![Exec::Seq, Exec::Par]
                } else {
                    vec![Exec::Seq]
                }
            } else {
                exec.iter().map(|e| e.exec()).collect()
            };
            cfg.repeats = repeats;
            cfg.warmups = warmups;
            cfg.seed = seed;
            let report = bench::<f32>(&base, &cfg)?;
            eprintln!("max seq/par relative deviation: {:e}", report.max_rel_deviation);
            emit(out.as_deref(), &report.to_csv())
        }
        Command::Masktest {
            model,
            res,
            trials,
            mask_ratio,
            seed,
            out,
        } => {
            let cfg = model.config(res, None)?;
            let mut rng = Rng::new(seed);
            let mut stem = StemModule::<f64>::build(cfg.stem_spec(), &mut rng)?;
            stem.randomize(&mut rng);
            let independence = patch_independence_check(&stem, res, &mut rng, trials)?;
            let mut commutation = 0.0f64;
            for _ in 0..trials {
                let images: Tensor<f64> = rng.normal_tensor(&[1, 3, res, res], 1.0);
                let mask = sample_mask(&mut rng, cfg.num_patches(), mask_ratio)?;
                let token: Tensor<f64> = rng.normal_tensor(&[cfg.width], 1.0);
                commutation = commutation.max(commutation_check(&stem, &images, &mask, &token)?);
            }
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "stem": to_value(&cfg.stem_kind),
                "stem_norm": to_value(&cfg.stem_norm),
                "width": cfg.width,
                "res": res,
                "trials": trials,
                "mask_ratio": mask_ratio,
                "independent": independence.independent && commutation == 0.0,
                "max_leakage": independence.max_leakage,
                "commutation_deviation": commutation,
                "deviation": independence.max_leakage.max(commutation),
            });
            emit(out.as_deref(), &pretty(&report))
        }
        Command::Gradcheck {
            model,
            res,
            batch,
            coords,
            exec,
            seed,
            out,
        } => {
            let cfg = model.config(res, None)?;
            let mut rng = Rng::new(seed);
            let m: Model<f64> = build_model(&cfg, &mut rng)?;
            let images: Tensor<f64> = rng.normal_tensor(&[batch, 3, res, res], 1.0);
            let labels: Vec<usize> = (0..batch).map(|_| rng.below(cfg.num_classes)).collect();
            let r = check_model(&m, &images, &labels, exec.forward(), coords, &mut rng)?;
            let pass = r.max_rel_err < TOLERANCE;
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "config": to_value(&m.config),
                "max_rel_err": r.max_rel_err,
                "coords_checked": r.coords_checked,
                "tolerance": TOLERANCE,
                "pass": pass,
            });
            emit(out.as_deref(), &pretty(&report))?;
            if pass {
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "gradient check failed: max relative error {:e} ≥ {TOLERANCE:e}",
                    r.max_rel_err
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
