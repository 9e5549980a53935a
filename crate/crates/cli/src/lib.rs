//! Subcommands of the `caga` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use caga::config::RunConfig;
use caga::data::{self, apply_zscore, fit_zscore, load_image_tree, ppm, synth_dataset, Dataset, NormStats};
use caga::interpret::{grad_cam, heatmap_pgm, overlay_ppm};
use caga::model::{predict, probabilities, Model};
use caga::nn::ParamStore;
use caga::profile::{profile_model, reduction};
use caga::selftest::{fault_op, format_table, run_selftest};
use caga::tensor::PRECISION;
use caga::train::{
    ablation_csv, compute_metrics, evaluate, fit, folds_csv, kfold_split, run_ablation, run_cv, summary_table,
    FoldSummary, ABLATION_GRID,
};
use caga::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "caga", version, about = "Cascaded atrous group attention: train, evaluate, explain, profile")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for initialization, shuffling, splits and synthetic data.
    #[arg(long, global = true, default_value_t = 82)]
    pub seed: u64,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "caga-out")]
    pub out: PathBuf,
    /// Folds trained concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Class-per-directory PPM tree, or `synth`.
    #[arg(long, default_value = "synth")]
    pub data: String,
    /// Images per class of the synthetic dataset.
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Gradient checks, loop oracles and structural invariants.
    Selftest,
    /// Write a synthetic dataset as a PPM tree under `<out>/synth`.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train on one cross-validation split and save a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Which fold provides the validation and test sets.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Stratified k-fold cross-validation.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Train only the first N folds.
        #[arg(long)]
        max_folds: Option<usize>,
    },
    /// Cascade ablation grid.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long)]
        max_folds: Option<usize>,
    },
    /// Grad-CAM heatmap and overlay for one image.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// P6 PPM image.
        #[arg(long)]
        image: PathBuf,
        /// Target class; defaults to the predicted class.
        #[arg(long)]
        target: Option<usize>,
        /// Feature layer (`stem.<i>` or `caga.<j>`); defaults to the last block.
        #[arg(long)]
        layer: Option<String>,
    },
    /// Per-layer parameter and MAC counts.
    Profile {
        /// Input size `HxW`; defaults to the configured image size.
        #[arg(long)]
        input: Option<String>,
        /// Report FLOPs (2 per MAC) instead of MACs.
        #[arg(long)]
        flops: bool,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn failure(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FAILURE,
            msg: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Parse { .. } | Error::Dataset(_) => EXIT_IO,
            Error::Config(_) | Error::Contract(_) | Error::Stratification { .. } | Error::Lookup(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Snapshot written before any training starts.
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub started: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn version() -> String {
        format!("v{}-{}", env!("CARGO_PKG_VERSION"), PRECISION)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "version={}", Self::version());
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "precision={PRECISION}");
        let _ = writeln!(s, "started={}", self.started);
        let _ = writeln!(s, "outputs={}", self.outputs.join(","));
        s.push_str("# resolved configuration\n");
        s.push_str(&self.config.to_kv());
        s
    }
}

struct Run {
    global: Global,
    cfg: RunConfig,
}

impl Run {
    fn new(global: Global) -> CliResult<Self> {
        let mut cfg = match &global.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for kv in &global.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.train.seed = global.seed;
        cfg.validate()?;
        Ok(Run { global, cfg })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.global.out.join(name)
    }

    fn manifest(&self, command: &str, outputs: &[&str]) -> CliResult<()> {
        let m = RunManifest {
            command: command.to_string(),
            seed: self.global.seed,
            config: self.cfg.clone(),
            started: unix_now(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        write_file(&self.out("manifest.txt"), m.render())
    }

    fn finish(&self) -> CliResult<()> {
        write_file(&self.out("finished.txt"), format!("finished={}\n", unix_now()))
    }

    fn dataset(&self, args: &DataArgs) -> CliResult<Dataset> {
        let size = self.cfg.model.image_size;
        let ds = if args.data == "synth" {
            synth_dataset(self.cfg.model.num_classes, args.per_class, size, self.global.seed)?
        } else {
            load_image_tree(Path::new(&args.data), size)?
        };
        if ds.num_classes() != self.cfg.model.num_classes {
            return Err(CliError::usage(format!(
                "dataset has {} classes but num_classes={}",
                ds.num_classes(),
                self.cfg.model.num_classes
            )));
        }
        Ok(ds)
    }
}

fn check_folds(folds: usize) -> CliResult<()> {
    if folds < 2 {
        return Err(CliError::usage(format!("--folds must be at least 2, got {folds}")));
    }
    Ok(())
}

/// A saved model: parameters, configuration, normalization and class names.
pub struct Checkpoint {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub norm: NormStats,
    pub classes: Vec<String>,
}

impl Checkpoint {
    pub fn save(dir: &Path, cfg: &RunConfig, store: &ParamStore, norm: &NormStats, classes: &[String]) -> CliResult<()> {
        store.save(&dir.join("params"))?;
        write_file(&dir.join("config.kv"), cfg.to_kv())?;
        write_file(&dir.join("norm.kv"), norm.to_kv())?;
        write_file(&dir.join("classes.txt"), classes.join("\n") + "\n")
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| CliError::from(Error::io(&p, e)))
        };
        let cfg = RunConfig::parse(&read("config.kv")?)?;
        let norm = NormStats::from_kv(&read("norm.kv")?).map_err(|msg| Error::Parse {
            path: dir.join("norm.kv"),
            msg,
        })?;
        let classes = read("classes.txt")?.lines().map(str::to_string).collect();
        let model = Model::new(cfg.model.clone())?;
        let store = ParamStore::load(&dir.join("params"))?;
        Ok(Checkpoint {
            cfg,
            model,
            store,
            norm,
            classes,
        })
    }
}

fn cmd_selftest(run: &Run) -> CliResult<()> {
    let fault = match &run.global.inject_fault {
        Some(name) => Some(fault_op(name).ok_or_else(|| CliError::usage(format!("unknown op `{name}`")))?),
        None => None,
    };
    let results = run_selftest(fault);
    print!("{}", format_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::failure(format!("failing checks: {}", failed.join(", "))))
    }
}

fn cmd_synth(run: &Run, classes: usize, per_class: usize, size: usize) -> CliResult<()> {
    let ds = synth_dataset(classes, per_class, (size, size), run.global.seed)?;
    let root = run.out("synth");
    ds.write_image_tree(&root)?;
    println!("wrote {} images in {} classes to {}", ds.len(), classes, root.display());
    Ok(())
}

fn metrics_csv(names_values: &[(String, f64)]) -> String {
    let header: Vec<&str> = names_values.iter().map(|(n, _)| n.as_str()).collect();
    let values: Vec<String> = names_values.iter().map(|(_, v)| format!("{v:.6}")).collect();
    format!("{}\n{}\n", header.join(","), values.join(","))
}

fn to_f64(v: &[(String, caga::Real)]) -> Vec<(String, f64)> {
    v.iter().map(|(n, x)| (n.clone(), *x as f64)).collect()
}

fn cmd_train(run: &Run, data: &DataArgs, folds: usize, fold: usize) -> CliResult<()> {
    check_folds(folds)?;
    if fold >= folds {
        return Err(CliError::usage(format!("--fold {fold} out of range for {folds} folds")));
    }
    let ds = run.dataset(data)?;
    run.manifest("train", &["checkpoint", "train_log.csv", "test_metrics.csv"])?;
    let split = &kfold_split(ds.len(), folds, run.global.seed, Some(&ds.labels()))?[fold];
    let train = ds.subset(&split.train, "train");
    let norm = fit_zscore(&train)?;
    for ch in &norm.floored {
        eprintln!("warning: channel {ch} has zero variance; std floored to {}", data::STD_FLOOR);
    }
    let train = apply_zscore(&train, &norm);
    let val = apply_zscore(&ds.subset(&split.val, "val"), &norm);
    let test = apply_zscore(&ds.subset(&split.test, "test"), &norm);
    let model = Model::new(run.cfg.model.clone())?;
    let store = model.init(run.global.seed);
    let mut log = String::from("epoch,lr,train_loss,val_loss,val_accuracy\n");
    let result = fit(&model, store, &train, &val, &run.cfg.train, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  train {:.5}  val {:.5}  val acc {:.4}",
            e.epoch, e.lr, e.train_loss, e.val_loss, e.val_accuracy
        );
        let _ = writeln!(log, "{},{:e},{:.6},{:.6},{:.6}", e.epoch, e.lr, e.train_loss, e.val_loss, e.val_accuracy);
    })?;
    write_file(&run.out("train_log.csv"), log)?;
    Checkpoint::save(&run.out("checkpoint"), &run.cfg, &result.store, &norm, &ds.class_names)?;
    let focal = run.cfg.train.focal(ds.num_classes());
    let (_, preds) = evaluate(&model, &result.store, &test, &focal, run.cfg.train.batch_size)?;
    let report = compute_metrics(&preds, &test.labels(), ds.num_classes())?;
    write_file(&run.out("test_metrics.csv"), metrics_csv(&to_f64(&report.named())))?;
    println!("best epoch {}  test accuracy {:.4}", result.best_epoch, report.accuracy);
    run.finish()
}

fn cmd_eval(run: &Run, checkpoint: &Path, data: &DataArgs) -> CliResult<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let size = ck.cfg.model.image_size;
    let ds = if data.data == "synth" {
        synth_dataset(ck.cfg.model.num_classes, data.per_class, size, run.global.seed)?
    } else {
        load_image_tree(Path::new(&data.data), size)?
    };
    if ds.num_classes() != ck.cfg.model.num_classes {
        return Err(CliError::usage("dataset and checkpoint disagree on the class count"));
    }
    let ds = apply_zscore(&ds, &ck.norm);
    let focal = ck.cfg.train.focal(ds.num_classes());
    let (loss, preds) = evaluate(&ck.model, &ck.store, &ds, &focal, ck.cfg.train.batch_size)?;
    let report = compute_metrics(&preds, &ds.labels(), ds.num_classes())?;
    let mut named = to_f64(&report.named());
    named.push(("loss".into(), loss as f64));
    write_file(&run.out("eval_metrics.csv"), metrics_csv(&named))?;
    for (n, v) in &named {
        println!("{n:<12} {v:.4}");
    }
    Ok(())
}

fn summary_csv(summary: &FoldSummary) -> String {
    let mut s = String::from("metric,mean,std\n");
    for (name, m, sd) in &summary.stats {
        let _ = writeln!(s, "{name},{m:.6},{sd:.6}");
    }
    s
}

fn cmd_cv(run: &Run, data: &DataArgs, folds: usize, max_folds: Option<usize>) -> CliResult<()> {
    check_folds(folds)?;
    let ds = run.dataset(data)?;
    run.manifest("cv", &["folds.csv", "summary.csv", "checkpoints"])?;
    let cv = run_cv(&ds, &run.cfg.model, &run.cfg.train, folds, run.global.jobs, max_folds)?;
    for outcome in &cv.folds {
        let dir = run.out(&format!("checkpoints/fold{}", outcome.fold));
        Checkpoint::save(&dir, &run.cfg, &outcome.fit.store, &outcome.norm, &ds.class_names)?;
    }
    write_file(&run.out("folds.csv"), folds_csv(&cv.summary))?;
    write_file(&run.out("summary.csv"), summary_csv(&cv.summary))?;
    print!("{}", summary_table(&cv.summary));
    run.finish()
}

fn cmd_ablate(run: &Run, data: &DataArgs, folds: usize, max_folds: Option<usize>) -> CliResult<()> {
    check_folds(folds)?;
    let ds = run.dataset(data)?;
    run.manifest("ablate", &["ablation.csv"])?;
    let rows = run_ablation(&ABLATION_GRID, &ds, &run.cfg.model, &run.cfg.train, folds, run.global.jobs, max_folds)?;
    let csv = ablation_csv(&rows);
    write_file(&run.out("ablation.csv"), &csv)?;
    print!("{csv}");
    run.finish()
}

fn cmd_gradcam(
    run: &Run,
    checkpoint: &Path,
    image: &Path,
    target: Option<usize>,
    layer: Option<&str>,
) -> CliResult<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let bytes = std::fs::read(image).map_err(|e| Error::io(image, e))?;
    let raster = ppm::decode(&bytes).map_err(|msg| Error::Parse {
        path: image.to_path_buf(),
        msg,
    })?;
    if raster.channels != 3 {
        return Err(Error::Parse {
            path: image.to_path_buf(),
            msg: "expected an RGB (P6) image".into(),
        }
        .into());
    }
    let img = data::resize(&raster.to_chw(), ck.cfg.model.image_size);
    let normalized = data::normalize_image(&img, &ck.norm);
    let (h, w) = ck.cfg.model.image_size;
    let logits = ck.model.logits(&ck.store, &normalized.clone().reshape(&[1, 3, h, w])?)?;
    let predicted = predict(&logits)[0];
    let target = target.unwrap_or(predicted);
    let layer = match layer {
        Some(l) => l.to_string(),
        None => ck
            .model
            .default_cam_layer()
            .ok_or_else(|| CliError::usage("model has no feature layers"))?,
    };
    let cam = grad_cam(&ck.model, &ck.store, &normalized, target, &layer)?;
    write_file(&run.out("gradcam.pgm"), heatmap_pgm(&cam.heatmap))?;
    write_file(&run.out("overlay.ppm"), overlay_ppm(&img, &cam.heatmap)?)?;
    let probs = probabilities(&logits);
    let name = ck.classes.get(target).map_or("?", String::as_str);
    println!(
        "layer {layer}  target {target} ({name})  p={:.4}  predicted {predicted}",
        probs.data()[target]
    );
    Ok(())
}

fn cmd_profile(run: &Run, input: Option<&str>, flops: bool) -> CliResult<()> {
    let size = match input {
        Some(s) => {
            let (h, w) = s
                .split_once('x')
                .ok_or_else(|| CliError::usage(format!("--input expects HxW, got `{s}`")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| CliError::usage(format!("bad extent `{v}`")));
            (parse(h)?, parse(w)?)
        }
        None => run.cfg.model.image_size,
    };
    let with = profile_model(&run.cfg.model, size)?;
    let without = profile_model(&run.cfg.model.without_caga(), size)?;
    write_file(&run.out("profile.csv"), with.to_csv(flops))?;
    let unit = if flops { "FLOPs" } else { "MACs" };
    let scale = if flops { 2 } else { 1 };
    println!("with CAGA:    {} params, {} {unit}", with.total_params(), with.total_macs() * scale);
    println!("without CAGA: {} params, {} {unit}", without.total_params(), without.total_macs() * scale);
    println!(
        "CAGA delta:   {} params ({:+.2}% of the model without it)",
        with.total_params() as i64 - without.total_params() as i64,
        -100.0 * reduction(without.total_params(), with.total_params())
    );
    Ok(())
}

/// Checks `CAGA_PRECISION` against the compiled precision.
pub fn check_precision(requested: Option<&str>) -> CliResult<()> {
    match requested {
        None => Ok(()),
        Some(p) if p == PRECISION => Ok(()),
        Some(p @ ("f32" | "f64")) => Err(CliError::usage(format!(
            "CAGA_PRECISION={p} but this build uses {PRECISION}; rebuild {}",
            if p == "f32" { "with --features caga/f32" } else { "without the f32 feature" }
        ))),
        Some(p) => Err(CliError::usage(format!("CAGA_PRECISION must be f32 or f64, got `{p}`"))),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    check_precision(std::env::var("CAGA_PRECISION").ok().as_deref())?;
    if cli.global.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let run = Run::new(cli.global)?;
    match &cli.command {
        Command::Selftest => cmd_selftest(&run),
        Command::Synth {
            classes,
            per_class,
            size,
        } => cmd_synth(&run, *classes, *per_class, *size),
        Command::Train { data, folds, fold } => cmd_train(&run, data, *folds, *fold),
        Command::Eval { checkpoint, data } => cmd_eval(&run, checkpoint, data),
        Command::Cv {
            data,
            folds,
            max_folds,
        } => cmd_cv(&run, data, *folds, *max_folds),
        Command::Ablate {
            data,
            folds,
            max_folds,
        } => cmd_ablate(&run, data, *folds, *max_folds),
        Command::Gradcam {
            checkpoint,
            image,
            target,
            layer,
        } => cmd_gradcam(&run, checkpoint, image, *target, layer.as_deref()),
        Command::Profile { input, flops } => cmd_profile(&run, input.as_deref(), *flops),
    }
}
