//! Command-line entry point wiring every module together.
//!
//! Exit codes: 0 on success, 2 for usage/configuration problems, 3 for
//! runtime failures. Relative output paths are resolved under the
//! `RESTORAD_OUT` environment variable when it is set.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Axis;

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    batch_iter, build_repartition, load_image, load_manifest, DataError, DatasetRepartition,
    ImageStore, Split, SplitSizes,
};
use crate::evaluation::{evaluate, export_heatmap, heatmaps_for_batch, EvalConfig, ScoreMode};
use crate::generator::Generator;
use crate::shapes::make_synthetic;
use crate::synthesis::{paired_batch, SynthParams};
use crate::training::{load_checkpoint, Trainer, TrainData, TrainError, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "RESTORAD_OUT";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::ConfigInvalid(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Resolve a possibly-relative path under the configured output root.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn config_keys_help() -> String {
    let toml = toml::to_string_pretty(&RunConfig::default()).expect("default config renders");
    format!(
        "Config file keys and their defaults (override any of them with --set key=value):\n\n{toml}"
    )
}

#[derive(Parser)]
#[command(
    name = "restorad",
    version,
    about = "Restoration-based anomaly detection: train, score, and inspect"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct SynthFlags {
    /// Lower bound of the corruption rectangle side, as a fraction of the image side.
    #[arg(long, default_value_t = SynthParams::default().patch_fraction_lo)]
    patch_lo: f64,
    /// Upper bound of the corruption rectangle side fraction.
    #[arg(long, default_value_t = SynthParams::default().patch_fraction_hi)]
    patch_hi: f64,
    /// Lower bound of the donor interpolation strength.
    #[arg(long, default_value_t = SynthParams::default().alpha_lo)]
    alpha_lo: f64,
    /// Upper bound of the donor interpolation strength.
    #[arg(long, default_value_t = SynthParams::default().alpha_hi)]
    alpha_hi: f64,
}

impl SynthFlags {
    fn params(&self) -> SynthParams {
        SynthParams {
            patch_fraction_lo: self.patch_lo,
            patch_fraction_hi: self.patch_hi,
            alpha_lo: self.alpha_lo,
            alpha_hi: self.alpha_hi,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset repartition from a manifest and persist it.
    Prepare {
        /// Manifest CSV (header: id,path,label,split).
        #[arg(long)]
        manifest: PathBuf,
        /// Anomaly ratio of the unlabeled split, in [0, 1].
        #[arg(long)]
        ar: f64,
        /// Size of the normal training split.
        #[arg(long, default_value_t = 200)]
        normal_train: usize,
        /// Size of the unlabeled training split.
        #[arg(long, default_value_t = 200)]
        unlabeled: usize,
        /// Normal test images.
        #[arg(long, default_value_t = 100)]
        test_normal: usize,
        /// Abnormal test images.
        #[arg(long, default_value_t = 100)]
        test_abnormal: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output repartition file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic-shapes dataset (smooth backgrounds; abnormal
    /// images carry 1-3 bright elliptical blobs).
    MakeSynthetic {
        #[arg(long, default_value_t = 500)]
        n_normal: usize,
        #[arg(long, default_value_t = 250)]
        n_abnormal: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for images/ and manifest.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write source | pseudo-anomaly | mask strips for visual audit.
    SynthPreview {
        /// Repartition file; sources come from its normal training split.
        #[arg(long)]
        repartition: PathBuf,
        /// Number of preview strips.
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side length used for loading.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[command(flatten)]
        synth: SynthFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a run config file.
    #[command(after_help = config_keys_help())]
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path overrides, e.g. --set train.lr=1e-4.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a test split with a trained checkpoint and report AUC/AP.
    Eval {
        /// Checkpoint directory (ckpt_*/ with generator.bin inside).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        repartition: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ScoreModeArg::Mean)]
        score_mode: ScoreModeArg,
        /// Top fraction of pixels averaged in topk-mean mode.
        #[arg(long, default_value_t = 0.01)]
        topk_fraction: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Restore images and export |restoration - input| heatmaps.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Image files to restore.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ScoreModeArg {
    Mean,
    Max,
    TopkMean,
}

impl From<ScoreModeArg> for ScoreMode {
    fn from(v: ScoreModeArg) -> Self {
        match v {
            ScoreModeArg::Mean => ScoreMode::Mean,
            ScoreModeArg::Max => ScoreMode::Max,
            ScoreModeArg::TopkMean => ScoreMode::TopkMean,
        }
    }
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with code 0; errors go to
            // stderr with the usage exit code
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Prepare {
            manifest,
            ar,
            normal_train,
            unlabeled,
            test_normal,
            test_abnormal,
            seed,
            out,
        } => cmd_prepare(
            &manifest,
            ar,
            SplitSizes {
                normal_train,
                unlabeled,
                test_normal,
                test_abnormal,
            },
            seed,
            &resolve_out(&out),
        ),
        Command::MakeSynthetic {
            n_normal,
            n_abnormal,
            size,
            seed,
            out,
        } => cmd_make_synthetic(n_normal, n_abnormal, size, seed, &resolve_out(&out)),
        Command::SynthPreview {
            repartition,
            count,
            seed,
            size,
            channels,
            synth,
            out,
        } => cmd_synth_preview(
            &repartition,
            count,
            seed,
            size,
            channels,
            &synth.params(),
            &resolve_out(&out),
        ),
        Command::Train {
            config,
            set,
            resume,
        } => cmd_train(&config, &set, resume.as_deref()),
        Command::Eval {
            checkpoint,
            repartition,
            out,
            score_mode,
            topk_fraction,
            batch_size,
        } => cmd_eval(
            &checkpoint,
            &repartition,
            &resolve_out(&out),
            EvalConfig {
                score_mode: score_mode.into(),
                topk_fraction,
                batch_size,
            },
        ),
        Command::Heatmap {
            checkpoint,
            out,
            images,
        } => cmd_heatmap(&checkpoint, &resolve_out(&out), &images),
    }
}

fn data_usage(e: DataError) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn cmd_prepare(
    manifest: &Path,
    ar: f64,
    sizes: SplitSizes,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let records = load_manifest(manifest).map_err(data_usage)?;
    let rep = build_repartition(&records, ar, &sizes, seed).map_err(data_usage)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Runtime(format!("cannot create {parent:?}: {e}")))?;
        }
    }
    rep.save(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let hidden = rep.hidden_abnormal_count();
    println!("repartition written to {}", out.display());
    println!(
        "normal_train {}  unlabeled_train {}  test {}",
        rep.normal_train.len(),
        rep.unlabeled_train.len(),
        rep.test.len()
    );
    println!(
        "hidden abnormal in unlabeled: {hidden} (ratio {:.4}, requested {:.4})",
        hidden as f64 / rep.unlabeled_train.len().max(1) as f64,
        ar
    );
    Ok(())
}

pub fn cmd_make_synthetic(
    n_normal: usize,
    n_abnormal: usize,
    size: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let summary = make_synthetic(n_normal, n_abnormal, size, seed, out)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "wrote {} normal + {} abnormal images ({}x{}) under {}",
        summary.n_normal,
        summary.n_abnormal,
        summary.size,
        summary.size,
        out.display()
    );
    println!("manifest: {}", summary.manifest.display());
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (crate::data::denormalize_intensity(v) * 255.0)
        .round()
        .clamp(0.0, 255.0) as u8
}

pub fn cmd_synth_preview(
    repartition: &Path,
    count: usize,
    seed: u64,
    size: usize,
    channels: usize,
    params: &SynthParams,
    out: &Path,
) -> Result<(), CliError> {
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let rep = DatasetRepartition::load(repartition).map_err(data_usage)?;
    let batches = batch_iter(&rep, Split::NormalTrain, count.max(1), seed, 0, true)
        .map_err(data_usage)?;
    let records = &batches[0];
    let mut batch = ndarray::Array4::zeros((records.len(), channels, size, size));
    for (bi, r) in records.iter().enumerate() {
        let img = load_image(r, size, channels).map_err(|e| CliError::Runtime(e.to_string()))?;
        batch.index_axis_mut(Axis(0), bi).assign(&img.data);
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let mut rng = crate::rng::derive_rng(seed, "synth_preview", &[]);
    let (pseudo, masks, alphas) =
        paired_batch(&batch, &ids, params, &mut rng).map_err(|e| CliError::Runtime(e.to_string()))?;

    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {out:?}: {e}")))?;
    for (bi, id) in ids.iter().enumerate() {
        let mut strip = image::GrayImage::new((size * 3) as u32, size as u32);
        for y in 0..size {
            for x in 0..size {
                strip.put_pixel(x as u32, y as u32, image::Luma([to_u8(batch[[bi, 0, y, x]])]));
                strip.put_pixel(
                    (size + x) as u32,
                    y as u32,
                    image::Luma([to_u8(pseudo[[bi, 0, y, x]])]),
                );
                strip.put_pixel(
                    (2 * size + x) as u32,
                    y as u32,
                    image::Luma([masks[bi][[y, x]] * 255]),
                );
            }
        }
        let path = out.join(format!("{id}_preview.png"));
        strip
            .save(&path)
            .map_err(|e| CliError::Runtime(format!("cannot write {path:?}: {e}")))?;
        println!("{} alpha {:.3} -> {}", id, alphas[bi], path.display());
    }
    Ok(())
}

pub fn cmd_train(
    config_path: &Path,
    overrides: &[String],
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path, overrides)?;
    cfg.generator
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.critic
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.train.validate()?;
    cfg.synth
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let rep_path = cfg
        .data
        .repartition
        .clone()
        .ok_or_else(|| CliError::Usage("config is missing data.repartition".into()))?;

    let out_dir = resolve_out(&cfg.output_dir);
    cfg.echo(&out_dir)?;
    let fingerprint = cfg.fingerprint();
    println!("config fingerprint {fingerprint}");

    let rep = DatasetRepartition::load(&rep_path).map_err(data_usage)?;
    let mut store = ImageStore::new(cfg.generator.input_size, cfg.generator.channels_in);
    let data = TrainData::preload(&rep, &mut store, cfg.train.include_unlabeled)?;

    let mut state = match resume {
        Some(dir) => {
            let state = load_checkpoint(dir, &cfg.train)?;
            if state.generator.config != cfg.generator {
                return Err(CliError::Usage(
                    "checkpoint generator config differs from the run config".into(),
                ));
            }
            if state.critic.config != cfg.critic {
                return Err(CliError::Usage(
                    "checkpoint critic config differs from the run config".into(),
                ));
            }
            println!("resumed from {} at iteration {}", dir.display(), state.iteration);
            state
        }
        None => TrainState::init(cfg.generator.clone(), cfg.critic.clone(), cfg.train.seed)?,
    };

    let trainer = Trainer {
        cfg: &cfg.train,
        synth: &cfg.synth,
        data: &data,
        out_dir: Some(out_dir.clone()),
    };
    let log_path = out_dir.join("loss_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::Runtime(format!("cannot open {log_path:?}: {e}")))?;

    trainer.run(&mut state, |iteration, b| {
        crate::training::append_loss_line(&mut log_file, iteration, b)
            .expect("loss log writable");
        if iteration % 100 == 0 || iteration == cfg.train.max_iterations {
            println!(
                "iter {iteration}  g_total {:.4}  id {:.4}  rec {:.4}  g_adv {:.4}  d_total {:.4}",
                b.g_total, b.id, b.rec, b.g_adv, b.d_total
            );
            let _ = std::io::stdout().flush();
        }
    })?;

    println!(
        "training finished at iteration {}; checkpoints under {}",
        state.iteration,
        out_dir.display()
    );
    Ok(())
}

fn checkpoint_iteration(dir: &Path) -> u64 {
    #[derive(serde::Deserialize)]
    struct Meta {
        iteration: u64,
    }
    std::fs::read_to_string(dir.join("state.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<Meta>(&s).ok())
        .map(|m| m.iteration)
        .unwrap_or(0)
}

pub fn cmd_eval(
    checkpoint: &Path,
    repartition: &Path,
    out: &Path,
    eval_cfg: EvalConfig,
) -> Result<(), CliError> {
    let generator = Generator::load(&checkpoint.join("generator.bin"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let rep = DatasetRepartition::load(repartition).map_err(data_usage)?;
    let mut store = ImageStore::new(generator.config.input_size, generator.config.channels_in);

    let fingerprint = {
        let blob = serde_json::json!({
            "generator": &generator.config,
            "eval": &eval_cfg,
        });
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(blob.to_string().as_bytes());
        let mut s = String::new();
        for b in digest.iter().take(6) {
            s.push_str(&format!("{b:02x}"));
        }
        s
    };
    println!("config fingerprint {fingerprint}");

    let report = evaluate(
        &generator,
        &rep.test,
        &mut store,
        &eval_cfg,
        &fingerprint,
        checkpoint_iteration(checkpoint),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {out:?}: {e}")))?;
    report
        .save_text(&out.join("report.txt"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    report
        .save_json(&out.join("report.json"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "evaluated {} images: AUC {:.4}  AP {:.4}",
        report.entries.len(),
        report.auc,
        report.ap
    );
    println!("report written to {}", out.join("report.txt").display());
    Ok(())
}

pub fn cmd_heatmap(checkpoint: &Path, out: &Path, images: &[PathBuf]) -> Result<(), CliError> {
    let generator = Generator::load(&checkpoint.join("generator.bin"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {out:?}: {e}")))?;
    let size = generator.config.input_size;
    let channels = generator.config.channels_in;
    for path in images {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let record = crate::data::ImageRecord::adhoc(id, path.clone());
        let img = load_image(&record, size, channels).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut batch = ndarray::Array4::zeros((1, channels, size, size));
        batch.index_axis_mut(Axis(0), 0).assign(&img.data);
        let maps = heatmaps_for_batch(&generator, &batch)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let png = out.join(format!("{}_heat.png", record.id));
        let sidecar = out.join(format!("{}_heat.json", record.id));
        export_heatmap(&maps[0], &png, &sidecar).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("{} -> {}", path.display(), png.display());
    }
    Ok(())
}
