//! `panda` command line: train, pretrain-pl, score, eval, mask, synth.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use panda_core::config::{ConfigValue, LossMode, RunConfig};
use panda_core::data::{make_batch, synth_anomaly_dataset, DatasetHandle, Sample, Split};
use panda_core::perceptual::{pretrain_rotation, rotation_accuracy, FeatureExtractor, Provenance};
use panda_core::rng::substream;
use panda_core::scoring::{decide_threshold, MinMax, ScoreRecord};
use panda_core::train::{load_models, TrainState};

use crate::config_file::resolve_config;
use crate::dataset::{load_folder_dataset, load_image_dir, write_folder_dataset};
use crate::error::{io_err, PandaError, Result};
use crate::eval::{
    inference_latency, render_report, scores_csv, write_report, MetricsReport, ReportFormat,
    RunMetrics, Scorer,
};
use crate::export::{compute_masks, write_masks};
use crate::run::{
    read_checkpoint, train_run, write_checkpoint, write_manifest, RunOptions, CHECKPOINT_FILE,
};

#[derive(Debug, Parser)]
#[command(
    name = "panda",
    version,
    about = "Semi-supervised image anomaly detection with a dual-encoder VAE-GAN"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override config-file keys (flag > file > default).
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML config file with dotted or sectioned keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Reconstruction loss: pwl, pl-g or pl-ps (`loss.mode`).
    #[arg(long, value_name = "MODE")]
    pub loss: Option<String>,
    /// Feature extractor weight file for perceptual losses (`loss.extractor`).
    #[arg(long, value_name = "FILE")]
    pub extractor: Option<PathBuf>,
    /// Run seed (`train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs (`train.epochs`).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Square input resolution (`model.image_size`).
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Mini-batch size (`train.batch_size`).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable the secondary high encoder (`ablation.e1_high = false`).
    #[arg(long)]
    pub no_e1_high: bool,
    /// Disable the secondary low encoder (`ablation.e1_low = false`).
    #[arg(long)]
    pub no_e1_low: bool,
    /// Disable the high latent path (`ablation.high_path = false`).
    #[arg(long)]
    pub no_high_path: bool,
    /// Skip combination: multiply or concat (`model.skip_mode`).
    #[arg(long, value_name = "MODE")]
    pub skip_mode: Option<String>,
    /// Any config key, e.g. `--set optim.lr_generator=1e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_value(text: &str) -> ConfigValue {
    let doc = format!("v = {text}");
    match doc
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("v").cloned())
    {
        Some(toml::Value::Integer(i)) => ConfigValue::Int(i),
        Some(toml::Value::Float(f)) => ConfigValue::Float(f),
        Some(toml::Value::Boolean(b)) => ConfigValue::Bool(b),
        Some(toml::Value::String(s)) => ConfigValue::Str(s),
        Some(toml::Value::Array(a)) if a.iter().all(|v| v.is_integer() || v.is_float()) => {
            ConfigValue::List(
                a.iter()
                    .map(|v| {
                        v.as_float()
                            .unwrap_or_else(|| v.as_integer().unwrap_or(0) as f64)
                    })
                    .collect(),
            )
        }
        _ => ConfigValue::Str(text.to_string()),
    }
}

impl ConfigArgs {
    pub fn overrides(&self) -> Result<Vec<(String, ConfigValue)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| PandaError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            out.push((k.trim().to_string(), parse_value(v.trim())));
        }
        let mut push = |k: &str, v: ConfigValue| out.push((k.to_string(), v));
        if let Some(v) = &self.loss {
            push("loss.mode", ConfigValue::Str(v.clone()));
        }
        if let Some(v) = &self.extractor {
            push("loss.extractor", ConfigValue::Str(v.display().to_string()));
        }
        if let Some(v) = self.seed {
            push("train.seed", ConfigValue::Int(v as i64));
        }
        if let Some(v) = self.epochs {
            push("train.epochs", ConfigValue::Int(v as i64));
        }
        if let Some(v) = self.image_size {
            push("model.image_size", ConfigValue::Int(v as i64));
        }
        if let Some(v) = self.batch_size {
            push("train.batch_size", ConfigValue::Int(v as i64));
        }
        if self.no_e1_high {
            push("ablation.e1_high", ConfigValue::Bool(false));
        }
        if self.no_e1_low {
            push("ablation.e1_low", ConfigValue::Bool(false));
        }
        if self.no_high_path {
            push("ablation.high_path", ConfigValue::Bool(false));
        }
        if let Some(v) = &self.skip_mode {
            push("model.skip_mode", ConfigValue::Str(v.clone()));
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        resolve_config(self.config.as_deref(), &self.overrides()?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, loss log and manifest to --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Folder dataset root (train/normal, test/normal, test/anomalous).
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many optimisation steps.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Resume from a training checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Pretrain a problem-specific feature extractor on the normal training
    /// images (rotation prediction) and write its weight file.
    PretrainPl {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output weight file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test (and validation) split of a folder dataset, or an
    /// unlabelled image directory, and write scores.csv.
    Score {
        /// Training checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Folder dataset root.
        #[arg(long, conflicts_with = "images", required_unless_present = "images")]
        data: Option<PathBuf>,
        /// Directory of unlabelled images.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Extractor weight file, overriding the one recorded in the checkpoint.
        #[arg(long, value_name = "FILE")]
        extractor: Option<PathBuf>,
        /// Decision threshold on normalised scores; calibrated when omitted.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write per-sample mask PNGs under <out>/masks.
        #[arg(long)]
        masks: bool,
    },
    /// Train and score --runs seeded runs and write a metrics report with a
    /// 95% confidence interval.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Folder dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of independent runs.
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Run i uses seed seed_base + i.
        #[arg(long)]
        seed_base: u64,
        /// Step limit per run.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Report format: toml or csv.
        #[arg(long, default_value = "toml")]
        format: String,
    },
    /// Write anomaly mask PNGs for a directory of images.
    Mask {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of each map's maximum at which pixels are set.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write unthresholded heatmaps.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Write a synthetic folder dataset with ground-truth masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Normal images; 80% go to train/normal.
        #[arg(long, default_value_t = 200)]
        normal: usize,
        #[arg(long, default_value_t = 40)]
        anomalous: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
}

/// Extractor named by the config, if the loss mode uses one.
pub fn load_extractor(cfg: &RunConfig) -> Result<Option<FeatureExtractor<f32>>> {
    if !cfg.loss_mode.needs_extractor() {
        return Ok(None);
    }
    let path = cfg
        .extractor_path
        .as_ref()
        .ok_or_else(|| panda_core::Error::MissingKey("loss.extractor".into()))?;
    let provenance = match cfg.loss_mode {
        LossMode::PlGeneral => Provenance::General,
        _ => Provenance::ProblemSpecific,
    };
    let ck = read_checkpoint(Path::new(path))?;
    Ok(Some(FeatureExtractor::from_checkpoint(
        &ck,
        cfg.tap_layer,
        provenance,
    )?))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(io_err(p))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(io_err(p))
}

/// Threshold from a calibration population normalised with the scored
/// set's range: validation records when present, otherwise the normal
/// training images (normal-only rule).
fn calibrate(scorer: &Scorer<'_>, data: &DatasetHandle, range: MinMax) -> Result<f64> {
    let valid = data.split(Split::Valid);
    let calib: Vec<&Sample> = if valid.is_empty() {
        data.split(Split::Train)
    } else {
        valid
    };
    let mut recs = Vec::new();
    for chunk in calib.chunks(crate::eval::SCORE_BATCH) {
        let batch = make_batch(chunk, scorer.channels)?;
        recs.extend(panda_core::scoring::raw_scores(
            &batch,
            scorer.generator,
            scorer.critic,
            scorer.loss_mode,
            scorer.extractor,
        )?);
    }
    panda_core::scoring::combine_scores(&mut recs, scorer.weights);
    let scores: Vec<f64> = recs.iter().map(|r| range.apply(r.combined)).collect();
    let labels: Vec<_> = recs.iter().map(|r| r.label).collect();
    Ok(decide_threshold(&scores, &labels)?)
}

fn fitted_range(records: &[ScoreRecord]) -> Result<MinMax> {
    Ok(MinMax::fit(
        &records.iter().map(|r| r.combined).collect::<Vec<_>>(),
    )?)
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            cfg,
            data,
            out,
            max_steps,
            resume,
        } => {
            let cfg = cfg.resolve()?;
            let extractor = load_extractor(&cfg)?;
            let data = load_folder_dataset(&data, cfg.image_size)?;
            let state = TrainState::new(cfg)?;
            let state = train_run(
                state,
                &data,
                extractor.as_ref(),
                &out,
                &RunOptions { max_steps, resume },
            )?;
            println!(
                "trained {} steps; checkpoint {}",
                state.step,
                out.join(CHECKPOINT_FILE).display()
            );
            Ok(())
        }
        Command::PretrainPl { cfg, data, out } => {
            let cfg = cfg.resolve()?;
            let data = load_folder_dataset(&data, cfg.image_size)?;
            let train = data.split(Split::Train);
            let images = make_batch(&train, cfg.channels)?.data().clone();
            let mut rng = substream(cfg.seed, 3);
            let res = pretrain_rotation(
                &images,
                cfg.extractor_width,
                cfg.tap_layer,
                cfg.pretrain_epochs,
                cfg.batch_size,
                cfg.lr_perceptual,
                cfg.sgd_momentum,
                &mut rng,
            )?;
            write_checkpoint(&res.extractor.to_checkpoint(), &out)?;
            let acc = rotation_accuracy(&res.extractor, &res.head, &images)?;
            println!(
                "pretrained extractor written to {}; rotation accuracy {acc:.3}",
                out.display()
            );
            Ok(())
        }
        Command::Score {
            checkpoint,
            data,
            images,
            out,
            extractor,
            threshold,
            masks,
        } => {
            let ck = read_checkpoint(&checkpoint)?;
            let (mut cfg, generator, critic) = load_models(&ck)?;
            if let Some(p) = extractor {
                cfg.extractor_path = Some(p.display().to_string());
            }
            let ex = load_extractor(&cfg)?;
            let scorer = Scorer {
                generator: &generator,
                critic: &critic,
                extractor: ex.as_ref(),
                loss_mode: cfg.loss_mode,
                weights: cfg.score_weights,
                channels: cfg.channels,
            };
            mkdir(&out)?;
            let handle = match &data {
                Some(d) => Some(load_folder_dataset(d, cfg.image_size)?),
                None => None,
            };
            let loose = match (&handle, &images) {
                (None, Some(i)) => load_image_dir(i, cfg.image_size)?,
                (None, None) => {
                    return Err(PandaError::Usage(
                        "one of --data or --images is required".into(),
                    ))
                }
                _ => Vec::new(),
            };
            let samples: Vec<&Sample> = match &handle {
                Some(h) => h.split(Split::Test),
                None => loose.iter().collect(),
            };
            let records = scorer.score(&samples)?;
            let thr = match (threshold, &handle) {
                (Some(t), _) => t,
                (None, Some(h)) => calibrate(&scorer, h, fitted_range(&records)?)?,
                (None, None) => 0.5,
            };
            write_text(&out.join("scores.csv"), &scores_csv(&records, thr))?;
            if masks {
                for chunk in samples.chunks(crate::eval::SCORE_BATCH) {
                    let set = compute_masks(
                        &generator,
                        chunk,
                        cfg.channels,
                        cfg.mask_threshold,
                        cfg.mask_sigma,
                    )?;
                    write_masks(&set, &out.join("masks"), false)?;
                }
            }
            write_manifest(&out)?;
            println!("scored {} samples; threshold {thr:.4}", records.len());
            Ok(())
        }
        Command::Eval {
            cfg,
            data,
            out,
            runs,
            seed_base,
            max_steps,
            format,
        } => {
            let format = ReportFormat::parse(&format)?;
            if runs == 0 {
                return Err(PandaError::Usage("--runs must be at least 1".into()));
            }
            let base = cfg.resolve()?;
            let extractor = load_extractor(&base)?;
            let data = load_folder_dataset(&data, base.image_size)?;
            let test = data.split(Split::Test);
            let mut metrics = Vec::with_capacity(runs);
            for i in 0..runs {
                let mut c = base.clone();
                c.seed = seed_base + i as u64;
                let dir = out.join(format!("run_{i:02}"));
                let opts = RunOptions {
                    max_steps,
                    resume: None,
                };
                let state = train_run(
                    TrainState::new(c.clone())?,
                    &data,
                    extractor.as_ref(),
                    &dir,
                    &opts,
                )?;
                let scorer = Scorer {
                    generator: &state.generator,
                    critic: &state.critic,
                    extractor: extractor.as_ref(),
                    loss_mode: c.loss_mode,
                    weights: c.score_weights,
                    channels: c.channels,
                };
                let records = scorer.score(&test)?;
                write_text(&dir.join("scores.csv"), &scores_csv(&records, f64::NAN))?;
                let latency = inference_latency(&scorer, &test, 20, 3)?;
                let m = RunMetrics::from_records(c.seed, &records, latency)?;
                println!(
                    "run {i} seed {}: auc {:.4} auprc {:.4}",
                    c.seed, m.auc, m.auprc
                );
                metrics.push(m);
            }
            let report = MetricsReport::from_runs(&base, &metrics, now_unix())?;
            let name = match format {
                ReportFormat::Toml => "report.toml",
                ReportFormat::Csv => "report.csv",
            };
            write_report(&report, &out.join(name), format)?;
            write_manifest(&out)?;
            print!("{}", render_report(&report, format));
            Ok(())
        }
        Command::Mask {
            checkpoint,
            images,
            out,
            threshold,
            heatmaps,
        } => {
            let ck = read_checkpoint(&checkpoint)?;
            let (cfg, generator, _) = load_models(&ck)?;
            let samples = load_image_dir(&images, cfg.image_size)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let fraction = threshold.unwrap_or(cfg.mask_threshold);
            mkdir(&out)?;
            let mut n = 0;
            for chunk in refs.chunks(crate::eval::SCORE_BATCH) {
                let set = compute_masks(&generator, chunk, cfg.channels, fraction, cfg.mask_sigma)?;
                n += write_masks(&set, &out, heatmaps)?.len();
            }
            write_manifest(&out)?;
            println!("wrote {n} files to {}", out.display());
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            normal,
            anomalous,
            image_size,
        } => {
            if normal == 0 || anomalous == 0 {
                return Err(PandaError::Usage(
                    "--normal and --anomalous must be at least 1".into(),
                ));
            }
            let h = synth_anomaly_dataset(seed, normal, anomalous, image_size);
            write_folder_dataset(&h, &out)?;
            let (a, b, c) = h.counts();
            println!(
                "wrote {a} train / {b} test normal / {c} test anomalous images to {}",
                out.display()
            );
            Ok(())
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for runtime errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e @ PandaError::Usage(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
