//! Evaluation: scoring whole splits, confidence intervals over seeded runs,
//! per-image latency and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use panda_core::config::{LossMode, RunConfig};
use panda_core::data::{make_batch, Sample};
use panda_core::discriminator::Discriminator;
use panda_core::generator::{GenMode, Generator};
use panda_core::image::Label;
use panda_core::metrics::{auprc, roc_auc};
use panda_core::perceptual::FeatureExtractor;
use panda_core::rng::seeded_rng;
use panda_core::scoring::{combine_scores, normalize_records, raw_scores, ScoreRecord};
use panda_core::tensor::Tensor;
use panda_core::Error;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{io_err, PandaError, Result};
use crate::run::hex;

/// Batch size used when scoring; results do not depend on it.
pub const SCORE_BATCH: usize = 16;

/// Frozen models plus what scoring needs from the config.
pub struct Scorer<'a> {
    pub generator: &'a Generator<f32>,
    pub critic: &'a Discriminator<f32>,
    pub extractor: Option<&'a FeatureExtractor<f32>>,
    pub loss_mode: LossMode,
    pub weights: [f64; 3],
    pub channels: usize,
}

impl Scorer<'_> {
    /// Raw, combined and min-max normalised scores over `samples`, in order.
    /// Normalisation uses the scored set itself.
    pub fn score(&self, samples: &[&Sample]) -> Result<Vec<ScoreRecord>> {
        let mut records = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(SCORE_BATCH) {
            let batch = make_batch(chunk, self.channels)?;
            records.extend(raw_scores(
                &batch,
                self.generator,
                self.critic,
                self.loss_mode,
                self.extractor,
            )?);
        }
        combine_scores(&mut records, self.weights);
        normalize_records(&mut records)?;
        Ok(records)
    }
}

/// `(scores, is_anomalous)` of labelled records; unlabelled ones are skipped.
pub fn labelled(records: &[ScoreRecord]) -> (Vec<f64>, Vec<bool>) {
    records
        .iter()
        .filter(|r| r.label != Label::Unknown)
        .map(|r| (r.normalized, r.label == Label::Anomalous))
        .unzip()
}

/// Student-t interval `mean ± t * s / sqrt(n)` over per-run AUCs, clamped
/// to [0, 1].
pub fn auc_confidence_interval(aucs: &[f64], level: f64) -> Result<(f64, f64)> {
    const NEED: usize = 3;
    if aucs.len() < NEED {
        return Err(Error::TooFewRuns {
            got: aucs.len(),
            need: NEED,
        }
        .into());
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::DomainError {
            what: "confidence level",
            value: level,
        }
        .into());
    }
    let n = aucs.len() as f64;
    let mean = shifted_mean(aucs);
    let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("df >= 2")
        .inverse_cdf(0.5 + level / 2.0);
    let half = t * (var / n).sqrt();
    Ok(((mean - half).clamp(0.0, 1.0), (mean + half).clamp(0.0, 1.0)))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time_ms(f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

/// Median wall-clock milliseconds of single-image scoring passes
/// (reconstruction, critic on `x` and `x'`, reconstruction error) after
/// discarding `warmup` passes. Images are cycled if fewer than requested.
pub fn inference_latency(
    scorer: &Scorer<'_>,
    images: &[&Sample],
    n_images: usize,
    warmup: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyList.into());
    }
    let mut times = Vec::with_capacity(n_images);
    for i in 0..warmup + n_images.max(1) {
        let batch = make_batch(&[images[i % images.len()]], scorer.channels)?;
        let ms = time_ms(&mut || {
            raw_scores(
                &batch,
                scorer.generator,
                scorer.critic,
                scorer.loss_mode,
                scorer.extractor,
            )?;
            Ok(())
        })?;
        if i >= warmup {
            times.push(ms);
        }
    }
    Ok(median(times))
}

/// Paired medians `(infer, train)` of single-image generator forward passes.
/// Train mode samples latents and runs the secondary encoders.
pub fn paired_generator_latency(
    generator: &Generator<f32>,
    x: &Tensor<f32>,
    repeats: usize,
    warmup: usize,
) -> Result<(f64, f64)> {
    let mut rng = seeded_rng(0);
    let (mut inf, mut tr) = (Vec::new(), Vec::new());
    for i in 0..warmup + repeats.max(1) {
        let a = time_ms(&mut || {
            generator.run(x, GenMode::Infer, &mut rng)?;
            Ok(())
        })?;
        let b = time_ms(&mut || {
            generator.run(x, GenMode::Train, &mut rng)?;
            Ok(())
        })?;
        if i >= warmup {
            inf.push(a);
            tr.push(b);
        }
    }
    Ok((median(inf), median(tr)))
}

/// SHA-256 of the canonical config text.
pub fn config_hash(cfg: &RunConfig) -> String {
    hex(&Sha256::digest(cfg.to_text().as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Mean AUC over runs.
    pub auc: f64,
    pub auprc: f64,
    pub auc_ci_95: (f64, f64),
    /// Mean reconstruction error over the test set.
    pub avg_rec_err: f64,
    /// Mean of `1 - C(x')` over the test set.
    pub avg_adv_err: f64,
    pub latency_ms_per_image: f64,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub run_aucs: Vec<f64>,
    /// Seconds since the Unix epoch when the report was produced.
    pub created_unix: u64,
}

/// Per-run summary fed into [`MetricsReport::from_runs`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub auc: f64,
    pub auprc: f64,
    pub avg_rec_err: f64,
    pub avg_adv_err: f64,
    pub latency_ms: f64,
}

impl RunMetrics {
    pub fn from_records(seed: u64, records: &[ScoreRecord], latency_ms: f64) -> Result<Self> {
        let (s, l) = labelled(records);
        let n = records.len().max(1) as f64;
        Ok(Self {
            seed,
            auc: roc_auc(&s, &l)?,
            auprc: auprc(&s, &l)?,
            avg_rec_err: records.iter().map(|r| r.recon_err).sum::<f64>() / n,
            avg_adv_err: records.iter().map(|r| 1.0 - r.c_x_prime).sum::<f64>() / n,
            latency_ms,
        })
    }
}

/// Mean shifted by the first value, so identical values give that value
/// exactly.
fn shifted_mean(v: &[f64]) -> f64 {
    match v.first() {
        Some(&first) => first + v.iter().map(|a| a - first).sum::<f64>() / v.len() as f64,
        None => 0.0,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

impl MetricsReport {
    /// Aggregates seeded runs; the interval needs at least three runs, with
    /// fewer it collapses to the point estimate.
    pub fn from_runs(cfg: &RunConfig, runs: &[RunMetrics], created_unix: u64) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::EmptyList.into());
        }
        let aucs: Vec<f64> = runs.iter().map(|r| r.auc).collect();
        let auc = shifted_mean(&aucs);
        let ci = match auc_confidence_interval(&aucs, 0.95) {
            Ok(ci) => ci,
            Err(PandaError::Core(Error::TooFewRuns { .. })) => (auc, auc),
            Err(e) => return Err(e),
        };
        Ok(Self {
            auc,
            auprc: mean(runs.iter().map(|r| r.auprc)),
            auc_ci_95: ci,
            avg_rec_err: mean(runs.iter().map(|r| r.avg_rec_err)),
            avg_adv_err: mean(runs.iter().map(|r| r.avg_adv_err)),
            latency_ms_per_image: mean(runs.iter().map(|r| r.latency_ms)),
            config_hash: config_hash(cfg),
            seeds: runs.iter().map(|r| r.seed).collect(),
            run_aucs: aucs,
            created_unix,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Toml,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toml" => Ok(Self::Toml),
            "csv" => Ok(Self::Csv),
            other => Err(PandaError::UnknownFormat(other.to_string())),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(path.extension().and_then(|e| e.to_str()).unwrap_or(""))
    }
}

const CSV_FIELDS: &str = "auc,auprc,auc_ci_lo,auc_ci_hi,avg_rec_err,avg_adv_err,latency_ms_per_image,config_hash,seeds,run_aucs,created_unix";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

pub fn render_report(r: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Toml => {
            let mut t = toml::Table::new();
            t.insert("auc".into(), r.auc.into());
            t.insert("auprc".into(), r.auprc.into());
            t.insert(
                "auc_ci_95".into(),
                toml::Value::Array(vec![r.auc_ci_95.0.into(), r.auc_ci_95.1.into()]),
            );
            t.insert("avg_rec_err".into(), r.avg_rec_err.into());
            t.insert("avg_adv_err".into(), r.avg_adv_err.into());
            t.insert("latency_ms_per_image".into(), r.latency_ms_per_image.into());
            t.insert("config_hash".into(), r.config_hash.clone().into());
            t.insert(
                "seeds".into(),
                toml::Value::Array(
                    r.seeds
                        .iter()
                        .map(|&s| toml::Value::Integer(s as i64))
                        .collect(),
                ),
            );
            t.insert(
                "run_aucs".into(),
                toml::Value::Array(r.run_aucs.iter().map(|&a| a.into()).collect()),
            );
            t.insert(
                "created_unix".into(),
                toml::Value::Integer(r.created_unix as i64),
            );
            toml::to_string(&t).expect("plain values serialize")
        }
        ReportFormat::Csv => {
            let mut s = format!("{CSV_FIELDS}\n");
            let _ = writeln!(
                s,
                "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{},{}",
                r.auc,
                r.auprc,
                r.auc_ci_95.0,
                r.auc_ci_95.1,
                r.avg_rec_err,
                r.avg_adv_err,
                r.latency_ms_per_image,
                r.config_hash,
                join(&r.seeds),
                join(
                    &r.run_aucs
                        .iter()
                        .map(|a| format!("{a:?}"))
                        .collect::<Vec<_>>()
                ),
                r.created_unix
            );
            s
        }
    }
}

fn malformed(what: impl Into<String>) -> PandaError {
    PandaError::MalformedReport(what.into())
}

pub fn parse_report(text: &str, format: ReportFormat) -> Result<MetricsReport> {
    match format {
        ReportFormat::Toml => {
            let t: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| malformed(e.message()))?;
            let f = |k: &str| {
                t.get(k)
                    .and_then(toml::Value::as_float)
                    .ok_or_else(|| malformed(format!("missing `{k}`")))
            };
            let arr = |k: &str| {
                t.get(k)
                    .and_then(toml::Value::as_array)
                    .ok_or_else(|| malformed(format!("missing `{k}`")))
            };
            let ci = arr("auc_ci_95")?;
            let ci_f = |i: usize| {
                ci.get(i)
                    .and_then(toml::Value::as_float)
                    .ok_or_else(|| malformed("bad `auc_ci_95`"))
            };
            Ok(MetricsReport {
                auc: f("auc")?,
                auprc: f("auprc")?,
                auc_ci_95: (ci_f(0)?, ci_f(1)?),
                avg_rec_err: f("avg_rec_err")?,
                avg_adv_err: f("avg_adv_err")?,
                latency_ms_per_image: f("latency_ms_per_image")?,
                config_hash: t
                    .get("config_hash")
                    .and_then(toml::Value::as_str)
                    .ok_or_else(|| malformed("missing `config_hash`"))?
                    .to_string(),
                seeds: arr("seeds")?
                    .iter()
                    .map(|v| {
                        v.as_integer()
                            .map(|i| i as u64)
                            .ok_or_else(|| malformed("bad seed"))
                    })
                    .collect::<Result<_>>()?,
                run_aucs: arr("run_aucs")?
                    .iter()
                    .map(|v| v.as_float().ok_or_else(|| malformed("bad run auc")))
                    .collect::<Result<_>>()?,
                created_unix: t
                    .get("created_unix")
                    .and_then(toml::Value::as_integer)
                    .ok_or_else(|| malformed("missing `created_unix`"))?
                    as u64,
            })
        }
        ReportFormat::Csv => {
            let mut lines = text.lines();
            if lines.next() != Some(CSV_FIELDS) {
                return Err(malformed("unexpected CSV header"));
            }
            let row = lines.next().ok_or_else(|| malformed("missing CSV row"))?;
            let cols: Vec<&str> = row.split(',').collect();
            if cols.len() != CSV_FIELDS.split(',').count() {
                return Err(malformed("wrong number of CSV columns"));
            }
            let f = |i: usize| {
                cols[i]
                    .parse::<f64>()
                    .map_err(|_| malformed(format!("bad number `{}`", cols[i])))
            };
            let list =
                |i: usize| -> Vec<&str> { cols[i].split(';').filter(|s| !s.is_empty()).collect() };
            Ok(MetricsReport {
                auc: f(0)?,
                auprc: f(1)?,
                auc_ci_95: (f(2)?, f(3)?),
                avg_rec_err: f(4)?,
                avg_adv_err: f(5)?,
                latency_ms_per_image: f(6)?,
                config_hash: cols[7].to_string(),
                seeds: list(8)
                    .iter()
                    .map(|s| s.parse().map_err(|_| malformed("bad seed")))
                    .collect::<Result<_>>()?,
                run_aucs: list(9)
                    .iter()
                    .map(|s| s.parse().map_err(|_| malformed("bad run auc")))
                    .collect::<Result<_>>()?,
                created_unix: cols[10].parse().map_err(|_| malformed("bad timestamp"))?,
            })
        }
    }
}

pub fn write_report(r: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    fs::write(path, render_report(r, format)).map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let format = ReportFormat::from_path(path)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_report(&text, format)
}

/// Score table: `id,recon_err,c_x,c_x_prime,combined,normalized,label,decision`.
/// `decision` is `anomalous` when `normalized > threshold`.
pub fn scores_csv(records: &[ScoreRecord], threshold: f64) -> String {
    let mut s = String::from("id,recon_err,c_x,c_x_prime,combined,normalized,label,decision\n");
    for r in records {
        let decision = if r.normalized > threshold {
            "anomalous"
        } else {
            "normal"
        };
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},{},{}",
            r.id,
            r.recon_err,
            r.c_x,
            r.c_x_prime,
            r.combined,
            r.normalized,
            r.label.as_str(),
            decision
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        MetricsReport {
            auc: 0.8123456789,
            auprc: 0.7,
            auc_ci_95: (0.75, 0.9),
            avg_rec_err: 12.5,
            avg_adv_err: 1.0 / 3.0,
            latency_ms_per_image: 4.25,
            config_hash: "ab12".into(),
            seeds: vec![0, 1, 2],
            run_aucs: vec![0.8, 0.81, 0.1 + 0.2],
            created_unix: 1_700_000_000,
        }
    }

    #[test]
    fn report_round_trips() {
        for f in [ReportFormat::Toml, ReportFormat::Csv] {
            assert_eq!(
                parse_report(&render_report(&report(), f), f).unwrap(),
                report()
            );
        }
    }

    #[test]
    fn unknown_format_names_supported() {
        let e = ReportFormat::parse("json").unwrap_err().to_string();
        assert!(e.contains("toml") && e.contains("csv"), "{e}");
    }

    #[test]
    fn interval_examples() {
        assert_eq!(
            auc_confidence_interval(&[0.8, 0.8, 0.8], 0.95).unwrap(),
            (0.8, 0.8)
        );
        let (lo, hi) = auc_confidence_interval(&[0.7, 0.8, 0.9], 0.95).unwrap();
        // t(0.975, 2) = 4.302652729911275, s = 0.1, n = 3.
        let half = 4.302652729911275 * 0.1 / 3f64.sqrt();
        assert!((lo - (0.8 - half).max(0.0)).abs() < 1e-9);
        assert!((hi - (0.8 + half).min(1.0)).abs() < 1e-9);
        let (lo, hi) = auc_confidence_interval(&[0.6, 0.65, 0.7, 0.75], 0.95).unwrap();
        assert!(((lo + hi) / 2.0 - 0.675).abs() < 1e-12);
        assert!(matches!(
            auc_confidence_interval(&[0.5, 0.6], 0.95),
            Err(PandaError::Core(Error::TooFewRuns { got: 2, need: 3 }))
        ));
    }
}
