//! Seeded Monte-Carlo sweeps over SNR and extrapolation bandwidth, with CSV output.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{delay_crb, nomp_run, omp_finegrid, omp_refined, NompConfig, DEFAULT_CELL_BUDGET};
use crate::blocksparse::{block_estimate, BlockConfig};
use crate::channel::{
    channel_nmse, delay_nmse_with, norm_sqr, synthesize_band, Band, ChannelConfig, DelayMatching, Observation, PathSet,
};
use crate::error::{Error, Result};
use crate::extrapolate::{
    adaptive_rank, estimate_operator, lowrank_lox, lox_estimate_2d, optimal_basis, LoxConfig,
};
use crate::qnomp::{qnomp_run, EstimationResult, QnompConfig};
use crate::simulate::{add_noise_with, sigma2_for_snr, substream, ScenarioSpec, STREAM_NOISE};

/// Environment variable holding the worker-thread count for [`run_experiment`].
pub const WORKERS_ENV: &str = "QNOMP_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    OmpFinegrid,
    OmpRefined,
    Nomp,
    Qnomp,
    QnompBlock,
    Lox,
    LowrankLox,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        Self::OmpFinegrid,
        Self::OmpRefined,
        Self::Nomp,
        Self::Qnomp,
        Self::QnompBlock,
        Self::Lox,
        Self::LowrankLox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::OmpFinegrid => "omp_finegrid",
            Self::OmpRefined => "omp_refined",
            Self::Nomp => "nomp",
            Self::Qnomp => "qnomp",
            Self::QnompBlock => "qnomp_block",
            Self::Lox => "lox",
            Self::LowrankLox => "lowrank_lox",
        }
    }

    fn needs_qnomp(self) -> bool {
        matches!(self, Self::Qnomp | Self::QnompBlock | Self::Lox | Self::LowrankLox)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineGridConfig {
    /// Grid spacing as a fraction of the standard step.
    pub scale: f64,
    pub cell_budget: usize,
}

impl Default for FineGridConfig {
    fn default() -> Self {
        Self { scale: 0.1, cell_budget: DEFAULT_CELL_BUDGET }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowRankConfig {
    /// Fixed rank; `None` keeps the eigenvalues above the noise level.
    pub rank: Option<usize>,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_bandwidths() -> Vec<usize> {
    vec![0]
}
fn default_output() -> PathBuf {
    PathBuf::from("results.csv")
}

/// One experiment, parsed from TOML with unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub channel: ChannelConfig,
    pub scenario: ScenarioSpec,
    pub estimators: Vec<EstimatorKind>,
    pub snr_grid_db: Vec<f64>,
    pub trials: usize,
    /// Extrapolation band counts `K`; `0` reports pilot-band estimation error.
    #[serde(default = "default_bandwidths")]
    pub bandwidth_factors: Vec<usize>,
    #[serde(default = "default_output")]
    pub output_path: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub qnomp: QnompConfig,
    #[serde(default)]
    pub nomp: NompConfig,
    #[serde(default)]
    pub blocks: BlockConfig,
    #[serde(default)]
    pub lox: LoxConfig,
    #[serde(default)]
    pub finegrid: FineGridConfig,
    #[serde(default)]
    pub lowrank: LowRankConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.channel.validate().map_err(cfg_err)?;
        self.scenario.validate().map_err(cfg_err)?;
        self.qnomp.validate().map_err(cfg_err)?;
        self.blocks.validate().map_err(cfg_err)?;
        self.lox.rule().map_err(cfg_err)?;
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.snr_grid_db.is_empty() || self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("snr_grid_db must be a nonempty list of finite values".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimator list is empty".into()));
        }
        if self.bandwidth_factors.is_empty() {
            return Err(Error::Config("bandwidth_factors must not be empty".into()));
        }
        if !(self.finegrid.scale > 0.0 && self.finegrid.scale <= 1.0) {
            return Err(Error::Config(format!("finegrid.scale must lie in (0, 1], got {}", self.finegrid.scale)));
        }
        Ok(())
    }

    fn max_bands(&self) -> usize {
        self.bandwidth_factors.iter().copied().max().unwrap_or(0)
    }
}

/// Aggregated metrics for one (estimator, SNR, bandwidth) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub estimator: String,
    pub scenario: String,
    /// Realized SNR averaged over trials, in dB.
    pub snr_db: f64,
    /// Total subcarriers `M(K+1)`.
    pub bandwidth_label: usize,
    pub channel_nmse: f64,
    pub delay_nmse: f64,
    /// Mean delay CRB in units of `Δτ²`.
    pub crb: f64,
    pub cpu_seconds: f64,
    pub n_paths_mean: f64,
    /// Trials that produced an estimate.
    pub trials: usize,
    /// Trials in which the estimator returned an error.
    pub failures: usize,
}

pub const CSV_HEADER: [&str; 11] = [
    "estimator",
    "scenario",
    "snr_db",
    "bandwidth_label",
    "channel_nmse",
    "delay_nmse",
    "crb",
    "cpu_seconds",
    "n_paths_mean",
    "trials",
    "failures",
];

/// Six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.5e}")
    } else {
        x.to_string()
    }
}

pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let io = |source: std::io::Error| Error::Io { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(CSV_HEADER).map_err(|e| io(e.into()))?;
    for r in rows {
        w.write_record([
            r.estimator.clone(),
            r.scenario.clone(),
            format_sig6(r.snr_db),
            r.bandwidth_label.to_string(),
            format_sig6(r.channel_nmse),
            format_sig6(r.delay_nmse),
            format_sig6(r.crb),
            format_sig6(r.cpu_seconds),
            format_sig6(r.n_paths_mean),
            r.trials.to_string(),
            r.failures.to_string(),
        ])
        .map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let io = |source: std::io::Error| Error::Io { path: path.to_path_buf(), source };
    let bad = |what: &str| Error::Config(format!("{}: malformed {what}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(|e| io(e.into()))?;
    let header = rd.headers().map_err(|e| io(e.into()))?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(bad("header"));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| io(e.into()))?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i]));
        let u = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(CSV_HEADER[i]));
        rows.push(ResultRow {
            estimator: rec[0].to_string(),
            scenario: rec[1].to_string(),
            snr_db: f(2)?,
            bandwidth_label: u(3)?,
            channel_nmse: f(4)?,
            delay_nmse: f(5)?,
            crb: f(6)?,
            cpu_seconds: f(7)?,
            n_paths_mean: f(8)?,
            trials: u(9)?,
            failures: u(10)?,
        });
    }
    Ok(rows)
}

/// CPU time consumed by the calling thread, in seconds.
pub fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Run `f` and return its output with the CPU seconds it consumed on this thread.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t0 = thread_cpu_seconds();
    let out = f();
    (out, (thread_cpu_seconds() - t0).max(0.0))
}

/// Everything an estimator produces for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    pub pilot: Vec<Complex64>,
    /// Extrapolation bands `1..=K_max`, subcarrier-major.
    pub extrapolation: Vec<Complex64>,
    pub taus: Vec<f64>,
    pub n_paths: usize,
    pub cpu_seconds: f64,
}

/// Per-experiment estimator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorSettings {
    pub qnomp: QnompConfig,
    pub nomp: NompConfig,
    pub blocks: BlockConfig,
    pub lox: LoxConfig,
    pub finegrid: FineGridConfig,
    pub lowrank: LowRankConfig,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            qnomp: QnompConfig::default(),
            nomp: NompConfig::default(),
            blocks: BlockConfig::default(),
            lox: LoxConfig::default(),
            finegrid: FineGridConfig::default(),
            lowrank: LowRankConfig::default(),
        }
    }
}

impl From<&ExperimentConfig> for EstimatorSettings {
    fn from(c: &ExperimentConfig) -> Self {
        Self { qnomp: c.qnomp, nomp: c.nomp, blocks: c.blocks, lox: c.lox, finegrid: c.finegrid, lowrank: c.lowrank }
    }
}

fn plugin_output(paths: &PathSet, cfg: &ChannelConfig, n_paths: usize, taus: Vec<f64>, cpu: f64) -> EstimatorOutput {
    EstimatorOutput {
        pilot: synthesize_band(paths, cfg, Band::Pilot),
        extrapolation: synthesize_band(paths, cfg, Band::Extrapolation),
        taus,
        n_paths,
        cpu_seconds: cpu,
    }
}

fn from_result(r: &EstimationResult, cfg: &ChannelConfig, cpu: f64) -> EstimatorOutput {
    plugin_output(&r.paths, cfg, r.n_paths(), r.paths.taus.clone(), cpu)
}

/// Estimators that build on a QNOMP result, given that result and its cost.
fn qnomp_derived(
    kind: EstimatorKind,
    base: &EstimationResult,
    base_cpu: f64,
    obs: &Observation,
    cfg: &ChannelConfig,
    s: &EstimatorSettings,
) -> Result<EstimatorOutput> {
    let taus = base.paths.taus.clone();
    let np = base.n_paths();
    match kind {
        EstimatorKind::Qnomp => Ok(from_result(base, cfg, base_cpu)),
        EstimatorKind::QnompBlock => {
            let (subs, cpu) = timed(|| block_estimate(&base.paths, obs, cfg, &s.blocks));
            Ok(plugin_output(&subs?.to_paths(), cfg, np, taus, base_cpu + cpu))
        }
        EstimatorKind::Lox => {
            let (est, cpu) = timed(|| lox_estimate_2d(base, obs, cfg, &s.lox));
            let (pilot, extrapolation) = est?;
            Ok(EstimatorOutput { pilot, extrapolation, taus, n_paths: np, cpu_seconds: base_cpu + cpu })
        }
        EstimatorKind::LowrankLox => {
            let (est, cpu) = timed(|| -> Result<(Vec<Complex64>, Vec<Complex64>)> {
                let op = estimate_operator(base, obs, cfg, &s.lox)?;
                let sigma2 = obs.effective_sigma2();
                let full = optimal_basis(&op, op.ncols().min(op.b0.nrows()))?;
                let r = s.lowrank.rank.unwrap_or_else(|| adaptive_rank(&full.eigenvalues, sigma2)).min(full.vectors.ncols());
                let basis = full.vectors.columns(0, r).into_owned();
                let pilot = lowrank_lox(&op.pilot(), &obs.h_prime, sigma2, &basis)?.estimate;
                let extrapolation = lowrank_lox(&op, &obs.h_prime, sigma2, &basis)?.estimate;
                Ok((pilot, extrapolation))
            });
            let (pilot, extrapolation) = est?;
            Ok(EstimatorOutput { pilot, extrapolation, taus, n_paths: np, cpu_seconds: base_cpu + cpu })
        }
        _ => unreachable!("not a QNOMP-derived estimator"),
    }
}

/// Run one estimator on one observation. `cfg.k` sets the extrapolation bands.
pub fn run_estimator(
    kind: EstimatorKind,
    obs: &Observation,
    cfg: &ChannelConfig,
    s: &EstimatorSettings,
) -> Result<EstimatorOutput> {
    if kind.needs_qnomp() {
        let (base, cpu) = timed(|| qnomp_run(obs, cfg, &s.qnomp));
        return qnomp_derived(kind, &base?, cpu, obs, cfg, s);
    }
    let q = &s.qnomp;
    let (r, cpu) = timed(|| match kind {
        EstimatorKind::OmpFinegrid => omp_finegrid(obs, cfg, s.finegrid.scale, q.p_fa, q.max_paths, s.finegrid.cell_budget),
        EstimatorKind::OmpRefined => omp_refined(obs, cfg, &q.refinement, q.p_fa, q.max_paths),
        EstimatorKind::Nomp => nomp_run(obs, cfg, &s.nomp),
        _ => unreachable!(),
    });
    Ok(from_result(&r?, cfg, cpu))
}

/// CPU seconds of one estimator invocation on this thread.
pub fn timing_probe(kind: EstimatorKind, obs: &Observation, cfg: &ChannelConfig, s: &EstimatorSettings) -> Result<f64> {
    let (r, cpu) = timed(|| run_estimator(kind, obs, cfg, s));
    r.map(|_| cpu)
}

/// Per-trial, per-SNR metrics for one estimator.
#[derive(Debug, Clone, PartialEq)]
struct TrialMetrics {
    /// NMSE per requested bandwidth factor (same order as the config).
    nmse: Vec<f64>,
    delay_nmse: Option<f64>,
    cpu: f64,
    n_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct TrialRecord {
    /// `[snr][estimator]`, `None` on estimator failure.
    metrics: Vec<Vec<Option<TrialMetrics>>>,
    snr_linear: Vec<f64>,
    crb: Vec<Option<f64>>,
}

fn nmse_for_band(
    k: usize,
    out: &EstimatorOutput,
    truth_pilot: &[Complex64],
    truth_ext: &[Complex64],
    cfg: &ChannelConfig,
) -> Result<f64> {
    if k == 0 {
        return channel_nmse(truth_pilot, &out.pilot);
    }
    let len = k * cfg.m * cfg.n;
    channel_nmse(&truth_ext[..len], &out.extrapolation[..len])
}

fn run_trial(ec: &ExperimentConfig, trial: u64, snr_indices: &[usize]) -> Result<TrialRecord> {
    let cfg = ec.channel.with_bands(ec.max_bands());
    let settings = EstimatorSettings::from(ec);
    let scenario = ScenarioSpec { seed: ec.seed, ..ec.scenario.clone() };
    let truth = scenario.generate(&cfg, trial)?;
    let h = synthesize_band(&truth, &cfg, Band::Pilot);
    let h_ext = synthesize_band(&truth, &cfg, Band::Extrapolation);
    let dt = cfg.delay_step();
    let mut rec = TrialRecord { metrics: Vec::new(), snr_linear: Vec::new(), crb: Vec::new() };
    for &si in snr_indices {
        let snr = ec.snr_grid_db[si];
        let sigma2 = sigma2_for_snr(&h, snr);
        let mut rng = substream(ec.seed, &[STREAM_NOISE, trial, si as u64]);
        let sample = add_noise_with(&h, sigma2, &mut rng)?;
        let obs = sample.observation;
        let noise: f64 = obs.h_prime.iter().zip(&h).map(|(a, b)| (a - b).norm_sqr()).sum();
        rec.snr_linear.push(if noise > 0.0 { norm_sqr(&h) / noise } else { f64::INFINITY });
        rec.crb.push(
            delay_crb(&truth, &cfg, sigma2)
                .ok()
                .filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / (v.len() as f64 * dt * dt)),
        );
        let mut base: Option<(Result<EstimationResult>, f64)> = None;
        let mut row = Vec::with_capacity(ec.estimators.len());
        for &kind in &ec.estimators {
            let out = if kind.needs_qnomp() {
                let (res, cpu) = base.get_or_insert_with(|| timed(|| qnomp_run(&obs, &cfg, &settings.qnomp)));
                match res {
                    Ok(r) => qnomp_derived(kind, r, *cpu, &obs, &cfg, &settings),
                    Err(e) => Err(Error::Domain(e.to_string())),
                }
            } else {
                run_estimator(kind, &obs, &cfg, &settings)
            };
            let metrics = out.and_then(|o| {
                let nmse = ec
                    .bandwidth_factors
                    .iter()
                    .map(|&k| nmse_for_band(k, &o, &h, &h_ext, &cfg))
                    .collect::<Result<Vec<_>>>()?;
                let delay_nmse =
                    delay_nmse_with(&truth.taus, &o.taus, dt, DelayMatching::NearestWithReplacement, Some(cfg.delay_period())).ok();
                Ok(TrialMetrics { nmse, delay_nmse, cpu: o.cpu_seconds, n_paths: o.n_paths })
            });
            row.push(metrics.ok());
        }
        rec.metrics.push(row);
    }
    Ok(rec)
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn worker_count() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0)
}

fn run_trials(ec: &ExperimentConfig, snr_indices: &[usize]) -> Result<Vec<TrialRecord>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| (0..ec.trials as u64).into_par_iter().map(|t| run_trial(ec, t, snr_indices)).collect())
}

/// Run the full sweep. Trials run on a worker pool sized by `QNOMP_WORKERS` (default:
/// all cores); results are aggregated in trial order and are independent of scheduling.
pub fn run_experiment(ec: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    ec.validate()?;
    let all: Vec<usize> = (0..ec.snr_grid_db.len()).collect();
    let records = run_trials(ec, &all)?;
    let mut rows = Vec::new();
    for (ei, &kind) in ec.estimators.iter().enumerate() {
        for si in 0..ec.snr_grid_db.len() {
            let snr_db = 10.0 * mean(records.iter().map(|r| r.snr_linear[si])).log10();
            let crb = mean(records.iter().filter_map(|r| r.crb[si]));
            let ok: Vec<&TrialMetrics> = records.iter().filter_map(|r| r.metrics[si][ei].as_ref()).collect();
            for (bi, &k) in ec.bandwidth_factors.iter().enumerate() {
                rows.push(ResultRow {
                    estimator: kind.name().to_string(),
                    scenario: ec.name.clone(),
                    snr_db,
                    bandwidth_label: ec.channel.m * (k + 1),
                    channel_nmse: mean(ok.iter().map(|m| m.nmse[bi])),
                    delay_nmse: mean(ok.iter().filter_map(|m| m.delay_nmse)),
                    crb,
                    cpu_seconds: mean(ok.iter().map(|m| m.cpu)),
                    n_paths_mean: mean(ok.iter().map(|m| m.n_paths as f64)),
                    trials: ok.len(),
                    failures: records.len() - ok.len(),
                });
            }
        }
    }
    Ok(rows)
}

/// Per-trial paired samples of one metric, for significance tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    pub estimators: Vec<EstimatorKind>,
    /// `[estimator][trial]`; `NaN` where the estimator failed.
    pub values: Vec<Vec<f64>>,
    pub snr_db: f64,
}

/// Which quantity [`paired_metric`] collects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Channel NMSE at this bandwidth factor `K`.
    ChannelNmse(usize),
    DelayNmse,
    Crb,
}

/// Per-trial values of a metric at one SNR for all configured estimators.
pub fn paired_metric(ec: &ExperimentConfig, snr_index: usize, metric: Metric) -> Result<PairedSamples> {
    ec.validate()?;
    if snr_index >= ec.snr_grid_db.len() {
        return Err(Error::Config(format!("SNR index {snr_index} out of range")));
    }
    let bi = match metric {
        Metric::ChannelNmse(k) => Some(
            ec.bandwidth_factors
                .iter()
                .position(|&b| b == k)
                .ok_or_else(|| Error::Config(format!("bandwidth factor {k} not configured")))?,
        ),
        _ => None,
    };
    let records = run_trials(ec, &[snr_index])?;
    let values = (0..ec.estimators.len())
        .map(|ei| {
            records
                .iter()
                .map(|r| {
                    match metric {
                        Metric::Crb => r.crb[0].unwrap_or(f64::NAN),
                        _ => r.metrics[0][ei].as_ref().map_or(f64::NAN, |m| match bi {
                            Some(b) => m.nmse[b],
                            None => m.delay_nmse.unwrap_or(f64::NAN),
                        }),
                    }
                })
                .collect()
        })
        .collect();
    let snr_db = 10.0 * mean(records.iter().map(|r| r.snr_linear[0])).log10();
    Ok(PairedSamples { estimators: ec.estimators.clone(), values, snr_db })
}
