//! Config-driven experiment runner: simulate, train, calibrate, infer, metrics.
//!
//! Every stage writes into its own subdirectory of the output directory and
//! refuses to run if that subdirectory already exists. Inputs from earlier
//! stages are located in the output directory first, then in the `from`
//! directories, and validated against the digests recorded in their
//! manifests.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibrate::{
    calibrate_conjugate, calibrate_mcmc_is, credible_region_contains, CalibConfig, Calibration,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::{
    append_json_line, digest, read_dataset_csv, read_json, read_matrix_csv, write_dataset_csv,
    write_json, write_matrix_csv, write_scalars_csv, write_trace_csv,
};
use crate::loss::conj_terms;
use crate::loss::nsm_loss;
use crate::metrics::{gaussian_summary, mmd2, mse_conjugate, mse_samples, Mmd2Config};
use crate::posterior::{
    nle_sample, nsm_conj_posterior, nsm_sample, theta_hat_optimize, GaussianPosterior,
    NelderMeadConfig,
};
use crate::rng::{substream, Stage};
use crate::sampler::SliceConfig;
use crate::simulators::{observe, simulate_bank, Contamination, Simulator};
use crate::surrogate::{Family, Surrogate};
use crate::train::{fit, SurrogateSpec, TrainConfig};
use crate::weights::{ImqWeight, ScatterMethod, WeightFunction};

/// Posterior construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Likelihood posterior with a normalised surrogate.
    Nle,
    /// Sampled weighted score-matching posterior.
    Nsm,
    /// Closed-form posterior under an exponential-family energy model.
    NsmConj,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservedSpec {
    pub n: usize,
    /// Defaults to the simulator's reference parameter.
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default = "no_contamination")]
    pub contamination: Contamination,
}

fn no_contamination() -> Contamination {
    Contamination::None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    Imq,
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub kind: WeightKind,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// Robust location/scatter estimator; chosen from `(n, d)` when absent.
    #[serde(default)]
    pub method: Option<ScatterMethod>,
}

fn default_zeta() -> f64 {
    1.0
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self {
            kind: WeightKind::Imq,
            zeta: 1.0,
            method: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub draws: usize,
    pub warmup: usize,
    pub thin: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            draws: 500,
            warmup: 500,
            thin: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Mse,
    Coverage,
    MmdRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    pub report: Vec<MetricKind>,
    /// Reference posterior draws (CSV) for the MMD² metric.
    pub reference_samples: Option<PathBuf>,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            report: vec![MetricKind::Mse, MetricKind::Coverage],
            reference_samples: None,
        }
    }
}

/// A full experiment definition, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub method: Method,
    pub simulator: Simulator,
    /// Number of simulations `m`.
    pub budget: usize,
    pub observed: ObservedSpec,
    pub surrogate: SurrogateSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub weight: WeightSpec,
    #[serde(default)]
    pub calibration: CalibConfig,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the master seed everywhere it is echoed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn theta_star(&self) -> Result<Vec<f64>> {
        self.observed
            .theta_star
            .clone()
            .or_else(|| self.simulator.theta_star())
            .ok_or_else(|| {
                Error::Config(format!(
                    "simulator `{}` needs an explicit theta_star",
                    self.simulator.id()
                ))
            })
    }

    pub fn weight_needed(&self) -> bool {
        self.method != Method::Nle
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget < 2 {
            return Err(Error::Config(
                "budget must allow a train/validation split".into(),
            ));
        }
        if self.observed.n == 0 {
            return Err(Error::Config("observed.n must be positive".into()));
        }
        self.observed.contamination.validate()?;
        let theta = self.theta_star()?;
        if theta.len() != self.simulator.theta_dim() {
            return Err(Error::Config(format!(
                "theta_star has {} entries, simulator `{}` has {} parameters",
                theta.len(),
                self.simulator.id(),
                self.simulator.theta_dim()
            )));
        }
        let family = self.surrogate.family();
        match (self.method, family) {
            (Method::NsmConj, Family::Ebm) => {}
            (Method::NsmConj, f) => {
                return Err(Error::Config(format!(
                    "nsm-conj needs an ebm surrogate, got {f}"
                )))
            }
            (Method::Nle, Family::Ebm) => {
                return Err(Error::Config("nle needs a normalised surrogate".into()))
            }
            _ => {}
        }
        if !(self.weight.zeta > 0.0) {
            return Err(Error::Config(format!(
                "weight.zeta must be positive, got {}",
                self.weight.zeta
            )));
        }
        if self.sampler.draws == 0 || self.sampler.thin == 0 {
            return Err(Error::Config(
                "sampler.draws and sampler.thin must be positive".into(),
            ));
        }
        if self.metrics.report.contains(&MetricKind::MmdRef)
            && self.metrics.reference_samples.is_none()
        {
            return Err(Error::Config(
                "mmd-ref needs metrics.reference_samples".into(),
            ));
        }
        self.train_config().validate()?;
        self.calib_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn calib_config(&self) -> CalibConfig {
        CalibConfig {
            seed: self.seed,
            ..self.calibration.clone()
        }
    }
}

/// Pipeline stages in execution order; `Run` executes all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    Simulate,
    Train,
    Calibrate,
    Infer,
    Metrics,
    Run,
}

impl StageName {
    pub const ORDER: [StageName; 5] = [
        StageName::Simulate,
        StageName::Train,
        StageName::Calibrate,
        StageName::Infer,
        StageName::Metrics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Simulate => "simulate",
            StageName::Train => "train",
            StageName::Calibrate => "calibrate",
            StageName::Infer => "infer",
            StageName::Metrics => "metrics",
            StageName::Run => "run",
        }
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageName::ORDER
            .iter()
            .chain(&[StageName::Run])
            .find(|st| st.as_str() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Where a stage reads and writes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Earlier runs whose stage outputs may be reused.
    pub from: Vec<PathBuf>,
    /// Observed data file replacing the configured simulation of `x°`.
    pub observed: Option<PathBuf>,
}

/// A stage error with the stage it came from.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageFailure {
    pub stage: StageName,
    #[source]
    pub source: Error,
}

/// Process exit status for an error: 2 configuration, 3 numerical, 4 manifest.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => 2,
        Error::ManifestMismatch(_) => 4,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub simulator: Simulator,
    pub seed: u64,
    pub count: usize,
    pub contamination: Contamination,
    pub file: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub simulator: Simulator,
    pub family: Family,
    pub surrogate: SurrogateSpec,
    pub seed: u64,
    pub bank_digest: String,
    pub model_digest: String,
    pub model_manifest_digest: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateManifest {
    pub simulator: Simulator,
    pub method: Method,
    pub seed: u64,
    pub model_dir: PathBuf,
    pub model_digest: String,
    pub observed_digest: String,
    pub observed_source: String,
    pub weight: WeightFunction,
    pub beta: f64,
    pub coverage: Option<f64>,
    pub theta_hat: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferManifest {
    pub method: Method,
    pub seed: u64,
    pub calibrate_dir: PathBuf,
    pub beta: f64,
    pub draws: usize,
    pub samples_digest: String,
    pub posterior_digest: Option<String>,
}

/// Evaluation of one posterior against θ*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub seed: u64,
    pub beta: f64,
    pub theta_star: Vec<f64>,
    pub posterior_mean: Vec<f64>,
    pub mse: Option<f64>,
    pub alpha: f64,
    /// Whether θ* lies in the `1 − α` credible region.
    pub covered: Option<bool>,
    pub mmd2_ref: Option<f64>,
    pub contaminated: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
struct RunRecord<'a> {
    stage: StageName,
    seconds: f64,
    git: String,
    config: &'a ExperimentConfig,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

const MANIFEST: &str = "manifest.json";

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            ..Self::default()
        }
    }

    fn stage_dir(&self, stage: StageName) -> PathBuf {
        self.out.join(stage.as_str())
    }

    /// Directory of the most local completed `stage`.
    fn locate(&self, stage: StageName) -> Result<PathBuf> {
        std::iter::once(&self.out)
            .chain(&self.from)
            .map(|d| d.join(stage.as_str()))
            .find(|d| d.join(MANIFEST).is_file())
            .ok_or_else(|| {
                Error::ManifestMismatch(format!(
                    "no completed `{stage}` stage in the output or --from directories"
                ))
            })
    }

    /// Creates the stage directory; an existing one is never reused.
    fn claim(&self, stage: StageName) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&self.out)?;
        std::fs::create_dir(&dir).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::ManifestMismatch(format!(
                    "`{stage}` outputs already exist in {}",
                    dir.display()
                ))
            } else {
                e.into()
            }
        })?;
        Ok(dir)
    }
}

fn check_digest(path: &Path, expected: &str) -> Result<()> {
    let got = digest(path)?;
    if got == expected {
        Ok(())
    } else {
        Err(Error::ManifestMismatch(format!(
            "{} changed since its manifest was written",
            path.display()
        )))
    }
}

fn check_simulator(found: &Simulator, cfg: &ExperimentConfig, what: &str) -> Result<()> {
    if *found == cfg.simulator {
        Ok(())
    } else {
        Err(Error::ManifestMismatch(format!(
            "{what} was produced for simulator `{}`, config names `{}`",
            found.id(),
            cfg.simulator.id()
        )))
    }
}

fn theta_headers(sim: &Simulator) -> Vec<String> {
    sim.param_names()
}

fn simulate_stage(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let bank = simulate_bank(&cfg.simulator, cfg.budget, cfg.seed)?;
    let dir = opts.claim(StageName::Simulate)?;
    let mut headers = theta_headers(&cfg.simulator);
    headers.extend(cfg.simulator.summary_names());
    let table = bank
        .theta
        .clone()
        .resize_horizontally(bank.theta.ncols() + bank.x.ncols(), 0.0);
    let mut table = table;
    table
        .columns_mut(bank.theta.ncols(), bank.x.ncols())
        .copy_from(&bank.x);
    let file = dir.join("bank.csv");
    write_matrix_csv(&file, &headers, &table)?;
    write_json(
        &dir.join(MANIFEST),
        &BankManifest {
            simulator: cfg.simulator.clone(),
            seed: cfg.seed,
            count: bank.len(),
            contamination: Contamination::None,
            file: "bank.csv".into(),
            digest: digest(&file)?,
        },
    )
}

fn train_stage(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let bank_dir = opts.locate(StageName::Simulate)?;
    let bank: BankManifest = read_json(&bank_dir.join(MANIFEST))?;
    check_simulator(&bank.simulator, cfg, "simulation bank")?;
    let file = bank_dir.join(&bank.file);
    check_digest(&file, &bank.digest)?;
    let (_, table) = read_matrix_csv(&file)?;
    let p = cfg.simulator.theta_dim();
    if table.ncols() != p + cfg.simulator.x_dim() {
        return Err(Error::ManifestMismatch(
            "bank width does not match the simulator".into(),
        ));
    }
    let theta = table.columns(0, p).into_owned();
    let x = table.columns(p, table.ncols() - p).into_owned();
    let (model, report) = fit(&cfg.surrogate, &theta, &x, &cfg.train_config())?;
    let dir = opts.claim(StageName::Train)?;
    model.save(&dir, "model")?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(
        &dir.join(MANIFEST),
        &TrainManifest {
            simulator: cfg.simulator.clone(),
            family: cfg.surrogate.family(),
            surrogate: cfg.surrogate.clone(),
            seed: cfg.seed,
            bank_digest: bank.digest,
            model_digest: digest(&dir.join("model.bin"))?,
            model_manifest_digest: digest(&dir.join("model.json"))?,
            best_epoch: report.best_epoch,
            best_val_loss: report.best_val_loss,
        },
    )
}

/// Loads the fitted model from a train directory after checking its digests.
pub fn load_model(train_dir: &Path, cfg: &ExperimentConfig) -> Result<(Surrogate, TrainManifest)> {
    let manifest: TrainManifest = read_json(&train_dir.join(MANIFEST))?;
    check_simulator(&manifest.simulator, cfg, "model")?;
    if manifest.family != cfg.surrogate.family() {
        return Err(Error::ManifestMismatch(format!(
            "model family is {}, config expects {}",
            manifest.family,
            cfg.surrogate.family()
        )));
    }
    check_digest(&train_dir.join("model.bin"), &manifest.model_digest)?;
    check_digest(
        &train_dir.join("model.json"),
        &manifest.model_manifest_digest,
    )?;
    Ok((Surrogate::load(train_dir, "model")?, manifest))
}

fn observed_data(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(Dataset, String)> {
    match &opts.observed {
        Some(path) => {
            let (_, data) = read_dataset_csv(path)?;
            if data.dim() != cfg.simulator.x_dim() {
                return Err(Error::Config(format!(
                    "{} has {} columns, simulator `{}` produces {}",
                    path.display(),
                    data.dim(),
                    cfg.simulator.id(),
                    cfg.simulator.x_dim()
                )));
            }
            Ok((data, path.display().to_string()))
        }
        None => Ok((
            observe(
                &cfg.simulator,
                &cfg.theta_star()?,
                cfg.observed.n,
                &cfg.observed.contamination,
                cfg.seed,
            )?,
            "simulated".into(),
        )),
    }
}

fn fit_weight(cfg: &ExperimentConfig, data: &Dataset) -> Result<WeightFunction> {
    if !cfg.weight_needed() {
        return Ok(WeightFunction::Unit);
    }
    match cfg.weight.kind {
        WeightKind::Unit => Ok(WeightFunction::Unit),
        WeightKind::Imq => {
            let mut rng = substream(cfg.seed, Stage::Calibrate, u64::MAX);
            Ok(WeightFunction::Imq(ImqWeight::fit(
                &data.values,
                cfg.weight.zeta,
                cfg.weight.method,
                &mut rng,
            )?))
        }
    }
}

/// Loss minimiser for the sampled score-matching posterior.
fn nsm_theta_hat(
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: &Surrogate,
    weight: &WeightFunction,
) -> Result<Vec<f64>> {
    let prior = cfg.simulator.prior();
    let init: Vec<f64> = prior.mean.iter().copied().collect();
    let steps = prior.marginal_sd().iter().map(|s| 0.5 * s).collect();
    let min = theta_hat_optimize(
        |t| nsm_loss(t, data, model.as_dyn(), weight),
        &init,
        &NelderMeadConfig::new(steps),
    )?;
    if !min.converged {
        log::warn!(
            "loss minimiser stopped at the evaluation budget (value {:.6e})",
            min.value
        );
    }
    Ok(min.theta.iter().copied().collect())
}

fn calibrate_stage(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let train_dir = opts.locate(StageName::Train)?;
    let (model, train) = load_model(&train_dir, cfg)?;
    let (data, source) = observed_data(cfg, opts)?;
    let weight = fit_weight(cfg, &data)?;
    let prior = cfg.simulator.prior();
    let calib_cfg = cfg.calib_config();
    let calibration: Option<Calibration> = match cfg.method {
        Method::Nle => None,
        Method::NsmConj => {
            let ebm = model
                .as_ebm()
                .ok_or_else(|| Error::ManifestMismatch("nsm-conj needs an ebm model".into()))?;
            Some(calibrate_conjugate(
                &data, ebm, &weight, &prior, &calib_cfg,
            )?)
        }
        Method::Nsm => {
            let theta_hat = nsm_theta_hat(cfg, &data, &model, &weight)?;
            Some(calibrate_mcmc_is(
                &data,
                model.as_dyn(),
                &weight,
                &prior,
                &theta_hat,
                &calib_cfg,
            )?)
        }
    };
    let dir = opts.claim(StageName::Calibrate)?;
    let mut headers = cfg.simulator.summary_names();
    headers.truncate(data.dim());
    write_dataset_csv(&dir.join("observed.csv"), &headers, &data)?;
    write_json(&dir.join("weight.json"), &weight)?;
    write_trace_csv(
        &dir.join("trace.csv"),
        calibration.as_ref().map_or(&[][..], |c| &c.trace),
    )?;
    write_json(
        &dir.join(MANIFEST),
        &CalibrateManifest {
            simulator: cfg.simulator.clone(),
            method: cfg.method,
            seed: cfg.seed,
            model_dir: std::path::absolute(&train_dir)?,
            model_digest: train.model_digest,
            observed_digest: digest(&dir.join("observed.csv"))?,
            observed_source: source,
            weight,
            beta: calibration.as_ref().map_or(1.0, |c| c.beta),
            coverage: calibration.as_ref().map(|c| c.coverage),
            theta_hat: calibration.map(|c| c.theta_hat),
        },
    )
}

fn infer_stage(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let calib_dir = opts.locate(StageName::Calibrate)?;
    let calib: CalibrateManifest = read_json(&calib_dir.join(MANIFEST))?;
    check_simulator(&calib.simulator, cfg, "calibration")?;
    if calib.method != cfg.method {
        return Err(Error::ManifestMismatch(format!(
            "calibration was run for {:?}, config asks for {:?}",
            calib.method, cfg.method
        )));
    }
    let (model, train) = load_model(&calib.model_dir, cfg)?;
    if train.model_digest != calib.model_digest {
        return Err(Error::ManifestMismatch(
            "model was retrained after calibration".into(),
        ));
    }
    let observed = calib_dir.join("observed.csv");
    check_digest(&observed, &calib.observed_digest)?;
    let (_, data) = read_dataset_csv(&observed)?;
    let prior = cfg.simulator.prior();
    let mut rng = substream(cfg.seed, Stage::Infer, 0);
    let slice = SliceConfig {
        warmup: cfg.sampler.warmup,
        thin: cfg.sampler.thin,
        ..prior.slice_config()
    };
    let (samples, posterior) = match cfg.method {
        Method::NsmConj => {
            let ebm = model
                .as_ebm()
                .ok_or_else(|| Error::ManifestMismatch("nsm-conj needs an ebm model".into()))?;
            let terms = conj_terms(&data, ebm, &calib.weight)?;
            let post = nsm_conj_posterior(&prior, &terms.mean()?, calib.beta, data.len())?;
            (post.sample(cfg.sampler.draws, &mut rng)?, Some(post))
        }
        Method::Nsm => (
            nsm_sample(
                &prior,
                &data,
                model.as_dyn(),
                &calib.weight,
                calib.beta,
                cfg.sampler.draws,
                &slice,
                &mut rng,
            )?,
            None,
        ),
        Method::Nle => (
            nle_sample(
                &prior,
                &data,
                model.as_dyn(),
                cfg.sampler.draws,
                &slice,
                &mut rng,
            )?,
            None,
        ),
    };
    let dir = opts.claim(StageName::Infer)?;
    write_matrix_csv(
        &dir.join("samples.csv"),
        &theta_headers(&cfg.simulator),
        &samples,
    )?;
    let posterior_digest = match &posterior {
        Some(p) => {
            write_json(&dir.join("posterior.json"), p)?;
            Some(digest(&dir.join("posterior.json"))?)
        }
        None => None,
    };
    write_json(
        &dir.join(MANIFEST),
        &InferManifest {
            method: cfg.method,
            seed: cfg.seed,
            calibrate_dir: std::path::absolute(&calib_dir)?,
            beta: calib.beta,
            draws: samples.nrows(),
            samples_digest: digest(&dir.join("samples.csv"))?,
            posterior_digest,
        },
    )
}

/// Computes the configured metrics for the posterior in `infer_dir`.
pub fn evaluate(cfg: &ExperimentConfig, infer_dir: &Path) -> Result<MetricsReport> {
    let infer: InferManifest = read_json(&infer_dir.join(MANIFEST))?;
    if infer.method != cfg.method {
        return Err(Error::ManifestMismatch(
            "posterior was built with another method".into(),
        ));
    }
    let samples_path = infer_dir.join("samples.csv");
    check_digest(&samples_path, &infer.samples_digest)?;
    let (_, samples) = read_matrix_csv(&samples_path)?;
    let posterior: GaussianPosterior = match &infer.posterior_digest {
        Some(d) => {
            let path = infer_dir.join("posterior.json");
            check_digest(&path, d)?;
            read_json(&path)?
        }
        None => gaussian_summary(&samples, infer.beta),
    };
    let calib: CalibrateManifest = read_json(&infer.calibrate_dir.join(MANIFEST))?;
    let (_, data) = read_dataset_csv(&infer.calibrate_dir.join("observed.csv"))?;
    let theta_star = cfg.theta_star()?;
    let alpha = cfg.calibration.alpha;
    let wants = |m| cfg.metrics.report.contains(&m);
    let mse = if wants(MetricKind::Mse) {
        Some(match infer.posterior_digest {
            Some(_) => mse_conjugate(&posterior, &theta_star)?,
            None => mse_samples(&samples, &theta_star)?,
        })
    } else {
        None
    };
    let covered = if wants(MetricKind::Coverage) {
        Some(credible_region_contains(&posterior, &theta_star, alpha)?)
    } else {
        None
    };
    let mmd2_ref = match (&cfg.metrics.reference_samples, wants(MetricKind::MmdRef)) {
        (Some(path), true) => {
            let (_, reference) = read_matrix_csv(path)?;
            Some(mmd2(&samples, &reference, &Mmd2Config::default())?)
        }
        _ => None,
    };
    Ok(MetricsReport {
        method: cfg.method,
        seed: calib.seed,
        beta: infer.beta,
        theta_star,
        posterior_mean: posterior.mean.iter().copied().collect(),
        mse,
        alpha,
        covered,
        mmd2_ref,
        contaminated: data.contamination_count(),
        n: data.len(),
    })
}

fn metrics_stage(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let report = evaluate(cfg, &opts.locate(StageName::Infer)?)?;
    let dir = opts.claim(StageName::Metrics)?;
    write_json(&dir.join("metrics.json"), &report)?;
    let mut row = vec![("beta".to_string(), report.beta)];
    if let Some(m) = report.mse {
        row.push(("mse".into(), m));
    }
    if let Some(c) = report.covered {
        row.push(("covered".into(), f64::from(u8::from(c))));
    }
    if let Some(m) = report.mmd2_ref {
        row.push(("mmd2_ref".into(), m));
    }
    for (name, v) in cfg
        .simulator
        .param_names()
        .iter()
        .zip(&report.posterior_mean)
    {
        row.push((format!("mean_{name}"), *v));
    }
    write_scalars_csv(&dir.join("metrics.csv"), &row)?;
    write_json(
        &dir.join(MANIFEST),
        &serde_json::json!({ "method": cfg.method, "seed": cfg.seed }),
    )
}

fn run_one(cfg: &ExperimentConfig, stage: StageName, opts: &RunOptions) -> Result<()> {
    let start = Instant::now();
    match stage {
        StageName::Simulate => simulate_stage(cfg, opts),
        StageName::Train => train_stage(cfg, opts),
        StageName::Calibrate => calibrate_stage(cfg, opts),
        StageName::Infer => infer_stage(cfg, opts),
        StageName::Metrics => metrics_stage(cfg, opts),
        StageName::Run => unreachable!("expanded by execute"),
    }?;
    append_json_line(
        &opts.out.join("run.jsonl"),
        &RunRecord {
            stage,
            seconds: start.elapsed().as_secs_f64(),
            git: git_describe(),
            config: cfg,
        },
    )
}

/// Runs `stage`, or every stage in order for [`StageName::Run`]. Outputs of
/// stages that completed before a failure are kept.
pub fn execute(
    cfg: &ExperimentConfig,
    stage: StageName,
    opts: &RunOptions,
) -> std::result::Result<(), StageFailure> {
    let stages: Vec<StageName> = match stage {
        StageName::Run => StageName::ORDER.to_vec(),
        s => vec![s],
    };
    for s in stages {
        log::info!("stage {s}");
        run_one(cfg, s, opts).map_err(|source| StageFailure { stage: s, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 3
method = "nsm-conj"
budget = 400
[simulator]
id = "g-and-k"
[observed]
n = 40
[observed.contamination]
kind = "huber-shift"
eps = 0.1
shift = -50.0
[surrogate]
family = "ebm"
t_hidden = 8
b_hidden = 8
standardize_theta = false
[train]
max_epochs = 3
batch_size = 64
[calibration]
bootstraps = 10
steps = 3
[sampler]
draws = 50
"#;

    #[test]
    fn config_parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        assert_eq!(cfg.method, Method::NsmConj);
        assert_eq!(cfg.weight, WeightSpec::default());
        assert_eq!(cfg.train_config().seed, 3);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_incoherent_configs() {
        let bad = SMALL.replace("method = \"nsm-conj\"", "method = \"nle\"");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(Error::Config(_))
        ));
        let unknown = format!("{SMALL}\nbogus = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml(&unknown),
            Err(Error::Config(_))
        ));
        let no_seed = SMALL.replace("seed = 3", "");
        assert!(matches!(
            ExperimentConfig::from_toml(&no_seed),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage_names_parse() {
        for s in StageName::ORDER {
            assert_eq!(s.as_str().parse::<StageName>().unwrap(), s);
        }
        assert!("bogus".parse::<StageName>().is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config(String::new())), 2);
        assert_eq!(exit_code(&Error::non_finite("x")), 3);
        assert_eq!(exit_code(&Error::ManifestMismatch(String::new())), 4);
    }

    #[test]
    fn stages_refuse_to_overwrite_and_detect_tampering() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions::new(dir.path());
        execute(&cfg, StageName::Simulate, &opts).unwrap();
        let again = execute(&cfg, StageName::Simulate, &opts).unwrap_err();
        assert!(matches!(again.source, Error::ManifestMismatch(_)));
        execute(&cfg, StageName::Train, &opts).unwrap();
        let other = ExperimentConfig {
            simulator: Simulator::Sir(Default::default()),
            observed: ObservedSpec {
                theta_star: Some(vec![0.0; 4]),
                ..cfg.observed.clone()
            },
            ..cfg.clone()
        };
        let wrong = execute(&other, StageName::Calibrate, &opts).unwrap_err();
        assert_eq!(wrong.stage, StageName::Calibrate);
        assert!(
            matches!(wrong.source, Error::ManifestMismatch(_)),
            "{wrong}"
        );
        std::fs::write(dir.path().join("train/model.bin"), b"stale").unwrap();
        let stale = execute(&cfg, StageName::Calibrate, &opts).unwrap_err();
        assert!(
            matches!(stale.source, Error::ManifestMismatch(_)),
            "{stale}"
        );
    }
}
