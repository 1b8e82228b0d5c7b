//! Experiment config file (TOML, `schema = 1`) and its translation into
//! simulator types. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fedsim_core::engine::{Horizon, RunConfig, Seeds};
use fedsim_core::model::{ClientSpec, Fleet};
use fedsim_core::objectives::{ClientObjective, LocalSgd, QuadraticObjective};
use fedsim_core::shards::{make_synthetic_shards, SyntheticShardConfig};
use fedsim_core::timing::{BiasCriterion, HardwareModel, WaitPolicy};
use fedsim_core::weights::{plan_weights, WeightPlan, WeightScheme};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub fleet: FleetConfig,
    pub scheme: SchemeConfig,
    pub optimization: OptimizationConfig,
    pub horizon: HorizonConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardwareKind {
    #[default]
    Fixed,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    /// τ_i (mean time under exponential hardware); its length sets M.
    pub compute_time: Vec<f64>,
    /// p_i; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_delivery: Option<Vec<f64>>,
    /// Data-distribution id per client; one distribution per client when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<Vec<usize>>,
    #[serde(default)]
    pub hardware: HardwareKind,
    pub objective: ObjectiveConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Quadratic,
    Logistic,
}

/// Quadratic clients use `optima`, `curvature`, `noise_std`; logistic
/// clients use the synthetic shard keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optima: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concentration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shard_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Sync,
    Async,
    Fedfix,
    Fedbuff,
    Uniform,
    Md,
    Biased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionKind {
    HighestLoss,
    Fastest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    Identical,
    Fedavg,
    AsyncTimeBased,
    FedfixTimeBased,
    Unbiased,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub policy: PolicyKind,
    /// Δt for fedfix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<f64>,
    /// m for fedbuff and the samplers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<CriterionKind>,
    pub weights: WeightKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationConfig {
    #[serde(default = "one")]
    pub server_lr: f64,
    pub local_lr: f64,
    pub local_steps: usize,
    /// B for logistic shards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// θ^0; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staleness_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "one_seed")]
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
}

fn one_seed() -> usize {
    1
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            seeds: 1,
            base_seed: 0,
        }
    }
}

impl EnsembleConfig {
    /// `base_seed, base_seed + 1, …`
    pub fn seed_list(&self, at_least: usize) -> Vec<u64> {
        (0..self.seeds.max(at_least) as u64)
            .map(|i| self.base_seed.wrapping_add(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "one_seed")]
    pub metric_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            metric_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    /// L; the largest client smoothness constant when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
    #[serde(default = "one")]
    pub rho: f64,
    /// T for the per-policy round counts; the horizon time when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_budget: Option<f64>,
    /// Δt of the fedfix preset; the scheme interval or the smallest τ_i when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fedfix_interval: Option<f64>,
    #[serde(default = "default_draws")]
    pub moment_draws: usize,
}

fn default_draws() -> usize {
    2000
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            smoothness: None,
            rho: 1.0,
            time_budget: None,
            fedfix_interval: None,
            moment_draws: default_draws(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    LocalLr,
    LocalSteps,
    Interval,
    M,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::LocalLr => "local_lr",
            Self::LocalSteps => "local_steps",
            Self::Interval => "interval",
            Self::M => "m",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "local-lr" | "local_lr" | "eta_l" => Ok(Self::LocalLr),
            "local-steps" | "local_steps" | "k" | "K" => Ok(Self::LocalSteps),
            "interval" | "dt" => Ok(Self::Interval),
            "m" => Ok(Self::M),
            other => Err(CliError::Config(format!(
                "unknown sweep axis `{other}` (expected local-lr, local-steps, interval or m)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema = {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    /// Canonical TOML rendering; what the hash covers.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies a sweep value along `axis`.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self, CliError> {
        let mut cfg = self.clone();
        let integer = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(CliError::Config(format!(
                    "{} takes integers >= 1, got {value}",
                    axis.name()
                )))
            }
        };
        match axis {
            SweepAxis::LocalLr => cfg.optimization.local_lr = value,
            SweepAxis::LocalSteps => cfg.optimization.local_steps = integer()?,
            SweepAxis::Interval => cfg.scheme.interval = Some(value),
            SweepAxis::M => cfg.scheme.m = Some(integer()?),
        }
        Ok(cfg)
    }
}

fn need<T: Copy>(value: Option<T>, what: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Config(format!("missing `{what}`")))
}

/// A config resolved into simulator types.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub fleet: Fleet,
    pub policy: WaitPolicy,
    pub hardware: HardwareModel,
    pub plan: WeightPlan,
    pub local: LocalSgd,
    pub horizon: Horizon,
}

impl Experiment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let fleet = build_fleet(&cfg.fleet, &cfg.optimization)?;
        let policy = build_policy(&cfg.scheme)?;
        let hardware = match cfg.fleet.hardware {
            HardwareKind::Fixed => HardwareModel::Fixed,
            HardwareKind::Exponential => HardwareModel::Exponential { seed: 0 },
        };
        let scheme = match cfg.scheme.weights {
            WeightKind::Identical => WeightScheme::Identical,
            WeightKind::Fedavg => WeightScheme::FedAvg,
            WeightKind::AsyncTimeBased => WeightScheme::AsyncTimeBased,
            WeightKind::FedfixTimeBased => WeightScheme::FedFixTimeBased,
            WeightKind::Unbiased => WeightScheme::Unbiased,
            WeightKind::Custom => {
                WeightScheme::Custom(cfg.scheme.custom_weights.clone().ok_or_else(|| {
                    CliError::Config("weights = \"custom\" needs `custom_weights`".into())
                })?)
            }
        };
        if cfg.scheme.weights != WeightKind::Custom && cfg.scheme.custom_weights.is_some() {
            return Err(CliError::Config(
                "`custom_weights` needs weights = \"custom\"".into(),
            ));
        }
        let plan = plan_weights(&scheme, &fleet, policy, hardware)?;
        let horizon = match (cfg.horizon.rounds, cfg.horizon.time) {
            (Some(n), None) => Horizon::Rounds(n),
            (None, Some(t)) => Horizon::Time(t),
            _ => {
                return Err(CliError::Config(
                    "horizon needs exactly one of `rounds` or `time`".into(),
                ))
            }
        };
        Ok(Self {
            fleet,
            policy,
            hardware,
            plan,
            local: LocalSgd {
                steps: cfg.optimization.local_steps,
                lr: cfg.optimization.local_lr,
            },
            horizon,
        })
    }

    pub fn run_config(&self, cfg: &ExperimentConfig, seed: u64) -> RunConfig {
        let mut rc = RunConfig::new(
            self.fleet.clone(),
            self.policy,
            self.plan.d.clone(),
            self.local,
            self.horizon,
        );
        rc.hardware = self.hardware;
        rc.server_lr = cfg.optimization.server_lr;
        rc.seeds = Seeds::from_base(seed);
        rc.staleness_cap = cfg.horizon.staleness_cap;
        rc.metric_every = cfg.outputs.metric_every;
        if let Some(initial) = &cfg.optimization.initial {
            rc.initial = initial.clone();
        }
        rc
    }
}

fn build_fleet(cfg: &FleetConfig, opt: &OptimizationConfig) -> Result<Fleet, CliError> {
    let m = cfg.compute_time.len();
    let check_len = |name: &str, len: usize| {
        if len == m {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "fleet.{name} has {len} entries but compute_time has {m}"
            )))
        }
    };
    let obj = &cfg.objective;
    let objectives: Vec<ClientObjective> = match obj.family {
        Family::Quadratic => {
            if obj.features.is_some()
                || obj.samples.is_some()
                || obj.concentration.is_some()
                || obj.separation.is_some()
                || obj.l2.is_some()
                || obj.shard_seed.is_some()
                || opt.batch.is_some()
            {
                return Err(CliError::Config(
                    "shard keys are only valid for family = \"logistic\"".into(),
                ));
            }
            let optima = obj
                .optima
                .clone()
                .ok_or_else(|| CliError::Config("quadratic fleet needs `optima`".into()))?;
            check_len("objective.optima", optima.len())?;
            let curvature = obj.curvature.unwrap_or(0.5);
            if !(curvature > 0.0 && curvature.is_finite()) {
                return Err(CliError::Config("objective.curvature must be > 0".into()));
            }
            let noise = obj.noise_std.unwrap_or(0.0);
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(CliError::Config("objective.noise_std must be >= 0".into()));
            }
            optima
                .into_iter()
                .map(|o| {
                    QuadraticObjective::scaled(curvature, o)
                        .with_noise(noise)
                        .into()
                })
                .collect()
        }
        Family::Logistic => {
            if obj.optima.is_some() || obj.curvature.is_some() || obj.noise_std.is_some() {
                return Err(CliError::Config(
                    "quadratic keys are only valid for family = \"quadratic\"".into(),
                ));
            }
            make_synthetic_shards(&shard_settings(obj, opt, m))?
                .into_iter()
                .map(|s| s.objective.into())
                .collect()
        }
    };
    let importance = match &cfg.importance {
        Some(p) => {
            check_len("importance", p.len())?;
            p.clone()
        }
        None => vec![1.0 / m.max(1) as f64; m],
    };
    if let Some(f) = &cfg.first_delivery {
        check_len("first_delivery", f.len())?;
    }
    if let Some(d) = &cfg.distribution {
        check_len("distribution", d.len())?;
    }
    let clients = objectives
        .into_iter()
        .enumerate()
        .map(|(i, o)| {
            let mut c = ClientSpec::new(importance[i], cfg.compute_time[i], o)
                .with_distribution(cfg.distribution.as_ref().map_or(i, |d| d[i]));
            if let Some(f) = &cfg.first_delivery {
                c = c.with_first_delivery(f[i]);
            }
            c
        })
        .collect();
    Ok(Fleet::new(clients)?)
}

fn shard_settings(
    obj: &ObjectiveConfig,
    opt: &OptimizationConfig,
    clients: usize,
) -> SyntheticShardConfig {
    let defaults = SyntheticShardConfig::default();
    SyntheticShardConfig {
        clients,
        features: obj.features.unwrap_or(defaults.features),
        samples: obj.samples.unwrap_or(defaults.samples),
        concentration: obj.concentration.unwrap_or(defaults.concentration),
        separation: obj.separation.unwrap_or(defaults.separation),
        batch: opt.batch.unwrap_or(defaults.batch),
        l2: obj.l2.unwrap_or(defaults.l2),
        seed: obj.shard_seed.unwrap_or(defaults.seed),
    }
}

/// Shard generator settings of a logistic fleet.
pub fn shard_config(cfg: &ExperimentConfig) -> Result<SyntheticShardConfig, CliError> {
    if cfg.fleet.objective.family != Family::Logistic {
        return Err(CliError::Config(
            "gen-shards needs family = \"logistic\"".into(),
        ));
    }
    Ok(shard_settings(
        &cfg.fleet.objective,
        &cfg.optimization,
        cfg.fleet.compute_time.len(),
    ))
}

pub fn build_policy(cfg: &SchemeConfig) -> Result<WaitPolicy, CliError> {
    let m = || need(cfg.m, "scheme.m");
    let policy = match cfg.policy {
        PolicyKind::Sync => WaitPolicy::Synchronous,
        PolicyKind::Async => WaitPolicy::Asynchronous,
        PolicyKind::Fedfix => WaitPolicy::FedFix {
            interval: need(cfg.interval, "scheme.interval")?,
        },
        PolicyKind::Fedbuff => WaitPolicy::FedBuff { m: m()? },
        PolicyKind::Uniform => WaitPolicy::SampleUniform { m: m()? },
        PolicyKind::Md => WaitPolicy::SampleMd { m: m()? },
        PolicyKind::Biased => WaitPolicy::SampleBiased {
            m: m()?,
            criterion: match need(cfg.criterion, "scheme.criterion")? {
                CriterionKind::HighestLoss => BiasCriterion::HighestLoss,
                CriterionKind::Fastest => BiasCriterion::Fastest,
            },
        },
    };
    let uses_m = matches!(
        cfg.policy,
        PolicyKind::Fedbuff | PolicyKind::Uniform | PolicyKind::Md | PolicyKind::Biased
    );
    if cfg.m.is_some() && !uses_m {
        return Err(CliError::Config(format!(
            "scheme.m is not used by policy {}",
            policy.name()
        )));
    }
    if cfg.interval.is_some() && cfg.policy != PolicyKind::Fedfix {
        return Err(CliError::Config(
            "scheme.interval is only used by fedfix".into(),
        ));
    }
    if cfg.criterion.is_some() && cfg.policy != PolicyKind::Biased {
        return Err(CliError::Config(
            "scheme.criterion is only used by biased".into(),
        ));
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema = 1
[fleet]
compute_time = [1.0, 2.0]
[fleet.objective]
family = "quadratic"
optima = [[0.0], [2.0]]
[scheme]
policy = "sync"
weights = "fedavg"
[optimization]
local_lr = 0.5
local_steps = 1
[horizon]
rounds = 10
"#;

    #[test]
    fn minimal_config_builds() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let exp = Experiment::build(&cfg).unwrap();
        assert_eq!(exp.fleet.len(), 2);
        assert_eq!(exp.plan.d, vec![0.5, 0.5]);
        assert_eq!(cfg.ensemble.seeds, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace("local_steps = 1", "local_steps = 1\nlocal_stpes = 2");
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(CliError::Config(_))
        ));
        let text = MINIMAL.replace("schema = 1", "schema = 2");
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn canonical_round_trips() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let again = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn policy_key_mismatch_rejected() {
        let text = MINIMAL.replace("policy = \"sync\"", "policy = \"sync\"\nm = 1");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert!(Experiment::build(&cfg).is_err());
        let text = MINIMAL.replace("policy = \"sync\"", "policy = \"uniform\"");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert!(Experiment::build(&cfg).is_err());
    }

    #[test]
    fn horizon_needs_exactly_one() {
        let text = MINIMAL.replace("rounds = 10", "rounds = 10\ntime = 5.0");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert!(Experiment::build(&cfg).is_err());
    }

    #[test]
    fn sweep_axis_applies() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(
            cfg.with_axis(SweepAxis::LocalSteps, 4.0)
                .unwrap()
                .optimization
                .local_steps,
            4
        );
        assert!(cfg.with_axis(SweepAxis::LocalSteps, 2.5).is_err());
    }
}
