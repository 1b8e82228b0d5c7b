//! The aggregation loop: clocks decide who delivers, clients run local SGD
//! from their anchor model, and the server applies
//! `θ^{n+1} = θ^n + η_g Σ_{i ∈ S_n} ω_i(n) Δ_i(ρ_i(n))`.

use rayon::prelude::*;

use crate::error::{invalid, FedError, Result};
use crate::model::{federated_loss, Fleet};
use crate::objectives::{local_sgd, LocalSgd, SampleStream};
use crate::stats::{Summary, Welford};
use crate::timing::{HardwareModel, Participant, RoundOutcome, Scheduler, WaitPolicy};

/// Any coordinate beyond this magnitude ends the run as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub hardware: u64,
    pub batching: u64,
    pub sampling: u64,
}

impl Seeds {
    /// Independent-looking streams derived from one base seed.
    pub fn from_base(seed: u64) -> Self {
        Self {
            hardware: seed,
            batching: seed ^ 0x9E37_79B9_7F4A_7C15,
            sampling: seed.rotate_left(23) ^ 0xD1B5_4A32_D192_ED03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Rounds(usize),
    /// Stop before the first round that would end after this time.
    Time(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub fleet: Fleet,
    pub policy: WaitPolicy,
    /// The exponential seed here is ignored; `seeds.hardware` is used instead.
    pub hardware: HardwareModel,
    /// d_i
    pub weights: Vec<f64>,
    pub server_lr: f64,
    pub local: LocalSgd,
    pub horizon: Horizon,
    pub initial: Vec<f64>,
    pub seeds: Seeds,
    /// Fail with a staleness-cap error when n − ρ_i(n) exceeds this.
    pub staleness_cap: Option<usize>,
    /// Metrics are computed every `metric_every` rounds and on the last row.
    pub metric_every: usize,
    /// Keep local SGD paths so the virtual sequence can be rebuilt.
    pub snapshots: bool,
    /// θ* when already known; computed from the fleet otherwise.
    pub optimum: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn new(
        fleet: Fleet,
        policy: WaitPolicy,
        weights: Vec<f64>,
        local: LocalSgd,
        horizon: Horizon,
    ) -> Self {
        let dim = fleet.dim();
        Self {
            fleet,
            policy,
            hardware: HardwareModel::Fixed,
            weights,
            server_lr: 1.0,
            local,
            horizon,
            initial: vec![0.0; dim],
            seeds: Seeds::from_base(0),
            staleness_cap: None,
            metric_every: 1,
            snapshots: false,
            optimum: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::from_base(seed);
        self
    }

    fn validate(&self) -> Result<()> {
        let m = self.fleet.len();
        self.policy.validate(m)?;
        if self.weights.len() != m {
            return Err(FedError::DimensionMismatch {
                expected: m,
                actual: self.weights.len(),
                context: "aggregation weights".into(),
            });
        }
        if self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(FedError::InvalidWeights(
                "aggregation weights must be finite and >= 0".into(),
            ));
        }
        if !(self.server_lr >= 0.0 && self.server_lr.is_finite()) {
            return Err(invalid("server learning rate must be >= 0"));
        }
        if !(self.local.lr >= 0.0 && self.local.lr.is_finite()) {
            return Err(invalid("local learning rate must be >= 0"));
        }
        if self.local.steps == 0 {
            return Err(invalid("local work needs K >= 1"));
        }
        match self.horizon {
            Horizon::Rounds(0) => return Err(invalid("horizon must be > 0 rounds")),
            Horizon::Time(t) if !(t > 0.0 && t.is_finite()) => {
                return Err(invalid("time horizon must be > 0"))
            }
            _ => {}
        }
        if self.metric_every == 0 {
            return Err(invalid("metric cadence must be >= 1"));
        }
        if self.initial.len() != self.fleet.dim() {
            return Err(FedError::DimensionMismatch {
                expected: self.fleet.dim(),
                actual: self.initial.len(),
                context: "initial model".into(),
            });
        }
        Ok(())
    }

    fn hardware_seeded(&self) -> HardwareModel {
        match self.hardware {
            HardwareModel::Fixed => HardwareModel::Fixed,
            HardwareModel::Exponential { .. } => HardwareModel::Exponential {
                seed: self.seeds.hardware,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub loss_fed: f64,
    pub loss_surrogate: f64,
    /// ‖θ^n − θ*‖²
    pub dist_sq: f64,
    pub client_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// t^n
    pub time: f64,
    /// θ^n
    pub params: Vec<f64>,
    /// S_n, the contributions applied to produce θ^{n+1}. Empty on the last row.
    pub participants: Vec<Participant>,
    /// Δt^n; 0 on the last row.
    pub duration: f64,
    pub metrics: Option<Metrics>,
}

impl RoundRecord {
    pub fn staleness(&self) -> impl Iterator<Item = usize> + '_ {
        self.participants.iter().map(move |p| self.round - p.anchor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    /// First round whose model could not be formed.
    pub round: usize,
    pub reason: String,
}

/// ω_i(n) and the per-step path `θ_i^{(ρ,k)} − θ^ρ` of one contribution.
#[derive(Debug, Clone, PartialEq)]
struct PathTerm {
    weight: f64,
    path: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<RoundRecord>,
    pub optimum: Vec<f64>,
    pub clients: usize,
    pub server_lr: f64,
    pub local_steps: usize,
    pub divergence: Option<Divergence>,
    /// Clients that never appeared in any S_n.
    pub never_served: usize,
    weights: Vec<f64>,
    snapshots: Option<Vec<Vec<PathTerm>>>,
}

impl Trajectory {
    /// Number of aggregation rounds executed.
    pub fn rounds(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.duration > 0.0 || !r.participants.is_empty())
            .count()
    }

    pub fn last(&self) -> &RoundRecord {
        self.records.last().expect("a trajectory always holds θ^0")
    }

    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// Mean and spread of the federated loss over the last `fraction` of rows
    /// carrying metrics (at least one row).
    pub fn final_window_loss(&self, fraction: f64) -> Option<Summary> {
        let losses: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.metrics.as_ref().map(|m| m.loss_fed))
            .collect();
        if losses.is_empty() {
            return None;
        }
        let take = ((losses.len() as f64 * fraction).ceil() as usize).clamp(1, losses.len());
        Some(
            losses[losses.len() - take..]
                .iter()
                .copied()
                .collect::<Welford>()
                .summary(),
        )
    }

    /// `Σ ω_i θ^{ρ_i(n)} / Σ ω_i` over the contributions applied in rounds
    /// `end − window .. end`. `None` if none were applied.
    pub fn anchor_average(&self, end: usize, window: usize) -> Option<Vec<f64>> {
        let start = end.checked_sub(window)?;
        let dim = self.optimum.len();
        let mut acc = vec![0.0; dim];
        let mut total = 0.0;
        for rec in self.records.get(start..end)? {
            for p in &rec.participants {
                let w = f64::from(p.multiplicity) * self.weights[p.client];
                for (a, x) in acc.iter_mut().zip(&self.records[p.anchor].params) {
                    *a += w * x;
                }
                total += w;
            }
        }
        (total > 0.0).then(|| acc.into_iter().map(|a| a / total).collect())
    }

    /// θ^{n,k} for every executed round n.
    pub fn virtual_sequence(&self, k: usize) -> Result<Vec<Vec<f64>>> {
        let snaps = self.snapshots.as_ref().ok_or_else(|| {
            FedError::Unavailable("run without snapshots; enable them to rebuild θ^{n,k}".into())
        })?;
        if k > self.local_steps {
            return Err(invalid(format!("k = {k} exceeds K = {}", self.local_steps)));
        }
        Ok(snaps
            .iter()
            .zip(&self.records)
            .map(|(terms, rec)| {
                let parts: Vec<(f64, &[f64])> = terms
                    .iter()
                    .map(|t| (t.weight, t.path[k].as_slice()))
                    .collect();
                aggregate(&rec.params, self.server_lr, &parts)
            })
            .collect())
    }

    /// θ^{n,0..=K} for round n.
    pub fn virtual_round(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        let seq: Result<Vec<Vec<Vec<f64>>>> = (0..=self.local_steps)
            .map(|k| self.virtual_sequence(k))
            .collect();
        let seq = seq?;
        if n >= seq[0].len() {
            return Err(invalid(format!("round {n} was not executed")));
        }
        Ok(seq.into_iter().map(|mut s| s.swap_remove(n)).collect())
    }
}

/// `θ + η_g Σ_t w_t v_t`, summed in the given order.
fn aggregate(theta: &[f64], server_lr: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    theta
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let step: f64 = terms.iter().map(|(w, v)| w * v[j]).sum();
            x + server_lr * step
        })
        .collect()
}

fn out_of_range(params: &[f64]) -> bool {
    params
        .iter()
        .any(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT)
}

/// Expected per-round weights for sampling policies, where they are known
/// before the draw.
fn analytic_weights(cfg: &RunConfig) -> Option<Vec<f64>> {
    let m_total = cfg.fleet.len() as f64;
    match cfg.policy {
        WaitPolicy::SampleUniform { m } => {
            Some(cfg.weights.iter().map(|d| d * m as f64 / m_total).collect())
        }
        WaitPolicy::SampleMd { m } => Some(
            cfg.weights
                .iter()
                .zip(cfg.fleet.importances())
                .map(|(d, p)| d * p * m as f64)
                .collect(),
        ),
        _ => None,
    }
}

fn realized(cfg: &RunConfig, round: &RoundOutcome) -> Vec<f64> {
    let mut q = vec![0.0; cfg.fleet.len()];
    for p in &round.participants {
        q[p.client] = f64::from(p.multiplicity) * cfg.weights[p.client];
    }
    q
}

const MAX_ROUNDS: usize = 50_000_000;

/// Runs one simulation; a pure function of `cfg` including its seeds.
pub fn run(cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let fleet = &cfg.fleet;
    let m_total = fleet.len();
    let optimum = match &cfg.optimum {
        Some(o) => o.clone(),
        None => fleet.optimum()?,
    };
    let mut sched = Scheduler::new(fleet, cfg.policy, cfg.hardware_seeded(), cfg.seeds.sampling)?;
    let mut streams: Vec<SampleStream> = (0..m_total)
        .map(|i| SampleStream::new(cfg.seeds.batching, i as u64))
        .collect();
    let analytic = analytic_weights(cfg);
    let needs_scores = matches!(
        cfg.policy,
        WaitPolicy::SampleBiased {
            criterion: crate::timing::BiasCriterion::HighestLoss,
            ..
        }
    );

    let mut theta = cfg.initial.clone();
    let mut anchor_models: Vec<Vec<f64>> = vec![theta.clone(); m_total];
    let mut served = vec![false; m_total];
    let mut records = Vec::new();
    let mut snapshots = cfg.snapshots.then(Vec::new);
    let mut divergence = None;

    let metrics_at = |theta: &[f64], q: &[f64]| -> Result<Metrics> {
        let client_losses: Vec<f64> = fleet.objectives().map(|o| o.loss(theta)).collect();
        Ok(Metrics {
            loss_fed: federated_loss(fleet, theta)?,
            loss_surrogate: client_losses.iter().zip(q).map(|(l, w)| l * w).sum(),
            dist_sq: theta
                .iter()
                .zip(&optimum)
                .map(|(a, b)| (a - b) * (a - b))
                .sum(),
            client_losses,
        })
    };

    for n in 0..MAX_ROUNDS {
        let scores: Option<Vec<f64>> =
            needs_scores.then(|| fleet.objectives().map(|o| o.loss(&theta)).collect());
        let round = sched.advance_round(scores.as_deref())?;
        let stop = match cfg.horizon {
            Horizon::Rounds(total) => n == total,
            Horizon::Time(budget) => round.start + round.duration > budget,
        };
        let q = analytic.clone().unwrap_or_else(|| realized(cfg, &round));
        if stop {
            records.push(RoundRecord {
                round: n,
                time: round.start,
                params: theta.clone(),
                participants: Vec::new(),
                duration: 0.0,
                metrics: Some(metrics_at(&theta, &q)?),
            });
            break;
        }

        let mut terms: Vec<(f64, Vec<f64>)> = Vec::with_capacity(round.participants.len());
        let mut paths: Vec<PathTerm> = Vec::new();
        let mut failed = None;
        for p in &round.participants {
            let i = p.client;
            let staleness = n - p.anchor;
            if let Some(cap) = cfg.staleness_cap {
                if staleness > cap {
                    return Err(FedError::StalenessCap {
                        client: i,
                        staleness,
                        cap,
                    });
                }
            }
            served[i] = true;
            let start = if cfg.policy.is_sampling() {
                &theta
            } else {
                &anchor_models[i]
            };
            let objective = &fleet.client(i).objective;
            match local_sgd(start, objective, &cfg.local, &mut streams[i], cfg.snapshots) {
                Ok(update) => {
                    let weight = f64::from(p.multiplicity) * cfg.weights[i];
                    if let Some(path) = update.path {
                        paths.push(PathTerm { weight, path });
                    }
                    terms.push((weight, update.delta));
                }
                Err(FedError::NumericOverflow { step }) => {
                    failed = Some(format!("client {i} overflowed at local step {step}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        let metrics = (n % cfg.metric_every == 0)
            .then(|| metrics_at(&theta, &q))
            .transpose()?;
        records.push(RoundRecord {
            round: n,
            time: round.start,
            params: theta.clone(),
            participants: round.participants.clone(),
            duration: round.duration,
            metrics,
        });
        if let Some(reason) = failed {
            divergence = Some(Divergence {
                round: n + 1,
                reason,
            });
            break;
        }

        let parts: Vec<(f64, &[f64])> = terms.iter().map(|(w, v)| (*w, v.as_slice())).collect();
        let next = aggregate(&theta, cfg.server_lr, &parts);
        if let Some(s) = snapshots.as_mut() {
            s.push(paths);
        }
        if out_of_range(&next) {
            divergence = Some(Divergence {
                round: n + 1,
                reason: format!("θ^{} left the range |x| <= {DIVERGENCE_LIMIT:e}", n + 1),
            });
            break;
        }
        theta = next;
        for p in &round.participants {
            anchor_models[p.client].clone_from(&theta);
        }
    }
    if records.last().is_some_and(|r| !r.participants.is_empty()) && divergence.is_none() {
        return Err(FedError::Unsupported(format!(
            "horizon needs more than {MAX_ROUNDS} rounds"
        )));
    }

    Ok(Trajectory {
        records,
        optimum,
        clients: m_total,
        server_lr: cfg.server_lr,
        local_steps: cfg.local.steps,
        divergence,
        never_served: served.iter().filter(|&&s| !s).count(),
        weights: cfg.weights.clone(),
        snapshots,
    })
}

/// Per-round cross-seed statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub seeds: Vec<u64>,
    pub diverged: usize,
    /// Rows shared by every surviving member.
    pub rows: usize,
    /// θ^n, one summary per coordinate.
    pub params: Vec<Vec<Summary>>,
    pub dist_sq: Vec<Summary>,
    pub time: Vec<Summary>,
    /// Final-window federated loss of each surviving member, in seed order.
    pub final_losses: Vec<(u64, Summary)>,
}

struct MemberResult {
    params: Vec<Vec<f64>>,
    dist_sq: Vec<f64>,
    time: Vec<f64>,
    final_loss: Option<Summary>,
    diverged: bool,
}

/// Final-window fraction used for reported losses.
pub const FINAL_WINDOW: f64 = 0.05;

/// Runs `cfg` once per seed (in parallel) and reduces in seed order.
pub fn run_ensemble(cfg: &RunConfig, seeds: &[u64]) -> Result<EnsembleReport> {
    if seeds.len() < 2 {
        return Err(invalid("an ensemble needs at least two seeds"));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(&dup) = seeds.iter().find(|&&s| !seen.insert(s)) {
        return Err(FedError::SeedCollision(dup));
    }
    cfg.validate()?;
    let mut base = cfg.clone();
    if base.optimum.is_none() {
        base.optimum = Some(base.fleet.optimum()?);
    }
    base.snapshots = false;

    let members: Vec<Result<MemberResult>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut member = base.clone();
            member.seeds = Seeds::from_base(seed);
            let traj = run(&member)?;
            Ok(MemberResult {
                dist_sq: traj
                    .records
                    .iter()
                    .map(|r| {
                        r.params
                            .iter()
                            .zip(&traj.optimum)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum()
                    })
                    .collect(),
                time: traj.records.iter().map(|r| r.time).collect(),
                final_loss: traj.final_window_loss(FINAL_WINDOW),
                diverged: traj.diverged(),
                params: traj.records.into_iter().map(|r| r.params).collect(),
            })
        })
        .collect();
    let members: Vec<MemberResult> = members.into_iter().collect::<Result<_>>()?;

    let alive: Vec<(u64, &MemberResult)> = seeds
        .iter()
        .copied()
        .zip(&members)
        .filter(|(_, m)| !m.diverged)
        .collect();
    let rows = alive.iter().map(|(_, m)| m.params.len()).min().unwrap_or(0);
    let dim = base.fleet.dim();
    let params = (0..rows)
        .map(|n| {
            (0..dim)
                .map(|j| {
                    alive
                        .iter()
                        .map(|(_, m)| m.params[n][j])
                        .collect::<Welford>()
                        .summary()
                })
                .collect()
        })
        .collect();
    let dist_sq = (0..rows)
        .map(|n| {
            alive
                .iter()
                .map(|(_, m)| m.dist_sq[n])
                .collect::<Welford>()
                .summary()
        })
        .collect();
    let time = (0..rows)
        .map(|n| {
            alive
                .iter()
                .map(|(_, m)| m.time[n])
                .collect::<Welford>()
                .summary()
        })
        .collect();
    let final_losses = alive
        .iter()
        .filter_map(|(s, m)| m.final_loss.map(|l| (*s, l)))
        .collect();
    Ok(EnsembleReport {
        seeds: seeds.to_vec(),
        diverged: members.len() - alive.len(),
        rows,
        params,
        dist_sq,
        time,
        final_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::QuadraticObjective;
    use crate::oracle::phi;

    fn quad_fleet(optima: &[f64], times: &[f64]) -> Fleet {
        Fleet::uniform(
            optima
                .iter()
                .map(|&o| QuadraticObjective::centered(vec![o])),
            times,
        )
        .unwrap()
    }

    #[test]
    fn synchronous_contraction_is_exact() {
        let fleet = quad_fleet(&[0.0, 2.0, 7.0], &[1.0, 2.0, 3.0]);
        let p = fleet.importances();
        let local = LocalSgd { steps: 3, lr: 0.1 };
        let mut cfg = RunConfig::new(
            fleet,
            WaitPolicy::Synchronous,
            p,
            local,
            Horizon::Rounds(30),
        );
        cfg.initial = vec![10.0];
        let traj = run(&cfg).unwrap();
        let f = phi(0.1, 3);
        let opt = traj.optimum[0];
        for r in &traj.records {
            let expected = (1.0 - f).powi(r.round as i32) * (10.0 - opt);
            assert!(((r.params[0] - opt) - expected).abs() <= 1e-12 * expected.abs().max(1e-300));
            assert_eq!(r.time, 3.0 * r.round as f64);
        }
    }

    #[test]
    fn zero_server_lr_freezes_model() {
        let fleet = quad_fleet(&[0.0, 2.0], &[1.0, 2.0]);
        let mut cfg = RunConfig::new(
            fleet,
            WaitPolicy::Asynchronous,
            vec![1.0, 1.0],
            LocalSgd { steps: 2, lr: 0.3 },
            Horizon::Rounds(10),
        );
        cfg.server_lr = 0.0;
        cfg.initial = vec![5.0];
        let traj = run(&cfg).unwrap();
        assert!(traj.records.iter().all(|r| r.params == vec![5.0]));
    }

    #[test]
    fn virtual_sequence_endpoints() {
        let fleet = quad_fleet(&[0.0, 2.0], &[1.0, 2.0]);
        let mut cfg = RunConfig::new(
            fleet,
            WaitPolicy::Asynchronous,
            vec![0.75, 1.5],
            LocalSgd { steps: 4, lr: 0.2 },
            Horizon::Rounds(12),
        );
        cfg.snapshots = true;
        let traj = run(&cfg).unwrap();
        let first = traj.virtual_sequence(0).unwrap();
        let last = traj.virtual_sequence(4).unwrap();
        for n in 0..first.len() {
            assert_eq!(first[n], traj.records[n].params);
            assert_eq!(last[n], traj.records[n + 1].params);
        }
        assert!(traj.virtual_sequence(5).is_err());
        assert_eq!(traj.virtual_round(3).unwrap().len(), 5);

        cfg.snapshots = false;
        let plain = run(&cfg).unwrap();
        assert!(matches!(
            plain.virtual_sequence(0),
            Err(FedError::Unavailable(_))
        ));
    }

    #[test]
    fn single_step_virtual_round_has_two_points() {
        let fleet = quad_fleet(&[0.0, 2.0], &[1.0, 1.0]);
        let mut cfg = RunConfig::new(
            fleet.clone(),
            WaitPolicy::Synchronous,
            fleet.importances(),
            LocalSgd { steps: 1, lr: 0.5 },
            Horizon::Rounds(3),
        );
        cfg.snapshots = true;
        let traj = run(&cfg).unwrap();
        assert_eq!(traj.virtual_round(0).unwrap().len(), 2);
    }

    #[test]
    fn divergence_is_recorded() {
        let fleet = quad_fleet(&[0.0, 2.0], &[1.0, 1.0]);
        let mut cfg = RunConfig::new(
            fleet,
            WaitPolicy::Synchronous,
            vec![10.0, 10.0],
            LocalSgd { steps: 1, lr: 1.5 },
            Horizon::Rounds(1000),
        );
        cfg.initial = vec![3.0];
        let traj = run(&cfg).unwrap();
        assert!(traj.diverged());
        assert!(traj.records.len() < 1000);
        assert!(traj
            .records
            .iter()
            .all(|r| r.params[0].abs() <= DIVERGENCE_LIMIT));
    }

    #[test]
    fn staleness_cap_enforced() {
        let fleet = quad_fleet(&[0.0, 2.0], &[1.0, 2.0]);
        let mut cfg = RunConfig::new(
            fleet,
            WaitPolicy::Asynchronous,
            vec![1.0, 1.0],
            LocalSgd { steps: 1, lr: 0.1 },
            Horizon::Rounds(10),
        );
        cfg.staleness_cap = Some(1);
        assert!(matches!(
            run(&cfg),
            Err(FedError::StalenessCap { staleness: 2, .. })
        ));
        cfg.staleness_cap = Some(2);
        assert!(run(&cfg).is_ok());
    }

    #[test]
    fn time_horizon_accounting() {
        let fleet = quad_fleet(&[0.0, 2.0, 7.0], &[1.0, 2.0, 3.0]);
        let cfg = RunConfig::new(
            fleet,
            WaitPolicy::Asynchronous,
            vec![1.0; 3],
            LocalSgd { steps: 1, lr: 0.1 },
            Horizon::Time(60.0),
        );
        let traj = run(&cfg).unwrap();
        let executed = traj.records.len() - 1;
        assert_eq!(executed, 60 + 30 + 20);
        let total: f64 = traj.records.iter().map(|r| r.duration).sum();
        assert_eq!(total, traj.last().time);
    }

    #[test]
    fn ensemble_rejects_duplicate_seeds() {
        let fleet = quad_fleet(&[0.0, 2.0], &[1.0, 1.0]);
        let cfg = RunConfig::new(
            fleet.clone(),
            WaitPolicy::Synchronous,
            fleet.importances(),
            LocalSgd { steps: 1, lr: 0.5 },
            Horizon::Rounds(5),
        );
        assert!(matches!(
            run_ensemble(&cfg, &[3, 3]),
            Err(FedError::SeedCollision(3))
        ));
        assert!(run_ensemble(&cfg, &[3]).is_err());
        let report = run_ensemble(&cfg, &[1, 2, 3]).unwrap();
        assert!(report.params.iter().all(|row| row[0].variance == 0.0));
    }

    #[test]
    fn never_served_under_biased_sampling() {
        let fleet = quad_fleet(&[0.0, 2.0, 4.0], &[1.0, 2.0, 3.0]);
        let cfg = RunConfig::new(
            fleet,
            WaitPolicy::SampleBiased {
                m: 1,
                criterion: crate::timing::BiasCriterion::Fastest,
            },
            vec![1.0; 3],
            LocalSgd { steps: 1, lr: 0.5 },
            Horizon::Rounds(20),
        );
        let traj = run(&cfg).unwrap();
        assert_eq!(traj.never_served, 2);
        assert!((traj.last().params[0]).abs() < 1e-5);
    }

    #[test]
    fn reproducible() {
        let fleet = quad_fleet(&[0.0, 2.0, 4.0], &[1.0, 2.0, 3.0]);
        let mut cfg = RunConfig::new(
            fleet,
            WaitPolicy::SampleUniform { m: 2 },
            vec![1.5; 3],
            LocalSgd { steps: 2, lr: 0.2 },
            Horizon::Rounds(40),
        );
        cfg.hardware = HardwareModel::Exponential { seed: 0 };
        cfg = cfg.with_seed(9);
        assert_eq!(run(&cfg).unwrap(), run(&cfg).unwrap());
    }
}
