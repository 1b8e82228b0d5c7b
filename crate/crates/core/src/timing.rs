//! Client clocks and server waiting-time policies.
//!
//! Under fixed hardware every time is converted to integer ticks (exact in
//! `f64` below 2^53) so that ties and lcm cycles are detected without drift.

use num_rational::Ratio;
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{invalid, FedError, Result};
use crate::model::Fleet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasCriterion {
    /// The `m` clients with the largest local loss at θ^n.
    HighestLoss,
    /// The `m` clients with the smallest compute time.
    Fastest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WaitPolicy {
    Synchronous,
    Asynchronous,
    FedFix { interval: f64 },
    FedBuff { m: usize },
    SampleUniform { m: usize },
    SampleMd { m: usize },
    SampleBiased { m: usize, criterion: BiasCriterion },
}

impl WaitPolicy {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if clients == 0 {
            return Err(invalid("fleet is empty"));
        }
        match *self {
            Self::FedFix { interval } if !(interval > 0.0 && interval.is_finite()) => {
                Err(invalid("fedfix interval must be > 0"))
            }
            Self::FedBuff { m }
            | Self::SampleUniform { m }
            | Self::SampleMd { m }
            | Self::SampleBiased { m, .. }
                if m == 0 || m > clients =>
            {
                Err(invalid(format!(
                    "m = {m} must satisfy 1 <= m <= M = {clients}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Whether the server picks S_n before local work starts.
    pub fn is_sampling(&self) -> bool {
        matches!(
            self,
            Self::SampleUniform { .. } | Self::SampleMd { .. } | Self::SampleBiased { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Synchronous => "sync",
            Self::Asynchronous => "async",
            Self::FedFix { .. } => "fedfix",
            Self::FedBuff { .. } => "fedbuff",
            Self::SampleUniform { .. } => "uniform",
            Self::SampleMd { .. } => "md",
            Self::SampleBiased { .. } => "biased",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardwareModel {
    /// T_i = τ_i for every job.
    Fixed,
    /// T_i ~ Exp(1/τ_i), drawn from a stream seeded by `seed`.
    Exponential { seed: u64 },
}

/// Ticks per time unit. `exact` is false when the inputs have no common
/// rational grid that fits in 53 bits; times are then plain floats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScale {
    pub ticks_per_unit: f64,
    pub exact: bool,
}

const MAX_EXACT: f64 = 4_503_599_627_370_496.0; // 2^52

impl TimeScale {
    pub fn unit() -> Self {
        Self {
            ticks_per_unit: 1.0,
            exact: false,
        }
    }

    /// Smallest grid on which every value is an integer, if one exists.
    pub fn for_values(values: &[f64]) -> Self {
        let mut lcm: i64 = 1;
        for &v in values {
            let Some(r) = Ratio::<i64>::approximate_float(v) else {
                return Self::unit();
            };
            if (*r.numer() as f64 / *r.denom() as f64) != v {
                return Self::unit();
            }
            let d = *r.denom();
            let g = gcd(lcm as u64, d as u64) as i64;
            match (lcm / g).checked_mul(d) {
                Some(l) => lcm = l,
                None => return Self::unit(),
            }
        }
        let scale = lcm as f64;
        let fits = values.iter().all(|&v| {
            let t = v * scale;
            t.round() == t && t <= MAX_EXACT
        });
        if fits {
            Self {
                ticks_per_unit: scale,
                exact: true,
            }
        } else {
            Self::unit()
        }
    }

    pub fn to_ticks(&self, t: f64) -> f64 {
        if self.exact {
            (t * self.ticks_per_unit).round()
        } else {
            t
        }
    }

    pub fn to_time(&self, ticks: f64) -> f64 {
        if self.exact {
            ticks / self.ticks_per_unit
        } else {
            ticks
        }
    }
}

/// Per-client clocks. Remaining times are in ticks; idle clients hold +∞.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetState {
    remaining: Vec<f64>,
    anchors: Vec<usize>,
    busy: Vec<bool>,
    clock: f64,
    round: usize,
    scale: TimeScale,
}

impl FleetState {
    /// T_i^n in time units.
    pub fn remaining(&self) -> Vec<f64> {
        self.remaining
            .iter()
            .map(|&t| self.scale.to_time(t))
            .collect()
    }

    /// ρ_i(n)
    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn busy(&self) -> &[bool] {
        &self.busy
    }

    /// t^n
    pub fn time(&self) -> f64 {
        self.scale.to_time(self.clock)
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn scale(&self) -> TimeScale {
        self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Participant {
    pub client: usize,
    /// ρ_i(n)
    pub anchor: usize,
    /// Number of draws selecting this client (> 1 only under MD sampling).
    pub multiplicity: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    /// t^n
    pub start: f64,
    /// Δt^n
    pub duration: f64,
    /// S_n ordered by client id.
    pub participants: Vec<Participant>,
}

impl RoundOutcome {
    pub fn contains(&self, client: usize) -> bool {
        self.participants.iter().any(|p| p.client == client)
    }
}

/// Drives a fleet's clocks under one waiting policy.
#[derive(Debug, Clone)]
pub struct Scheduler {
    policy: WaitPolicy,
    hardware: HardwareModel,
    durations: Vec<f64>,
    importances: Vec<f64>,
    interval: f64,
    state: FleetState,
    hw_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
}

impl Scheduler {
    pub fn new(
        fleet: &Fleet,
        policy: WaitPolicy,
        hardware: HardwareModel,
        sampling_seed: u64,
    ) -> Result<Self> {
        let offsets = fleet.has_phase_offsets().then(|| fleet.first_deliveries());
        Self::from_parts(
            &fleet.compute_times(),
            offsets.as_deref(),
            &fleet.importances(),
            policy,
            hardware,
            sampling_seed,
        )
    }

    /// All clients start busy on θ^0 at t^0 = 0. `first_delivery` overrides the
    /// first job's duration under fixed hardware.
    pub fn from_parts(
        compute_times: &[f64],
        first_delivery: Option<&[f64]>,
        importances: &[f64],
        policy: WaitPolicy,
        hardware: HardwareModel,
        sampling_seed: u64,
    ) -> Result<Self> {
        let m = compute_times.len();
        policy.validate(m)?;
        if importances.len() != m {
            return Err(FedError::DimensionMismatch {
                expected: m,
                actual: importances.len(),
                context: "importances".into(),
            });
        }
        if compute_times.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(invalid("compute times must be finite and > 0"));
        }
        if let Some(f) = first_delivery {
            if f.len() != m {
                return Err(FedError::DimensionMismatch {
                    expected: m,
                    actual: f.len(),
                    context: "first deliveries".into(),
                });
            }
            if matches!(hardware, HardwareModel::Exponential { .. }) {
                return Err(FedError::Unsupported(
                    "phase offsets require fixed hardware".into(),
                ));
            }
        }
        let interval = match policy {
            WaitPolicy::FedFix { interval } => interval,
            _ => 0.0,
        };
        let scale = match hardware {
            HardwareModel::Fixed => {
                let mut values = compute_times.to_vec();
                values.extend(first_delivery.unwrap_or(&[]));
                if interval > 0.0 {
                    values.push(interval);
                }
                TimeScale::for_values(&values)
            }
            HardwareModel::Exponential { .. } => TimeScale::unit(),
        };
        let durations: Vec<f64> = compute_times.iter().map(|&t| scale.to_ticks(t)).collect();
        let hw_seed = match hardware {
            HardwareModel::Exponential { seed } => seed,
            HardwareModel::Fixed => 0,
        };
        let mut sched = Self {
            policy,
            hardware,
            interval: scale.to_ticks(interval),
            importances: importances.to_vec(),
            state: FleetState {
                remaining: vec![f64::INFINITY; m],
                anchors: vec![0; m],
                busy: vec![false; m],
                clock: 0.0,
                round: 0,
                scale,
            },
            durations,
            hw_rng: ChaCha8Rng::seed_from_u64(hw_seed),
            sample_rng: ChaCha8Rng::seed_from_u64(sampling_seed),
        };
        if !policy.is_sampling() {
            for i in 0..m {
                let first = match first_delivery {
                    Some(f) => scale.to_ticks(f[i]),
                    None => sched.draw(i),
                };
                sched.state.remaining[i] = first;
                sched.state.busy[i] = true;
            }
        }
        Ok(sched)
    }

    pub fn state(&self) -> &FleetState {
        &self.state
    }

    pub fn policy(&self) -> WaitPolicy {
        self.policy
    }

    pub fn hardware(&self) -> HardwareModel {
        self.hardware
    }

    pub fn clients(&self) -> usize {
        self.durations.len()
    }

    fn draw(&mut self, i: usize) -> f64 {
        match self.hardware {
            HardwareModel::Fixed => self.durations[i],
            HardwareModel::Exponential { .. } => {
                let exp = Exp::new(1.0 / self.durations[i]).expect("rate is positive");
                exp.sample(&mut self.hw_rng)
            }
        }
    }

    /// Selects S_n for sampling policies; returns per-client draw counts.
    fn sample(&mut self, scores: Option<&[f64]>) -> Result<Vec<u32>> {
        let m_total = self.clients();
        let mut counts = vec![0u32; m_total];
        match self.policy {
            WaitPolicy::SampleUniform { m } => {
                for i in rand::seq::index::sample(&mut self.sample_rng, m_total, m) {
                    counts[i] = 1;
                }
            }
            WaitPolicy::SampleMd { m } => {
                let dist = WeightedIndex::new(&self.importances)
                    .map_err(|e| FedError::InvalidWeights(e.to_string()))?;
                for _ in 0..m {
                    counts[dist.sample(&mut self.sample_rng)] += 1;
                }
            }
            WaitPolicy::SampleBiased { m, criterion } => {
                let mut order: Vec<usize> = (0..m_total).collect();
                match criterion {
                    BiasCriterion::HighestLoss => {
                        let scores = scores.ok_or_else(|| {
                            invalid("highest-loss sampling needs per-client losses")
                        })?;
                        if scores.len() != m_total {
                            return Err(FedError::DimensionMismatch {
                                expected: m_total,
                                actual: scores.len(),
                                context: "sampling scores".into(),
                            });
                        }
                        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                    }
                    BiasCriterion::Fastest => {
                        let d = &self.durations;
                        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
                    }
                }
                for &i in &order[..m] {
                    counts[i] = 1;
                }
            }
            _ => unreachable!("sample() is only called for sampling policies"),
        }
        Ok(counts)
    }

    /// Runs one aggregation round: picks S_n and Δt^n, advances every clock
    /// by Δt^n and redelivers θ^{n+1} to S_n.
    ///
    /// `scores` (per-client losses at θ^n) is only read by highest-loss sampling.
    pub fn advance_round(&mut self, scores: Option<&[f64]>) -> Result<RoundOutcome> {
        let n = self.state.round;
        let m_total = self.clients();
        let mut counts = vec![0u32; m_total];

        if self.policy.is_sampling() {
            let drawn = self.sample(scores)?;
            for (i, &c) in drawn.iter().enumerate() {
                if c > 0 {
                    self.state.remaining[i] = self.draw(i);
                    self.state.busy[i] = true;
                    self.state.anchors[i] = n;
                } else {
                    self.state.remaining[i] = f64::INFINITY;
                    self.state.busy[i] = false;
                }
            }
            counts = drawn;
        }

        let busy_times = || {
            self.state
                .remaining
                .iter()
                .zip(&self.state.busy)
                .filter(|(_, &b)| b)
                .map(|(&t, _)| t)
        };
        let dt = match self.policy {
            WaitPolicy::Synchronous => busy_times().fold(0.0, f64::max),
            WaitPolicy::Asynchronous => busy_times().fold(f64::INFINITY, f64::min),
            WaitPolicy::FedFix { .. } => self.interval,
            WaitPolicy::FedBuff { m } => {
                let mut t: Vec<f64> = busy_times().collect();
                t.sort_by(f64::total_cmp);
                t[m - 1]
            }
            _ => busy_times().fold(0.0, f64::max),
        };

        if !self.policy.is_sampling() {
            let ready =
                (0..m_total).filter(|&i| self.state.busy[i] && self.state.remaining[i] <= dt);
            if self.policy == WaitPolicy::Asynchronous {
                // ties are served one per round, lowest id first
                if let Some(i) = ready.min() {
                    counts[i] = 1;
                }
            } else {
                for i in ready {
                    counts[i] = 1;
                }
            }
        }

        let participants: Vec<Participant> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| Participant {
                client: i,
                anchor: self.state.anchors[i],
                multiplicity: c,
            })
            .collect();

        for i in 0..m_total {
            if self.state.busy[i] {
                self.state.remaining[i] -= dt;
            }
        }
        for p in &participants {
            let i = p.client;
            self.state.anchors[i] = n + 1;
            if self.policy.is_sampling() {
                self.state.busy[i] = false;
                self.state.remaining[i] = f64::INFINITY;
            } else {
                self.state.remaining[i] = self.draw(i);
            }
        }

        let start = self.state.time();
        self.state.clock += dt;
        self.state.round += 1;
        Ok(RoundOutcome {
            round: n,
            start,
            duration: self.state.scale.to_time(dt),
            participants,
        })
    }
}

pub(crate) fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub(crate) fn lcm(a: u64, b: u64) -> Option<u64> {
    if a == 0 || b == 0 {
        return Some(0);
    }
    (a / gcd(a, b)).checked_mul(b)
}

/// Integer tick representation of `values` plus their lcm, when one exists.
pub(crate) fn integer_periods(values: &[f64]) -> Result<(Vec<u64>, u64)> {
    let scale = TimeScale::for_values(values);
    if !scale.exact {
        return Err(FedError::Unsupported(
            "compute times have no common rational grid".into(),
        ));
    }
    let ticks: Vec<u64> = values.iter().map(|&v| scale.to_ticks(v) as u64).collect();
    let nu = ticks
        .iter()
        .try_fold(1u64, |acc, &t| lcm(acc, t))
        .ok_or_else(|| FedError::Unsupported("lcm of compute times overflows".into()))?;
    Ok((ticks, nu))
}

const MAX_CYCLE_ROUNDS: usize = 5_000_000;

/// τ = max_{i,n} (n − ρ_i(n)) for fixed hardware.
pub fn staleness_bound(
    policy: WaitPolicy,
    hardware: HardwareModel,
    compute_times: &[f64],
) -> Result<usize> {
    policy.validate(compute_times.len())?;
    if let HardwareModel::Exponential { .. } = hardware {
        return Err(FedError::Unsupported(
            "staleness is a random variable under exponential hardware; measure it from a trajectory"
                .into(),
        ));
    }
    match policy {
        WaitPolicy::Synchronous
        | WaitPolicy::SampleUniform { .. }
        | WaitPolicy::SampleMd { .. }
        | WaitPolicy::SampleBiased { .. } => Ok(0),
        WaitPolicy::FedFix { interval } => {
            let slowest = compute_times.iter().copied().fold(0.0, f64::max);
            let scale = TimeScale::for_values(&[slowest, interval]);
            let ratio = scale.to_ticks(slowest) / scale.to_ticks(interval);
            Ok(ratio.ceil() as usize)
        }
        WaitPolicy::Asynchronous | WaitPolicy::FedBuff { .. } => {
            let (_, nu) = integer_periods(compute_times)?;
            let ones = vec![1.0 / compute_times.len() as f64; compute_times.len()];
            let mut sched = Scheduler::from_parts(compute_times, None, &ones, policy, hardware, 0)?;
            let horizon = sched.state.scale.to_time(2.0 * nu as f64);
            let mut worst = 0;
            for _ in 0..MAX_CYCLE_ROUNDS {
                let round = sched.advance_round(None)?;
                if round.start + round.duration > horizon {
                    return Ok(worst);
                }
                for p in &round.participants {
                    worst = worst.max(round.round - p.anchor);
                }
            }
            Err(FedError::Unsupported(format!(
                "cycle longer than {MAX_CYCLE_ROUNDS} rounds"
            )))
        }
    }
}

/// (α, β) of the participation covariance, plus whether the sampler is biased.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance {
    pub alpha: f64,
    pub beta: f64,
    pub biased: bool,
}

/// α and β such that `E[ω_i ω_j] = α q_i q_j` for i ≠ j and
/// `E[ω_i²] − α q_i² ≤ β q_i`, for aggregation weights `d` and importances `p`.
pub fn sampler_covariance(policy: WaitPolicy, d: &[f64], p: &[f64]) -> Result<Covariance> {
    let m_total = d.len();
    policy.validate(m_total)?;
    if p.len() != m_total {
        return Err(FedError::DimensionMismatch {
            expected: m_total,
            actual: p.len(),
            context: "importances".into(),
        });
    }
    let max_d = d.iter().copied().fold(0.0, f64::max);
    let unbiased = |alpha: f64, beta: f64| Covariance {
        alpha,
        beta,
        biased: false,
    };
    match policy {
        WaitPolicy::Synchronous | WaitPolicy::FedFix { .. } => Ok(unbiased(1.0, 0.0)),
        WaitPolicy::Asynchronous => Ok(unbiased(0.0, max_d)),
        WaitPolicy::FedBuff { .. } => Err(FedError::Unsupported(
            "fedbuff participation covariance has no closed form".into(),
        )),
        WaitPolicy::SampleUniform { m } => {
            if m == m_total {
                return Ok(unbiased(1.0, 0.0));
            }
            let (mf, mt) = (m as f64, m_total as f64);
            let alpha = mt * (mf - 1.0) / (mf * (mt - 1.0));
            let beta = d
                .iter()
                .map(|&di| di - alpha * di * mf / mt)
                .fold(0.0, f64::max);
            Ok(unbiased(alpha, beta))
        }
        WaitPolicy::SampleMd { m } => {
            // counts are multinomial: E[c_i c_j] = m(m−1) p_i p_j, Var c_i = m p_i (1 − p_i)
            let alpha = (m as f64 - 1.0) / m as f64;
            Ok(unbiased(alpha, max_d))
        }
        WaitPolicy::SampleBiased { .. } => Ok(Covariance {
            alpha: 1.0,
            beta: 0.0,
            biased: true,
        }),
    }
}
