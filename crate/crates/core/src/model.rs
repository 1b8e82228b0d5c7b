//! Clients, fleets, global models and the federated / surrogate objectives.

use crate::error::{invalid, FedError, Result};
use crate::objectives::{dot, ClientObjective, SampleStream};
use crate::stats::Welford;

/// Tolerance on `Σ p_i = 1`.
pub const IMPORTANCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpec {
    /// p_i
    pub importance: f64,
    /// τ_i: fixed compute time, or the mean of the exponential law.
    pub compute_time: f64,
    /// Time until the first delivery when it differs from `compute_time`
    /// (fixed hardware only). Lets a schedule start out of phase.
    pub first_delivery: Option<f64>,
    pub objective: ClientObjective,
    pub distribution_id: usize,
}

impl ClientSpec {
    pub fn new(importance: f64, compute_time: f64, objective: impl Into<ClientObjective>) -> Self {
        Self {
            importance,
            compute_time,
            first_delivery: None,
            objective: objective.into(),
            distribution_id: 0,
        }
    }

    pub fn with_distribution(mut self, id: usize) -> Self {
        self.distribution_id = id;
        self
    }

    pub fn with_first_delivery(mut self, t: f64) -> Self {
        self.first_delivery = Some(t);
        self
    }
}

/// A validated set of clients. Client ids are positions in `clients`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    clients: Vec<ClientSpec>,
}

impl Fleet {
    pub fn new(clients: Vec<ClientSpec>) -> Result<Self> {
        let Some(first) = clients.first() else {
            return Err(invalid("fleet must contain at least one client"));
        };
        let dim = first.objective.dim();
        for (i, c) in clients.iter().enumerate() {
            if !(c.importance > 0.0 && c.importance <= 1.0) {
                return Err(invalid(format!(
                    "client {i}: importance must lie in (0, 1]"
                )));
            }
            if !(c.compute_time > 0.0 && c.compute_time.is_finite()) {
                return Err(invalid(format!("client {i}: compute time must be > 0")));
            }
            if let Some(t) = c.first_delivery {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(invalid(format!("client {i}: first delivery must be > 0")));
                }
            }
            if c.objective.dim() != dim {
                return Err(FedError::DimensionMismatch {
                    expected: dim,
                    actual: c.objective.dim(),
                    context: format!("client {i} objective"),
                });
            }
        }
        let total: f64 = clients.iter().map(|c| c.importance).sum();
        if (total - 1.0).abs() > IMPORTANCE_TOL {
            return Err(invalid(format!("importances sum to {total}, expected 1")));
        }
        Ok(Self { clients })
    }

    /// Equal importance `1/M`, one distribution per client.
    pub fn uniform<O: Into<ClientObjective>>(
        objectives: impl IntoIterator<Item = O>,
        compute_times: &[f64],
    ) -> Result<Self> {
        let objectives: Vec<ClientObjective> = objectives.into_iter().map(Into::into).collect();
        if objectives.len() != compute_times.len() {
            return Err(FedError::DimensionMismatch {
                expected: objectives.len(),
                actual: compute_times.len(),
                context: "compute times".into(),
            });
        }
        let m = objectives.len().max(1) as f64;
        let clients = objectives
            .into_iter()
            .zip(compute_times)
            .enumerate()
            .map(|(i, (o, &t))| ClientSpec::new(1.0 / m, t, o).with_distribution(i))
            .collect();
        Self::new(clients)
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].objective.dim()
    }

    pub fn clients(&self) -> &[ClientSpec] {
        &self.clients
    }

    pub fn client(&self, i: usize) -> &ClientSpec {
        &self.clients[i]
    }

    pub fn importances(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.importance).collect()
    }

    pub fn compute_times(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.compute_time).collect()
    }

    pub fn first_deliveries(&self) -> Vec<f64> {
        self.clients
            .iter()
            .map(|c| c.first_delivery.unwrap_or(c.compute_time))
            .collect()
    }

    pub fn has_phase_offsets(&self) -> bool {
        self.clients.iter().any(|c| c.first_delivery.is_some())
    }

    pub fn objectives(&self) -> impl Iterator<Item = &ClientObjective> {
        self.clients.iter().map(|c| &c.objective)
    }

    /// Largest gradient Lipschitz constant over clients.
    pub fn smoothness(&self) -> f64 {
        self.objectives()
            .map(|o| o.smoothness())
            .fold(0.0, f64::max)
    }

    /// Minimizer of `Σ_i w_i L_i`.
    pub fn weighted_optimum(&self, weights: &[f64]) -> Result<Vec<f64>> {
        self.check_weights(weights)?;
        let terms: Vec<(&ClientObjective, f64)> =
            self.objectives().zip(weights.iter().copied()).collect();
        Ok(crate::objectives::minimize(&terms, None)?.params)
    }

    /// θ*, the minimizer of the federated loss.
    pub fn optimum(&self) -> Result<Vec<f64>> {
        self.weighted_optimum(&self.importances())
    }

    /// Per-client minimizers θ_i*.
    pub fn local_optima(&self) -> Result<Vec<Vec<f64>>> {
        self.objectives().map(ClientObjective::optimum).collect()
    }

    /// `Σ_i p_i [L_i(θ*) − L_i(θ_i*)]`, the heterogeneity residual at the optimum.
    pub fn optimum_residual(&self) -> Result<f64> {
        let opt = self.optimum()?;
        let locals = self.local_optima()?;
        Ok(self
            .clients
            .iter()
            .zip(&locals)
            .map(|(c, lo)| c.importance * (c.objective.loss(&opt) - c.objective.loss(lo)))
            .sum())
    }

    fn check_weights(&self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.len() {
            return Err(FedError::DimensionMismatch {
                expected: self.len(),
                actual: weights.len(),
                context: "per-client weights".into(),
            });
        }
        if let Some(i) = weights.iter().position(|&w| !(w >= 0.0)) {
            return Err(FedError::InvalidWeights(format!(
                "weight for client {i} is {} (must be >= 0)",
                weights[i]
            )));
        }
        Ok(())
    }

    fn check_dim(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.dim() {
            return Err(FedError::DimensionMismatch {
                expected: self.dim(),
                actual: params.len(),
                context: "model parameters".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub params: Vec<f64>,
    pub round: usize,
    pub wall_time: f64,
}

impl GlobalModel {
    pub fn initial(params: Vec<f64>) -> Self {
        Self {
            params,
            round: 0,
            wall_time: 0.0,
        }
    }
}

/// Δ_i(ρ_i(n)) delivered by `client` at `delivery_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub client: usize,
    pub anchor_round: usize,
    pub delta: Vec<f64>,
    pub delivery_time: f64,
}

impl Contribution {
    pub fn staleness(&self, round: usize) -> usize {
        round - self.anchor_round
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    /// p_i
    Importance,
    /// d_i(n)
    Deterministic,
    /// q_i(n) = E[ω_i(n)]
    Expected,
    /// q̃_i(n) = q_i(n) / Σ_j q_j(n)
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub kind: WeightKind,
}

impl WeightVector {
    pub fn new(values: Vec<f64>, kind: WeightKind) -> Result<Self> {
        if let Some(i) = values.iter().position(|&w| !(w >= 0.0)) {
            return Err(FedError::InvalidWeights(format!(
                "entry {i} is {} (must be >= 0)",
                values[i]
            )));
        }
        if kind == WeightKind::Normalized {
            let total: f64 = values.iter().sum();
            if (total - 1.0).abs() > IMPORTANCE_TOL {
                return Err(FedError::InvalidWeights(format!(
                    "normalized weights sum to {total}"
                )));
            }
        }
        Ok(Self { values, kind })
    }

    /// Normalized copy; `None` when every entry is zero.
    pub fn normalized(&self) -> Option<WeightVector> {
        normalize(&self.values).map(|values| WeightVector {
            values,
            kind: WeightKind::Normalized,
        })
    }
}

pub(crate) fn normalize(values: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = values.iter().sum();
    (total > 0.0).then(|| values.iter().map(|v| v / total).collect())
}

/// `L(θ) = Σ_i p_i L_i(θ)`.
pub fn federated_loss(fleet: &Fleet, params: &[f64]) -> Result<f64> {
    fleet.check_dim(params)?;
    Ok(fleet
        .clients
        .iter()
        .map(|c| c.importance * c.objective.loss(params))
        .sum())
}

/// `L^n(θ) = Σ_i q_i(n) L_i(θ)`.
pub fn surrogate_loss(fleet: &Fleet, weights: &[f64], params: &[f64]) -> Result<f64> {
    fleet.check_weights(weights)?;
    fleet.check_dim(params)?;
    Ok(fleet
        .clients
        .iter()
        .zip(weights)
        .map(|(c, &q)| q * c.objective.loss(params))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualEstimate {
    pub value: f64,
    pub std_err: f64,
    /// True when every client uses full gradients, so no sampling was needed.
    pub exact: bool,
}

/// `Σ = Σ_i q_i E‖∇L_i(θ̄, ξ_i)‖²`, estimated from `draws` stochastic gradients
/// per client (exact when no client is stochastic).
pub fn convergence_residual(
    fleet: &Fleet,
    weights: &[f64],
    optimum: &[f64],
    draws: usize,
    seed: u64,
) -> Result<ResidualEstimate> {
    if draws == 0 {
        return Err(invalid("convergence residual needs at least one draw"));
    }
    fleet.check_weights(weights)?;
    fleet.check_dim(optimum)?;
    let mut grad = vec![0.0; fleet.dim()];
    if !fleet.objectives().any(ClientObjective::is_stochastic) {
        let value = fleet
            .objectives()
            .zip(weights)
            .map(|(o, &q)| {
                o.gradient(optimum, &mut grad);
                q * dot(&grad, &grad)
            })
            .sum();
        return Ok(ResidualEstimate {
            value,
            std_err: 0.0,
            exact: true,
        });
    }
    let mut streams: Vec<SampleStream> = (0..fleet.len())
        .map(|i| SampleStream::new(seed, i as u64))
        .collect();
    let mut acc = Welford::new();
    for _ in 0..draws {
        let mut total = 0.0;
        for ((o, &q), stream) in fleet.objectives().zip(weights).zip(streams.iter_mut()) {
            o.stochastic_gradient(optimum, stream, &mut grad);
            total += q * dot(&grad, &grad);
        }
        acc.push(total);
    }
    Ok(ResidualEstimate {
        value: acc.mean(),
        std_err: acc.std_err(),
        exact: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionWeights {
    /// r_j = Σ_{i ∈ Q_j} p_i
    pub importance: Vec<f64>,
    /// s_j(n) = Σ_{i ∈ Q_j} q_i(n)
    pub expected: Vec<f64>,
    /// s̃_j(n); all zero when every s_j is zero.
    pub normalized: Vec<f64>,
}

/// Aggregates per-client importance and expected weights by data distribution.
pub fn distribution_weights(fleet: &Fleet, weights: &[f64]) -> Result<DistributionWeights> {
    fleet.check_weights(weights)?;
    let count = fleet
        .clients
        .iter()
        .map(|c| c.distribution_id + 1)
        .max()
        .unwrap_or(0);
    let mut importance = vec![0.0; count];
    let mut expected = vec![0.0; count];
    for (c, &q) in fleet.clients.iter().zip(weights) {
        importance[c.distribution_id] += c.importance;
        expected[c.distribution_id] += q;
    }
    let normalized = normalize(&expected).unwrap_or_else(|| vec![0.0; count]);
    Ok(DistributionWeights {
        importance,
        expected,
        normalized,
    })
}
