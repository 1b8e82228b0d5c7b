//! Convergence-bound terms with every O(·) constant set to 1.
//!
//! The values are for ordering and trend checks only; they do not predict
//! absolute losses.

use std::fmt::Write as _;

use crate::error::{invalid, FedError, Result};
use crate::model::{convergence_residual, normalize, Fleet};
use crate::objectives::{dot, SampleStream};
use crate::stats::Welford;
use crate::timing::{sampler_covariance, staleness_bound, HardwareModel, WaitPolicy};
use crate::weights::{window_size, WeightPlan};

/// Printed with every report.
pub const CONSTANTS_NOTE: &str = "all O(.) constants set to 1; use for ordering only";

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub clients: usize,
    pub local_steps: usize,
    pub rounds: f64,
    pub server_lr: f64,
    pub local_lr: f64,
    /// L
    pub smoothness: f64,
    /// τ
    pub staleness: f64,
    /// W
    pub window: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Σ
    pub sigma: f64,
    /// Σ₁
    pub sigma1: f64,
    /// max_{i,n} q_i(n)
    pub max_weight: f64,
    /// R({L^n})
    pub residual: f64,
    /// ‖θ^0 − θ̄‖²
    pub init_gap: f64,
    /// χ² between r and s̃; reported, not part of the total.
    pub chi_square: f64,
    /// ρ in the step-size condition.
    pub rho: f64,
}

impl BoundInputs {
    /// Synchronous shape (α = 1, everything else zero) for the given run size.
    pub fn new(
        clients: usize,
        local_steps: usize,
        rounds: f64,
        server_lr: f64,
        local_lr: f64,
    ) -> Self {
        Self {
            clients,
            local_steps,
            rounds,
            server_lr,
            local_lr,
            smoothness: 1.0,
            staleness: 0.0,
            window: 1.0,
            alpha: 1.0,
            beta: 0.0,
            sigma: 0.0,
            sigma1: 0.0,
            max_weight: 1.0,
            residual: 0.0,
            init_gap: 0.0,
            chi_square: 0.0,
            rho: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.local_steps == 0 {
            return Err(invalid("bounds need M >= 1 and K >= 1"));
        }
        if !(self.rounds >= 1.0 && self.window >= 1.0) {
            return Err(invalid("bounds need N >= 1 and W >= 1"));
        }
        let reals = [
            ("η_g", self.server_lr),
            ("η_l", self.local_lr),
            ("L", self.smoothness),
            ("τ", self.staleness),
            ("α", self.alpha),
            ("β", self.beta),
            ("Σ", self.sigma),
            ("Σ₁", self.sigma1),
            ("max q", self.max_weight),
            ("R", self.residual),
            ("‖θ^0 − θ̄‖²", self.init_gap),
            ("χ²", self.chi_square),
            ("ρ", self.rho),
        ];
        if let Some((name, value)) = reals.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid(format!(
                "bound input {name} = {value} must be finite and >= 0"
            )));
        }
        if self.server_lr * self.local_lr == 0.0 {
            return Err(invalid("bounds need η_g η_l > 0"));
        }
        Ok(())
    }

    /// η̃ = η_g η_l
    pub fn effective_lr(&self) -> f64 {
        self.server_lr * self.local_lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonTerms {
    pub residual: f64,
    pub init: f64,
    pub local: f64,
    pub alpha: f64,
    pub beta: f64,
    pub window: f64,
    /// ε_F + ε_K + ε_α + ε_β + ε_W
    pub total: f64,
}

pub fn epsilon_terms(inputs: &BoundInputs) -> Result<EpsilonTerms> {
    inputs.validate()?;
    let eta = inputs.effective_lr();
    let k = inputs.local_steps as f64;
    let r = inputs.residual;
    let delay = eta + eta * eta * k * k * inputs.staleness * inputs.staleness;
    let init = inputs.init_gap / (eta * k * inputs.rounds);
    let local = inputs.local_lr.powi(2) * (k - 1.0).powi(2) * (r + inputs.sigma1);
    let alpha = inputs.alpha * delay * (r + inputs.max_weight * inputs.sigma);
    let beta = inputs.beta * delay * (r + inputs.sigma);
    let window = eta * (inputs.window - 1.0) * k;
    Ok(EpsilonTerms {
        residual: r,
        init,
        local,
        alpha,
        beta,
        window,
        total: init + local + alpha + beta + window,
    })
}

/// `η_l ≤ 1/(48KL) · min(1, 1/(3ρ²η_g(τ+1)))`, evaluated as one division.
pub fn lr_constraint(
    local_steps: usize,
    smoothness: f64,
    rho: f64,
    server_lr: f64,
    staleness: f64,
) -> Result<f64> {
    if local_steps == 0 || !(smoothness > 0.0) {
        return Err(invalid("lr constraint needs K >= 1 and L > 0"));
    }
    if !(rho >= 0.0 && server_lr >= 0.0 && staleness >= 0.0) {
        return Err(invalid("lr constraint needs ρ, η_g, τ >= 0"));
    }
    let damp = (3.0 * rho * rho * server_lr * (staleness + 1.0)).max(1.0);
    Ok(1.0 / (48.0 * local_steps as f64 * smoothness * damp))
}

/// True iff `max(a, b) < c < 1` for W = Θ(N^a), τ = Θ(N^b), η_l ∝ N^{−c}.
pub fn exponent_check(a: f64, b: f64, c: f64) -> bool {
    a.max(b) < c && c < 1.0
}

/// Policy-determined bound inputs under fixed hardware.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub policy: &'static str,
    pub alpha: f64,
    pub beta: f64,
    pub staleness: usize,
    pub window: usize,
    /// Rounds that fit in the time budget.
    pub rounds: f64,
    pub residual: f64,
    pub max_weight: f64,
}

impl Preset {
    /// Overrides α, β, τ, W, R and max q; keeps N so schemes compare at equal N.
    pub fn apply(&self, base: &BoundInputs) -> BoundInputs {
        BoundInputs {
            alpha: self.alpha,
            beta: self.beta,
            staleness: self.staleness as f64,
            window: self.window as f64,
            residual: self.residual,
            max_weight: self.max_weight,
            ..base.clone()
        }
    }
}

pub fn scheme_presets(
    fleet: &Fleet,
    policy: WaitPolicy,
    plan: &WeightPlan,
    time_budget: f64,
) -> Result<Preset> {
    policy.validate(fleet.len())?;
    if !(time_budget > 0.0 && time_budget.is_finite()) {
        return Err(invalid("time budget must be > 0"));
    }
    let hw = HardwareModel::Fixed;
    let tau = fleet.compute_times();
    let p = fleet.importances();
    let rounds = match policy {
        WaitPolicy::Synchronous => time_budget / tau.iter().copied().fold(0.0, f64::max),
        WaitPolicy::Asynchronous => tau.iter().map(|t| time_budget / t).sum(),
        WaitPolicy::FedFix { interval } => time_budget / interval,
        other => {
            return Err(FedError::Unsupported(format!(
                "no bound preset for the {} policy",
                other.name()
            )))
        }
    };
    let cov = sampler_covariance(policy, &plan.d, &p)?;
    let residual = match policy {
        WaitPolicy::Synchronous => 0.0,
        _ => fleet.optimum_residual()?,
    };
    let max_weight = plan
        .expected
        .as_deref()
        .unwrap_or(&plan.d)
        .iter()
        .copied()
        .fold(0.0, f64::max);
    Ok(Preset {
        policy: policy.name(),
        alpha: cov.alpha,
        beta: cov.beta,
        staleness: staleness_bound(policy, hw, &tau)?,
        window: window_size(policy, hw, &tau)?,
        rounds,
        residual,
        max_weight,
    })
}

/// (Σ, Σ₁) at `optimum` for weights `q` (normalized internally): the weighted
/// second moment of stochastic gradients and of their noise alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientMoments {
    pub sigma: f64,
    pub sigma1: f64,
    pub exact: bool,
}

pub fn gradient_moments(
    fleet: &Fleet,
    q: &[f64],
    optimum: &[f64],
    draws: usize,
    seed: u64,
) -> Result<GradientMoments> {
    let q = normalize(q).ok_or_else(|| FedError::InvalidWeights("weights are all zero".into()))?;
    let sigma = convergence_residual(fleet, &q, optimum, draws, seed)?;
    let mut exact = sigma.exact;
    let dim = fleet.dim() as f64;
    let mut full = vec![0.0; fleet.dim()];
    let mut noisy = vec![0.0; fleet.dim()];
    let mut sigma1 = 0.0;
    for (i, (obj, &w)) in fleet.objectives().zip(&q).enumerate() {
        if let Some(quad) = obj.as_quadratic() {
            sigma1 += w * dim * quad.noise_std().powi(2);
            continue;
        }
        if !obj.is_stochastic() {
            continue;
        }
        exact = false;
        obj.gradient(optimum, &mut full);
        let mut stream = SampleStream::new(seed ^ 0x5EED, i as u64);
        let mut acc = Welford::new();
        for _ in 0..draws {
            obj.stochastic_gradient(optimum, &mut stream, &mut noisy);
            for (g, f) in noisy.iter_mut().zip(&full) {
                *g -= f;
            }
            acc.push(dot(&noisy, &noisy));
        }
        sigma1 += w * acc.mean();
    }
    Ok(GradientMoments {
        sigma: sigma.value,
        sigma1,
        exact,
    })
}

/// Flat `key = value` report.
pub fn render_report(inputs: &BoundInputs, terms: &EpsilonTerms) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {CONSTANTS_NOTE}");
    let rows: [(&str, f64); 23] = [
        ("M", inputs.clients as f64),
        ("K", inputs.local_steps as f64),
        ("N", inputs.rounds),
        ("eta_g", inputs.server_lr),
        ("eta_l", inputs.local_lr),
        ("L", inputs.smoothness),
        ("tau", inputs.staleness),
        ("W", inputs.window),
        ("alpha", inputs.alpha),
        ("beta", inputs.beta),
        ("sigma", inputs.sigma),
        ("sigma1", inputs.sigma1),
        ("max_q", inputs.max_weight),
        ("rho", inputs.rho),
        ("chi_square", inputs.chi_square),
        ("R", terms.residual),
        ("eps_F", terms.init),
        ("eps_K", terms.local),
        ("eps_alpha", terms.alpha),
        ("eps_beta", terms.beta),
        ("eps_W", terms.window),
        ("eps_total", terms.total),
        ("R_plus_eps", terms.residual + terms.total),
    ];
    for (key, value) in rows {
        let _ = writeln!(out, "{key} = {value:.16e}");
    }
    out
}
