//! Deterministic aggregation weights d_i, their expectations q_i and the
//! window condition under which the q_i average back to the importances.

use crate::error::{invalid, FedError, Result};
use crate::model::{normalize, Fleet};
use crate::stats::compensated_sum;
use crate::timing::{integer_periods, lcm, HardwareModel, Scheduler, TimeScale, WaitPolicy};

#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    /// d_i = 1
    Identical,
    /// d_i = p_i
    FedAvg,
    /// d_i = [Σ_j 1/τ_j] τ_i p_i
    AsyncTimeBased,
    /// d_i = ⌈τ_i/Δt⌉ p_i
    FedFixTimeBased,
    /// d_i = p_i / P(i ∈ S_n), so that q_i = p_i every round in expectation.
    Unbiased,
    Custom(Vec<f64>),
}

impl WeightScheme {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Identical => "identical",
            Self::FedAvg => "fedavg",
            Self::AsyncTimeBased => "async-time-based",
            Self::FedFixTimeBased => "fedfix-time-based",
            Self::Unbiased => "unbiased",
            Self::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightPlan {
    pub scheme: WeightScheme,
    pub d: Vec<f64>,
    /// W; `None` when the policy has no closed-form window.
    pub window: Option<usize>,
    /// Window-averaged q_i; `None` when it depends on the trajectory.
    pub expected: Option<Vec<f64>>,
}

pub fn plan_weights(
    scheme: &WeightScheme,
    fleet: &Fleet,
    policy: WaitPolicy,
    hardware: HardwareModel,
) -> Result<WeightPlan> {
    policy.validate(fleet.len())?;
    let p = fleet.importances();
    let tau = fleet.compute_times();
    let exponential = matches!(hardware, HardwareModel::Exponential { .. });
    let d: Vec<f64> = match scheme {
        WeightScheme::Identical => vec![1.0; fleet.len()],
        WeightScheme::FedAvg => p.clone(),
        WeightScheme::AsyncTimeBased => {
            if exponential {
                return Err(FedError::Unsupported(
                    "time-based weights need fixed compute times".into(),
                ));
            }
            let rate_sum: f64 = tau.iter().map(|t| 1.0 / t).sum();
            tau.iter()
                .zip(&p)
                .map(|(t, pi)| rate_sum * t * pi)
                .collect()
        }
        WeightScheme::FedFixTimeBased => {
            if exponential {
                return Err(FedError::Unsupported(
                    "time-based weights need fixed compute times".into(),
                ));
            }
            let WaitPolicy::FedFix { interval } = policy else {
                return Err(invalid("fedfix time-based weights need a fedfix policy"));
            };
            period_counts(&tau, interval)
                .iter()
                .zip(&p)
                .map(|(&k, pi)| k as f64 * pi)
                .collect()
        }
        WeightScheme::Unbiased => {
            let pi = participation_probability(fleet, policy, hardware)?;
            p.iter().zip(&pi).map(|(pi_i, prob)| pi_i / prob).collect()
        }
        WeightScheme::Custom(values) => {
            if values.len() != fleet.len() {
                return Err(FedError::DimensionMismatch {
                    expected: fleet.len(),
                    actual: values.len(),
                    context: "custom weight table".into(),
                });
            }
            if values.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(FedError::InvalidWeights(
                    "custom weights must be finite and >= 0".into(),
                ));
            }
            values.clone()
        }
    };
    let window = window_size(policy, hardware, &tau).ok();
    let expected = expected_weights(fleet, policy, hardware, &d, window)?;
    Ok(WeightPlan {
        scheme: scheme.clone(),
        d,
        window,
        expected,
    })
}

/// N'_i = ⌈τ_i/Δt⌉, evaluated on an exact grid when one exists.
fn period_counts(tau: &[f64], interval: f64) -> Vec<u64> {
    let mut values = tau.to_vec();
    values.push(interval);
    let scale = TimeScale::for_values(&values);
    let step = scale.to_ticks(interval);
    tau.iter()
        .map(|&t| (scale.to_ticks(t) / step).ceil() as u64)
        .collect()
}

/// P(i ∈ S_n), averaged over the window for deterministic schedules.
fn participation_probability(
    fleet: &Fleet,
    policy: WaitPolicy,
    hardware: HardwareModel,
) -> Result<Vec<f64>> {
    let m_total = fleet.len();
    let tau = fleet.compute_times();
    let exponential = matches!(hardware, HardwareModel::Exponential { .. });
    match policy {
        WaitPolicy::Synchronous => Ok(vec![1.0; m_total]),
        WaitPolicy::SampleUniform { m } => Ok(vec![m as f64 / m_total as f64; m_total]),
        // one draw at a time: E[count_i] = m p_i, so d_i = 1/m gives q_i = p_i
        WaitPolicy::SampleMd { m } => {
            Ok(fleet.importances().iter().map(|p| m as f64 * p).collect())
        }
        WaitPolicy::Asynchronous if exponential => {
            let total: f64 = tau.iter().map(|t| 1.0 / t).sum();
            Ok(tau.iter().map(|t| (1.0 / t) / total).collect())
        }
        WaitPolicy::FedFix { interval } if exponential => {
            Ok(tau.iter().map(|t| -(-interval / t).exp_m1()).collect())
        }
        WaitPolicy::Asynchronous | WaitPolicy::FedFix { .. } => {
            let w = window_size(policy, hardware, &tau)?;
            let counts = participation_counts(fleet, policy, w)?;
            if let Some(i) = counts.iter().position(|&c| c == 0) {
                return Err(FedError::Unsupported(format!(
                    "client {i} never participates within the window"
                )));
            }
            Ok(counts.iter().map(|&c| c as f64 / w as f64).collect())
        }
        WaitPolicy::FedBuff { .. } | WaitPolicy::SampleBiased { .. } => Err(FedError::Unsupported(
            format!("no unbiased weights for the {} policy", policy.name()),
        )),
    }
}

/// Participation counts of each client over the first `rounds` rounds of a
/// fixed-hardware schedule.
fn participation_counts(fleet: &Fleet, policy: WaitPolicy, rounds: usize) -> Result<Vec<u64>> {
    let mut sched = Scheduler::new(fleet, policy, HardwareModel::Fixed, 0)?;
    let mut counts = vec![0u64; fleet.len()];
    for _ in 0..rounds {
        for p in sched.advance_round(None)?.participants {
            counts[p.client] += u64::from(p.multiplicity);
        }
    }
    Ok(counts)
}

fn expected_weights(
    fleet: &Fleet,
    policy: WaitPolicy,
    hardware: HardwareModel,
    d: &[f64],
    window: Option<usize>,
) -> Result<Option<Vec<f64>>> {
    let scaled = |prob: Vec<f64>| Some(prob.iter().zip(d).map(|(a, b)| a * b).collect());
    Ok(match policy {
        WaitPolicy::SampleBiased { m, criterion } => match criterion {
            crate::timing::BiasCriterion::Fastest => {
                let tau = fleet.compute_times();
                let mut order: Vec<usize> = (0..fleet.len()).collect();
                order.sort_by(|&a, &b| tau[a].total_cmp(&tau[b]).then(a.cmp(&b)));
                let mut prob = vec![0.0; fleet.len()];
                order[..m].iter().for_each(|&i| prob[i] = 1.0);
                scaled(prob)
            }
            crate::timing::BiasCriterion::HighestLoss => None,
        },
        WaitPolicy::FedBuff { .. } => None,
        WaitPolicy::Asynchronous | WaitPolicy::FedFix { .. }
            if matches!(hardware, HardwareModel::Fixed) =>
        {
            match window {
                Some(w) => {
                    let counts = participation_counts(fleet, policy, w)?;
                    Some(
                        counts
                            .iter()
                            .zip(d)
                            .map(|(&c, di)| c as f64 * di / w as f64)
                            .collect(),
                    )
                }
                None => None,
            }
        }
        _ => scaled(participation_probability(fleet, policy, hardware)?),
    })
}

/// W: rounds after which the expected weights repeat.
pub fn window_size(
    policy: WaitPolicy,
    hardware: HardwareModel,
    compute_times: &[f64],
) -> Result<usize> {
    policy.validate(compute_times.len())?;
    if matches!(hardware, HardwareModel::Exponential { .. }) {
        // memoryless clocks: q_i(n) is the same every round
        return match policy {
            WaitPolicy::FedBuff { .. } => Err(FedError::Unsupported(
                "fedbuff has no closed-form window".into(),
            )),
            _ => Ok(1),
        };
    }
    match policy {
        WaitPolicy::Synchronous
        | WaitPolicy::SampleUniform { .. }
        | WaitPolicy::SampleMd { .. }
        | WaitPolicy::SampleBiased { .. } => Ok(1),
        WaitPolicy::Asynchronous => {
            let (ticks, nu) = integer_periods(compute_times)?;
            Ok(ticks.iter().map(|&t| (nu / t) as usize).sum())
        }
        WaitPolicy::FedFix { interval } => {
            let w = period_counts(compute_times, interval)
                .into_iter()
                .try_fold(1u64, lcm)
                .ok_or_else(|| FedError::Unsupported("window lcm overflows".into()))?;
            Ok(w as usize)
        }
        WaitPolicy::FedBuff { .. } => Err(FedError::Unsupported(
            "fedbuff has no closed-form window".into(),
        )),
    }
}

/// ω_i(n) = multiplicity · d_i for the first `rounds` rounds of a schedule.
/// For fixed hardware without sampling this is exactly q_i(n).
pub fn realized_weights(
    fleet: &Fleet,
    policy: WaitPolicy,
    hardware: HardwareModel,
    d: &[f64],
    rounds: usize,
    sampling_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if d.len() != fleet.len() {
        return Err(FedError::DimensionMismatch {
            expected: fleet.len(),
            actual: d.len(),
            context: "aggregation weights".into(),
        });
    }
    let mut sched = Scheduler::new(fleet, policy, hardware, sampling_seed)?;
    (0..rounds)
        .map(|_| {
            let round = sched.advance_round(None)?;
            let mut row = vec![0.0; fleet.len()];
            for p in round.participants {
                row[p.client] = f64::from(p.multiplicity) * d[p.client];
            }
            Ok(row)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub satisfied: bool,
    /// max over windows and clients of |q̃_i − p_i|
    pub max_deviation: f64,
    pub windows: usize,
    /// Trailing rounds ignored because they do not fill a window.
    pub truncated: usize,
    /// Normalized window averages q̃_i, one row per window.
    pub averages: Vec<Vec<f64>>,
}

pub const WINDOW_TOL: f64 = 1e-9;

/// Checks that q_i(n) averaged over each complete window of `window` rounds
/// normalizes to p_i within `tol`.
pub fn verify_window_assumption(
    q: &[Vec<f64>],
    window: usize,
    p: &[f64],
    tol: f64,
) -> Result<WindowReport> {
    if window == 0 {
        return Err(invalid("window must be >= 1"));
    }
    let windows = q.len() / window;
    if windows == 0 {
        return Err(invalid(format!(
            "trajectory of {} rounds is shorter than the window W = {window}",
            q.len()
        )));
    }
    if let Some(row) = q.iter().find(|row| row.len() != p.len()) {
        return Err(FedError::DimensionMismatch {
            expected: p.len(),
            actual: row.len(),
            context: "q trajectory row".into(),
        });
    }
    let mut max_deviation = 0.0_f64;
    let mut averages = Vec::with_capacity(windows);
    for chunk in q.chunks_exact(window) {
        let sums: Vec<f64> = (0..p.len())
            .map(|i| compensated_sum(chunk.iter().map(|row| row[i])))
            .collect();
        let normalized = normalize(&sums).unwrap_or_else(|| vec![0.0; p.len()]);
        let dev = normalized
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        max_deviation = max_deviation.max(dev);
        averages.push(normalized);
    }
    Ok(WindowReport {
        satisfied: max_deviation < tol,
        max_deviation,
        windows,
        truncated: q.len() % window,
        averages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChiSquare {
    Value(f64),
    /// A distribution with r_j > 0 receives no weight (s̃_j = 0).
    Unrepresented {
        distribution: usize,
    },
}

/// χ² = Σ_j (r_j − s̃_j)² / s̃_j.
pub fn chi_square_bias(r: &[f64], s_normalized: &[f64]) -> Result<ChiSquare> {
    if r.len() != s_normalized.len() {
        return Err(FedError::DimensionMismatch {
            expected: r.len(),
            actual: s_normalized.len(),
            context: "distribution weights".into(),
        });
    }
    let mut total = 0.0;
    for (j, (&rj, &sj)) in r.iter().zip(s_normalized).enumerate() {
        if sj > 0.0 {
            total += (rj - sj) * (rj - sj) / sj;
        } else if rj > 0.0 {
            return Ok(ChiSquare::Unrepresented { distribution: j });
        }
    }
    Ok(ChiSquare::Value(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::QuadraticObjective;

    fn fleet(times: &[f64]) -> Fleet {
        Fleet::uniform(
            times
                .iter()
                .map(|_| QuadraticObjective::centered(vec![0.0])),
            times,
        )
        .unwrap()
    }

    const FIXED: HardwareModel = HardwareModel::Fixed;

    #[test]
    fn async_time_based_close_form() {
        let f = fleet(&[1.0, 2.0]);
        let plan = plan_weights(
            &WeightScheme::AsyncTimeBased,
            &f,
            WaitPolicy::Asynchronous,
            FIXED,
        )
        .unwrap();
        assert_eq!(plan.d, vec![0.75, 1.5]);
        assert_eq!(plan.window, Some(3));
        let q = plan.expected.unwrap();
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fedfix_time_based_close_form() {
        let f = fleet(&[3.0; 4]);
        let policy = WaitPolicy::FedFix { interval: 2.0 };
        let plan = plan_weights(&WeightScheme::FedFixTimeBased, &f, policy, FIXED).unwrap();
        assert_eq!(plan.d, vec![0.5; 4]);
        let wide = WaitPolicy::FedFix { interval: 3.0 };
        let plan = plan_weights(&WeightScheme::FedFixTimeBased, &f, wide, FIXED).unwrap();
        assert_eq!(plan.d, f.importances());
    }

    #[test]
    fn time_based_rejects_exponential_hardware() {
        let f = fleet(&[1.0, 2.0]);
        let hw = HardwareModel::Exponential { seed: 0 };
        assert!(matches!(
            plan_weights(
                &WeightScheme::AsyncTimeBased,
                &f,
                WaitPolicy::Asynchronous,
                hw
            ),
            Err(FedError::Unsupported(_))
        ));
    }

    #[test]
    fn fedavg_is_importance() {
        let f = fleet(&[1.0, 5.0, 2.0]);
        let plan = plan_weights(&WeightScheme::FedAvg, &f, WaitPolicy::Synchronous, FIXED).unwrap();
        assert_eq!(plan.d, f.importances());
    }

    #[test]
    fn window_examples() {
        assert_eq!(
            window_size(WaitPolicy::Asynchronous, FIXED, &[1.0, 2.0, 3.0]).unwrap(),
            11
        );
        assert_eq!(
            window_size(WaitPolicy::Synchronous, FIXED, &[1.0, 2.0, 3.0]).unwrap(),
            1
        );
        let fedfix = WaitPolicy::FedFix { interval: 2.0 };
        assert_eq!(window_size(fedfix, FIXED, &[1.0, 2.0, 3.0]).unwrap(), 2);
    }

    #[test]
    fn window_check_examples() {
        let f = fleet(&[1.0, 2.0]);
        let p = f.importances();
        let async_d = [0.75, 1.5];
        let q = realized_weights(&f, WaitPolicy::Asynchronous, FIXED, &async_d, 9, 0).unwrap();
        let report = verify_window_assumption(&q, 3, &p, WINDOW_TOL).unwrap();
        assert!(report.satisfied);
        assert_eq!(report.windows, 3);

        let q = realized_weights(&f, WaitPolicy::Asynchronous, FIXED, &[1.0, 1.0], 9, 0).unwrap();
        let report = verify_window_assumption(&q, 3, &p, WINDOW_TOL).unwrap();
        assert!(!report.satisfied);
        assert!((report.averages[0][0] - 2.0 / 3.0).abs() < 1e-15);

        let q = realized_weights(&f, WaitPolicy::Synchronous, FIXED, &p, 4, 0).unwrap();
        let report = verify_window_assumption(&q, 1, &p, WINDOW_TOL).unwrap();
        assert!(report.satisfied);
        assert_eq!(report.max_deviation, 0.0);
    }

    #[test]
    fn window_check_truncates() {
        let q = vec![vec![0.5, 0.5]; 5];
        let report = verify_window_assumption(&q, 2, &[0.5, 0.5], WINDOW_TOL).unwrap();
        assert_eq!((report.windows, report.truncated), (2, 1));
        assert!(verify_window_assumption(&q, 6, &[0.5, 0.5], WINDOW_TOL).is_err());
    }

    #[test]
    fn chi_square_examples() {
        assert_eq!(
            chi_square_bias(&[0.5, 0.5], &[0.5, 0.5]).unwrap(),
            ChiSquare::Value(0.0)
        );
        let ChiSquare::Value(v) = chi_square_bias(&[0.5, 0.5], &[0.75, 0.25]).unwrap() else {
            panic!("expected a value");
        };
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            chi_square_bias(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            ChiSquare::Unrepresented { distribution: 1 }
        );
    }

    #[test]
    fn unbiased_weights_per_sampler() {
        let f = fleet(&[1.0, 1.0, 1.0, 1.0]);
        let plan = plan_weights(
            &WeightScheme::Unbiased,
            &f,
            WaitPolicy::SampleUniform { m: 2 },
            FIXED,
        )
        .unwrap();
        assert_eq!(plan.d, vec![0.5; 4]);
        let plan = plan_weights(
            &WeightScheme::Unbiased,
            &f,
            WaitPolicy::SampleMd { m: 2 },
            FIXED,
        )
        .unwrap();
        assert_eq!(plan.d, vec![0.5; 4]);
        let g = fleet(&[1.0, 2.0]);
        let plan =
            plan_weights(&WeightScheme::Unbiased, &g, WaitPolicy::Asynchronous, FIXED).unwrap();
        assert_eq!(plan.d, vec![0.75, 1.5]);
        let plan = plan_weights(
            &WeightScheme::Unbiased,
            &g,
            WaitPolicy::Asynchronous,
            HardwareModel::Exponential { seed: 0 },
        )
        .unwrap();
        assert!((plan.d[0] - 0.75).abs() < 1e-15 && (plan.d[1] - 1.5).abs() < 1e-15);
    }
}
