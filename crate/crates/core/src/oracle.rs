//! Closed-form mean and second-moment recursions for scalar quadratic clients
//! `L_i(θ) = ½(θ − θ_i*)²` with equal importance `1/M`.
//!
//! K full-gradient local steps from anchor θ^k return `φ(θ_i* − θ^k)`, so the
//! server update is linear in past models and E[θ^n] = A^n θ^0 + B^n.

use num_rational::BigRational;

use crate::error::{invalid, FedError, Result};

/// `φ = 1 − (1 − η_l)^K`.
pub fn phi(local_lr: f64, steps: usize) -> f64 {
    // −expm1(K ln(1 − η_l)) keeps full precision as η_l → 0
    let steps = i32::try_from(steps).unwrap_or(i32::MAX);
    if local_lr < 1.0 {
        -(f64::from(steps) * (-local_lr).ln_1p()).exp_m1()
    } else {
        1.0 - (1.0 - local_lr).powi(steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleScheme {
    /// Full participation, d = 1/M.
    Sync,
    /// m clients drawn without replacement each round, d = 1/m.
    SyncUniform { m: usize },
    /// One client per round under symmetric exponential hardware, d = 1.
    Async,
    /// Exponential hardware (unit rate) aggregated every `window` time units,
    /// d = 1/(RM) with R = 1 − e^{−window}.
    Hybrid { window: f64 },
    /// Hybrid with aggregation times T^0 = 0 < T^1 < T^2 < … (mean only).
    HybridEvo { times: Vec<f64> },
}

impl OracleScheme {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sync => "sync",
            Self::SyncUniform { .. } => "sync_uniform",
            Self::Async => "async",
            Self::Hybrid { .. } => "hybrid",
            Self::HybridEvo { .. } => "hybrid_evo",
        }
    }

    fn validate(&self, clients: usize) -> Result<()> {
        if clients == 0 {
            return Err(invalid("oracle needs at least one client"));
        }
        match self {
            Self::SyncUniform { m } if *m == 0 || *m > clients => Err(invalid(format!(
                "uniform sampling needs 1 <= m <= M, got m = {m}, M = {clients}"
            ))),
            Self::Hybrid { window } if !(*window > 0.0 && window.is_finite()) => {
                Err(invalid("hybrid window must be > 0"))
            }
            Self::HybridEvo { times } => {
                if times.first() != Some(&0.0) {
                    return Err(invalid("hybrid_evo times must start at T^0 = 0"));
                }
                if times
                    .windows(2)
                    .any(|w| !(w[1] > w[0]) || !w[1].is_finite())
                {
                    return Err(invalid("hybrid_evo times must be strictly increasing"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// `q_{n,k}` for k = 0..=n.
pub fn staleness_law(scheme: &OracleScheme, clients: usize, n: usize) -> Result<Vec<f64>> {
    scheme.validate(clients)?;
    let mut q = vec![0.0; n + 1];
    match scheme {
        OracleScheme::Sync | OracleScheme::SyncUniform { .. } => q[n] = 1.0,
        OracleScheme::Async => {
            let stay = (clients as f64 - 1.0) / clients as f64;
            q[0] = stay.powi(n as i32);
            for (k, slot) in q.iter_mut().enumerate().skip(1) {
                *slot = stay.powi((n - k) as i32) / clients as f64;
            }
        }
        OracleScheme::Hybrid { window } => {
            let times: Vec<f64> = (0..=n + 1).map(|k| k as f64 * window).collect();
            fill_exponential_law(&times, n, &mut q);
        }
        OracleScheme::HybridEvo { times } => {
            if times.len() < n + 2 {
                return Err(invalid(format!(
                    "hybrid_evo needs T^0..T^{}, got {} times",
                    n + 1,
                    times.len()
                )));
            }
            fill_exponential_law(times, n, &mut q);
        }
    }
    Ok(q)
}

/// `q_{n,k} = e^{−(T^{n+1}−T^{k+1})} − e^{−(T^{n+1}−T^k)}` and
/// `q_{n,0} = e^{−(T^{n+1}−T^1)}`: the client last delivered in (T^k, T^{k+1}].
fn fill_exponential_law(times: &[f64], n: usize, q: &mut [f64]) {
    let end = times[n + 1];
    q[0] = (-(end - times[1])).exp();
    for k in 1..=n {
        let recent = (-(end - times[k + 1])).exp();
        let older = (times[k] - times[k + 1]).exp_m1();
        // e^{−a} − e^{−b} = −e^{−a}·expm1(a − b)
        q[k] = -recent * older;
    }
}

/// The async law in exact rational arithmetic.
pub fn async_law_exact(clients: usize, n: usize) -> Result<Vec<BigRational>> {
    if clients == 0 {
        return Err(invalid("oracle needs at least one client"));
    }
    let m = BigRational::from_integer(clients.into());
    let one = BigRational::from_integer(1.into());
    let stay = (&m - &one) / &m;
    let share = &one / &m;
    let mut powers = vec![one.clone()];
    for _ in 0..n {
        let next = powers.last().expect("non-empty") * &stay;
        powers.push(next);
    }
    Ok((0..=n)
        .map(|k| {
            if k == 0 {
                powers[n].clone()
            } else {
                &powers[n - k] * &share
            }
        })
        .collect())
}

/// E[θ^n] = A^n θ^0 + B^n.
#[derive(Debug, Clone, PartialEq)]
pub struct Expectation {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Expectation {
    pub fn mean(&self, initial: f64) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| a * initial + b)
            .collect()
    }
}

/// Second-moment trace with the cross-round table
/// `U_{u,v} = E[(θ* − θ^u)(θ* − θ^v)]`, stored lower-triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    /// V_n = E(θ^n − θ*)²
    pub values: Vec<f64>,
    table: Vec<Vec<f64>>,
}

impl SecondMoment {
    pub fn u(&self, a: usize, b: usize) -> f64 {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        self.table[hi][lo]
    }
}

/// Per-scheme (γ, R, d): γ = d²(P − R²) where P is the participation
/// probability and R² the joint probability for two distinct clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeParams {
    pub gamma: f64,
    pub r: f64,
    pub d: f64,
}

pub fn scheme_params(scheme: &OracleScheme, clients: usize) -> Result<SchemeParams> {
    scheme.validate(clients)?;
    let mt = clients as f64;
    Ok(match scheme {
        OracleScheme::Sync => SchemeParams {
            gamma: 0.0,
            r: 1.0,
            d: 1.0 / mt,
        },
        OracleScheme::SyncUniform { m } => {
            let mf = *m as f64;
            let r2 = if clients == 1 {
                0.0
            } else {
                mf * (mf - 1.0) / (mt * (mt - 1.0))
            };
            let d = 1.0 / mf;
            SchemeParams {
                gamma: (mf / mt - r2) * d * d,
                r: r2.sqrt(),
                d,
            }
        }
        OracleScheme::Async => SchemeParams {
            gamma: 1.0 / mt,
            r: 0.0,
            d: 1.0,
        },
        OracleScheme::Hybrid { window } => {
            let r = -(-window).exp_m1();
            SchemeParams {
                gamma: (-window).exp() / (r * mt * mt),
                r,
                d: 1.0 / (r * mt),
            }
        }
        OracleScheme::HybridEvo { .. } => return Err(FedError::Unsupported(
            "hybrid_evo participation changes every round; only the mean recursion is available"
                .into(),
        )),
    })
}

/// Largest N accepted by the recursions (the U table is O(N²)).
pub const MAX_ORACLE_ROUNDS: usize = 20_000;

/// Scalar quadratic oracle for one scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    scheme: OracleScheme,
    clients: usize,
    /// η_g φ
    step: f64,
}

impl Oracle {
    pub fn new(scheme: OracleScheme, clients: usize, phi: f64, server_lr: f64) -> Result<Self> {
        scheme.validate(clients)?;
        if !(phi.is_finite() && server_lr.is_finite() && server_lr >= 0.0) {
            return Err(invalid("φ and η_g must be finite, η_g >= 0"));
        }
        Ok(Self {
            scheme,
            clients,
            step: server_lr * phi,
        })
    }

    pub fn scheme(&self) -> &OracleScheme {
        &self.scheme
    }

    pub fn law(&self, n: usize) -> Result<Vec<f64>> {
        staleness_law(&self.scheme, self.clients, n)
    }

    fn laws(&self, rounds: usize) -> Result<Vec<Vec<f64>>> {
        if rounds > MAX_ORACLE_ROUNDS {
            return Err(invalid(format!(
                "oracle horizon capped at {MAX_ORACLE_ROUNDS} rounds"
            )));
        }
        (0..rounds).map(|n| self.law(n)).collect()
    }

    /// A^0..=A^N and B^0..=B^N for optimum θ*.
    pub fn expectation(&self, rounds: usize, optimum: f64) -> Result<Expectation> {
        let laws = self.laws(rounds)?;
        let mut a = vec![1.0];
        let mut b = vec![0.0];
        for (n, q) in laws.iter().enumerate() {
            let pull_a: f64 = q.iter().zip(&a).map(|(q, x)| q * x).sum();
            let pull_b: f64 = q.iter().zip(&b).map(|(q, x)| q * x).sum();
            a.push(a[n] - self.step * pull_a);
            b.push(b[n] - self.step * pull_b + self.step * optimum);
        }
        Ok(Expectation { a, b })
    }

    /// V_0..=V_N given the client optima (equal importance) and θ^0.
    pub fn second_moment(
        &self,
        optima: &[f64],
        initial: f64,
        rounds: usize,
    ) -> Result<SecondMoment> {
        if optima.len() != self.clients {
            return Err(FedError::DimensionMismatch {
                expected: self.clients,
                actual: optima.len(),
                context: "client optima".into(),
            });
        }
        let params = scheme_params(&self.scheme, self.clients)?;
        let laws = self.laws(rounds)?;
        let mt = self.clients as f64;
        let optimum = optima.iter().sum::<f64>() / mt;
        let spread: f64 = optima.iter().map(|o| (o - optimum).powi(2)).sum();
        let f = self.step;
        let rd2m = params.r * params.r * params.d * params.d * mt;
        let own = params.gamma * mt + rd2m;
        let cross = rd2m * (mt - 1.0);

        let v0 = (initial - optimum).powi(2);
        let mut values = vec![v0];
        let mut table: Vec<Vec<f64>> = vec![vec![v0]];
        let get = |t: &Vec<Vec<f64>>, a: usize, b: usize| {
            if a >= b {
                t[a][b]
            } else {
                t[b][a]
            }
        };
        for (n, q) in laws.iter().enumerate() {
            let support: Vec<(usize, f64)> = q
                .iter()
                .copied()
                .enumerate()
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let mut row = Vec::with_capacity(n + 2);
            for u in 0..=n {
                let pull: f64 = support.iter().map(|&(s, w)| w * get(&table, u, s)).sum();
                row.push(get(&table, u, n) - f * pull);
            }
            let pull: f64 = support.iter().map(|&(s, w)| w * get(&table, n, s)).sum();
            let own_term: f64 = support.iter().map(|&(s, w)| w * values[s]).sum();
            let mut pair = 0.0;
            if cross != 0.0 {
                for &(s, ws) in &support {
                    for &(u, wu) in &support {
                        pair += ws * wu * get(&table, s, u);
                    }
                }
            }
            let next = values[n] - 2.0 * f * pull
                + params.gamma * f * f * spread
                + f * f * own * own_term
                + f * f * cross * pair;
            row.push(next);
            values.push(next);
            table.push(row);
        }
        Ok(SecondMoment { values, table })
    }
}

/// Round-duration regime under exponential hardware with common rate λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundTiming {
    Sync,
    Sampled { m: usize },
    Async,
}

/// E[Δt]: the maximum of M (or m) exponentials, or the minimum of M.
pub fn expected_round_time(timing: RoundTiming, clients: usize, rate: f64) -> Result<f64> {
    if clients == 0 || !(rate > 0.0 && rate.is_finite()) {
        return Err(invalid("round time needs M >= 1 and a rate > 0"));
    }
    let harmonic = |count: usize| (0..count).map(|k| 1.0 / ((count - k) as f64 * rate)).sum();
    match timing {
        RoundTiming::Sync => Ok(harmonic(clients)),
        RoundTiming::Sampled { m } if m == 0 || m > clients => {
            Err(invalid(format!("sampling needs 1 <= m <= M, got m = {m}")))
        }
        RoundTiming::Sampled { m } => Ok(harmonic(m)),
        RoundTiming::Async => Ok(1.0 / (clients as f64 * rate)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::One;

    #[test]
    fn phi_examples() {
        assert_eq!(phi(0.5, 1), 0.5);
        assert!((phi(0.1, 3) - 0.271).abs() < 1e-15);
        for lr in [1e-3, 1e-5, 1e-8] {
            for k in [1, 3, 10] {
                let first = lr * k as f64;
                assert!((phi(lr, k) - first).abs() <= first * first);
            }
        }
        assert_eq!(phi(1.5, 2), 1.0 - 0.25);
    }

    #[test]
    fn law_examples() {
        assert_eq!(
            staleness_law(&OracleScheme::Sync, 3, 4).unwrap(),
            vec![0.0, 0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(
            staleness_law(&OracleScheme::Async, 2, 2).unwrap(),
            vec![0.25, 0.25, 0.5]
        );
        let q = staleness_law(&OracleScheme::Hybrid { window: 2f64.ln() }, 2, 1).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn async_law_sums_to_one_exactly() {
        for m in [1, 2, 3, 7] {
            for n in [0, 1, 5, 50] {
                let total: BigRational = async_law_exact(m, n).unwrap().into_iter().sum();
                assert!(total.is_one(), "M = {m}, n = {n}");
            }
        }
    }

    #[test]
    fn evolving_law_matches_constant_window() {
        let window = 0.7;
        let times: Vec<f64> = (0..12).map(|k| k as f64 * window).collect();
        for n in [0, 3, 10] {
            let fixed = staleness_law(&OracleScheme::Hybrid { window }, 3, n).unwrap();
            let evo = staleness_law(
                &OracleScheme::HybridEvo {
                    times: times.clone(),
                },
                3,
                n,
            )
            .unwrap();
            for (a, b) in fixed.iter().zip(&evo) {
                assert!((a - b).abs() < 1e-15);
            }
            assert!((evo.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        let short = OracleScheme::HybridEvo {
            times: vec![0.0, 1.0],
        };
        assert!(staleness_law(&short, 2, 1).is_err());
    }

    #[test]
    fn sync_expectation_closed_form() {
        let f = 0.3;
        let oracle = Oracle::new(OracleScheme::Sync, 4, f, 1.0).unwrap();
        let e = oracle.expectation(30, 2.0).unwrap();
        for n in 0..=30 {
            let a = (1.0 - f).powi(n as i32);
            assert!((e.a[n] - a).abs() < 1e-14);
            assert!((e.b[n] - (1.0 - a) * 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_phi_is_frozen() {
        let oracle = Oracle::new(OracleScheme::Async, 3, 0.0, 1.0).unwrap();
        let e = oracle.expectation(10, 5.0).unwrap();
        assert!(e.a.iter().all(|&a| a == 1.0));
        assert!(e.b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn sync_second_moment_contracts() {
        let f = 0.25;
        let oracle = Oracle::new(OracleScheme::Sync, 3, f, 1.0).unwrap();
        let sm = oracle.second_moment(&[0.0, 1.0, 5.0], 7.0, 40).unwrap();
        let v0 = (7.0f64 - 2.0).powi(2);
        for (n, v) in sm.values.iter().enumerate() {
            let expected = (1.0 - f).powi(2 * n as i32) * v0;
            assert!((v - expected).abs() <= 1e-12 * v0);
        }
    }

    #[test]
    fn full_uniform_reduces_to_sync() {
        let params = scheme_params(&OracleScheme::SyncUniform { m: 3 }, 3).unwrap();
        assert!(params.gamma.abs() < 1e-15);
        let a = Oracle::new(OracleScheme::SyncUniform { m: 3 }, 3, 0.4, 1.0).unwrap();
        let b = Oracle::new(OracleScheme::Sync, 3, 0.4, 1.0).unwrap();
        let va = a.second_moment(&[0.0, 1.0, 2.0], 3.0, 20).unwrap().values;
        let vb = b.second_moment(&[0.0, 1.0, 2.0], 3.0, 20).unwrap().values;
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_fixed_point_is_one_third() {
        let oracle = Oracle::new(OracleScheme::SyncUniform { m: 1 }, 2, 0.5, 1.0).unwrap();
        let sm = oracle.second_moment(&[0.0, 2.0], 1.0, 200).unwrap();
        assert!((sm.values[200] - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            Oracle::new(OracleScheme::SyncUniform { m: 3 }, 2, 0.5, 1.0),
            Err(FedError::InvalidConfig(_))
        ));
    }

    #[test]
    fn table_diagonal_matches_second_moment() {
        let oracle = Oracle::new(OracleScheme::Async, 3, 0.3, 1.0).unwrap();
        let sm = oracle.second_moment(&[0.0, 1.0, 4.0], 2.0, 60).unwrap();
        for n in 0..=60 {
            assert!((sm.u(n, n) - sm.values[n]).abs() < 1e-10);
            assert_eq!(sm.u(n, n / 2), sm.u(n / 2, n));
        }
    }

    #[test]
    fn hybrid_variance_refused_for_evolving_schedule() {
        let oracle = Oracle::new(
            OracleScheme::HybridEvo {
                times: vec![0.0, 1.0, 3.0],
            },
            2,
            0.5,
            1.0,
        )
        .unwrap();
        assert!(oracle.expectation(1, 1.0).is_ok());
        assert!(matches!(
            oracle.second_moment(&[0.0, 2.0], 1.0, 1),
            Err(FedError::Unsupported(_))
        ));
    }

    #[test]
    fn round_time_examples() {
        assert_eq!(expected_round_time(RoundTiming::Sync, 2, 1.0).unwrap(), 1.5);
        assert_eq!(
            expected_round_time(RoundTiming::Async, 4, 1.0).unwrap(),
            0.25
        );
        assert_eq!(
            expected_round_time(RoundTiming::Sampled { m: 2 }, 5, 1.0).unwrap(),
            expected_round_time(RoundTiming::Sync, 2, 1.0).unwrap()
        );
        assert!(expected_round_time(RoundTiming::Sampled { m: 6 }, 5, 1.0).is_err());
    }
}
