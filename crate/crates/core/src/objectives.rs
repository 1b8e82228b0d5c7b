//! Client loss functions, stochastic gradients and the K-step local SGD executor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, FedError, Result};

/// Separable quadratic `Σ_j a_j θ_j² + b_j θ_j + c`, optionally with additive
/// Gaussian noise on every stochastic gradient coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    a: Vec<f64>,
    b: Vec<f64>,
    c: f64,
    noise_std: f64,
}

impl QuadraticObjective {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(invalid("quadratic objective needs at least one coordinate"));
        }
        if a.len() != b.len() {
            return Err(FedError::DimensionMismatch {
                expected: a.len(),
                actual: b.len(),
                context: "quadratic linear coefficient".into(),
            });
        }
        if a.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(invalid("quadratic curvature must be finite and >= 0"));
        }
        Ok(Self {
            a,
            b,
            c,
            noise_std: 0.0,
        })
    }

    /// `½‖θ − θ*‖²`, i.e. unit curvature so that `∇L(θ) = θ − θ*`.
    pub fn centered(optimum: Vec<f64>) -> Self {
        Self::scaled(0.5, optimum)
    }

    /// `a‖θ − θ*‖² + const` with the constant chosen so the minimum value is 0.
    pub fn scaled(curvature: f64, optimum: Vec<f64>) -> Self {
        let a = vec![curvature; optimum.len()];
        let b: Vec<f64> = optimum.iter().map(|&o| -2.0 * curvature * o).collect();
        let c = optimum.iter().map(|&o| curvature * o * o).sum();
        Self {
            a,
            b,
            c,
            noise_std: 0.0,
        }
    }

    pub fn with_noise(mut self, std: f64) -> Self {
        self.noise_std = std;
        self
    }

    pub fn curvature(&self) -> &[f64] {
        &self.a
    }

    pub fn linear(&self) -> &[f64] {
        &self.b
    }

    pub fn constant(&self) -> f64 {
        self.c
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// `θ* = −b / (2a)`; `None` when some coordinate has zero curvature.
    pub fn optimum(&self) -> Option<Vec<f64>> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(&a, &b)| (a > 0.0).then(|| -b / (2.0 * a)))
            .collect()
    }

    fn loss(&self, params: &[f64]) -> f64 {
        self.a
            .iter()
            .zip(&self.b)
            .zip(params)
            .map(|((&a, &b), &x)| a * x * x + b * x)
            .sum::<f64>()
            + self.c
    }

    fn gradient(&self, params: &[f64], out: &mut [f64]) {
        for (((g, &a), &b), &x) in out.iter_mut().zip(&self.a).zip(&self.b).zip(params) {
            *g = 2.0 * a * x + b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Linear,
    Logistic,
}

/// Generalized linear model on a local data shard (rows of `features` are samples).
#[derive(Debug, Clone, PartialEq)]
pub struct GlmObjective {
    features: Vec<f64>,
    targets: Vec<f64>,
    dim: usize,
    link: Link,
    batch: usize,
    l2: f64,
}

impl GlmObjective {
    pub fn new(
        features: Vec<f64>,
        targets: Vec<f64>,
        dim: usize,
        link: Link,
        batch: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("glm dimension must be >= 1"));
        }
        if features.len() != targets.len() * dim {
            return Err(FedError::DimensionMismatch {
                expected: targets.len() * dim,
                actual: features.len(),
                context: "glm design matrix".into(),
            });
        }
        let n = targets.len();
        if batch == 0 || batch > n {
            return Err(invalid(format!(
                "batch size {batch} must satisfy 1 <= B <= n_i = {n}"
            )));
        }
        Ok(Self {
            features,
            targets,
            dim,
            link,
            batch,
            l2: 0.0,
        })
    }

    /// Adds `(λ/2)‖θ‖²` to the loss.
    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn samples(&self) -> usize {
        self.targets.len()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    fn sample_loss(&self, i: usize, params: &[f64]) -> f64 {
        let z = dot(self.row(i), params);
        let y = self.targets[i];
        match self.link {
            Link::Linear => 0.5 * (z - y) * (z - y),
            Link::Logistic => softplus(z) - y * z,
        }
    }

    fn residual(&self, i: usize, params: &[f64]) -> f64 {
        let z = dot(self.row(i), params);
        match self.link {
            Link::Linear => z - self.targets[i],
            Link::Logistic => sigmoid(z) - self.targets[i],
        }
    }

    fn loss(&self, params: &[f64]) -> f64 {
        let n = self.samples();
        let data: f64 = (0..n).map(|i| self.sample_loss(i, params)).sum::<f64>() / n as f64;
        data + 0.5 * self.l2 * dot(params, params)
    }

    /// Mean gradient over the given sample indices (plus the ridge term).
    pub fn batch_gradient(&self, params: &[f64], batch: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        for &i in batch {
            let r = self.residual(i, params);
            for (g, &x) in out.iter_mut().zip(self.row(i)) {
                *g += r * x;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for (g, &p) in out.iter_mut().zip(params) {
            *g = *g * scale + self.l2 * p;
        }
    }

    fn gradient(&self, params: &[f64], out: &mut [f64]) {
        let all: Vec<usize> = (0..self.samples()).collect();
        self.batch_gradient(params, &all, out);
    }

    /// Upper bound on the Lipschitz constant of the gradient.
    fn smoothness(&self) -> f64 {
        let n = self.samples() as f64;
        // power iteration on XᵀX/n, with a safety margin
        let mut v = vec![1.0 / (self.dim as f64).sqrt(); self.dim];
        let mut lambda = 0.0;
        for _ in 0..100 {
            let mut w = vec![0.0; self.dim];
            for i in 0..self.samples() {
                let z = dot(self.row(i), &v);
                for (wj, &x) in w.iter_mut().zip(self.row(i)) {
                    *wj += z * x / n;
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm == 0.0 {
                break;
            }
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        let curvature = match self.link {
            Link::Linear => 1.0,
            Link::Logistic => 0.25,
        };
        1.05 * curvature * lambda + self.l2
    }
}

/// A client's local objective.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientObjective {
    Quadratic(QuadraticObjective),
    Glm(GlmObjective),
}

impl From<QuadraticObjective> for ClientObjective {
    fn from(q: QuadraticObjective) -> Self {
        Self::Quadratic(q)
    }
}

impl From<GlmObjective> for ClientObjective {
    fn from(g: GlmObjective) -> Self {
        Self::Glm(g)
    }
}

impl ClientObjective {
    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.a.len(),
            Self::Glm(g) => g.dim,
        }
    }

    pub fn loss(&self, params: &[f64]) -> f64 {
        match self {
            Self::Quadratic(q) => q.loss(params),
            Self::Glm(g) => g.loss(params),
        }
    }

    /// Full (deterministic) gradient.
    pub fn gradient(&self, params: &[f64], out: &mut [f64]) {
        match self {
            Self::Quadratic(q) => q.gradient(params, out),
            Self::Glm(g) => g.gradient(params, out),
        }
    }

    /// Whether `stochastic_gradient` can differ from `gradient`.
    pub fn is_stochastic(&self) -> bool {
        match self {
            Self::Quadratic(q) => q.noise_std > 0.0,
            Self::Glm(g) => g.batch < g.samples(),
        }
    }

    /// One unbiased stochastic gradient draw.
    pub fn stochastic_gradient(&self, params: &[f64], stream: &mut SampleStream, out: &mut [f64]) {
        match self {
            Self::Quadratic(q) => {
                q.gradient(params, out);
                if q.noise_std > 0.0 {
                    for g in out.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut stream.rng);
                        *g += q.noise_std * z;
                    }
                }
            }
            Self::Glm(g) => {
                if g.batch >= g.samples() {
                    g.gradient(params, out);
                } else {
                    let batch = stream.next_batch(g.samples(), g.batch);
                    g.batch_gradient(params, &batch, out);
                }
            }
        }
    }

    /// Gradient Lipschitz constant (exact for quadratics, an upper bound for GLMs).
    pub fn smoothness(&self) -> f64 {
        match self {
            Self::Quadratic(q) => q.a.iter().fold(0.0_f64, |m, &a| m.max(2.0 * a)),
            Self::Glm(g) => g.smoothness(),
        }
    }

    /// Minimizer of this objective alone.
    pub fn optimum(&self) -> Result<Vec<f64>> {
        let m = minimize(&[(self, 1.0)], None)?;
        Ok(m.params)
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticObjective> {
        match self {
            Self::Quadratic(q) => Some(q),
            Self::Glm(_) => None,
        }
    }
}

/// Per-client source of randomness: batch order (without replacement inside an
/// epoch, reshuffled between epochs) and gradient noise.
#[derive(Debug, Clone)]
pub struct SampleStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl SampleStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            rng,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        if self.order.len() != n || self.cursor + batch > n {
            if self.order.len() != n {
                self.order = (0..n).collect();
            }
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        out
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSgd {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub end: Vec<f64>,
    /// `end − start`
    pub delta: Vec<f64>,
    /// `θ^{(k)} − start` for k = 0..=K when requested.
    pub path: Option<Vec<Vec<f64>>>,
}

/// Runs `cfg.steps` SGD steps from `start`.
pub fn local_sgd(
    start: &[f64],
    objective: &ClientObjective,
    cfg: &LocalSgd,
    stream: &mut SampleStream,
    record_path: bool,
) -> Result<LocalUpdate> {
    if cfg.steps == 0 {
        return Err(invalid("local work needs K >= 1"));
    }
    if !(cfg.lr >= 0.0) {
        return Err(invalid("local learning rate must be >= 0"));
    }
    if start.len() != objective.dim() {
        return Err(FedError::DimensionMismatch {
            expected: objective.dim(),
            actual: start.len(),
            context: "local SGD start point".into(),
        });
    }
    let mut x = start.to_vec();
    let mut grad = vec![0.0; x.len()];
    let mut path = record_path.then(|| vec![vec![0.0; x.len()]]);
    for step in 0..cfg.steps {
        objective.stochastic_gradient(&x, stream, &mut grad);
        for (xi, &g) in x.iter_mut().zip(&grad) {
            *xi -= cfg.lr * g;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FedError::NumericOverflow { step });
        }
        if let Some(p) = path.as_mut() {
            p.push(x.iter().zip(start).map(|(a, b)| a - b).collect());
        }
    }
    let delta = x.iter().zip(start).map(|(a, b)| a - b).collect();
    Ok(LocalUpdate {
        end: x,
        delta,
        path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub params: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
}

pub const MINIMIZE_TOL: f64 = 1e-10;
const MINIMIZE_MAX_ITER: usize = 2_000_000;

/// Minimizes `Σ w_i L_i`. Separable quadratics use the closed form; anything
/// else runs full-gradient descent with step `1/L` until `‖∇‖ < 1e-10`.
pub fn minimize(terms: &[(&ClientObjective, f64)], start: Option<&[f64]>) -> Result<Minimum> {
    let Some((first, _)) = terms.first() else {
        return Err(invalid("nothing to minimize"));
    };
    let dim = first.dim();
    if terms.iter().any(|(o, _)| o.dim() != dim) {
        return Err(invalid("objectives disagree on dimension"));
    }
    if terms.iter().any(|&(_, w)| !(w >= 0.0)) {
        return Err(FedError::InvalidWeights("negative objective weight".into()));
    }

    let quads: Option<Vec<(&QuadraticObjective, f64)>> = terms
        .iter()
        .map(|&(o, w)| o.as_quadratic().map(|q| (q, w)))
        .collect();
    if let Some(quads) = quads {
        let mut params = vec![0.0; dim];
        let mut closed = true;
        for (j, p) in params.iter_mut().enumerate() {
            let a: f64 = quads.iter().map(|(q, w)| w * q.a[j]).sum();
            let b: f64 = quads.iter().map(|(q, w)| w * q.b[j]).sum();
            if a > 0.0 {
                *p = -b / (2.0 * a);
            } else {
                closed = false;
            }
        }
        if closed {
            return Ok(Minimum {
                params,
                grad_norm: 0.0,
                iterations: 0,
            });
        }
    }

    let smooth: f64 = terms.iter().map(|&(o, w)| w * o.smoothness()).sum();
    if !(smooth > 0.0) {
        return Err(invalid("objective has zero curvature; no unique minimizer"));
    }
    let step = 1.0 / smooth;
    let mut x = start.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; dim]);
    let mut grad = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for it in 0..MINIMIZE_MAX_ITER {
        grad.fill(0.0);
        for &(o, w) in terms {
            o.gradient(&x, &mut tmp);
            for (g, t) in grad.iter_mut().zip(&tmp) {
                *g += w * t;
            }
        }
        let norm = dot(&grad, &grad).sqrt();
        if norm < MINIMIZE_TOL {
            return Ok(Minimum {
                params: x,
                grad_norm: norm,
                iterations: it,
            });
        }
        for (xi, g) in x.iter_mut().zip(&grad) {
            *xi -= step * g;
        }
    }
    Err(FedError::Unavailable(format!(
        "gradient descent did not reach ‖∇‖ < {MINIMIZE_TOL} in {MINIMIZE_MAX_ITER} iterations"
    )))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(opt: f64) -> ClientObjective {
        QuadraticObjective::centered(vec![opt]).into()
    }

    #[test]
    fn one_step_closed_form() {
        let obj = scalar(2.0);
        let mut s = SampleStream::new(0, 0);
        let cfg = LocalSgd { steps: 1, lr: 0.5 };
        let up = local_sgd(&[0.0], &obj, &cfg, &mut s, false).unwrap();
        assert_eq!(up.end, vec![1.0]);
        assert_eq!(up.delta, vec![1.0]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let obj = scalar(2.0);
        let mut s = SampleStream::new(0, 0);
        let cfg = LocalSgd { steps: 7, lr: 0.0 };
        let up = local_sgd(&[0.3], &obj, &cfg, &mut s, false).unwrap();
        assert_eq!(up.end, vec![0.3]);
        assert_eq!(up.delta, vec![0.0]);
    }

    #[test]
    fn three_steps_match_iterated_map() {
        let (lr, opt, start) = (0.1, 2.0, -1.0);
        let mut x = start;
        for _ in 0..3 {
            x = x - lr * (x - opt);
        }
        let obj = scalar(opt);
        let mut s = SampleStream::new(0, 0);
        let up = local_sgd(&[start], &obj, &LocalSgd { steps: 3, lr }, &mut s, false).unwrap();
        assert!((up.end[0] - x).abs() < 1e-15);
        let phi = 1.0 - 0.9_f64.powi(3);
        assert!((phi - 0.271).abs() < 1e-15);
        assert!((up.delta[0] - phi * (opt - start)).abs() < 1e-12);
    }

    #[test]
    fn general_curvature_step_map() {
        let q = QuadraticObjective::new(vec![1.5], vec![-0.7], 0.0).unwrap();
        let obj: ClientObjective = q.into();
        let mut s = SampleStream::new(0, 0);
        let lr = 0.1;
        let up = local_sgd(&[2.0], &obj, &LocalSgd { steps: 1, lr }, &mut s, false).unwrap();
        let expected = (1.0 - 2.0 * lr * 1.5) * 2.0 - lr * (-0.7);
        assert!((up.end[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn divergence_reports_step() {
        let obj = scalar(0.0);
        let mut s = SampleStream::new(0, 0);
        let err = local_sgd(
            &[1.0],
            &obj,
            &LocalSgd {
                steps: 5000,
                lr: 1e100,
            },
            &mut s,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, FedError::NumericOverflow { .. }));
    }

    #[test]
    fn logistic_gradient_at_origin() {
        let x = vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let y = vec![1.0, 0.0, 1.0];
        let g = GlmObjective::new(x.clone(), y.clone(), 2, Link::Logistic, 3).unwrap();
        let mut out = vec![0.0; 2];
        g.batch_gradient(&[0.0, 0.0], &[0, 1, 2], &mut out);
        let mut expected = [0.0; 2];
        for i in 0..3 {
            for j in 0..2 {
                expected[j] += x[i * 2 + j] * (0.5 - y[i]) / 3.0;
            }
        }
        assert!((out[0] - expected[0]).abs() < 1e-15);
        assert!((out[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn batch_larger_than_shard_rejected() {
        assert!(GlmObjective::new(vec![1.0; 4], vec![0.0; 4], 1, Link::Linear, 5).is_err());
        assert!(GlmObjective::new(vec![1.0; 4], vec![0.0; 4], 1, Link::Linear, 0).is_err());
    }

    #[test]
    fn epochs_cover_every_sample_once() {
        let mut s = SampleStream::new(3, 1);
        let mut seen: Vec<usize> = (0..4).flat_map(|_| s.next_batch(8, 2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn quadratic_optimum_and_minimize_agree() {
        let a = scalar(0.0);
        let b = scalar(2.0);
        let m = minimize(&[(&a, 0.5), (&b, 0.5)], None).unwrap();
        assert_eq!(m.params, vec![1.0]);
    }

    #[test]
    fn gradient_descent_reaches_tolerance() {
        let x = vec![1.0, 0.3, 1.0, -1.2, 1.0, 0.8, 1.0, 2.0];
        let y = vec![1.0, 0.0, 1.0, 0.0];
        let g: ClientObjective = GlmObjective::new(x, y, 2, Link::Logistic, 2)
            .unwrap()
            .with_l2(0.1)
            .into();
        let m = minimize(&[(&g, 1.0)], None).unwrap();
        let mut grad = vec![0.0; 2];
        g.gradient(&m.params, &mut grad);
        assert!(dot(&grad, &grad).sqrt() < 1e-10);
    }
}
