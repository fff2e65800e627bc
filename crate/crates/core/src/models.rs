//! Benchmark systems, a seeded simulator and characteristic-function metrics.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::MeasurementMoments;
use crate::error::{Error, Result};
use crate::filter::MeasurementModel;
use crate::momentspace::MomentSet;
use crate::quadrature::QuadratureRule;
use crate::transition::{gaussian_moments, GaussianTransition, Scalar, Sde};

/// Floor applied to Poisson rates.
pub const RATE_FLOOR: f64 = 1e-12;

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ln_factorial(y: f64) -> f64 {
    (2..=y as u64).map(|k| (k as f64).ln()).sum()
}

fn poisson_log_density(y: f64, rate: f64) -> f64 {
    if !(y >= 0.0) || y.fract() != 0.0 {
        return f64::NEG_INFINITY;
    }
    let rate = rate.max(RATE_FLOOR);
    y * rate.ln() - rate - ln_factorial(y)
}

/// Generator with an independent stream per `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Finite mixture of Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> Self {
        GaussianMixture {
            weights: vec![1.0],
            means: vec![mean],
            covariances: vec![cov],
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| self.weights.iter().zip(&self.means).map(|(w, m)| w * m[i]).sum())
            .collect()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mu = self.mean();
        let mut c = DMatrix::zeros(d, d);
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            for i in 0..d {
                for j in 0..d {
                    c[(i, j)] += w * (s[(i, j)] + (m[i] - mu[i]) * (m[j] - mu[j]));
                }
            }
        }
        c
    }

    /// Moments of order `N`, standardized at the mixture mean and standard deviations.
    pub fn moments(&self, order: usize) -> Result<MomentSet> {
        let d = self.dim();
        let center = self.mean();
        let cov = self.covariance();
        let scale: Vec<f64> = (0..d).map(|i| cov[(i, i)].sqrt()).collect();
        let mut values: Option<Vec<f64>> = None;
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let mu: Vec<f64> = (0..d).map(|i| (m[i] - center[i]) / scale[i]).collect();
            let sig = DMatrix::from_fn(d, d, |i, j| s[(i, j)] / (scale[i] * scale[j]));
            let comp = gaussian_moments(&mu, &sig, 2 * order - 1)?;
            match values.as_mut() {
                None => values = Some(comp.iter().map(|v| w * v).collect()),
                Some(acc) => acc.iter_mut().zip(&comp).for_each(|(a, c)| *a += w * c),
            }
        }
        MomentSet::with_frame(d, order, values.expect("non-empty mixture"), center, scale)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let l = self.covariances[k]
            .clone()
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::zeros(self.dim(), self.dim()));
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        (0..self.dim())
            .map(|i| self.means[k][i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
            .collect()
    }

    /// Density of a one-dimensional mixture.
    pub fn pdf_1d(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((w, m), s)| {
                let v = s[(0, 0)];
                w * (-(x - m[0]).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            })
            .sum()
    }
}

fn benes_initial() -> GaussianMixture {
    GaussianMixture {
        weights: vec![0.5, 0.5],
        means: vec![vec![-0.5], vec![0.5]],
        covariances: vec![DMatrix::from_element(1, 1, 0.05), DMatrix::from_element(1, 1, 0.05)],
    }
}

/// The four benchmark systems with their parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum BenchmarkModel {
    /// `dX = -X/ℓ dt + sqrt(2σ²/ℓ) dW`, `Y = X + N(0, 1)`.
    Ou { ell: f64, sigma: f64 },
    /// `dX = tanh(X) dt + dW`, `Y ~ Bernoulli(logistic(X³/5))`.
    BenesBernoulli,
    /// `dX = X(1 - θ₁X²) dt + dW`, `Y ~ Poisson(softplus(θ₂X))`.
    WellPoisson { theta1: f64, theta2: f64 },
    /// Stochastic Lotka–Volterra with a Poisson count of the prey.
    PreyPredator {
        alpha: f64,
        beta: f64,
        zeta: f64,
        gamma: f64,
        sigma: f64,
    },
}

pub fn make_ou() -> BenchmarkModel {
    BenchmarkModel::Ou { ell: 1.0, sigma: 0.5 }
}

pub fn make_benes_bernoulli() -> BenchmarkModel {
    BenchmarkModel::BenesBernoulli
}

pub fn make_well_poisson() -> BenchmarkModel {
    BenchmarkModel::WellPoisson {
        theta1: 3.0,
        theta2: 3.0,
    }
}

pub fn make_prey_predator() -> BenchmarkModel {
    BenchmarkModel::PreyPredator {
        alpha: 4.0,
        beta: 4.0,
        zeta: 4.0,
        gamma: 4.0,
        sigma: 0.1,
    }
}

impl BenchmarkModel {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ou" => Ok(make_ou()),
            "benes_bernoulli" => Ok(make_benes_bernoulli()),
            "well_poisson" => Ok(make_well_poisson()),
            "prey_predator" => Ok(make_prey_predator()),
            other => Err(Error::InvalidArgument(format!("unknown model '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkModel::Ou { .. } => "ou",
            BenchmarkModel::BenesBernoulli => "benes_bernoulli",
            BenchmarkModel::WellPoisson { .. } => "well_poisson",
            BenchmarkModel::PreyPredator { .. } => "prey_predator",
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            BenchmarkModel::Ou { .. } => &["ell", "sigma"],
            BenchmarkModel::BenesBernoulli => &[],
            BenchmarkModel::WellPoisson { .. } => &["theta1", "theta2"],
            BenchmarkModel::PreyPredator { .. } => &["alpha", "beta", "zeta", "gamma", "sigma"],
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            BenchmarkModel::Ou { ell, sigma } => vec![ell, sigma],
            BenchmarkModel::BenesBernoulli => vec![],
            BenchmarkModel::WellPoisson { theta1, theta2 } => vec![theta1, theta2],
            BenchmarkModel::PreyPredator {
                alpha,
                beta,
                zeta,
                gamma,
                sigma,
            } => vec![alpha, beta, zeta, gamma, sigma],
        }
    }

    /// Same model with every parameter replaced, in [`Self::param_names`] order.
    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.param_names().len() {
            return Err(Error::DimensionMismatch {
                expected: self.param_names().len(),
                found: p.len(),
            });
        }
        if p.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(format!("parameters must be positive: {p:?}")));
        }
        Ok(match self {
            BenchmarkModel::Ou { .. } => BenchmarkModel::Ou { ell: p[0], sigma: p[1] },
            BenchmarkModel::BenesBernoulli => BenchmarkModel::BenesBernoulli,
            BenchmarkModel::WellPoisson { .. } => BenchmarkModel::WellPoisson {
                theta1: p[0],
                theta2: p[1],
            },
            BenchmarkModel::PreyPredator { .. } => BenchmarkModel::PreyPredator {
                alpha: p[0],
                beta: p[1],
                zeta: p[2],
                gamma: p[3],
                sigma: p[4],
            },
        })
    }

    /// Replaces one named parameter.
    pub fn with_param(&self, name: &str, value: f64) -> Result<Self> {
        let pos = self
            .param_names()
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("model {} has no parameter '{name}'", self.name())))?;
        let mut p = self.params();
        p[pos] = value;
        self.with_params(&p)
    }

    pub fn initial(&self) -> GaussianMixture {
        match *self {
            BenchmarkModel::Ou { sigma, .. } => {
                GaussianMixture::gaussian(vec![0.0], DMatrix::from_element(1, 1, sigma * sigma))
            }
            BenchmarkModel::BenesBernoulli | BenchmarkModel::WellPoisson { .. } => benes_initial(),
            BenchmarkModel::PreyPredator { .. } => {
                GaussianMixture::gaussian(vec![1.0, 1.0], DMatrix::identity(2, 2) * 1e-3)
            }
        }
    }

    /// Initial moments of order `N`, standardized at the initial mean.
    pub fn initial_moments(&self, order: usize) -> Result<MomentSet> {
        self.initial().moments(order)
    }

    /// Measurement interval used by the benchmark designs.
    pub fn default_dt(&self) -> f64 {
        match self {
            BenchmarkModel::Ou { .. } => 0.1,
            BenchmarkModel::BenesBernoulli | BenchmarkModel::WellPoisson { .. } => 0.01,
            BenchmarkModel::PreyPredator { .. } => 0.001,
        }
    }

    /// Conditional mean and variance of the scalar measurement.
    pub fn measurement_moments(&self, x: &[f64]) -> (f64, f64) {
        match *self {
            BenchmarkModel::Ou { .. } => (x[0], 1.0),
            BenchmarkModel::BenesBernoulli => {
                let p = logistic(x[0].powi(3) / 5.0);
                (p, p * (1.0 - p))
            }
            BenchmarkModel::WellPoisson { .. } | BenchmarkModel::PreyPredator { .. } => {
                let r = self.rate(x);
                (r, r)
            }
        }
    }

    fn rate(&self, x: &[f64]) -> f64 {
        match *self {
            BenchmarkModel::WellPoisson { theta2, .. } => softplus(theta2 * x[0]).max(RATE_FLOOR),
            BenchmarkModel::PreyPredator { .. } => logistic(x[0].powi(3) - 1.0).max(RATE_FLOOR),
            _ => f64::NAN,
        }
    }

    pub fn sample_measurement<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let y = match *self {
            BenchmarkModel::Ou { .. } => x[0] + rng.sample::<f64, _>(StandardNormal),
            BenchmarkModel::BenesBernoulli => {
                let p = logistic(x[0].powi(3) / 5.0);
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
            BenchmarkModel::WellPoisson { .. } | BenchmarkModel::PreyPredator { .. } => {
                let r = self.rate(x);
                Poisson::new(r)
                    .map_err(|e| Error::InvalidArgument(format!("Poisson rate {r}: {e}")))?
                    .sample(rng)
            }
        };
        Ok(vec![y])
    }

    /// Exact Gaussian one-step law, available for the linear model only.
    #[allow(clippy::type_complexity)]
    pub fn exact_transition(
        &self,
    ) -> Option<GaussianTransition<impl Fn(&[f64], f64) -> (Vec<f64>, DMatrix<f64>) + Sync>> {
        match *self {
            BenchmarkModel::Ou { ell, sigma } => Some(GaussianTransition::new(1, move |x: &[f64], dt: f64| {
                let (f, q) = ou_discretization(ell, sigma, dt);
                (vec![f * x[0]], DMatrix::from_element(1, 1, q))
            })),
            _ => None,
        }
    }
}

/// `F = e^{-dt/ℓ}` and `Q = σ²(1 - e^{-2dt/ℓ})`.
pub fn ou_discretization(ell: f64, sigma: f64, dt: f64) -> (f64, f64) {
    let f = (-dt / ell).exp();
    (f, sigma * sigma * -(-2.0 * dt / ell).exp_m1())
}

impl Sde for BenchmarkModel {
    fn dim(&self) -> usize {
        match self {
            BenchmarkModel::PreyPredator { .. } => 2,
            _ => 1,
        }
    }

    fn noise_dim(&self) -> usize {
        self.dim()
    }

    fn drift<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        match *self {
            BenchmarkModel::Ou { ell, .. } => vec![x[0].clone() * (-1.0 / ell)],
            BenchmarkModel::BenesBernoulli => vec![x[0].tanh()],
            BenchmarkModel::WellPoisson { theta1, .. } => {
                let x0 = x[0].clone();
                vec![x0.clone() - x0.clone() * x0.clone() * x0 * theta1]
            }
            BenchmarkModel::PreyPredator {
                alpha,
                beta,
                zeta,
                gamma,
                ..
            } => {
                let (x1, x2) = (x[0].clone(), x[1].clone());
                vec![x1.clone() * (x2.clone() * -beta + alpha), x2 * (x1 * zeta - gamma)]
            }
        }
    }

    fn dispersion<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        match *self {
            BenchmarkModel::Ou { ell, sigma } => vec![x[0].constant_like((2.0 * sigma * sigma / ell).sqrt())],
            BenchmarkModel::BenesBernoulli | BenchmarkModel::WellPoisson { .. } => vec![x[0].constant_like(1.0)],
            BenchmarkModel::PreyPredator { sigma, .. } => {
                let z = x[0].constant_like(0.0);
                vec![x[0].clone() * sigma, z.clone(), z, x[1].clone() * sigma]
            }
        }
    }
}

impl MeasurementModel for BenchmarkModel {
    fn obs_dim(&self) -> usize {
        1
    }

    fn log_density(&self, y: &[f64], x: &[f64]) -> f64 {
        match *self {
            BenchmarkModel::Ou { .. } => {
                let r = y[0] - x[0];
                -0.5 * r * r - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            BenchmarkModel::BenesBernoulli => {
                let u = x[0].powi(3) / 5.0;
                // log p = -softplus(-u), log(1 - p) = -softplus(u)
                -(y[0] * softplus(-u) + (1.0 - y[0]) * softplus(u))
            }
            BenchmarkModel::WellPoisson { .. } | BenchmarkModel::PreyPredator { .. } => {
                poisson_log_density(y[0], self.rate(x))
            }
        }
    }
}

impl MeasurementMoments for BenchmarkModel {
    fn conditional_mean_cov(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let (m, v) = self.measurement_moments(x);
        (vec![m], DMatrix::from_element(1, 1, v))
    }
}

/// Simulated states and measurements on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `times[0]` is the initial time; measurement `k` is taken at `times[k + 1]`.
    pub times: Vec<f64>,
    /// `states[k]` is the state at `times[k]`.
    pub states: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
}

/// Uniform grid `t0, t0 + dt, …` with `steps + 1` points.
pub fn uniform_times(t0: f64, dt: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| t0 + dt * k as f64).collect()
}

/// Euler–Maruyama simulation with `substeps` steps per measurement interval.
pub fn simulate(model: &BenchmarkModel, times: &[f64], seed: u64, substeps: usize) -> Result<Dataset> {
    simulate_with_rng(model, times, substeps, &mut rng_for(seed, 0))
}

pub fn simulate_with_rng<R: Rng + ?Sized>(
    model: &BenchmarkModel,
    times: &[f64],
    substeps: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(
            "times must be non-empty and strictly increasing".into(),
        ));
    }
    let d = model.dim();
    let w = model.noise_dim();
    let mut x = model.initial().sample(rng);
    let mut states = vec![x.clone()];
    let mut ys = Vec::with_capacity(times.len() - 1);
    for (k, pair) in times.windows(2).enumerate() {
        let h = (pair[1] - pair[0]) / substeps as f64;
        let sq = h.sqrt();
        for _ in 0..substeps {
            let a = model.drift(&x);
            let b = model.dispersion(&x);
            let dw: Vec<f64> = (0..w).map(|_| sq * rng.sample::<f64, _>(StandardNormal)).collect();
            for i in 0..d {
                x[i] += a[i] * h + (0..w).map(|j| b[i * w + j] * dw[j]).sum::<f64>();
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("simulated state at step {}", k + 1)));
        }
        ys.push(model.sample_measurement(&x, rng)?);
        states.push(x.clone());
    }
    Ok(Dataset {
        times: times.to_vec(),
        states,
        ys,
    })
}

/// Truncated series `Σ_{n <= 2N-1} (iz)^n E[X^n] / n!` for a one-dimensional
/// moment set, summed in its standardized frame.
pub fn char_fn_from_moments(m: &MomentSet, z: f64) -> Complex64 {
    let (c, s) = (m.center()[0], m.scale()[0]);
    let zs = z * s;
    let mut term = Complex64::new(1.0, 0.0);
    let mut acc = Complex64::new(0.0, 0.0);
    for (n, v) in m.values().iter().enumerate() {
        if n > 0 {
            term *= Complex64::new(0.0, zs) / n as f64;
        }
        acc += term * v;
    }
    acc * Complex64::from_polar(1.0, z * c)
}

/// `Σ w e^{izλ}` of a one-dimensional quadrature rule.
pub fn char_fn_from_rule(rule: &QuadratureRule, z: f64) -> Complex64 {
    rule.nodes()
        .zip(rule.weights())
        .map(|(x, w)| Complex64::from_polar(*w, z * x[0]))
        .sum()
}

/// Empirical characteristic function of equally weighted samples.
pub fn char_fn_from_samples(xs: &[f64], z: f64) -> Complex64 {
    let s: Complex64 = xs.iter().map(|x| Complex64::from_polar(1.0, z * x)).sum();
    s / xs.len() as f64
}

/// Trapezoidal Fourier sum of a density on a uniform grid.
pub fn char_fn_from_grid(grid: &[f64], density: &[f64], z: f64) -> Complex64 {
    let n = grid.len();
    let h = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, (x, p)) in grid.iter().zip(density).enumerate() {
        let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        acc += Complex64::from_polar(wt * p, z * x);
    }
    acc * h
}

pub fn char_fn_gaussian(mean: f64, var: f64, z: f64) -> Complex64 {
    Complex64::from_polar((-0.5 * var * z * z).exp(), z * mean)
}

/// `points` equispaced values on `[-gamma, gamma]`.
pub fn z_grid(gamma: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| -gamma + 2.0 * gamma * i as f64 / (points - 1) as f64)
        .collect()
}

/// `max_z |φ(z) - φ̂(z)|` over the metric grid.
pub fn sup_error(zs: &[f64], phi: impl Fn(f64) -> Complex64, approx: impl Fn(f64) -> Complex64) -> f64 {
    zs.iter().map(|&z| (phi(z) - approx(z)).norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{cholesky_pd, moment_quadrature};
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_parameters() {
        assert_eq!(make_ou().params(), vec![1.0, 0.5]);
        assert_eq!(make_well_poisson().params(), vec![3.0, 3.0]);
        assert_eq!(make_prey_predator().params(), vec![4.0, 4.0, 4.0, 4.0, 0.1]);
        for name in ["ou", "benes_bernoulli", "well_poisson", "prey_predator"] {
            assert_eq!(BenchmarkModel::from_name(name).unwrap().name(), name);
        }
        assert!(BenchmarkModel::from_name("lorenz").is_err());
    }

    #[test]
    fn drift_and_dispersion_examples() {
        let ou = make_ou();
        assert_eq!(ou.drift(&[0.0]), vec![0.0]);
        assert_abs_diff_eq!(ou.dispersion(&[3.0])[0], 0.5f64.sqrt(), epsilon = 1e-15);

        let benes = make_benes_bernoulli();
        assert_abs_diff_eq!(benes.drift(&[30.0])[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(benes.drift(&[-30.0])[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(benes.measurement_moments(&[0.0]).0, 0.5, epsilon = 1e-15);

        let well = make_well_poisson();
        for r in [0.0, 1.0 / 3f64.sqrt(), -1.0 / 3f64.sqrt()] {
            assert_abs_diff_eq!(well.drift(&[r])[0], 0.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(well.measurement_moments(&[0.0]).0, 2f64.ln(), epsilon = 1e-15);

        let pp = make_prey_predator();
        assert_eq!(pp.drift(&[1.0, 1.0]), vec![0.0, 0.0]);
        let b = pp.dispersion(&[1.0, 1.0]);
        assert_eq!(b, vec![0.1, 0.0, 0.0, 0.1]);
        for x in [-2.0, 0.0, 1.0, 1.5] {
            let r = pp.measurement_moments(&[x, 1.0]).0;
            assert!(r > 0.0 && r < 1.0);
        }
    }

    #[test]
    fn softplus_and_logistic() {
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-16);
        assert_abs_diff_eq!(softplus(800.0), 800.0, epsilon = 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
    }

    #[test]
    fn log_densities() {
        let b = make_benes_bernoulli();
        assert_abs_diff_eq!(b.log_density(&[1.0], &[0.0]), 0.5f64.ln(), epsilon = 1e-15);
        let x = 1.7;
        let p = logistic(x * x * x / 5.0);
        assert_abs_diff_eq!(b.log_density(&[0.0], &[x]), (1.0 - p).ln(), epsilon = 1e-14);
        assert!(b.log_density(&[1.0], &[-40.0]).is_finite());

        let w = make_well_poisson();
        let r = softplus(3.0 * 0.4);
        assert_abs_diff_eq!(
            w.log_density(&[3.0], &[0.4]),
            3.0 * r.ln() - r - 6f64.ln(),
            epsilon = 1e-13
        );
        // floored rate keeps the density finite far in the left tail
        assert!(w.log_density(&[0.0], &[-1e3]).is_finite());
        assert_eq!(w.log_density(&[1.5], &[0.0]), f64::NEG_INFINITY);

        let o = make_ou();
        assert_abs_diff_eq!(
            o.log_density(&[0.0], &[0.0]),
            -0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn initial_moments() {
        let m = make_benes_bernoulli().initial_moments(3).unwrap();
        assert_abs_diff_eq!(m.mean()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.variances()[0], 0.30, epsilon = 1e-14);

        let o = make_ou().initial_moments(2).unwrap();
        assert_abs_diff_eq!(o.variances()[0], 0.25, epsilon = 1e-15);

        let p = make_prey_predator().initial_moments(2).unwrap();
        assert_eq!(p.mean(), vec![1.0, 1.0]);
        let c = p.covariance();
        assert_abs_diff_eq!(c[(0, 0)], 1e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(c[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn initial_grams_are_positive_definite() {
        for model in [
            make_ou(),
            make_benes_bernoulli(),
            make_well_poisson(),
            make_prey_predator(),
        ] {
            for n in 1..=15 {
                let m = model.initial_moments(n).unwrap();
                let g = crate::momentspace::build_gram(&m);
                assert!(cholesky_pd(&g.0).is_ok(), "{} N={n}", model.name());
            }
        }
    }

    #[test]
    fn ou_discretization_values() {
        let (f, q) = ou_discretization(1.0, 0.5, 0.1);
        assert_abs_diff_eq!(f, 0.904837418, epsilon = 1e-9);
        assert_abs_diff_eq!(q, 0.0453173, epsilon = 1e-7);
        let (f, q) = ou_discretization(1.0, 0.5, 1e-12);
        assert_abs_diff_eq!(f, 1.0, epsilon = 1e-11);
        assert_abs_diff_eq!(q, 0.0, epsilon = 1e-11);
    }

    #[test]
    fn simulation_contracts() {
        let model = make_benes_bernoulli();
        let times = uniform_times(0.0, 0.01, 50);
        let a = simulate(&model, &times, 7, 10).unwrap();
        let b = simulate(&model, &times, 7, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ys.len(), 50);
        assert_eq!(a.states.len(), 51);
        assert!(a.ys.iter().all(|y| y[0] == 0.0 || y[0] == 1.0));
        let c = simulate(&model, &times, 8, 10).unwrap();
        assert_ne!(a, c);
        assert!(simulate(&model, &times, 7, 0).is_err());
    }

    #[test]
    fn deterministic_linear_trajectory() {
        // zero dispersion: x(t) = x0 e^{-t} up to the Euler error
        let model = BenchmarkModel::Ou {
            ell: 1.0,
            sigma: 1e-300,
        };
        let times = uniform_times(0.0, 0.1, 10);
        let data = simulate(&model, &times, 3, 100).unwrap();
        let x0 = data.states[0][0];
        let xt = data.states[10][0];
        assert!((xt - x0 * (-1.0f64).exp()).abs() <= 1e-3 * x0.abs().max(1e-3));
    }

    #[test]
    fn characteristic_function_examples() {
        let standard = MomentSet::from_fn(1, 8, |n| {
            let k = n.exponents()[0] as usize;
            if k % 2 == 1 {
                0.0
            } else {
                (1..k).step_by(2).map(|j| j as f64).product()
            }
        })
        .unwrap();
        assert_abs_diff_eq!(char_fn_from_moments(&standard, 1.0).re, (-0.5f64).exp(), epsilon = 1e-4);

        let normal = make_ou().initial_moments(8).unwrap();
        // OU initial law is N(0, 0.25); compare at z = 2 so that z·s = 1
        let phi = char_fn_from_moments(&normal, 2.0);
        assert_abs_diff_eq!(phi.re, (-0.5f64).exp(), epsilon = 1e-4);
        assert_abs_diff_eq!(phi.im, 0.0, epsilon = 1e-15);
        assert_eq!(char_fn_from_moments(&normal, 0.0), Complex64::new(1.0, 0.0));

        let c = 0.37;
        let z = 1.3;
        let want = Complex64::from_polar(1.0, z * c);
        assert_eq!(char_fn_from_samples(&[c, c, c], z), want);
        let rule = moment_quadrature(&MomentSet::dirac(&[c], 1)).unwrap();
        assert_abs_diff_eq!((char_fn_from_rule(&rule, z) - want).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn grid_characteristic_function_of_gaussian() {
        let n = 2001;
        let grid: Vec<f64> = (0..n).map(|i| -8.0 + 16.0 * i as f64 / (n - 1) as f64).collect();
        let dens: Vec<f64> = grid
            .iter()
            .map(|x| (-(x - 0.3f64).powi(2) / 0.8).exp() / (0.8 * std::f64::consts::PI).sqrt())
            .collect();
        for z in z_grid(2.0, 41) {
            let err = (char_fn_from_grid(&grid, &dens, z) - char_fn_gaussian(0.3, 0.4, z)).norm();
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn sup_error_is_conjugate_symmetric() {
        let m = make_benes_bernoulli().initial_moments(6).unwrap();
        let zs = z_grid(2.0, 41);
        assert_eq!(zs.len(), 41);
        assert_eq!(zs[20], 0.0);
        for &z in &zs {
            let a = char_fn_from_moments(&m, z);
            let b = char_fn_from_moments(&m, -z);
            assert_abs_diff_eq!((a - b.conj()).norm(), 0.0, epsilon = 1e-14);
        }
        let e = sup_error(&zs, |z| char_fn_gaussian(0.0, 0.3, z), |z| char_fn_from_moments(&m, z));
        let e_neg = sup_error(
            &zs,
            |z| char_fn_gaussian(0.0, 0.3, -z),
            |z| char_fn_from_moments(&m, -z),
        );
        assert_abs_diff_eq!(e, e_neg, epsilon = 1e-14);
    }
}
