//! Reference and comparison filters.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::filter::MeasurementModel;
use crate::models::{char_fn_from_grid, ou_discretization, GaussianMixture};
use crate::quadrature::gauss_hermite;
use crate::transition::{ConditionalMoments, Sde};

/// Conditional mean and covariance of the measurement, for Gaussian filters.
pub trait MeasurementMoments: MeasurementModel {
    fn conditional_mean_cov(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

/// Per-step Gaussian filtering results.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianTrajectory {
    /// Filtering beliefs for `k = 1..=T` (the prior is not included).
    pub beliefs: Vec<GaussianBelief>,
    /// `log p(y_k | y_{1:k-1})` under the filter.
    pub log_normalizers: Vec<f64>,
    pub nll: f64,
    pub diverged_at: Option<usize>,
    pub divergence: Option<String>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Exact Kalman filter for the Ornstein–Uhlenbeck model observed in additive
/// Gaussian noise, started from the stationary law `N(0, σ²)`.
pub fn kalman_ou(ell: f64, sigma: f64, dt: f64, ys: &[Vec<f64>], noise_var: f64) -> Result<GaussianTrajectory> {
    if !(noise_var > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "measurement noise variance {noise_var}"
        )));
    }
    if !(ell > 0.0 && sigma > 0.0 && dt > 0.0) {
        return Err(Error::InvalidArgument("ell, sigma and dt must be positive".into()));
    }
    let (f, q) = ou_discretization(ell, sigma, dt);
    let (mut m, mut p) = (0.0, sigma * sigma);
    let mut out = GaussianTrajectory::default();
    for y in ys {
        let mp = f * m;
        let pp = f * f * p + q;
        let s = pp + noise_var;
        let r = y[0] - mp;
        let k = pp / s;
        m = mp + k * r;
        p = pp - k * pp;
        let ll = -0.5 * (LN_2PI + s.ln() + r * r / s);
        out.nll -= ll;
        out.log_normalizers.push(ll);
        out.beliefs.push(GaussianBelief {
            mean: vec![m],
            covariance: DMatrix::from_element(1, 1, p),
        });
    }
    Ok(out)
}

/// Tensor Gauss–Hermite points and weights for `N(mean, cov)`.
pub fn sigma_points(mean: &[f64], cov: &DMatrix<f64>, order: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = mean.len();
    let l = cov
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            pivot: 0,
            value: f64::NAN,
        })?
        .l();
    let (z, w) = gauss_hermite(order)?;
    let total = order.pow(d as u32);
    let mut points = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let u = DVector::from_iterator(d, idx.iter().map(|&i| z[i]));
        let x = &l * u;
        points.push((0..d).map(|i| mean[i] + x[i]).collect());
        weights.push(idx.iter().map(|&i| w[i]).product());
        for i in (0..d).rev() {
            idx[i] += 1;
            if idx[i] < order {
                break;
            }
            idx[i] = 0;
        }
    }
    Ok((points, weights))
}

fn ghf_step(
    belief: &GaussianBelief,
    transition: &dyn ConditionalMoments,
    meas: &dyn MeasurementMoments,
    y: &[f64],
    dt: f64,
    order: usize,
) -> Result<(GaussianBelief, f64)> {
    let d = belief.mean.len();
    let (xs, ws) = sigma_points(&belief.mean, &belief.covariance, order)?;
    let mut mp = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for (x, w) in xs.iter().zip(&ws) {
        let (m, c) = transition.gaussian_kernel(x, dt)?;
        let m = DVector::from_vec(m);
        second += (c + &m * m.transpose()) * *w;
        mp += m * *w;
    }
    let pp = second - &mp * mp.transpose();
    let pp = (&pp + pp.transpose()) * 0.5;

    let mp_vec: Vec<f64> = mp.iter().copied().collect();
    let (xs, ws) = sigma_points(&mp_vec, &pp, order)?;
    let dy = y.len();
    let mut yhat = DVector::zeros(dy);
    let evals: Vec<(DVector<f64>, DMatrix<f64>)> = xs
        .iter()
        .map(|x| {
            let (m, c) = meas.conditional_mean_cov(x);
            (DVector::from_vec(m), c)
        })
        .collect();
    for ((h, _), w) in evals.iter().zip(&ws) {
        yhat += h * *w;
    }
    let mut s = DMatrix::zeros(dy, dy);
    let mut cross = DMatrix::zeros(d, dy);
    for ((x, (h, r)), w) in xs.iter().zip(&evals).zip(&ws) {
        let dh = h - &yhat;
        let dx = DVector::from_column_slice(x) - &mp;
        s += (r + &dh * dh.transpose()) * *w;
        cross += dx * dh.transpose() * *w;
    }
    let s_chol = s.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        pivot: 0,
        value: f64::NAN,
    })?;
    let gain = s_chol.solve(&cross.transpose()).transpose();
    let resid = DVector::from_column_slice(y) - &yhat;
    let mean = &mp + &gain * &resid;
    let cov = &pp - &gain * &s * gain.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    if cov.clone().cholesky().is_none() || mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite {
            pivot: 0,
            value: f64::NAN,
        });
    }
    let logdet: f64 = s_chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let maha = resid.dot(&s_chol.solve(&resid));
    let ll = -0.5 * (dy as f64 * LN_2PI + logdet + maha);
    Ok((
        GaussianBelief {
            mean: mean.iter().copied().collect(),
            covariance: cov,
        },
        ll,
    ))
}

/// Gaussian assumed-density filter with tensor Gauss–Hermite integration and
/// a moment-matched joint `(x, y)` update. `times[0]` is the prior's time.
pub fn gauss_hermite_filter(
    transition: &dyn ConditionalMoments,
    meas: &dyn MeasurementMoments,
    ys: &[Vec<f64>],
    times: &[f64],
    prior: &GaussianBelief,
    order: usize,
) -> Result<GaussianTrajectory> {
    if order == 0 {
        return Err(Error::InvalidArgument("Gauss-Hermite order must be at least 1".into()));
    }
    if times.len() != ys.len() + 1 {
        return Err(Error::DimensionMismatch {
            expected: ys.len() + 1,
            found: times.len(),
        });
    }
    let mut out = GaussianTrajectory::default();
    let mut belief = prior.clone();
    for (k, y) in ys.iter().enumerate() {
        match ghf_step(&belief, transition, meas, y, times[k + 1] - times[k], order) {
            Ok((b, ll)) => {
                out.nll -= ll;
                out.log_normalizers.push(ll);
                out.beliefs.push(b.clone());
                belief = b;
            }
            Err(e) => {
                out.diverged_at = Some(k + 1);
                out.divergence = Some(e.to_string());
                break;
            }
        }
    }
    Ok(out)
}

/// Ancestor indices by stratified resampling: one uniform draw per stratum
/// `[(i - 1)/n, i/n)`, inverted through the cumulative weights.
pub fn stratified_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = (i as f64 + rng.random::<f64>()) / n as f64;
        while u >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// Weighted particles, `particles` row-major `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub dim: usize,
    pub particles: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for (a, x) in m.iter_mut().zip(self.particle(i)) {
                *a += w * x;
            }
        }
        m
    }

    pub fn variances(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for ((a, x), mu) in v.iter_mut().zip(self.particle(i)).zip(&m) {
                *a += w * (x - mu) * (x - mu);
            }
        }
        v
    }

    /// Weighted empirical characteristic function of the first coordinate.
    pub fn char_fn(&self, z: f64) -> Complex64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| Complex64::from_polar(*w, z * self.particle(i)[0]))
            .sum()
    }
}

/// How particles are moved between measurement times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Proposal {
    /// Euler–Maruyama simulation of the SDE with the given number of substeps.
    Bootstrap { substeps: usize },
    /// Locally optimal proposal of the linear model `dX = -X/ℓ dt + sqrt(2σ²/ℓ) dW`,
    /// `Y = X + N(0, r)`.
    LinearGaussianOptimal { ell: f64, sigma: f64, noise_var: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticleTrajectory {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub log_normalizers: Vec<f64>,
    pub nll: f64,
    pub diverged_at: Option<usize>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Particle filter with stratified resampling at every step.
///
/// `observe(k, ensemble)` sees the weighted ensemble after each update,
/// before resampling.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_pf<M, R>(
    model: &M,
    meas: &dyn MeasurementModel,
    ys: &[Vec<f64>],
    times: &[f64],
    initial: &GaussianMixture,
    n_particles: usize,
    proposal: Proposal,
    rng: &mut R,
    mut observe: impl FnMut(usize, &ParticleEnsemble),
) -> Result<ParticleTrajectory>
where
    M: Sde + ?Sized,
    R: Rng + ?Sized,
{
    if n_particles == 0 {
        return Err(Error::InvalidArgument("need at least one particle".into()));
    }
    if times.len() != ys.len() + 1 {
        return Err(Error::DimensionMismatch {
            expected: ys.len() + 1,
            found: times.len(),
        });
    }
    let d = model.dim();
    let w = model.noise_dim();
    let n = n_particles;
    let mut particles: Vec<f64> = (0..n).flat_map(|_| initial.sample(rng)).collect();
    let mut out = ParticleTrajectory::default();
    let mut logw = vec![0.0; n];
    let mut scratch = vec![0.0; n * d];
    for (k, y) in ys.iter().enumerate() {
        let dt = times[k + 1] - times[k];
        match proposal {
            Proposal::Bootstrap { substeps } => {
                let h = dt / substeps.max(1) as f64;
                let sq = h.sqrt();
                for p in particles.chunks_exact_mut(d) {
                    for _ in 0..substeps.max(1) {
                        let a = model.drift(p);
                        let b = model.dispersion(p);
                        let dw: Vec<f64> = (0..w).map(|_| sq * rng.sample::<f64, _>(StandardNormal)).collect();
                        for i in 0..d {
                            p[i] += a[i] * h + (0..w).map(|j| b[i * w + j] * dw[j]).sum::<f64>();
                        }
                    }
                }
                for (lw, p) in logw.iter_mut().zip(particles.chunks_exact(d)) {
                    *lw = meas.log_density(y, p);
                }
            }
            Proposal::LinearGaussianOptimal { ell, sigma, noise_var } => {
                let (f, q) = ou_discretization(ell, sigma, dt);
                let post_var = 1.0 / (1.0 / q + 1.0 / noise_var);
                let s = q + noise_var;
                for (lw, p) in logw.iter_mut().zip(particles.iter_mut()) {
                    let fx = f * *p;
                    let r = y[0] - fx;
                    *lw = -0.5 * (LN_2PI + s.ln() + r * r / s);
                    let m = post_var * (fx / q + y[0] / noise_var);
                    *p = m + post_var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        if logw.iter().any(|v| v.is_nan()) || particles.iter().any(|v| !v.is_finite()) {
            out.diverged_at = Some(k + 1);
            break;
        }
        let lse = log_sum_exp(&logw);
        if lse == f64::NEG_INFINITY || !lse.is_finite() {
            out.diverged_at = Some(k + 1);
            break;
        }
        let ll = lse - (n as f64).ln();
        out.nll -= ll;
        out.log_normalizers.push(ll);
        let weights: Vec<f64> = logw.iter().map(|v| (v - lse).exp()).collect();
        let ens = ParticleEnsemble {
            dim: d,
            particles,
            weights,
        };
        out.means.push(ens.mean());
        out.variances.push(ens.variances());
        observe(k + 1, &ens);
        let idx = stratified_resample(&ens.weights, rng);
        for (dst, &src) in scratch.chunks_exact_mut(d).zip(&idx) {
            dst.copy_from_slice(ens.particle(src));
        }
        particles = ens.particles;
        std::mem::swap(&mut particles, &mut scratch);
    }
    Ok(out)
}

/// Uniform grid and kernel choice for the one-dimensional reference filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
    /// `None`: the transition's Gaussian kernel over the whole interval.
    /// `Some(m)`: `m` Euler–Maruyama kernels of `dt / m` applied in sequence.
    pub em_substeps: Option<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lower: -8.0,
            upper: 8.0,
            points: 2000,
            em_substeps: None,
        }
    }
}

/// Density values on a uniform grid, trapezoid-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

fn trapezoid(h: f64, v: &[f64]) -> f64 {
    let n = v.len();
    h * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[n - 1]))
}

impl GridDensity {
    pub fn spacing(&self) -> f64 {
        (self.grid[self.grid.len() - 1] - self.grid[0]) / (self.grid.len() - 1) as f64
    }

    pub fn mass(&self) -> f64 {
        trapezoid(self.spacing(), &self.density)
    }

    pub fn mean(&self) -> f64 {
        let xs: Vec<f64> = self.grid.iter().zip(&self.density).map(|(x, p)| x * p).collect();
        trapezoid(self.spacing(), &xs)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let xs: Vec<f64> = self
            .grid
            .iter()
            .zip(&self.density)
            .map(|(x, p)| (x - m) * (x - m) * p)
            .collect();
        trapezoid(self.spacing(), &xs)
    }

    pub fn char_fn(&self, z: f64) -> Complex64 {
        char_fn_from_grid(&self.grid, &self.density, z)
    }

    fn normalize(&mut self) -> f64 {
        let mass = self.mass();
        self.density.iter_mut().for_each(|p| *p /= mass);
        mass
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridTrajectory {
    /// Filtering densities for `k = 1..=T`.
    pub densities: Vec<GridDensity>,
    pub log_normalizers: Vec<f64>,
    pub nll: f64,
    /// Largest mass lost through the grid boundary in one prediction.
    pub max_escaped_mass: f64,
}

// Column j holds the transition density from grid point j, restricted to
// the rows where it is not negligible.
struct BandedKernel {
    rows: Vec<(usize, Vec<f64>)>,
}

impl BandedKernel {
    fn build(grid: &[f64], transition: &dyn ConditionalMoments, dt: f64) -> Result<Self> {
        let n = grid.len();
        let h = grid[1] - grid[0];
        let mut rows = Vec::with_capacity(n);
        for &x in grid {
            let (m, c) = transition.gaussian_kernel(&[x], dt)?;
            let (mu, var) = (m[0], c[(0, 0)]);
            if !(var > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "kernel variance {var} at {x}; use a substepped Euler–Maruyama grid kernel (em_substeps)"
                )));
            }
            let sd = var.sqrt();
            let lo = (((mu - 12.0 * sd - grid[0]) / h).floor().max(0.0) as usize).min(n);
            let hi = (((mu + 12.0 * sd - grid[0]) / h).ceil().max(0.0) as usize).min(n - 1);
            let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
            let vals = if lo > hi {
                Vec::new()
            } else {
                (lo..=hi)
                    .map(|i| norm * (-(grid[i] - mu).powi(2) / (2.0 * var)).exp())
                    .collect()
            };
            rows.push((lo, vals));
        }
        Ok(BandedKernel { rows })
    }

    // p̄(x_i) = Σ_j K(x_i | x_j) p(x_j) h τ_j with trapezoid factors τ_j
    fn apply(&self, p: &[f64], h: f64) -> Vec<f64> {
        let n = p.len();
        let mut out = vec![0.0; n];
        for (j, (lo, vals)) in self.rows.iter().enumerate() {
            let tau = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            let f = p[j] * h * tau;
            if f == 0.0 {
                continue;
            }
            for (o, k) in out[*lo..*lo + vals.len()].iter_mut().zip(vals) {
                *o += f * k;
            }
        }
        out
    }
}

/// Point-mass filter on a uniform grid; the truth for one-dimensional models.
///
/// The kernel is rebuilt only when the step size changes.
pub fn grid_reference_filter<M: Sde + ?Sized>(
    model: &M,
    transition: &dyn ConditionalMoments,
    meas: &dyn MeasurementModel,
    ys: &[Vec<f64>],
    times: &[f64],
    initial: &GaussianMixture,
    spec: &GridSpec,
) -> Result<GridTrajectory> {
    if model.dim() != 1 || transition.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: model.dim(),
        });
    }
    if spec.points < 3 || !(spec.upper > spec.lower) {
        return Err(Error::InvalidArgument(
            "grid needs at least 3 points on a proper interval".into(),
        ));
    }
    if times.len() != ys.len() + 1 {
        return Err(Error::DimensionMismatch {
            expected: ys.len() + 1,
            found: times.len(),
        });
    }
    let n = spec.points;
    let grid: Vec<f64> = (0..n)
        .map(|i| spec.lower + (spec.upper - spec.lower) * i as f64 / (n - 1) as f64)
        .collect();
    let h = grid[1] - grid[0];
    let mut current = GridDensity {
        grid: grid.clone(),
        density: grid.iter().map(|&x| initial.pdf_1d(x)).collect(),
    };
    current.normalize();
    let em;
    let (kernel_transition, repeats): (&dyn ConditionalMoments, usize) = match spec.em_substeps {
        None => (transition, 1),
        Some(m) => {
            em = crate::transition::SdeTransition::new(model, crate::transition::TransitionConfig::euler_maruyama())?;
            (&em, m.max(1))
        }
    };
    let mut out = GridTrajectory::default();
    let mut cached: Option<(f64, BandedKernel)> = None;
    for (k, y) in ys.iter().enumerate() {
        let dt = times[k + 1] - times[k];
        let sub = dt / repeats as f64;
        if cached.as_ref().is_none_or(|(d, _)| (d - sub).abs() > 1e-15 * sub) {
            cached = Some((sub, BandedKernel::build(&grid, kernel_transition, sub)?));
        }
        let kernel = &cached.as_ref().expect("kernel").1;
        let mut pred = current.density.clone();
        for _ in 0..repeats {
            pred = kernel.apply(&pred, h);
        }
        let mut pred = GridDensity {
            grid: grid.clone(),
            density: pred,
        };
        let mass = pred.normalize();
        let escaped = 1.0 - mass;
        if escaped > 1e-6 {
            log::warn!("grid filter lost mass {escaped:e} at step {}", k + 1);
        }
        out.max_escaped_mass = out.max_escaped_mass.max(escaped);

        let logs: Vec<f64> = grid.iter().map(|&x| meas.log_density(y, &[x])).collect();
        let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::NonFinite(format!("grid likelihood at step {}", k + 1)));
        }
        let post: Vec<f64> = pred
            .density
            .iter()
            .zip(&logs)
            .map(|(p, l)| p * (l - shift).exp())
            .collect();
        let mut post = GridDensity {
            grid: grid.clone(),
            density: post,
        };
        let z = post.normalize();
        if !(z > 0.0) {
            return Err(Error::NonFinite(format!("grid normalizer at step {}", k + 1)));
        }
        let ll = z.ln() + shift;
        out.nll -= ll;
        out.log_normalizers.push(ll);
        out.densities.push(post.clone());
        current = post;
    }
    Ok(out)
}
