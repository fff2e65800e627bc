//! Conditional moments `E[X_k^n | X_{k-1} = x]` of an SDE over one step.
//!
//! Two schemes are provided: the one-step Gaussian (Euler–Maruyama) law, whose
//! moments follow from a recurrence, and the Taylor moment expansion
//! `Σ_{j<=J} (A^j g)(x) dt^j / j!` with `A` the generator of the SDE.
//!
//! In analytic mode the expansion is evaluated on truncated Taylor jets: the
//! generator acts linearly on the jet coefficients of `g` around `x`, so one
//! operator matrix per node serves every monomial.

pub mod jet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::momentspace::{rank_of, MomentLayout, MultiIndex};

pub use jet::{Jet, JetLayout, Scalar};

/// `dX = a(X) dt + b(X) dW` with `a: R^d -> R^d` and `b: R^d -> R^{d x d_w}`.
///
/// Coefficients are written once, generically over [`Scalar`], so the same
/// code yields values (`f64`) and exact derivatives (jets).
pub trait Sde: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift<T: Scalar>(&self, x: &[T]) -> Vec<T>;
    /// Row-major `d x d_w`.
    fn dispersion<T: Scalar>(&self, x: &[T]) -> Vec<T>;
}

/// `b(x) b(x)ᵀ`, row-major `d x d`.
pub fn diffusion<M: Sde + ?Sized, T: Scalar>(model: &M, x: &[T]) -> Vec<T> {
    let d = model.dim();
    let w = model.noise_dim();
    let b = model.dispersion(x);
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = x[0].constant_like(0.0);
            for k in 0..w {
                acc = acc + b[i * w + k].clone() * b[j * w + k].clone();
            }
            out.push(acc);
        }
    }
    out
}

/// A scalar test function `g: R^d -> R`.
pub trait ScalarField {
    fn eval<T: Scalar>(&self, x: &[T]) -> T;
}

/// `x^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial(pub MultiIndex);

impl ScalarField for Monomial {
    fn eval<T: Scalar>(&self, x: &[T]) -> T {
        let mut acc = x[0].constant_like(1.0);
        for (xi, &e) in x.iter().zip(self.0.exponents()) {
            for _ in 0..e {
                acc = acc * xi.clone();
            }
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DerivativeMode {
    /// Exact derivatives through Taylor jets.
    #[default]
    Analytic,
    /// Central differences. With `step: None` the per-coordinate step is
    /// `ε^{1/3} max(1, |x_i|)` for gradients and `ε^{1/4} max(1, |x_i|)` for
    /// Hessians; a fixed `step` replaces both base factors.
    FiniteDifference { step: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    EulerMaruyama,
    Tme { order: usize },
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme::Tme { order: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransitionConfig {
    pub scheme: Scheme,
    pub derivative: DerivativeMode,
}

impl TransitionConfig {
    pub fn euler_maruyama() -> Self {
        TransitionConfig {
            scheme: Scheme::EulerMaruyama,
            derivative: DerivativeMode::Analytic,
        }
    }

    pub fn tme(order: usize) -> Self {
        TransitionConfig {
            scheme: Scheme::Tme { order },
            derivative: DerivativeMode::Analytic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Scheme::Tme { order: 0 } = self.scheme {
            return Err(Error::InvalidArgument("TME order must be at least 1".into()));
        }
        if let DerivativeMode::FiniteDifference { step: Some(h) } = self.derivative {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidArgument(format!("finite-difference step {h}")));
            }
        }
        Ok(())
    }
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Moments of `N(mu, sigma)` up to `max_degree`, in graded-lex order.
pub fn gaussian_moments(mu: &[f64], sigma: &DMatrix<f64>, max_degree: usize) -> Result<Vec<f64>> {
    let d = mu.len();
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: sigma.nrows(),
        });
    }
    let scale = sigma.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let asym = (sigma - sigma.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let layout = MomentLayout::get(d, max_degree);
    let flat: Vec<f64> = (0..d * d).map(|k| sigma[(k / d, k % d)]).collect();
    let mut out = vec![0.0; layout.len()];
    gaussian_moments_into(&layout, mu, &flat, &mut out);
    Ok(out)
}

/// Recurrence `m_{n+e_i} = mu_i m_n + Σ_j Σ_ij n_j m_{n-e_j}` over a layout;
/// `sigma` is row-major.
pub(crate) fn gaussian_moments_into(layout: &MomentLayout, mu: &[f64], sigma: &[f64], out: &mut [f64]) {
    let d = layout.dim();
    out[0] = 1.0;
    let mut p = vec![0u32; d];
    for (r, n) in layout.indices().iter().enumerate().skip(1) {
        let n = n.exponents();
        let i = n.iter().position(|&e| e > 0).expect("nonzero index");
        p.copy_from_slice(n);
        p[i] -= 1;
        let mut acc = mu[i] * out[rank_of(&p)];
        for j in 0..d {
            if p[j] > 0 {
                let s = sigma[i * d + j];
                if s != 0.0 {
                    p[j] -= 1;
                    acc += s * (p[j] + 1) as f64 * out[rank_of(&p)];
                    p[j] += 1;
                }
            }
        }
        out[r] = acc;
    }
}

/// One-step Euler–Maruyama mean and covariance.
pub fn em_kernel<M: Sde + ?Sized>(model: &M, x: &[f64], dt: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = model.dim();
    let a = model.drift(x);
    let s = diffusion(model, x);
    let mean: Vec<f64> = (0..d).map(|i| x[i] + a[i] * dt).collect();
    let cov = DMatrix::from_fn(d, d, |i, j| s[i * d + j] * dt);
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Euler-Maruyama kernel".into()));
    }
    Ok((mean, cov))
}

/// Euler–Maruyama conditional moments in state coordinates.
pub fn em_conditional_moments<M: Sde + ?Sized>(model: &M, x: &[f64], dt: f64, max_degree: usize) -> Result<Vec<f64>> {
    if !(dt >= 0.0) {
        return Err(Error::InvalidArgument(format!("time step {dt}")));
    }
    let (mean, cov) = em_kernel(model, x, dt)?;
    gaussian_moments(&mean, &cov, max_degree)
}

fn fd_steps(x: &[f64], step: Option<f64>) -> (Vec<f64>, Vec<f64>) {
    let (b1, b2) = match step {
        Some(h) => (h, h),
        None => (f64::EPSILON.cbrt(), f64::EPSILON.powf(0.25)),
    };
    (
        x.iter().map(|v| b1 * v.abs().max(1.0)).collect(),
        x.iter().map(|v| b2 * v.abs().max(1.0)).collect(),
    )
}

fn generator_fd<M: Sde + ?Sized>(model: &M, g: &dyn Fn(&[f64]) -> f64, x: &[f64], step: Option<f64>) -> f64 {
    let d = x.len();
    let (h1, h2) = fd_steps(x, step);
    let a = model.drift(x);
    let s = diffusion(model, x);
    let mut y = x.to_vec();
    let g0 = g(x);
    let mut acc = 0.0;
    for i in 0..d {
        y[i] = x[i] + h1[i];
        let up = g(&y);
        y[i] = x[i] - h1[i];
        let down = g(&y);
        y[i] = x[i];
        acc += a[i] * (up - down) / (2.0 * h1[i]);
    }
    for i in 0..d {
        for j in 0..d {
            let sij = s[i * d + j];
            if sij == 0.0 {
                continue;
            }
            let hess = if i == j {
                y[i] = x[i] + h2[i];
                let up = g(&y);
                y[i] = x[i] - h2[i];
                let down = g(&y);
                y[i] = x[i];
                (up - 2.0 * g0 + down) / (h2[i] * h2[i])
            } else {
                let mut corner = |si: f64, sj: f64| {
                    y[i] = x[i] + si * h2[i];
                    y[j] = x[j] + sj * h2[j];
                    let v = g(&y);
                    y[i] = x[i];
                    y[j] = x[j];
                    v
                };
                (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * h2[i] * h2[j])
            };
            acc += 0.5 * sij * hess;
        }
    }
    acc
}

/// `(A g)(x) = ∇g(x)ᵀ a(x) + ½ tr(b bᵀ(x) Hess g(x))`.
pub fn apply_generator<M: Sde + ?Sized, G: ScalarField + ?Sized>(
    model: &M,
    g: &G,
    x: &[f64],
    mode: DerivativeMode,
) -> Result<f64> {
    let d = model.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x.len(),
        });
    }
    let v = match mode {
        DerivativeMode::Analytic => {
            let vars = Jet::variables(x, 2);
            let gj = g.eval(&vars);
            let a = model.drift(x);
            let s = diffusion(model, x);
            let mut acc = 0.0;
            let mut e = vec![0u32; d];
            for i in 0..d {
                e[i] = 1;
                acc += a[i] * gj.coeff(&e);
                e[i] = 0;
            }
            for i in 0..d {
                for j in 0..d {
                    e[i] += 1;
                    e[j] += 1;
                    // Hess_ii = 2 c_{2e_i}, Hess_ij = c_{e_i + e_j}
                    let h = if i == j { 2.0 * gj.coeff(&e) } else { gj.coeff(&e) };
                    e[i] -= 1;
                    e[j] -= 1;
                    acc += 0.5 * s[i * d + j] * h;
                }
            }
            acc
        }
        DerivativeMode::FiniteDifference { step } => {
            let f = |y: &[f64]| g.eval(y);
            generator_fd(model, &f, x, step)
        }
    };
    check_finite(v, "generator value")
}

/// The generator as a matrix on the coefficients of order-`2J` jets at `x`,
/// reduced to the row vector `R = Σ_j dt^j / j! · e₀ᵀ A^j`, so that the
/// expansion of any `g` equals `R · coeffs(g)`.
pub struct TmeWeights {
    layout: std::sync::Arc<JetLayout>,
    weights: Vec<f64>,
}

impl TmeWeights {
    pub fn new<M: Sde + ?Sized>(model: &M, x: &[f64], dt: f64, order: usize) -> Result<TmeWeights> {
        let d = model.dim();
        let k = 2 * order;
        let vars = Jet::variables(x, k);
        let layout = vars[0].layout().clone();
        let size = layout.len();
        let drift = model.drift(&vars);
        let sigma = diffusion(model, &vars);

        // A[α][β]: coefficient of δ^α in A δ^β
        let mut a = vec![0.0; size * size];
        for beta in 0..size {
            let exps = layout.indices()[beta].exponents().to_vec();
            for i in 0..d {
                if exps[i] == 0 {
                    continue;
                }
                let lower = layout.sub_unit_rank(beta, i).expect("positive exponent");
                let f = exps[i] as f64;
                for (gamma, c) in drift[i].coeffs().iter().enumerate() {
                    if *c != 0.0 {
                        if let Some(alpha) = layout.add_rank(gamma, lower) {
                            a[alpha * size + beta] += f * c;
                        }
                    }
                }
            }
            for i in 0..d {
                for j in 0..d {
                    let f = if i == j {
                        exps[i] as f64 * (exps[i] as f64 - 1.0)
                    } else {
                        exps[i] as f64 * exps[j] as f64
                    };
                    if f == 0.0 {
                        continue;
                    }
                    let mut low = exps.clone();
                    low[i] -= 1;
                    low[j] -= 1;
                    let lower = rank_of(&low);
                    for (gamma, c) in sigma[i * d + j].coeffs().iter().enumerate() {
                        if *c != 0.0 {
                            if let Some(alpha) = layout.add_rank(gamma, lower) {
                                a[alpha * size + beta] += 0.5 * f * c;
                            }
                        }
                    }
                }
            }
        }

        let mut row = vec![0.0; size];
        row[0] = 1.0;
        let mut weights = row.clone();
        let mut factor = 1.0;
        for j in 1..=order {
            let mut next = vec![0.0; size];
            for (alpha, r) in row.iter().enumerate() {
                if *r == 0.0 {
                    continue;
                }
                let line = &a[alpha * size..(alpha + 1) * size];
                for (n, v) in next.iter_mut().zip(line) {
                    *n += r * v;
                }
            }
            row = next;
            factor *= dt / j as f64;
            for (w, r) in weights.iter_mut().zip(&row) {
                *w += factor * r;
            }
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("TME expansion".into()));
        }
        Ok(TmeWeights { layout, weights })
    }

    pub fn layout(&self) -> &std::sync::Arc<JetLayout> {
        &self.layout
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Expansion of `g` given its jet around the node.
    pub fn apply(&self, g: &Jet) -> f64 {
        self.weights.iter().zip(g.coeffs()).map(|(w, c)| w * c).sum()
    }

    /// Expansions of `((X - center) / scale)^n` for every `n` in `out_layout`.
    pub fn monomials_in_frame(
        &self,
        x: &[f64],
        center: &[f64],
        scale: &[f64],
        out_layout: &MomentLayout,
        out: &mut [f64],
    ) {
        let d = x.len();
        let k = self.layout.order();
        let max_deg = out_layout.max_degree();
        // per coordinate: coefficient of δ^q in ((x - c + δ)/s)^p
        let tables: Vec<Vec<Vec<f64>>> = (0..d)
            .map(|i| {
                let u = (x[i] - center[i]) / scale[i];
                let inv = 1.0 / scale[i];
                let mut t = vec![vec![0.0; k + 1]; max_deg + 1];
                t[0][0] = 1.0;
                for p in 1..=max_deg {
                    for q in 0..=k.min(p) {
                        let mut v = u * t[p - 1][q];
                        if q > 0 {
                            v += inv * t[p - 1][q - 1];
                        }
                        t[p][q] = v;
                    }
                }
                t
            })
            .collect();
        let jet_idx = self.layout.indices();
        for (slot, n) in out.iter_mut().zip(out_layout.indices()) {
            let n = n.exponents();
            let mut acc = 0.0;
            for (beta, w) in jet_idx.iter().zip(&self.weights) {
                if *w == 0.0 {
                    continue;
                }
                let b = beta.exponents();
                let mut c = *w;
                for i in 0..d {
                    if b[i] > n[i] {
                        c = 0.0;
                        break;
                    }
                    c *= tables[i][n[i] as usize][b[i] as usize];
                }
                acc += c;
            }
            *slot = acc;
        }
    }
}

fn nested_generator<M: Sde + ?Sized>(
    model: &M,
    g: &dyn Fn(&[f64]) -> f64,
    j: usize,
    x: &[f64],
    step: Option<f64>,
) -> f64 {
    if j == 0 {
        g(x)
    } else {
        let inner = |y: &[f64]| nested_generator(model, g, j - 1, y, step);
        generator_fd(model, &inner, x, step)
    }
}

/// Order-`J` Taylor moment expansion of `E[g(X_{t+dt}) | X_t = x]`.
///
/// In finite-difference mode the `j`-fold generator is nested central
/// differences; round-off grows quickly with `j`, so that mode is only
/// accurate for small orders.
pub fn tme_expectation<M: Sde + ?Sized, G: ScalarField + ?Sized>(
    model: &M,
    g: &G,
    x: &[f64],
    dt: f64,
    order: usize,
    mode: DerivativeMode,
) -> Result<f64> {
    let v = match mode {
        DerivativeMode::Analytic => {
            let w = TmeWeights::new(model, x, dt, order)?;
            w.apply(&g.eval(&Jet::variables(x, 2 * order)))
        }
        DerivativeMode::FiniteDifference { step } => {
            let f = |y: &[f64]| g.eval(y);
            let mut acc = 0.0;
            let mut factor = 1.0;
            for j in 0..=order {
                if j > 0 {
                    factor *= dt / j as f64;
                }
                acc += factor * nested_generator(model, &f, j, x, step);
            }
            acc
        }
    };
    check_finite(v, "TME expectation")
}

/// `E[X^n | x]` by the order-`J` Taylor moment expansion.
pub fn tme_conditional_moment<M: Sde + ?Sized>(
    model: &M,
    x: &[f64],
    dt: f64,
    n: &MultiIndex,
    order: usize,
    mode: DerivativeMode,
) -> Result<f64> {
    tme_expectation(model, &Monomial(n.clone()), x, dt, order, mode)
}

/// One-step conditional moments as consumed by the moment filter.
pub trait ConditionalMoments: Sync {
    fn dim(&self) -> usize;

    /// Writes `E[((X_k - center) / scale)^n | X_{k-1} = x]` for every index of
    /// `layout` into `out`.
    fn moments_in_frame(
        &self,
        x: &[f64],
        dt: f64,
        center: &[f64],
        scale: &[f64],
        layout: &MomentLayout,
        out: &mut [f64],
    ) -> Result<()>;

    /// Mean and covariance of the one-step law, for Gaussian and sampling baselines.
    fn gaussian_kernel(&self, x: &[f64], dt: f64) -> Result<(Vec<f64>, DMatrix<f64>)>;

    /// A cheaper scheme whose moment sets are always valid, if any.
    fn fallback(&self) -> Option<Box<dyn ConditionalMoments + '_>> {
        None
    }
}

fn gaussian_in_frame(
    mean: &[f64],
    cov: &DMatrix<f64>,
    center: &[f64],
    scale: &[f64],
    layout: &MomentLayout,
    out: &mut [f64],
) {
    let d = mean.len();
    let mu: Vec<f64> = (0..d).map(|i| (mean[i] - center[i]) / scale[i]).collect();
    let sigma: Vec<f64> = (0..d * d)
        .map(|k| cov[(k / d, k % d)] / (scale[k / d] * scale[k % d]))
        .collect();
    gaussian_moments_into(layout, &mu, &sigma, out);
}

/// SDE transition under a [`TransitionConfig`].
pub struct SdeTransition<'a, M: Sde + ?Sized> {
    pub model: &'a M,
    pub config: TransitionConfig,
}

impl<'a, M: Sde + ?Sized> SdeTransition<'a, M> {
    pub fn new(model: &'a M, config: TransitionConfig) -> Result<Self> {
        config.validate()?;
        Ok(SdeTransition { model, config })
    }
}

impl<M: Sde + ?Sized> ConditionalMoments for SdeTransition<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn moments_in_frame(
        &self,
        x: &[f64],
        dt: f64,
        center: &[f64],
        scale: &[f64],
        layout: &MomentLayout,
        out: &mut [f64],
    ) -> Result<()> {
        match (self.config.scheme, self.config.derivative) {
            (Scheme::EulerMaruyama, _) => {
                let (mean, cov) = em_kernel(self.model, x, dt)?;
                gaussian_in_frame(&mean, &cov, center, scale, layout, out);
            }
            (Scheme::Tme { order }, DerivativeMode::Analytic) => {
                TmeWeights::new(self.model, x, dt, order)?.monomials_in_frame(x, center, scale, layout, out);
            }
            (Scheme::Tme { order }, mode @ DerivativeMode::FiniteDifference { .. }) => {
                for (slot, n) in out.iter_mut().zip(layout.indices()) {
                    let g = FrameMonomial { n, center, scale };
                    *slot = tme_expectation(self.model, &g, x, dt, order, mode)?;
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conditional moments".into()));
        }
        Ok(())
    }

    fn gaussian_kernel(&self, x: &[f64], dt: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
        match self.config.scheme {
            Scheme::EulerMaruyama => em_kernel(self.model, x, dt),
            Scheme::Tme { .. } => {
                let d = self.model.dim();
                let layout = MomentLayout::get(d, 2);
                let mut m = vec![0.0; layout.len()];
                self.moments_in_frame(x, dt, &vec![0.0; d], &vec![1.0; d], &layout, &mut m)?;
                let mean: Vec<f64> = (0..d).map(|i| m[d - i]).collect();
                let cov = DMatrix::from_fn(d, d, |i, j| {
                    let mut e = vec![0u32; d];
                    e[i] += 1;
                    e[j] += 1;
                    m[rank_of(&e)] - mean[i] * mean[j]
                });
                Ok((mean, cov))
            }
        }
    }

    fn fallback(&self) -> Option<Box<dyn ConditionalMoments + '_>> {
        match self.config.scheme {
            Scheme::EulerMaruyama => None,
            Scheme::Tme { .. } => Some(Box::new(SdeTransition {
                model: self.model,
                config: TransitionConfig::euler_maruyama(),
            })),
        }
    }
}

struct FrameMonomial<'a> {
    n: &'a MultiIndex,
    center: &'a [f64],
    scale: &'a [f64],
}

impl ScalarField for FrameMonomial<'_> {
    fn eval<T: Scalar>(&self, x: &[T]) -> T {
        let mut acc = x[0].constant_like(1.0);
        for (i, &e) in self.n.exponents().iter().enumerate() {
            let u = (x[i].clone() - self.center[i]) * (1.0 / self.scale[i]);
            for _ in 0..e {
                acc = acc * u.clone();
            }
        }
        acc
    }
}

/// A transition whose one-step law is Gaussian with a known mean and
/// covariance, e.g. an exactly discretized linear SDE or a discrete-time model.
pub struct GaussianTransition<F> {
    dim: usize,
    kernel: F,
}

impl<F> GaussianTransition<F>
where
    F: Fn(&[f64], f64) -> (Vec<f64>, DMatrix<f64>) + Sync,
{
    pub fn new(dim: usize, kernel: F) -> Self {
        GaussianTransition { dim, kernel }
    }
}

impl<F> ConditionalMoments for GaussianTransition<F>
where
    F: Fn(&[f64], f64) -> (Vec<f64>, DMatrix<f64>) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn moments_in_frame(
        &self,
        x: &[f64],
        dt: f64,
        center: &[f64],
        scale: &[f64],
        layout: &MomentLayout,
        out: &mut [f64],
    ) -> Result<()> {
        let (mean, cov) = self.gaussian_kernel(x, dt)?;
        gaussian_in_frame(&mean, &cov, center, scale, layout, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conditional moments".into()));
        }
        Ok(())
    }

    fn gaussian_kernel(&self, x: &[f64], dt: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (mean, cov) = (self.kernel)(x, dt);
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian kernel".into()));
        }
        Ok((mean, cov))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    struct Ou {
        ell: f64,
        sigma: f64,
    }

    impl Sde for Ou {
        fn dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn drift<T: Scalar>(&self, x: &[T]) -> Vec<T> {
            vec![x[0].clone() * (-1.0 / self.ell)]
        }
        fn dispersion<T: Scalar>(&self, x: &[T]) -> Vec<T> {
            vec![x[0].constant_like((2.0 * self.sigma * self.sigma / self.ell).sqrt())]
        }
    }

    const OU: Ou = Ou { ell: 1.0, sigma: 0.5 };

    // dX1 = (X1 - X1^3 + X2) dt + 0.5 dW1, dX2 = -X1 X2^2 dt + X1 dW2
    struct Cubic2;

    impl Sde for Cubic2 {
        fn dim(&self) -> usize {
            2
        }
        fn noise_dim(&self) -> usize {
            2
        }
        fn drift<T: Scalar>(&self, x: &[T]) -> Vec<T> {
            let x1 = x[0].clone();
            let x2 = x[1].clone();
            vec![
                x1.clone() - x1.clone() * x1.clone() * x1.clone() + x2.clone(),
                -(x1 * x2.clone() * x2),
            ]
        }
        fn dispersion<T: Scalar>(&self, x: &[T]) -> Vec<T> {
            let z = x[0].constant_like(0.0);
            vec![x[0].constant_like(0.5), z.clone(), z, x[0].clone()]
        }
    }

    struct Square;
    impl ScalarField for Square {
        fn eval<T: Scalar>(&self, x: &[T]) -> T {
            x[0].clone() * x[0].clone()
        }
    }

    struct Constant;
    impl ScalarField for Constant {
        fn eval<T: Scalar>(&self, x: &[T]) -> T {
            x[0].constant_like(2.5)
        }
    }

    // smooth non-polynomial test function in two variables
    struct Mixed;
    impl ScalarField for Mixed {
        fn eval<T: Scalar>(&self, x: &[T]) -> T {
            (x[0].clone() * x[1].clone()).tanh() + x[1].clone() * x[1].clone() * x[0].clone()
        }
    }

    fn double_factorial_moments(k: usize) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(|j| j as f64).product()
        }
    }

    #[test]
    fn gaussian_moment_examples() {
        let m = gaussian_moments(&[0.0], &DMatrix::from_element(1, 1, 1.0), 6).unwrap();
        assert_eq!(m, vec![1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0]);

        let mu = [0.7, -1.3];
        let m = gaussian_moments(&mu, &DMatrix::zeros(2, 2), 5).unwrap();
        for (v, n) in m.iter().zip(MomentLayout::get(2, 5).indices()) {
            assert_abs_diff_eq!(*v, n.monomial(&mu), epsilon = 1e-14);
        }

        let m = gaussian_moments(&[0.0, 0.0], &DMatrix::identity(2, 2), 4).unwrap();
        assert_eq!(m[MultiIndex::new(vec![2, 2]).rank()], 1.0);

        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]);
        assert!(matches!(
            gaussian_moments(&[0.0, 0.0], &asym, 2),
            Err(Error::NotSymmetric(_))
        ));
    }

    #[test]
    fn gaussian_moments_match_isserlis_in_three_dims() {
        // E[X^n] for N(mu, S) via the moment generating function expanded by
        // brute force: sum over Gaussian pairings is replaced by 1-d identities
        // on a linear transform, checked on diagonal covariance here.
        let mu = [0.3, -0.2, 1.1];
        let var = [0.5, 2.0, 0.1];
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&var));
        let m = gaussian_moments(&mu, &s, 6).unwrap();
        let one_d = |mu: f64, v: f64, k: u32| -> f64 {
            (0..=k)
                .map(|j| {
                    crate::momentspace::binomial(k as usize, j as usize) as f64
                        * mu.powi((k - j) as i32)
                        * v.powf(j as f64 / 2.0)
                        * double_factorial_moments(j as usize)
                })
                .sum()
        };
        for (v, n) in m.iter().zip(MomentLayout::get(3, 6).indices()) {
            let e = n.exponents();
            let want: f64 = (0..3).map(|i| one_d(mu[i], var[i], e[i])).product();
            assert_abs_diff_eq!(*v, want, epsilon = 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn em_examples() {
        let m = em_conditional_moments(&OU, &[1.0], 0.1, 2).unwrap();
        assert_abs_diff_eq!(m[1], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(m[2], 0.81 + 0.5 * 0.1, epsilon = 1e-15);
    }

    #[test]
    fn generator_examples() {
        let x = [0.8];
        assert_eq!(
            apply_generator(&OU, &Constant, &x, DerivativeMode::Analytic).unwrap(),
            0.0
        );
        let lin = Monomial(MultiIndex::new(vec![1]));
        assert_abs_diff_eq!(
            apply_generator(&OU, &lin, &x, DerivativeMode::Analytic).unwrap(),
            -0.8,
            epsilon = 1e-15
        );
        // -2x²/ℓ + 2σ²/ℓ
        let want = -2.0 * 0.64 + 2.0 * 0.25;
        assert_abs_diff_eq!(
            apply_generator(&OU, &Square, &x, DerivativeMode::Analytic).unwrap(),
            want,
            epsilon = 1e-14
        );
    }

    #[test]
    fn finite_difference_generator_matches_analytic() {
        let fd = DerivativeMode::FiniteDifference { step: None };
        for x in [[0.3, -0.7], [1.4, 0.2], [-2.5, 3.0]] {
            for n in [vec![1, 0], vec![0, 2], vec![2, 1], vec![3, 0]] {
                let g = Monomial(MultiIndex::new(n));
                let a = apply_generator(&Cubic2, &g, &x, DerivativeMode::Analytic).unwrap();
                let f = apply_generator(&Cubic2, &g, &x, fd).unwrap();
                assert!((a - f).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {f}");
            }
            let a = apply_generator(&Cubic2, &Mixed, &x, DerivativeMode::Analytic).unwrap();
            let f = apply_generator(&Cubic2, &Mixed, &x, fd).unwrap();
            assert!((a - f).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {f}");
        }
    }

    #[test]
    fn tme_examples() {
        let x = [1.3];
        let lin = MultiIndex::new(vec![1]);
        for order in [1, 3, 6] {
            let v = tme_conditional_moment(&OU, &x, 0.0, &lin, order, DerivativeMode::Analytic).unwrap();
            assert_eq!(v, 1.3);
        }
        let dt = 0.2;
        let v = tme_conditional_moment(&OU, &x, dt, &lin, 2, DerivativeMode::Analytic).unwrap();
        assert_abs_diff_eq!(v, 1.3 * (1.0 - dt + dt * dt / 2.0), epsilon = 1e-15);

        let v = tme_conditional_moment(&OU, &x, 0.1, &lin, 12, DerivativeMode::Analytic).unwrap();
        assert!((v - 1.3 * (-0.1f64).exp()).abs() <= 1e-10);
    }

    #[test]
    fn tme_second_moment_of_ou_is_exact_in_the_limit() {
        // E[X²|x] = x² e^{-2dt} + σ²(1 - e^{-2dt})
        let x = [0.6];
        let n = MultiIndex::new(vec![2]);
        let dt = 0.1;
        let v = tme_conditional_moment(&OU, &x, dt, &n, 14, DerivativeMode::Analytic).unwrap();
        let want = 0.36 * (-2.0 * dt).exp() + 0.25 * (1.0 - (-2.0 * dt).exp());
        assert_abs_diff_eq!(v, want, epsilon = 1e-12);
    }

    #[test]
    fn tme_matches_finite_difference_at_order_one() {
        let x = [0.4, 1.1];
        let dt = 0.05;
        for n in [vec![1, 0], vec![1, 1], vec![0, 3]] {
            let n = MultiIndex::new(n);
            let a = tme_conditional_moment(&Cubic2, &x, dt, &n, 1, DerivativeMode::Analytic).unwrap();
            let f = tme_conditional_moment(&Cubic2, &x, dt, &n, 1, DerivativeMode::FiniteDifference { step: None })
                .unwrap();
            assert!((a - f).abs() <= 1e-7 * a.abs().max(1.0), "{a} vs {f}");
        }
    }

    #[test]
    fn tme_weights_match_nested_generators() {
        // A^2 g through two analytic generator applications of an exact polynomial
        struct AppliedOnce;
        impl ScalarField for AppliedOnce {
            // A (x1² x2) for Cubic2, written out by hand
            fn eval<T: Scalar>(&self, x: &[T]) -> T {
                let x1 = x[0].clone();
                let x2 = x[1].clone();
                let a1 = x1.clone() - x1.clone() * x1.clone() * x1.clone() + x2.clone();
                let a2 = -(x1.clone() * x2.clone() * x2.clone());
                a1 * (x1.clone() * x2.clone() * 2.0) + a2 * (x1.clone() * x1) + x2 * 0.25
            }
        }
        let x = [0.7, -0.3];
        let g = Monomial(MultiIndex::new(vec![2, 1]));
        let once = apply_generator(&Cubic2, &g, &x, DerivativeMode::Analytic).unwrap();
        assert_abs_diff_eq!(once, AppliedOnce.eval(&x), epsilon = 1e-14);
        let twice = apply_generator(&Cubic2, &AppliedOnce, &x, DerivativeMode::Analytic).unwrap();
        let dt = 0.03;
        let want = x[0] * x[0] * x[1] + dt * once + dt * dt / 2.0 * twice;
        let got = tme_expectation(&Cubic2, &g, &x, dt, 2, DerivativeMode::Analytic).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn tme_order_one_mean_equals_euler_maruyama() {
        let x = [0.4, 1.1];
        let dt = 0.05;
        let em = em_conditional_moments(&Cubic2, &x, dt, 1).unwrap();
        let t = SdeTransition::new(&Cubic2, TransitionConfig::tme(1)).unwrap();
        let layout = MomentLayout::get(2, 1);
        let mut out = vec![0.0; 3];
        t.moments_in_frame(&x, dt, &[0.0, 0.0], &[1.0, 1.0], &layout, &mut out)
            .unwrap();
        for (a, b) in out.iter().zip(&em) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn frame_moments_agree_with_raw_expansion() {
        let x = [0.9, -0.4];
        let dt = 0.02;
        let (c, s) = ([0.5, -0.1], [0.3, 2.0]);
        let layout = MomentLayout::get(2, 5);
        let t = SdeTransition::new(&Cubic2, TransitionConfig::tme(3)).unwrap();
        let mut framed = vec![0.0; layout.len()];
        t.moments_in_frame(&x, dt, &c, &s, &layout, &mut framed).unwrap();
        let mut raw = vec![0.0; layout.len()];
        t.moments_in_frame(&x, dt, &[0.0, 0.0], &[1.0, 1.0], &layout, &mut raw)
            .unwrap();
        let raw = crate::momentspace::MomentSet::with_frame(2, 3, raw, vec![0.0, 0.0], vec![1.0, 1.0])
            .unwrap()
            .standardize_diag(&c, &s)
            .unwrap();
        for (a, b) in framed.iter().zip(raw.values()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10 * b.abs().max(1.0));
        }

        let fd = SdeTransition::new(
            &Cubic2,
            TransitionConfig {
                scheme: Scheme::Tme { order: 1 },
                derivative: DerivativeMode::FiniteDifference { step: None },
            },
        )
        .unwrap();
        let an = SdeTransition::new(&Cubic2, TransitionConfig::tme(1)).unwrap();
        let mut a = vec![0.0; layout.len()];
        let mut f = vec![0.0; layout.len()];
        an.moments_in_frame(&x, dt, &c, &s, &layout, &mut a).unwrap();
        fd.moments_in_frame(&x, dt, &c, &s, &layout, &mut f).unwrap();
        for (u, v) in a.iter().zip(&f) {
            assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0), "{u} vs {v}");
        }
    }

    #[test]
    fn tme_kernel_and_fallback() {
        let t = SdeTransition::new(&OU, TransitionConfig::tme(12)).unwrap();
        let (m, c) = t.gaussian_kernel(&[1.0], 0.1).unwrap();
        assert_abs_diff_eq!(m[0], (-0.1f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(c[(0, 0)], 0.25 * (1.0 - (-0.2f64).exp()), epsilon = 1e-12);
        assert!(t.fallback().is_some());
        let em = SdeTransition::new(&OU, TransitionConfig::euler_maruyama()).unwrap();
        assert!(em.fallback().is_none());
        assert!(SdeTransition::new(&OU, TransitionConfig::tme(0)).is_err());
    }
}
