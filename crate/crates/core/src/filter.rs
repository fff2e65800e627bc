//! The recursive moment filter.
//!
//! Each step turns the current moment set into a quadrature rule, pushes the
//! rule through the one-step conditional moments (prediction), reweights the
//! predicted rule by the measurement density (update), and re-standardizes
//! the result around its mean with per-coordinate standard deviations.
//! Numerical failures end the run with a recorded [`DivergenceReason`].

use std::fmt;

use crate::error::Error;
use crate::momentspace::MomentSet;
use crate::quadrature::{cholesky_pd, moment_quadrature_with, QuadratureOptions, QuadratureRule, Repair};
use crate::transition::ConditionalMoments;

/// `p(y | x)` through its logarithm.
pub trait MeasurementModel: Sync {
    fn obs_dim(&self) -> usize;
    fn log_density(&self, y: &[f64], x: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub repair: Repair,
    /// Recompute a prediction with the transition's fallback scheme when the
    /// predicted Gram matrix is not positive definite.
    pub em_fallback: bool,
    pub weight_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            repair: Repair::FailFast,
            em_fallback: true,
            weight_threshold: 0.0,
        }
    }
}

impl FilterConfig {
    fn quadrature(&self) -> QuadratureOptions {
        QuadratureOptions {
            repair: self.repair,
            weight_threshold: self.weight_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Predict,
    Update,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Predict => "predict",
            Stage::Update => "update",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DivergenceReason {
    NotPositiveDefinite { stage: Stage, pivot: usize },
    NonpositiveNormalizer { value: f64 },
    NonFinite { stage: Stage, detail: String },
    InvalidMoments { stage: Stage, detail: String },
}

impl DivergenceReason {
    fn from_error(stage: Stage, e: Error) -> Self {
        match e {
            Error::NotPositiveDefinite { pivot, .. } => DivergenceReason::NotPositiveDefinite { stage, pivot },
            Error::NonFinite(detail) => DivergenceReason::NonFinite { stage, detail },
            other => DivergenceReason::InvalidMoments {
                stage,
                detail: other.to_string(),
            },
        }
    }

    /// Short machine-readable label.
    pub fn kind(&self) -> &'static str {
        match self {
            DivergenceReason::NotPositiveDefinite { .. } => "not_positive_definite",
            DivergenceReason::NonpositiveNormalizer { .. } => "nonpositive_normalizer",
            DivergenceReason::NonFinite { .. } => "non_finite",
            DivergenceReason::InvalidMoments { .. } => "invalid_moments",
        }
    }
}

impl fmt::Display for DivergenceReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DivergenceReason::NotPositiveDefinite { stage, pivot } => {
                write!(f, "{stage}: Gram matrix not positive definite at pivot {pivot}")
            }
            DivergenceReason::NonpositiveNormalizer { value } => {
                write!(f, "update: nonpositive normalizer {value:e}")
            }
            DivergenceReason::NonFinite { stage, detail } => write!(f, "{stage}: non-finite {detail}"),
            DivergenceReason::InvalidMoments { stage, detail } => write!(f, "{stage}: {detail}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub k: usize,
    pub t: f64,
    pub predicted: MomentSet,
    pub updated: MomentSet,
    /// `log ĥ_k`.
    pub log_normalizer: f64,
    /// The prediction was recomputed with the fallback scheme.
    pub used_fallback: bool,
}

impl FilterStep {
    pub fn likelihood_increment(&self) -> f64 {
        self.log_normalizer.exp()
    }

    pub fn nll_increment(&self) -> f64 {
        -self.log_normalizer
    }

    pub fn mean(&self) -> Vec<f64> {
        self.updated.mean()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.updated.variances()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterTrajectory {
    pub steps: Vec<FilterStep>,
    /// `-Σ log ĥ_k` over the completed steps.
    pub nll: f64,
    pub diverged_at: Option<usize>,
    pub divergence: Option<DivergenceReason>,
}

impl FilterTrajectory {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn fallback_count(&self) -> usize {
        self.steps.iter().filter(|s| s.used_fallback).count()
    }
}

fn rule_for(m: &MomentSet, config: &FilterConfig, stage: Stage) -> Result<QuadratureRule, DivergenceReason> {
    moment_quadrature_with(m, &config.quadrature()).map_err(|e| DivergenceReason::from_error(stage, e))
}

fn propagate(
    prev: &MomentSet,
    rule: &QuadratureRule,
    transition: &dyn ConditionalMoments,
    dt: f64,
) -> Result<MomentSet, DivergenceReason> {
    let layout = prev.layout();
    let mut acc = vec![0.0; layout.len()];
    let mut buf = vec![0.0; layout.len()];
    for (x, w) in rule.nodes().zip(rule.weights()) {
        transition
            .moments_in_frame(x, dt, prev.center(), prev.scale(), layout, &mut buf)
            .map_err(|e| DivergenceReason::from_error(Stage::Predict, e))?;
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += w * b;
        }
    }
    MomentSet::with_frame(
        prev.dim(),
        prev.order(),
        acc,
        prev.center().to_vec(),
        prev.scale().to_vec(),
    )
    .and_then(|m| m.standardize_at_mean())
    .map_err(|e| DivergenceReason::from_error(Stage::Predict, e))
}

/// Chapman–Kolmogorov step: `m̄_n = Σ_q w_q E[X^n | λ_q]`, returned in the
/// frame of its own mean and standard deviations. The flag reports whether
/// the fallback scheme was used.
pub fn predict_moments(
    prev: &MomentSet,
    transition: &dyn ConditionalMoments,
    dt: f64,
    config: &FilterConfig,
) -> Result<(MomentSet, bool), DivergenceReason> {
    let rule = rule_for(prev, config, Stage::Predict)?;
    let primary = propagate(prev, &rule, transition, dt);
    if !config.em_fallback {
        return primary.map(|m| (m, false));
    }
    let needs_fallback = match &primary {
        Ok(m) => cholesky_pd(&crate::momentspace::build_gram(m).0).is_err(),
        Err(_) => true,
    };
    if needs_fallback {
        if let Some(fb) = transition.fallback() {
            log::debug!("prediction falls back to the secondary scheme");
            return propagate(prev, &rule, fb.as_ref(), dt).map(|m| (m, true));
        }
    }
    primary.map(|m| (m, false))
}

/// Bayes step: reweights the predicted rule by `p(y | λ)`. Returns the
/// updated moments and `log ĥ`.
pub fn update_moments(
    pred: &MomentSet,
    y: &[f64],
    meas: &dyn MeasurementModel,
    config: &FilterConfig,
) -> Result<(MomentSet, f64), DivergenceReason> {
    let rule = rule_for(pred, config, Stage::Update)?;
    let logs: Vec<f64> = rule.nodes().map(|x| meas.log_density(y, x)).collect();
    if logs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(DivergenceReason::NonFinite {
            stage: Stage::Update,
            detail: "log-likelihood".into(),
        });
    }
    let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Err(DivergenceReason::NonpositiveNormalizer { value: 0.0 });
    }
    let layout = pred.layout();
    let (c, s) = (pred.center(), pred.scale());
    let d = pred.dim();
    let mut acc = vec![0.0; layout.len()];
    let mut mono = vec![0.0; layout.len()];
    let mut u = vec![0.0; d];
    let mut h = 0.0;
    for ((x, w), l) in rule.nodes().zip(rule.weights()).zip(&logs) {
        let p = w * (l - shift).exp();
        h += p;
        for i in 0..d {
            u[i] = (x[i] - c[i]) / s[i];
        }
        layout.monomials_into(&u, &mut mono);
        for (a, m) in acc.iter_mut().zip(&mono) {
            *a += p * m;
        }
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(DivergenceReason::NonpositiveNormalizer { value: h });
    }
    acc.iter_mut().for_each(|a| *a /= h);
    let updated = MomentSet::with_frame(d, pred.order(), acc, c.to_vec(), s.to_vec())
        .and_then(|m| m.standardize_at_mean())
        .map_err(|e| DivergenceReason::from_error(Stage::Update, e))?;
    Ok((updated, h.ln() + shift))
}

/// Runs the filter over `ys`, where `times[0]` is the time of `m0` and
/// `times[k]` the time of `ys[k - 1]`.
pub fn run_moment_filter(
    transition: &dyn ConditionalMoments,
    meas: &dyn MeasurementModel,
    ys: &[Vec<f64>],
    times: &[f64],
    m0: &MomentSet,
    config: &FilterConfig,
) -> crate::error::Result<FilterTrajectory> {
    if times.len() != ys.len() + 1 {
        return Err(Error::DimensionMismatch {
            expected: ys.len() + 1,
            found: times.len(),
        });
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("times must be strictly increasing".into()));
    }
    if transition.dim() != m0.dim() {
        return Err(Error::DimensionMismatch {
            expected: m0.dim(),
            found: transition.dim(),
        });
    }
    let mut traj = FilterTrajectory::default();
    let mut current = match m0.standardize_at_mean() {
        Ok(m) => m,
        Err(e) => {
            traj.diverged_at = Some(0);
            traj.divergence = Some(DivergenceReason::from_error(Stage::Predict, e));
            return Ok(traj);
        }
    };
    for (k, y) in ys.iter().enumerate().map(|(i, y)| (i + 1, y)) {
        let dt = times[k] - times[k - 1];
        let step = predict_moments(&current, transition, dt, config)
            .and_then(|(pred, fb)| update_moments(&pred, y, meas, config).map(|(upd, log_h)| (pred, upd, log_h, fb)));
        match step {
            Ok((predicted, updated, log_normalizer, used_fallback)) => {
                traj.nll -= log_normalizer;
                current = updated.clone();
                traj.steps.push(FilterStep {
                    k,
                    t: times[k],
                    predicted,
                    updated,
                    log_normalizer,
                    used_fallback,
                });
            }
            Err(reason) => {
                log::debug!("moment filter diverged at step {k}: {reason}");
                traj.diverged_at = Some(k);
                traj.divergence = Some(reason);
                break;
            }
        }
    }
    Ok(traj)
}

/// NLL of a run, or `f64::MAX` when the run diverges or cannot start.
pub fn nll_objective(
    transition: &dyn ConditionalMoments,
    meas: &dyn MeasurementModel,
    ys: &[Vec<f64>],
    times: &[f64],
    m0: &MomentSet,
    config: &FilterConfig,
) -> f64 {
    match run_moment_filter(transition, meas, ys, times, m0, config) {
        Ok(t) if !t.diverged() && t.nll.is_finite() => t.nll,
        _ => f64::MAX,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transition::{GaussianTransition, Scalar, Sde, SdeTransition, TransitionConfig};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    struct Linear {
        rate: f64,
        noise: f64,
    }

    impl Sde for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn drift<T: Scalar>(&self, x: &[T]) -> Vec<T> {
            vec![x[0].clone() * -self.rate]
        }
        fn dispersion<T: Scalar>(&self, x: &[T]) -> Vec<T> {
            vec![x[0].constant_like(self.noise)]
        }
    }

    struct GaussianObs {
        var: f64,
        scale: f64,
    }

    impl MeasurementModel for GaussianObs {
        fn obs_dim(&self) -> usize {
            1
        }
        fn log_density(&self, y: &[f64], x: &[f64]) -> f64 {
            let r = y[0] - x[0];
            self.scale.ln() - 0.5 * r * r / self.var - 0.5 * (2.0 * std::f64::consts::PI * self.var).ln()
        }
    }

    struct ConstantObs(f64);

    impl MeasurementModel for ConstantObs {
        fn obs_dim(&self) -> usize {
            1
        }
        fn log_density(&self, _: &[f64], _: &[f64]) -> f64 {
            self.0.ln()
        }
    }

    fn normal(mean: f64, var: f64, order: usize) -> MomentSet {
        let m = crate::transition::gaussian_moments(&[mean], &DMatrix::from_element(1, 1, var), 2 * order - 1).unwrap();
        MomentSet::new(1, order, m).unwrap()
    }

    #[test]
    fn dirac_prior_single_node() {
        let model = Linear { rate: 2.0, noise: 0.0 };
        let t = SdeTransition::new(&model, TransitionConfig::euler_maruyama()).unwrap();
        // a degenerate prior needs the one-point rule
        let prior = MomentSet::new(1, 1, vec![1.0, 0.7]).unwrap();
        let rule = moment_quadrature_with(&prior, &QuadratureOptions::default()).unwrap();
        let layout = prior.layout();
        let mut out = vec![0.0; layout.len()];
        t.moments_in_frame(rule.node(0), 0.1, &[0.0], &[1.0], layout, &mut out)
            .unwrap();
        assert_abs_diff_eq!(out[1], 0.7 - 2.0 * 0.7 * 0.1, epsilon = 1e-15);
    }

    #[test]
    fn em_prediction_matches_discretized_kalman() {
        let model = Linear {
            rate: 1.0,
            noise: 0.5f64.sqrt(),
        };
        let t = SdeTransition::new(&model, TransitionConfig::euler_maruyama()).unwrap();
        let (m, p, dt) = (0.3, 0.4, 0.1);
        let prior = normal(m, p, 4).standardize_at_mean().unwrap();
        let (pred, fb) = predict_moments(&prior, &t, dt, &FilterConfig::default()).unwrap();
        assert!(!fb);
        let f = 1.0 - dt;
        assert_abs_diff_eq!(pred.mean()[0], f * m, epsilon = 1e-8);
        assert_abs_diff_eq!(pred.variances()[0], f * f * p + 0.5 * dt, epsilon = 1e-8);
    }

    #[test]
    fn zero_step_prediction_is_identity() {
        let model = Linear { rate: 1.0, noise: 1.0 };
        let t = SdeTransition::new(&model, TransitionConfig::tme(3)).unwrap();
        let prior = normal(-0.2, 0.7, 5).standardize_at_mean().unwrap();
        let (pred, _) = predict_moments(&prior, &t, 0.0, &FilterConfig::default()).unwrap();
        let (a, b) = (pred.to_raw().unwrap(), prior.to_raw().unwrap());
        for (u, v) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(*u, *v, epsilon = 1e-10 * v.abs().max(1.0));
        }
    }

    #[test]
    fn constant_likelihood_update() {
        let pred = normal(0.5, 2.0, 4).standardize_at_mean().unwrap();
        let (upd, log_h) = update_moments(&pred, &[0.0], &ConstantObs(0.3), &FilterConfig::default()).unwrap();
        assert_abs_diff_eq!(log_h, 0.3f64.ln(), epsilon = 1e-14);
        for (u, v) in upd.values().iter().zip(pred.values()) {
            assert_abs_diff_eq!(*u, *v, epsilon = 1e-9 * v.abs().max(1.0));
        }
    }

    #[test]
    fn conjugate_gaussian_update() {
        let pred = normal(0.0, 1.0, 8);
        let (upd, _) = update_moments(
            &pred,
            &[0.0],
            &GaussianObs { var: 1.0, scale: 1.0 },
            &FilterConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(upd.mean()[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(upd.values()[0], 1.0, epsilon = 1e-10);
        // An 8-node rule for N(0, 1) reweighted by exp(-x²/2) gives 0.50221138896441
        // (numpy hermegauss); the conjugate value 0.5 is reached as N grows.
        assert_abs_diff_eq!(upd.variances()[0], 0.502_211_388_964_41, epsilon = 1e-10);
        let mut prev_err = f64::INFINITY;
        for n in [8, 10, 12, 14] {
            let (upd, _) = update_moments(
                &normal(0.0, 1.0, n),
                &[0.0],
                &GaussianObs { var: 1.0, scale: 1.0 },
                &FilterConfig::default(),
            )
            .unwrap();
            let err = (upd.variances()[0] - 0.5).abs();
            assert!(err < prev_err);
            prev_err = err;
        }
        assert!(prev_err < 1e-5);
    }

    #[test]
    fn likelihood_scaling_invariance() {
        let pred = normal(0.4, 0.6, 6).standardize_at_mean().unwrap();
        let cfg = FilterConfig::default();
        let (a, la) = update_moments(&pred, &[1.2], &GaussianObs { var: 0.5, scale: 1.0 }, &cfg).unwrap();
        let (b, lb) = update_moments(&pred, &[1.2], &GaussianObs { var: 0.5, scale: 7.5 }, &cfg).unwrap();
        assert_abs_diff_eq!(lb - la, 7.5f64.ln(), epsilon = 1e-12);
        for (u, v) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(*u, *v, epsilon = 1e-12 * v.abs().max(1.0));
        }
        assert_abs_diff_eq!(a.center()[0], b.center()[0], epsilon = 1e-14);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let model = Linear { rate: 1.0, noise: 1.0 };
        let t = SdeTransition::new(&model, TransitionConfig::tme(3)).unwrap();
        let m0 = normal(0.0, 1.0, 3);
        let obs = ConstantObs(1.0);
        let cfg = FilterConfig::default();
        let traj = run_moment_filter(&t, &obs, &[], &[0.0], &m0, &cfg).unwrap();
        assert!(traj.steps.is_empty());
        assert_eq!(traj.nll, 0.0);
        assert!(run_moment_filter(&t, &obs, &[vec![0.0]], &[0.0, 0.0], &m0, &cfg).is_err());
        assert!(run_moment_filter(&t, &obs, &[vec![0.0]], &[0.0], &m0, &cfg).is_err());
    }

    #[test]
    fn singular_gram_mid_run_is_recorded() {
        // the second step collapses the law onto two points, so an order-3
        // rule no longer exists
        let collapse = GaussianTransition::new(1, |x: &[f64], _dt: f64| {
            let target = if x[0] < 0.0 { -1.0 } else { 1.0 };
            (vec![target], DMatrix::zeros(1, 1))
        });
        let m0 = normal(0.0, 1.0, 3);
        let obs = ConstantObs(1.0);
        let cfg = FilterConfig::default();
        let ys = vec![vec![0.0]; 3];
        let traj = run_moment_filter(&collapse, &obs, &ys, &[0.0, 1.0, 2.0, 3.0], &m0, &cfg).unwrap();
        assert!(traj.diverged());
        assert!(matches!(
            traj.divergence,
            Some(DivergenceReason::NotPositiveDefinite { .. })
        ));
        assert!(traj.nll.is_finite());
        for s in &traj.steps {
            assert!(s.updated.values().iter().all(|v| v.is_finite()));
        }
        let obj = nll_objective(&collapse, &obs, &ys, &[0.0, 1.0, 2.0, 3.0], &m0, &cfg);
        assert_eq!(obj, f64::MAX);
    }

    #[test]
    fn zero_likelihood_everywhere_diverges() {
        struct Impossible;
        impl MeasurementModel for Impossible {
            fn obs_dim(&self) -> usize {
                1
            }
            fn log_density(&self, _: &[f64], _: &[f64]) -> f64 {
                f64::NEG_INFINITY
            }
        }
        let pred = normal(0.0, 1.0, 3);
        let r = update_moments(&pred, &[0.0], &Impossible, &FilterConfig::default());
        assert!(matches!(r, Err(DivergenceReason::NonpositiveNormalizer { .. })));
    }

    #[test]
    fn zeroth_moment_stays_one() {
        let model = Linear { rate: 1.0, noise: 0.7 };
        let t = SdeTransition::new(&model, TransitionConfig::tme(3)).unwrap();
        let m0 = normal(0.0, 0.25, 6);
        let ys: Vec<Vec<f64>> = (0..30).map(|k| vec![(k as f64 * 0.7).sin()]).collect();
        let times: Vec<f64> = (0..=30).map(|k| k as f64 * 0.1).collect();
        let traj = run_moment_filter(
            &t,
            &GaussianObs { var: 1.0, scale: 1.0 },
            &ys,
            &times,
            &m0,
            &FilterConfig::default(),
        )
        .unwrap();
        assert!(!traj.diverged());
        assert_eq!(traj.steps.len(), 30);
        let total: f64 = traj.steps.iter().map(|s| s.nll_increment()).sum();
        assert_abs_diff_eq!(total, traj.nll, epsilon = 1e-12);
        for s in &traj.steps {
            assert!((s.updated.values()[0] - 1.0).abs() <= 1e-10);
            assert!(s.likelihood_increment() > 0.0);
        }
    }
}
