//! Maximum-likelihood parameter estimation with a simplex optimizer over
//! softplus-transformed parameters.

use std::cell::RefCell;
use std::path::Path;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use moment_filter::filter::{nll_objective, FilterConfig};
use moment_filter::models::{softplus, BenchmarkModel, Dataset};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{EstimateConfig, ExperimentConfig, Format, SCHEMA_VERSION};
use crate::experiment::{build_transition, simulate_run, Stats};
use crate::io;

/// Inverse of `softplus` for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    // log(e^y - 1) = y + log(1 - e^{-y})
    y + (-(-y).exp()).ln_1p()
}

/// One objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub eval: usize,
    pub params: Vec<f64>,
    pub nll: f64,
}

struct Likelihood<'a> {
    base: BenchmarkModel,
    names: &'a [String],
    cfg: &'a ExperimentConfig,
    order: usize,
    data: &'a Dataset,
    filter: FilterConfig,
    trace: RefCell<Vec<TracePoint>>,
}

impl Likelihood<'_> {
    fn model_at(&self, theta: &[f64]) -> moment_filter::Result<BenchmarkModel> {
        let mut m = self.base.clone();
        for (n, v) in self.names.iter().zip(theta) {
            m = m.with_param(n, *v)?;
        }
        Ok(m)
    }

    fn nll(&self, theta: &[f64]) -> f64 {
        let Ok(model) = self.model_at(theta) else {
            return f64::MAX;
        };
        let Ok(transition) = build_transition(self.cfg, &model) else {
            return f64::MAX;
        };
        let Ok(m0) = model.initial_moments(self.order) else {
            return f64::MAX;
        };
        nll_objective(
            transition.as_ref(),
            &model,
            &self.data.ys,
            &self.data.times,
            &m0,
            &self.filter,
        )
    }
}

impl CostFunction for Likelihood<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        let theta: Vec<f64> = u.iter().map(|v| softplus(*v)).collect();
        let nll = self.nll(&theta);
        let mut trace = self.trace.borrow_mut();
        let eval = trace.len();
        trace.push(TracePoint {
            eval,
            params: theta,
            nll,
        });
        Ok(nll)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRun {
    pub run: usize,
    pub estimates: Vec<f64>,
    pub nll: f64,
    pub iterations: u64,
    pub diverged: bool,
    pub reason: Option<String>,
    #[serde(skip)]
    pub trace: Vec<TracePoint>,
}

/// Estimates the configured parameters on MC run `run`, starting from `start`
/// (one value per estimated parameter).
pub fn estimate_run_from(cfg: &ExperimentConfig, run: usize, start: &[f64]) -> anyhow::Result<EstimateRun> {
    let est = estimate_section(cfg)?;
    let truth = cfg.build_model()?;
    let data = simulate_run(cfg, &truth, run)?;
    estimate_on_data(cfg, est, &truth, &data, run, start)
}

/// Estimates on MC run `run` from the configured initial value.
pub fn estimate_run(cfg: &ExperimentConfig, run: usize) -> anyhow::Result<EstimateRun> {
    let est = estimate_section(cfg)?;
    estimate_run_from(cfg, run, &vec![est.initial; est.params.len()])
}

fn estimate_section(cfg: &ExperimentConfig) -> anyhow::Result<&EstimateConfig> {
    cfg.estimate
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("config has no [estimate] section"))
}

fn estimate_on_data(
    cfg: &ExperimentConfig,
    est: &EstimateConfig,
    base: &BenchmarkModel,
    data: &Dataset,
    run: usize,
    start: &[f64],
) -> anyhow::Result<EstimateRun> {
    anyhow::ensure!(start.len() == est.params.len(), "need one start value per parameter");
    let problem = Likelihood {
        base: base.clone(),
        names: &est.params,
        cfg,
        order: est.order,
        data,
        filter: cfg.filter.filter_config(),
        trace: RefCell::new(Vec::new()),
    };
    let u0: Vec<f64> = start.iter().map(|v| softplus_inv(*v)).collect();
    let mut simplex = vec![u0.clone()];
    for i in 0..u0.len() {
        let mut v = u0.clone();
        v[i] += 0.5;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(est.tolerance)?;
    let outcome = Executor::new(problem, solver)
        .configure(|s| s.max_iters(est.max_iters))
        .run();
    let (problem, result) = match outcome {
        Ok(res) => {
            let state = res.state();
            let best = state.get_best_param().cloned();
            let cost = state.get_best_cost();
            let iters = state.get_iter();
            (res.problem.problem, Ok((best, cost, iters)))
        }
        Err(e) => (None, Err(e.to_string())),
    };
    let trace = problem.map(|p| p.trace.into_inner()).unwrap_or_default();
    let mut out = EstimateRun {
        run,
        estimates: Vec::new(),
        nll: f64::NAN,
        iterations: 0,
        diverged: true,
        reason: None,
        trace,
    };
    match result {
        Ok((Some(u), cost, iters)) => {
            out.estimates = u.iter().map(|v| softplus(*v)).collect();
            out.nll = cost;
            out.iterations = iters;
            out.reason = if !(cost.is_finite() && cost < f64::MAX) {
                Some("likelihood diverged at the optimum".into())
            } else if out.estimates.iter().any(|v| !(v.is_finite() && *v <= est.threshold)) {
                Some(format!("estimate exceeds threshold {}", est.threshold))
            } else {
                None
            };
        }
        Ok((None, _, _)) => out.reason = Some("optimizer returned no parameters".into()),
        Err(e) => out.reason = Some(format!("optimizer failed: {e}")),
    }
    out.diverged = out.reason.is_some();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateSummary {
    pub schema_version: u32,
    pub model: BenchmarkModel,
    pub params: Vec<String>,
    pub truth: Vec<f64>,
    pub runs: usize,
    pub divergences: usize,
    pub divergence_rate: f64,
    /// Per-parameter statistics over non-divergent runs.
    pub estimates: Vec<Option<Stats>>,
}

pub struct EstimateOutput {
    pub summary: EstimateSummary,
    pub runs: Vec<EstimateRun>,
}

fn write_estimates(dir: &Path, names: &[String], runs: &[EstimateRun]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(dir.join("estimates.csv"))?;
    let header: Vec<String> = ["run", "diverged", "nll", "iterations"]
        .iter()
        .map(|s| s.to_string())
        .chain(names.iter().cloned())
        .collect();
    w.write_record(&header)?;
    for r in runs {
        let mut row = vec![
            r.run.to_string(),
            (r.diverged as u8).to_string(),
            if r.nll.is_finite() {
                r.nll.to_string()
            } else {
                String::new()
            },
            r.iterations.to_string(),
        ];
        row.extend((0..names.len()).map(|i| r.estimates.get(i).map_or(String::new(), |v| v.to_string())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, names: &[String], trace: &[TracePoint]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = std::iter::once("eval".to_string())
        .chain(names.iter().cloned())
        .chain(std::iter::once("nll".to_string()))
        .collect();
    w.write_record(&header)?;
    for t in trace {
        let mut row = vec![t.eval.to_string()];
        row.extend(t.params.iter().map(|v| v.to_string()));
        row.push(if t.nll < f64::MAX {
            t.nll.to_string()
        } else {
            String::new()
        });
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the estimation study over all MC runs and writes `estimates.csv`,
/// per-run `trace_XXXX.csv` and `estimate_summary.json`.
pub fn estimate_parameters(cfg: &ExperimentConfig, threads: Option<usize>) -> anyhow::Result<EstimateOutput> {
    let est = estimate_section(cfg)?;
    let model = cfg.build_model()?;
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()?;
    let runs: Vec<EstimateRun> = pool.install(|| {
        (0..cfg.mc.runs)
            .into_par_iter()
            .map(|run| {
                let mut r = estimate_run(cfg, run)?;
                if cfg.output.formats.contains(&Format::Csv) {
                    write_trace(&dir.join(format!("trace_{run:04}.csv")), &est.params, &r.trace)?;
                }
                r.trace.clear();
                Ok(r)
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    if cfg.output.formats.contains(&Format::Csv) {
        write_estimates(&dir, &est.params, &runs)?;
    }
    let params = model.params();
    let truth = est
        .params
        .iter()
        .map(|n| params[model.param_names().iter().position(|p| p == n).expect("validated")])
        .collect();
    let divergences = runs.iter().filter(|r| r.diverged).count();
    let estimates = (0..est.params.len())
        .map(|i| {
            let v: Vec<f64> = runs.iter().filter(|r| !r.diverged).map(|r| r.estimates[i]).collect();
            Stats::of(&v)
        })
        .collect();
    let summary = EstimateSummary {
        schema_version: SCHEMA_VERSION,
        model,
        params: est.params.clone(),
        truth,
        runs: runs.len(),
        divergences,
        divergence_rate: divergences as f64 / runs.len() as f64,
        estimates,
    };
    if cfg.output.formats.contains(&Format::Json) {
        io::write_json(&dir.join("estimate_summary.json"), &summary)?;
    }
    Ok(EstimateOutput { summary, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-3, 0.1, 1.0, 3.0, 30.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() <= 1e-12 * y.max(1.0), "{y}");
        }
        assert!((softplus_inv(0.1) - (0.1f64.exp() - 1.0).ln()).abs() < 1e-14);
    }
}
