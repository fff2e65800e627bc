//! Monte Carlo experiments: simulate, filter with every configured
//! estimator, score against the designated truth, write results.

use std::path::Path;
use std::time::Instant;

use moment_filter::baselines::{
    bootstrap_pf, gauss_hermite_filter, grid_reference_filter, kalman_ou, GaussianBelief, GridSpec, GridTrajectory,
    Proposal,
};
use moment_filter::filter::run_moment_filter;
use moment_filter::models::{
    char_fn_from_moments, char_fn_from_rule, char_fn_gaussian, rng_for, simulate_with_rng, z_grid, BenchmarkModel,
    Dataset,
};
use moment_filter::momentspace::MomentSetJson;
use moment_filter::quadrature::moment_quadrature;
use moment_filter::transition::{ConditionalMoments, Sde, SdeTransition};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Format, GridConfig, ProposalName, SCHEMA_VERSION};
use crate::io;

/// The transition selected by the config, boxed.
pub fn build_transition<'a>(
    cfg: &ExperimentConfig,
    model: &'a BenchmarkModel,
) -> moment_filter::Result<Box<dyn ConditionalMoments + 'a>> {
    match cfg.transition.sde_config() {
        Some(tc) => Ok(Box::new(SdeTransition::new(model, tc)?)),
        None => model
            .exact_transition()
            .map(|t| Box::new(t) as Box<dyn ConditionalMoments>)
            .ok_or_else(|| moment_filter::Error::InvalidArgument(format!("no exact transition for {}", model.name()))),
    }
}

/// Simulation RNG stream of run `run`; particle filters use `2 * run + 1`.
pub fn simulate_run(cfg: &ExperimentConfig, model: &BenchmarkModel, run: usize) -> moment_filter::Result<Dataset> {
    let mut rng = rng_for(cfg.mc.seed, 2 * run as u64);
    simulate_with_rng(model, &cfg.times(model), cfg.simulation.substeps, &mut rng)
}

/// JSON sidecar of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetInfo<'a> {
    pub schema_version: u32,
    pub model: &'a BenchmarkModel,
    pub seed: u64,
    pub run: usize,
    /// Stream index of the simulation RNG under `seed`.
    pub stream: u64,
    pub substeps: usize,
}

/// Writes `data_XXXX.csv` and its `data_XXXX.json` sidecar.
pub fn write_dataset(
    cfg: &ExperimentConfig,
    dir: &Path,
    model: &BenchmarkModel,
    run: usize,
    data: &Dataset,
) -> anyhow::Result<()> {
    io::write_dataset_csv(&dir.join(format!("data_{run:04}.csv")), data)?;
    let info = DatasetInfo {
        schema_version: SCHEMA_VERSION,
        model,
        seed: cfg.mc.seed,
        run,
        stream: 2 * run as u64,
        substeps: cfg.simulation.substeps,
    };
    io::write_json(&dir.join(format!("data_{run:04}.json")), &info)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub nll_increment: f64,
    pub error: f64,
}

/// One estimator's output on one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorRun {
    /// One of `mf`, `kalman`, `ghf`, `pf`, `grid`.
    pub kind: &'static str,
    /// Moment order, GH order or particle count; 0 when not applicable.
    pub param: usize,
    pub steps: Vec<StepRecord>,
    pub nll: f64,
    pub diverged_at: Option<usize>,
    pub divergence: Option<String>,
    pub fallbacks: usize,
    pub seconds: f64,
    #[serde(skip)]
    pub moments: Vec<MomentSetJson>,
}

impl EstimatorRun {
    fn new(kind: &'static str, param: usize) -> Self {
        EstimatorRun {
            kind,
            param,
            steps: Vec::new(),
            nll: 0.0,
            diverged_at: None,
            divergence: None,
            fallbacks: 0,
            seconds: 0.0,
            moments: Vec::new(),
        }
    }

    pub fn label(&self) -> String {
        label(self.kind, self.param)
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Mean per-step error over completed steps.
    pub fn time_averaged_error(&self) -> Option<f64> {
        if self.steps.is_empty() {
            return None;
        }
        Some(self.steps.iter().map(|s| s.error).sum::<f64>() / self.steps.len() as f64)
    }
}

fn label(kind: &str, param: usize) -> String {
    match kind {
        "mf" => format!("mf_N{param}"),
        "ghf" => format!("ghf_{param}"),
        "pf" => format!("pf_{param}"),
        other => other.to_string(),
    }
}

/// Reference solution a run is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// Filtering-mean error against the exact Kalman filter.
    Kalman,
    /// Characteristic-function sup error against the grid filter.
    Grid,
    /// `‖x(t_k) − mean_k‖₁` against the simulated state.
    State,
}

pub fn truth_for(model: &BenchmarkModel) -> Truth {
    match model {
        BenchmarkModel::Ou { .. } => Truth::Kalman,
        m if m.dim() == 1 => Truth::Grid,
        _ => Truth::State,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub run: usize,
    pub truth_nll: Option<f64>,
    pub estimators: Vec<EstimatorRun>,
}

enum Reference {
    Kalman(Vec<f64>),
    Grid { zs: Vec<f64>, phis: Vec<Vec<Complex64>> },
    State(Vec<Vec<f64>>),
}

impl Reference {
    fn mean_error(&self, k: usize, mean: &[f64]) -> f64 {
        match self {
            Reference::Kalman(m) => (m[k - 1] - mean[0]).abs(),
            Reference::State(x) => x[k].iter().zip(mean).map(|(a, b)| (a - b).abs()).sum(),
            Reference::Grid { .. } => f64::NAN,
        }
    }

    // Sup over the z grid of |φ_true(z) − φ(z)| at step k.
    fn cf_error(&self, k: usize, phi: impl Fn(f64) -> Complex64) -> Option<f64> {
        match self {
            Reference::Grid { zs, phis } => Some(
                zs.iter()
                    .zip(&phis[k - 1])
                    .map(|(&z, p)| (p - phi(z)).norm())
                    .fold(0.0, f64::max),
            ),
            _ => None,
        }
    }
}

fn grid_spec(g: &GridConfig) -> GridSpec {
    GridSpec {
        lower: g.lower,
        upper: g.upper,
        points: g.points,
        em_substeps: g.em_substeps,
    }
}

fn gaussian_prior(model: &BenchmarkModel) -> GaussianBelief {
    let init = model.initial();
    GaussianBelief {
        mean: init.mean(),
        covariance: init.covariance(),
    }
}

fn grid_run(
    cfg: &ExperimentConfig,
    model: &BenchmarkModel,
    transition: &dyn ConditionalMoments,
    data: &Dataset,
) -> Result<(GridTrajectory, f64), String> {
    let spec = grid_spec(&cfg.estimators.grid.unwrap_or_default());
    let start = Instant::now();
    let g = grid_reference_filter(model, transition, model, &data.ys, &data.times, &model.initial(), &spec)
        .map_err(|e| e.to_string())?;
    Ok((g, start.elapsed().as_secs_f64()))
}

/// Runs every configured estimator on MC run `run`.
pub fn run_single(cfg: &ExperimentConfig, run: usize) -> anyhow::Result<(Dataset, RunResult)> {
    let model = cfg.build_model()?;
    let data = simulate_run(cfg, &model, run)?;
    let transition = build_transition(cfg, &model)?;
    let d = model.dim();
    let truth = truth_for(&model);
    let noise_var = 1.0;

    let mut estimators = Vec::new();
    let mut truth_nll = None;
    let reference = match truth {
        Truth::Kalman => {
            let BenchmarkModel::Ou { ell, sigma } = model else {
                unreachable!()
            };
            let start = Instant::now();
            let k = kalman_ou(ell, sigma, cfg.dt(&model), &data.ys, noise_var)?;
            let seconds = start.elapsed().as_secs_f64();
            truth_nll = Some(k.nll);
            let means: Vec<f64> = k.beliefs.iter().map(|b| b.mean[0]).collect();
            if cfg.estimators.kalman {
                let mut e = EstimatorRun::new("kalman", 0);
                e.seconds = seconds;
                e.nll = k.nll;
                for (i, b) in k.beliefs.iter().enumerate() {
                    e.steps.push(StepRecord {
                        k: i + 1,
                        t: data.times[i + 1],
                        mean: b.mean.clone(),
                        var: vec![b.covariance[(0, 0)]],
                        nll_increment: -k.log_normalizers[i],
                        error: 0.0,
                    });
                }
                estimators.push(e);
            }
            Reference::Kalman(means)
        }
        Truth::Grid => {
            let (g, seconds) = grid_run(cfg, &model, transition.as_ref(), &data)
                .map_err(|e| anyhow::anyhow!("grid reference failed: {e}"))?;
            truth_nll = Some(g.nll);
            let zs = z_grid(cfg.metrics.z_max, cfg.metrics.z_points);
            let phis = g
                .densities
                .iter()
                .map(|dens| zs.iter().map(|&z| dens.char_fn(z)).collect())
                .collect();
            if cfg.estimators.grid.is_some() {
                let mut e = EstimatorRun::new("grid", 0);
                e.seconds = seconds;
                e.nll = g.nll;
                for (i, dens) in g.densities.iter().enumerate() {
                    e.steps.push(StepRecord {
                        k: i + 1,
                        t: data.times[i + 1],
                        mean: vec![dens.mean()],
                        var: vec![dens.variance()],
                        nll_increment: -g.log_normalizers[i],
                        error: 0.0,
                    });
                }
                estimators.push(e);
            }
            Reference::Grid { zs, phis }
        }
        Truth::State => Reference::State(data.states.clone()),
    };

    let fcfg = cfg.filter.filter_config();
    for &n in cfg.estimators.mf.iter().flat_map(|m| &m.orders) {
        let mut e = EstimatorRun::new("mf", n);
        let m0 = model.initial_moments(n)?;
        let start = Instant::now();
        let traj = run_moment_filter(transition.as_ref(), &model, &data.ys, &data.times, &m0, &fcfg)?;
        e.seconds = start.elapsed().as_secs_f64();
        e.nll = traj.nll;
        e.diverged_at = traj.diverged_at;
        e.divergence = traj.divergence.as_ref().map(|r| r.to_string());
        e.fallbacks = traj.fallback_count();
        for s in &traj.steps {
            let mean = s.mean();
            let rule = moment_quadrature(&s.updated).ok();
            let error = reference
                .cf_error(s.k, |z| match &rule {
                    Some(r) => char_fn_from_rule(r, z),
                    None => char_fn_from_moments(&s.updated, z),
                })
                .unwrap_or_else(|| reference.mean_error(s.k, &mean));
            e.steps.push(StepRecord {
                k: s.k,
                t: s.t,
                mean,
                var: s.variances(),
                nll_increment: s.nll_increment(),
                error,
            });
            if cfg.output.moments_json {
                e.moments.push(s.updated.to_json());
            }
        }
        estimators.push(e);
    }

    if let Some(g) = &cfg.estimators.ghf {
        let mut e = EstimatorRun::new("ghf", g.order);
        let start = Instant::now();
        let traj = gauss_hermite_filter(
            transition.as_ref(),
            &model,
            &data.ys,
            &data.times,
            &gaussian_prior(&model),
            g.order,
        )?;
        e.seconds = start.elapsed().as_secs_f64();
        e.nll = traj.nll;
        e.diverged_at = traj.diverged_at;
        e.divergence = traj.divergence.clone();
        for (i, b) in traj.beliefs.iter().enumerate() {
            let k = i + 1;
            let var: Vec<f64> = (0..d).map(|j| b.covariance[(j, j)]).collect();
            let error = reference
                .cf_error(k, |z| char_fn_gaussian(b.mean[0], var[0], z))
                .unwrap_or_else(|| reference.mean_error(k, &b.mean));
            e.steps.push(StepRecord {
                k,
                t: data.times[k],
                mean: b.mean.clone(),
                var,
                nll_increment: -traj.log_normalizers[i],
                error,
            });
        }
        estimators.push(e);
    }

    if let Some(p) = &cfg.estimators.pf {
        let mut e = EstimatorRun::new("pf", p.particles);
        let proposal = match (p.proposal, &model) {
            (ProposalName::Optimal, &BenchmarkModel::Ou { ell, sigma }) => {
                Proposal::LinearGaussianOptimal { ell, sigma, noise_var }
            }
            _ => Proposal::Bootstrap { substeps: p.substeps },
        };
        let mut rng = rng_for(cfg.mc.seed, 2 * run as u64 + 1);
        let mut errors = Vec::with_capacity(data.ys.len());
        let mut scoring = 0.0;
        let start = Instant::now();
        let traj = bootstrap_pf(
            &model,
            &model,
            &data.ys,
            &data.times,
            &model.initial(),
            p.particles,
            proposal,
            &mut rng,
            |k, ens| {
                let t = Instant::now();
                let err = reference
                    .cf_error(k, |z| ens.char_fn(z))
                    .unwrap_or_else(|| reference.mean_error(k, &ens.mean()));
                errors.push(err);
                scoring += t.elapsed().as_secs_f64();
            },
        )?;
        e.seconds = start.elapsed().as_secs_f64() - scoring;
        e.nll = traj.nll;
        e.diverged_at = traj.diverged_at;
        if traj.diverged_at.is_some() {
            e.divergence = Some("all particle weights are zero".into());
        }
        for (i, ((m, v), err)) in traj.means.iter().zip(&traj.variances).zip(&errors).enumerate() {
            e.steps.push(StepRecord {
                k: i + 1,
                t: data.times[i + 1],
                mean: m.clone(),
                var: v.clone(),
                nll_increment: -traj.log_normalizers[i],
                error: *err,
            });
        }
        estimators.push(e);
    }

    if truth != Truth::Grid && cfg.estimators.grid.is_some() {
        let mut e = EstimatorRun::new("grid", 0);
        match grid_run(cfg, &model, transition.as_ref(), &data) {
            Ok((g, seconds)) => {
                e.seconds = seconds;
                e.nll = g.nll;
                for (i, dens) in g.densities.iter().enumerate() {
                    let mean = vec![dens.mean()];
                    e.steps.push(StepRecord {
                        k: i + 1,
                        t: data.times[i + 1],
                        error: reference.mean_error(i + 1, &mean),
                        mean,
                        var: vec![dens.variance()],
                        nll_increment: -g.log_normalizers[i],
                    });
                }
            }
            Err(msg) => {
                e.diverged_at = Some(1);
                e.divergence = Some(msg);
            }
        }
        estimators.push(e);
    }
    Ok((
        data,
        RunResult {
            run,
            truth_nll,
            estimators,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q05: f64,
    pub q25: f64,
    pub q75: f64,
    pub q95: f64,
    pub min: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Stats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(&v, 0.5),
            q05: quantile(&v, 0.05),
            q25: quantile(&v, 0.25),
            q75: quantile(&v, 0.75),
            q95: quantile(&v, 0.95),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub kind: String,
    pub param: usize,
    pub runs: usize,
    pub divergences: usize,
    pub fallbacks: usize,
    /// Time-averaged error per non-divergent run.
    pub error: Option<Stats>,
    pub nll: Option<Stats>,
    /// `|nll − nll_truth| / steps` per non-divergent run, when the truth has a likelihood.
    pub nll_gap_per_step: Option<Stats>,
    pub wall_clock_seconds: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub model: BenchmarkModel,
    pub truth: Truth,
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorSummary>,
}

pub fn summarize(cfg: &ExperimentConfig, model: &BenchmarkModel, results: &[RunResult]) -> Summary {
    let mut labels: Vec<(String, &'static str, usize)> = Vec::new();
    for r in results {
        for e in &r.estimators {
            if !labels.iter().any(|(l, _, _)| *l == e.label()) {
                labels.push((e.label(), e.kind, e.param));
            }
        }
    }
    let steps = cfg.time.steps as f64;
    let estimators = labels
        .into_iter()
        .map(|(lab, kind, param)| {
            let runs: Vec<(&RunResult, &EstimatorRun)> = results
                .iter()
                .flat_map(|r| r.estimators.iter().filter(|e| e.label() == lab).map(move |e| (r, e)))
                .collect();
            let ok: Vec<&(&RunResult, &EstimatorRun)> = runs.iter().filter(|(_, e)| !e.diverged()).collect();
            let errors: Vec<f64> = ok.iter().filter_map(|(_, e)| e.time_averaged_error()).collect();
            let nlls: Vec<f64> = ok.iter().map(|(_, e)| e.nll).collect();
            let gaps: Vec<f64> = ok
                .iter()
                .filter_map(|(r, e)| r.truth_nll.map(|t| (e.nll - t).abs() / steps))
                .collect();
            let secs: Vec<f64> = runs.iter().map(|(_, e)| e.seconds).collect();
            EstimatorSummary {
                label: lab,
                kind: kind.to_string(),
                param,
                runs: runs.len(),
                divergences: runs.iter().filter(|(_, e)| e.diverged()).count(),
                fallbacks: runs.iter().map(|(_, e)| e.fallbacks).sum(),
                error: Stats::of(&errors),
                nll: Stats::of(&nlls),
                nll_gap_per_step: Stats::of(&gaps),
                wall_clock_seconds: Stats::of(&secs).unwrap_or(Stats {
                    count: 0,
                    mean: 0.0,
                    median: 0.0,
                    q05: 0.0,
                    q25: 0.0,
                    q75: 0.0,
                    q95: 0.0,
                    min: 0.0,
                    max: 0.0,
                }),
            }
        })
        .collect();
    Summary {
        schema_version: SCHEMA_VERSION,
        model: model.clone(),
        truth: truth_for(model),
        runs: results.len(),
        steps: cfg.time.steps,
        seed: cfg.mc.seed,
        estimators,
    }
}

pub struct ExperimentOutput {
    pub summary: Summary,
    pub runs: Vec<RunResult>,
}

/// Writes one run's files into `dir`.
pub fn write_run(cfg: &ExperimentConfig, dir: &Path, data: &Dataset, result: &RunResult) -> anyhow::Result<()> {
    if cfg.output.formats.contains(&Format::Csv) {
        io::write_trajectory_csv(
            &dir.join(format!("run_{:04}.csv", result.run)),
            data,
            &result.estimators,
        )?;
    }
    if cfg.output.moments_json {
        for e in result.estimators.iter().filter(|e| !e.moments.is_empty()) {
            io::write_json(
                &dir.join(format!("moments_{:04}_{}.json", result.run, e.label())),
                &e.moments,
            )?;
        }
    }
    Ok(())
}

/// Runs all MC replications on `threads` workers (all cores when `None`),
/// writes per-run CSVs and `summary.json` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> anyhow::Result<ExperimentOutput> {
    let model = cfg.build_model()?;
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()?;
    let runs: Vec<RunResult> = pool.install(|| {
        (0..cfg.mc.runs)
            .into_par_iter()
            .map(|run| {
                let (data, mut result) = run_single(cfg, run)?;
                write_run(cfg, &dir, &data, &result)?;
                result.estimators.iter_mut().for_each(|e| e.moments.clear());
                Ok(result)
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    let summary = summarize(cfg, &model, &runs);
    if cfg.output.formats.contains(&Format::Json) {
        io::write_json(&dir.join("summary.json"), &summary)?;
    }
    log::info!("wrote {} runs to {}", runs.len(), dir.display());
    Ok(ExperimentOutput { summary, runs })
}
