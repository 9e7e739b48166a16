//! Experiment pipelines. Each returns a JSON report and a verdict; files go to
//! the configured output directory.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mimic_core::coeffs::{validate_coefficients, BreakMode, BrokenGenerator, CoefficientModel, ConstantCoefficients, HestonModel};
use mimic_core::geometry::SpaceTimePoint;
use mimic_core::martingale::{
    coordinate_functionals, martingale_increments, martingale_test, strong_markov_restart_test, Probe, RestartConfig,
    TestFunction,
};
use mimic_core::pde::{duality_check_split, no_source, solve_cauchy, solve_terminal_value, DualityConfig, PdeGrid};
use mimic_core::projection::{
    build_mimicking_model, compare_samples, BinningSpec, CoefficientAccumulator, Lattice, MarginalSample,
    MimickedCoefficients, NamedFunctional,
};
use mimic_core::rng::keyed_u64;
use mimic_core::sdesim::{
    for_each_block, simulate_ito_process, simulate_sde, support_check, ItoDriver, ModelDriver, RegimeSwitchingDriver,
    SimConfig, SupportReport, TimeGrid,
};
use mimic_core::stats::{quantile, MeanEstimate};
use mimic_core::Matrix;

use crate::config::{DataSpec, DriverSpec, ExperimentConfig, Kind, ModelSpec, Problem, ProbeSpec, TestFunctionSpec};

pub type Model = Box<dyn CoefficientModel<f64>>;

/// Result of a pipeline: the report written to `report.json` and whether
/// every check passed.
pub struct Outcome {
    pub passed: bool,
    pub report: Value,
}

impl Outcome {
    fn new<R: Serialize>(passed: bool, report: R) -> Result<Self> {
        Ok(Self { passed, report: serde_json::to_value(report)? })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub break_mode: Option<BreakMode>,
    pub threads: Option<usize>,
}

// stream tags for derived seeds
const RESIMULATION: u64 = 0x7e51;
const RESTART: u64 = 0x7e57;

/// Runs the experiment in `config_path`, writing `report.json` and
/// `manifest.json`. Returns the verdict; errors are configuration or I/O
/// problems.
pub fn run_file(config_path: &Path, opts: &RunOptions) -> Result<bool> {
    let bytes = fs::read(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
    let cfg = ExperimentConfig::from_json(text).with_context(|| format!("parsing {}", config_path.display()))?;
    let started = Instant::now();
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let outcome = run(&cfg, opts)?;
    let report = json!({ "kind": cfg.kind, "passed": outcome.passed, "result": outcome.report });
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let manifest = json!({
        "config": config_path.display().to_string(),
        "config_sha256": digest,
        "kind": cfg.kind,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "break_generator": opts.break_mode,
        "timestamp_unix": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "passed": outcome.passed,
    });
    write_json(&cfg.output_dir.join("manifest.json"), &manifest)?;
    Ok(outcome.passed)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let brk = opts.break_mode;
    match cfg.kind {
        Kind::Simulate => simulate(cfg, &broken(build_model(cfg)?, brk)),
        Kind::Validate => validate(cfg, &broken(build_model(cfg)?, brk)),
        Kind::Martingale => martingale(cfg, &build_model(cfg)?, &broken(build_model(cfg)?, brk)),
        Kind::Project => project(cfg, broken(build_model(cfg)?, brk)),
        Kind::Pde => pde(cfg, &broken(build_model(cfg)?, brk)),
        Kind::Duality => duality(cfg, &broken(build_model(cfg)?, brk), &build_model(cfg)?),
        Kind::Restart => restart(cfg, &broken(build_model(cfg)?, brk)),
        Kind::FullMimic => full_mimic(cfg, build_model(cfg)?, brk),
    }
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    Ok(match &cfg.model {
        &ModelSpec::Heston { kappa, theta, zeta, rho, r, q, with_killing } => {
            Box::new(HestonModel::new(kappa, theta, zeta, rho, r, q, with_killing)?)
        }
        ModelSpec::Constant { a, b, c } => {
            let d = b.len();
            let a = Matrix::from_fn(d, |i, j| a[i][j]);
            Box::new(ConstantCoefficients::new(a, b.clone(), *c)?)
        }
        ModelSpec::Gridded { path, fill } => {
            let mc = MimickedCoefficients::load(path).with_context(|| format!("loading {}", path.display()))?;
            if mc.dim != cfg.dim() {
                bail!("gridded model has dimension {}, start point has {}", mc.dim, cfg.dim());
            }
            Box::new(build_mimicking_model(&mc, fill)?)
        }
    })
}

fn broken(model: Model, mode: Option<BreakMode>) -> Model {
    match mode {
        Some(mode) => Box::new(BrokenGenerator { inner: model, mode }),
        None => model,
    }
}

fn start(cfg: &ExperimentConfig) -> Result<SpaceTimePoint<f64>> {
    Ok(SpaceTimePoint::new(0.0, cfg.start_point())?)
}

fn sim_grid(cfg: &ExperimentConfig) -> Result<TimeGrid> {
    Ok(TimeGrid::new(0.0, cfg.simulation.horizon, cfg.simulation.step)?)
}

fn sim_config(cfg: &ExperimentConfig, seed: u64, first: u64, count: usize) -> SimConfig {
    SimConfig::new(count, seed, cfg.simulation.scheme).block(first, count)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

#[derive(Serialize)]
struct SimulateReport {
    support: SupportReport,
    terminal_mean: Vec<MeanEstimate>,
    ensemble_csv: Option<String>,
}

fn simulate(cfg: &ExperimentConfig, model: &Model) -> Result<Outcome> {
    let s = &cfg.simulation;
    let grid = sim_grid(cfg)?;
    let p0 = start(cfg)?;
    let d = p0.dim();
    let (mut violations, mut clipped, mut worst) = (0usize, 0u64, 0.0f64);
    let mut excursions = Vec::with_capacity(s.n_paths);
    let mut terminal: Vec<Vec<f64>> = vec![Vec::with_capacity(s.n_paths); d];
    let csv = out_path(cfg, "ensemble.csv");
    let export = s.export_paths > 0;
    for_each_block(s.n_paths, s.block, |first, count| {
        let ens = simulate_sde(model, &p0, &grid, &sim_config(cfg, cfg.seed, first, count))?;
        if first == 0 && export {
            let file = fs::File::create(&csv).map_err(mimic_core::Error::from)?;
            ens.write_csv(BufWriter::new(file), Some(s.export_paths), s.export_stride)?;
        }
        let rep = support_check(&ens);
        violations += rep.violations;
        clipped += rep.clipped_steps;
        worst = worst.min(rep.max_negative_excursion_pre_clip);
        excursions.extend(ens.clip.iter().map(|c| -c.min_pre_clip));
        for p in 0..ens.n_paths() {
            let x = ens.state(p, grid.n_steps());
            terminal.iter_mut().zip(x).for_each(|(v, &xi)| v.push(xi));
        }
        Ok(())
    })?;
    let support = SupportReport {
        violations,
        paths: s.n_paths,
        clipped_steps: clipped,
        clip_rate: clipped as f64 / (s.n_paths * grid.n_steps()) as f64,
        max_negative_excursion_pre_clip: worst,
        excursion_p99: quantile(&mut excursions, 0.99),
        passed: violations == 0,
    };
    let report = SimulateReport {
        terminal_mean: terminal.iter().map(|v| MeanEstimate::from_samples(v)).collect(),
        ensemble_csv: export.then(|| csv.display().to_string()),
        support,
    };
    Outcome::new(report.support.passed, report)
}

fn validate(cfg: &ExperimentConfig, model: &Model) -> Result<Outcome> {
    let v = &cfg.validation;
    let report = validate_coefficients(model.as_ref(), v.budget, &v.sampling)
        .context("validation needs a regularity budget; set validation.budget for this model")?;
    Outcome::new(report.passed, report)
}

fn test_function(spec: &TestFunctionSpec, d: usize, horizon: f64) -> Result<TestFunction> {
    Ok(match spec {
        TestFunctionSpec::Linear { coeffs } => {
            if coeffs.len() != d {
                bail!("linear test function needs {d} coefficients");
            }
            TestFunction::linear(coeffs.clone())
        }
        TestFunctionSpec::Constant { value } => TestFunction::constant(d, *value),
        TestFunctionSpec::RadialBump { center, radius } => {
            if center.len() != d {
                bail!("radial bump center needs {d} coordinates");
            }
            TestFunction::radial_bump(center.clone(), *radius)?
        }
        TestFunctionSpec::TimeWeightedHeight => TestFunction::time_weighted_height(d, horizon),
    })
}

fn probe(spec: &ProbeSpec, d: usize) -> Result<Probe> {
    let check = |i: usize| if i < d { Ok(()) } else { Err(anyhow!("probe coordinate {i} out of range")) };
    Ok(match *spec {
        ProbeSpec::Constant => Probe::constant(),
        ProbeSpec::Coordinate(i) => {
            check(i)?;
            Probe::coordinate(i)
        }
        ProbeSpec::RunningMax(i) => {
            check(i)?;
            Probe::running_max(i)
        }
    })
}

/// Paths come from `sim`; compensators use `analytic`.
fn martingale(cfg: &ExperimentConfig, sim: &Model, analytic: &Model) -> Result<Outcome> {
    let m = &cfg.martingale;
    let grid = sim_grid(cfg)?;
    let p0 = start(cfg)?;
    let d = p0.dim();
    let levels = m
        .levels
        .iter()
        .map(|&t| grid.index_of(t).ok_or_else(|| anyhow!("martingale level {t} is not a grid node")))
        .collect::<Result<Vec<_>>>()?;
    let probes = m.probes.iter().map(|p| probe(p, d)).collect::<Result<Vec<_>>>()?;
    let ens = simulate_sde(sim, &p0, &grid, &sim_config(cfg, cfg.seed, 0, cfg.simulation.n_paths))?;
    let mut reports = Vec::new();
    for spec in &m.test_functions {
        let v = test_function(spec, d, grid.end())?;
        let mp = martingale_increments(&ens, analytic, &v)?;
        reports.push(martingale_test(&v.name, &ens, &mp, &levels, &probes, m.z_crit, m.z_fail)?);
    }
    let passed = reports.iter().all(|r| r.passed);
    Outcome::new(passed, json!({ "support": support_check(&ens), "tests": reports }))
}

fn binning_spec(cfg: &ExperimentConfig, grid: &TimeGrid) -> Result<BinningSpec> {
    let p = &cfg.projection;
    let times = match &p.times {
        Some(t) => t.clone(),
        None => (1..=p.time_nodes).map(|k| grid.end() * k as f64 / p.time_nodes as f64).collect(),
    };
    let times = times
        .iter()
        .map(|&t| grid.index_of(t).map(|k| grid.node(k)).ok_or_else(|| anyhow!("projection time {t} is not a grid node")))
        .collect::<Result<Vec<_>>>()?;
    let l = &p.lattice;
    Ok(BinningSpec {
        times,
        lattice: Lattice::refined(&l.lower, &l.upper, &l.counts, l.power)?,
        kernel: p.kernel.clone(),
        min_occupancy: p.min_occupancy,
    })
}

fn driver(cfg: &ExperimentConfig, model: Model) -> Box<dyn ItoDriver<f64>> {
    match cfg.projection.driver {
        DriverSpec::Markov => Box::new(ModelDriver(model)),
        DriverSpec::RegimeSwitching { scales, rates, initial } => {
            Box::new(RegimeSwitchingDriver::new(model, scales, rates, initial))
        }
    }
}

fn compare_times(cfg: &ExperimentConfig, grid: &TimeGrid) -> Result<Vec<f64>> {
    cfg.projection
        .compare_times
        .iter()
        .map(|&t| grid.index_of(t).map(|k| grid.node(k)).ok_or_else(|| anyhow!("compare time {t} is not a grid node")))
        .collect()
}

/// Streams driver paths through the accumulator (and, optionally, a marginal
/// sample) block by block.
fn accumulate(
    cfg: &ExperimentConfig,
    driver: &dyn ItoDriver<f64>,
    grid: &TimeGrid,
    mut marginals: Option<&mut MarginalSample>,
) -> Result<MimickedCoefficients> {
    let spec = binning_spec(cfg, grid)?;
    let mut acc = CoefficientAccumulator::new(spec, driver.dim())?;
    let x0 = cfg.start_point();
    for_each_block(cfg.simulation.n_paths, cfg.simulation.block, |first, count| {
        let ens = simulate_ito_process(driver, &x0, grid, &sim_config(cfg, cfg.seed, first, count), true)?;
        acc.add(&ens)?;
        if let Some(m) = marginals.as_deref_mut() {
            m.append(&ens)?;
        }
        Ok(())
    })?;
    Ok(acc.finish()?)
}

fn coefficient_summary(mc: &MimickedCoefficients) -> Value {
    json!({
        "paths": mc.paths,
        "time_nodes": mc.times.len(),
        "lattice_nodes": mc.lattice.len(),
        "bandwidths": mc.bandwidths,
        "masked_fraction": mc.masked_fraction(),
        "max_clip": mc.clip.iter().copied().filter(|c| c.is_finite()).fold(0.0, f64::max),
    })
}

fn project(cfg: &ExperimentConfig, model: Model) -> Result<Outcome> {
    let grid = sim_grid(cfg)?;
    let drv = driver(cfg, model);
    let mc = accumulate(cfg, drv.as_ref(), &grid, None)?;
    let csv = out_path(cfg, "coefficients.csv");
    mc.save(&csv)?;
    let built = build_mimicking_model(&mc, &cfg.projection.fill);
    let mut report = coefficient_summary(&mc);
    report["coefficients_csv"] = json!(csv.display().to_string());
    let passed = match &built {
        Ok(g) => {
            report["fill_distance"] = json!(g.fill_distance);
            true
        }
        Err(e) => {
            report["error"] = json!(e.to_string());
            false
        }
    };
    Outcome::new(passed, report)
}

fn data(spec: &DataSpec) -> Result<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>> {
    Ok(match spec {
        &DataSpec::Constant { value } => Arc::new(move |_: &[f64]| value),
        &DataSpec::Coordinate { index } => Arc::new(move |x: &[f64]| x[index]),
        DataSpec::RadialBump { center, radius } => {
            let bump = TestFunction::radial_bump(center.clone(), *radius)?;
            Arc::new(move |x: &[f64]| bump.value(0.0, x))
        }
    })
}

fn pde_grid(cfg: &ExperimentConfig) -> Result<PdeGrid> {
    let q = &cfg.pde;
    let time = TimeGrid::with_steps(0.0, q.horizon, q.steps)?;
    Ok(PdeGrid::uniform(q.half_width, q.xd_max, &q.counts, q.xd_power, time)?)
}

fn pde(cfg: &ExperimentConfig, model: &Model) -> Result<Outcome> {
    let q = &cfg.pde;
    let grid = pde_grid(cfg)?;
    if let DataSpec::RadialBump { center, .. } = &q.data {
        if center.len() != grid.dim() {
            bail!("pde.data.center needs {} coordinates", grid.dim());
        }
    }
    let g = data(&q.data)?;
    let (sol, layer) = match q.problem {
        Problem::Cauchy => (solve_cauchy(model, no_source, |x: &[f64]| g(x), &grid, q.scheme)?, q.steps),
        Problem::TerminalValue => (solve_terminal_value(model, |x: &[f64]| g(x), &grid, q.scheme)?, 0),
    };
    let csv = out_path(cfg, "solution.csv");
    sol.save_csv(&csv, q.csv_layer_stride)?;
    let x = cfg.start_point();
    let finite = sol.layers.iter().all(|l| l.iter().all(|v| v.is_finite()));
    let (lo, hi) = sol.layers[layer].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Outcome::new(
        finite,
        json!({
            "problem": q.problem,
            "scheme": q.scheme,
            "info": sol.info,
            "value_at_start": sol.interpolate(layer, &x),
            "range": [lo, hi],
            "solution_csv": csv.display().to_string(),
        }),
    )
}

/// The PDE side uses `pde_model`, the Monte Carlo side `sim_model`.
fn duality(cfg: &ExperimentConfig, pde_model: &Model, sim_model: &Model) -> Result<Outcome> {
    let s = &cfg.simulation;
    let grid = pde_grid(cfg)?;
    let x = cfg.start_point();
    let pde_point = match &cfg.duality.pde_offset {
        Some(o) if o.len() != x.len() => bail!("duality.pde_offset needs {} coordinates", x.len()),
        Some(o) => Some(x.iter().zip(o).map(|(a, b)| a + b).collect()),
        None => None,
    };
    let dc = DualityConfig {
        n_paths: s.n_paths,
        seed: cfg.seed,
        step: s.step,
        scheme: s.scheme,
        block: s.block,
        z: cfg.duality.z,
        pde_point,
    };
    let g = data(&cfg.pde.data)?;
    let report = duality_check_split(pde_model, sim_model, |y: &[f64]| g(y), &x, &grid, cfg.pde.scheme, &dc)?;
    Outcome::new(report.passed, report)
}

fn restart(cfg: &ExperimentConfig, model: &Model) -> Result<Outcome> {
    let r = &cfg.restart;
    let s = &cfg.simulation;
    let rc = RestartConfig {
        level: r.level,
        t_cap: r.t_cap,
        horizon: r.horizon,
        step: s.step,
        n_paths: s.n_paths,
        seed: cfg.seed,
        restart_seed: keyed_u64(cfg.seed, &[RESTART]),
        scheme: s.scheme,
        bins: r.bins,
        min_per_bin: r.min_per_bin,
        ks_threshold: r.ks_threshold,
        perturbation: r.perturbation.clone(),
        null_resamples: r.null_resamples,
    };
    let report = strong_markov_restart_test(model, &start(cfg)?, &rc, &coordinate_functionals(model.dim()))?;
    Outcome::new(report.passed, report)
}

fn marginal_functionals(d: usize) -> Vec<NamedFunctional> {
    let mut g: Vec<NamedFunctional> =
        (0..d).map(|i| NamedFunctional::new(format!("x{}", i + 1), move |x: &[f64]| x[i])).collect();
    g.push(NamedFunctional::new("x_d^2", move |x: &[f64]| x[d - 1] * x[d - 1]));
    g.push(NamedFunctional::new("(x1)+", |x: &[f64]| x[0].max(0.0)));
    g
}

/// Driver paths → projected coefficients → resimulated mimicking diffusion →
/// marginal comparison. A break mode applies to the rebuilt model.
fn full_mimic(cfg: &ExperimentConfig, model: Model, brk: Option<BreakMode>) -> Result<Outcome> {
    let s = &cfg.simulation;
    let grid = sim_grid(cfg)?;
    let d = model.dim();
    let times = compare_times(cfg, &grid)?;
    let drv = driver(cfg, model);
    let mut original = MarginalSample::new(times.clone(), d);
    let mc = accumulate(cfg, drv.as_ref(), &grid, Some(&mut original))?;
    let csv = out_path(cfg, "coefficients.csv");
    mc.save(&csv)?;
    let mut report = coefficient_summary(&mc);
    report["coefficients_csv"] = json!(csv.display().to_string());
    let gridded = match build_mimicking_model(&mc, &cfg.projection.fill) {
        Ok(g) => g,
        Err(e) => {
            report["error"] = json!(e.to_string());
            return Outcome::new(false, report);
        }
    };
    report["fill_distance"] = json!(gridded.fill_distance);
    // informational only: the projected coefficients need not meet the budget
    if let Some(budget) = cfg.validation.budget {
        let v = validate_coefficients(&gridded, Some(budget), &cfg.validation.sampling)?;
        report["validation"] = json!({ "passed": v.passed, "empirical": v.empirical });
    }
    let mimic = broken(Box::new(gridded), brk);
    let p0 = start(cfg)?;
    let seed = keyed_u64(cfg.seed, &[RESIMULATION]);
    let mut resim = MarginalSample::new(times, d);
    let mut violations = 0;
    for_each_block(s.n_paths, s.block, |first, count| {
        let ens = simulate_sde(&mimic, &p0, &grid, &sim_config(cfg, seed, first, count))?;
        violations += support_check(&ens).violations;
        resim.append(&ens)?;
        Ok(())
    })?;
    let mut cmp_cfg = cfg.projection.comparison.clone();
    cmp_cfg.seed = keyed_u64(cfg.seed, &[cmp_cfg.seed]);
    let cmp = compare_samples(&original, &resim, &marginal_functionals(d), &cmp_cfg)?;
    let passed = cmp.passed && violations == 0;
    report["support_violations"] = json!(violations);
    report["comparison"] = serde_json::to_value(&cmp)?;
    Outcome::new(passed, report)
}
