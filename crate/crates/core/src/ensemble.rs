//! Single trajectories, trajectory ensembles and derived quantities.
//!
//! Trajectory `i` of a run draws its innovations from
//! `ChaCha8Rng::seed_from_u64(master_seed)` switched to stream `i`, so every
//! trajectory is a pure function of `(config, master_seed, i)`. Ensembles are
//! evaluated in fixed chunks of consecutive indices; each chunk runs in
//! parallel and is folded into the running sums in index order. The result
//! therefore does not depend on the number of workers. The worker count is
//! taken from `WALKSEARCH_WORKERS` when set, otherwise from rayon's default.

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{controls, feedback_step, feedback_step_with, ControlKind, FeedbackCouplings, StepOutcome};
use crate::graph::{node_coordinates, walk_hamiltonian, CycleGraph, WalkParameters};
use crate::monitoring::{record_increments, MonitoringSetup};
use crate::optimize::{Controller, FeedbackStrategy, OptimizerSettings};
use crate::qcore::{uniform_superposition, CMatrix, HermitianOperator, StateVector, C64, NORM_TOL};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "WALKSEARCH_WORKERS";
/// Fraction of aborted trajectories above which a run fails.
pub const MAX_ABORT_FRACTION: f64 = 0.01;
/// Fraction of the grid, counted from the end, used for asymptotic averages.
pub const TAIL_FRACTION: f64 = 0.2;
pub const DEFAULT_MASTER_SEED: u64 = 12345;

const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub gamma: f64,
    pub kappa: f64,
    pub eta: f64,
    pub dt: f64,
    pub steps: usize,
    pub n_traj: usize,
    pub strategy: FeedbackStrategy,
    pub control_kind: ControlKind,
    pub target: usize,
    pub f_th: f64,
    pub master_seed: u64,
    pub record_stride: usize,
    pub record_dy: bool,
    pub optimizer: OptimizerSettings,
}

impl SimulationConfig {
    /// Defaults: `γ = κ = η = 1`, `γdt = 0.01`, 5000 trajectories, hopping
    /// controls, target 0, threshold 0.95 and the horizon of
    /// [`default_steps`](Self::default_steps).
    pub fn new(n: usize, strategy: FeedbackStrategy) -> Self {
        let dt = 0.01;
        Self {
            n,
            gamma: 1.0,
            kappa: 1.0,
            eta: 1.0,
            dt,
            steps: Self::default_steps(&strategy, dt),
            n_traj: 5000,
            strategy,
            control_kind: ControlKind::Hopping,
            target: 0,
            f_th: 0.95,
            master_seed: DEFAULT_MASTER_SEED,
            record_stride: 1,
            record_dy: false,
            optimizer: OptimizerSettings::default(),
        }
    }

    /// `γT = 3` unbounded, 12 bounded or digital, 10 analytic, 5 without
    /// feedback.
    pub fn default_steps(strategy: &FeedbackStrategy, dt: f64) -> usize {
        let horizon = match strategy {
            FeedbackStrategy::Unbounded => 3.0,
            FeedbackStrategy::Bounded { .. } | FeedbackStrategy::Digital { .. } => 12.0,
            FeedbackStrategy::AnalyticSingle => 10.0,
            FeedbackStrategy::None => 5.0,
        };
        (horizon / dt).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        CycleGraph::new(self.n)?;
        if self.gamma != 1.0 {
            return bad(format!("gamma is the unit of energy and must be 1, got {}", self.gamma));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be non-negative, got {}", self.kappa));
        }
        if self.eta != 1.0 {
            return bad(format!("pure-state trajectories need eta = 1, got {}", self.eta));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.n_traj == 0 {
            return bad("n_traj must be at least 1".into());
        }
        if !(self.f_th > 0.0 && self.f_th <= 1.0) {
            return bad(format!("f_th must lie in (0, 1], got {}", self.f_th));
        }
        if self.target >= self.n {
            return Err(Error::IndexOutOfRange {
                index: self.target,
                dim: self.n,
            });
        }
        if self.record_stride == 0 {
            return bad("record_stride must be at least 1".into());
        }
        self.strategy.validate()?;
        self.optimizer.validate()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| i as f64 * self.dt).collect()
    }
}

/// Rng for trajectory `index`.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Operators shared by every trajectory of a run.
pub struct Context {
    cfg: SimulationConfig,
    h_s: HermitianOperator,
    m: MonitoringSetup,
    ctrl: Controller,
    coords: Vec<(f64, f64)>,
}

impl Context {
    pub fn new(cfg: &SimulationConfig) -> Result<Self> {
        cfg.validate()?;
        let g = CycleGraph::new(cfg.n)?;
        let h_s = walk_hamiltonian(&g, &WalkParameters::new(cfg.gamma)?);
        let m = MonitoringSetup::position(&g, cfg.kappa, cfg.eta)?;
        let ctrl = Controller::new(
            controls(&g, cfg.control_kind),
            cfg.strategy.clone(),
            cfg.optimizer.clone(),
            cfg.dt,
            cfg.target,
            &m,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            h_s,
            m,
            ctrl,
            coords: node_coordinates(&g),
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn controller(&self) -> &Controller {
        &self.ctrl
    }

    fn observe(&self, s: &StateVector) -> Observation {
        let populations = s.populations();
        let (mut x, mut y) = (0.0, 0.0);
        for (p, (cx, cy)) in populations.iter().zip(&self.coords) {
            x += p * cx;
            y += p * cy;
        }
        Observation {
            fidelity: populations[self.cfg.target],
            x,
            y,
            populations,
        }
    }

    // Runs one trajectory and hands every step to `visit`. Innovations come
    // from `rng` unless `driven` supplies them.
    fn simulate<F>(&self, index: u64, driven: Option<&[Vec<f64>]>, mut visit: F) -> Result<()>
    where
        F: FnMut(usize, &StateVector, Option<&StepOutcome>),
    {
        let cfg = &self.cfg;
        let mut rng = trajectory_rng(cfg.master_seed, index);
        let mut s = uniform_superposition(cfg.n)?;
        let mut warm = FeedbackCouplings::zeros(self.ctrl.controls().len());
        visit(0, &s, None);
        for step in 1..=cfg.steps {
            let abort = |e: Error| Error::TrajectoryAborted {
                master_seed: cfg.master_seed,
                index,
                step,
                reason: e.to_string(),
            };
            let out = match driven {
                Some(dws) => {
                    let dw = dws.get(step - 1).cloned().ok_or_else(|| {
                        Error::InvalidParameter(format!("no innovations supplied for step {step}"))
                    })?;
                    let rec = record_increments(&s, &self.m, cfg.dt, dw).map_err(abort)?;
                    feedback_step_with(&s, &self.h_s, &self.m, &self.ctrl, &warm, rec)
                }
                None => feedback_step(&s, &self.h_s, &self.m, &self.ctrl, &warm, &mut rng),
            }
            .map_err(abort)?;
            visit(step, &out.state, Some(&out));
            s = out.state.clone();
            warm = out.theta;
        }
        Ok(())
    }
}

struct Observation {
    fidelity: f64,
    x: f64,
    y: f64,
    populations: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub master_seed: u64,
    pub index: u64,
    pub times: Vec<f64>,
    pub fidelity: Vec<f64>,
    /// `theta[t][k]`; zero at `t = 0`.
    pub theta: Vec<Vec<f64>>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Photocurrent increments per sampled step, when requested.
    pub dy: Option<Vec<Vec<f64>>>,
}

fn record(ctx: &Context, index: u64, driven: Option<&[Vec<f64>]>) -> Result<TrajectoryRecord> {
    let cfg = &ctx.cfg;
    let len = cfg.steps / cfg.record_stride + 1;
    let mut rec = TrajectoryRecord {
        master_seed: cfg.master_seed,
        index,
        times: Vec::with_capacity(len),
        fidelity: Vec::with_capacity(len),
        theta: Vec::with_capacity(len),
        x: Vec::with_capacity(len),
        y: Vec::with_capacity(len),
        dy: cfg.record_dy.then(Vec::new),
    };
    let ncoup = ctx.ctrl.controls().len();
    ctx.simulate(index, driven, |step, s, out| {
        if step % cfg.record_stride != 0 {
            return;
        }
        let o = ctx.observe(s);
        rec.times.push(step as f64 * cfg.dt);
        rec.fidelity.push(o.fidelity);
        rec.x.push(o.x);
        rec.y.push(o.y);
        rec.theta.push(out.map_or_else(|| vec![0.0; ncoup], |o| o.theta.theta().to_vec()));
        if let Some(dy) = rec.dy.as_mut() {
            dy.push(out.map_or_else(|| vec![0.0; ctx.m.len()], |o| o.measurement.dy.clone()));
        }
    })?;
    Ok(rec)
}

/// One trajectory; a deterministic function of `(cfg, index)`.
pub fn run_trajectory(cfg: &SimulationConfig, index: u64) -> Result<TrajectoryRecord> {
    record(&Context::new(cfg)?, index, None)
}

/// One trajectory driven by given innovations `dw[step][channel]`.
pub fn run_trajectory_driven(cfg: &SimulationConfig, dw: &[Vec<f64>]) -> Result<TrajectoryRecord> {
    record(&Context::new(cfg)?, 0, Some(dw))
}

/// Checks that hold at every step of every run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub steps_checked: u64,
    pub max_norm_defect: f64,
    pub max_unitary_defect: f64,
    /// Steps where feedback lowered the fidelity by more than 1e-12.
    pub zero_guard_violations: u64,
    /// Steps with a coupling outside the allowed box or value set.
    pub constraint_violations: u64,
    /// Analytic steps applied with non-negative curvature.
    pub curvature_violations: u64,
}

impl PropertyReport {
    fn merge(&mut self, o: &Self) {
        self.steps_checked += o.steps_checked;
        self.max_norm_defect = self.max_norm_defect.max(o.max_norm_defect);
        self.max_unitary_defect = self.max_unitary_defect.max(o.max_unitary_defect);
        self.zero_guard_violations += o.zero_guard_violations;
        self.constraint_violations += o.constraint_violations;
        self.curvature_violations += o.curvature_violations;
    }

    pub fn is_clean(&self) -> bool {
        self.max_norm_defect <= NORM_TOL
            && self.max_unitary_defect <= crate::qcore::UNITARY_TOL
            && self.zero_guard_violations == 0
            && self.constraint_violations == 0
            && self.curvature_violations == 0
    }
}

fn check_step(strategy: &FeedbackStrategy, out: &StepOutcome, rep: &mut PropertyReport) {
    rep.steps_checked += 1;
    rep.max_norm_defect = rep.max_norm_defect.max((out.state.norm() - 1.0).abs());
    rep.max_unitary_defect = rep.max_unitary_defect.max(out.unitary_defect);
    if strategy.is_optimizing()
        && *strategy != FeedbackStrategy::AnalyticSingle
        && out.reward < out.reward_without_feedback - 1e-12
    {
        rep.zero_guard_violations += 1;
    }
    let theta = out.theta.theta();
    let ok = match strategy {
        FeedbackStrategy::None => out.theta.is_zero(),
        FeedbackStrategy::Bounded { xi } => theta.iter().all(|t| t.abs() <= *xi),
        FeedbackStrategy::Digital { values } => theta.iter().all(|t| values.contains(t)),
        _ => true,
    };
    if !ok {
        rep.constraint_violations += 1;
    }
    if out.applied && out.curvature.is_some_and(|v| v >= 0.0) {
        rep.curvature_violations += 1;
    }
}

// Per-trajectory series on the full grid.
struct Series {
    fidelity: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    // [k * len + t]
    theta: Vec<f64>,
    populations: Vec<f64>,
    curvature: Vec<Option<f64>>,
    warnings: u64,
    report: PropertyReport,
}

fn series(ctx: &Context, index: u64) -> Result<Series> {
    let cfg = &ctx.cfg;
    let len = cfg.steps + 1;
    let nc = ctx.ctrl.controls().len();
    let mut s = Series {
        fidelity: vec![0.0; len],
        x: vec![0.0; len],
        y: vec![0.0; len],
        theta: vec![0.0; nc * len],
        populations: vec![0.0; cfg.n * len],
        curvature: vec![None; len],
        warnings: 0,
        report: PropertyReport::default(),
    };
    ctx.simulate(index, None, |t, state, out| {
        let o = ctx.observe(state);
        s.fidelity[t] = o.fidelity;
        s.x[t] = o.x;
        s.y[t] = o.y;
        for (k, p) in o.populations.iter().enumerate() {
            s.populations[k * len + t] = *p;
        }
        if let Some(out) = out {
            for (k, th) in out.theta.theta().iter().enumerate() {
                s.theta[k * len + t] = *th;
            }
            if out.applied {
                s.curvature[t] = out.curvature;
            }
            if !out.converged {
                s.warnings += 1;
            }
            check_step(&cfg.strategy, out, &mut s.report);
        }
    })?;
    Ok(s)
}

#[derive(Clone, Debug)]
struct Moments {
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            sq: vec![0.0; len],
        }
    }

    fn add(&mut self, v: &[f64]) {
        for ((s, q), x) in self.sum.iter_mut().zip(self.sq.iter_mut()).zip(v) {
            *s += x;
            *q += x * x;
        }
    }

    fn mean_se(&self, count: usize) -> (Vec<f64>, Vec<f64>) {
        let nf = count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / nf).collect();
        let se = self
            .sum
            .iter()
            .zip(&self.sq)
            .map(|(s, q)| {
                if count < 2 {
                    return 0.0;
                }
                let var = ((q - s * s / nf) / (nf - 1.0)).max(0.0);
                (var / nf).sqrt()
            })
            .collect();
        (mean, se)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub mean_fidelity: Vec<f64>,
    pub se_fidelity: Vec<f64>,
    /// `mean_theta[k][t]`.
    pub mean_theta: Vec<Vec<f64>>,
    pub se_theta: Vec<Vec<f64>>,
    pub mean_x: Vec<f64>,
    pub se_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub se_y: Vec<f64>,
    /// `mean_populations[k][t]`.
    pub mean_populations: Vec<Vec<f64>>,
    pub se_populations: Vec<Vec<f64>>,
    /// Mean curvature over the trajectories where feedback was applied at
    /// that step, `None` where it never was.
    pub mean_curvature: Vec<Option<f64>>,
    pub applied_count: Vec<u64>,
    pub t_th: Option<f64>,
    /// Delta-method error of `t_th` from the local slope of the mean.
    pub t_th_se: Option<f64>,
    pub effective_time: Option<f64>,
    pub effective_time_se: Option<f64>,
    /// Per-coupling mean over the final 20 % of the grid.
    pub asymptotic_theta: Vec<f64>,
    /// Standard error of the same average, across trajectories.
    pub asymptotic_theta_se: Vec<f64>,
    pub n_completed: usize,
    pub n_aborted: usize,
    pub optimizer_warnings: u64,
    pub properties: PropertyReport,
}

/// First grid time where `series >= f_th`.
pub fn threshold_time(times: &[f64], series: &[f64], f_th: f64) -> Option<f64> {
    threshold_index(series, f_th).map(|i| times[i])
}

fn threshold_index(series: &[f64], f_th: f64) -> Option<usize> {
    series.iter().position(|&f| f >= f_th)
}

/// `γ t_th / f_th`.
pub fn effective_time(t_th: Option<f64>, f_th: f64, gamma: f64) -> Option<f64> {
    t_th.map(|t| gamma * t / f_th)
}

pub fn tail_start(len: usize) -> usize {
    len - ((len as f64 * TAIL_FRACTION).ceil() as usize).clamp(1, len)
}

/// Worker count from [`WORKERS_ENV`], if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok().filter(|&w| w > 0)
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers.or_else(workers_from_env) {
        b = b.num_threads(w);
    }
    b.build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))
}

fn check_aborts(aborted: usize, total: usize) -> Result<()> {
    if aborted as f64 > MAX_ABORT_FRACTION * total as f64 {
        return Err(Error::TooManyAborts { aborted, total });
    }
    Ok(())
}

/// Averages over `cfg.n_traj` trajectories.
pub fn run_ensemble(cfg: &SimulationConfig) -> Result<EnsembleStats> {
    run_ensemble_with_workers(cfg, None)
}

/// Same as [`run_ensemble`] with an explicit worker count.
pub fn run_ensemble_with_workers(cfg: &SimulationConfig, workers: Option<usize>) -> Result<EnsembleStats> {
    let ctx = Context::new(cfg)?;
    let pool = pool(workers)?;
    let len = cfg.steps + 1;
    let n = cfg.n;
    let nc = ctx.ctrl.controls().len();
    let tail = tail_start(len);

    let mut fid = Moments::new(len);
    let mut xm = Moments::new(len);
    let mut ym = Moments::new(len);
    let mut th = Moments::new(nc * len);
    let mut pops = Moments::new(n * len);
    let mut tail_th = Moments::new(nc);
    let mut curv_sum = vec![0.0; len];
    let mut applied = vec![0u64; len];
    let mut warnings = 0;
    let mut report = PropertyReport::default();
    let mut completed = 0;
    let mut aborted = 0;

    let mut start = 0;
    while start < cfg.n_traj {
        let end = (start + CHUNK).min(cfg.n_traj);
        let chunk: Vec<Result<Series>> =
            pool.install(|| (start..end).into_par_iter().map(|i| series(&ctx, i as u64)).collect());
        for res in chunk {
            match res {
                Ok(s) => {
                    completed += 1;
                    fid.add(&s.fidelity);
                    xm.add(&s.x);
                    ym.add(&s.y);
                    th.add(&s.theta);
                    pops.add(&s.populations);
                    let tails: Vec<f64> = (0..nc)
                        .map(|k| {
                            let v = &s.theta[k * len + tail..(k + 1) * len];
                            v.iter().sum::<f64>() / v.len() as f64
                        })
                        .collect();
                    tail_th.add(&tails);
                    for (t, c) in s.curvature.iter().enumerate() {
                        if let Some(v) = c {
                            curv_sum[t] += v;
                            applied[t] += 1;
                        }
                    }
                    warnings += s.warnings;
                    report.merge(&s.report);
                }
                Err(e @ Error::TrajectoryAborted { .. }) => {
                    warn!("{e}");
                    aborted += 1;
                }
                Err(e) => return Err(e),
            }
        }
        check_aborts(aborted, cfg.n_traj)?;
        start = end;
        debug!("{} / {} trajectories", start, cfg.n_traj);
    }
    if completed == 0 {
        return Err(Error::TooManyAborts {
            aborted,
            total: cfg.n_traj,
        });
    }
    if warnings > 0 {
        debug!("{warnings} optimizer calls stopped at the iteration limit");
    }

    let times = cfg.times();
    let (mean_fidelity, se_fidelity) = fid.mean_se(completed);
    let (mean_x, se_x) = xm.mean_se(completed);
    let (mean_y, se_y) = ym.mean_se(completed);
    let split = |(m, s): (Vec<f64>, Vec<f64>)| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (m.chunks(len).map(|c| c.to_vec()).collect(), s.chunks(len).map(|c| c.to_vec()).collect())
    };
    let (mean_theta, se_theta) = split(th.mean_se(completed));
    let (mean_populations, se_populations) = split(pops.mean_se(completed));
    let (asymptotic_theta, asymptotic_theta_se) = tail_th.mean_se(completed);
    let mean_curvature = curv_sum
        .iter()
        .zip(&applied)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();

    let idx = threshold_index(&mean_fidelity, cfg.f_th);
    let t_th = idx.map(|i| times[i]);
    let t_th_se = idx.and_then(|i| {
        // Slope from the step before the crossing, or after it at t = 0.
        let (a, b) = if i > 0 { (i - 1, i) } else { (0, 1.min(len - 1)) };
        let slope = (mean_fidelity[b] - mean_fidelity[a]) / cfg.dt;
        (slope > 0.0).then(|| se_fidelity[i] / slope)
    });
    Ok(EnsembleStats {
        effective_time: effective_time(t_th, cfg.f_th, cfg.gamma),
        effective_time_se: t_th_se.map(|s| cfg.gamma * s / cfg.f_th),
        times,
        mean_fidelity,
        se_fidelity,
        mean_theta,
        se_theta,
        mean_x,
        se_x,
        mean_y,
        se_y,
        mean_populations,
        se_populations,
        mean_curvature,
        applied_count: applied,
        t_th,
        t_th_se,
        asymptotic_theta,
        asymptotic_theta_se,
        n_completed: completed,
        n_aborted: aborted,
        optimizer_warnings: warnings,
        properties: report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub xi: f64,
    pub t_th: Option<f64>,
    pub t_th_se: Option<f64>,
    pub effective_time: Option<f64>,
    pub effective_time_se: Option<f64>,
    pub asymptotic_theta: Vec<f64>,
    pub asymptotic_theta_se: Vec<f64>,
}

/// One bounded-strategy ensemble per `xi`, all with the same master seed.
pub fn sweep_xi(cfg: &SimulationConfig, xi_list: &[f64]) -> Result<Vec<SweepRow>> {
    if xi_list.is_empty() {
        return Err(Error::InvalidParameter("empty list of bounding factors".into()));
    }
    for &xi in xi_list {
        FeedbackStrategy::Bounded { xi }.validate()?;
    }
    xi_list
        .iter()
        .map(|&xi| {
            let mut c = cfg.clone();
            c.strategy = FeedbackStrategy::Bounded { xi };
            let st = run_ensemble(&c)?;
            Ok(SweepRow {
                xi,
                t_th: st.t_th,
                t_th_se: st.t_th_se,
                effective_time: st.effective_time,
                effective_time_se: st.effective_time_se,
                asymptotic_theta: st.asymptotic_theta,
                asymptotic_theta_se: st.asymptotic_theta_se,
            })
        })
        .collect()
}

/// Ensemble mean of the conditional density matrix at selected steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityCheckpoints {
    pub steps: Vec<usize>,
    pub mean: Vec<CMatrix>,
    /// Standard errors of the real and imaginary parts, entrywise.
    pub se_re: Vec<DMatrix<f64>>,
    pub se_im: Vec<DMatrix<f64>>,
    pub n_completed: usize,
}

/// Averages `|ψ⟩⟨ψ|` over the ensemble at the given step indices.
pub fn density_checkpoints(cfg: &SimulationConfig, steps: &[usize]) -> Result<DensityCheckpoints> {
    if let Some(&s) = steps.iter().find(|&&s| s > cfg.steps) {
        return Err(Error::InvalidParameter(format!("checkpoint {s} beyond horizon {}", cfg.steps)));
    }
    let ctx = Context::new(cfg)?;
    let pool = pool(None)?;
    let n = cfg.n;
    let cp = steps.len();
    let mut re = Moments::new(cp * n * n);
    let mut im = Moments::new(cp * n * n);
    let mut completed = 0;
    let mut aborted = 0;
    let mut start = 0;
    while start < cfg.n_traj {
        let end = (start + CHUNK).min(cfg.n_traj);
        let chunk: Vec<Result<(Vec<f64>, Vec<f64>)>> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|i| {
                    let mut r = vec![0.0; cp * n * n];
                    let mut m = vec![0.0; cp * n * n];
                    ctx.simulate(i as u64, None, |t, s, _| {
                        for (c, _) in steps.iter().enumerate().filter(|(_, &st)| st == t) {
                            let a = s.amplitudes();
                            for p in 0..n {
                                for q in 0..n {
                                    let z: C64 = a[p] * a[q].conj();
                                    r[c * n * n + p * n + q] = z.re;
                                    m[c * n * n + p * n + q] = z.im;
                                }
                            }
                        }
                    })?;
                    Ok((r, m))
                })
                .collect()
        });
        for res in chunk {
            match res {
                Ok((r, m)) => {
                    completed += 1;
                    re.add(&r);
                    im.add(&m);
                }
                Err(e @ Error::TrajectoryAborted { .. }) => {
                    warn!("{e}");
                    aborted += 1;
                }
                Err(e) => return Err(e),
            }
        }
        check_aborts(aborted, cfg.n_traj)?;
        start = end;
    }
    let (mr, sr) = re.mean_se(completed);
    let (mi, si) = im.mean_se(completed);
    let block = |v: &[f64], c: usize| DMatrix::from_row_slice(n, n, &v[c * n * n..(c + 1) * n * n]);
    Ok(DensityCheckpoints {
        steps: steps.to_vec(),
        mean: (0..cp)
            .map(|c| block(&mr, c).zip_map(&block(&mi, c), C64::new))
            .collect(),
        se_re: (0..cp).map(|c| block(&sr, c)).collect(),
        se_im: (0..cp).map(|c| block(&si, c)).collect(),
        n_completed: completed,
    })
}

/// Standard-normal innovations for a driven run, scaled to `dt`.
pub fn gaussian_innovations<R: Rng + ?Sized>(rng: &mut R, steps: usize, channels: usize, dt: f64) -> Vec<Vec<f64>> {
    (0..steps)
        .map(|_| {
            (0..channels)
                .map(|_| dt.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::populations_series;

    fn small(strategy: FeedbackStrategy) -> SimulationConfig {
        let mut c = SimulationConfig::new(5, strategy);
        c.n_traj = 40;
        c.steps = 60;
        c
    }

    #[test]
    fn defaults() {
        let c = SimulationConfig::new(5, FeedbackStrategy::Unbounded);
        assert_eq!(c.dt, 0.01);
        assert_eq!(c.n_traj, 5000);
        assert_eq!(c.f_th, 0.95);
        assert_eq!(c.steps, 300);
        assert_eq!(SimulationConfig::default_steps(&FeedbackStrategy::Bounded { xi: 1.0 }, 0.01), 1200);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = SimulationConfig::new(5, FeedbackStrategy::Unbounded);
        let mut c = base.clone();
        c.dt = -0.01;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.f_th = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.strategy = FeedbackStrategy::Bounded { xi: 0.5 };
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.target = 5;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.eta = 0.5;
        assert!(c.validate().is_err());
        let mut c = base;
        c.n = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn threshold_examples() {
        let t = [0.0, 0.01, 0.02];
        assert_eq!(threshold_time(&t, &[0.3, 0.96, 0.94], 0.95), Some(0.01));
        assert_eq!(threshold_time(&t, &[0.3, 0.5, 0.94], 0.95), None);
        assert_eq!(threshold_time(&t, &[0.95, 0.95, 0.95], 0.95), Some(0.0));
    }

    #[test]
    fn effective_time_examples() {
        let e = effective_time(Some(6.40), 0.95, 1.0).unwrap();
        assert!((e - 6.736842105263158).abs() < 1e-12);
        assert_eq!(effective_time(Some(2.5), 1.0, 1.0), Some(2.5));
        assert_eq!(effective_time(None, 0.95, 1.0), None);
        assert!(effective_time(Some(1.0), 0.95, 1.0) < effective_time(Some(1.1), 0.95, 1.0));
    }

    #[test]
    fn tail_covers_last_fifth() {
        assert_eq!(tail_start(301), 240);
        assert_eq!(tail_start(10), 8);
        assert_eq!(tail_start(1), 0);
    }

    #[test]
    fn free_walk_keeps_uniform_fidelity() {
        let mut c = small(FeedbackStrategy::None);
        c.kappa = 0.0;
        let rec = run_trajectory(&c, 0).unwrap();
        for f in &rec.fidelity {
            assert!((f - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectories_are_reproducible() {
        let mut c = small(FeedbackStrategy::Bounded { xi: 1.0 });
        c.record_dy = true;
        let a = run_trajectory(&c, 3).unwrap();
        let b = run_trajectory(&c, 3).unwrap();
        assert_eq!(a, b);
        let other = run_trajectory(&c, 4).unwrap();
        assert_ne!(a.fidelity, other.fidelity);
        assert_eq!(a.dy.as_ref().unwrap().len(), a.times.len());
    }

    #[test]
    fn stride_thins_records() {
        let mut c = small(FeedbackStrategy::None);
        c.record_stride = 7;
        let rec = run_trajectory(&c, 0).unwrap();
        assert_eq!(rec.times.len(), 60 / 7 + 1);
        let full = run_trajectory(&small(FeedbackStrategy::None), 0).unwrap();
        assert_eq!(rec.fidelity[2], full.fidelity[14]);
    }

    #[test]
    fn driven_run_matches_sampled_run() {
        let c = small(FeedbackStrategy::Unbounded);
        let mut rng = trajectory_rng(c.master_seed, 0);
        let dws = gaussian_innovations(&mut rng, c.steps, 2, c.dt);
        let driven = run_trajectory_driven(&c, &dws).unwrap();
        let sampled = run_trajectory(&c, 0).unwrap();
        assert_eq!(driven.fidelity, sampled.fidelity);
    }

    #[test]
    fn ensemble_is_independent_of_worker_count() {
        let mut c = small(FeedbackStrategy::Digital {
            values: vec![0.0, 1.0, -1.0],
        });
        c.n_traj = 70;
        let a = run_ensemble_with_workers(&c, Some(1)).unwrap();
        let b = run_ensemble_with_workers(&c, Some(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_completed, 70);
        assert!(a.properties.is_clean());
    }

    #[test]
    fn ensemble_without_feedback_matches_master_equation() {
        let mut c = small(FeedbackStrategy::None);
        c.n_traj = 200;
        let st = run_ensemble(&c).unwrap();
        let g = CycleGraph::new(5).unwrap();
        let h = walk_hamiltonian(&g, &WalkParameters::default());
        let m = MonitoringSetup::position(&g, 1.0, 1.0).unwrap();
        let exact = populations_series(&g, &h, &m, c.dt, c.steps).unwrap();
        for (t, s) in exact.iter().enumerate() {
            for k in 0..5 {
                let diff = (st.mean_populations[k][t] - s.populations[k]).abs();
                assert!(diff <= 3.0 * st.se_populations[k][t] + 1e-12, "t {t} k {k}");
            }
        }
    }

    #[test]
    fn sweep_rejects_small_xi() {
        let c = small(FeedbackStrategy::Unbounded);
        assert!(sweep_xi(&c, &[1.0, 0.5]).is_err());
        assert!(sweep_xi(&c, &[]).is_err());
        let mut c1 = c.clone();
        c1.n_traj = 4;
        c1.steps = 5;
        assert_eq!(sweep_xi(&c1, &[2.0]).unwrap().len(), 1);
    }

    #[test]
    fn abort_threshold() {
        assert!(check_aborts(0, 100).is_ok());
        assert!(check_aborts(1, 100).is_ok());
        assert!(check_aborts(2, 100).is_err());
    }

    #[test]
    fn checkpoint_density_is_a_state() {
        let mut c = small(FeedbackStrategy::None);
        c.n_traj = 20;
        let d = density_checkpoints(&c, &[0, 30, 60]).unwrap();
        for m in &d.mean {
            assert!((m.trace().re - 1.0).abs() < 1e-12);
        }
        assert!(density_checkpoints(&c, &[61]).is_err());
    }
}
