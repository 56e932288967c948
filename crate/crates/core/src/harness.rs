//! Collapse sweeps: total-space pairings 𝒦_t against ρ-renormalized targets, the three
//! bookkeeping channels (interior, mixed, edge) and the iterated-limit verdict.

use crate::assembly::{assemble_base, assemble_total, assemble_total_fixed, AssemblyOptions, Bc, FibrationModel};
use crate::cone::{cone_pairing, ConeKernelParams};
use crate::error::{check_dim, invalid, Error, Result};
use crate::geometry::{
    build_cone_chart_with, build_fiber_lattice, BaseGrid, CollapseSchedule, ConeParams, FieldSpec, FiberLattice,
    PerturbationField, PerturbationProfile, RadialSpacing, ScheduleStep,
};
use crate::heat::{build_engine_with, EngineMode, HeatEngine, KrylovKind, KrylovParams, DEFAULT_DENSE_CAP};
use crate::ident::{build_identification, leakage, semigroup_defect_with, IdentificationPair, PowerOptions};
use crate::linalg::{wdot, wnorm};
use crate::renorm::{
    default_rhos, extrapolate_ren, renorm_sweep, restrict_to_op, split_test_function, ChiCutoff, CutoffProfile,
    RenormPairing, RenormSetup, SplitTestFunction,
};
use crate::stats::{linear_fit, loglog_fit, LinearFit};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

pub const REPORT_SCHEMA: &str = "collapse-heat/report/v1";
pub const SAFETY_FACTOR: f64 = 3.0;
/// Required shrink factor of the interior channel from the first to the last step.
pub const INTERIOR_DECAY: f64 = 0.5;
/// Interior values below this count as converged (Krylov tolerance level).
pub const INTERIOR_FLOOR: f64 = 1e-9;
/// Records on which the bookkeeping surrogate must hold.
pub const BOUND_FRACTION: f64 = 0.95;

/// Analytic test functions on the polar chart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    /// (1 − (r/width)²)₊^power
    RadialBump { width: f64, power: i32 },
    /// (1 − (r/width)²)₊^power · (1 + amplitude·cos(mode·θ))
    AngularBump { width: f64, power: i32, mode: u32, amplitude: f64 },
    /// (1 − ((r − center)/width)²)₊^power, vanishing near the tip
    AnnularBump { center: f64, width: f64, power: i32 },
}

impl TestFunction {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TestFunction::RadialBump { width, power } => width > 0.0 && power >= 1,
            TestFunction::AngularBump { width, power, amplitude, .. } => width > 0.0 && power >= 1 && amplitude.is_finite(),
            TestFunction::AnnularBump { center, width, power } => center > 0.0 && width > 0.0 && power >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("bad test function {self:?}")))
        }
    }

    pub fn eval(&self, r: f64, theta: f64) -> f64 {
        let bump = |x: f64, p: i32| (1.0 - x * x).max(0.0).powi(p);
        match *self {
            TestFunction::RadialBump { width, power } => bump(r / width, power),
            TestFunction::AngularBump { width, power, mode, amplitude } => {
                bump(r / width, power) * (1.0 + amplitude * (mode as f64 * theta).cos())
            }
            TestFunction::AnnularBump { center, width, power } => bump((r - center) / width, power),
        }
    }

    pub fn sample(&self, grid: &BaseGrid) -> Vec<f64> {
        grid.nodes.iter().map(|p| self.eval(p[0], p[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseGridSpec {
    pub spacing: RadialSpacing,
    pub n_theta: usize,
    pub r_min: f64,
}

impl BaseGridSpec {
    pub fn build(&self, cone: ConeParams) -> Result<BaseGrid> {
        build_cone_chart_with(cone, self.spacing, self.n_theta, self.r_min)
    }

    /// Halve every spacing: the h/2 member of the refinement pair.
    pub fn refined(&self) -> BaseGridSpec {
        let spacing = match self.spacing {
            RadialSpacing::Uniform { n_r } => RadialSpacing::Uniform { n_r: 2 * n_r - 1 },
            RadialSpacing::Graded { rings_per_octave, h_out } => {
                RadialSpacing::Graded { rings_per_octave: 2 * rings_per_octave, h_out: 0.5 * h_out }
            }
        };
        BaseGridSpec { spacing, n_theta: 2 * self.n_theta, r_min: self.r_min }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberSpec {
    /// Columns are the lattice generators.
    pub basis: [[f64; 2]; 2],
    pub n_f: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// ε(s) = c_amp·exp(−c_rate/s)
    Exponential { scales: Vec<f64>, c_amp: f64, c_rate: f64 },
    Custom { steps: Vec<ScheduleStep> },
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<CollapseSchedule> {
        match self {
            ScheduleSpec::Exponential { scales, c_amp, c_rate } => CollapseSchedule::exponential(scales, *c_amp, *c_rate),
            ScheduleSpec::Custom { steps } => CollapseSchedule::custom(steps.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    #[serde(default)]
    pub profile: PerturbationProfile,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrylovSettings {
    pub max_dim: usize,
    pub tol: f64,
    /// Shift of the shift-invert transform; 0 selects the polynomial Krylov space.
    pub gamma: f64,
}

impl Default for KrylovSettings {
    fn default() -> Self {
        KrylovSettings { max_dim: 60, tol: 1e-9, gamma: 0.02 }
    }
}

impl KrylovSettings {
    pub fn params(&self) -> KrylovParams {
        let kind = if self.gamma > 0.0 { KrylovKind::ShiftInvert { gamma: self.gamma } } else { KrylovKind::Polynomial };
        KrylovParams { max_dim: self.max_dim, tol: self.tol, kind }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub cone: ConeParams,
    pub base_grid: BaseGridSpec,
    pub fiber: FiberSpec,
    pub schedule: ScheduleSpec,
    pub perturbation: PerturbationSpec,
    /// τ-window samples.
    pub taus: Vec<f64>,
    /// Cutoff scales for the bookkeeping, decreasing.
    pub rhos: Vec<f64>,
    /// Scales for the ρ↓0 extrapolation of K^ren; defaults to r0/4·2^{-k}, k = 0..5.
    #[serde(default)]
    pub renorm_rhos: Option<Vec<f64>>,
    pub phi: TestFunction,
    pub psi: TestFunction,
    #[serde(default)]
    pub cutoff: CutoffProfile,
    pub chi_radius: f64,
    pub bc: Bc,
    #[serde(default)]
    pub krylov: KrylovSettings,
    #[serde(default = "yes")]
    pub refinement_floor: bool,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(s)
            .map_err(|e| Error::Config { path: format!("line {} column {}", e.line(), e.column()), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |path: &str, msg: String| Error::Config { path: path.into(), msg };
        self.cone.validate().map_err(|e| cfg("cone", e.to_string()))?;
        self.schedule.build().map_err(|e| cfg("schedule", e.to_string()))?;
        if self.fiber.n_f < 6 {
            return Err(cfg("fiber.n_f", format!("need at least 6 fiber nodes per period, got {}", self.fiber.n_f)));
        }
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(cfg("taus", "need a non-empty list of positive times".into()));
        }
        let lo = 2.0 * self.base_grid.r_min;
        let check_rhos = |path: &str, r: &[f64]| -> Result<()> {
            if r.is_empty() {
                return Err(cfg(path, "empty".into()));
            }
            if r.windows(2).any(|w| !(w[1] < w[0])) {
                return Err(cfg(path, "must decrease strictly".into()));
            }
            if r.iter().any(|x| !(*x > lo && *x < self.cone.r0)) {
                return Err(cfg(path, format!("entries must lie in (2 r_min, r0) = ({lo}, {})", self.cone.r0)));
            }
            Ok(())
        };
        check_rhos("rhos", &self.rhos)?;
        check_rhos("renorm_rhos", &self.renorm_rho_sequence())?;
        self.phi.validate().map_err(|e| cfg("phi", e.to_string()))?;
        self.psi.validate().map_err(|e| cfg("psi", e.to_string()))?;
        self.cutoff.validate().map_err(|e| cfg("cutoff", e.to_string()))?;
        if !(self.chi_radius > 0.0) {
            return Err(cfg("chi_radius", "must be > 0".into()));
        }
        if self.krylov.max_dim < 2 || !(self.krylov.tol > 0.0) || !(self.krylov.gamma >= 0.0) {
            return Err(cfg("krylov", "need max_dim >= 2, tol > 0, gamma >= 0".into()));
        }
        Ok(())
    }

    pub fn renorm_rho_sequence(&self) -> Vec<f64> {
        self.renorm_rhos.clone().unwrap_or_else(|| default_rhos(self.cone.r0, 6))
    }

    pub fn lattice(&self) -> Result<FiberLattice> {
        build_fiber_lattice(self.fiber.basis, 1.0)
    }
}

/// Base-side targets on one grid.
#[derive(Debug)]
pub struct BaseSide {
    pub grid: BaseGrid,
    pub engine: HeatEngine,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub chi: Vec<f64>,
    /// Per ρ: splits of Φ and Ψ.
    pub splits: Vec<(SplitTestFunction, SplitTestFunction)>,
    /// [ρ][τ] target terms.
    pub targets: Vec<Vec<Target>>,
    /// [τ] ⟨Φ, e^{-τH_B}Ψ⟩.
    pub full: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Target {
    pub outer_base: f64,
    pub inner_cone: f64,
    pub value: f64,
}

fn base_engine(op: crate::assembly::DiscreteOperator, krylov: KrylovParams) -> Result<HeatEngine> {
    let mode = if op.dim <= DEFAULT_DENSE_CAP { EngineMode::DenseSpectral } else { EngineMode::Krylov };
    build_engine_with(Arc::new(op), mode, DEFAULT_DENSE_CAP, krylov)
}

pub fn build_base_side(config: &ExperimentConfig, spec: &BaseGridSpec) -> Result<BaseSide> {
    base_side_on(config, spec.build(config.cone)?)
}

pub fn base_side_on(config: &ExperimentConfig, grid: BaseGrid) -> Result<BaseSide> {
    let engine = base_engine(assemble_base(&grid, config.bc)?, config.krylov.params())?;
    let phi = config.phi.sample(&grid);
    let psi = config.psi.sample(&grid);
    let chi = ChiCutoff { radius: config.chi_radius, profile: config.cutoff }.values(&grid);
    let cone = ConeKernelParams::new(config.cone.alpha);
    let mut splits = Vec::new();
    let mut targets = Vec::new();
    for &rho in &config.rhos {
        let sp = split_test_function(&phi, &grid, &config.cutoff, rho)?;
        let sq = split_test_function(&psi, &grid, &config.cutoff, rho)?;
        let hs = engine.apply_multi(&config.taus, &restrict_to_op(&engine, &sq.outer))?;
        let ps = restrict_to_op(&engine, &sp.outer);
        let mut row = Vec::new();
        for (k, &tau) in config.taus.iter().enumerate() {
            let outer_base = wdot(engine.mass(), &ps, &hs[k]);
            let inner_cone = cone_pairing(&cone, &grid, &sp.inner, &sq.inner, tau, &chi)?;
            row.push(Target { outer_base, inner_cone, value: outer_base + inner_cone });
        }
        splits.push((sp, sq));
        targets.push(row);
    }
    let h = engine.apply_multi(&config.taus, &restrict_to_op(&engine, &psi))?;
    let p = restrict_to_op(&engine, &phi);
    let full = h.iter().map(|hk| wdot(engine.mass(), &p, hk)).collect();
    Ok(BaseSide { grid, engine, phi, psi, chi, splits, targets, full })
}

/// Total-space objects at one collapse step.
pub struct StepContext {
    pub model: Arc<FibrationModel>,
    pub pair: IdentificationPair,
    pub engine: HeatEngine,
}

pub fn build_step(config: &ExperimentConfig, grid: &BaseGrid, step: &ScheduleStep) -> Result<StepContext> {
    let lattice = config.lattice()?.with_scale(step.s);
    let field = PerturbationField {
        c1_norm_target: step.epsilon,
        profile: config.perturbation.profile,
        seed: config.perturbation.seed,
    };
    let model = Arc::new(assemble_total(grid, &lattice, config.fiber.n_f, &field, config.bc)?);
    let pair = build_identification(model.clone())?;
    let engine = build_engine_with(Arc::new(model.total_op.clone()), EngineMode::Krylov, DEFAULT_DENSE_CAP, config.krylov.params())?;
    Ok(StepContext { model, pair, engine })
}

/// 𝒦_t(Φ,Ψ;τ) = ⟨IΦ, e^{-τH_t} IΨ⟩ for base vectors on the operator's degrees of freedom.
pub fn total_pairing(ctx: &StepContext, phi: &[f64], psi: &[f64], tau: f64) -> Result<f64> {
    ctx.pair.check_lift(phi)?;
    let h = ctx.engine.apply(tau, &ctx.pair.lift(psi))?;
    Ok(wdot(ctx.pair.total_mass(), &ctx.pair.lift(phi), &h))
}

/// |𝒦_t(Φ^(ρ),Ψ^(ρ);τ) − ⟨Φ^(ρ), e^{-τH_B}Ψ^(ρ)⟩| and the measured ε_t, for `base.splits[rho_index]`.
pub fn interior_comparison(ctx: &StepContext, base: &BaseSide, rho_index: usize, tau: f64) -> Result<(f64, f64)> {
    let e = &base.engine;
    let (sp, sq) = base.splits.get(rho_index).ok_or_else(|| invalid(format!("no split at index {rho_index}")))?;
    let (po, qo) = (restrict_to_op(e, &sp.outer), restrict_to_op(e, &sq.outer));
    let total = total_pairing(ctx, &po, &qo, tau)?;
    let reference = wdot(e.mass(), &po, &e.apply(tau, &qo)?);
    Ok(((total - reference).abs(), ctx.model.epsilon))
}

/// |𝒦_t(Φ^(ρ),Ψ^{<ρ};τ)| + |𝒦_t(Φ^{<ρ},Ψ^(ρ);τ)|.
pub fn mixed_term(ctx: &StepContext, base: &BaseSide, rho_index: usize, tau: f64) -> Result<f64> {
    let e = &base.engine;
    let (sp, sq) = base.splits.get(rho_index).ok_or_else(|| invalid(format!("no split at index {rho_index}")))?;
    let r = |v: &[f64]| restrict_to_op(e, v);
    let a = total_pairing(ctx, &r(&sp.outer), &r(&sq.inner), tau)?;
    let b = total_pairing(ctx, &r(&sp.inner), &r(&sq.outer), tau)?;
    Ok(a.abs() + b.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Interior,
    Mixed,
    Edge,
}

#[derive(Clone, Debug, Serialize)]
pub struct Record {
    pub step: usize,
    pub s: f64,
    pub epsilon_nominal: f64,
    pub epsilon_measured: f64,
    pub rho: f64,
    pub tau: f64,
    /// 𝒦_t(Φ,Ψ;τ)
    pub total: f64,
    /// K^ren_{B,ρ}(Φ,Ψ;τ)
    pub target: f64,
    pub discrepancy: f64,
    /// 𝒦_t(Φ^(ρ),Ψ^(ρ)) − K_B(Φ^(ρ),Ψ^(ρ))
    pub interior: f64,
    /// 𝒦_t(Φ^(ρ),Ψ^{<ρ}) + 𝒦_t(Φ^{<ρ},Ψ^(ρ))
    pub mixed: f64,
    /// 𝒦_t(Φ^{<ρ},Ψ^{<ρ}) − cone pairing
    pub edge: f64,
    /// ‖Φ^(ρ)‖‖Ψ^{<ρ}‖ + ‖Φ^{<ρ}‖‖Ψ^(ρ)‖
    pub mixed_ceiling: f64,
    /// Bilinearization: |𝒦_t − ⟨Φ, S_t(τ)Ψ⟩_B|.
    pub bilinear_defect: f64,
    pub estimate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepSummary {
    pub s: f64,
    pub epsilon_nominal: f64,
    pub epsilon_measured: f64,
    pub total_dim: usize,
    pub measure_deviation: f64,
}

struct Norms {
    outer_phi: f64,
    outer_psi: f64,
    inner_phi: f64,
    inner_psi: f64,
}

fn split_norms(base: &BaseSide, idx: usize) -> Norms {
    let e = &base.engine;
    let n = |v: &[f64]| wnorm(e.mass(), &restrict_to_op(e, v));
    let (sp, sq) = &base.splits[idx];
    Norms { outer_phi: n(&sp.outer), outer_psi: n(&sq.outer), inner_phi: n(&sp.inner), inner_psi: n(&sq.inner) }
}

/// All (ρ, τ) records of one collapse step against precomputed base-side targets.
pub fn evaluate_step(config: &ExperimentConfig, base: &BaseSide, k: usize, step: &ScheduleStep) -> Result<(StepSummary, Vec<Record>)> {
    let ctx = build_step(config, &base.grid, step)?;
    let e = &base.engine;
    let taus = &config.taus;
    let mt = ctx.pair.total_mass();
    let lphi = ctx.pair.lift(&restrict_to_op(e, &base.phi));
    let h = ctx.engine.apply_multi(taus, &ctx.pair.lift(&restrict_to_op(e, &base.psi)))?;
    let phi_b = restrict_to_op(e, &base.phi);
    let mut records = Vec::new();
    for (i, &rho) in config.rhos.iter().enumerate() {
        let (sp, sq) = &base.splits[i];
        let lpo = ctx.pair.lift(&restrict_to_op(e, &sp.outer));
        let lpi = ctx.pair.lift(&restrict_to_op(e, &sp.inner));
        let ho = ctx.engine.apply_multi(taus, &ctx.pair.lift(&restrict_to_op(e, &sq.outer)))?;
        let nm = split_norms(base, i);
        for (j, &tau) in taus.iter().enumerate() {
            let hi: Vec<f64> = h[j].iter().zip(&ho[j]).map(|(a, b)| a - b).collect();
            let oo = wdot(mt, &lpo, &ho[j]);
            let mixed = wdot(mt, &lpo, &hi) + wdot(mt, &lpi, &ho[j]);
            let ii = wdot(mt, &lpi, &hi);
            let total = wdot(mt, &lphi, &h[j]);
            let compressed = ctx.pair.average(&h[j]);
            let bilinear = wdot(e.mass(), &phi_b, &compressed);
            let t = base.targets[i][j];
            records.push(Record {
                step: k,
                s: step.s,
                epsilon_nominal: step.epsilon,
                epsilon_measured: ctx.model.epsilon,
                rho,
                tau,
                total,
                target: t.value,
                discrepancy: total - t.value,
                interior: oo - t.outer_base,
                mixed,
                edge: ii - t.inner_cone,
                mixed_ceiling: nm.outer_phi * nm.inner_psi + nm.inner_phi * nm.outer_psi,
                bilinear_defect: (total - bilinear).abs(),
                estimate: f64::NAN,
            });
        }
    }
    let summary = StepSummary {
        s: step.s,
        epsilon_nominal: step.epsilon,
        epsilon_measured: ctx.model.epsilon,
        total_dim: ctx.model.total_dim(),
        measure_deviation: ctx.model.measure_deviation,
    };
    Ok((summary, records))
}

/// Ordered parallel map over 0..n with at most `threads` workers.
fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = threads.max(1).min(n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|sc| {
        for _ in 0..workers {
            sc.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct FloorEstimate {
    pub coarse_dim: usize,
    pub refined_dim: usize,
    /// max over (ρ, τ) of |K^ren_ρ(h) − K^ren_ρ(h/2)|.
    pub value_floor: f64,
    /// Per consecutive ρ pair: max over τ of the refinement change of K^ren_ρ − K^ren_{ρ'}.
    pub difference_floors: Vec<f64>,
}

/// Discretization floor from the (h, h/2) base refinement pair.
pub fn discretization_floor(config: &ExperimentConfig, coarse: &BaseSide) -> Result<FloorEstimate> {
    let fine = build_base_side(config, &config.base_grid.refined())?;
    let nt = config.taus.len();
    let mut value_floor: f64 = 0.0;
    for (a, b) in coarse.targets.iter().zip(&fine.targets) {
        for j in 0..nt {
            value_floor = value_floor.max((a[j].value - b[j].value).abs());
        }
    }
    let difference_floors = (0..config.rhos.len().saturating_sub(1))
        .map(|i| {
            (0..nt)
                .map(|j| {
                    let dc = coarse.targets[i][j].value - coarse.targets[i + 1][j].value;
                    let df = fine.targets[i][j].value - fine.targets[i + 1][j].value;
                    (dc - df).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(FloorEstimate { coarse_dim: coarse.engine.dim(), refined_dim: fine.engine.dim(), value_floor, difference_floors })
}

#[derive(Clone, Debug, Serialize)]
pub struct InteriorRegression {
    pub rho: f64,
    pub tau: f64,
    /// ln|interior| against 1/s.
    pub fit: Option<LinearFit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChannelFits {
    /// Per ρ: geometric-mean constant of |interior| / (ε‖Φ^(ρ)‖‖Ψ^(ρ)‖).
    pub interior_constants: Vec<f64>,
    /// Geometric-mean constant of |mixed| / (ρ‖Φ‖_∞‖Ψ‖_∞).
    pub mixed_constant: f64,
    /// Geometric-mean constant of |edge| / (ρ^{4+β}‖Φ‖_∞‖Ψ‖_∞).
    pub edge_constant: f64,
    pub interior_regressions: Vec<InteriorRegression>,
    /// Free log-log slopes against ρ of the largest channel value per ρ.
    pub mixed_rate: Option<f64>,
    pub edge_rate: Option<f64>,
}

fn geomean_ratio(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let logs: Vec<f64> = pairs.filter(|(v, b)| *v > 0.0 && *b > 0.0).map(|(v, b)| (v / b).ln()).collect();
    if logs.is_empty() {
        0.0
    } else {
        (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RhoLimsup {
    pub rho: f64,
    /// max over the last two steps and all τ of |𝒦_t − K^ren_ρ|.
    pub limsup: f64,
    pub interior: f64,
    pub mixed: f64,
    pub edge: f64,
    pub estimate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub blamed: Option<Channel>,
    pub limsups_monotone: bool,
    pub interior_decays: bool,
    pub final_within_bound: bool,
    pub final_value: f64,
    pub final_estimate: f64,
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorollaryPoint {
    pub s: f64,
    pub epsilon: f64,
    /// ρ(t) = ε_t^{1/(4+β)}
    pub rho_t: f64,
    /// max over τ of |𝒦_t(Φ,Ψ;τ) − K^ren_B(Φ,Ψ;τ)|.
    pub discrepancy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorollaryTrace {
    pub points: Vec<CorollaryPoint>,
    pub floor: f64,
    pub decreasing: bool,
    /// Set when the trace stops decreasing only inside the floor.
    pub floor_reached: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BookkeepingReport {
    pub schema: String,
    pub name: String,
    pub config: ExperimentConfig,
    pub base_dim: usize,
    pub steps: Vec<StepSummary>,
    pub records: Vec<Record>,
    /// [τ] full base pairing ⟨Φ, e^{-τH_B}Ψ⟩.
    pub base_pairing: Vec<f64>,
    /// [τ] ρ-sweep of K^ren with its extrapolation.
    pub renorm: Vec<RenormPairing>,
    pub fits: ChannelFits,
    pub limsups: Vec<RhoLimsup>,
    pub floor: Option<FloorEstimate>,
    pub bound_fraction: f64,
    /// Indices of records where |discrepancy| > 3·estimate.
    pub bound_violations: Vec<usize>,
    pub mixed_ceiling_violations: Vec<usize>,
    pub max_bilinear_defect: f64,
    pub corollary: CorollaryTrace,
    pub verdict: Verdict,
}

/// Run the full (t, ρ, τ) sweep and reduce it to the bookkeeping report.
pub fn run_iterated_limit(config: &ExperimentConfig, threads: usize) -> Result<BookkeepingReport> {
    run_iterated_limit_on(config, config.base_grid.build(config.cone)?, threads)
}

/// As [`run_iterated_limit`] on a prebuilt (e.g. cached) base grid.
pub fn run_iterated_limit_on(config: &ExperimentConfig, grid: BaseGrid, threads: usize) -> Result<BookkeepingReport> {
    config.validate()?;
    let schedule = config.schedule.build()?;
    if schedule.steps.len() < 4 || config.rhos.len() < 4 {
        return Err(Error::Config { path: "schedule/rhos".into(), msg: "need at least 4 collapse steps and 4 rho values".into() });
    }
    let base = base_side_on(config, grid)?;
    let floor = if config.refinement_floor { Some(discretization_floor(config, &base)?) } else { None };
    let outputs = parallel_map(schedule.steps.len(), threads, |k| evaluate_step(config, &base, k, &schedule.steps[k]))?;
    let mut steps = Vec::new();
    let mut records = Vec::new();
    for (s, r) in outputs {
        steps.push(s);
        records.extend(r);
    }
    let cone = ConeKernelParams::new(config.cone.alpha);
    let rr = config.renorm_rho_sequence();
    let renorm = config
        .taus
        .iter()
        .map(|&tau| {
            let setup = RenormSetup {
                engine: &base.engine,
                cone,
                grid: &base.grid,
                phi: &base.phi,
                psi: &base.psi,
                tau,
                profile: config.cutoff,
                chi: &base.chi,
            };
            renorm_sweep(&setup, &rr, config.cone.beta, floor.as_ref().map_or(0.0, |f| f.value_floor))
        })
        .collect::<Result<Vec<_>>>()?;
    reduce(config, base, floor, steps, records, renorm)
}

fn reduce(
    config: &ExperimentConfig,
    base: BaseSide,
    floor: Option<FloorEstimate>,
    steps: Vec<StepSummary>,
    mut records: Vec<Record>,
    renorm: Vec<RenormPairing>,
) -> Result<BookkeepingReport> {
    let beta = config.cone.beta;
    let nrho = config.rhos.len();
    let ntau = config.taus.len();
    let nstep = steps.len();
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let ninf = sup(&base.phi) * sup(&base.psi);
    let norms: Vec<Norms> = (0..nrho).map(|i| split_norms(&base, i)).collect();
    let idx = |k: usize, i: usize, j: usize| (k * nrho + i) * ntau + j;

    let interior_constants: Vec<f64> = (0..nrho)
        .map(|i| {
            let b = norms[i].outer_phi * norms[i].outer_psi;
            geomean_ratio(
                records.iter().filter(|r| r.rho == config.rhos[i]).map(|r| (r.interior.abs(), r.epsilon_measured * b)),
            )
        })
        .collect();
    let mixed_constant = geomean_ratio(records.iter().map(|r| (r.mixed.abs(), r.rho * ninf)));
    let edge_constant = geomean_ratio(records.iter().map(|r| (r.edge.abs(), r.rho.powf(4.0 + beta) * ninf)));
    let mut interior_regressions = Vec::new();
    for (i, &rho) in config.rhos.iter().enumerate() {
        for (j, &tau) in config.taus.iter().enumerate() {
            let pts: Vec<(f64, f64)> = (0..nstep)
                .map(|k| &records[idx(k, i, j)])
                .filter(|r| r.interior != 0.0)
                .map(|r| (1.0 / r.s, r.interior.abs().ln()))
                .collect();
            interior_regressions.push(InteriorRegression { rho, tau, fit: linear_fit(&pts) });
        }
    }
    let per_rho_max = |f: &dyn Fn(&Record) -> f64| -> Vec<f64> {
        (0..nrho).map(|i| records.iter().filter(|r| r.rho == config.rhos[i]).map(|r| f(r).abs()).fold(0.0, f64::max)).collect()
    };
    let mixed_rate = loglog_fit(&config.rhos, &per_rho_max(&|r| r.mixed)).map(|f| f.slope);
    let edge_rate = loglog_fit(&config.rhos, &per_rho_max(&|r| r.edge)).map(|f| f.slope);
    let fits = ChannelFits { interior_constants, mixed_constant, edge_constant, interior_regressions, mixed_rate, edge_rate };

    let estimate = |i: usize, eps: f64| -> f64 {
        let rho = config.rhos[i];
        fits.interior_constants[i] * eps * norms[i].outer_phi * norms[i].outer_psi
            + fits.mixed_constant * rho * ninf
            + fits.edge_constant * rho.powf(4.0 + beta) * ninf
    };
    for r in records.iter_mut() {
        let i = config.rhos.iter().position(|&x| x == r.rho).unwrap();
        r.estimate = estimate(i, r.epsilon_measured);
    }
    let bound_violations: Vec<usize> =
        (0..records.len()).filter(|&n| records[n].discrepancy.abs() > SAFETY_FACTOR * records[n].estimate).collect();
    let bound_fraction = 1.0 - bound_violations.len() as f64 / records.len().max(1) as f64;
    let mixed_ceiling_violations: Vec<usize> =
        (0..records.len()).filter(|&n| records[n].mixed.abs() > 1.005 * records[n].mixed_ceiling + 1e-14).collect();
    let max_bilinear_defect = records.iter().map(|r| r.bilinear_defect).fold(0.0, f64::max);

    // limsup over the tail = max over the last two steps
    let tail: Vec<usize> = (nstep.saturating_sub(2)..nstep).collect();
    let limsups: Vec<RhoLimsup> = (0..nrho)
        .map(|i| {
            let mut best: Option<&Record> = None;
            for &k in &tail {
                for j in 0..ntau {
                    let r = &records[idx(k, i, j)];
                    if best.is_none_or(|b| r.discrepancy.abs() > b.discrepancy.abs()) {
                        best = Some(r);
                    }
                }
            }
            let b = best.unwrap();
            RhoLimsup { rho: config.rhos[i], limsup: b.discrepancy.abs(), interior: b.interior, mixed: b.mixed, edge: b.edge, estimate: b.estimate }
        })
        .collect();

    let verdict = decide(&records, &limsups, floor.as_ref(), nstep, |k| (0..nrho * ntau).map(move |n| k * nrho * ntau + n));
    let corollary = corollary_trace(config, &steps, &records, &renorm, nrho, ntau);
    Ok(BookkeepingReport {
        schema: REPORT_SCHEMA.into(),
        name: config.name.clone(),
        config: config.clone(),
        base_dim: base.engine.dim(),
        steps,
        records,
        base_pairing: base.full.clone(),
        renorm,
        fits,
        limsups,
        floor,
        bound_fraction,
        bound_violations,
        mixed_ceiling_violations,
        max_bilinear_defect,
        corollary,
        verdict,
    })
}

fn dominant(r: &RhoLimsup) -> Channel {
    let v = [(Channel::Interior, r.interior.abs()), (Channel::Mixed, r.mixed.abs()), (Channel::Edge, r.edge.abs())];
    v.iter().fold(v[0], |a, b| if b.1 > a.1 { *b } else { a }).0
}

fn decide<I: Iterator<Item = usize>>(
    records: &[Record],
    limsups: &[RhoLimsup],
    floor: Option<&FloorEstimate>,
    nstep: usize,
    step_records: impl Fn(usize) -> I,
) -> Verdict {
    let mut reasons = Vec::new();
    let scale = limsups.iter().map(|l| l.limsup).fold(0.0, f64::max);
    let mut monotone = true;
    let mut first_bad = None;
    for i in 0..limsups.len().saturating_sub(1) {
        let tol = floor.and_then(|f| f.difference_floors.get(i).copied()).unwrap_or(0.0) + 1e-12 * scale;
        if limsups[i + 1].limsup > limsups[i].limsup + tol {
            monotone = false;
            first_bad.get_or_insert(i + 1);
            reasons.push(format!(
                "tail limsup grows from {:.3e} at rho = {} to {:.3e} at rho = {}",
                limsups[i].limsup,
                limsups[i].rho,
                limsups[i + 1].limsup,
                limsups[i + 1].rho
            ));
        }
    }
    let int_at = |k: usize| step_records(k).map(|n| records[n].interior.abs()).fold(0.0, f64::max);
    let (first, last) = (int_at(0), int_at(nstep - 1));
    let interior_decays = last <= INTERIOR_FLOOR || last <= INTERIOR_DECAY * first;
    if !interior_decays {
        reasons.push(format!("interior channel does not decay along the schedule: {first:.3e} -> {last:.3e}"));
    }
    let fin = limsups.last().unwrap();
    let final_within_bound = fin.limsup <= SAFETY_FACTOR * fin.estimate;
    if !final_within_bound {
        reasons.push(format!("final discrepancy {:.3e} exceeds {SAFETY_FACTOR} x estimate {:.3e}", fin.limsup, fin.estimate));
    }
    let pass = monotone && interior_decays && final_within_bound;
    let blamed = if pass {
        None
    } else if !interior_decays {
        Some(Channel::Interior)
    } else if let Some(i) = first_bad {
        Some(dominant(&limsups[i]))
    } else {
        Some(dominant(fin))
    };
    Verdict { pass, blamed, limsups_monotone: monotone, interior_decays, final_within_bound, final_value: fin.limsup, final_estimate: fin.estimate, reasons }
}

/// Single-trace discrepancy against the extrapolated K^ren_B with ρ(t) = ε_t^{1/(4+β)}.
fn corollary_trace(
    config: &ExperimentConfig,
    steps: &[StepSummary],
    records: &[Record],
    renorm: &[RenormPairing],
    nrho: usize,
    ntau: usize,
) -> CorollaryTrace {
    let beta = config.cone.beta;
    let points: Vec<CorollaryPoint> = steps
        .iter()
        .enumerate()
        .map(|(k, st)| {
            let d = (0..ntau)
                .map(|j| (records[k * nrho * ntau + j].total - renorm[j].extrapolation.limit).abs())
                .fold(0.0, f64::max);
            CorollaryPoint { s: st.s, epsilon: st.epsilon_measured, rho_t: st.epsilon_measured.powf(1.0 / (4.0 + beta)), discrepancy: d }
        })
        .collect();
    let floor = renorm.iter().map(|r| r.extrapolation.err).fold(0.0, f64::max);
    let strict = points.windows(2).all(|w| w[1].discrepancy <= w[0].discrepancy);
    let decreasing = points.windows(2).all(|w| w[1].discrepancy <= w[0].discrepancy + floor);
    CorollaryTrace { points, floor, decreasing, floor_reached: decreasing && !strict }
}

pub fn one_parameter_corollary(config: &ExperimentConfig, threads: usize) -> Result<CorollaryTrace> {
    Ok(run_iterated_limit(config, threads)?.corollary)
}

impl BookkeepingReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn channel_csv(&self, channel: &str) -> String {
        let mut s = String::from("step,s,epsilon,rho,tau,value,estimate\n");
        for r in &self.records {
            let v = match channel {
                "interior" => r.interior,
                "mixed" => r.mixed,
                "edge" => r.edge,
                _ => r.discrepancy,
            };
            let _ = writeln!(s, "{},{:.6e},{:.10e},{:.10e},{:.6e},{:.16e},{:.10e}", r.step, r.s, r.epsilon_measured, r.rho, r.tau, v, r.estimate);
        }
        s
    }

    pub fn plot_scripts(&self) -> Vec<(String, String)> {
        let disc = "set terminal pngcairo size 900,600\nset output 'discrepancy.png'\nset logscale y\n\
set xlabel '1/s'\nset ylabel '|K_t - K^ren_rho|'\nset datafile separator ','\n\
plot '../channels/discrepancy.csv' every ::1 using (1/$2):(abs($6)) with points title 'discrepancy', \\\n\
     '../channels/interior.csv' every ::1 using (1/$2):(abs($6)) with points title 'interior'\n"
            .to_string();
        let rates = "set terminal pngcairo size 900,600\nset output 'rates.png'\nset logscale xy\n\
set xlabel 'rho'\nset ylabel 'channel'\nset datafile separator ','\n\
plot '../channels/mixed.csv' every ::1 using 4:(abs($6)) with points title 'mixed', \\\n\
     '../channels/edge.csv' every ::1 using 4:(abs($6)) with points title 'edge'\n"
            .to_string();
        vec![("discrepancy.gp".into(), disc), ("rates.gp".into(), rates)]
    }

    /// Write report.json, channels/*.csv and plots/*.gp under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        std::fs::create_dir_all(dir.join("channels"))?;
        std::fs::create_dir_all(dir.join("plots"))?;
        let p = dir.join("report.json");
        std::fs::write(&p, self.to_json()?)?;
        out.push(p);
        for ch in ["interior", "mixed", "edge", "discrepancy"] {
            let p = dir.join("channels").join(format!("{ch}.csv"));
            std::fs::write(&p, self.channel_csv(ch))?;
            out.push(p);
        }
        for r in &self.renorm {
            let p = dir.join("channels").join(format!("renorm_tau_{}.csv", r.tau));
            std::fs::write(&p, r.to_csv())?;
            out.push(p);
        }
        for (name, body) in self.plot_scripts() {
            let p = dir.join("plots").join(name);
            std::fs::write(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Leakage and semigroup-defect rates at a fixed perturbation field while s is halved.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateStudyConfig {
    pub cone: ConeParams,
    pub n_r: usize,
    pub n_theta: usize,
    pub r_min: f64,
    pub n_f: usize,
    pub basis: [[f64; 2]; 2],
    /// Decreasing scales, each half the previous.
    pub scales: Vec<f64>,
    pub amplitude: f64,
    pub profile: PerturbationProfile,
    pub seed: u64,
    pub sigma: f64,
    pub bc: Bc,
    pub test_functions: Vec<TestFunction>,
    pub power: PowerOptionsConfig,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PowerOptionsConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl From<PowerOptionsConfig> for PowerOptions {
    fn from(p: PowerOptionsConfig) -> PowerOptions {
        PowerOptions { max_iter: p.max_iter, rel_tol: p.rel_tol, seed: p.seed }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RatePoint {
    pub s: f64,
    pub leakage: f64,
    pub defect: f64,
    pub defect_iterations: usize,
    pub defect_residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateStudy {
    pub amplitude: f64,
    pub points: Vec<RatePoint>,
    /// Consecutive ratios value(s/2)/value(s).
    pub leakage_ratios: Vec<f64>,
    pub defect_ratios: Vec<f64>,
}

pub fn rate_study(cfg: &RateStudyConfig) -> Result<RateStudy> {
    if cfg.scales.len() < 2 || cfg.test_functions.is_empty() {
        return Err(invalid("rate study needs at least two scales and one test function"));
    }
    let grid = build_cone_chart_with(cfg.cone, RadialSpacing::Uniform { n_r: cfg.n_r }, cfg.n_theta, cfg.r_min)?;
    let lattice = build_fiber_lattice(cfg.basis, 1.0)?;
    let spec = if cfg.amplitude == 0.0 { FieldSpec::zero() } else { FieldSpec::random(&cfg.profile, cfg.seed, cfg.cone.r0).scaled(cfg.amplitude) };
    let mut points = Vec::new();
    for &s in &cfg.scales {
        let model = Arc::new(assemble_total_fixed(&grid, &lattice.with_scale(s), cfg.n_f, &spec, cfg.bc, &AssemblyOptions::default())?);
        let pair = build_identification(model.clone())?;
        let engine = build_engine_with(Arc::new(model.total_op.clone()), EngineMode::Krylov, DEFAULT_DENSE_CAP, KrylovParams::default())?;
        let mut leak: f64 = 0.0;
        for tf in &cfg.test_functions {
            let v: Vec<f64> = model.base_op.labels.iter().map(|&i| tf.eval(grid.nodes[i][0], grid.nodes[i][1])).collect();
            check_dim(pair.base_dim(), v.len())?;
            leak = leak.max(leakage(&pair, &engine, cfg.sigma, &v)?);
        }
        let d = semigroup_defect_with(&pair, &engine, cfg.sigma, cfg.sigma, cfg.power.into())?;
        points.push(RatePoint { s, leakage: leak, defect: d.value, defect_iterations: d.iterations, defect_residual: d.residual });
    }
    let ratio = |f: &dyn Fn(&RatePoint) -> f64| -> Vec<f64> { points.windows(2).map(|w| f(&w[1]) / f(&w[0])).collect() };
    let leakage_ratios = ratio(&|p| p.leakage);
    let defect_ratios = ratio(&|p| p.defect);
    Ok(RateStudy { amplitude: cfg.amplitude, points, leakage_ratios, defect_ratios })
}

/// Renormalized limit of a config's base side, for puncture and cutoff comparisons.
pub fn renorm_limits(config: &ExperimentConfig, spec: &BaseGridSpec) -> Result<(BaseSide, Vec<RenormPairing>)> {
    let base = build_base_side(config, spec)?;
    let cone = ConeKernelParams::new(config.cone.alpha);
    let rr = config.renorm_rho_sequence();
    let out = config
        .taus
        .iter()
        .map(|&tau| {
            let setup = RenormSetup { engine: &base.engine, cone, grid: &base.grid, phi: &base.phi, psi: &base.psi, tau, profile: config.cutoff, chi: &base.chi };
            renorm_sweep(&setup, &rr, config.cone.beta, 0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((base, out))
}

/// Log-log slope of |K^ren_ρ − K^ren_{ρ/2}| over `rhos` (each ρ and ρ/2 evaluated).
#[derive(Clone, Debug, Serialize)]
pub struct EdgeRateStudy {
    pub tau: f64,
    pub rhos: Vec<f64>,
    pub differences: Vec<f64>,
    /// Refinement change of each difference.
    pub difference_floors: Vec<f64>,
    pub resolved: Vec<bool>,
    pub slope: Option<f64>,
    pub floor_flagged: bool,
    /// Same differences split into the mixed-term and base-vs-cone parts.
    pub mixed_differences: Vec<f64>,
    pub edge_differences: Vec<f64>,
}

pub fn edge_rate_study(config: &ExperimentConfig, rhos: &[f64], tau: f64) -> Result<EdgeRateStudy> {
    let eval = |spec: &BaseGridSpec| -> Result<Vec<(f64, f64, f64)>> {
        let base = build_base_side(config, spec)?;
        let cone = ConeKernelParams::new(config.cone.alpha);
        let setup = RenormSetup { engine: &base.engine, cone, grid: &base.grid, phi: &base.phi, psi: &base.psi, tau, profile: config.cutoff, chi: &base.chi };
        rhos.iter()
            .map(|&rho| -> Result<(f64, f64, f64)> {
                let a = crate::renorm::renorm_decomposition(&setup, rho)?;
                let b = crate::renorm::renorm_decomposition(&setup, 0.5 * rho)?;
                Ok((a.renormalized() - b.renormalized(), a.mixed - b.mixed, a.edge() - b.edge()))
            })
            .collect()
    };
    let coarse = eval(&config.base_grid)?;
    let fine = if config.refinement_floor { Some(eval(&config.base_grid.refined())?) } else { None };
    let differences: Vec<f64> = coarse.iter().map(|d| d.0.abs()).collect();
    let difference_floors: Vec<f64> = match &fine {
        Some(f) => coarse.iter().zip(f).map(|(a, b)| (a.0 - b.0).abs()).collect(),
        None => vec![0.0; rhos.len()],
    };
    let resolved: Vec<bool> = differences.iter().zip(&difference_floors).map(|(d, f)| d > f).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        rhos.iter().zip(&differences).zip(&resolved).filter(|(_, ok)| **ok).map(|((r, d), _)| (*r, *d)).unzip();
    let slope = if xs.len() >= 2 { loglog_fit(&xs, &ys).map(|f| f.slope) } else { None };
    Ok(EdgeRateStudy {
        tau,
        rhos: rhos.to_vec(),
        differences,
        floor_flagged: resolved.iter().any(|r| !r),
        difference_floors,
        resolved,
        slope,
        mixed_differences: coarse.iter().map(|d| d.1.abs()).collect(),
        edge_differences: coarse.iter().map(|d| d.2.abs()).collect(),
    })
}

/// Extrapolated limits under each (profile, χ radius) variant.
pub fn cutoff_variants(
    config: &ExperimentConfig,
    tau: f64,
    variants: &[(CutoffProfile, f64)],
) -> Result<crate::renorm::CutoffIndependenceReport> {
    let base = build_base_side(config, &config.base_grid)?;
    let v: Vec<(CutoffProfile, ChiCutoff)> =
        variants.iter().map(|&(p, r)| (p, ChiCutoff { radius: r, profile: config.cutoff })).collect();
    crate::renorm::cutoff_independence_test(
        &base.engine,
        ConeKernelParams::new(config.cone.alpha),
        &base.grid,
        &base.phi,
        &base.psi,
        tau,
        &v,
        &config.renorm_rho_sequence(),
        config.cone.beta,
        0.0,
    )
}

/// Extrapolation of an arbitrary value sequence, re-exported for report post-processing.
pub fn extrapolate(rhos: &[f64], values: &[f64], beta: f64) -> Result<crate::renorm::Extrapolation> {
    extrapolate_ren(rhos, values, beta, 0.0)
}
