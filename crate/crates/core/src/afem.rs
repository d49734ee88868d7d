//! The adaptive loop SOLVE, ESTIMATE, MARK, REFINE, rate fits and file output.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, info, warn};

use crate::error::{Error, Result};
use crate::mesh::{
    average_mesh_size, dorfler_mark, initial_mesh, refine_with_history, Domain, MarkedSet, Marking, Refinement,
    Triangulation,
};
use crate::plaplace::{self, EstimatorReport, LShapeBenchmark, PLaplaceProblem};
use crate::rof::{self, DualSpace, RofBenchmark, RofBenchmarkKind, RofProblem};
use crate::solver::{AdmmConfig, AdmmState, StepRule};
use crate::spaces::{prolong, FeFunction, SpaceDescriptor, SpaceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    PLaplace,
    Rof,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Example {
    LShape,
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineMode {
    Uniform,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorChoice {
    Pd,
    Res,
    Both,
}

fn unknown(what: &str, s: &str) -> Error {
    Error::Config(format!("unknown {what} `{s}`"))
}

impl FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plaplace" => Ok(Self::PLaplace),
            "rof" => Ok(Self::Rof),
            _ => Err(unknown("problem", s)),
        }
    }
}

impl FromStr for Example {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lshape" => Ok(Self::LShape),
            "square" => Ok(Self::Square),
            "circle" => Ok(Self::Circle),
            _ => Err(unknown("example", s)),
        }
    }
}

impl FromStr for RefineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "adaptive" => Ok(Self::Adaptive),
            _ => Err(unknown("refinement mode", s)),
        }
    }
}

impl FromStr for EstimatorChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pd" => Ok(Self::Pd),
            "res" => Ok(Self::Res),
            "both" => Ok(Self::Both),
            _ => Err(unknown("estimator", s)),
        }
    }
}

impl FromStr for DualSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c" => Ok(Self::C),
            "dc" => Ok(Self::DC),
            _ => Err(unknown("dual space", s)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub example: Example,
    pub sigma: Option<f64>,
    pub alpha: Option<f64>,
    pub refine: RefineMode,
    pub theta: f64,
    pub estimator: EstimatorChoice,
    pub dual_space: DualSpace,
    pub max_dofs: usize,
    pub out_dir: Option<PathBuf>,
    /// ADMM iteration cap per solve.
    pub max_iters: usize,
    /// ADMM tolerance `hbar^tol_power`.
    pub tol_power: f64,
}

impl RunConfig {
    pub fn plaplace(sigma: f64, refine: RefineMode, max_dofs: usize) -> Self {
        Self {
            problem: ProblemKind::PLaplace,
            example: Example::LShape,
            sigma: Some(sigma),
            alpha: None,
            refine,
            theta: 0.5,
            estimator: EstimatorChoice::Pd,
            dual_space: DualSpace::DC,
            max_dofs,
            out_dir: None,
            max_iters: 5000,
            tol_power: 2.0,
        }
    }

    pub fn rof(example: Example, alpha: f64, refine: RefineMode, dual_space: DualSpace, max_dofs: usize) -> Self {
        Self {
            problem: ProblemKind::Rof,
            example,
            sigma: None,
            alpha: Some(alpha),
            refine,
            theta: 0.5,
            estimator: EstimatorChoice::Pd,
            dual_space,
            max_dofs,
            out_dir: None,
            max_iters: 5000,
            tol_power: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        match self.problem {
            ProblemKind::PLaplace => {
                if self.example != Example::LShape {
                    return bad("the p-Laplace problem runs on the lshape example");
                }
                match self.sigma {
                    Some(s) if s > 1.0 && s.is_finite() => {}
                    Some(_) => return bad("sigma must be a finite number > 1"),
                    None => return bad("--sigma is required for the p-Laplace problem"),
                }
                if self.alpha.is_some() {
                    return bad("--alpha only applies to the rof problem");
                }
            }
            ProblemKind::Rof => {
                if self.example == Example::LShape {
                    return bad("the rof problem runs on the square or circle example");
                }
                match self.alpha {
                    Some(a) if a > 0.0 && a.is_finite() => {}
                    Some(_) => return bad("alpha must be positive"),
                    None => return bad("--alpha is required for the rof problem"),
                }
                if self.sigma.is_some() {
                    return bad("--sigma only applies to the p-Laplace problem");
                }
                if self.estimator != EstimatorChoice::Pd {
                    return bad("the rof problem only has the primal-dual estimator");
                }
            }
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad("theta must lie in (0,1)");
        }
        if !(self.tol_power > 0.0) {
            return bad("tol_power must be positive");
        }
        if self.max_dofs == 0 || self.max_iters == 0 {
            return bad("max_dofs and max_iters must be positive");
        }
        Ok(())
    }

    fn admm(&self, hbar: f64) -> AdmmConfig {
        AdmmConfig {
            tau0: 1.0,
            adapt: StepRule::ResidualBalance,
            tol: hbar.powf(self.tol_power),
            max_iters: self.max_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRecord {
    pub level: usize,
    pub ndof: usize,
    pub n_elements: usize,
    pub hbar: f64,
    pub e_primal: f64,
    pub d_dual: f64,
    pub eta_pd: f64,
    pub eta_res: Option<f64>,
    pub error: Option<f64>,
    pub osc: f64,
    pub iters_primal: usize,
    pub iters_dual: usize,
    pub converged: bool,
    /// Smallest local pd indicator `eta_T^2`.
    pub min_indicator: f64,
    /// `||u - ubar_h||` (ROF with known solution).
    pub ubar_error: Option<f64>,
    /// Side-jump sum of `ubar_h` near the data interface (ROF).
    pub jump_sum: Option<f64>,
    pub marked: usize,
    /// Share of marked elements with centroid within 1/4 of the origin.
    pub marked_near_origin: f64,
}

impl ConvergenceRecord {
    pub fn eta_com(&self) -> Option<f64> {
        self.eta_res.map(|r| r.min(self.eta_pd))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    EtaPd,
    EtaRes,
    Error,
    Osc,
    UbarError,
}

impl Field {
    fn get(self, r: &ConvergenceRecord) -> Option<f64> {
        match self {
            Field::EtaPd => Some(r.eta_pd),
            Field::EtaRes => r.eta_res,
            Field::Error => r.error,
            Field::Osc => Some(r.osc),
            Field::UbarError => r.ubar_error,
        }
    }
}

/// Least-squares slope of `log y` against `log n`.
pub fn fit_slope(n: &[f64], y: &[f64]) -> Result<f64> {
    if n.len() != y.len() || n.len() < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let x: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let z: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let (mx, mz) = (x.iter().sum::<f64>() / k, z.iter().sum::<f64>() / k);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxz: f64 = x.iter().zip(&z).map(|(a, b)| (a - mx) * (b - mz)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("all dof counts coincide".into()));
    }
    Ok(sxz / sxx)
}

/// Slope of `field` against `ndof` over the last half of the records.
pub fn fit_rate(records: &[ConvergenceRecord], field: Field) -> Result<f64> {
    if records.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs at least 4 records, got {}",
            records.len()
        )));
    }
    let tail = &records[records.len() / 2..];
    let mut n = Vec::new();
    let mut y = Vec::new();
    for r in tail {
        let v = field
            .get(r)
            .ok_or_else(|| Error::InvalidArgument(format!("{field:?} missing at level {}", r.level)))?;
        n.push(r.ndof as f64);
        y.push(v);
    }
    fit_slope(&n, &y)
}

/// Everything a level produces besides its record.
pub struct LevelOutput {
    pub mesh: Arc<Triangulation>,
    pub u: FeFunction,
    pub p: FeFunction,
    pub ubar: Option<FeFunction>,
    pub indicators: Vec<f64>,
}

struct Warm {
    primal: AdmmState,
    dual: AdmmState,
}

fn prolong_vec(
    v: &[f64],
    kind: SpaceKind,
    r: &Refinement,
    coarse: &Arc<Triangulation>,
    fine: &Arc<Triangulation>,
) -> Result<Vec<f64>> {
    let f = FeFunction::new(SpaceDescriptor::new(kind, coarse.clone()), v.to_vec())?;
    Ok(prolong(&f, r, fine)?.into_coefficients())
}

/// Transfers an ADMM state; the primary part is dropped when `primary` is `None`.
fn prolong_state(
    s: &AdmmState,
    primary: Option<SpaceKind>,
    aux: SpaceKind,
    r: &Refinement,
    coarse: &Arc<Triangulation>,
    fine: &Arc<Triangulation>,
) -> Result<AdmmState> {
    let x = match primary {
        Some(k) => prolong_vec(&s.primary, k, r, coarse, fine)?,
        None => Vec::new(),
    };
    Ok(AdmmState::new(
        x,
        prolong_vec(&s.auxiliary, aux, r, coarse, fine)?,
        prolong_vec(&s.multiplier, aux, r, coarse, fine)?,
        s.tau,
    ))
}

enum Bench {
    PLaplace(LShapeBenchmark),
    Rof(RofBenchmark),
}

fn initial(bench: &Bench) -> Triangulation {
    match bench {
        Bench::PLaplace(_) => initial_mesh(Domain::LShape),
        Bench::Rof(b) => initial_mesh(Domain::UnitSquareSym).with_uniform_label(b.label()),
    }
}

struct Solved {
    record: ConvergenceRecord,
    output: LevelOutput,
    warm: Warm,
    /// Indicators `eta_T` driving the marking.
    marking: Vec<f64>,
}

fn solve_plaplace(
    config: &RunConfig,
    bench: &LShapeBenchmark,
    mesh: &Arc<Triangulation>,
    warm: Option<Warm>,
) -> Result<Solved> {
    let prob = bench.problem(mesh)?;
    let hbar = average_mesh_size(mesh);
    let admm = config.admm(hbar);
    let (pi, di) = match &warm {
        Some(w) => (
            plaplace::primal_initial_state(&prob, Some(&w.primal), admm.tau0),
            plaplace::dual_initial_state(&prob, Some(&w.dual), admm.tau0)?,
        ),
        None => (
            plaplace::primal_initial_state(&prob, None, admm.tau0),
            plaplace::dual_initial_state(&prob, None, admm.tau0)?,
        ),
    };
    let clock = std::time::Instant::now();
    let primal = plaplace::solve_primal_from(&prob, &admm, pi)?;
    debug!("primal solve {:?}", clock.elapsed());
    let clock = std::time::Instant::now();
    let dual = plaplace::solve_dual_from(&prob, &admm, di)?;
    debug!("dual solve {:?}", clock.elapsed());
    let (u, p) = (&primal.function, &dual.function);
    let pd = plaplace::estimator_pd(u, p, &prob)?;
    let res = match config.estimator {
        EstimatorChoice::Pd => None,
        _ => Some(plaplace::estimator_residual(u, &prob)?),
    };
    let marking = match (&res, config.estimator) {
        (Some(r), EstimatorChoice::Res) => r.local_values(),
        _ => pd.local_values(),
    };
    let record = ConvergenceRecord {
        level: 0,
        ndof: mesh.n_nodes(),
        n_elements: mesh.n_elements(),
        hbar,
        e_primal: plaplace::energy_primal(u, &prob)?,
        d_dual: plaplace::energy_dual_lumped(p, &prob)?,
        eta_pd: pd.value(),
        eta_res: res.as_ref().map(EstimatorReport::value),
        error: Some(bench.quasi_norm_error(u, &prob)?),
        osc: bench.data_error(&prob),
        iters_primal: primal.state.iterations(),
        iters_dual: dual.state.iterations(),
        converged: primal.state.converged && dual.state.converged,
        min_indicator: pd.min_indicator(),
        ubar_error: None,
        jump_sum: None,
        marked: 0,
        marked_near_origin: 0.0,
    };
    Ok(Solved {
        record,
        output: LevelOutput {
            mesh: mesh.clone(),
            u: primal.function.clone(),
            p: dual.function.clone(),
            ubar: None,
            indicators: pd.indicators,
        },
        warm: Warm {
            primal: primal.state,
            dual: dual.state,
        },
        marking,
    })
}

fn interface_band(bench: &RofBenchmark) -> impl Fn([f64; 2]) -> bool {
    let kind = bench.kind;
    move |x: [f64; 2]| {
        let r = match kind {
            RofBenchmarkKind::Circle => x[0].hypot(x[1]),
            RofBenchmarkKind::Square => x[0].abs().max(x[1].abs()),
        };
        (r - 0.5).abs() < 0.1
    }
}

fn solve_rof(
    config: &RunConfig,
    bench: &RofBenchmark,
    mesh: &Arc<Triangulation>,
    warm: Option<Warm>,
) -> Result<Solved> {
    let prob: RofProblem = bench.problem(mesh, config.dual_space)?;
    let hbar = average_mesh_size(mesh);
    let admm = config.admm(hbar);
    let (pi, di) = match &warm {
        Some(w) => {
            let mut pi = w.primal.clone();
            pi.residual_history.clear();
            pi.converged = false;
            let di = rof::dual_initial_state(&prob, Some((&w.dual.auxiliary, &w.dual.multiplier)), w.dual.tau);
            (pi, di)
        }
        None => (
            rof::primal_initial_state(&prob, admm.tau0),
            rof::dual_initial_state(&prob, None, admm.tau0),
        ),
    };
    let clock = std::time::Instant::now();
    let primal = rof::solve_primal_from(&prob, &admm, pi)?;
    debug!("primal solve {:?}", clock.elapsed());
    let clock = std::time::Instant::now();
    let dual = rof::solve_dual_from(&prob, &admm, di)?;
    debug!("dual solve {:?}", clock.elapsed());
    let clock = std::time::Instant::now();
    let (u, p) = (&primal.function, &dual.function);
    let pd = rof::estimator_rof(u, p, &prob)?;
    let ubar = rof::ubar(p, &prob)?;
    let error = bench.exact_energy().map(|_| bench.l2_error_exact(u)).transpose()?;
    let ubar_error = bench.exact_energy().map(|_| bench.l2_error_p0(&ubar)).transpose()?;
    let record = ConvergenceRecord {
        level: 0,
        ndof: mesh.n_nodes(),
        n_elements: mesh.n_elements(),
        hbar,
        e_primal: rof::energy_primal(u, &prob)?,
        d_dual: rof::energy_dual(p, &prob)?,
        eta_pd: pd.value(),
        eta_res: None,
        error,
        osc: bench.data_error(&prob),
        iters_primal: primal.state.iterations(),
        iters_dual: dual.state.iterations(),
        converged: primal.state.converged && dual.state.converged,
        min_indicator: pd.min_indicator(),
        ubar_error,
        jump_sum: Some(rof::jump_sum(&ubar, interface_band(bench))),
        marked: 0,
        marked_near_origin: 0.0,
    };
    debug!("estimates {:?}", clock.elapsed());
    let marking = pd.local_values();
    Ok(Solved {
        record,
        output: LevelOutput {
            mesh: mesh.clone(),
            u: primal.function.clone(),
            p: dual.function.clone(),
            ubar: Some(ubar),
            indicators: pd.indicators,
        },
        warm: Warm {
            primal: primal.state,
            dual: dual.state,
        },
        marking,
    })
}

/// Runs the loop, writing files when `out_dir` is set.
pub fn run(config: &RunConfig) -> Result<Vec<ConvergenceRecord>> {
    run_with(config, |_, _| Ok(()))
}

/// Runs the loop and hands every level to `visit`.
pub fn run_with(
    config: &RunConfig,
    mut visit: impl FnMut(&ConvergenceRecord, &LevelOutput) -> Result<()>,
) -> Result<Vec<ConvergenceRecord>> {
    config.validate()?;
    let bench = match config.problem {
        ProblemKind::PLaplace => Bench::PLaplace(LShapeBenchmark::new(config.sigma.unwrap())),
        ProblemKind::Rof => {
            let b = match config.example {
                Example::Square => RofBenchmark::square(),
                _ => RofBenchmark::circle(),
            };
            Bench::Rof(b.with_alpha(config.alpha.unwrap()))
        }
    };
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut mesh = Arc::new(initial(&bench));
    let mut records = Vec::new();
    let mut warm: Option<Warm> = None;
    for level in 0.. {
        let mut solved = match &bench {
            Bench::PLaplace(b) => solve_plaplace(config, b, &mesh, warm.take())?,
            Bench::Rof(b) => solve_rof(config, b, &mesh, warm.take())?,
        };
        solved.record.level = level;
        if !solved.record.converged {
            warn!(
                "level {level}: ADMM stopped at the iteration cap ({} primal, {} dual)",
                solved.record.iters_primal, solved.record.iters_dual
            );
        }
        let marked = match config.refine {
            RefineMode::Uniform => Some(MarkedSet::all(&mesh)),
            RefineMode::Adaptive => match dorfler_mark(&solved.marking, config.theta)? {
                Marking::Marked(m) => Some(m),
                Marking::Converged => None,
            },
        };
        if let Some(m) = &marked {
            solved.record.marked = m.len();
            let near = m
                .iter()
                .filter(|&t| {
                    let c = mesh.centroid(t);
                    c[0].hypot(c[1]) < 0.25
                })
                .count();
            solved.record.marked_near_origin = near as f64 / m.len().max(1) as f64;
        }
        let r = &solved.record;
        info!(
            "level {level}: ndof {} eta {:.4e} E {:.10e} D {:.10e} iters {}/{}",
            r.ndof, r.eta_pd, r.e_primal, r.d_dual, r.iters_primal, r.iters_dual
        );
        if let Some(dir) = &config.out_dir {
            write_level(dir, level, &solved.output)?;
        }
        visit(&solved.record, &solved.output)?;
        records.push(solved.record);
        if let Some(dir) = &config.out_dir {
            write_csv(&dir.join("convergence.csv"), &records)?;
        }
        let Some(marked) = marked else { break };
        let refinement = refine_with_history(&mesh, &marked)?;
        if refinement.mesh.n_nodes() > config.max_dofs {
            break;
        }
        let fine = Arc::new(refinement.mesh.clone());
        let (primal_kind, dual_primary) = match config.problem {
            ProblemKind::PLaplace => (SpaceKind::P1Scalar, Some(SpaceKind::P1DiscVector)),
            ProblemKind::Rof => (SpaceKind::P1Scalar, None),
        };
        let w = solved.warm;
        warm = Some(Warm {
            primal: prolong_state(
                &w.primal,
                Some(primal_kind),
                SpaceKind::P0Vector,
                &refinement,
                &mesh,
                &fine,
            )?,
            dual: prolong_state(
                &w.dual,
                dual_primary,
                SpaceKind::P1DiscVector,
                &refinement,
                &mesh,
                &fine,
            )?,
        });
        mesh = fine;
    }
    Ok(records)
}

pub const CSV_HEADER: &str = "level,ndof,hbar,E_primal,D_dual,eta_pd,eta_res,error,osc,iters_primal,iters_dual,eta_com";

fn float(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

pub fn csv_string(records: &[ConvergenceRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.level,
            r.ndof,
            float(Some(r.hbar)),
            float(Some(r.e_primal)),
            float(Some(r.d_dual)),
            float(Some(r.eta_pd)),
            float(r.eta_res),
            float(r.error),
            float(Some(r.osc)),
            r.iters_primal,
            r.iters_dual,
            float(r.eta_com()),
        );
    }
    out
}

pub fn write_csv(path: &Path, records: &[ConvergenceRecord]) -> Result<()> {
    fs::write(path, csv_string(records)).map_err(|e| Error::io(path, e))
}

/// Legacy ASCII VTK: nodal `u`, cell indicator, optional cell `ubar`, cell mean of `p`.
pub fn vtk_string(out: &LevelOutput) -> String {
    let mesh = &out.mesh;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# vtk DataFile Version 3.0\nafem level\nASCII\nDATASET UNSTRUCTURED_GRID"
    );
    let _ = writeln!(s, "POINTS {} double", mesh.n_nodes());
    for x in mesh.nodes() {
        let _ = writeln!(s, "{:.16e} {:.16e} 0", x[0], x[1]);
    }
    let m = mesh.n_elements();
    let _ = writeln!(s, "CELLS {} {}", m, 4 * m);
    for el in mesh.elements() {
        let _ = writeln!(s, "3 {} {} {}", el[0], el[1], el[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {m}");
    for _ in 0..m {
        s.push_str("5\n");
    }
    let _ = writeln!(
        s,
        "POINT_DATA {}\nSCALARS u double 1\nLOOKUP_TABLE default",
        mesh.n_nodes()
    );
    for v in out.u.coefficients() {
        let _ = writeln!(s, "{v:.16e}");
    }
    let _ = writeln!(s, "CELL_DATA {m}\nSCALARS indicator double 1\nLOOKUP_TABLE default");
    for v in &out.indicators {
        let _ = writeln!(s, "{v:.16e}");
    }
    if let Some(ub) = &out.ubar {
        let _ = writeln!(s, "SCALARS ubar double 1\nLOOKUP_TABLE default");
        for v in ub.coefficients() {
            let _ = writeln!(s, "{v:.16e}");
        }
    }
    let _ = writeln!(s, "VECTORS p double");
    for c in out.p.coefficients().chunks(6) {
        let _ = writeln!(
            s,
            "{:.16e} {:.16e} 0",
            (c[0] + c[2] + c[4]) / 3.0,
            (c[1] + c[3] + c[5]) / 3.0
        );
    }
    s
}

pub fn write_level(dir: &Path, level: usize, out: &LevelOutput) -> Result<()> {
    out.mesh.write(dir.join(format!("mesh_{level:02}.txt")))?;
    let path = dir.join(format!("level_{level:02}.vtk"));
    fs::write(&path, vtk_string(out)).map_err(|e| Error::io(&path, e))
}

pub const REFERENCE_TOL: f64 = 1e-10;

/// Minimal energy of the discrete-data functional of `prob` over P1 on the
/// mesh refined uniformly `levels` times; cached in `cache_dir` under a hash
/// of the data.
pub fn reference_energy(prob: &PLaplaceProblem, levels: usize, cache_dir: Option<&Path>) -> Result<f64> {
    let mut h = DefaultHasher::new();
    (prob.sigma.to_bits(), levels, prob.mesh().to_text()).hash(&mut h);
    for v in prob.f_h().iter().chain(prob.dirichlet_values()) {
        v.to_bits().hash(&mut h);
    }
    let file = cache_dir.map(|d| d.join(format!("eref_plaplace_{:016x}.txt", h.finish())));
    if let Some(Ok(e)) = file
        .as_ref()
        .and_then(|f| fs::read_to_string(f).ok())
        .map(|t| t.trim().parse::<f64>())
    {
        return Ok(e);
    }
    let fine = prob.refined_uniformly(levels)?;
    let config = AdmmConfig {
        tau0: 1.0,
        adapt: StepRule::ResidualBalance,
        tol: REFERENCE_TOL,
        max_iters: 50_000,
    };
    let u = plaplace::solve_primal(&fine, &config)?;
    if !u.state.converged {
        warn!("reference solve stopped at the iteration cap");
    }
    let e = plaplace::energy_primal(&u.function, &fine)?;
    if let (Some(f), Some(d)) = (&file, cache_dir) {
        fs::create_dir_all(d).map_err(|err| Error::io(d, err))?;
        fs::write(f, format!("{e:.17e}\n")).map_err(|err| Error::io(f, err))?;
    }
    Ok(e)
}
