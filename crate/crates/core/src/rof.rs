//! Rudin-Osher-Fatemi denoising: `min int |grad u| + alpha/2 |u - g|^2`.
//!
//! The dual problem maximizes
//! `-1/(2 alpha) |div p + alpha g_h|^2 + alpha/2 |g_h|^2` over fields with
//! `|p| <= 1`, discretized either by continuous P1 vector fields (`C`) or by
//! discontinuous fields with continuous normal traces (`DC`).

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{average_mesh_size, BoundaryLabel, Triangulation};
use crate::plaplace::EstimatorReport;
use crate::solver::{
    admm_run, project_ball, shrink, AdmmConfig, AdmmState, Block, BlockDiagonal, DirichletSystem, EqualityQp,
    SaddleProblem, SparseCholesky, SparseMatrix,
};
use crate::spaces::{
    continuity_constraints, l2_project_p0, lumped_mass, mass, p1_gradients, quadrature, stiffness, vector_divergence,
    FeFunction, Point, SpaceDescriptor, SpaceKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RofBoundary {
    NeumannAll,
    DirichletAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DualSpace {
    /// Continuous P1 vector fields with vanishing normal trace on Neumann sides.
    C,
    /// Elementwise affine fields with continuous normal traces.
    DC,
}

#[derive(Clone, Debug)]
pub struct RofProblem {
    pub alpha: f64,
    mesh: Arc<Triangulation>,
    g_h: Vec<f64>,
    pub bc: RofBoundary,
    pub dual_space: DualSpace,
    /// Exponent of the mesh-size weight `h_T^gamma` in the primal splitting.
    pub gamma: f64,
    /// Same for the lumped pairing of the dual splitting.
    pub dual_gamma: f64,
}

impl RofProblem {
    pub fn new(alpha: f64, g_h: &FeFunction, bc: RofBoundary, dual_space: DualSpace) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if g_h.kind() != SpaceKind::P0Scalar {
            return Err(Error::InvalidArgument("g_h must be elementwise constant".into()));
        }
        let mesh = g_h.mesh().clone();
        let wanted = match bc {
            RofBoundary::NeumannAll => BoundaryLabel::Neumann,
            RofBoundary::DirichletAll => BoundaryLabel::Dirichlet,
        };
        if mesh.boundary().iter().any(|b| b.label != wanted) {
            return Err(Error::InvalidArgument(format!(
                "boundary labels of the mesh do not match {bc:?}"
            )));
        }
        Ok(Self {
            alpha,
            mesh,
            g_h: g_h.coefficients().to_vec(),
            bc,
            dual_space,
            gamma: 0.0,
            dual_gamma: -2.0,
        })
    }

    pub fn mesh(&self) -> &Arc<Triangulation> {
        &self.mesh
    }

    pub fn g_h(&self) -> &[f64] {
        &self.g_h
    }

    pub fn fixed_nodes(&self) -> Vec<bool> {
        match self.bc {
            RofBoundary::NeumannAll => vec![false; self.mesh.n_nodes()],
            RofBoundary::DirichletAll => self.mesh.boundary_nodes(BoundaryLabel::Dirichlet),
        }
    }

    pub fn primal_space(&self) -> SpaceDescriptor {
        let s = SpaceDescriptor::p1(self.mesh.clone());
        match self.bc {
            RofBoundary::NeumannAll => s,
            RofBoundary::DirichletAll => s.with_dirichlet(),
        }
    }

    pub fn dual_space_descriptor(&self) -> SpaceDescriptor {
        SpaceDescriptor::bdm(self.mesh.clone(), self.bc == RofBoundary::NeumannAll)
    }

    fn check_primal(&self, u: &FeFunction) -> Result<()> {
        if u.kind() != SpaceKind::P1Scalar || u.mesh().id() != self.mesh.id() {
            return Err(Error::SpaceMismatch);
        }
        Ok(())
    }

    fn check_dual(&self, p: &FeFunction) -> Result<()> {
        if !matches!(p.kind(), SpaceKind::Bdm | SpaceKind::P1DiscVector) || p.mesh().id() != self.mesh.id() {
            return Err(Error::SpaceMismatch);
        }
        let (worst, value) = max_vertex_norm(p.coefficients());
        if value > 1.0 + 1e-10 {
            let t = worst / 3;
            let node = self.mesh.elements()[t][worst % 3];
            return Err(Error::Infeasible(format!(
                "|p| = {value} at node {node} of element {t}"
            )));
        }
        Ok(())
    }

    fn g_norm_squared(&self) -> f64 {
        (0..self.mesh.n_elements())
            .map(|t| self.mesh.area(t) * self.g_h[t].powi(2))
            .sum()
    }
}

/// Index (element * 3 + vertex) and value of the largest vertex norm.
fn max_vertex_norm(p: &[f64]) -> (usize, f64) {
    p.chunks(2)
        .map(|v| v[0].hypot(v[1]))
        .enumerate()
        .fold((0, 0.0), |m, e| if e.1 > m.1 { e } else { m })
}

/// `int_T (u - c)^2` for affine `u` with vertex values `w + c`.
fn affine_square(area: f64, w: [f64; 3]) -> f64 {
    area / 6.0 * (w[0] * w[0] + w[1] * w[1] + w[2] * w[2] + w[0] * w[1] + w[1] * w[2] + w[0] * w[2])
}

pub fn energy_primal(u: &FeFunction, prob: &RofProblem) -> Result<f64> {
    prob.check_primal(u)?;
    let mesh = prob.mesh();
    let c = u.coefficients();
    let grads = p1_gradients(mesh, c);
    Ok((0..mesh.n_elements())
        .map(|t| {
            let el = mesh.elements()[t];
            let a = mesh.area(t);
            let w = el.map(|z| c[z] - prob.g_h[t]);
            a * grads[t][0].hypot(grads[t][1]) + 0.5 * prob.alpha * affine_square(a, w)
        })
        .sum())
}

/// Dual energy; fields exceeding the unit ball at a vertex are infeasible.
pub fn energy_dual(p: &FeFunction, prob: &RofProblem) -> Result<f64> {
    prob.check_dual(p)?;
    let mesh = prob.mesh();
    let div = vector_divergence(mesh, p.coefficients());
    let a = prob.alpha;
    let misfit: f64 = (0..mesh.n_elements())
        .map(|t| mesh.area(t) * (div[t] + a * prob.g_h[t]).powi(2))
        .sum();
    Ok(-misfit / (2.0 * a) + 0.5 * a * prob.g_norm_squared())
}

/// Local contributions
/// `int_T |grad v| - grad v . q + 1/(2 alpha) (div q - alpha (v - g_h))^2`.
pub fn estimator_rof(v: &FeFunction, q: &FeFunction, prob: &RofProblem) -> Result<EstimatorReport> {
    prob.check_primal(v)?;
    prob.check_dual(q)?;
    let mesh = prob.mesh();
    let grads = p1_gradients(mesh, v.coefficients());
    let div = vector_divergence(mesh, q.coefficients());
    let (vc, qc) = (v.coefficients(), q.coefficients());
    let a = prob.alpha;
    let indicators = (0..mesh.n_elements())
        .map(|t| {
            let g = grads[t];
            let area = mesh.area(t);
            let el = mesh.elements()[t];
            let mut qm = [0.0; 2];
            for k in 0..3 {
                qm[0] += qc[6 * t + 2 * k] / 3.0;
                qm[1] += qc[6 * t + 2 * k + 1] / 3.0;
            }
            let w = el.map(|z| div[t] - a * (vc[z] - prob.g_h[t]));
            area * (g[0].hypot(g[1]) - g[0] * qm[0] - g[1] * qm[1]) + affine_square(area, w) / (2.0 * a)
        })
        .collect();
    Ok(EstimatorReport { indicators })
}

/// Piecewise constant reconstruction `div p / alpha + g_h`.
pub fn ubar(p: &FeFunction, prob: &RofProblem) -> Result<FeFunction> {
    if p.mesh().id() != prob.mesh.id() {
        return Err(Error::SpaceMismatch);
    }
    let div = vector_divergence(prob.mesh(), p.coefficients());
    let c = div.iter().zip(&prob.g_h).map(|(d, g)| d / prob.alpha + g).collect();
    FeFunction::new(SpaceDescriptor::p0(prob.mesh.clone()), c)
}

/// Scales all element values at a node by one common factor so that every
/// one of them lies in the unit ball. Normal continuity is preserved.
pub fn scale_into_ball(mesh: &Triangulation, p: &mut [f64]) {
    let mut factor = vec![1.0f64; mesh.n_nodes()];
    for (t, el) in mesh.elements().iter().enumerate() {
        for (k, &z) in el.iter().enumerate() {
            let n = p[6 * t + 2 * k].hypot(p[6 * t + 2 * k + 1]);
            if n > 1.0 {
                factor[z] = factor[z].min(1.0 / n);
            }
        }
    }
    for (t, el) in mesh.elements().iter().enumerate() {
        for (k, &z) in el.iter().enumerate() {
            p[6 * t + 2 * k] *= factor[z];
            p[6 * t + 2 * k + 1] *= factor[z];
        }
    }
}

/// Characteristic function of a centered disk or square of radius `r`.
#[derive(Clone, Copy, Debug)]
pub enum Indicator {
    Disk(f64),
    Square(f64),
}

impl Indicator {
    pub fn value(&self, x: Point) -> f64 {
        f64::from(u8::from(self.level(x) <= 0.0))
    }

    fn level(&self, x: Point) -> f64 {
        match *self {
            Indicator::Disk(r) => x[0].hypot(x[1]) - r,
            Indicator::Square(r) => x[0].abs().max(x[1].abs()) - r,
        }
    }

    /// Whether the set boundary passes through the interior of the triangle.
    pub fn cuts(&self, v: &[Point; 3]) -> bool {
        let levels = v.map(|x| self.level(x));
        if levels.iter().all(|&l| l <= 0.0) {
            // convex set: the triangle is contained
            return false;
        }
        if levels.iter().any(|&l| l < 0.0) {
            return true;
        }
        match *self {
            Indicator::Disk(r) => point_triangle_distance([0.0, 0.0], v) < r,
            Indicator::Square(r) => triangle_meets_box(v, r),
        }
    }
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let s = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
    (p[0] - a[0] - s * d[0]).hypot(p[1] - a[1] - s * d[1])
}

fn point_triangle_distance(p: Point, v: &[Point; 3]) -> f64 {
    let cross = |a: Point, b: Point| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let s = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
    if s.iter().all(|&c| c >= 0.0) || s.iter().all(|&c| c <= 0.0) {
        return 0.0;
    }
    (0..3)
        .map(|k| point_segment_distance(p, v[k], v[(k + 1) % 3]))
        .fold(f64::INFINITY, f64::min)
}

/// Separating-axis test of a triangle against the open box `(-r, r)^2`.
fn triangle_meets_box(v: &[Point; 3], r: f64) -> bool {
    for c in 0..2 {
        let lo = v.iter().map(|x| x[c]).fold(f64::INFINITY, f64::min);
        let hi = v.iter().map(|x| x[c]).fold(f64::NEG_INFINITY, f64::max);
        if hi <= -r || lo >= r {
            return false;
        }
    }
    for k in 0..3 {
        let a = v[k];
        let b = v[(k + 1) % 3];
        let n = [b[1] - a[1], a[0] - b[0]];
        let proj = |x: Point| n[0] * x[0] + n[1] * x[1];
        let tri: Vec<f64> = v.iter().map(|&x| proj(x)).collect();
        let (tlo, thi) = (
            tri.iter().copied().fold(f64::INFINITY, f64::min),
            tri.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        let reach = r * (n[0].abs() + n[1].abs());
        if thi <= -reach || tlo >= reach {
            return false;
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RofBenchmarkKind {
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug)]
pub struct RofBenchmark {
    pub kind: RofBenchmarkKind,
    pub alpha: f64,
    pub g: Indicator,
}

/// Red subdivisions used on elements cut by the data interface.
pub const INTERFACE_DEPTH: u32 = 4;

impl RofBenchmark {
    pub fn square() -> Self {
        Self {
            kind: RofBenchmarkKind::Square,
            alpha: 100.0,
            g: Indicator::Square(0.5),
        }
    }

    pub fn circle() -> Self {
        Self {
            kind: RofBenchmarkKind::Circle,
            alpha: 10.0,
            g: Indicator::Disk(0.5),
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Height of the exact solution `c chi` for disk data of radius 1/2.
    fn disk_height(&self) -> f64 {
        (1.0 - 4.0 / self.alpha).max(0.0)
    }

    pub fn boundary(&self) -> RofBoundary {
        match self.kind {
            RofBenchmarkKind::Square => RofBoundary::NeumannAll,
            RofBenchmarkKind::Circle => RofBoundary::DirichletAll,
        }
    }

    pub fn label(&self) -> BoundaryLabel {
        match self.boundary() {
            RofBoundary::NeumannAll => BoundaryLabel::Neumann,
            RofBoundary::DirichletAll => BoundaryLabel::Dirichlet,
        }
    }

    pub fn exact(&self, x: Point) -> Option<f64> {
        match self.kind {
            RofBenchmarkKind::Circle => Some(self.disk_height() * self.g.value(x)),
            RofBenchmarkKind::Square => None,
        }
    }

    /// Optimal energy `TV(u) + alpha/2 |u - g|^2` of the exact solution.
    pub fn exact_energy(&self) -> Option<f64> {
        match self.kind {
            RofBenchmarkKind::Circle => {
                let (c, pi) = (self.disk_height(), std::f64::consts::PI);
                Some(c * pi + 0.5 * self.alpha * (1.0 - c).powi(2) * pi / 4.0)
            }
            RofBenchmarkKind::Square => None,
        }
    }

    pub fn depth(&self, mesh: &Triangulation, t: usize) -> u32 {
        if self.g.cuts(&mesh.vertices(t)) {
            INTERFACE_DEPTH
        } else {
            0
        }
    }

    pub fn problem(&self, mesh: &Arc<Triangulation>, dual_space: DualSpace) -> Result<RofProblem> {
        let g = self.g;
        let g_h = l2_project_p0(mesh, |x| g.value(x), |t| self.depth(mesh, t));
        RofProblem::new(self.alpha, &g_h, self.boundary(), dual_space)
    }

    /// `||g - g_h||`.
    pub fn data_error(&self, prob: &RofProblem) -> f64 {
        let mesh = prob.mesh();
        (0..mesh.n_elements())
            .into_par_iter()
            .map(|t| {
                quadrature::integrate(mesh.vertices(t), self.depth(mesh, t), &mut |x| {
                    (self.g.value(x) - prob.g_h[t]).powi(2)
                })
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum::<f64>()
            .sqrt()
    }

    /// `(alpha/2)^(1/2) ||u - u_h||` for the benchmark with a known solution.
    pub fn l2_error_exact(&self, u_h: &FeFunction) -> Result<f64> {
        if self.exact_energy().is_none() {
            return Err(Error::InvalidArgument("benchmark has no exact solution".into()));
        }
        if u_h.kind() != SpaceKind::P1Scalar {
            return Err(Error::SpaceMismatch);
        }
        let mesh = u_h.mesh();
        let total: f64 = (0..mesh.n_elements())
            .into_par_iter()
            .map(|t| {
                quadrature::integrate(mesh.vertices(t), self.depth(mesh, t), &mut |x| {
                    (self.exact(x).unwrap() - u_h.eval(t, x)).powi(2)
                })
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum::<f64>();
        Ok((0.5 * self.alpha * total).sqrt())
    }

    /// `||u - w||` for an elementwise constant `w`.
    pub fn l2_error_p0(&self, w: &FeFunction) -> Result<f64> {
        if self.exact_energy().is_none() || w.kind() != SpaceKind::P0Scalar {
            return Err(Error::InvalidArgument(
                "needs the exact solution and a P0 function".into(),
            ));
        }
        let mesh = w.mesh();
        let c = w.coefficients();
        Ok((0..mesh.n_elements())
            .into_par_iter()
            .map(|t| {
                quadrature::integrate(mesh.vertices(t), self.depth(mesh, t), &mut |x| {
                    (self.exact(x).unwrap() - c[t]).powi(2)
                })
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum::<f64>()
            .sqrt())
    }
}

/// `sum |S| |w_T - w_T'|` over interior sides whose midpoint satisfies `band`.
pub fn jump_sum(w: &FeFunction, band: impl Fn(Point) -> bool) -> f64 {
    let mesh = w.mesh();
    let c = w.coefficients();
    mesh.sides()
        .iter()
        .filter_map(|s| {
            let nb = s.neighbor?;
            band(s.midpoint(mesh)).then(|| s.length * (c[s.element] - c[nb]).abs())
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub function: FeFunction,
    pub state: AdmmState,
}

fn tau_key(tau: f64) -> u64 {
    tau.to_bits()
}

/// Keeps a handful of factorizations keyed by the step size.
struct FactorCache<T> {
    entries: HashMap<u64, Arc<T>>,
}

impl<T> FactorCache<T> {
    fn new() -> Self {
        Self {
            entries: HashMap::new(),
        }
    }

    fn get(&mut self, tau: f64, build: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        if let Some(f) = self.entries.get(&tau_key(tau)) {
            return Ok(f.clone());
        }
        if self.entries.len() >= 4 {
            self.entries.clear();
        }
        let f = Arc::new(build()?);
        self.entries.insert(tau_key(tau), f.clone());
        Ok(f)
    }
}

fn gradient_transpose(mesh: &Triangulation, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_nodes()];
    for (t, el) in mesh.elements().iter().enumerate() {
        let g = mesh.gradients(t);
        for k in 0..3 {
            out[el[k]] += v[2 * t] * g[k][0] + v[2 * t + 1] * g[k][1];
        }
    }
    out
}

fn data_load(prob: &RofProblem) -> Vec<f64> {
    let mesh = prob.mesh();
    let mut load = vec![0.0; mesh.n_nodes()];
    for (t, el) in mesh.elements().iter().enumerate() {
        for &z in el {
            load[z] += prob.alpha * prob.g_h[t] * mesh.area(t) / 3.0;
        }
    }
    load
}

fn add(a: &SparseMatrix, sa: f64, b: &SparseMatrix, sb: f64) -> SparseMatrix {
    let mut t = Vec::with_capacity(a.nnz() + b.nnz());
    for i in 0..a.nrows() {
        t.extend(a.row(i).map(|(j, v)| (i, j, sa * v)));
        t.extend(b.row(i).map(|(j, v)| (i, j, sb * v)));
    }
    SparseMatrix::from_triplets(a.nrows(), a.ncols(), &t)
}

struct PrimalSplitting<'a> {
    prob: &'a RofProblem,
    mass: SparseMatrix,
    stiffness: SparseMatrix,
    fixed: Vec<bool>,
    load: Vec<f64>,
    h_weights: Vec<f64>,
    weights: Vec<f64>,
    cache: FactorCache<DirichletSystem>,
}

impl<'a> PrimalSplitting<'a> {
    fn new(prob: &'a RofProblem) -> Self {
        let mesh = prob.mesh();
        let h_weights: Vec<f64> = mesh.diameters().iter().map(|h| h.powf(prob.gamma)).collect();
        let weights = (0..mesh.n_elements())
            .flat_map(|t| {
                let w = mesh.area(t) * h_weights[t];
                [w, w]
            })
            .collect();
        Self {
            prob,
            mass: mass(mesh),
            stiffness: stiffness(mesh, Some(&h_weights)),
            fixed: prob.fixed_nodes(),
            load: data_load(prob),
            h_weights,
            weights,
            cache: FactorCache::new(),
        }
    }
}

impl SaddleProblem for PrimalSplitting<'_> {
    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn primary_update(&mut self, r: &[f64], lambda: &[f64], tau: f64) -> Result<Vec<f64>> {
        // (alpha M + tau K_w) u = alpha M g_h + D^T W (tau r - lambda)
        let (m, k, alpha, fixed) = (&self.mass, &self.stiffness, self.prob.alpha, &self.fixed);
        let system = self
            .cache
            .get(tau, || DirichletSystem::new(add(m, alpha, k, tau), fixed))?;
        let wv: Vec<f64> = (0..r.len())
            .map(|i| self.weights[i] * (tau * r[i] - lambda[i]))
            .collect();
        let dt = gradient_transpose(self.prob.mesh(), &wv);
        let rhs: Vec<f64> = dt.iter().zip(&self.load).map(|(a, b)| a + b).collect();
        Ok(system.solve(&rhs, &vec![0.0; rhs.len()]))
    }

    fn couple(&self, u: &[f64]) -> Vec<f64> {
        p1_gradients(self.prob.mesh(), u).concat()
    }

    fn auxiliary_update(&self, z: &[f64], tau: f64) -> Result<Vec<f64>> {
        Ok((0..self.h_weights.len())
            .flat_map(|t| shrink([z[2 * t], z[2 * t + 1]], 1.0 / (tau * self.h_weights[t])))
            .collect())
    }
}

pub fn primal_initial_state(prob: &RofProblem, tau0: f64) -> AdmmState {
    let mesh = prob.mesh();
    let n = 2 * mesh.n_elements();
    AdmmState::new(vec![0.0; mesh.n_nodes()], vec![0.0; n], vec![0.0; n], tau0)
}

pub fn solve_primal(prob: &RofProblem, config: &AdmmConfig) -> Result<Solution> {
    solve_primal_from(prob, config, primal_initial_state(prob, config.tau0))
}

pub fn solve_primal_from(prob: &RofProblem, config: &AdmmConfig, initial: AdmmState) -> Result<Solution> {
    let mut split = PrimalSplitting::new(prob);
    let state = admm_run(&mut split, config, initial)?;
    let function = FeFunction::new(prob.primal_space(), state.primary.clone())?;
    Ok(Solution { function, state })
}

/// Element Hessian `(1/alpha)|T| d d^T + tau w I` of the dual p-update.
fn dual_block(mesh: &Triangulation, t: usize, alpha: f64, tau: f64, w: f64) -> DMatrix<f64> {
    let g = mesh.gradients(t);
    let a = mesh.area(t);
    let d: Vec<f64> = (0..6).map(|i| g[i / 2][i % 2]).collect();
    DMatrix::from_fn(6, 6, |i, j| {
        a / alpha * d[i] * d[j] + if i == j { tau * w } else { 0.0 }
    })
}

/// Reduced basis of continuous P1 vector fields: for every element vertex,
/// the global dofs and their direction vectors.
struct ContinuousBasis {
    n: usize,
    /// per (element, vertex): list of (dof, direction)
    local: Vec<Vec<(usize, Point)>>,
}

impl ContinuousBasis {
    fn new(mesh: &Triangulation, bc: RofBoundary) -> Self {
        let nn = mesh.n_nodes();
        let mut tangents: Vec<Vec<Point>> = vec![Vec::new(); nn];
        if bc == RofBoundary::NeumannAll {
            for s in mesh.sides().iter().filter(|s| !s.is_interior()) {
                for &z in &s.nodes {
                    tangents[z].push([-s.normal[1], s.normal[0]]);
                }
            }
        }
        let mut dofs: Vec<Vec<(usize, Point)>> = Vec::with_capacity(nn);
        let mut n = 0;
        for t in &tangents {
            let entry = match t.as_slice() {
                [] => {
                    n += 2;
                    vec![(n - 2, [1.0, 0.0]), (n - 1, [0.0, 1.0])]
                }
                [a, b] if (a[0] * b[1] - a[1] * b[0]).abs() < 1e-12 => {
                    n += 1;
                    vec![(n - 1, *a)]
                }
                _ => Vec::new(),
            };
            dofs.push(entry);
        }
        let local = mesh
            .elements()
            .iter()
            .flat_map(|el| el.iter().map(|&z| dofs[z].clone()).collect::<Vec<_>>())
            .collect();
        Self { n, local }
    }

    fn expand(&self, x: &[f64]) -> Vec<f64> {
        self.local
            .iter()
            .flat_map(|dofs| {
                let mut v = [0.0; 2];
                for &(i, d) in dofs {
                    v[0] += x[i] * d[0];
                    v[1] += x[i] * d[1];
                }
                v
            })
            .collect()
    }

    fn restrict(&self, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (v, dofs) in self.local.iter().enumerate() {
            for &(i, d) in dofs {
                out[i] += b[2 * v] * d[0] + b[2 * v + 1] * d[1];
            }
        }
        out
    }

    fn assemble(&self, mesh: &Triangulation, alpha: f64, tau: f64, weights: &[f64]) -> SparseMatrix {
        let mut t = Vec::new();
        for e in 0..mesh.n_elements() {
            let h = dual_block(mesh, e, alpha, tau, weights[6 * e]);
            for ka in 0..3 {
                for &(i, di) in &self.local[3 * e + ka] {
                    for kb in 0..3 {
                        for &(j, dj) in &self.local[3 * e + kb] {
                            let mut v = 0.0;
                            for a in 0..2 {
                                for b in 0..2 {
                                    v += di[a] * h[(2 * ka + a, 2 * kb + b)] * dj[b];
                                }
                            }
                            t.push((i, j, v));
                        }
                    }
                }
            }
        }
        SparseMatrix::from_triplets(self.n, self.n, &t)
    }
}

enum DualFactor {
    Hybrid(EqualityQp),
    Continuous(SparseCholesky),
}

struct DualSplitting<'a> {
    prob: &'a RofProblem,
    constraints: Option<SparseMatrix>,
    basis: Option<ContinuousBasis>,
    weights: Vec<f64>,
    /// `-|T| g_T d_T` per element dof
    data: Vec<f64>,
    cache: FactorCache<DualFactor>,
}

impl<'a> DualSplitting<'a> {
    fn new(prob: &'a RofProblem) -> Result<Self> {
        let mesh = prob.mesh();
        let m = mesh.n_elements();
        let weights: Vec<f64> = (0..m)
            .flat_map(|t| [mesh.area(t) / 3.0 * mesh.diameter(t).powf(prob.dual_gamma); 6])
            .collect();
        let data = (0..m)
            .flat_map(|t| {
                let g = mesh.gradients(t);
                let s = -mesh.area(t) * prob.g_h[t];
                (0..6).map(move |i| s * g[i / 2][i % 2])
            })
            .collect();
        let (constraints, basis) = match prob.dual_space {
            DualSpace::DC => (Some(continuity_constraints(&prob.dual_space_descriptor())?), None),
            DualSpace::C => (None, Some(ContinuousBasis::new(mesh, prob.bc))),
        };
        Ok(Self {
            prob,
            constraints,
            basis,
            weights,
            data,
            cache: FactorCache::new(),
        })
    }

    fn factor(&mut self, tau: f64) -> Result<Arc<DualFactor>> {
        let mesh = self.prob.mesh();
        let alpha = self.prob.alpha;
        let (constraints, basis, weights) = (&self.constraints, &self.basis, &self.weights);
        self.cache.get(tau, || match (constraints, basis) {
            (Some(c), _) => {
                let blocks = (0..mesh.n_elements())
                    .map(|t| Block {
                        dofs: (6 * t..6 * t + 6).collect(),
                        matrix: dual_block(mesh, t, alpha, tau, weights[6 * t]),
                    })
                    .collect();
                let h = BlockDiagonal {
                    dim: 6 * mesh.n_elements(),
                    blocks,
                };
                Ok(DualFactor::Hybrid(EqualityQp::new(&h, c)?))
            }
            (None, Some(b)) => Ok(DualFactor::Continuous(SparseCholesky::factor(
                &b.assemble(mesh, alpha, tau, weights),
            )?)),
            (None, None) => unreachable!(),
        })
    }
}

impl SaddleProblem for DualSplitting<'_> {
    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn primary_update(&mut self, q: &[f64], mu: &[f64], tau: f64) -> Result<Vec<f64>> {
        let b: Vec<f64> = (0..q.len())
            .map(|i| self.data[i] + self.weights[i] * (tau * q[i] - mu[i]))
            .collect();
        let factor = self.factor(tau)?;
        match factor.as_ref() {
            DualFactor::Hybrid(qp) => Ok(qp.solve(&b, &vec![0.0; qp.n_constraints()])?.0),
            DualFactor::Continuous(ch) => {
                let basis = self.basis.as_ref().unwrap();
                Ok(ch.solve(&basis.restrict(&b)))
            }
        }
    }

    fn couple(&self, x: &[f64]) -> Vec<f64> {
        match &self.basis {
            Some(b) => b.expand(x),
            None => x.to_vec(),
        }
    }

    fn auxiliary_update(&self, z: &[f64], _tau: f64) -> Result<Vec<f64>> {
        Ok(z.chunks(2).flat_map(|v| project_ball([v[0], v[1]])).collect())
    }
}

/// Initial dual state from elementwise values of `q` and `mu` (zeros if absent).
pub fn dual_initial_state(prob: &RofProblem, q: Option<(&[f64], &[f64])>, tau0: f64) -> AdmmState {
    let mesh = prob.mesh();
    let n = 6 * mesh.n_elements();
    let primary = match prob.dual_space {
        DualSpace::DC => vec![0.0; n],
        DualSpace::C => vec![0.0; ContinuousBasis::new(mesh, prob.bc).n],
    };
    match q {
        Some((q, mu)) => AdmmState::new(primary, q.to_vec(), mu.to_vec(), tau0),
        None => AdmmState::new(primary, vec![0.0; n], vec![0.0; n], tau0),
    }
}

pub fn solve_dual(prob: &RofProblem, config: &AdmmConfig) -> Result<Solution> {
    solve_dual_from(prob, config, dual_initial_state(prob, None, config.tau0))
}

/// Returns the constrained iterate scaled nodewise into the unit ball.
pub fn solve_dual_from(prob: &RofProblem, config: &AdmmConfig, initial: AdmmState) -> Result<Solution> {
    let mut split = DualSplitting::new(prob)?;
    let state = admm_run(&mut split, config, initial)?;
    let mut p = split.couple(&state.primary);
    scale_into_ball(prob.mesh(), &mut p);
    let function = FeFunction::new(prob.dual_space_descriptor(), p)?;
    energy_dual(&function, prob)?;
    Ok(Solution { function, state })
}

/// Iterate `(u_prev, u, p)` of the primal-dual algorithm with `p` elementwise constant.
#[derive(Clone, Debug)]
pub struct PrimalDualState {
    pub u_prev: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
}

/// Primal-dual iteration with the u-step metric `M_L + hbar K`.
pub struct PrimalDualSolver<'a> {
    prob: &'a RofProblem,
    tau: f64,
    metric: SparseMatrix,
    system: DirichletSystem,
    load: Vec<f64>,
}

impl<'a> PrimalDualSolver<'a> {
    /// Step sizes `tau = sigma = hbar^(1/2) / 2` unless given.
    pub fn new(prob: &'a RofProblem, tau: Option<f64>) -> Result<Self> {
        let mesh = prob.mesh();
        let hbar = average_mesh_size(mesh);
        let tau = tau.unwrap_or(0.5 * hbar.sqrt());
        let lumped: Vec<(usize, usize, f64)> = lumped_mass(mesh)
            .into_iter()
            .enumerate()
            .map(|(i, v)| (i, i, v))
            .collect();
        let metric = add(
            &SparseMatrix::from_triplets(mesh.n_nodes(), mesh.n_nodes(), &lumped),
            1.0,
            &stiffness(mesh, None),
            hbar,
        );
        let system = DirichletSystem::new(add(&mass(mesh), prob.alpha, &metric, 1.0 / tau), &prob.fixed_nodes())?;
        Ok(Self {
            prob,
            tau,
            metric,
            system,
            load: data_load(prob),
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn initial_state(&self) -> PrimalDualState {
        let mesh = self.prob.mesh();
        PrimalDualState {
            u_prev: vec![0.0; mesh.n_nodes()],
            u: vec![0.0; mesh.n_nodes()],
            p: vec![0.0; 2 * mesh.n_elements()],
        }
    }

    pub fn step(&self, state: &PrimalDualState) -> PrimalDualState {
        let mesh = self.prob.mesh();
        let tilde: Vec<f64> = state.u.iter().zip(&state.u_prev).map(|(a, b)| 2.0 * a - b).collect();
        let g = p1_gradients(mesh, &tilde);
        let p: Vec<f64> = (0..mesh.n_elements())
            .flat_map(|t| {
                project_ball([
                    state.p[2 * t] + self.tau * g[t][0],
                    state.p[2 * t + 1] + self.tau * g[t][1],
                ])
            })
            .collect();
        let weighted: Vec<f64> = (0..p.len()).map(|i| mesh.area(i / 2) * p[i]).collect();
        let dt = gradient_transpose(mesh, &weighted);
        let mu = self.metric.mul_vec(&state.u);
        let rhs: Vec<f64> = (0..mesh.n_nodes())
            .map(|i| self.load[i] + mu[i] / self.tau - dt[i])
            .collect();
        let u = self.system.solve(&rhs, &vec![0.0; rhs.len()]);
        PrimalDualState {
            u_prev: state.u.clone(),
            u,
            p,
        }
    }

    /// Iterates until the nodal update falls below `tol` (max norm).
    pub fn run(&self, mut state: PrimalDualState, tol: f64, max_iters: usize) -> (PrimalDualState, usize, bool) {
        for it in 0..max_iters {
            state = self.step(&state);
            let change = state
                .u
                .iter()
                .zip(&state.u_prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if change <= tol {
                return (state, it + 1, true);
            }
        }
        (state, max_iters, false)
    }
}

/// One step of the primal-dual algorithm.
pub fn primal_dual_step(state: &PrimalDualState, tau: f64, prob: &RofProblem) -> Result<PrimalDualState> {
    Ok(PrimalDualSolver::new(prob, Some(tau))?.step(state))
}
