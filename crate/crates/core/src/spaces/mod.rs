//! Lowest-order finite element spaces on a triangulation.
//!
//! Coefficient layouts:
//! * `P1Scalar`: one value per node.
//! * `P0Scalar`: one value per element; `P0Vector`: `[x, y]` per element.
//! * `P1DiscScalar`: three vertex values per element, in local vertex order.
//! * `P1DiscVector` and `Bdm`: six values per element, `(x, y)` at each local
//!   vertex. A `Bdm` function is a discontinuous field that additionally
//!   satisfies [`continuity_constraints`].

pub mod quadrature;

use std::sync::Arc;

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{BoundaryLabel, Refinement, Triangulation};
use crate::solver::sparse::SparseMatrix;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceKind {
    P1Scalar,
    P0Scalar,
    P0Vector,
    P1DiscScalar,
    P1DiscVector,
    Bdm,
}

impl SpaceKind {
    pub fn dim(self, mesh: &Triangulation) -> usize {
        let m = mesh.n_elements();
        match self {
            SpaceKind::P1Scalar => mesh.n_nodes(),
            SpaceKind::P0Scalar => m,
            SpaceKind::P0Vector => 2 * m,
            SpaceKind::P1DiscScalar => 3 * m,
            SpaceKind::P1DiscVector | SpaceKind::Bdm => 6 * m,
        }
    }

    fn is_vector(self) -> bool {
        matches!(self, SpaceKind::P0Vector | SpaceKind::P1DiscVector | SpaceKind::Bdm)
    }
}

#[derive(Clone, Debug)]
pub struct SpaceDescriptor {
    pub kind: SpaceKind,
    mesh: Arc<Triangulation>,
    pub dirichlet_constrained: bool,
    pub neumann_constrained: bool,
}

impl SpaceDescriptor {
    pub fn new(kind: SpaceKind, mesh: Arc<Triangulation>) -> Self {
        Self {
            kind,
            mesh,
            dirichlet_constrained: false,
            neumann_constrained: false,
        }
    }

    pub fn p1(mesh: Arc<Triangulation>) -> Self {
        Self::new(SpaceKind::P1Scalar, mesh)
    }

    pub fn p0(mesh: Arc<Triangulation>) -> Self {
        Self::new(SpaceKind::P0Scalar, mesh)
    }

    pub fn p0_vector(mesh: Arc<Triangulation>) -> Self {
        Self::new(SpaceKind::P0Vector, mesh)
    }

    pub fn p1disc_scalar(mesh: Arc<Triangulation>) -> Self {
        Self::new(SpaceKind::P1DiscScalar, mesh)
    }

    pub fn p1disc_vector(mesh: Arc<Triangulation>) -> Self {
        Self::new(SpaceKind::P1DiscVector, mesh)
    }

    pub fn bdm(mesh: Arc<Triangulation>, neumann_constrained: bool) -> Self {
        Self {
            neumann_constrained,
            ..Self::new(SpaceKind::Bdm, mesh)
        }
    }

    pub fn with_dirichlet(mut self) -> Self {
        self.dirichlet_constrained = true;
        self
    }

    pub fn mesh(&self) -> &Arc<Triangulation> {
        &self.mesh
    }

    pub fn dim(&self) -> usize {
        self.kind.dim(&self.mesh)
    }

    pub fn same_mesh(&self, other: &SpaceDescriptor) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh) || self.mesh.id() == other.mesh.id()
    }
}

#[derive(Clone, Debug)]
pub struct FeFunction {
    space: SpaceDescriptor,
    coefficients: Vec<f64>,
}

impl FeFunction {
    pub fn new(space: SpaceDescriptor, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != space.dim() {
            return Err(Error::InvalidArgument(format!(
                "{:?} needs {} coefficients, got {}",
                space.kind,
                space.dim(),
                coefficients.len()
            )));
        }
        Ok(Self { space, coefficients })
    }

    pub fn zeros(space: SpaceDescriptor) -> Self {
        let n = space.dim();
        Self {
            space,
            coefficients: vec![0.0; n],
        }
    }

    /// Nodal interpolation of a scalar function into P1.
    pub fn interpolate_p1(mesh: Arc<Triangulation>, f: impl Fn(Point) -> f64) -> Self {
        let c = mesh.nodes().iter().map(|&x| f(x)).collect();
        Self {
            space: SpaceDescriptor::p1(mesh),
            coefficients: c,
        }
    }

    pub fn constant_p0(mesh: Arc<Triangulation>, c: f64) -> Self {
        let n = mesh.n_elements();
        Self {
            space: SpaceDescriptor::p0(mesh),
            coefficients: vec![c; n],
        }
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn kind(&self) -> SpaceKind {
        self.space.kind
    }

    pub fn mesh(&self) -> &Arc<Triangulation> {
        &self.space.mesh
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coefficients
    }

    /// Value at local vertex `k` of element `t` for fields with vertex dofs.
    pub fn vertex_vector(&self, t: usize, k: usize) -> Point {
        let i = 6 * t + 2 * k;
        [self.coefficients[i], self.coefficients[i + 1]]
    }

    pub fn eval(&self, t: usize, x: Point) -> f64 {
        let mesh = self.mesh();
        match self.kind() {
            SpaceKind::P0Scalar => self.coefficients[t],
            SpaceKind::P1Scalar => {
                let l = barycentric(mesh, t, x);
                let el = mesh.elements()[t];
                (0..3).map(|k| l[k] * self.coefficients[el[k]]).sum()
            }
            SpaceKind::P1DiscScalar => {
                let l = barycentric(mesh, t, x);
                (0..3).map(|k| l[k] * self.coefficients[3 * t + k]).sum()
            }
            kind => panic!("{kind:?} is not a scalar space"),
        }
    }

    pub fn eval_vector(&self, t: usize, x: Point) -> Point {
        match self.kind() {
            SpaceKind::P0Vector => [self.coefficients[2 * t], self.coefficients[2 * t + 1]],
            SpaceKind::P1DiscVector | SpaceKind::Bdm => {
                let l = barycentric(self.mesh(), t, x);
                let mut v = [0.0; 2];
                for (k, lk) in l.iter().enumerate() {
                    let p = self.vertex_vector(t, k);
                    v[0] += lk * p[0];
                    v[1] += lk * p[1];
                }
                v
            }
            kind => panic!("{kind:?} is not a vector space"),
        }
    }

    /// Same coefficients reinterpreted in another space of equal dimension.
    pub fn reinterpret(self, space: SpaceDescriptor) -> Result<Self> {
        Self::new(space, self.coefficients)
    }
}

pub fn barycentric(mesh: &Triangulation, t: usize, x: Point) -> [f64; 3] {
    let c = mesh.centroid(t);
    let g = mesh.gradients(t);
    let d = [x[0] - c[0], x[1] - c[1]];
    [0, 1, 2].map(|k| 1.0 / 3.0 + g[k][0] * d[0] + g[k][1] * d[1])
}

fn check_kind(f: &FeFunction, allowed: &[SpaceKind]) -> Result<()> {
    if allowed.contains(&f.kind()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "expected one of {allowed:?}, got {:?}",
            f.kind()
        )))
    }
}

/// Elementwise gradients of nodal coefficients.
pub fn p1_gradients(mesh: &Triangulation, u: &[f64]) -> Vec<Point> {
    mesh.elements()
        .iter()
        .enumerate()
        .map(|(t, el)| {
            let g = mesh.gradients(t);
            let mut d = [0.0; 2];
            for k in 0..3 {
                d[0] += u[el[k]] * g[k][0];
                d[1] += u[el[k]] * g[k][1];
            }
            d
        })
        .collect()
}

pub fn gradient_p1(u: &FeFunction) -> Result<FeFunction> {
    check_kind(u, &[SpaceKind::P1Scalar])?;
    let mesh = u.mesh();
    let c = p1_gradients(mesh, u.coefficients()).concat();
    FeFunction::new(SpaceDescriptor::p0_vector(mesh.clone()), c)
}

/// Elementwise divergence of a field in the six-values-per-element layout.
pub fn vector_divergence(mesh: &Triangulation, p: &[f64]) -> Vec<f64> {
    (0..mesh.n_elements())
        .map(|t| {
            let g = mesh.gradients(t);
            (0..3)
                .map(|k| p[6 * t + 2 * k] * g[k][0] + p[6 * t + 2 * k + 1] * g[k][1])
                .sum()
        })
        .collect()
}

pub fn divergence_bdm(p: &FeFunction) -> Result<FeFunction> {
    check_kind(p, &[SpaceKind::P1DiscVector, SpaceKind::Bdm])?;
    let mesh = p.mesh();
    FeFunction::new(
        SpaceDescriptor::p0(mesh.clone()),
        vector_divergence(mesh, p.coefficients()),
    )
}

/// Vertex values of `f` on element `t` as (scalar or vector) components.
fn vertex_values(f: &FeFunction, t: usize, k: usize) -> Point {
    let c = f.coefficients();
    match f.kind() {
        SpaceKind::P1Scalar => [c[f.mesh().elements()[t][k]], 0.0],
        SpaceKind::P1DiscScalar => [c[3 * t + k], 0.0],
        SpaceKind::P1DiscVector | SpaceKind::Bdm => f.vertex_vector(t, k),
        _ => unreachable!(),
    }
}

/// Mass-lumped product `sum_T sum_z |T|/3 v|_T(z) . w|_T(z)`.
pub fn lumped_inner(v: &FeFunction, w: &FeFunction) -> Result<f64> {
    let p1 = [
        SpaceKind::P1Scalar,
        SpaceKind::P1DiscScalar,
        SpaceKind::P1DiscVector,
        SpaceKind::Bdm,
    ];
    check_kind(v, &p1)?;
    check_kind(w, &p1)?;
    if !v.space().same_mesh(w.space()) || v.kind().is_vector() != w.kind().is_vector() {
        return Err(Error::SpaceMismatch);
    }
    let mesh = v.mesh();
    Ok((0..mesh.n_elements())
        .map(|t| {
            let s: f64 = (0..3)
                .map(|k| {
                    let a = vertex_values(v, t, k);
                    let b = vertex_values(w, t, k);
                    a[0] * b[0] + a[1] * b[1]
                })
                .sum();
            mesh.area(t) / 3.0 * s
        })
        .sum())
}

/// `h_T^{d(2/alpha - 1)}` for every element, with `d = 2`.
pub fn power_weights(mesh: &Triangulation, alpha: f64) -> Vec<f64> {
    let e = 2.0 * (2.0 / alpha - 1.0);
    mesh.diameters().iter().map(|h| h.powf(e)).collect()
}

/// Weighted L2 product `(h_T^{d(2/alpha-1)} p, q)` integrated exactly.
pub fn weighted_inner(p: &FeFunction, q: &FeFunction, alpha: f64) -> Result<f64> {
    if !p.space().same_mesh(q.space()) || p.kind() != q.kind() {
        return Err(Error::SpaceMismatch);
    }
    let mesh = p.mesh();
    let w = power_weights(mesh, alpha);
    let (a, b) = (p.coefficients(), q.coefficients());
    let local: Box<dyn Fn(usize) -> f64> = match p.kind() {
        SpaceKind::P0Scalar => Box::new(|t| a[t] * b[t]),
        SpaceKind::P0Vector => Box::new(|t| a[2 * t] * b[2 * t] + a[2 * t + 1] * b[2 * t + 1]),
        SpaceKind::P1Scalar | SpaceKind::P1DiscScalar | SpaceKind::P1DiscVector | SpaceKind::Bdm => {
            Box::new(|t| {
                // exact P1 mass: (1 + delta_ij) / 12
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        let m = if i == j { 2.0 } else { 1.0 } / 12.0;
                        let x = vertex_values(p, t, i);
                        let y = vertex_values(q, t, j);
                        s += m * (x[0] * y[0] + x[1] * y[1]);
                    }
                }
                s
            })
        }
    };
    Ok((0..mesh.n_elements()).map(|t| w[t] * mesh.area(t) * local(t)).sum())
}

/// Elementwise nodal interpolation; `f(t, x)` is evaluated at the vertices
/// of `t` from inside `t`.
pub fn nodal_lift(mesh: &Arc<Triangulation>, f: impl Fn(usize, Point) -> f64) -> FeFunction {
    let mut c = Vec::with_capacity(3 * mesh.n_elements());
    for t in 0..mesh.n_elements() {
        for x in mesh.vertices(t) {
            c.push(f(t, x));
        }
    }
    FeFunction {
        space: SpaceDescriptor::p1disc_scalar(mesh.clone()),
        coefficients: c,
    }
}

/// Elementwise means of `f` by the subdivided 7-point rule; `depth(t)` is the
/// number of red subdivisions used on element `t`.
pub fn l2_project_p0(
    mesh: &Arc<Triangulation>,
    f: impl Fn(Point) -> f64 + Sync,
    depth: impl Fn(usize) -> u32 + Sync,
) -> FeFunction {
    let c: Vec<f64> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|t| quadrature::integrate(mesh.vertices(t), depth(t), &mut |x| f(x)) / mesh.area(t))
        .collect();
    FeFunction {
        space: SpaceDescriptor::p0(mesh.clone()),
        coefficients: c,
    }
}

/// Outward unit normal and length of local side `k` (opposite vertex `k`).
pub fn local_side(mesh: &Triangulation, t: usize, k: usize) -> (Point, f64) {
    let v = mesh.vertices(t);
    let a = v[(k + 1) % 3];
    let b = v[(k + 2) % 3];
    let (tx, ty) = (b[0] - a[0], b[1] - a[1]);
    let len = (tx * tx + ty * ty).sqrt();
    ([ty / len, -tx / len], len)
}

/// BDM interpolation of a field given elementwise as `q(t, x)`.
pub fn bdm_interpolate_elementwise(
    mesh: &Arc<Triangulation>,
    q: impl Fn(usize, Point) -> Point + Sync,
) -> Result<FeFunction> {
    let blocks: Result<Vec<[f64; 6]>> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|t| {
            let v = mesh.vertices(t);
            let mut m = Matrix6::zeros();
            let mut rhs = Vector6::zeros();
            for k in 0..3 {
                let (n, len) = local_side(mesh, t, k);
                let ia = (k + 1) % 3;
                let ib = (k + 2) % 3;
                // rows: moments against the hat of each endpoint
                for (r, (i, j)) in [(ia, ib), (ib, ia)].into_iter().enumerate() {
                    let row = 2 * k + r;
                    for c in 0..2 {
                        m[(row, 2 * i + c)] = len / 3.0 * n[c];
                        m[(row, 2 * j + c)] = len / 6.0 * n[c];
                    }
                    rhs[row] = quadrature::GAUSS2
                        .iter()
                        .map(|&(s, w)| {
                            let x = [(1.0 - s) * v[i][0] + s * v[j][0], (1.0 - s) * v[i][1] + s * v[j][1]];
                            let qx = q(t, x);
                            w * len * (qx[0] * n[0] + qx[1] * n[1]) * (1.0 - s)
                        })
                        .sum();
                }
            }
            let sol = m.lu().solve(&rhs).ok_or(Error::SingularMoments(t))?;
            if sol.iter().any(|x| !x.is_finite()) {
                return Err(Error::SingularMoments(t));
            }
            Ok(std::array::from_fn(|i| sol[i]))
        })
        .collect();
    FeFunction::new(SpaceDescriptor::bdm(mesh.clone(), false), blocks?.concat())
}

pub fn bdm_interpolate(mesh: &Arc<Triangulation>, q: impl Fn(Point) -> Point + Sync) -> Result<FeFunction> {
    bdm_interpolate_elementwise(mesh, |_, x| q(x))
}

/// Sides carrying hybrid multipliers: interior sides, plus Neumann sides when
/// the normal trace is constrained there.
#[derive(Clone, Debug)]
pub struct SkeletonSpace {
    pub sides: Vec<usize>,
}

impl SkeletonSpace {
    pub fn new(mesh: &Triangulation, neumann_constrained: bool) -> Self {
        let sides = mesh
            .sides()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_interior() || (neumann_constrained && s.label == Some(BoundaryLabel::Neumann)))
            .map(|(i, _)| i)
            .collect();
        Self { sides }
    }

    pub fn dim(&self) -> usize {
        2 * self.sides.len()
    }
}

/// Local vertex of `t` holding global node `z`.
fn local_vertex(mesh: &Triangulation, t: usize, z: usize) -> usize {
    mesh.elements()[t]
        .iter()
        .position(|&n| n == z)
        .expect("node belongs to element")
}

/// Rows `int_S [[q . n_S]] psi_z ds` for both endpoint hats `psi_z` of every
/// skeleton side, acting on the six-values-per-element layout.
pub fn continuity_constraints(space: &SpaceDescriptor) -> Result<SparseMatrix> {
    if space.kind != SpaceKind::Bdm {
        return Err(Error::InvalidArgument("continuity rows need a BDM space".into()));
    }
    let mesh = space.mesh();
    let skeleton = SkeletonSpace::new(mesh, space.neumann_constrained);
    let mut triplets = Vec::with_capacity(skeleton.dim() * 8);
    for (r, &s) in skeleton.sides.iter().enumerate() {
        let side = mesh.sides()[s];
        let n = side.normal;
        let owners = std::iter::once((side.element, 1.0)).chain(side.neighbor.map(|t| (t, -1.0)));
        for (t, sign) in owners {
            for (e, &z) in side.nodes.iter().enumerate() {
                let k = local_vertex(mesh, t, z);
                for (row_end, _) in side.nodes.iter().enumerate() {
                    let m = if row_end == e { 1.0 / 3.0 } else { 1.0 / 6.0 } * side.length;
                    for c in 0..2 {
                        triplets.push((2 * r + row_end, 6 * t + 2 * k + c, sign * m * n[c]));
                    }
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(skeleton.dim(), space.dim(), &triplets))
}

/// P1 stiffness matrix with elementwise weights (all ones when `None`).
pub fn stiffness(mesh: &Triangulation, weights: Option<&[f64]>) -> SparseMatrix {
    let mut triplets = Vec::with_capacity(9 * mesh.n_elements());
    for (t, el) in mesh.elements().iter().enumerate() {
        let g = mesh.gradients(t);
        let w = weights.map_or(1.0, |w| w[t]) * mesh.area(t);
        for i in 0..3 {
            for j in 0..3 {
                triplets.push((el[i], el[j], w * (g[i][0] * g[j][0] + g[i][1] * g[j][1])));
            }
        }
    }
    SparseMatrix::from_triplets(mesh.n_nodes(), mesh.n_nodes(), &triplets)
}

/// Consistent P1 mass matrix.
pub fn mass(mesh: &Triangulation) -> SparseMatrix {
    let mut triplets = Vec::with_capacity(9 * mesh.n_elements());
    for (t, el) in mesh.elements().iter().enumerate() {
        let a = mesh.area(t);
        for i in 0..3 {
            for j in 0..3 {
                let m = if i == j { a / 6.0 } else { a / 12.0 };
                triplets.push((el[i], el[j], m));
            }
        }
    }
    SparseMatrix::from_triplets(mesh.n_nodes(), mesh.n_nodes(), &triplets)
}

/// Diagonal of the lumped P1 mass matrix.
pub fn lumped_mass(mesh: &Triangulation) -> Vec<f64> {
    let mut d = vec![0.0; mesh.n_nodes()];
    for (t, el) in mesh.elements().iter().enumerate() {
        for &z in el {
            d[z] += mesh.area(t) / 3.0;
        }
    }
    d
}

/// Transfers `f` to the refined mesh. P1 values at new nodes are edge
/// averages; elementwise spaces are evaluated on the parent element.
pub fn prolong(f: &FeFunction, refinement: &Refinement, fine: &Arc<Triangulation>) -> Result<FeFunction> {
    let coarse = f.mesh();
    let c = f.coefficients();
    let mut space = f.space().clone();
    space.mesh = fine.clone();
    let out: Vec<f64> = match f.kind() {
        SpaceKind::P1Scalar => {
            let mut v = c.to_vec();
            // endpoints of a bisected edge always precede its midpoint
            for &[a, b] in &refinement.new_nodes {
                v.push(0.5 * (v[a] + v[b]));
            }
            v
        }
        SpaceKind::P0Scalar => refinement.parent.iter().map(|&t| c[t]).collect(),
        SpaceKind::P0Vector => refinement
            .parent
            .iter()
            .flat_map(|&t| [c[2 * t], c[2 * t + 1]])
            .collect(),
        SpaceKind::P1DiscScalar => (0..fine.n_elements())
            .flat_map(|t| {
                let parent = refinement.parent[t];
                fine.vertices(t).map(|x| f.eval(parent, x))
            })
            .collect(),
        SpaceKind::P1DiscVector | SpaceKind::Bdm => (0..fine.n_elements())
            .flat_map(|t| {
                let parent = refinement.parent[t];
                fine.vertices(t).into_iter().flat_map(move |x| f.eval_vector(parent, x))
            })
            .collect(),
    };
    debug_assert_eq!(coarse.n_nodes(), refinement.mesh.n_nodes() - refinement.new_nodes.len());
    FeFunction::new(space, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{initial_mesh, refine, refine_with_history, Domain, MarkedSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(levels: usize) -> Arc<Triangulation> {
        let mut m = initial_mesh(Domain::UnitSquareSym);
        for _ in 0..levels {
            m = refine(&m, &MarkedSet::all(&m)).unwrap();
        }
        Arc::new(m)
    }

    fn lshape(levels: usize) -> Arc<Triangulation> {
        let mut m = initial_mesh(Domain::LShape);
        for _ in 0..levels {
            m = refine(&m, &MarkedSet::all(&m)).unwrap();
        }
        Arc::new(m)
    }

    fn p1disc_from(mesh: &Arc<Triangulation>, q: impl Fn(Point) -> Point) -> FeFunction {
        let mut c = Vec::new();
        for t in 0..mesh.n_elements() {
            for x in mesh.vertices(t) {
                c.extend(q(x));
            }
        }
        FeFunction::new(SpaceDescriptor::p1disc_vector(mesh.clone()), c).unwrap()
    }

    #[test]
    fn gradients_of_simple_functions() {
        let mesh = square(2);
        let one = FeFunction::interpolate_p1(mesh.clone(), |_| 1.0);
        assert!(gradient_p1(&one)
            .unwrap()
            .coefficients()
            .iter()
            .all(|g| g.abs() < 1e-14));
        let x = FeFunction::interpolate_p1(mesh.clone(), |p| p[0]);
        let g = gradient_p1(&x).unwrap();
        for t in 0..mesh.n_elements() {
            let v = g.eval_vector(t, [0.0, 0.0]);
            assert!((v[0] - 1.0).abs() < 1e-14 && v[1].abs() < 1e-14);
        }
    }

    #[test]
    fn hat_gradient_integrates_to_zero() {
        let mesh = square(1);
        let center = mesh
            .nodes()
            .iter()
            .position(|p| p[0].abs() + p[1].abs() < 1e-14)
            .unwrap();
        let hat = FeFunction::interpolate_p1(mesh.clone(), |p| f64::from(u8::from(p[0].abs() + p[1].abs() < 1e-14)));
        let g = gradient_p1(&hat).unwrap();
        let mut s = [0.0; 2];
        for t in 0..mesh.n_elements() {
            let el = mesh.elements()[t];
            let v = g.eval_vector(t, [0.0; 2]);
            if el.contains(&center) {
                // height of the triangle over the side opposite the center
                let k = local_vertex(&mesh, t, center);
                let (_, len) = local_side(&mesh, t, k);
                let height = 2.0 * mesh.area(t) / len;
                assert!(((v[0].hypot(v[1])) - 1.0 / height).abs() < 1e-14);
            }
            s[0] += mesh.area(t) * v[0];
            s[1] += mesh.area(t) * v[1];
        }
        assert!(s[0].abs() < 1e-14 && s[1].abs() < 1e-14);
    }

    #[test]
    fn divergence_of_affine_fields() {
        let mesh = square(2);
        for (q, div) in [
            (Box::new(|_: Point| [1.0, 0.0]) as Box<dyn Fn(Point) -> Point>, 0.0),
            (Box::new(|x: Point| x), 2.0),
            (Box::new(|x: Point| [x[1], -x[0]]), 0.0),
        ] {
            let d = divergence_bdm(&p1disc_from(&mesh, q)).unwrap();
            assert!(d.coefficients().iter().all(|v| (v - div).abs() < 1e-13));
        }
    }

    #[test]
    fn lumped_products() {
        let mesh = square(1);
        let one = FeFunction::interpolate_p1(mesh.clone(), |_| 1.0);
        assert!((lumped_inner(&one, &one).unwrap() - 4.0).abs() < 1e-14);
        let z = 0;
        let mut e = FeFunction::zeros(SpaceDescriptor::p1(mesh.clone()));
        e.coefficients_mut()[z] = 1.0;
        let beta: f64 = (0..mesh.n_elements())
            .filter(|&t| mesh.elements()[t].contains(&z))
            .map(|t| mesh.area(t) / 3.0)
            .sum();
        assert!((lumped_inner(&one, &e).unwrap() - beta).abs() < 1e-14);
        let other = square(0);
        let foreign = FeFunction::interpolate_p1(other, |_| 1.0);
        assert!(matches!(lumped_inner(&one, &foreign), Err(Error::SpaceMismatch)));
    }

    #[test]
    fn lumped_norm_sandwich() {
        let mesh = lshape(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let c: Vec<f64> = (0..3 * mesh.n_elements()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = FeFunction::new(SpaceDescriptor::p1disc_scalar(mesh.clone()), c).unwrap();
            let l2 = weighted_inner(&v, &v, 2.0).unwrap();
            let lumped = lumped_inner(&v, &v).unwrap();
            assert!(l2 <= lumped * (1.0 + 1e-12) && lumped <= 4.0 * l2 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn weighted_products() {
        let mesh = square(0);
        let p = FeFunction::new(SpaceDescriptor::p0_vector(mesh.clone()), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((weighted_inner(&p, &p, 2.0).unwrap() - 4.0).abs() < 1e-14);
        let h = mesh.diameter(0);
        assert!((weighted_inner(&p, &p, 1.0).unwrap() - h * h * 4.0).abs() < 1e-12);
        // homogeneity under scaling by s: s^{2 + d(2/alpha - 1)}
        let s = 0.3;
        let scaled = Arc::new(
            Triangulation::new(
                mesh.nodes().iter().map(|x| [s * x[0], s * x[1]]).collect(),
                mesh.elements().to_vec(),
                mesh.boundary().to_vec(),
            )
            .unwrap(),
        );
        let ps = p.clone().reinterpret(SpaceDescriptor::p0_vector(scaled)).unwrap();
        for alpha in [1.2, 1.5, 3.0] {
            let ratio = weighted_inner(&ps, &ps, alpha).unwrap() / weighted_inner(&p, &p, alpha).unwrap();
            let expected = s.powf(2.0 + 2.0 * (2.0 / alpha - 1.0));
            assert!((ratio - expected).abs() < 1e-12 * expected);
        }
    }

    #[test]
    fn nodal_lift_reproduces_affine_and_dominates_convex() {
        let mesh = square(2);
        let f = nodal_lift(&mesh, |_, x| 2.0 * x[0] - x[1] + 0.5);
        for t in 0..mesh.n_elements() {
            let c = mesh.centroid(t);
            assert!((f.eval(t, c) - (2.0 * c[0] - c[1] + 0.5)).abs() < 1e-14);
        }
        let q = p1disc_from(&mesh, |x| [x[0] * 0.7 + 0.1, 1.0 - x[1] * x[0].abs()]);
        let sp = 1.6 / 0.6;
        let norm = |v: Point| v[0].hypot(v[1]).powf(sp);
        let lifted = nodal_lift(&mesh, |t, x| norm(q.eval_vector(t, x)));
        for t in 0..mesh.n_elements() {
            let v = mesh.vertices(t);
            for l in [[0.2, 0.3, 0.5], [0.6, 0.2, 0.2], [1.0 / 3.0; 3]] {
                let x = [
                    l[0] * v[0][0] + l[1] * v[1][0] + l[2] * v[2][0],
                    l[0] * v[0][1] + l[1] * v[1][1] + l[2] * v[2][1],
                ];
                assert!(lifted.eval(t, x) >= norm(q.eval_vector(t, x)) - 1e-14);
            }
        }
        let c = nodal_lift(&mesh, |_, _| 3.5);
        assert!(c.coefficients().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn projection_of_indicator_data() {
        let mesh = square(3);
        let chi = |x: Point| f64::from(u8::from(x[0].abs() < 0.5 && x[1].abs() < 0.5));
        let g = l2_project_p0(&mesh, chi, |_| 4);
        for t in 0..mesh.n_elements() {
            let v = mesh.vertices(t);
            let inside = v.iter().all(|x| x[0].abs() <= 0.5 && x[1].abs() <= 0.5);
            let value = g.coefficients()[t];
            assert!((0.0..=1.0).contains(&value));
            if inside {
                assert!((value - 1.0).abs() < 1e-14);
            }
        }
        let c = l2_project_p0(&mesh, |_| 2.5, |_| 0);
        assert!(c.coefficients().iter().all(|v| (v - 2.5).abs() < 1e-14));
        // straddling elements: area fraction against a much finer subdivision
        for t in 0..mesh.n_elements() {
            let oracle = quadrature::integrate(mesh.vertices(t), 8, &mut |x| chi(x)) / mesh.area(t);
            assert!((g.coefficients()[t] - oracle).abs() < 2e-2);
        }
    }

    #[test]
    fn bdm_reproduces_affine_fields() {
        let mesh = lshape(2);
        let f = |x: Point| [0.3 + 1.5 * x[0] - 0.2 * x[1], -0.7 + 0.4 * x[0] + 2.0 * x[1]];
        let pi = bdm_interpolate(&mesh, f).unwrap();
        let exact = p1disc_from(&mesh, f);
        for (a, b) in pi.coefficients().iter().zip(exact.coefficients()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = bdm_interpolate(&mesh, |_| [1.0, -2.0]).unwrap();
        assert!(c
            .coefficients()
            .chunks(2)
            .all(|v| (v[0] - 1.0).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12));
    }

    #[test]
    fn bdm_interpolation_error_decreases() {
        let delta = 0.6;
        let grad = |x: Point| {
            let r = x[0].hypot(x[1]);
            let mut th = x[1].atan2(x[0]);
            if th < 0.0 {
                th += 2.0 * std::f64::consts::PI;
            }
            let s = delta * r.powf(delta - 1.0);
            // grad of r^d sin(d th)
            let (st, ct) = th.sin_cos();
            let (sd, cd) = (delta * th).sin_cos();
            [s * (sd * ct - cd * st), s * (sd * st + cd * ct)]
        };
        let mut errors = Vec::new();
        for level in [1, 3, 5] {
            let mesh = lshape(level);
            let pi = bdm_interpolate(&mesh, grad).unwrap();
            let e: f64 = (0..mesh.n_elements())
                .map(|t| {
                    quadrature::integrate(mesh.vertices(t), 2, &mut |x| {
                        let a = grad(x);
                        let b = pi.eval_vector(t, x);
                        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
                    })
                })
                .sum();
            errors.push(e.sqrt());
        }
        assert!(errors[1] < errors[0] && errors[2] < errors[1], "{errors:?}");
    }

    #[test]
    fn continuity_rows() {
        let mesh = Arc::new(lshape(1).relabeled(|a, b| {
            if a[1] == 1.0 && b[1] == 1.0 {
                BoundaryLabel::Neumann
            } else {
                BoundaryLabel::Dirichlet
            }
        }));
        let space = SpaceDescriptor::bdm(mesh.clone(), true);
        let c = continuity_constraints(&space).unwrap();
        let interior = mesh.sides().iter().filter(|s| s.is_interior()).count();
        let neumann = mesh
            .sides()
            .iter()
            .filter(|s| s.label == Some(BoundaryLabel::Neumann))
            .count();
        assert!(neumann > 0);
        assert_eq!(c.nrows(), 2 * interior + 2 * neumann);

        let constant = p1disc_from(&mesh, |_| [0.4, -1.3]);
        let free = continuity_constraints(&SpaceDescriptor::bdm(mesh.clone(), false)).unwrap();
        assert!(free.mul_vec(constant.coefficients()).iter().all(|v| v.abs() < 1e-14));
        // the Neumann sides sit on y = 1 with normal (0, 1)
        let vertical = p1disc_from(&mesh, |_| [0.0, 1.0]);
        let r = c.mul_vec(vertical.coefficients());
        assert!(r.iter().any(|v| v.abs() > 1e-3));
        let horizontal = p1disc_from(&mesh, |_| [1.0, 0.0]);
        assert!(c.mul_vec(horizontal.coefficients()).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn prolongation_preserves_functions() {
        let mesh = lshape(1);
        let marked: MarkedSet = [0, 3, 5].into_iter().collect();
        let r = refine_with_history(&mesh, &marked).unwrap();
        let fine = Arc::new(r.mesh.clone());
        let u = FeFunction::interpolate_p1(mesh.clone(), |x| 1.0 + x[0] - 2.0 * x[1]);
        let uf = prolong(&u, &r, &fine).unwrap();
        for (z, x) in fine.nodes().iter().enumerate() {
            assert!((uf.coefficients()[z] - (1.0 + x[0] - 2.0 * x[1])).abs() < 1e-14);
        }
        let q = p1disc_from(&mesh, |x| [x[1], 2.0 * x[0]]);
        let qf = prolong(&q, &r, &fine).unwrap();
        let exact = p1disc_from(&fine, |x| [x[1], 2.0 * x[0]]);
        for (a, b) in qf.coefficients().iter().zip(exact.coefficients()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
