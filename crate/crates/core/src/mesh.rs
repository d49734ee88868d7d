//! Conforming triangulations of planar polygonal domains.
//!
//! Elements are stored counterclockwise with the refinement edge opposite
//! local vertex 0. Refinement is newest-vertex bisection with conformity
//! closure, so every coarse mesh built here is compatibly oriented: the
//! refinement edges of two neighbours either coincide or are not shared.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_MESH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryLabel {
    Dirichlet,
    Neumann,
}

impl BoundaryLabel {
    fn code(self) -> &'static str {
        match self {
            BoundaryLabel::Dirichlet => "D",
            BoundaryLabel::Neumann => "N",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundarySide {
    pub nodes: [usize; 2],
    pub label: BoundaryLabel,
}

/// An edge of the triangulation.
///
/// `normal` is the unit outer normal of `element`; for boundary sides it is
/// the outer normal of the domain. Jumps across the side are taken as
/// trace from `element` minus trace from `neighbor`.
#[derive(Clone, Copy, Debug)]
pub struct Side {
    pub nodes: [usize; 2],
    pub element: usize,
    pub neighbor: Option<usize>,
    pub label: Option<BoundaryLabel>,
    pub normal: [f64; 2],
    pub length: f64,
}

impl Side {
    pub fn is_interior(&self) -> bool {
        self.neighbor.is_some()
    }

    pub fn midpoint(&self, mesh: &Triangulation) -> [f64; 2] {
        let a = mesh.nodes[self.nodes[0]];
        let b = mesh.nodes[self.nodes[1]];
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }
}

/// Conforming simplicial mesh with derived topology and geometry.
#[derive(Clone, Debug)]
pub struct Triangulation {
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
    boundary: Vec<BoundarySide>,
    generation: Vec<u32>,
    sides: Vec<Side>,
    element_sides: Vec<[usize; 3]>,
    areas: Vec<f64>,
    gradients: Vec<[[f64; 2]; 3]>,
    diameters: Vec<f64>,
    id: u64,
}

impl Triangulation {
    pub fn new(nodes: Vec<[f64; 2]>, elements: Vec<[usize; 3]>, boundary: Vec<BoundarySide>) -> Result<Self> {
        let generation = vec![0; elements.len()];
        Self::with_generation(nodes, elements, boundary, generation)
    }

    fn with_generation(
        nodes: Vec<[f64; 2]>,
        elements: Vec<[usize; 3]>,
        boundary: Vec<BoundarySide>,
        generation: Vec<u32>,
    ) -> Result<Self> {
        for (t, el) in elements.iter().enumerate() {
            if el.iter().any(|&i| i >= nodes.len()) {
                return Err(Error::InvalidArgument(format!("element {t} references a missing node")));
            }
        }
        let mut areas = Vec::with_capacity(elements.len());
        let mut gradients = Vec::with_capacity(elements.len());
        let mut diameters = Vec::with_capacity(elements.len());
        for (t, el) in elements.iter().enumerate() {
            let [a, b, c] = el.map(|i| nodes[i]);
            let det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            let area = 0.5 * det;
            if !(area > 0.0) {
                return Err(Error::DegenerateElement { element: t, area });
            }
            // grad phi_k = rot(x_{k+2} - x_{k+1}) / det, rotated clockwise
            let p = [a, b, c];
            let mut g = [[0.0; 2]; 3];
            for (k, gk) in g.iter_mut().enumerate() {
                let u = p[(k + 1) % 3];
                let v = p[(k + 2) % 3];
                *gk = [(u[1] - v[1]) / det, (v[0] - u[0]) / det];
            }
            let d = |x: [f64; 2], y: [f64; 2]| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
            areas.push(area);
            gradients.push(g);
            diameters.push(d(a, b).max(d(b, c)).max(d(c, a)));
        }

        let mut side_index: HashMap<(usize, usize), usize> = HashMap::with_capacity(2 * elements.len());
        let mut sides: Vec<Side> = Vec::with_capacity(2 * elements.len());
        let mut element_sides = Vec::with_capacity(elements.len());
        for (t, el) in elements.iter().enumerate() {
            let mut local = [0usize; 3];
            for (k, slot) in local.iter_mut().enumerate() {
                let a = el[(k + 1) % 3];
                let b = el[(k + 2) % 3];
                let key = (a.min(b), a.max(b));
                match side_index.get(&key) {
                    Some(&s) => {
                        if sides[s].neighbor.is_some() || sides[s].nodes != [b, a] {
                            return Err(Error::NonConforming(key.0, key.1));
                        }
                        sides[s].neighbor = Some(t);
                        *slot = s;
                    }
                    None => {
                        let pa = nodes[a];
                        let pb = nodes[b];
                        let tx = pb[0] - pa[0];
                        let ty = pb[1] - pa[1];
                        let length = (tx * tx + ty * ty).sqrt();
                        side_index.insert(key, sides.len());
                        *slot = sides.len();
                        sides.push(Side {
                            nodes: [a, b],
                            element: t,
                            neighbor: None,
                            label: None,
                            normal: [ty / length, -tx / length],
                            length,
                        });
                    }
                }
            }
            element_sides.push(local);
        }

        for bs in &boundary {
            let [a, b] = bs.nodes;
            let key = (a.min(b), a.max(b));
            match side_index.get(&key) {
                Some(&s) if sides[s].neighbor.is_none() => sides[s].label = Some(bs.label),
                _ => return Err(Error::SpuriousBoundaryLabel(a, b)),
            }
        }
        if let Some(s) = sides.iter().find(|s| s.neighbor.is_none() && s.label.is_none()) {
            return Err(Error::UnlabeledBoundary(s.nodes[0], s.nodes[1]));
        }

        Ok(Self {
            nodes,
            elements,
            boundary,
            generation,
            sides,
            element_sides,
            areas,
            gradients,
            diameters,
            id: NEXT_MESH_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    /// Identifier shared by clones; distinct for every constructed mesh.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn boundary(&self) -> &[BoundarySide] {
        &self.boundary
    }

    pub fn generation(&self) -> &[u32] {
        &self.generation
    }

    pub fn sides(&self) -> &[Side] {
        &self.sides
    }

    /// Side indices of an element; entry `k` is the side opposite local vertex `k`.
    pub fn element_sides(&self, t: usize) -> [usize; 3] {
        self.element_sides[t]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn area(&self, t: usize) -> f64 {
        self.areas[t]
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    /// Gradients of the three barycentric coordinates of element `t`.
    pub fn gradients(&self, t: usize) -> &[[f64; 2]; 3] {
        &self.gradients[t]
    }

    pub fn diameter(&self, t: usize) -> f64 {
        self.diameters[t]
    }

    pub fn diameters(&self) -> &[f64] {
        &self.diameters
    }

    pub fn vertices(&self, t: usize) -> [[f64; 2]; 3] {
        self.elements[t].map(|i| self.nodes[i])
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.vertices(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Nodes lying on a boundary side with the given label.
    pub fn boundary_nodes(&self, label: BoundaryLabel) -> Vec<bool> {
        let mut flags = vec![false; self.nodes.len()];
        for bs in self.boundary.iter().filter(|b| b.label == label) {
            flags[bs.nodes[0]] = true;
            flags[bs.nodes[1]] = true;
        }
        flags
    }

    /// Copy of the mesh with every boundary side relabeled by `label_of(a, b)`.
    pub fn relabeled(&self, label_of: impl Fn([f64; 2], [f64; 2]) -> BoundaryLabel) -> Self {
        let boundary = self
            .boundary
            .iter()
            .map(|bs| BoundarySide {
                nodes: bs.nodes,
                label: label_of(self.nodes[bs.nodes[0]], self.nodes[bs.nodes[1]]),
            })
            .collect();
        let mut sides = self.sides.clone();
        let labels: HashMap<(usize, usize), BoundaryLabel> = self
            .boundary
            .iter()
            .zip(&boundary)
            .map(|(old, new): (&BoundarySide, &BoundarySide)| {
                let [a, b] = old.nodes;
                ((a.min(b), a.max(b)), new.label)
            })
            .collect();
        for s in sides.iter_mut().filter(|s| s.neighbor.is_none()) {
            let [a, b] = s.nodes;
            s.label = labels.get(&(a.min(b), a.max(b))).copied();
        }
        Self {
            boundary,
            sides,
            id: NEXT_MESH_ID.fetch_add(1, Ordering::Relaxed),
            ..self.clone()
        }
    }

    pub fn with_uniform_label(&self, label: BoundaryLabel) -> Self {
        self.relabeled(|_, _| label)
    }

    /// Writes the ASCII mesh format with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "nodes {}", self.nodes.len());
        for p in &self.nodes {
            let _ = writeln!(out, "{:.16e} {:.16e}", p[0], p[1]);
        }
        let _ = writeln!(out, "elements {}", self.elements.len());
        for e in &self.elements {
            let _ = writeln!(out, "{} {} {}", e[0], e[1], e[2]);
        }
        let _ = writeln!(out, "boundary {}", self.boundary.len());
        for b in &self.boundary {
            let _ = writeln!(out, "{} {} {}", b.nodes[0], b.nodes[1], b.label.code());
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }
}

type Lines<'a> = std::iter::Filter<
    std::iter::Map<std::iter::Enumerate<std::str::Lines<'a>>, fn((usize, &'a str)) -> (usize, &'a str)>,
    fn(&(usize, &'a str)) -> bool,
>;

fn format_error(line: usize, message: &str) -> Error {
    Error::MeshFormat {
        line,
        message: message.to_string(),
    }
}

fn next_line<'a>(lines: &mut Lines<'a>) -> Result<(usize, Vec<&'a str>)> {
    let (n, line) = lines.next().ok_or_else(|| format_error(0, "unexpected end of file"))?;
    Ok((n, line.split_whitespace().collect()))
}

fn section_header(lines: &mut Lines<'_>, keyword: &str) -> Result<usize> {
    let (n, parts) = next_line(lines)?;
    match parts.as_slice() {
        [k, count] if *k == keyword => count.parse().map_err(|_| format_error(n, "invalid count")),
        _ => Err(format_error(n, &format!("expected `{keyword} <count>`"))),
    }
}

fn parse_all<T: FromStr>(n: usize, parts: &[&str], arity: usize, what: &str) -> Result<Vec<T>> {
    if parts.len() != arity {
        return Err(format_error(n, &format!("expected {arity} entries")));
    }
    parts
        .iter()
        .map(|s| s.parse().map_err(|_| format_error(n, &format!("invalid {what}"))))
        .collect()
}

impl FromStr for Triangulation {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let numbered: fn((usize, &str)) -> (usize, &str) = |(i, l)| (i + 1, l.trim());
        let non_empty: fn(&(usize, &str)) -> bool = |(_, l)| !l.is_empty();
        let mut lines: Lines<'_> = text.lines().enumerate().map(numbered).filter(non_empty);

        let n_nodes = section_header(&mut lines, "nodes")?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let (n, parts) = next_line(&mut lines)?;
            let v: Vec<f64> = parse_all(n, &parts, 2, "coordinate")?;
            nodes.push([v[0], v[1]]);
        }
        let n_elements = section_header(&mut lines, "elements")?;
        let mut elements = Vec::with_capacity(n_elements);
        for _ in 0..n_elements {
            let (n, parts) = next_line(&mut lines)?;
            let v: Vec<usize> = parse_all(n, &parts, 3, "node index")?;
            elements.push([v[0], v[1], v[2]]);
        }
        let n_boundary = section_header(&mut lines, "boundary")?;
        let mut boundary = Vec::with_capacity(n_boundary);
        for _ in 0..n_boundary {
            let (n, parts) = next_line(&mut lines)?;
            if parts.len() != 3 {
                return Err(format_error(n, "expected `i j LABEL`"));
            }
            let v: Vec<usize> = parse_all(n, &parts[..2], 2, "node index")?;
            let label = match parts[2] {
                "D" => BoundaryLabel::Dirichlet,
                "N" => BoundaryLabel::Neumann,
                _ => return Err(format_error(n, "label must be D or N")),
            };
            boundary.push(BoundarySide {
                nodes: [v[0], v[1]],
                label,
            });
        }
        if let Some((n, _)) = lines.next() {
            return Err(format_error(n, "trailing content"));
        }
        Triangulation::new(nodes, elements, boundary)
    }
}

/// Coarse domains used by the benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// The square (-1,1)^2 split along the diagonal.
    UnitSquareSym,
    /// (-1,1)^2 without [0,1]x[-1,0], six right triangles around the reentrant corner.
    LShape,
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit_square_sym" | "square" => Ok(Domain::UnitSquareSym),
            "lshape" => Ok(Domain::LShape),
            other => Err(Error::InvalidArgument(format!("unknown domain `{other}`"))),
        }
    }
}

/// Coarse conforming mesh of the domain; every boundary side is labeled Dirichlet.
pub fn initial_mesh(domain: Domain) -> Triangulation {
    let (nodes, elements) = match domain {
        Domain::UnitSquareSym => (
            vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]],
            vec![[1, 2, 0], [3, 0, 2]],
        ),
        Domain::LShape => {
            let nodes = vec![
                [0.0, 0.0],
                [1.0, 0.0],
                [1.0, 1.0],
                [0.0, 1.0],
                [-1.0, 1.0],
                [-1.0, 0.0],
                [-1.0, -1.0],
                [0.0, -1.0],
            ];
            // fan (0, a, b); the hypotenuse runs through the origin and a diagonal node
            let fan = [(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7)];
            let elements = fan
                .iter()
                .map(|&(a, b)| {
                    let pa: [f64; 2] = nodes[a];
                    let diagonal_a = pa[0] != 0.0 && pa[1] != 0.0;
                    if diagonal_a {
                        [b, 0, a]
                    } else {
                        [a, b, 0]
                    }
                })
                .collect();
            (nodes, elements)
        }
    };
    let boundary: Vec<[usize; 2]> = match domain {
        Domain::UnitSquareSym => vec![[0, 1], [1, 2], [2, 3], [3, 0]],
        Domain::LShape => (0..8).map(|i| [i, (i + 1) % 8]).collect(),
    };
    let boundary = boundary
        .into_iter()
        .map(|nodes| BoundarySide {
            nodes,
            label: BoundaryLabel::Dirichlet,
        })
        .collect();
    Triangulation::new(nodes, elements, boundary).expect("coarse meshes are valid")
}

/// Set of element indices selected for refinement.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MarkedSet(BTreeSet<usize>);

impl MarkedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn all(mesh: &Triangulation) -> Self {
        Self((0..mesh.n_elements()).collect())
    }

    pub fn insert(&mut self, t: usize) {
        self.0.insert(t);
    }

    pub fn contains(&self, t: usize) -> bool {
        self.0.contains(&t)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<usize> for MarkedSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Result of a refinement together with the data needed to prolong
/// finite element functions.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub mesh: Triangulation,
    /// Coarse element containing each fine element.
    pub parent: Vec<usize>,
    /// Endpoints of the bisected edge for every new node, in node order
    /// starting at the coarse node count.
    pub new_nodes: Vec<[usize; 2]>,
}

pub fn refine(mesh: &Triangulation, marked: &MarkedSet) -> Result<Triangulation> {
    Ok(refine_with_history(mesh, marked)?.mesh)
}

/// Newest-vertex bisection of every marked element plus the closure needed
/// for conformity.
pub fn refine_with_history(mesh: &Triangulation, marked: &MarkedSet) -> Result<Refinement> {
    if let Some(t) = marked.iter().find(|&t| t >= mesh.n_elements()) {
        return Err(Error::InvalidArgument(format!("marked element {t} does not exist")));
    }
    let n_sides = mesh.sides.len();
    let mut cut = vec![false; n_sides];
    let mut queue: Vec<usize> = Vec::new();
    for t in marked.iter() {
        let s = mesh.element_sides[t][0];
        if !cut[s] {
            cut[s] = true;
            queue.push(s);
        }
    }
    // closure: an element with any cut side must also cut its refinement edge
    while let Some(s) = queue.pop() {
        let side = mesh.sides[s];
        for t in std::iter::once(side.element).chain(side.neighbor) {
            let r = mesh.element_sides[t][0];
            if !cut[r] {
                cut[r] = true;
                queue.push(r);
            }
        }
    }

    let mut nodes = mesh.nodes.clone();
    let mut new_nodes = Vec::new();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    for (s, side) in mesh.sides.iter().enumerate() {
        if cut[s] {
            let [a, b] = side.nodes;
            midpoint.insert((a.min(b), a.max(b)), nodes.len());
            nodes.push(side.midpoint(mesh));
            new_nodes.push([a, b]);
        }
    }
    let mid = |a: usize, b: usize| midpoint.get(&(a.min(b), a.max(b))).copied();

    let mut elements = Vec::with_capacity(mesh.n_elements() + 2 * new_nodes.len());
    let mut generation = Vec::with_capacity(elements.capacity());
    let mut parent = Vec::with_capacity(elements.capacity());
    let mut stack: Vec<([usize; 3], u32)> = Vec::new();
    for (t, &el) in mesh.elements.iter().enumerate() {
        stack.push((el, mesh.generation[t]));
        while let Some((e, g)) = stack.pop() {
            let [a, b, c] = e;
            match mid(b, c) {
                Some(m) => {
                    // pushed in reverse so the first child is emitted first
                    stack.push(([m, c, a], g + 1));
                    stack.push(([m, a, b], g + 1));
                }
                None => {
                    elements.push(e);
                    generation.push(g);
                    parent.push(t);
                }
            }
        }
    }

    let mut boundary = Vec::with_capacity(mesh.boundary.len() + new_nodes.len());
    for bs in &mesh.boundary {
        let [a, b] = bs.nodes;
        match mid(a, b) {
            Some(m) => {
                boundary.push(BoundarySide {
                    nodes: [a, m],
                    label: bs.label,
                });
                boundary.push(BoundarySide {
                    nodes: [m, b],
                    label: bs.label,
                });
            }
            None => boundary.push(*bs),
        }
    }

    let mesh = Triangulation::with_generation(nodes, elements, boundary, generation)?;
    Ok(Refinement {
        mesh,
        parent,
        new_nodes,
    })
}

/// Outcome of the bulk criterion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Marking {
    Marked(MarkedSet),
    /// Every indicator vanishes; there is nothing left to refine.
    Converged,
}

impl Marking {
    pub fn into_set(self) -> MarkedSet {
        match self {
            Marking::Marked(m) => m,
            Marking::Converged => MarkedSet::new(),
        }
    }
}

/// Minimal set `M` with `sum_M eta_T^2 >= theta^2 sum eta_T^2`, taken greedily
/// from the largest indicators; ties go to the smaller element index.
pub fn dorfler_mark(indicators: &[f64], theta: f64) -> Result<Marking> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!("theta = {theta} not in (0,1)")));
    }
    if let Some(i) = indicators.iter().position(|&e| !(e >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "indicator {i} is negative or not a number"
        )));
    }
    let total: f64 = indicators.iter().map(|e| e * e).sum();
    if total == 0.0 {
        return Ok(Marking::Converged);
    }
    let mut order: Vec<usize> = (0..indicators.len()).collect();
    order.sort_by(|&i, &j| indicators[j].total_cmp(&indicators[i]).then(i.cmp(&j)));
    let goal = theta * theta * total;
    let mut acc = 0.0;
    let mut set = MarkedSet::new();
    for i in order {
        set.insert(i);
        acc += indicators[i] * indicators[i];
        if acc >= goal {
            break;
        }
    }
    Ok(Marking::Marked(set))
}

/// Element diameters and the average mesh size `|N_h|^{-1/2}`.
pub fn mesh_sizes(mesh: &Triangulation) -> (Vec<f64>, f64) {
    (mesh.diameters.clone(), average_mesh_size(mesh))
}

pub fn average_mesh_size(mesh: &Triangulation) -> f64 {
    (mesh.n_nodes() as f64).powf(-0.5)
}
