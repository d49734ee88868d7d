//! Compressed sparse rows and a sparse LDL^T factorization.
//!
//! The factorization is the classical up-looking LDL^T driven by the
//! elimination tree, applied after a nested-dissection ordering computed
//! from breadth-first level structures of the matrix graph.

use log::warn;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Assembles from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, j, _) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(i, j, v) in triplets {
            cols[next[i]] = j;
            vals[next[i]] = v;
            next[i] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for i in 0..nrows {
            row.clear();
            row.extend((counts[i]..counts[i + 1]).map(|p| (cols[p], vals[p])));
            row.sort_by_key(|e| e.0);
            for &(j, v) in &row {
                if indices.len() > indptr[i] && *indices.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_dense_rows(rows: &[Vec<f64>], ncols: usize) -> Self {
        let triplets: Vec<_> = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(move |(j, &v)| (i, j, v))
            })
            .collect();
        Self::from_triplets(rows.len(), ncols, &triplets)
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn transpose_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * yi;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            t.extend(self.row(i).map(|(j, v)| (j, i, v)));
        }
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        d
    }

    /// Off-diagonal adjacency of a square pattern, symmetrized.
    fn graph(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nrows];
        for i in 0..self.nrows {
            for (j, _) in self.row(i) {
                if i != j {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}

/// Fill-reducing permutation (new position -> old index).
pub fn nested_dissection(adj: &[Vec<usize>]) -> Vec<usize> {
    const LEAF: usize = 64;
    let n = adj.len();
    let mut order = Vec::with_capacity(n);
    // stamp[v] identifies the subset currently containing v
    let mut stamp = vec![0usize; n];
    let mut level = vec![usize::MAX; n];
    let mut next_stamp = 1usize;

    enum Task {
        Split(Vec<usize>),
        Emit(Vec<usize>),
    }
    let mut tasks = vec![Task::Split((0..n).collect())];

    while let Some(task) = tasks.pop() {
        let set = match task {
            Task::Emit(v) => {
                order.extend(v);
                continue;
            }
            Task::Split(v) => v,
        };
        if set.len() <= LEAF {
            order.extend(set);
            continue;
        }
        let id = next_stamp;
        next_stamp += 1;
        for &v in &set {
            stamp[v] = id;
        }
        let bfs = |root: usize, level: &mut [usize], stamp: &[usize]| -> Vec<Vec<usize>> {
            let mut levels = vec![vec![root]];
            level[root] = 0;
            let mut seen = vec![root];
            loop {
                let mut next = Vec::new();
                let depth = levels.len();
                for &v in levels.last().unwrap() {
                    for &w in &adj[v] {
                        if stamp[w] == id && level[w] == usize::MAX {
                            level[w] = depth;
                            next.push(w);
                            seen.push(w);
                        }
                    }
                }
                if next.is_empty() {
                    break;
                }
                levels.push(next);
            }
            for v in seen {
                level[v] = usize::MAX;
            }
            levels
        };

        let mut root = set[0];
        let mut levels = bfs(root, &mut level, &stamp);
        let reached: usize = levels.iter().map(Vec::len).sum();
        if reached < set.len() {
            // disconnected: handle the component of `root` and the rest separately
            let comp: Vec<usize> = levels.concat();
            for &v in &comp {
                stamp[v] = 0;
            }
            let rest: Vec<usize> = set.into_iter().filter(|&v| stamp[v] == id).collect();
            tasks.push(Task::Split(rest));
            tasks.push(Task::Split(comp));
            continue;
        }
        // pseudo-peripheral root
        for _ in 0..4 {
            let far = *levels
                .last()
                .unwrap()
                .iter()
                .min_by_key(|&&v| adj[v].iter().filter(|&&w| stamp[w] == id).count())
                .unwrap();
            let candidate = bfs(far, &mut level, &stamp);
            if candidate.len() > levels.len() {
                root = far;
                levels = candidate;
            } else {
                break;
            }
        }
        let _ = root;
        if levels.len() < 3 {
            order.extend(set);
            continue;
        }
        // thinnest level leaving at least a quarter of the set on each side
        let total = set.len();
        let mut before = 0;
        let mut mid = 0;
        let mut median = 0;
        for (k, l) in levels.iter().enumerate() {
            let after = total - before - l.len();
            if median == 0 && before + l.len() >= total / 2 {
                median = k;
            }
            if 4 * before >= total && 4 * after >= total && (mid == 0 || l.len() < levels[mid].len()) {
                mid = k;
            }
            before += l.len();
        }
        if mid == 0 {
            mid = median;
        }
        let mid = mid.clamp(1, levels.len() - 2);
        for (k, l) in levels.iter().enumerate() {
            for &v in l {
                level[v] = k;
            }
        }
        let mut part_a: Vec<usize> = levels[..mid].concat();
        let part_b: Vec<usize> = levels[mid + 1..].concat();
        let mut separator = Vec::new();
        for &v in &levels[mid] {
            if adj[v].iter().any(|&w| stamp[w] == id && level[w] == mid + 1) {
                separator.push(v);
            } else {
                part_a.push(v);
            }
        }
        for &v in &set {
            level[v] = usize::MAX;
        }
        tasks.push(Task::Emit(separator));
        tasks.push(Task::Split(part_b));
        tasks.push(Task::Split(part_a));
    }
    order
}

/// Sparse `P A P^T = L D L^T` for symmetric positive (semi)definite `A`.
///
/// Pivots that vanish relative to the original diagonal are treated as
/// redundant: the corresponding unknown is pinned to zero.
#[derive(Clone, Debug)]
pub struct SparseCholesky {
    n: usize,
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d_inv: Vec<f64>,
    dropped: Vec<usize>,
}

impl SparseCholesky {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        let perm = nested_dissection(&a.graph());
        Self::factor_with_ordering(a, perm)
    }

    pub fn factor_with_ordering(a: &SparseMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.nrows;
        if a.ncols != n || perm.len() != n {
            return Err(Error::InvalidArgument("factorization needs a square matrix".into()));
        }
        let mut pinv = vec![usize::MAX; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }

        // symbolic: elimination tree and column counts
        let mut parent = vec![usize::MAX; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for (j, _) in a.row(perm[k]) {
                let mut i = pinv[j];
                if i < k {
                    while flag[i] != k {
                        if parent[i] == usize::MAX {
                            parent[i] = k;
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let total = lp[n];
        let mut li = vec![0usize; total];
        let mut lx = vec![0.0; total];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut dropped = Vec::new();
        lnz.iter_mut().for_each(|c| *c = 0);
        flag.iter_mut().for_each(|f| *f = usize::MAX);

        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            let mut diag = 0.0f64;
            for (j, v) in a.row(perm[k]) {
                let mut i = pinv[j];
                if i <= k {
                    y[i] += v;
                    if i == k {
                        diag += v.abs();
                    }
                    let mut len = 0;
                    while flag[i] != k {
                        pattern[len] = i;
                        len += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                    while len > 0 {
                        top -= 1;
                        len -= 1;
                        pattern[top] = pattern[len];
                    }
                }
            }
            let mut dk = y[k];
            y[k] = 0.0;
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let start = lp[i];
                let end = start + lnz[i];
                for p in start..end {
                    y[li[p]] -= lx[p] * yi;
                }
                let l_ki = yi * d[i];
                dk -= l_ki * yi;
                li[end] = k;
                lx[end] = l_ki;
                lnz[i] += 1;
            }
            let scale = diag.max(f64::MIN_POSITIVE);
            if dk <= 1e-10 * scale {
                if dk < -1e-8 * scale {
                    return Err(Error::Singular(format!(
                        "matrix is not positive semidefinite (pivot {dk:e} at row {})",
                        perm[k]
                    )));
                }
                dropped.push(perm[k]);
                d[k] = 0.0;
            } else {
                // store the inverse pivot
                d[k] = 1.0 / dk;
            }
        }
        if !dropped.is_empty() {
            warn!("dropped {} redundant pivot(s) of a {}x{} system", dropped.len(), n, n);
        }
        Ok(Self {
            n,
            perm,
            lp,
            li,
            lx,
            d_inv: d,
            dropped,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_factor(&self) -> usize {
        self.lp[self.n]
    }

    /// Original indices whose pivot vanished; their unknowns are set to zero.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        self.solve_into(b, &mut x);
        x
    }

    pub fn solve_into(&self, b: &[f64], out: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        // the columns of L are stored by column index i in lp[i]..lp[i+1]
        for j in 0..n {
            let yj = y[j];
            if yj != 0.0 {
                for p in self.lp[j]..self.lp[j + 1] {
                    y[self.li[p]] -= self.lx[p] * yj;
                }
            }
        }
        for (yj, dj) in y.iter_mut().zip(&self.d_inv) {
            *yj *= dj;
        }
        for j in (0..n).rev() {
            let mut s = y[j];
            for p in self.lp[j]..self.lp[j + 1] {
                s -= self.lx[p] * y[self.li[p]];
            }
            y[j] = s;
        }
        for (k, &p) in self.perm.iter().enumerate() {
            out[p] = y[k];
        }
    }
}
