//! Equality-constrained quadratic programs with block-diagonal Hessians.
//!
//! Constraint rows touching a single block are eliminated inside that block;
//! the remaining (coupling) rows form a sparse symmetric positive
//! semidefinite Schur complement, factored once and reused for any number of
//! right-hand sides.

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;

use super::sparse::{SparseCholesky, SparseMatrix};
use crate::error::{Error, Result};

/// Dense symmetric block acting on the listed unknowns.
#[derive(Clone, Debug)]
pub struct Block {
    pub dofs: Vec<usize>,
    pub matrix: DMatrix<f64>,
}

/// Block-diagonal SPD matrix; the blocks must partition the unknowns.
#[derive(Clone, Debug)]
pub struct BlockDiagonal {
    pub dim: usize,
    pub blocks: Vec<Block>,
}

impl BlockDiagonal {
    pub fn diagonal(d: &[f64]) -> Self {
        Self {
            dim: d.len(),
            blocks: d
                .iter()
                .enumerate()
                .map(|(i, &v)| Block {
                    dofs: vec![i],
                    matrix: DMatrix::from_element(1, 1, v),
                })
                .collect(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for b in &self.blocks {
            for (i, &gi) in b.dofs.iter().enumerate() {
                y[gi] = b.dofs.iter().enumerate().map(|(j, &gj)| b.matrix[(i, j)] * x[gj]).sum();
            }
        }
        y
    }
}

/// Precomputed per-block operators, stored row-major.
#[derive(Clone, Debug)]
struct LocalSolve {
    dofs: Vec<usize>,
    local_rows: Vec<usize>,
    global_rows: Vec<usize>,
    /// `H^-1 - H^-1 L^T M L H^-1` with `M = (L H^-1 L^T)^-1`
    k: Vec<f64>,
    /// `H^-1 L^T M`
    p: Vec<f64>,
    m: Vec<f64>,
    /// coupling rows restricted to the block
    g: Vec<f64>,
}

impl LocalSolve {
    /// With `r = b - G^T lambda`: `x = K r + P l` and `nu = P^T r - M l`.
    fn apply(&self, b: &[f64], lambda: &[f64], d: &[f64], x: &mut [f64], nu: &mut [f64]) {
        let n = self.dofs.len();
        let m = self.local_rows.len();
        let r: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = b[self.dofs[i]];
                for (a, &row) in self.global_rows.iter().enumerate() {
                    s -= self.g[a * n + i] * lambda[row];
                }
                s
            })
            .collect();
        for i in 0..n {
            let mut s: f64 = (0..n).map(|j| self.k[i * n + j] * r[j]).sum();
            for (a, &row) in self.local_rows.iter().enumerate() {
                s += self.p[i * m + a] * d[row];
            }
            x[i] = s;
        }
        for a in 0..m {
            let mut s: f64 = (0..n).map(|i| self.p[i * m + a] * r[i]).sum();
            for (c, &row) in self.local_rows.iter().enumerate() {
                s -= self.m[a * m + c] * d[row];
            }
            nu[a] = s;
        }
    }
}

/// Factored KKT system for `min 1/2 x.Hx - b.x` subject to `Cx = d`.
#[derive(Clone, Debug)]
pub struct EqualityQp {
    n: usize,
    c: SparseMatrix,
    locals: Vec<LocalSolve>,
    /// constraint row -> Schur index for coupling rows
    schur_index: Vec<Option<usize>>,
    schur_rows: Vec<usize>,
    schur: SparseCholesky,
}

fn invert(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(m);
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    Ok(chol.solve(&DMatrix::identity(n, n)))
}

impl EqualityQp {
    pub fn new(h: &BlockDiagonal, c: &SparseMatrix) -> Result<Self> {
        let n = h.dim;
        if c.ncols() != n {
            return Err(Error::InvalidArgument("constraint width differs from Hessian".into()));
        }
        let mut block_of = vec![usize::MAX; n];
        let mut position = vec![0usize; n];
        for (bi, b) in h.blocks.iter().enumerate() {
            if b.matrix.nrows() != b.dofs.len() || b.matrix.ncols() != b.dofs.len() {
                return Err(Error::InvalidArgument(format!("block {bi} has the wrong shape")));
            }
            for (i, &d) in b.dofs.iter().enumerate() {
                if d >= n || block_of[d] != usize::MAX {
                    return Err(Error::InvalidArgument("blocks do not partition the unknowns".into()));
                }
                block_of[d] = bi;
                position[d] = i;
            }
        }
        if block_of.contains(&usize::MAX) {
            return Err(Error::InvalidArgument("blocks do not partition the unknowns".into()));
        }

        let nb = h.blocks.len();
        let mut local_rows = vec![Vec::new(); nb];
        let mut global_rows = vec![Vec::new(); nb];
        let mut schur_index = vec![None; c.nrows()];
        let mut schur_rows = Vec::new();
        for r in 0..c.nrows() {
            let mut touched: Vec<usize> = c.row(r).filter(|e| e.1 != 0.0).map(|(j, _)| block_of[j]).collect();
            touched.sort_unstable();
            touched.dedup();
            match touched.len() {
                0 => {
                    schur_index[r] = Some(schur_rows.len());
                    schur_rows.push(r);
                }
                1 => local_rows[touched[0]].push(r),
                _ => {
                    for &b in &touched {
                        global_rows[b].push(r);
                    }
                    schur_index[r] = Some(schur_rows.len());
                    schur_rows.push(r);
                }
            }
        }

        let locals: Result<Vec<LocalSolve>> = h
            .blocks
            .par_iter()
            .enumerate()
            .zip(local_rows.into_par_iter())
            .zip(global_rows.into_par_iter())
            .map(|(((bi, b), lrows), grows)| {
                let nl = b.dofs.len();
                let dense_rows = |rows: &[usize]| {
                    let mut m = DMatrix::zeros(rows.len(), nl);
                    for (a, &r) in rows.iter().enumerate() {
                        for (j, v) in c.row(r).filter(|e| block_of[e.0] == bi) {
                            m[(a, position[j])] += v;
                        }
                    }
                    m
                };
                let h_inv = invert(b.matrix.clone(), "Hessian block")?;
                let l = dense_rows(&lrows);
                let g = dense_rows(&grows);
                let (k, p, m) = if lrows.is_empty() {
                    (h_inv.clone(), DMatrix::zeros(nl, 0), DMatrix::zeros(0, 0))
                } else {
                    let hl = &h_inv * l.transpose();
                    let m = invert(&l * &hl, "local constraint system")?;
                    let p = &hl * &m;
                    (&h_inv - &p * hl.transpose(), p, m)
                };
                let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
                Ok(LocalSolve {
                    dofs: b.dofs.clone(),
                    local_rows: lrows,
                    global_rows: grows,
                    k: row_major(&k),
                    p: row_major(&p),
                    m: row_major(&m),
                    g: row_major(&g),
                })
            })
            .collect();
        let locals = locals?;

        let mut triplets = Vec::new();
        for ls in &locals {
            let n = ls.dofs.len();
            let ng = ls.global_rows.len();
            // G K G^T
            let mut gk = vec![0.0; ng * n];
            for a in 0..ng {
                for j in 0..n {
                    gk[a * n + j] = (0..n).map(|i| ls.g[a * n + i] * ls.k[i * n + j]).sum();
                }
            }
            for a in 0..ng {
                for bb in 0..ng {
                    let v: f64 = (0..n).map(|j| gk[a * n + j] * ls.g[bb * n + j]).sum();
                    let ra = schur_index[ls.global_rows[a]].unwrap();
                    let rb = schur_index[ls.global_rows[bb]].unwrap();
                    triplets.push((ra, rb, v));
                }
            }
        }
        let ns = schur_rows.len();
        let s = SparseMatrix::from_triplets(ns, ns, &triplets);
        let schur = SparseCholesky::factor(&s)?;
        debug!(
            "Schur complement: dim {ns}, nnz {}, factor nnz {}",
            s.nnz(),
            schur.nnz_factor()
        );
        if !schur.dropped().is_empty() {
            warn!("{} redundant constraint row(s) dropped", schur.dropped().len());
        }
        Ok(Self {
            n,
            c: c.clone(),
            locals,
            schur_index,
            schur_rows,
            schur,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_constraints(&self) -> usize {
        self.c.nrows()
    }

    /// Returns the minimizer and the multipliers `nu` with `Hx + C^T nu = b`.
    pub fn solve(&self, b: &[f64], d: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        assert_eq!(b.len(), self.n);
        assert_eq!(d.len(), self.c.nrows());
        let local = |lambda: &[f64]| -> Vec<(Vec<f64>, Vec<f64>)> {
            self.locals
                .par_iter()
                .map(|ls| {
                    let mut x = vec![0.0; ls.dofs.len()];
                    let mut nu = vec![0.0; ls.local_rows.len()];
                    ls.apply(b, lambda, d, &mut x, &mut nu);
                    (x, nu)
                })
                .collect()
        };

        // Schur right-hand side G x(0) - d_G, where x(0) solves the blocks for lambda = 0
        let mut rhs: Vec<f64> = self.schur_rows.iter().map(|&r| -d[r]).collect();
        for (ls, (x, _)) in self.locals.iter().zip(local(&vec![0.0; self.c.nrows()])) {
            let n = ls.dofs.len();
            for (a, &row) in ls.global_rows.iter().enumerate() {
                let v: f64 = (0..n).map(|i| ls.g[a * n + i] * x[i]).sum();
                rhs[self.schur_index[row].unwrap()] += v;
            }
        }
        let mut multipliers = self.lambda_view(&self.schur.solve(&rhs));

        let mut x = vec![0.0; self.n];
        for (ls, (xl, nu)) in self.locals.iter().zip(local(&multipliers)) {
            for (i, &gi) in ls.dofs.iter().enumerate() {
                x[gi] = xl[i];
            }
            for (a, &row) in ls.local_rows.iter().enumerate() {
                multipliers[row] = nu[a];
            }
        }

        let cx = self.c.mul_vec(&x);
        let scale = d.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let (row, violation) = cx
            .iter()
            .zip(d)
            .map(|(a, b)| (a - b).abs())
            .enumerate()
            .fold((0, 0.0f64), |m, e| if e.1 > m.1 { e } else { m });
        if violation > 1e-8 * scale {
            return Err(Error::IncompatibleData(format!(
                "constraint row {row} violated by {violation:e}"
            )));
        }
        Ok((x, multipliers))
    }

    fn lambda_view(&self, lambda_s: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.c.nrows()];
        for (k, &r) in self.schur_rows.iter().enumerate() {
            full[r] = lambda_s[k];
        }
        full
    }
}

pub fn solve_equality_constrained_quadratic(
    h: &BlockDiagonal,
    b: &[f64],
    c: &SparseMatrix,
    d: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    EqualityQp::new(h, c)?.solve(b, d)
}
