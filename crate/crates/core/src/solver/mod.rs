//! ADMM driver for saddle-point splittings and the local subproblem solvers.

pub mod qp;
pub mod sparse;

use log::debug;

use crate::error::{Error, Result};

pub use qp::{solve_equality_constrained_quadratic, Block, BlockDiagonal, EqualityQp};
pub use sparse::{SparseCholesky, SparseMatrix};

type Vec2 = [f64; 2];

fn norm(z: Vec2) -> f64 {
    z[0].hypot(z[1])
}

/// Minimizer of `kappa |r| + 1/2 |r - z|^2`.
pub fn shrink(z: Vec2, kappa: f64) -> Vec2 {
    let n = norm(z);
    if n <= kappa {
        return [0.0, 0.0];
    }
    let s = 1.0 - kappa / n;
    [s * z[0], s * z[1]]
}

/// Projection onto the closed unit ball.
pub fn project_ball(z: Vec2) -> Vec2 {
    let n = norm(z);
    if n <= 1.0 {
        z
    } else {
        [z[0] / n, z[1] / n]
    }
}

/// Minimizer of `1/sigma |r|^sigma + weight tau (1/2 |r|^2 - r.z)`.
///
/// The minimizer is `rho z/|z|` where `rho` solves
/// `rho^(sigma-1) + weight tau rho = weight tau |z|`.
pub fn prox_power(z: Vec2, sigma: f64, weight: f64, tau: f64) -> Result<Vec2> {
    if sigma <= 1.0 || weight <= 0.0 || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "prox_power needs sigma > 1 and positive weight and step (got {sigma}, {weight}, {tau})"
        )));
    }
    let nz = norm(z);
    if nz == 0.0 {
        return Ok([0.0, 0.0]);
    }
    let c = weight * tau;
    let e = sigma - 1.0;
    let phi = |r: f64| r.powf(e) + c * (r - nz);
    let mut lo = 0.0;
    // both rho <= |z| and rho^(sigma-1) <= c |z| hold at the root
    let mut hi = nz.min((c * nz).powf(1.0 / e));
    if phi(hi) <= 0.0 {
        return Ok([hi / nz * z[0], hi / nz * z[1]]);
    }
    let mut r = hi;
    for _ in 0..100 {
        let f = phi(r);
        if f > 0.0 {
            hi = r;
        } else {
            lo = r;
        }
        let df = e * r.powf(e - 1.0) + c;
        let mut next = r - f / df;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - r).abs() <= 1e-15 * r.max(f64::MIN_POSITIVE) || hi - lo <= 1e-15 * hi {
            return Ok([next / nz * z[0], next / nz * z[1]]);
        }
        r = next;
    }
    Err(Error::NewtonFailure(nz))
}

/// Symmetric system with prescribed values on some unknowns, factored on the
/// remaining ones.
#[derive(Clone, Debug)]
pub struct DirichletSystem {
    matrix: SparseMatrix,
    fixed: Vec<bool>,
    free: Vec<usize>,
    factor: SparseCholesky,
}

impl DirichletSystem {
    pub fn new(matrix: SparseMatrix, fixed: &[bool]) -> Result<Self> {
        let n = matrix.nrows();
        let mut index = vec![usize::MAX; n];
        let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
        for (k, &i) in free.iter().enumerate() {
            index[i] = k;
        }
        let mut t = Vec::with_capacity(matrix.nnz());
        for &i in &free {
            for (j, v) in matrix.row(i) {
                if !fixed[j] {
                    t.push((index[i], index[j], v));
                }
            }
        }
        let reduced = SparseMatrix::from_triplets(free.len(), free.len(), &t);
        let factor = SparseCholesky::factor(&reduced)?;
        if !factor.dropped().is_empty() {
            return Err(Error::Singular(format!(
                "reduced system has {} zero pivot(s)",
                factor.dropped().len()
            )));
        }
        Ok(Self {
            matrix,
            fixed: fixed.to_vec(),
            free,
            factor,
        })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    /// Solves `A x = rhs` on the free unknowns with `x = values` on the fixed ones.
    pub fn solve(&self, rhs: &[f64], values: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = (0..rhs.len())
            .map(|i| if self.fixed[i] { values[i] } else { 0.0 })
            .collect();
        let ax = self.matrix.mul_vec(&x);
        let b: Vec<f64> = self.free.iter().map(|&i| rhs[i] - ax[i]).collect();
        let y = self.factor.solve(&b);
        for (k, &i) in self.free.iter().enumerate() {
            x[i] = y[k];
        }
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRule {
    Fixed,
    ResidualBalance,
}

#[derive(Clone, Copy, Debug)]
pub struct AdmmConfig {
    pub tau0: f64,
    pub adapt: StepRule,
    pub tol: f64,
    pub max_iters: usize,
}

impl AdmmConfig {
    pub fn new(tol: f64) -> Self {
        Self {
            tau0: 1.0,
            adapt: StepRule::ResidualBalance,
            tol,
            max_iters: 5000,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0) || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tau0 and tol must be positive".into()));
        }
        Ok(())
    }
}

/// Iterate `(x, y; lambda)` of the splitting `min F(x) + G(y)` s.t. `Ax = y`.
///
/// The multiplier is unscaled, so changing `tau` leaves it untouched.
#[derive(Clone, Debug)]
pub struct AdmmState {
    pub primary: Vec<f64>,
    pub auxiliary: Vec<f64>,
    pub multiplier: Vec<f64>,
    pub tau: f64,
    pub residual_history: Vec<(f64, f64)>,
    pub converged: bool,
}

impl AdmmState {
    pub fn new(primary: Vec<f64>, auxiliary: Vec<f64>, multiplier: Vec<f64>, tau: f64) -> Self {
        Self {
            primary,
            auxiliary,
            multiplier,
            tau,
            residual_history: Vec::new(),
            converged: false,
        }
    }

    pub fn iterations(&self) -> usize {
        self.residual_history.len()
    }
}

/// Augmented Lagrangian
/// `F(x) + G(y) + (lambda, Ax - y)_W + tau/2 |Ax - y|_W^2`
/// with a diagonal pairing `W` on the auxiliary space.
pub trait SaddleProblem {
    fn weights(&self) -> &[f64];

    /// `argmin_x F(x) + tau/2 |Ax - y + lambda/tau|_W^2`
    fn primary_update(&mut self, auxiliary: &[f64], multiplier: &[f64], tau: f64) -> Result<Vec<f64>>;

    fn couple(&self, primary: &[f64]) -> Vec<f64>;

    /// `argmin_y G(y) + tau/2 |y - z|_W^2`
    fn auxiliary_update(&self, z: &[f64], tau: f64) -> Result<Vec<f64>>;
}

fn weighted_norm(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(w, v)| w * v * v).sum::<f64>().sqrt()
}

pub fn admm_run(problem: &mut impl SaddleProblem, config: &AdmmConfig, initial: AdmmState) -> Result<AdmmState> {
    config.validate()?;
    let mut state = initial;
    if !(state.tau > 0.0) {
        state.tau = config.tau0;
    }
    let w = problem.weights().to_vec();
    let mut best: Option<(f64, AdmmState)> = None;
    let mut last_change = 0usize;
    for it in 0..config.max_iters {
        let tau = state.tau;
        state.primary = problem.primary_update(&state.auxiliary, &state.multiplier, tau)?;
        let ax = problem.couple(&state.primary);
        let z: Vec<f64> = ax.iter().zip(&state.multiplier).map(|(a, l)| a + l / tau).collect();
        let y = problem.auxiliary_update(&z, tau)?;
        let gap: Vec<f64> = ax.iter().zip(&y).map(|(a, b)| a - b).collect();
        for (l, g) in state.multiplier.iter_mut().zip(&gap) {
            *l += tau * g;
        }
        let step: Vec<f64> = y.iter().zip(&state.auxiliary).map(|(a, b)| a - b).collect();
        let primal = weighted_norm(&w, &gap);
        let dual = tau * weighted_norm(&w, &step);
        state.auxiliary = y;
        state.residual_history.push((primal, dual));

        let measure = primal.max(dual);
        if measure <= config.tol {
            state.converged = true;
            debug!("ADMM converged after {} iterations (tau {tau:e})", it + 1);
            return Ok(state);
        }
        if best.as_ref().map_or(true, |(m, _)| measure < *m) {
            best = Some((measure, state.clone()));
        }
        if config.adapt == StepRule::ResidualBalance && it + 1 >= last_change + 5 {
            if primal > 10.0 * dual {
                state.tau = 2.0 * tau;
                last_change = it + 1;
            } else if dual > 10.0 * primal {
                state.tau = 0.5 * tau;
                last_change = it + 1;
            }
        }
    }
    let (measure, mut out) = best.expect("at least one iteration");
    log::warn!(
        "ADMM stopped after {} iterations with residual {measure:e} > {:e}",
        config.max_iters,
        config.tol
    );
    out.residual_history = state.residual_history;
    out.converged = false;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_min(f: impl Fn(f64) -> f64, hi: f64) -> f64 {
        let steps = (hi / 1e-6) as usize + 1;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=steps {
            let r = i as f64 * 1e-6;
            let v = f(r);
            if v < best.0 {
                best = (v, r);
            }
        }
        best.1
    }

    #[test]
    fn shrink_examples() {
        assert_eq!(shrink([0.5, 0.0], 1.0), [0.0, 0.0]);
        let s = shrink([2.0, 0.0], 1.0);
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] == 0.0);
        let r = grid_min(|r| r.abs() + 0.5 * (r - 2.0).powi(2), 3.0);
        assert!((r - 1.0).abs() < 1e-5);
        assert_eq!(shrink([3.0, 4.0], 5.0), [0.0, 0.0]);
        assert_eq!(shrink([3.0, 4.0], 0.0), [3.0, 4.0]);
    }

    #[test]
    fn ball_projection() {
        assert_eq!(project_ball([0.3, 0.4]), [0.3, 0.4]);
        let p = project_ball([3.0, 4.0]);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert_eq!(project_ball([-2.0, 0.0]), [-1.0, 0.0]);
    }

    #[test]
    fn prox_power_examples() {
        let p = prox_power([2.0, 0.0], 2.0, 1.0, 1.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-14 && p[1] == 0.0);
        assert_eq!(prox_power([0.0, 0.0], 1.7, 3.0, 0.1).unwrap(), [0.0, 0.0]);
        let p = prox_power([1.0, 0.0], 1.5, 1.0, 1.0).unwrap();
        assert!((p[0].sqrt() + p[0] - 1.0).abs() < 1e-13);
        let r = grid_min(|r| r.powf(1.5) / 1.5 + 0.5 * (r - 1.0).powi(2), 1.0);
        assert!((p[0] - r).abs() < 1e-5);
        assert!(prox_power([1.0, 0.0], 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn prox_power_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let sigma = rng.gen_range(1.05..7.0);
            let w = 10f64.powf(rng.gen_range(-3.0..3.0));
            let tau = 10f64.powf(rng.gen_range(-3.0..3.0));
            let z = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let r = prox_power(z, sigma, w, tau).unwrap();
            let obj = |r: Vec2| {
                norm(r).powf(sigma) / sigma + w * tau * (0.5 * (r[0] * r[0] + r[1] * r[1]) - r[0] * z[0] - r[1] * z[1])
            };
            let f0 = obj(r);
            for k in 0..8 {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                let d = [r[0] + 1e-4 * a.cos(), r[1] + 1e-4 * a.sin()];
                assert!(obj(d) >= f0 - 1e-12 * f0.abs().max(1.0));
            }
        }
    }

    /// min 1/2 |x - c|^2 + |y|_1 with x = y, solved in closed form by soft thresholding.
    struct Lasso {
        c: Vec<f64>,
        w: Vec<f64>,
    }

    impl SaddleProblem for Lasso {
        fn weights(&self) -> &[f64] {
            &self.w
        }
        fn primary_update(&mut self, y: &[f64], l: &[f64], tau: f64) -> Result<Vec<f64>> {
            Ok((0..y.len())
                .map(|i| (self.c[i] + tau * y[i] - l[i]) / (1.0 + tau))
                .collect())
        }
        fn couple(&self, x: &[f64]) -> Vec<f64> {
            x.to_vec()
        }
        fn auxiliary_update(&self, z: &[f64], tau: f64) -> Result<Vec<f64>> {
            Ok(z.iter().map(|&v| v.signum() * (v.abs() - 1.0 / tau).max(0.0)).collect())
        }
    }

    #[test]
    fn admm_solves_a_separable_problem() {
        let mut p = Lasso {
            c: vec![3.0, -0.5, -2.0, 0.9],
            w: vec![1.0; 4],
        };
        for adapt in [StepRule::Fixed, StepRule::ResidualBalance] {
            let cfg = AdmmConfig {
                tau0: 1.0,
                adapt,
                tol: 1e-10,
                max_iters: 1000,
            };
            let s = admm_run(
                &mut p,
                &cfg,
                AdmmState::new(vec![0.0; 4], vec![0.0; 4], vec![0.0; 4], 1.0),
            )
            .unwrap();
            assert!(s.converged);
            for (x, e) in s.primary.iter().zip([2.0, 0.0, -1.0, 0.0]) {
                assert!((x - e).abs() < 1e-8);
            }
        }
        let cfg = AdmmConfig {
            tau0: 1.0,
            adapt: StepRule::Fixed,
            tol: 1e-30,
            max_iters: 7,
        };
        let s = admm_run(
            &mut p,
            &cfg,
            AdmmState::new(vec![0.0; 4], vec![0.0; 4], vec![0.0; 4], 1.0),
        )
        .unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations(), 7);
    }
}
