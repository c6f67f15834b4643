//! Levenberg-Marquardt over a graph of parameter blocks and residual blocks.
//!
//! Residual blocks report Jacobians in the *tangent* coordinates of each
//! parameter block's [`Manifold`]: plain coordinates for Euclidean blocks,
//! `[δω, δt]` left increments for rigid transforms. A [`Manifold::Subspace`]
//! block additionally restricts the update to the column space of a basis,
//! which is how tied or frozen coefficients are expressed.
//!
//! Blocks flagged eliminable (3D points) are removed from the normal
//! equations by a Schur complement when there are more than
//! [`SolverConfig::schur_min_blocks`] of them.

mod loss;

pub use loss::{huber_weight, RobustLoss};

use loss::Corrector;
use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

use crate::geometry::Se3;

pub type BlockId = usize;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolverError {
    #[error("non-finite cost or Jacobian in residual block {residual}")]
    NumericalFailure { residual: usize },
    #[error("normal equations singular; weakest parameter block {block}")]
    SingularNormalEquations { block: BlockId },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Manifold {
    Euclidean(usize),
    /// `[qw, qx, qy, qz, tx, ty, tz]` with tangent `[δω, δt]`, rotation
    /// increment applied on the left.
    Se3,
    /// Euclidean block of `basis.nrows()` coordinates updated as `x + B δ`.
    Subspace {
        basis: DMatrix<f64>,
    },
}

impl Manifold {
    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::Se3 => 7,
            Manifold::Subspace { basis } => basis.nrows(),
        }
    }

    /// Column count of the Jacobians residual blocks return for this block.
    pub fn tangent_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::Se3 => 6,
            Manifold::Subspace { basis } => basis.nrows(),
        }
    }

    /// Degrees of freedom seen by the optimizer.
    pub fn local_dim(&self) -> usize {
        match self {
            Manifold::Subspace { basis } => basis.ncols(),
            other => other.tangent_dim(),
        }
    }

    /// Moves `x` by a tangent-coordinate increment.
    pub fn plus_tangent(&self, x: &[f64], d: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Euclidean(_) | Manifold::Subspace { .. } => x.iter().zip(d).map(|(a, b)| a + b).collect(),
            Manifold::Se3 => {
                let t = se3_from_slice(x);
                let dw = Vector3::new(d[0], d[1], d[2]);
                let dt = Vector3::new(d[3], d[4], d[5]);
                t.retract(&dw, &dt).to_array().to_vec()
            }
        }
    }

    fn plus_local(&self, x: &[f64], d: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Subspace { basis } => {
                let t = basis * DVector::from_column_slice(d);
                self.plus_tangent(x, t.as_slice())
            }
            _ => self.plus_tangent(x, d),
        }
    }

    fn lift(&self, jac: DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Manifold::Subspace { basis } => jac * basis,
            _ => jac,
        }
    }
}

/// Reads a `[qw, qx, qy, qz, tx, ty, tz]` slice.
pub fn se3_from_slice(x: &[f64]) -> Se3 {
    Se3::from_array(&[x[0], x[1], x[2], x[3], x[4], x[5], x[6]])
}

/// One term of the objective `½ Σ ρ(‖r_k‖²)`.
pub trait ResidualBlock: Send + Sync {
    fn num_residuals(&self) -> usize;

    fn parameter_blocks(&self) -> &[BlockId];

    /// Fills `residuals` and, when requested, one Jacobian per parameter
    /// block, each pre-sized to `num_residuals × tangent_dim`. Returns
    /// `false` when the block cannot be evaluated at these parameters.
    fn evaluate(&self, params: &[&[f64]], residuals: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> bool;

    fn loss(&self) -> RobustLoss {
        RobustLoss::None
    }
}

#[derive(Debug, Clone)]
struct ParameterBlock {
    values: Vec<f64>,
    manifold: Manifold,
    constant: bool,
    eliminable: bool,
}

#[derive(Default)]
pub struct Problem {
    blocks: Vec<ParameterBlock>,
    residuals: Vec<Box<dyn ResidualBlock>>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, values: Vec<f64>, manifold: Manifold) -> BlockId {
        assert_eq!(values.len(), manifold.ambient_dim(), "block size mismatch");
        self.blocks.push(ParameterBlock {
            values,
            manifold,
            constant: false,
            eliminable: false,
        });
        self.blocks.len() - 1
    }

    pub fn add_se3(&mut self, t: &Se3) -> BlockId {
        self.add_block(t.to_array().to_vec(), Manifold::Se3)
    }

    pub fn set_constant(&mut self, id: BlockId, constant: bool) {
        self.blocks[id].constant = constant;
    }

    pub fn is_constant(&self, id: BlockId) -> bool {
        self.blocks[id].constant
    }

    /// Marks a block for Schur elimination. Every residual may touch at
    /// most one eliminable block.
    pub fn set_eliminable(&mut self, id: BlockId) {
        self.blocks[id].eliminable = true;
    }

    pub fn add_residual(&mut self, r: Box<dyn ResidualBlock>) {
        for &b in r.parameter_blocks() {
            assert!(b < self.blocks.len(), "residual references unknown block {b}");
        }
        self.residuals.push(r);
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.residuals.len()
    }

    pub fn values(&self, id: BlockId) -> &[f64] {
        &self.blocks[id].values
    }

    pub fn se3(&self, id: BlockId) -> Se3 {
        se3_from_slice(&self.blocks[id].values)
    }

    pub fn set_values(&mut self, id: BlockId, v: Vec<f64>) {
        assert_eq!(v.len(), self.blocks[id].values.len());
        self.blocks[id].values = v;
    }

    fn snapshot(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.values.clone()).collect()
    }

    /// `½ Σ ρ(‖r‖²)` at the current values.
    pub fn cost(&self) -> Result<f64, SolverError> {
        let values = self.snapshot();
        self.cost_at(&values)
            .map_err(|residual| SolverError::NumericalFailure { residual })
    }

    fn cost_at(&self, values: &[Vec<f64>]) -> Result<f64, usize> {
        let costs: Vec<Result<f64, usize>> = self
            .residuals
            .par_iter()
            .enumerate()
            .map(|(k, rb)| {
                let params: Vec<&[f64]> = rb.parameter_blocks().iter().map(|&b| values[b].as_slice()).collect();
                let mut r = vec![0.0; rb.num_residuals()];
                if !rb.evaluate(&params, &mut r, None) {
                    return Err(k);
                }
                let s: f64 = r.iter().map(|x| x * x).sum();
                let c = 0.5 * rb.loss().evaluate(s).0;
                if c.is_finite() {
                    Ok(c)
                } else {
                    Err(k)
                }
            })
            .collect();
        let mut total = 0.0;
        for c in costs {
            total += c?;
        }
        Ok(total)
    }

    /// Gradient divided elementwise by `√diag(JᵀJ)`, a stationarity measure
    /// independent of parameter units.
    pub fn scaled_gradient(&self) -> Result<DVector<f64>, SolverError> {
        let layout = Layout::new(self, usize::MAX);
        let lin = linearize(self, &layout, &self.snapshot())?;
        Ok(DVector::from_iterator(
            lin.g_r.len(),
            (0..lin.g_r.len()).map(|i| lin.g_r[i] / lin.h_rr[(i, i)].max(f64::MIN_POSITIVE).sqrt()),
        ))
    }

    /// `cost(to) − cost(from)` summed per residual as `½ Σ (r₁ − r₀)(r₁ + r₀)`,
    /// which stays accurate when the change is far below the total's ulp.
    fn cost_change(&self, from: &[Vec<f64>], to: &[Vec<f64>]) -> Result<f64, usize> {
        let changes: Vec<Result<f64, usize>> = self
            .residuals
            .par_iter()
            .enumerate()
            .map(|(k, rb)| {
                let eval = |values: &[Vec<f64>]| {
                    let params: Vec<&[f64]> = rb.parameter_blocks().iter().map(|&b| values[b].as_slice()).collect();
                    let mut r = vec![0.0; rb.num_residuals()];
                    rb.evaluate(&params, &mut r, None).then_some(r)
                };
                let (r0, r1) = match (eval(from), eval(to)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(k),
                };
                let s0: f64 = r0.iter().map(|x| x * x).sum();
                let s1: f64 = r1.iter().map(|x| x * x).sum();
                let ds: f64 = r0.iter().zip(&r1).map(|(a, b)| (b - a) * (b + a)).sum();
                let c = 0.5 * rb.loss().difference(s0, s1, ds);
                if c.is_finite() {
                    Ok(c)
                } else {
                    Err(k)
                }
            })
            .collect();
        let mut total = 0.0;
        for c in changes {
            total += c?;
        }
        Ok(total)
    }

    /// Offset of a block inside `gradient()`; `None` for constant blocks.
    pub fn local_offset(&self, id: BlockId) -> Option<usize> {
        if self.blocks[id].constant {
            return None;
        }
        Some(
            self.blocks[..id]
                .iter()
                .filter(|b| !b.constant)
                .map(|b| b.manifold.local_dim())
                .sum(),
        )
    }

    /// Gradient of the cost in local coordinates of all non-constant blocks,
    /// concatenated in block order.
    pub fn gradient(&self) -> Result<DVector<f64>, SolverError> {
        let layout = Layout::new(self, usize::MAX);
        let lin = linearize(self, &layout, &self.snapshot())?;
        let mut g = DVector::zeros(layout.total_local);
        for (b, slot) in layout.slots.iter().enumerate() {
            let dim = self.blocks[b].manifold.local_dim();
            if let Slot::Reduced(o) = slot {
                g.rows_mut(layout.global_offset[b], dim)
                    .copy_from(&lin.g_r.rows(*o, dim));
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub function_tolerance: f64,
    pub gradient_tolerance: f64,
    pub parameter_tolerance: f64,
    pub initial_lambda: f64,
    pub lambda_factor: f64,
    pub max_lambda: f64,
    pub min_diagonal: f64,
    pub max_diagonal: f64,
    /// Stop after this many accepted steps (used for periodic re-association).
    pub max_accepted_steps: Option<usize>,
    pub schur_min_blocks: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            function_tolerance: 1e-10,
            gradient_tolerance: 1e-10,
            parameter_tolerance: 1e-12,
            initial_lambda: 1e-4,
            lambda_factor: 10.0,
            max_lambda: 1e16,
            min_diagonal: 1e-6,
            max_diagonal: 1e32,
            max_accepted_steps: None,
            schur_min_blocks: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    FunctionTolerance,
    GradientTolerance,
    ParameterTolerance,
    /// Damping grew past `max_lambda` without finding a decrease.
    NoProgress,
    MaxAcceptedSteps,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: TerminationReason,
    pub trace: Vec<IterationRecord>,
}

impl SolverReport {
    pub fn converged(&self) -> bool {
        !matches!(
            self.termination,
            TerminationReason::MaxIterations | TerminationReason::MaxAcceptedSteps
        )
    }

    /// Costs of the initial point and of every accepted iterate.
    pub fn accepted_costs(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(self.trace.iter().filter(|r| r.accepted).map(|r| r.cost))
            .collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.accepted_costs().windows(2).all(|w| w[1] <= w[0])
    }
}

static SOLVES: AtomicUsize = AtomicUsize::new(0);
static NON_MONOTONE: AtomicUsize = AtomicUsize::new(0);

/// `(solver invocations, invocations whose accepted costs increased)` in
/// this process.
pub fn monotonicity_stats() -> (usize, usize) {
    (SOLVES.load(Ordering::Relaxed), NON_MONOTONE.load(Ordering::Relaxed))
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Constant,
    Reduced(usize),
    Eliminated(usize),
}

struct Layout {
    slots: Vec<Slot>,
    n_reduced: usize,
    n_eliminated: usize,
    global_offset: Vec<usize>,
    total_local: usize,
}

impl Layout {
    fn new(problem: &Problem, schur_min_blocks: usize) -> Self {
        let n_elim_candidates = problem.blocks.iter().filter(|b| b.eliminable && !b.constant).count();
        let use_schur = n_elim_candidates > schur_min_blocks;
        let mut slots = Vec::with_capacity(problem.blocks.len());
        let mut global_offset = Vec::with_capacity(problem.blocks.len());
        let (mut n_reduced, mut n_eliminated, mut total_local) = (0, 0, 0);
        for b in &problem.blocks {
            global_offset.push(total_local);
            if b.constant {
                slots.push(Slot::Constant);
                continue;
            }
            total_local += b.manifold.local_dim();
            if use_schur && b.eliminable {
                slots.push(Slot::Eliminated(n_eliminated));
                n_eliminated += 1;
            } else {
                slots.push(Slot::Reduced(n_reduced));
                n_reduced += b.manifold.local_dim();
            }
        }
        Self {
            slots,
            n_reduced,
            n_eliminated,
            global_offset,
            total_local,
        }
    }
}

struct EliminatedBlock {
    block: BlockId,
    h_pp: DMatrix<f64>,
    h_pr: DMatrix<f64>,
    g_p: DVector<f64>,
}

struct Linearization {
    h_rr: DMatrix<f64>,
    g_r: DVector<f64>,
    elim: Vec<EliminatedBlock>,
    cost: f64,
}

impl Linearization {
    fn gradient_max_norm(&self) -> f64 {
        let mut m = self.g_r.amax();
        for e in &self.elim {
            m = m.max(e.g_p.amax());
        }
        m
    }

    fn damped(h: &DMatrix<f64>, lambda: f64, cfg: &SolverConfig) -> DMatrix<f64> {
        let mut a = h.clone();
        for i in 0..a.nrows() {
            let d = h[(i, i)].clamp(cfg.min_diagonal, cfg.max_diagonal);
            a[(i, i)] += lambda * d;
        }
        a
    }

    /// Solves the damped normal equations; `None` if not positive definite.
    fn solve(&self, lambda: f64, cfg: &SolverConfig) -> Option<(DVector<f64>, Vec<DVector<f64>>)> {
        let mut s = Self::damped(&self.h_rr, lambda, cfg);
        let mut rhs = -&self.g_r;
        let mut inverses = Vec::with_capacity(self.elim.len());
        for e in &self.elim {
            let p = Self::damped(&e.h_pp, lambda, cfg);
            let pinv = p.cholesky()?.inverse();
            let w = e.h_pr.transpose() * &pinv;
            s -= &w * &e.h_pr;
            rhs += &w * &e.g_p;
            inverses.push(pinv);
        }
        let dr = if s.nrows() > 0 {
            // symmetrize against round-off from the Schur update
            let st = s.transpose();
            s = (s + st) * 0.5;
            s.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let dps = self
            .elim
            .iter()
            .zip(&inverses)
            .map(|(e, pinv)| pinv * (-&e.g_p - &e.h_pr * &dr))
            .collect();
        Some((dr, dps))
    }
}

struct BlockEval {
    cost: f64,
    residual: Vec<f64>,
    jacobians: Vec<DMatrix<f64>>,
}

fn evaluate_with_jacobians(problem: &Problem, rb: &dyn ResidualBlock, values: &[Vec<f64>]) -> Option<BlockEval> {
    let ids = rb.parameter_blocks();
    let m = rb.num_residuals();
    let params: Vec<&[f64]> = ids.iter().map(|&b| values[b].as_slice()).collect();
    let mut residual = vec![0.0; m];
    let mut jacobians: Vec<DMatrix<f64>> = ids
        .iter()
        .map(|&b| DMatrix::zeros(m, problem.blocks[b].manifold.tangent_dim()))
        .collect();
    if !rb.evaluate(&params, &mut residual, Some(&mut jacobians)) {
        return None;
    }
    let s: f64 = residual.iter().map(|x| x * x).sum();
    let rho = rb.loss().evaluate(s);
    let cost = 0.5 * rho.0;
    if !cost.is_finite() || jacobians.iter().any(|j| j.iter().any(|v| !v.is_finite())) {
        return None;
    }
    if !matches!(rb.loss(), RobustLoss::None) {
        let c = Corrector::new(s, rho);
        for j in jacobians.iter_mut() {
            c.correct_jacobian(&residual, j);
        }
        c.correct_residual(&mut residual);
    }
    let jacobians = ids
        .iter()
        .zip(jacobians)
        .map(|(&b, j)| problem.blocks[b].manifold.lift(j))
        .collect();
    Some(BlockEval {
        cost,
        residual,
        jacobians,
    })
}

fn linearize(problem: &Problem, layout: &Layout, values: &[Vec<f64>]) -> Result<Linearization, SolverError> {
    let evals: Vec<Option<BlockEval>> = problem
        .residuals
        .par_iter()
        .map(|rb| evaluate_with_jacobians(problem, rb.as_ref(), values))
        .collect();

    let nr = layout.n_reduced;
    let mut h_rr = DMatrix::zeros(nr, nr);
    let mut g_r = DVector::zeros(nr);
    let mut elim: Vec<Option<EliminatedBlock>> = (0..layout.n_eliminated).map(|_| None).collect();
    for (b, slot) in layout.slots.iter().enumerate() {
        if let Slot::Eliminated(e) = slot {
            let d = problem.blocks[b].manifold.local_dim();
            elim[*e] = Some(EliminatedBlock {
                block: b,
                h_pp: DMatrix::zeros(d, d),
                h_pr: DMatrix::zeros(d, nr),
                g_p: DVector::zeros(d),
            });
        }
    }
    let mut elim: Vec<EliminatedBlock> = elim.into_iter().map(|e| e.unwrap()).collect();

    let mut cost = 0.0;
    for (k, (rb, ev)) in problem.residuals.iter().zip(evals).enumerate() {
        let ev = ev.ok_or(SolverError::NumericalFailure { residual: k })?;
        cost += ev.cost;
        let r = DVector::from_column_slice(&ev.residual);
        let ids = rb.parameter_blocks();
        let mut elim_slot: Option<usize> = None;
        for (a, &ba) in ids.iter().enumerate() {
            let ja = &ev.jacobians[a];
            match layout.slots[ba] {
                Slot::Constant => {}
                Slot::Reduced(oa) => {
                    let ga = ja.transpose() * &r;
                    let mut seg = g_r.rows_mut(oa, ga.nrows());
                    seg += ga;
                    for (c, &bc) in ids.iter().enumerate() {
                        if let Slot::Reduced(oc) = layout.slots[bc] {
                            let hac = ja.transpose() * &ev.jacobians[c];
                            let mut view = h_rr.view_mut((oa, oc), (hac.nrows(), hac.ncols()));
                            view += hac;
                        }
                    }
                }
                Slot::Eliminated(e) => {
                    if let Some(prev) = elim_slot {
                        if prev != e {
                            return Err(SolverError::InvalidProblem(format!(
                                "residual {k} touches two eliminable blocks"
                            )));
                        }
                        continue;
                    }
                    elim_slot = Some(e);
                    let eb = &mut elim[e];
                    eb.g_p += ja.transpose() * &r;
                    eb.h_pp += ja.transpose() * ja;
                    for (c, &bc) in ids.iter().enumerate() {
                        if let Slot::Reduced(oc) = layout.slots[bc] {
                            let hac = ja.transpose() * &ev.jacobians[c];
                            let mut view = eb.h_pr.view_mut((0, oc), (hac.nrows(), hac.ncols()));
                            view += hac;
                        }
                    }
                }
            }
        }
    }
    Ok(Linearization { h_rr, g_r, elim, cost })
}

fn apply_step(
    problem: &Problem,
    layout: &Layout,
    values: &[Vec<f64>],
    dr: &DVector<f64>,
    dps: &[DVector<f64>],
    lin: &Linearization,
) -> Vec<Vec<f64>> {
    let mut out = values.to_vec();
    for (b, slot) in layout.slots.iter().enumerate() {
        let m = &problem.blocks[b].manifold;
        match *slot {
            Slot::Constant => {}
            Slot::Reduced(o) => {
                let d = dr.rows(o, m.local_dim());
                out[b] = m.plus_local(&values[b], d.as_slice());
            }
            Slot::Eliminated(e) => {
                debug_assert_eq!(lin.elim[e].block, b);
                out[b] = m.plus_local(&values[b], dps[e].as_slice());
            }
        }
    }
    out
}

fn weakest_block(problem: &Problem, layout: &Layout, lin: &Linearization) -> BlockId {
    let mut best = (f64::INFINITY, 0);
    for (b, slot) in layout.slots.iter().enumerate() {
        let d = match *slot {
            Slot::Constant => continue,
            Slot::Reduced(o) => (0..problem.blocks[b].manifold.local_dim())
                .map(|i| lin.h_rr[(o + i, o + i)])
                .fold(f64::INFINITY, f64::min),
            Slot::Eliminated(e) => (0..lin.elim[e].h_pp.nrows())
                .map(|i| lin.elim[e].h_pp[(i, i)])
                .fold(f64::INFINITY, f64::min),
        };
        if d < best.0 {
            best = (d, b);
        }
    }
    best.1
}

/// Levenberg-Marquardt with multiplicative damping `λ·diag(JᵀJ)`.
///
/// On success the problem holds the final parameter values.
pub fn solve_lm(problem: &mut Problem, cfg: &SolverConfig) -> Result<SolverReport, SolverError> {
    let layout = Layout::new(problem, cfg.schur_min_blocks);
    let mut values = problem.snapshot();
    let mut lin = linearize(problem, &layout, &values)?;
    let initial_cost = lin.cost;
    let mut cost = lin.cost;
    let mut lambda = cfg.initial_lambda;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut accepted_steps = 0;

    let termination = loop {
        if lin.gradient_max_norm() <= cfg.gradient_tolerance {
            break TerminationReason::GradientTolerance;
        }
        if cfg.max_accepted_steps.is_some_and(|m| accepted_steps >= m) {
            break TerminationReason::MaxAcceptedSteps;
        }
        if iterations >= cfg.max_iterations {
            break TerminationReason::MaxIterations;
        }
        iterations += 1;

        let Some((dr, dps)) = lin.solve(lambda, cfg) else {
            trace.push(IterationRecord {
                cost,
                lambda,
                step_norm: 0.0,
                accepted: false,
            });
            lambda *= cfg.lambda_factor;
            if lambda > cfg.max_lambda {
                return Err(SolverError::SingularNormalEquations {
                    block: weakest_block(problem, &layout, &lin),
                });
            }
            continue;
        };
        let step_norm = (dr.norm_squared() + dps.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
        let x_norm = values.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if step_norm <= cfg.parameter_tolerance * (x_norm + cfg.parameter_tolerance) {
            break TerminationReason::ParameterTolerance;
        }

        let candidate = apply_step(problem, &layout, &values, &dr, &dps, &lin);
        let change = problem.cost_change(&values, &candidate).ok();
        match change {
            Some(dc) if dc < 0.0 => {
                let rel = -dc / cost.max(f64::MIN_POSITIVE);
                values = candidate;
                cost = (cost + dc).max(0.0);
                accepted_steps += 1;
                trace.push(IterationRecord {
                    cost,
                    lambda,
                    step_norm,
                    accepted: true,
                });
                lambda = (lambda / cfg.lambda_factor).max(1e-300);
                if rel < cfg.function_tolerance {
                    break TerminationReason::FunctionTolerance;
                }
                lin = linearize(problem, &layout, &values)?;
            }
            _ => {
                trace.push(IterationRecord {
                    cost: change.map_or(f64::NAN, |dc| cost + dc),
                    lambda,
                    step_norm,
                    accepted: false,
                });
                lambda *= cfg.lambda_factor;
                if lambda > cfg.max_lambda {
                    break TerminationReason::NoProgress;
                }
            }
        }
    };

    for (b, v) in values.into_iter().enumerate() {
        problem.blocks[b].values = v;
    }
    let report = SolverReport {
        iterations,
        accepted_steps,
        initial_cost,
        final_cost: cost,
        termination,
        trace,
    };
    SOLVES.fetch_add(1, Ordering::Relaxed);
    if !report.is_monotone() {
        NON_MONOTONE.fetch_add(1, Ordering::Relaxed);
    }
    Ok(report)
}

/// Worst per-column relative deviation between a block's analytic Jacobians
/// and central finite differences taken in tangent coordinates.
pub fn check_jacobian(block: &dyn ResidualBlock, params: &[Vec<f64>], manifolds: &[Manifold], step: f64) -> f64 {
    let m = block.num_residuals();
    let refs: Vec<&[f64]> = params.iter().map(|p| p.as_slice()).collect();
    let mut r0 = vec![0.0; m];
    let mut jac: Vec<DMatrix<f64>> = manifolds.iter().map(|mf| DMatrix::zeros(m, mf.tangent_dim())).collect();
    assert!(block.evaluate(&refs, &mut r0, Some(&mut jac)), "block not evaluable");

    let mut worst: f64 = 0.0;
    for (k, mf) in manifolds.iter().enumerate() {
        for c in 0..mf.tangent_dim() {
            let mut d = vec![0.0; mf.tangent_dim()];
            let mut eval = |sign: f64| {
                d[c] = sign * step;
                let mut p = params.to_vec();
                p[k] = mf.plus_tangent(&params[k], &d);
                let refs: Vec<&[f64]> = p.iter().map(|p| p.as_slice()).collect();
                let mut r = vec![0.0; m];
                assert!(block.evaluate(&refs, &mut r, None), "block not evaluable");
                r
            };
            let plus = eval(1.0);
            let minus = eval(-1.0);
            let numeric: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * step)).collect();
            let col = jac[k].column(c);
            let scale = numeric.iter().chain(col.iter()).fold(0.0f64, |acc, v| acc.max(v.abs()));
            if scale < 1e-12 {
                continue;
            }
            let num_scale = numeric.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-12);
            let dev = numeric
                .iter()
                .zip(col.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            worst = worst.max(dev / num_scale);
        }
    }
    worst
}
