//! AC power-flow physics: branch flows, nodal balance and limit residuals, their
//! analytic gradients, and a Newton–Raphson solver.
//!
//! State vectors are flattened as `(p_1..p_B, q_1..q_B, v_1..v_B, theta_1..theta_B)`.

mod newton;

pub use newton::{dispatch, newton_solve, newton_solve_from, Dispatch, Loads, NewtonOptions, NewtonSolution};

use ndarray::Array2;
use thiserror::Error;

use crate::grid::{Branch, FlowModel, GridCase};

/// Fractional generation surplus scheduled on top of total demand to cover losses.
pub const LOSS_ALLOWANCE: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcpfError {
    #[error("Newton solve did not converge after {iterations} iterations (mismatch {mismatch:.3e} p.u.)")]
    Diverged { iterations: usize, mismatch: f64 },
    #[error("singular power-flow Jacobian at iteration {iteration}")]
    Singular { iteration: usize },
    #[error("record has {got} buses, case has {expected}")]
    Dimension { expected: usize, got: usize },
}

/// One power-flow operating point in p.u. and radians.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowRecord {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl PowerFlowRecord {
    pub fn zeros(n_bus: usize) -> Self {
        PowerFlowRecord {
            p: vec![0.0; n_bus],
            q: vec![0.0; n_bus],
            v: vec![0.0; n_bus],
            theta: vec![0.0; n_bus],
        }
    }

    pub fn n_bus(&self) -> usize {
        self.p.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.n_bus());
        out.extend_from_slice(&self.p);
        out.extend_from_slice(&self.q);
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.theta);
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat). Panics if the length is not a multiple of 4.
    pub fn from_flat(flat: &[f64]) -> Self {
        assert!(flat.len() % 4 == 0, "flat record length {} is not 4B", flat.len());
        let b = flat.len() / 4;
        PowerFlowRecord {
            p: flat[..b].to_vec(),
            q: flat[b..2 * b].to_vec(),
            v: flat[2 * b..3 * b].to_vec(),
            theta: flat[3 * b..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p
            .iter()
            .chain(&self.q)
            .chain(&self.v)
            .chain(&self.theta)
            .all(|x| x.is_finite())
    }
}

/// Active/reactive flows on a branch seen from both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlows {
    pub p_ij: f64,
    pub q_ij: f64,
    pub p_ji: f64,
    pub q_ji: f64,
}

/// Sending-end flow from `i` towards `j` given the two end voltages.
#[inline]
fn directed_flow(g: f64, b: f64, c: f64, vi: f64, vj: f64, dth: f64) -> (f64, f64) {
    let (s, co) = dth.sin_cos();
    let vv = vi * vj;
    let fp = -c * g * vi * vi + vv * (g * co + b * s);
    let fq = c * b * vi * vi + vv * (g * s - b * co);
    (fp, fq)
}

/// Partial derivatives of a directed flow with respect to `(v_i, v_j, theta_i)`;
/// the `theta_j` derivative is the negated `theta_i` one.
#[derive(Clone, Copy)]
struct FlowPartials {
    fp: f64,
    fq: f64,
    dfp_dvi: f64,
    dfp_dvj: f64,
    dfp_dti: f64,
    dfq_dvi: f64,
    dfq_dvj: f64,
    dfq_dti: f64,
}

#[inline]
fn directed_partials(g: f64, b: f64, c: f64, vi: f64, vj: f64, dth: f64) -> FlowPartials {
    let (s, co) = dth.sin_cos();
    let vv = vi * vj;
    let re = g * co + b * s;
    let im = g * s - b * co;
    FlowPartials {
        fp: -c * g * vi * vi + vv * re,
        fq: c * b * vi * vi + vv * im,
        dfp_dvi: -2.0 * c * g * vi + vj * re,
        dfp_dvj: vi * re,
        dfp_dti: vv * (-g * s + b * co),
        dfq_dvi: 2.0 * c * b * vi + vj * im,
        dfq_dvj: vi * im,
        dfq_dti: vv * re,
    }
}

/// Flows on `branch` in both directions under the default π model.
pub fn line_flows(state: &PowerFlowRecord, branch: &Branch) -> BranchFlows {
    line_flows_with(state, branch, FlowModel::Pi)
}

pub fn line_flows_with(state: &PowerFlowRecord, branch: &Branch, model: FlowModel) -> BranchFlows {
    let (i, j) = (branch.from_bus, branch.to_bus);
    let c = model.self_term();
    let dth = state.theta[i] - state.theta[j];
    let (p_ij, q_ij) = directed_flow(branch.g, branch.b, c, state.v[i], state.v[j], dth);
    let (p_ji, q_ji) = directed_flow(branch.g, branch.b, c, state.v[j], state.v[i], -dth);
    BranchFlows {
        p_ij,
        q_ij,
        p_ji,
        q_ji,
    }
}

/// Nodal active/reactive balance mismatch, length `B` each.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualityResidual {
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
}

impl EqualityResidual {
    pub fn to_flat(&self) -> Vec<f64> {
        self.dp.iter().chain(&self.dq).copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.dp
            .iter()
            .chain(&self.dq)
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// Sum of outgoing flows plus shunt withdrawal at every bus.
fn bus_withdrawals(state: &PowerFlowRecord, case: &GridCase) -> (Vec<f64>, Vec<f64>) {
    let n = case.n_bus();
    let mut sp = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for br in &case.branches {
        let f = line_flows_with(state, br, case.flow_model);
        sp[br.from_bus] += f.p_ij;
        sq[br.from_bus] += f.q_ij;
        sp[br.to_bus] += f.p_ji;
        sq[br.to_bus] += f.q_ji;
    }
    for (k, bus) in case.buses.iter().enumerate() {
        if bus.shunt_g != 0.0 || bus.shunt_b != 0.0 {
            let v2 = state.v[k] * state.v[k];
            sp[k] += v2 * bus.shunt_g;
            sq[k] -= v2 * bus.shunt_b;
        }
    }
    (sp, sq)
}

pub fn equality_residual(state: &PowerFlowRecord, case: &GridCase) -> EqualityResidual {
    let (sp, sq) = bus_withdrawals(state, case);
    EqualityResidual {
        dp: state.p.iter().zip(&sp).map(|(p, s)| p - s).collect(),
        dq: state.q.iter().zip(&sq).map(|(q, s)| q - s).collect(),
    }
}

/// Limit constraints arranged as `g(x) <= 0`.
///
/// Layout (length `6B + L`): `p_min - p`, `p - p_max`, `q_min - q`, `q - q_max`,
/// `v_min - v`, `v - v_max` (each a block of `B`), then one apparent-flow entry
/// `f_p^2 + f_q^2 - s_max^2` per branch, sending end.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalityResidual {
    pub values: Vec<f64>,
    n_bus: usize,
}

impl InequalityResidual {
    pub fn p_lower(&self) -> &[f64] {
        &self.values[..self.n_bus]
    }
    pub fn p_upper(&self) -> &[f64] {
        &self.values[self.n_bus..2 * self.n_bus]
    }
    pub fn q_lower(&self) -> &[f64] {
        &self.values[2 * self.n_bus..3 * self.n_bus]
    }
    pub fn q_upper(&self) -> &[f64] {
        &self.values[3 * self.n_bus..4 * self.n_bus]
    }
    pub fn v_lower(&self) -> &[f64] {
        &self.values[4 * self.n_bus..5 * self.n_bus]
    }
    pub fn v_upper(&self) -> &[f64] {
        &self.values[5 * self.n_bus..6 * self.n_bus]
    }
    pub fn flow(&self) -> &[f64] {
        &self.values[6 * self.n_bus..]
    }

    pub fn violation_count(&self) -> usize {
        self.values.iter().filter(|g| **g > 0.0).count()
    }

    pub fn max_violation(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, g| m.max(*g))
    }
}

pub fn inequality_residual(state: &PowerFlowRecord, case: &GridCase) -> InequalityResidual {
    let n = case.n_bus();
    let mut values = Vec::with_capacity(6 * n + case.n_branch());
    values.extend(case.buses.iter().zip(&state.p).map(|(b, p)| b.p_min - p));
    values.extend(case.buses.iter().zip(&state.p).map(|(b, p)| p - b.p_max));
    values.extend(case.buses.iter().zip(&state.q).map(|(b, q)| b.q_min - q));
    values.extend(case.buses.iter().zip(&state.q).map(|(b, q)| q - b.q_max));
    values.extend(case.buses.iter().zip(&state.v).map(|(b, v)| b.v_min - v));
    values.extend(case.buses.iter().zip(&state.v).map(|(b, v)| v - b.v_max));
    for br in &case.branches {
        let f = line_flows_with(state, br, case.flow_model);
        values.push(f.p_ij * f.p_ij + f.q_ij * f.q_ij - br.s_max * br.s_max);
    }
    InequalityResidual { values, n_bus: n }
}

/// `||H(x)||_2^2` over the `2B` balance mismatches.
pub fn residual_norm_h(state: &PowerFlowRecord, case: &GridCase) -> f64 {
    let r = equality_residual(state, case);
    r.dp.iter().chain(&r.dq).map(|x| x * x).sum()
}

/// `||max(G(x), 0)||_2^2`.
pub fn residual_norm_g(state: &PowerFlowRecord, case: &GridCase) -> f64 {
    inequality_residual(state, case)
        .values
        .iter()
        .map(|g| g.max(0.0))
        .map(|g| g * g)
        .sum()
}

/// Index helpers into the flat `4B` layout.
#[derive(Clone, Copy)]
struct Layout(usize);

impl Layout {
    fn p(self, k: usize) -> usize {
        k
    }
    fn q(self, k: usize) -> usize {
        self.0 + k
    }
    fn v(self, k: usize) -> usize {
        2 * self.0 + k
    }
    fn th(self, k: usize) -> usize {
        3 * self.0 + k
    }
}

/// Dense Jacobian of the flattened equality residual `(dp, dq)` with respect to the
/// flat state `(p, q, v, theta)`; shape `2B x 4B`.
pub fn equality_jacobian(state: &PowerFlowRecord, case: &GridCase) -> Array2<f64> {
    let n = case.n_bus();
    let at = Layout(n);
    let c = case.flow_model.self_term();
    let mut jac = Array2::<f64>::zeros((2 * n, 4 * n));
    for k in 0..n {
        jac[[k, at.p(k)]] = 1.0;
        jac[[n + k, at.q(k)]] = 1.0;
    }
    for br in &case.branches {
        let (i, j) = (br.from_bus, br.to_bus);
        let dth = state.theta[i] - state.theta[j];
        for (a, o, d) in [(i, j, dth), (j, i, -dth)] {
            let f = directed_partials(br.g, br.b, c, state.v[a], state.v[o], d);
            // dp_a = p_a - sum f_p(a->o) - ...
            jac[[a, at.v(a)]] -= f.dfp_dvi;
            jac[[a, at.v(o)]] -= f.dfp_dvj;
            jac[[a, at.th(a)]] -= f.dfp_dti;
            jac[[a, at.th(o)]] += f.dfp_dti;
            jac[[n + a, at.v(a)]] -= f.dfq_dvi;
            jac[[n + a, at.v(o)]] -= f.dfq_dvj;
            jac[[n + a, at.th(a)]] -= f.dfq_dti;
            jac[[n + a, at.th(o)]] += f.dfq_dti;
        }
    }
    for (k, bus) in case.buses.iter().enumerate() {
        jac[[k, at.v(k)]] -= 2.0 * state.v[k] * bus.shunt_g;
        jac[[n + k, at.v(k)]] += 2.0 * state.v[k] * bus.shunt_b;
    }
    jac
}

/// `grad ||H(x)||^2 = 2 J_H(x)^T H(x)`, accumulated branch by branch without
/// forming the Jacobian. Returns a flat `4B` vector.
pub fn grad_residual_h(state: &PowerFlowRecord, case: &GridCase) -> Vec<f64> {
    let n = case.n_bus();
    let at = Layout(n);
    let c = case.flow_model.self_term();
    let r = equality_residual(state, case);
    let mut grad = vec![0.0; 4 * n];
    for k in 0..n {
        grad[at.p(k)] = 2.0 * r.dp[k];
        grad[at.q(k)] = 2.0 * r.dq[k];
    }
    for br in &case.branches {
        let (i, j) = (br.from_bus, br.to_bus);
        let dth = state.theta[i] - state.theta[j];
        for (a, o, d) in [(i, j, dth), (j, i, -dth)] {
            let f = directed_partials(br.g, br.b, c, state.v[a], state.v[o], d);
            let wp = -2.0 * r.dp[a];
            let wq = -2.0 * r.dq[a];
            grad[at.v(a)] += wp * f.dfp_dvi + wq * f.dfq_dvi;
            grad[at.v(o)] += wp * f.dfp_dvj + wq * f.dfq_dvj;
            let dth_a = wp * f.dfp_dti + wq * f.dfq_dti;
            grad[at.th(a)] += dth_a;
            grad[at.th(o)] -= dth_a;
        }
    }
    for (k, bus) in case.buses.iter().enumerate() {
        if bus.shunt_g != 0.0 || bus.shunt_b != 0.0 {
            grad[at.v(k)] += 2.0 * r.dp[k] * (-2.0 * state.v[k] * bus.shunt_g)
                + 2.0 * r.dq[k] * (2.0 * state.v[k] * bus.shunt_b);
        }
    }
    grad
}

/// Gradient of `||max(G(x), 0)||^2`. Entries with `g <= 0` (including the kink at
/// exactly zero) contribute nothing.
pub fn grad_residual_g(state: &PowerFlowRecord, case: &GridCase) -> Vec<f64> {
    let n = case.n_bus();
    let at = Layout(n);
    let c = case.flow_model.self_term();
    let mut grad = vec![0.0; 4 * n];
    for (k, bus) in case.buses.iter().enumerate() {
        let boxes = [
            (at.p(k), state.p[k], bus.p_min, bus.p_max),
            (at.q(k), state.q[k], bus.q_min, bus.q_max),
            (at.v(k), state.v[k], bus.v_min, bus.v_max),
        ];
        for (idx, x, lo, hi) in boxes {
            let below = lo - x;
            if below > 0.0 {
                grad[idx] -= 2.0 * below;
            }
            let above = x - hi;
            if above > 0.0 {
                grad[idx] += 2.0 * above;
            }
        }
    }
    for br in &case.branches {
        let (i, j) = (br.from_bus, br.to_bus);
        let f = directed_partials(br.g, br.b, c, state.v[i], state.v[j], state.theta[i] - state.theta[j]);
        let viol = f.fp * f.fp + f.fq * f.fq - br.s_max * br.s_max;
        if viol > 0.0 {
            // d/dx (viol^2) = 2 viol (2 fp dfp + 2 fq dfq)
            let w = 4.0 * viol;
            grad[at.v(i)] += w * (f.fp * f.dfp_dvi + f.fq * f.dfq_dvi);
            grad[at.v(j)] += w * (f.fp * f.dfp_dvj + f.fq * f.dfq_dvj);
            let dt = w * (f.fp * f.dfp_dti + f.fq * f.dfq_dti);
            grad[at.th(i)] += dt;
            grad[at.th(j)] -= dt;
        }
    }
    grad
}
