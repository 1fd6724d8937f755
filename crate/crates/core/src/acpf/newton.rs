use nalgebra::{DMatrix, DVector};

use super::{equality_jacobian, equality_residual, AcpfError, PowerFlowRecord, LOSS_ALLOWANCE};
use crate::grid::{BusKind, GridCase, DEMAND_FLOOR};

/// Per-bus demand in p.u.
#[derive(Debug, Clone, PartialEq)]
pub struct Loads {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Loads {
    pub fn zeros(n_bus: usize) -> Self {
        Loads {
            p: vec![0.0; n_bus],
            q: vec![0.0; n_bus],
        }
    }

    pub fn nominal(case: &GridCase) -> Self {
        Loads {
            p: case.buses.iter().map(|b| b.p_load_nom).collect(),
            q: case.buses.iter().map(|b| b.q_load_nom).collect(),
        }
    }
}

/// Generator schedule: active output at PV buses and voltage setpoints at PV and
/// slack buses. Entries at other buses are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub p_gen: Vec<f64>,
    pub v_set: Vec<f64>,
}

/// Allocates total demand plus the loss allowance across generator buses in
/// proportion to their capacity. Only PV buses receive a fixed schedule; the slack
/// bus picks up its own share plus whatever the losses actually turn out to be.
///
/// Capacity is the largest generation that keeps the bus injection below `p_max`
/// at the lightest demand in the sampling range.
pub fn dispatch(case: &GridCase, loads: &Loads) -> Dispatch {
    let capacity: Vec<f64> = case
        .buses
        .iter()
        .map(|b| match b.kind {
            BusKind::Pq => 0.0,
            _ => (b.p_max + (DEMAND_FLOOR * b.p_load_nom).min(b.p_load_nom)).max(0.0),
        })
        .collect();
    let total_cap: f64 = capacity.iter().sum();
    let demand: f64 = loads.p.iter().sum();
    let scheduled = (1.0 + LOSS_ALLOWANCE) * demand;
    let p_gen = case
        .buses
        .iter()
        .zip(&capacity)
        .map(|(b, cap)| {
            if b.kind == BusKind::Pv && total_cap > 0.0 {
                scheduled * cap / total_cap
            } else {
                0.0
            }
        })
        .collect();
    let v_set = case.buses.iter().map(|b| b.v_setpoint).collect();
    Dispatch { p_gen, v_set }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Infinity-norm mismatch tolerance in p.u.
    pub tol: f64,
    /// Convert PV buses whose reactive injection leaves `[q_min, q_max]` into PQ
    /// buses pinned at the violated limit, then re-solve.
    pub enforce_q_limits: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iter: 50,
            tol: 1e-8,
            enforce_q_limits: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonSolution {
    pub record: PowerFlowRecord,
    /// Newton iterations summed over all reactive-limit rounds.
    pub iterations: usize,
    /// PV buses switched to PQ by reactive-limit enforcement.
    pub switched: Vec<usize>,
}

/// Solves the power flow from a flat start (`v = 1`, `theta = 0`, setpoints applied).
pub fn newton_solve(
    case: &GridCase,
    loads: &Loads,
    dispatch: &Dispatch,
    opts: &NewtonOptions,
) -> Result<NewtonSolution, AcpfError> {
    newton_solve_from(case, loads, dispatch, opts, None)
}

/// Like [`newton_solve`] but starting from `initial` voltages and angles when given.
pub fn newton_solve_from(
    case: &GridCase,
    loads: &Loads,
    dispatch: &Dispatch,
    opts: &NewtonOptions,
    initial: Option<&PowerFlowRecord>,
) -> Result<NewtonSolution, AcpfError> {
    let n = case.n_bus();
    for len in [loads.p.len(), loads.q.len(), dispatch.p_gen.len(), dispatch.v_set.len()] {
        if len != n {
            return Err(AcpfError::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    let mut kinds: Vec<BusKind> = case.buses.iter().map(|b| b.kind).collect();
    let mut state = PowerFlowRecord::zeros(n);
    for k in 0..n {
        state.p[k] = match kinds[k] {
            BusKind::Pv => dispatch.p_gen[k] - loads.p[k],
            _ => -loads.p[k],
        };
        state.q[k] = -loads.q[k];
        state.v[k] = match kinds[k] {
            BusKind::Pq => initial.map_or(1.0, |s| s.v[k]),
            _ => dispatch.v_set[k],
        };
        state.theta[k] = match kinds[k] {
            BusKind::Slack => 0.0,
            _ => initial.map_or(0.0, |s| s.theta[k]),
        };
    }

    let mut iterations = 0;
    let mut switched = Vec::new();
    loop {
        iterations += solve_fixed_kinds(case, &kinds, &mut state, opts, iterations)?;
        // Fill the injections the solve left free so the balance closes exactly.
        let r = equality_residual(&state, case);
        for k in 0..n {
            match kinds[k] {
                BusKind::Slack => {
                    state.p[k] -= r.dp[k];
                    state.q[k] -= r.dq[k];
                }
                BusKind::Pv => state.q[k] -= r.dq[k],
                BusKind::Pq => {}
            }
        }
        if !opts.enforce_q_limits {
            break;
        }
        let mut changed = false;
        for k in 0..n {
            if kinds[k] != BusKind::Pv {
                continue;
            }
            let bus = &case.buses[k];
            if state.q[k] > bus.q_max || state.q[k] < bus.q_min {
                state.q[k] = state.q[k].clamp(bus.q_min, bus.q_max);
                kinds[k] = BusKind::Pq;
                switched.push(k);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    switched.sort_unstable();
    Ok(NewtonSolution {
        record: state,
        iterations,
        switched,
    })
}

/// Newton iterations on `(theta` at non-slack, `v` at PQ) for fixed bus kinds.
/// Returns the iteration count.
fn solve_fixed_kinds(
    case: &GridCase,
    kinds: &[BusKind],
    state: &mut PowerFlowRecord,
    opts: &NewtonOptions,
    done_before: usize,
) -> Result<usize, AcpfError> {
    let n = case.n_bus();
    let angle_buses: Vec<usize> = (0..n).filter(|&k| kinds[k] != BusKind::Slack).collect();
    let volt_buses: Vec<usize> = (0..n).filter(|&k| kinds[k] == BusKind::Pq).collect();
    let na = angle_buses.len();
    let dim = na + volt_buses.len();
    // rows: dp at angle buses, dq at PQ buses; columns: theta, then v
    let row_of = |r: usize| if r < na { angle_buses[r] } else { n + volt_buses[r - na] };
    let col_of = |c: usize| {
        if c < na {
            3 * n + angle_buses[c]
        } else {
            2 * n + volt_buses[c - na]
        }
    };

    let mut mismatch = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let r = equality_residual(state, case).to_flat();
        let f = DVector::from_iterator(dim, (0..dim).map(|k| r[row_of(k)]));
        mismatch = f.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if !mismatch.is_finite() {
            break;
        }
        if mismatch <= opts.tol {
            return Ok(it);
        }
        if it == opts.max_iter {
            break;
        }
        let jac = equality_jacobian(state, case);
        let j = DMatrix::from_fn(dim, dim, |a, b| jac[[row_of(a), col_of(b)]]);
        let step = j.lu().solve(&f).ok_or(AcpfError::Singular {
            iteration: done_before + it,
        })?;
        for c in 0..dim {
            let idx = col_of(c);
            if idx >= 3 * n {
                state.theta[idx - 3 * n] -= step[c];
            } else {
                state.v[idx - 2 * n] -= step[c];
            }
        }
    }
    Err(AcpfError::Diverged {
        iterations: done_before + opts.max_iter,
        mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acpf::{inequality_residual, line_flows, residual_norm_h};
    use crate::grid::parse_case;

    const TWO_BUS: &str = "\
case two base_mva 100
bus
bus 1 slack pmin -5 pmax 5 qmin -5 qmax 5 vmin 0.9 vmax 1.1 pload 0 qload 0 vset 1.0
bus 2 pq pmin -1 pmax -0.8 qmin -0.3 qmax -0.24 vmin 0.9 vmax 1.1 pload 1 qload 0.3 vset 1.0
branch
branch 1 2 r 0.01 x 0.1 smax 3
";

    const THREE_BUS_PV: &str = "\
case three base_mva 100
bus
bus 1 slack pmin -5 pmax 5 qmin -5 qmax 5 vmin 0.9 vmax 1.1 pload 0 qload 0 vset 1.02
bus 2 pv pmin -1 pmax 2 qmin -0.05 qmax 0.05 vmin 0.9 vmax 1.1 pload 0.2 qload 0.05 vset 1.04
bus 3 pq pmin -1 pmax -0.8 qmin -0.3 qmax -0.24 vmin 0.9 vmax 1.1 pload 1 qload 0.3 vset 1.0
branch
branch 1 2 r 0.01 x 0.1 smax 3
branch 2 3 r 0.01 x 0.1 smax 3
branch 1 3 r 0.02 x 0.2 smax 3
";

    #[test]
    fn zero_load_flat_solution() {
        let case = parse_case(THREE_BUS_PV).unwrap();
        let mut case = case;
        for b in &mut case.buses {
            b.v_setpoint = 1.0;
        }
        let loads = Loads::zeros(3);
        let d = Dispatch {
            p_gen: vec![0.0; 3],
            v_set: vec![1.0; 3],
        };
        let sol = newton_solve(&case, &loads, &d, &NewtonOptions::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        assert!(sol.record.v.iter().all(|v| *v == 1.0));
        assert!(sol.record.theta.iter().all(|t| *t == 0.0));
        for br in &case.branches {
            let f = line_flows(&sol.record, br);
            assert!(f.p_ij.abs() < 1e-14 && f.q_ij.abs() < 1e-14);
        }
        assert_eq!(residual_norm_h(&sol.record, &case), 0.0);
    }

    #[test]
    fn two_bus_small_load_converges() {
        let case = parse_case(TWO_BUS).unwrap();
        let loads = Loads {
            p: vec![0.0, 0.5],
            q: vec![0.0, 0.1],
        };
        let d = dispatch(&case, &loads);
        let sol = newton_solve(&case, &loads, &d, &NewtonOptions::default()).unwrap();
        let r = equality_residual(&sol.record, &case);
        assert!(r.max_abs() <= 1e-8, "{}", r.max_abs());
        assert_eq!(sol.record.theta[0], 0.0);
        assert_eq!(sol.record.p[1], -0.5);
        assert_eq!(sol.record.q[1], -0.1);
        // slack covers load plus losses
        assert!(sol.record.p[0] > 0.5);
    }

    #[test]
    fn pv_bus_holds_setpoint() {
        let case = parse_case(THREE_BUS_PV).unwrap();
        let loads = Loads::nominal(&case);
        let d = dispatch(&case, &loads);
        let sol = newton_solve(&case, &loads, &d, &NewtonOptions::default()).unwrap();
        assert_eq!(sol.record.v[1], 1.04);
        assert_eq!(sol.record.v[0], 1.02);
        assert!(equality_residual(&sol.record, &case).max_abs() <= 1e-8);
    }

    #[test]
    fn dispatch_is_proportional_to_capacity() {
        let case = parse_case(THREE_BUS_PV).unwrap();
        let loads = Loads::nominal(&case);
        let d = dispatch(&case, &loads);
        // capacities: slack 5, pv 2 + 0.16
        let total = 1.02 * 1.2;
        assert!((d.p_gen[1] - total * 2.16 / 7.16).abs() < 1e-12);
        assert_eq!(d.p_gen[0], 0.0);
        assert_eq!(d.p_gen[2], 0.0);
    }

    #[test]
    fn reactive_limit_switches_pv_to_pq() {
        let case = parse_case(THREE_BUS_PV).unwrap();
        let loads = Loads::nominal(&case);
        let d = dispatch(&case, &loads);
        let free = newton_solve(&case, &loads, &d, &NewtonOptions::default()).unwrap();
        let q_free = free.record.q[1];
        assert!(q_free > 0.05 || q_free < -0.05, "test needs a violation, q = {q_free}");
        let opts = NewtonOptions {
            enforce_q_limits: true,
            ..Default::default()
        };
        let sol = newton_solve(&case, &loads, &d, &opts).unwrap();
        assert_eq!(sol.switched, vec![1]);
        let g = inequality_residual(&sol.record, &case);
        assert!(g.q_lower()[1] <= 0.0 && g.q_upper()[1] <= 0.0);
        assert!(equality_residual(&sol.record, &case).max_abs() <= 1e-8);
    }

    #[test]
    fn divergence_reports_mismatch() {
        let case = parse_case(TWO_BUS).unwrap();
        // far beyond the loadability limit of the line
        let loads = Loads {
            p: vec![0.0, 50.0],
            q: vec![0.0, 20.0],
        };
        let d = dispatch(&case, &loads);
        match newton_solve(&case, &loads, &d, &NewtonOptions::default()) {
            Err(AcpfError::Diverged { mismatch, .. }) => assert!(mismatch > 1e-8),
            Err(AcpfError::Singular { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
