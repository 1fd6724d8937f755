use gridflow_core::acpf::{
    dispatch, equality_residual, inequality_residual, newton_solve, residual_norm_g,
    residual_norm_h, Loads, NewtonOptions,
};
use gridflow_core::datagen::{generate_dataset, GenOptions};
use gridflow_core::grid::{build_admittance, parse_case, BusKind, GridCase};

const CASE5: &str = include_str!("../../../cases/case5.txt");
const CASE24: &str = include_str!("../../../cases/case24.txt");
const CASE118: &str = include_str!("../../../cases/case118.txt");

fn count(case: &GridCase, kind: BusKind) -> usize {
    case.buses_of(kind).count()
}

#[test]
fn element_counts() {
    let c5 = parse_case(CASE5).unwrap();
    assert_eq!((c5.n_bus(), c5.n_branch()), (5, 6));
    let c24 = parse_case(CASE24).unwrap();
    assert_eq!((c24.n_bus(), c24.n_branch()), (24, 38));
    let c118 = parse_case(CASE118).unwrap();
    assert_eq!((c118.n_bus(), c118.n_branch()), (118, 186));
    for c in [&c5, &c24, &c118] {
        assert_eq!(count(c, BusKind::Slack), 1);
    }
}

#[test]
fn bundled_cases_round_trip_through_text() {
    for text in [CASE5, CASE24, CASE118] {
        let case = parse_case(text).unwrap();
        let again = parse_case(&case.to_case_text()).unwrap();
        assert_eq!(case, again);
    }
}

#[test]
fn admittance_is_symmetric_on_bundled_cases() {
    for text in [CASE5, CASE24, CASE118] {
        let y = build_admittance(&parse_case(text).unwrap());
        assert_eq!(y.g, y.g.t().to_owned());
        assert_eq!(y.b, y.b.t().to_owned());
    }
}

#[test]
fn case5_nominal_newton_regression() {
    let case = parse_case(CASE5).unwrap();
    let loads = Loads::nominal(&case);
    let d = dispatch(&case, &loads);
    let sol = newton_solve(&case, &loads, &d, &NewtonOptions::default()).unwrap();
    assert!(sol.iterations <= 10, "iterations {}", sol.iterations);
    assert!(equality_residual(&sol.record, &case).max_abs() <= 1e-8);
    assert_eq!(sol.record.theta[case.slack_bus], 0.0);
}

fn check_generated(text: &str, n: usize) {
    let case = parse_case(text).unwrap();
    let (data, _) = generate_dataset(&case, n, 11, &GenOptions::default()).unwrap();
    assert_eq!(data.len(), n);
    for r in &data.records {
        assert!(equality_residual(r, &case).max_abs() <= 1e-8);
        assert!(residual_norm_h(r, &case) <= 1e-12);
        assert_eq!(residual_norm_g(r, &case), 0.0);
        assert_eq!(inequality_residual(r, &case).violation_count(), 0);
    }
}

#[test]
fn generated_case5_records_are_feasible() {
    check_generated(CASE5, 1000);
}

#[test]
fn generated_case24_records_are_feasible() {
    check_generated(CASE24, 100);
}

#[test]
fn generated_case118_records_are_feasible() {
    check_generated(CASE118, 10);
}
