//! Analytic gradients against central finite differences.

use gridflow_core::acpf::{
    grad_residual_g, grad_residual_h, inequality_residual, residual_norm_g, residual_norm_h,
    PowerFlowRecord,
};
use gridflow_core::datagen::NormStats;
use gridflow_core::diffusion::{
    guidance_gradient, make_schedule, tweedie_estimate, DecoupledModel, GuidanceConfig,
    GuidanceMode,
};
use gridflow_core::grid::{parse_case, GridCase};
use gridflow_core::neural::{Mlp, TimeEmbedding};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASE5: &str = include_str!("../../../cases/case5.txt");
const CASE24: &str = include_str!("../../../cases/case24.txt");
const CASE118: &str = include_str!("../../../cases/case118.txt");

const TWO_BUS: &str = "\
case two base_mva 100
bus
bus 1 slack pmin -5 pmax 5 qmin -5 qmax 5 vmin 0.9 vmax 1.1 pload 0 qload 0 vset 1.0
bus 2 pq pmin -1 pmax -0.8 qmin -0.3 qmax -0.24 vmin 0.9 vmax 1.1 pload 1 qload 0.3 vset 1.0
branch
branch 1 2 r 0.01 x 0.1 smax 0.5
";

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            xp[k] = x[k] + h;
            let up = f(&xp);
            xp[k] = x[k] - h;
            let down = f(&xp);
            xp[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// A state around the operating region, with some limits violated.
fn random_state(case: &GridCase, rng: &mut ChaCha8Rng) -> PowerFlowRecord {
    let mut s = PowerFlowRecord::zeros(case.n_bus());
    for (k, b) in case.buses.iter().enumerate() {
        let widen = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
            let pad = 0.2 * (hi - lo) + 0.05;
            rng.random_range(lo - pad..hi + pad)
        };
        s.p[k] = widen(b.p_min, b.p_max, rng);
        s.q[k] = widen(b.q_min, b.q_max, rng);
        s.v[k] = rng.random_range(0.85..1.15);
        s.theta[k] = rng.random_range(-0.3..0.3);
    }
    s
}

/// True when no inequality entry changes sign within `h` of `x` along any axis and
/// all entries stay at least 1e-4 away from zero.
fn away_from_kinks(case: &GridCase, x: &[f64], h: f64) -> bool {
    let sign = |y: &[f64]| -> Vec<bool> {
        inequality_residual(&PowerFlowRecord::from_flat(y), case)
            .values
            .iter()
            .map(|g| *g > 0.0)
            .collect()
    };
    let g0 = inequality_residual(&PowerFlowRecord::from_flat(x), case);
    if g0.values.iter().any(|g| g.abs() < 1e-4) {
        return false;
    }
    let base = sign(x);
    let mut y = x.to_vec();
    for k in 0..x.len() {
        for d in [h, -h] {
            y[k] = x[k] + d;
            if sign(&y) != base {
                return false;
            }
        }
        y[k] = x[k];
    }
    true
}

fn check_physics_gradients(text: &str, probes: usize, seed: u64) {
    let case = parse_case(text).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut done = 0;
    while done < probes {
        let state = random_state(&case, &mut rng);
        let x = state.to_flat();
        let fd_h = central_diff(|y| residual_norm_h(&PowerFlowRecord::from_flat(y), &case), &x, h);
        let e = rel_err(&grad_residual_h(&state, &case), &fd_h);
        assert!(e < 1e-5, "{}: H gradient rel err {e}", case.name);
        if !away_from_kinks(&case, &x, h) {
            continue;
        }
        let fd_g = central_diff(|y| residual_norm_g(&PowerFlowRecord::from_flat(y), &case), &x, h);
        let e = rel_err(&grad_residual_g(&state, &case), &fd_g);
        assert!(e < 1e-5, "{}: G gradient rel err {e}", case.name);
        done += 1;
    }
}

#[test]
fn residual_gradients_two_bus() {
    check_physics_gradients(TWO_BUS, 100, 1);
}

#[test]
fn residual_gradients_case5() {
    check_physics_gradients(CASE5, 100, 2);
}

#[test]
fn residual_gradients_case24() {
    check_physics_gradients(CASE24, 100, 3);
}

#[test]
fn residual_gradients_case118() {
    check_physics_gradients(CASE118, 100, 4);
}

#[test]
fn residual_gradients_with_shunts() {
    let text = TWO_BUS.replace("vset 1.0\nbus 2", "vset 1.0 gsh 0.05 bsh 0.2\nbus 2")
        .replace("qload 0.3 vset 1.0", "qload 0.3 vset 1.0 gsh 0.01 bsh -0.1");
    let case = parse_case(&text).unwrap();
    assert!(case.has_shunts());
    check_physics_gradients(&text, 50, 5);
}

fn random_small_mlp(data: usize, rng: &mut ChaCha8Rng) -> Mlp {
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=8)).collect();
    let out = rng.random_range(1..=6);
    let emb = 2 * rng.random_range(0..=3);
    Mlp::new(data, &hidden, out, TimeEmbedding::new(emb), rng)
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let data = rng.random_range(1..=6);
        let mut m = random_small_mlp(data, &mut rng);
        let n = rng.random_range(1..=5);
        let x = Array2::from_shape_fn((n, data), |_| rng.random_range(-1.5..1.5));
        let y = Array2::from_shape_fn((n, m.output_dim()), |_| rng.random_range(-1.0..1.0));
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=50)).collect();
        let (_, g) = m.loss_and_gradients(x.view(), &t, 50, y.view()).unwrap();
        let p0 = m.params_flat();
        let mut fd = Vec::with_capacity(p0.len());
        let mut p = p0.clone();
        for k in 0..p0.len() {
            let mut eval = |v: f64| {
                p[k] = v;
                m.set_params_flat(&p).unwrap();
                m.loss_and_gradients(x.view(), &t, 50, y.view()).unwrap().0
            };
            let up = eval(p0[k] + 1e-5);
            let down = eval(p0[k] - 1e-5);
            p[k] = p0[k];
            fd.push((up - down) / 2e-5);
        }
        m.set_params_flat(&p0).unwrap();
        let e = rel_err(&g.to_flat(), &fd);
        assert!(e < 1e-4, "param gradient rel err {e}");
    }
}

#[test]
fn input_vjp_matches_directional_derivatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let data = rng.random_range(1..=6);
        let m = random_small_mlp(data, &mut rng);
        let x: Vec<f64> = (0..data).map(|_| rng.random_range(-1.5..1.5)).collect();
        let c: Vec<f64> = (0..m.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = rng.random_range(1..=50);
        let vjp = m.input_vjp(&x, t, 50, &c).unwrap();
        // full gradient of c . f(x) by central differences
        let fd = central_diff(
            |y| {
                let out = m.forward(y, t, 50).unwrap();
                out.iter().zip(&c).map(|(a, b)| a * b).sum()
            },
            &x,
            1e-5,
        );
        let e = rel_err(&vjp, &fd);
        assert!(e < 1e-4, "vjp rel err {e}");
        // and one random direction
        let u: Vec<f64> = (0..data).map(|_| rng.random_range(-1.0..1.0)).collect();
        let along = |s: f64| -> f64 {
            let y: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + s * b).collect();
            m.forward(&y, t, 50).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let dir = (along(1e-5) - along(-1e-5)) / 2e-5;
        let pred: f64 = vjp.iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!((dir - pred).abs() <= 1e-4 * dir.abs().max(1e-3), "{dir} vs {pred}");
    }
}

fn random_decoupled(case: &GridCase, rng: &mut ChaCha8Rng) -> DecoupledModel {
    let b = case.n_bus();
    let half = 2 * b;
    let hidden = [rng.random_range(2..=8), rng.random_range(2..=8)];
    let mut x_min = Vec::with_capacity(4 * b);
    let mut x_max = Vec::with_capacity(4 * b);
    for block in 0..4 {
        for k in 0..b {
            let (lo, hi) = match block {
                0 => (case.buses[k].p_min, case.buses[k].p_max),
                1 => (case.buses[k].q_min, case.buses[k].q_max),
                2 => (0.95, 1.05),
                _ => (-0.2, 0.2),
            };
            if block == 3 && k == case.slack_bus {
                x_min.push(0.0);
                x_max.push(0.0);
            } else {
                x_min.push(lo);
                x_max.push(hi);
            }
        }
    }
    DecoupledModel {
        n_bus: b,
        schedule: make_schedule(100, 1e-3, 5e-2).unwrap(),
        stats: NormStats { x_min, x_max },
        denoiser_1: Mlp::new(half, &hidden, half, TimeEmbedding::new(4), rng),
        denoiser_2: Mlp::new(half, &hidden, half, TimeEmbedding::new(4), rng),
    }
}

/// Residual objective as a function of the normalized noisy sample.
fn composed_objective(
    model: &DecoupledModel,
    case: &GridCase,
    x_t: &[f64],
    t: usize,
    include_g: bool,
) -> f64 {
    let (x1, x2) = gridflow_core::diffusion::split(x_t);
    let h1 = tweedie_estimate(&x1, t, &model.denoiser_1, &model.schedule).unwrap();
    let h2 = tweedie_estimate(&x2, t, &model.denoiser_2, &model.schedule).unwrap();
    let x0 = gridflow_core::diffusion::concat(&h1, &h2);
    let rec = PowerFlowRecord::from_flat(&model.stats.denormalize(&x0));
    let mut r = residual_norm_h(&rec, case);
    if include_g {
        r += residual_norm_g(&rec, case);
    }
    r
}

fn check_guidance(text: &str, probes: usize, seed: u64) {
    let case = parse_case(text).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < probes {
        let model = random_decoupled(&case, &mut rng);
        let t = rng.random_range(1..=100);
        let x_t: Vec<f64> = (0..4 * case.n_bus())
            .map(|_| rng.random_range(-0.3..0.3))
            .collect();
        let include_g = done % 2 == 0;
        let (x1, x2) = gridflow_core::diffusion::split(&x_t);
        let h1 = tweedie_estimate(&x1, t, &model.denoiser_1, &model.schedule).unwrap();
        let h2 = tweedie_estimate(&x2, t, &model.denoiser_2, &model.schedule).unwrap();
        let x0 = gridflow_core::diffusion::concat(&h1, &h2);
        if include_g && !away_from_kinks(&case, &model.stats.denormalize(&x0), 1e-4) {
            continue;
        }
        let cfg = GuidanceConfig {
            lambda: 1.0,
            mode: GuidanceMode::ExactVjp,
            include_inequalities: include_g,
        };
        let g = guidance_gradient(&x_t, &x0, t, &model, &case, &cfg).unwrap();
        let fd = central_diff(|y| composed_objective(&model, &case, y, t, include_g), &x_t, 1e-6);
        let e = rel_err(&g, &fd);
        assert!(e < 1e-4, "{}: guidance rel err {e} at t={t}", case.name);
        done += 1;
    }
}

#[test]
fn guidance_gradient_two_bus() {
    check_guidance(TWO_BUS, 20, 20);
}

#[test]
fn guidance_gradient_case5() {
    check_guidance(CASE5, 20, 21);
}

#[test]
fn approximate_mode_equals_exact_for_input_independent_noise() {
    let case = parse_case(CASE5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut model = random_decoupled(&case, &mut rng);
    // a denoiser that ignores its data input has a zero input Jacobian
    for d in [&mut model.denoiser_1, &mut model.denoiser_2] {
        d.layers[0].w.slice_mut(ndarray::s![..10, ..]).fill(0.0);
    }
    let x_t: Vec<f64> = (0..20).map(|_| rng.random_range(-0.3..0.3)).collect();
    let (x1, x2) = gridflow_core::diffusion::split(&x_t);
    let x0 = gridflow_core::diffusion::concat(
        &tweedie_estimate(&x1, 40, &model.denoiser_1, &model.schedule).unwrap(),
        &tweedie_estimate(&x2, 40, &model.denoiser_2, &model.schedule).unwrap(),
    );
    let exact = GuidanceConfig {
        lambda: 1.0,
        ..Default::default()
    };
    let approx = GuidanceConfig {
        mode: GuidanceMode::Approximate,
        ..exact
    };
    let a = guidance_gradient(&x_t, &x0, 40, &model, &case, &exact).unwrap();
    let b = guidance_gradient(&x_t, &x0, 40, &model, &case, &approx).unwrap();
    assert!(rel_err(&a, &b) < 1e-14);
    assert!(a.iter().any(|v| *v != 0.0));
}
