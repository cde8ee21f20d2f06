//! Acceptance suite: one test and one PASS/FAIL line per criterion.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use narrowforge::coupling::{
    build_ridge_add, compile_acf, compile_inn, AcfSpec, InnProgram, InnStage, RidgeSum, RidgeTerm,
};
use narrowforge::netcore::{linspace, ActivationTag, AffineMap, Box, Layer, Network};
use narrowforge::pipeline::{compile_pipeline, min_width_bound, ActivationClass, DiffeoTarget};
use narrowforge::pwl1d::{compile_increasing_pwl, eval_pwl, generalize_activation, PwlFunction};
use narrowforge::sct::{
    compile_sct_leakyrelu, lift_general, lift_relu, sharpen_step, SctOracle, SharpenState, SigmaRidge, SigmaTerm,
    StepOutcome,
};
use narrowforge::verify::{check_invertible, check_monotone_last, sup_error};
use narrowforge::coupling::CouplingFlow;

fn report(id: usize, name: &str, ok: bool, detail: String, elapsed: Duration, limit: Option<Duration>) {
    let in_time = limit.map_or(true, |l| elapsed <= l);
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    let limit = limit.map_or(String::new(), |l| format!(" (limit {:.0} s)", l.as_secs_f64()));
    println!("[criterion {id}] {verdict}: {name}: {detail}; {:.2} s{limit}", elapsed.as_secs_f64());
    assert!(ok, "criterion {id} failed: {detail}");
    assert!(in_time, "criterion {id} exceeded its time limit");
}

fn random_term(rng: &mut ChaCha8Rng, dim: usize) -> RidgeTerm {
    RidgeTerm {
        a: rng.gen_range(-2.0..2.0),
        b: (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        c: rng.gen_range(-1.0..1.0),
        beta: rng.gen_range(0.1..3.0),
    }
}

fn random_sum(rng: &mut ChaCha8Rng, dim: usize, terms: usize) -> RidgeSum {
    RidgeSum {
        constant: rng.gen_range(-0.5..0.5),
        terms: (0..terms).map(|_| random_term(rng, dim)).collect(),
    }
}

#[test]
fn criterion_1_exact_pwl_compilation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = linspace(-10.0, 10.0, 10_000);
    let (mut worst, mut depth_ok) = (0.0f64, true);
    for _ in 0..50 {
        let k = rng.gen_range(0..=20);
        let mut bps: Vec<f64> = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
        bps.sort_by(f64::total_cmp);
        let slopes: Vec<f64> = (0..=k).map(|_| rng.gen_range(0.05..5.0)).collect();
        let f = PwlFunction::new(bps, slopes, (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).unwrap();
        let net = compile_increasing_pwl(&f).unwrap();
        depth_ok &= net.depth() == k && net.width() <= 1;
        for x in &xs {
            let want = eval_pwl(&f, *x);
            let got = net.evaluate(&[*x]).unwrap()[0];
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    report(
        1,
        "exact PWL compilation",
        worst <= 1e-9 && depth_ok,
        format!("max relative error {worst:.3e} (< 1e-9), depth equals breakpoint count: {depth_ok}"),
        start.elapsed(),
        Some(Duration::from_secs(5)),
    );
}

#[test]
fn criterion_2_ridge_add_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut pass_worst) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let d = 2 + case % 3;
        let term = random_term(&mut rng, d - 1);
        let domain = Box::unit(d);
        let net = build_ridge_add(d, &term, &domain).unwrap();
        assert_eq!(net.width(), d);
        for x in domain.grid(21) {
            let y = net.evaluate(&x).unwrap();
            let want = x[d - 1] + term.eval(&x[..d - 1]);
            worst = worst.max((y[d - 1] - want).abs());
            for j in 0..d - 1 {
                pass_worst = pass_worst.max((y[j] - x[j]).abs());
            }
        }
    }
    report(
        2,
        "ridge-add exactness",
        worst < 1e-9 && pass_worst <= 1e-12,
        format!("sup error {worst:.3e} (< 1e-9), pass-through {pass_worst:.3e} (<= 1e-12)"),
        start.elapsed(),
        Some(Duration::from_secs(10)),
    );
}

#[test]
fn criterion_3_acf_compilation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let domain = Box::unit(2);
    let prefix = domain.prefix(1);
    let (mut worst, mut monotone) = (0.0f64, true);
    for case in 0..20 {
        let s = random_sum(&mut rng, 1, 4);
        let (lo, hi) = s.range(&prefix);
        let s = s.scaled(1.0 / lo.abs().max(hi.abs()).max(1.0));
        let spec = AcfSpec { d: 2, s, t: random_sum(&mut rng, 1, 4) };
        let net = compile_acf(&spec, &domain, 1e-3).unwrap();
        let rep = sup_error(&net, &|x| spec.eval(x), &domain, 101).unwrap();
        worst = worst.max(rep.sup_error);
        monotone &= check_monotone_last(&net, &domain, 1000, case as u64).unwrap().ok;
    }
    report(
        3,
        "ACF compilation",
        worst < 1e-3 && monotone,
        format!("grid-measured sup error {worst:.3e} (< 1e-3), monotone in x_d: {monotone}"),
        start.elapsed(),
        Some(Duration::from_secs(60)),
    );
}

#[test]
fn criterion_4_gamma_contraction() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut ok, mut worst_slack) = (true, 0.0f64);
    let mut details = Vec::new();
    for k in 0..5 {
        let peak = 2.0 + 2.0 * k as f64;
        let (centre, width) = (rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.3));
        let b = move |p: &[f64]| 1.0 + (peak - 1.0) * (-((p[0] - centre) / width).powi(2)).exp();
        let mut flow = CouplingFlow::new(2);
        flow.push_last_affine(1.0, -0.25);
        let mut st = SharpenState::from_ratio(flow, 0.25, 0.5, 65, &b).unwrap();
        let gamma0 = st.gamma;
        let allowed = SharpenState::predicted_steps(gamma0, 0.01) + 2;
        let mut steps = 0;
        while st.gamma >= 1.01 && steps < allowed {
            match sharpen_step(&st, &Default::default()).unwrap() {
                StepOutcome::Stepped(next, rep) => {
                    worst_slack = worst_slack.max(rep.fit_slack);
                    ok &= rep.gamma_new <= rep.bound + rep.fit_slack && rep.fit_slack < 0.05;
                    st = next;
                    steps += 1;
                }
                StepOutcome::Converged(_) => break,
            }
        }
        ok &= st.gamma < 1.01;
        details.push(format!("γ₀={gamma0:.2}: {steps}/{allowed} steps"));
    }
    report(
        4,
        "γ-contraction",
        ok,
        format!("{}; worst fit-slack {worst_slack:.2e} (< 0.05)", details.join(", ")),
        start.elapsed(),
        Some(Duration::from_secs(120)),
    );
}

#[test]
fn criterion_5_sct_slice_induction() {
    let start = Instant::now();
    let tol = 1e-2;
    let one = SctOracle::new(1, |x| x[0] + 0.05 * (2.0 * std::f64::consts::PI * x[0]).sin());
    let two = SctOracle::new(2, |x| x[1] + 0.25 * (std::f64::consts::PI * x[0]).sin() * x[1] * (1.0 - x[1]));
    let (mut worst, mut monotone) = (0.0f64, true);
    for oracle in [&one, &two] {
        let d = oracle.d;
        let domain = Box::unit(d);
        let out = compile_sct_leakyrelu(oracle, &domain, 8, tol).unwrap();
        let prefixes: Vec<Vec<f64>> = if d == 1 { vec![vec![]] } else { linspace(0.0, 1.0, 33).into_iter().map(|p| vec![p]).collect() };
        for i in 0..=8 {
            for p in &prefixes {
                let mut x = p.clone();
                x.push(i as f64 / 8.0);
                worst = worst.max((out.network.evaluate(&x).unwrap()[d - 1] - (oracle.tau)(&x)).abs());
            }
        }
        monotone &= check_monotone_last(&out.network, &domain, 1000, 5).unwrap().ok;
    }
    report(
        5,
        "SCT slice induction",
        worst < tol && monotone,
        format!("max slice error {worst:.3e} (< 1e-2) on the 33-point prefix grid, monotone: {monotone}"),
        start.elapsed(),
        Some(Duration::from_secs(300)),
    );
}

/// Program on ℝᵈ whose first coupling writes into the (zero) last slot, then
/// swaps slots so the second coupling bends the first input coordinate.
fn matrix_target(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DiffeoTarget {
    let d = (2 * n + 1).max(m);
    let mut s_b = vec![0.0; d - 1];
    s_b[0] = 1.0;
    let small = |rng: &mut ChaCha8Rng, b: Vec<f64>| RidgeTerm { a: rng.gen_range(-0.5..0.5), b, c: rng.gen_range(-0.5..0.5), beta: rng.gen_range(0.2..0.8) };
    let t_b: Vec<f64> = (0..d - 1).map(|i| if i < n { rng.gen_range(-1.0..1.0) } else { 0.0 }).collect();
    let first = InnStage::Acf {
        s: RidgeSum { constant: 0.0, terms: vec![small(rng, s_b.clone())] },
        t: RidgeSum { constant: 0.1, terms: vec![small(rng, t_b)] },
    };
    let mut swap = AffineMap::identity(d);
    swap.weight.swap(0, d - 1);
    let mut s2 = vec![0.0; d - 1];
    if d - 1 > 1 {
        s2[1] = 1.0;
    }
    let second = InnStage::Acf {
        s: RidgeSum { constant: 0.05, terms: vec![small(rng, s2)] },
        t: RidgeSum::constant(-0.1),
    };
    DiffeoTarget {
        n,
        m,
        program: InnProgram { d, stages: vec![first, InnStage::Affine(swap.clone()), second, InnStage::Affine(swap)] },
    }
}

#[test]
fn criterion_6_width_accounting() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = Vec::new();
    let mut artifacts = 0;

    for d in 1..=3 {
        let oracle = SctOracle::new(d, move |x| x[d - 1] + 0.2 * x[d - 1] * x[d - 1] + 0.1 * x[..d - 1].iter().sum::<f64>());
        let out = compile_sct_leakyrelu(&oracle, &Box::unit(d), 4, 1e-2).unwrap();
        artifacts += 1;
        if out.network.width() != d {
            violations.push(format!("sct d={d}: width {}", out.network.width()));
        }
    }
    for case in 0..10 {
        let d = 1 + case % 3;
        let mut tau = random_sum(&mut rng, d, 1 + case % 4);
        for t in tau.terms.iter_mut() {
            t.beta = 0.0;
        }
        // At most one term may bend in x_d.
        for t in tau.terms.iter_mut().skip(1) {
            t.b[d - 1] = 0.0;
        }
        let net = lift_relu(&tau, &Box::unit(d)).unwrap();
        artifacts += 1;
        if net.width() != d + 1 {
            violations.push(format!("lift_relu d={d}: width {}", net.width()));
        }
        let sigma = SigmaRidge {
            constant: 0.1,
            linear: vec![],
            terms: (0..2).map(|_| SigmaTerm { a: rng.gen_range(-1.0..1.0), b: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(), c: rng.gen_range(-1.0..1.0) }).collect(),
        };
        let lifted = lift_general("tanh", &sigma, &Box::unit(d), 1e-2).unwrap();
        artifacts += 1;
        if lifted.network.width() != d + 2 {
            violations.push(format!("lift_general d={d}: width {}", lifted.network.width()));
        }
    }
    let mut worst_err = 0.0f64;
    for n in 1..=2 {
        for m in 1..=3 {
            let target = matrix_target(n, m, &mut rng);
            for cls in [ActivationClass::LeakyRelu, ActivationClass::Relu, ActivationClass::General("tanh".into())] {
                let out = compile_pipeline(&target, &cls, &Box::unit(n), 5e-2).unwrap();
                artifacts += 1;
                worst_err = worst_err.max(out.measured_error);
                let bound = min_width_bound(n, m, &cls);
                if out.network.width() > bound {
                    violations.push(format!("pipeline n={n} m={m} {cls}: width {} > {bound}", out.network.width()));
                }
            }
        }
    }
    report(
        6,
        "width accounting",
        violations.is_empty(),
        format!("{artifacts} artifacts, {} violations {violations:?}; pipeline held-out error {worst_err:.2e}", violations.len()),
        start.elapsed(),
        None,
    );
}

fn random_invertible(rng: &mut ChaCha8Rng, n: usize) -> AffineMap {
    loop {
        let weight = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.6..0.6)).collect())
            .collect();
        let a = AffineMap::new(weight, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        if a.min_singular_value() > 0.2 {
            return a;
        }
    }
}

#[test]
fn criterion_7_invertibility() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let domain = Box::cube(3, -1.0, 1.0);
    let (mut worst, mut all_ok) = (0.0f64, true);
    for case in 0..100 {
        let layers = (0..10)
            .map(|_| Layer::new(random_invertible(&mut rng, 3), ActivationTag::LeakyRelu(rng.gen_range(0.2..5.0))))
            .collect();
        let net = Network::new(3, layers, random_invertible(&mut rng, 3)).unwrap();
        let res = check_invertible(&net, &domain, 200, 1e-8, case).unwrap();
        worst = worst.max(res.max_error);
        all_ok &= res.ok;
    }

    let tol = 1e-2;
    let unit = Box::unit(2);
    let prog = InnProgram {
        d: 2,
        stages: vec![
            InnStage::Affine(AffineMap::new(vec![vec![1.0, 0.3], vec![-0.2, 1.0]], vec![0.1, 0.0]).unwrap()),
            InnStage::Acf {
                s: RidgeSum { constant: 0.1, terms: vec![RidgeTerm { a: 0.6, b: vec![1.2], c: -0.5, beta: 0.3 }] },
                t: RidgeSum { constant: -0.2, terms: vec![RidgeTerm { a: 0.4, b: vec![-1.5], c: 0.3, beta: 0.2 }] },
            },
        ],
    };
    let inverse = prog.inverse(&unit, tol / 4.0).unwrap();
    let mut both = prog.clone();
    both.stages.extend(inverse.stages);
    let net = compile_inn(&both, &unit, tol).unwrap().network;
    let rt = sup_error(&net, &|x| x.to_vec(), &unit, 101).unwrap().sup_error;
    report(
        7,
        "invertibility",
        all_ok && worst < 1e-8 && rt < 2.0 * tol,
        format!("100 networks round-trip within {worst:.3e} (< 1e-8); program ∘ inverse off identity by {rt:.3e} (< {:.0e})", 2.0 * tol),
        start.elapsed(),
        None,
    );
}

#[test]
fn criterion_8_activation_generalization() {
    let start = Instant::now();
    let tanh = ActivationTag::Custom("tanh".into());
    let net = Network::new(
        2,
        vec![
            Layer::new(AffineMap::new(vec![vec![1.5, -0.8], vec![0.6, 1.2]], vec![0.1, -0.3]).unwrap(), tanh.clone()),
            Layer::new(AffineMap::new(vec![vec![-1.1, 0.9], vec![1.3, 0.4]], vec![0.2, 0.05]).unwrap(), tanh),
        ],
        AffineMap::new(vec![vec![0.7, -0.5], vec![0.3, 1.0]], vec![0.0, 0.1]).unwrap(),
    )
    .unwrap();
    let domain = Box::unit(2);
    let out = generalize_activation(&net, &domain, 1e-2).unwrap();
    let leaky_only = out.layers.iter().all(|l| matches!(l.activation, ActivationTag::LeakyRelu(_) | ActivationTag::Identity));
    let err = sup_error(&out, &|x| net.evaluate(x).unwrap(), &domain, 50).unwrap().sup_error;
    report(
        8,
        "activation generalization",
        leaky_only && out.width() == 2 && err < 1e-2,
        format!("Leaky-ReLU only: {leaky_only}, width {} (2), sup error {err:.3e} (< 1e-2) on 50²", out.width()),
        start.elapsed(),
        None,
    );
}

#[test]
fn criterion_9_serialization() {
    let start = Instant::now();
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden");
    let mut bit_exact = true;
    for name in ["pwl_network.json", "acf_network.json"] {
        let text = std::fs::read_to_string(format!("{dir}/{name}")).unwrap();
        let net = Network::from_json(&text).unwrap();
        bit_exact &= net.to_json() + "\n" == text;
    }
    let spec: AcfSpec = serde_json::from_str(&std::fs::read_to_string(format!("{dir}/acf_input.json")).unwrap()).unwrap();
    let net = compile_acf(&spec, &Box::unit(2), 1e-3).unwrap();
    let back = Network::from_json(&net.to_json()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut max_ulps = 0u64;
    for _ in 0..100 {
        let x = [rng.gen::<f64>(), rng.gen::<f64>()];
        for (a, b) in net.evaluate(&x).unwrap().iter().zip(back.evaluate(&x).unwrap()) {
            max_ulps = max_ulps.max((a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs());
        }
    }
    report(
        9,
        "serialization",
        bit_exact && max_ulps == 0 && back == net,
        format!("golden round-trips bit-exact: {bit_exact}; evaluation difference {max_ulps} ulp on 100 points"),
        start.elapsed(),
        None,
    );
}
