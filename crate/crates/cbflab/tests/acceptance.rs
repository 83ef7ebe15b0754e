//! End-to-end acceptance checks, one test per release criterion. Each test
//! prints a single pass/fail line (visible with `--nocapture`) and enforces
//! its own wall-clock budget.

use std::panic;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use cbflab::config::load_config;
use cbflab::dsl::{differentiate, parse, BinOp, Binding, Expr, UnaryOp};
use cbflab::flow::{flow_out, flow_out_field, integrate, integrate_fixed};
use cbflab::geometry::{boundary_sample, build_complex_at, build_cubical_complex, AxisBox, SafeSet};
use cbflab::obstruction::{span_solvability, tol_solve, SolvabilityStatus, GAP_FACTOR};
use cbflab::system::{ControlAffineSystem, InputSet, VectorField};
use cbflab::zeros::{verify_poincare_hopf, ZeroMethod};

const BIN: &str = env!("CARGO_BIN_EXE_cbflab");

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

/// Runs `body`, prints the criterion's pass/fail line, and re-raises any
/// failure so the harness still reports it.
fn criterion(number: u32, name: &str, budget: Duration, body: impl FnOnce() + panic::UnwindSafe) {
    let start = Instant::now();
    let outcome = panic::catch_unwind(body);
    let elapsed = start.elapsed();
    let status = if outcome.is_err() {
        "fail"
    } else if elapsed > budget {
        "fail (over budget)"
    } else {
        "pass"
    };
    println!(
        "criterion {number} ({name}): {status} [{:.2}s / {:.0}s budget]",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    if let Err(e) = outcome {
        panic::resume_unwind(e);
    }
    assert!(
        elapsed <= budget,
        "criterion {number} exceeded its {budget:?} budget: {elapsed:?}"
    );
}

/// Runs the CLI against a fixture and returns (exit code, parsed report).
fn run_cli(cmd: &str, fixture_name: &str, tag: &str) -> (i32, Value) {
    let out = std::env::temp_dir().join(format!("cbflab-acceptance-{tag}.json"));
    let status = Command::new(BIN)
        .arg(cmd)
        .arg("--config")
        .arg(fixture(fixture_name))
        .arg("--out")
        .arg(&out)
        .output()
        .expect("failed to spawn the cbflab binary");
    let code = status.status.code().expect("process was killed by signal");
    let text = std::fs::read_to_string(&out).unwrap_or_else(|e| {
        panic!(
            "no report at {}: {e}; stderr: {}",
            out.display(),
            String::from_utf8_lossy(&status.stderr)
        )
    });
    let report: Value = serde_json::from_str(&text).expect("report is not valid JSON");
    (code, report)
}

fn result_data<'a>(report: &'a Value, command: &str) -> &'a Value {
    report["results"]
        .as_array()
        .expect("results array")
        .iter()
        .find(|r| r["command"] == command)
        .unwrap_or_else(|| panic!("no result row for {command}"))
        .get("data")
        .expect("data field")
}

fn safeset_from(fixture_name: &str) -> SafeSet {
    load_config(fixture(fixture_name))
        .expect("fixture parses")
        .build_safeset(None)
        .expect("fixture safe set builds")
        .expect("fixture declares [safeset]")
}

#[test]
fn criterion_1_euler_characteristics() {
    criterion(1, "euler characteristics", Duration::from_secs(5 * 4), || {
        let cases = [
            ("unit_disk.cfg", 1i64),
            ("annulus.cfg", 0),
            ("ball.cfg", 1),
        ];
        for (name, want) in cases {
            let s = safeset_from(name);
            let t = Instant::now();
            let coarse = build_complex_at(&s, 64).expect("complex at 64");
            assert_eq!(coarse.euler_characteristic(), want, "{name} at 64");
            if name == "ball.cfg" {
                assert_eq!(
                    coarse.boundary_euler_characteristic(),
                    2,
                    "ball boundary complex"
                );
            }
            assert!(t.elapsed() < Duration::from_secs(5), "{name} at 64 too slow");
            let t = Instant::now();
            let fine = build_complex_at(&s, 128).expect("complex at 128");
            assert_eq!(
                fine.euler_characteristic(),
                want,
                "{name} unstable at 128"
            );
            assert!(t.elapsed() < Duration::from_secs(5), "{name} at 128 too slow");
        }
    });
}

#[test]
fn criterion_2_brockett_violation() {
    criterion(2, "brockett violation", Duration::from_secs(10), || {
        let (code, report) = run_cli("brockett", "nonholonomic.cfg", "c2");
        assert_eq!(code, 2, "expected the Violated exit code");
        let verdict = &result_data(&report, "brockett")["verdict"];
        assert_eq!(verdict["outcome"], "Violated");
        let dir = verdict["witness"]["vector"]
            .as_array()
            .expect("witness direction");
        let v: Vec<f64> = dir.iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(
            v[0] == 0.0 && v[1] == 0.0 && v[2].abs() == 1.0,
            "witness direction {v:?} is not ±e3"
        );
        let ladder = verdict["epsilon_ladder"].as_array().expect("ladder");
        assert!(!ladder.is_empty());
        for rung in ladder {
            let eps = rung["scale"].as_f64().unwrap();
            let res = rung["witness_min_residual"].as_f64().unwrap();
            assert!(
                res >= 0.9 * eps,
                "rung at eps {eps}: witness residual {res} below 0.9*eps"
            );
        }
    });
}

#[test]
fn criterion_3_sphere_vs_ball_inputs() {
    criterion(3, "sphere vs ball inputs", Duration::from_secs(30), || {
        let (code, report) = run_cli("obstruct-t3", "unit_disk_sphere_input.cfg", "c3-sphere");
        assert_eq!(code, 2, "sphere variant should exit Violated");
        let verdict = &result_data(&report, "obstruct-t3")["checks"][0]["verdict"];
        assert_eq!(verdict["outcome"], "Violated");
        let min = verdict["residual_statistics"]["min"].as_f64().unwrap();
        assert!(min >= 0.999, "min residual {min} below 0.999");

        let (code, report) = run_cli("obstruct-t3", "unit_disk_ball_input.cfg", "c3-ball");
        assert_eq!(code, 0, "ball variant should complete clean");
        let verdict = &result_data(&report, "obstruct-t3")["checks"][0]["verdict"];
        assert_eq!(verdict["outcome"], "NotViolated");
        let u = verdict["witness"]["u"].as_array().expect("witness input");
        assert!(
            u.iter().all(|c| c.as_f64().unwrap() == 0.0),
            "witness input {u:?} is not u = 0"
        );
    });
}

#[test]
fn criterion_4_satellite_family() {
    criterion(4, "satellite family", Duration::from_secs(5), || {
        let (code, report) = run_cli("obstruct-family", "satellite_reduced.cfg", "c4");
        assert_eq!(code, 2, "expected the Violated exit code");
        let checks = result_data(&report, "obstruct-family")["checks"]
            .as_array()
            .expect("check rows");
        assert!(!checks.is_empty());
        for row in checks {
            let verdict = &row["verdict"];
            assert_eq!(verdict["outcome"], "Violated", "row {}", row["name"]);
            let ladder = verdict["epsilon_ladder"].as_array().expect("ladder");
            assert!(!ladder.is_empty());
            for rung in ladder {
                let eps = rung["scale"].as_f64().unwrap();
                let res = rung["min_residual"].as_f64().unwrap();
                assert!(
                    (res - eps).abs() <= 1e-12,
                    "rung at eps {eps}: residual {res} not exactly eps"
                );
            }
        }
    });
}

#[test]
fn criterion_5_poincare_hopf_certificates() {
    criterion(5, "poincare-hopf certificates", Duration::from_secs(60), || {
        let s = SafeSet::new(
            parse("1 - x1^2 - x2^2").unwrap(),
            AxisBox::centered_cube(2, 1.5),
            32,
        )
        .unwrap();

        // Randomized strictly inward polynomial fields
        // X = -(a + b r^2) x + c (-x2, x1): dh·X = 2(a + b r^2) r^2 > 0 on
        // the boundary, with the rotation part tangent.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for case in 0..50 {
            let a = rng.random_range(0.5..2.0);
            let b = rng.random_range(0.0..1.0);
            let c = rng.random_range(-1.0..1.0);
            let f1 = format!("-({a:.6} + {b:.6}*(x1^2 + x2^2))*x1 - {c:.6}*x2");
            let f2 = format!("-({a:.6} + {b:.6}*(x1^2 + x2^2))*x2 + {c:.6}*x1");
            let field =
                VectorField::from_exprs(&[parse(&f1).unwrap(), parse(&f2).unwrap()]).unwrap();
            let report = verify_poincare_hopf(&field, &s).unwrap();
            assert!(report.hypotheses_met, "case {case}: hypotheses not met");
            assert!(
                !report.theorem_contradiction,
                "case {case}: contradiction flagged"
            );
            let best = report
                .certificates
                .iter()
                .map(|z| z.residual)
                .fold(f64::INFINITY, f64::min);
            assert!(
                best <= 1e-8,
                "case {case}: best certificate residual {best}"
            );
        }

        // The tangent rotation field needs the shrinking perturbation
        // sequence; its limit point still certifies a zero.
        let rotation =
            VectorField::from_exprs(&[parse("-x2").unwrap(), parse("x1").unwrap()]).unwrap();
        let report = verify_poincare_hopf(&rotation, &s).unwrap();
        assert!(report.used_perturbation, "rotation should need perturbation");
        assert!(!report.theorem_contradiction);
        let limit = report
            .certificates
            .iter()
            .find(|z| z.method == ZeroMethod::PerturbationLimit)
            .expect("a perturbation-limit certificate");
        assert!(
            limit.residual <= 1e-6,
            "limit residual {} above 1e-6",
            limit.residual
        );
    });
}

#[test]
fn criterion_6_decay_identity() {
    criterion(6, "decay identity", Duration::from_secs(30), || {
        const T0: f64 = 0.2;
        for name in ["unit_disk.cfg", "annulus.cfg", "slab.cfg"] {
            let s = safeset_from(name);
            let h = s.h_fn().unwrap();
            let y = flow_out_field(&s).unwrap();
            let bs = boundary_sample(&s, 200).unwrap();
            assert!(bs.points.len() >= 200, "{name}: {} samples", bs.points.len());
            let mut worst = 0.0f64;
            for p in bs.points.iter().take(200) {
                for t in [T0 / 4.0, T0 / 2.0, T0] {
                    let traj = integrate(&y, p, t).unwrap();
                    let err = (h(traj.endpoint()).unwrap() + t).abs();
                    worst = worst.max(err);
                }
            }
            assert!(
                worst <= 1e-6,
                "{name}: max decay-identity error {worst}"
            );

            let fo = flow_out(&s, T0, 2.0 * T0).unwrap();
            let chi_c = build_cubical_complex(&s).unwrap().euler_characteristic();
            let chi_tilde = build_cubical_complex(&fo.shifted)
                .unwrap()
                .euler_characteristic();
            assert_eq!(chi_tilde, chi_c, "{name}: chi changed under flow-out");
        }
    });
}

#[test]
fn criterion_7_qp_invariance() {
    criterion(7, "qp invariance", Duration::from_secs(30), || {
        let (code, report) = run_cli("flow-invariance", "unit_disk_fullspace.cfg", "c7-qp");
        assert_eq!(code, 0, "QP-filtered loop should stay safe");
        let data = result_data(&report, "flow-invariance");
        assert_eq!(data["pass"], true);
        assert_eq!(data["trajectories"], 100);
        assert_eq!(data["horizon"], 10.0);
        let min_h = data["min_h"].as_f64().unwrap();
        assert!(min_h >= -1e-6, "min h {min_h} below -1e-6");

        let (code, report) = run_cli("flow-invariance", "outward_disk.cfg", "c7-outward");
        assert_eq!(code, 2, "outward field should exit Violated");
        let data = result_data(&report, "flow-invariance");
        assert_eq!(data["pass"], false);
        let witness = &data["witness"];
        assert!(witness.is_object(), "no escape witness reported");
        assert!(witness["h_value"].as_f64().unwrap() < 0.0);
    });
}

#[test]
fn criterion_8_synthesis() {
    criterion(8, "synthesis", Duration::from_secs(60), || {
        let (code, report) = run_cli("synthesize", "single_integrator.cfg", "c8-strict");
        assert_eq!(code, 0, "strict fixture should synthesize");
        let data = result_data(&report, "synthesize");
        let strict = &data["strictness"];
        assert!(strict["samples"].as_u64().unwrap() >= 10_000);
        let min_slack = strict["min_slack"].as_f64().unwrap();
        assert!(min_slack > 0.0, "min slack {min_slack} not positive");
        let weight_dev = strict["max_weight_deviation"].as_f64().unwrap();
        assert!(
            weight_dev <= 1e-12,
            "weights stray from a partition of unity by {weight_dev}"
        );

        let (code, report) = run_cli("synthesize", "unit_disk_sphere_input.cfg", "c8-nonstrict");
        assert_eq!(code, 2, "non-strict variant should exit Violated");
        let data = result_data(&report, "synthesize");
        let w: Vec<f64> = data["witness"]
            .as_array()
            .expect("cover-failure witness")
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let h = 1.0 - w.iter().map(|c| c * c).sum::<f64>();
        assert!(
            h.abs() <= 1e-9,
            "witness {w:?} is not on the boundary (h = {h})"
        );
    });
}

#[test]
fn criterion_9_numerical_hygiene() {
    criterion(9, "numerical hygiene", Duration::from_secs(120), || {
        derivatives_match_finite_differences();
        integrator_order_reduction();
        span_solvability_matches_svd_oracle();
    });
}

/// Seeded random expression over smooth operations, so central differences
/// converge at their nominal rate everywhere.
fn random_expr(rng: &mut ChaCha8Rng, depth: usize, nvars: usize) -> Expr {
    if depth == 0 {
        return if rng.random_bool(0.6) {
            Expr::Var(format!("x{}", rng.random_range(1..=nvars)))
        } else {
            Expr::Const(rng.random_range(-2.0..2.0))
        };
    }
    let a = random_expr(rng, depth - 1, nvars);
    match rng.random_range(0..10u32) {
        0..=2 => Expr::Binary(
            BinOp::Add,
            Box::new(a),
            Box::new(random_expr(rng, depth - 1, nvars)),
        ),
        3..=4 => Expr::Binary(
            BinOp::Sub,
            Box::new(a),
            Box::new(random_expr(rng, depth - 1, nvars)),
        ),
        5..=6 => Expr::Binary(
            BinOp::Mul,
            Box::new(a),
            Box::new(random_expr(rng, depth - 1, nvars)),
        ),
        7 => Expr::Unary(UnaryOp::Sin, Box::new(a)),
        8 => Expr::Unary(UnaryOp::Cos, Box::new(a)),
        // Damped argument keeps exp and its derivatives bounded.
        _ => Expr::Unary(
            UnaryOp::Exp,
            Box::new(Expr::Binary(
                BinOp::Mul,
                Box::new(Expr::Const(0.3)),
                Box::new(a),
            )),
        ),
    }
}

fn derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let nvars = 1 + case % 3;
        let e = random_expr(&mut rng, 3, nvars);
        let x: Vec<f64> = (0..nvars).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 0..nvars {
            let var = format!("x{}", i + 1);
            let sym = differentiate(&e, &var)
                .eval(&Binding::states(&x))
                .unwrap();
            let step = 6e-6 * (1.0 + x[i].abs());
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += step;
            lo[i] -= step;
            let fd = (e.eval(&Binding::states(&hi)).unwrap()
                - e.eval(&Binding::states(&lo)).unwrap())
                / (2.0 * step);
            let rel = (sym - fd).abs() / (1.0 + sym.abs() + fd.abs());
            assert!(
                rel <= 1e-6,
                "case {case} d/d{var}: symbolic {sym} vs fd {fd} (rel {rel})"
            );
        }
    }
}

fn integrator_order_reduction() {
    let field =
        VectorField::from_exprs(&[parse("-x1").unwrap(), parse("-x2").unwrap()]).unwrap();
    let exact = (-1.0f64).exp();
    let mut prev: Option<f64> = None;
    for steps in [8usize, 16, 32, 64] {
        let traj = integrate_fixed(&field, &[1.0, 0.0], 1.0, steps).unwrap();
        let err = (traj.endpoint()[0] - exact).abs();
        if let Some(pe) = prev {
            if pe > 1e-12 {
                assert!(
                    pe / err >= 16.0,
                    "only {:.2}x error reduction at {steps} steps",
                    pe / err
                );
            }
        }
        prev = Some(err);
    }
}

fn span_solvability_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let n = rng.random_range(2..=4usize);
        let m = rng.random_range(1..=n + 1);
        // Half the instances get a forced rank deficiency via G = B·C.
        let deficient = rng.random_bool(0.5);
        let g = if deficient {
            let k = rng.random_range(1..=m.min(n).max(1));
            let b = nalgebra::DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0f64));
            let c = nalgebra::DMatrix::from_fn(k, m, |_, _| rng.random_range(-1.0..1.0f64));
            b * c
        } else {
            nalgebra::DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0f64))
        };
        let f = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));

        // Ground truth by construction: either z - f lies in col(G), or it
        // carries a component of norm ≥ 1e-3 orthogonal to col(G).
        let svd = g.clone().svd(true, true);
        let u = svd.u.as_ref().unwrap();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&sv| sv > 1e-10 * svd.singular_values[0].max(1.0))
            .count();
        let solvable = rank == n || rng.random_bool(0.5);
        let w = nalgebra::DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0f64));
        let mut z = &f + &g * w;
        if !solvable {
            let q = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));
            let ur = u.columns(0, rank);
            let mut perp = &q - ur * (ur.transpose() * &q);
            if perp.norm() < 1e-6 {
                // Against a degenerate draw, use a fresh orthogonal basis
                // vector outside the span instead.
                perp = nalgebra::DVector::from_fn(n, |i, _| if i == 0 { 1.0 } else { 0.0 })
                    - ur * (ur.transpose()
                        * nalgebra::DVector::from_fn(n, |i, _| if i == 0 { 1.0 } else { 0.0 }));
            }
            assert!(perp.norm() > 1e-9, "case {case}: no orthogonal direction");
            z += perp.normalize() * rng.random_range(0.01..1.0f64);
        }

        // Oracle classification from the SVD residual, with the same
        // inconclusive band the implementation uses.
        let zf = &z - &f;
        let ur = u.columns(0, rank);
        let oracle_residual = (&zf - ur * (ur.transpose() * &zf)).norm();
        let z_vec: Vec<f64> = z.iter().copied().collect();
        let tol = tol_solve(&z_vec);
        let oracle = if oracle_residual <= tol {
            Some(true)
        } else if oracle_residual > GAP_FACTOR * tol {
            Some(false)
        } else {
            None
        };
        assert_eq!(
            oracle,
            Some(solvable),
            "case {case}: oracle residual {oracle_residual} fell in the band"
        );

        let drift: Vec<Expr> = f.iter().map(|&v| Expr::Const(v)).collect();
        let inputs: Vec<Vec<Expr>> = (0..m)
            .map(|j| (0..n).map(|i| Expr::Const(g[(i, j)])).collect())
            .collect();
        let sys = ControlAffineSystem::new(n, m, drift, inputs, InputSet::FullSpace { m })
            .unwrap();
        let p = vec![0.0; n];
        let result = span_solvability(&sys, &p, &z_vec).unwrap();
        match (result.status, solvable) {
            (SolvabilityStatus::Solvable { .. }, true) => {}
            (SolvabilityStatus::Unsolvable { .. }, false) => {}
            (SolvabilityStatus::Inconclusive { .. }, _) => {
                panic!("case {case}: span_solvability inconclusive on a clear instance")
            }
            (other, _) => panic!("case {case}: misclassified as {other:?}"),
        }
    }
}
