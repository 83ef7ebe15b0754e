//! Small derivative-free and least-squares helpers shared by the zero
//! location and solvability searches. All routines are deterministic.

use nalgebra::{DMatrix, DVector};

use crate::system::SystemError;

/// Central finite-difference Jacobian of `f` at `p` with per-axis step
/// `h·(1 + |p_i|)`.
pub(crate) fn fd_jacobian(
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>, SystemError>,
    p: &[f64],
    h: f64,
) -> Result<DMatrix<f64>, SystemError> {
    let n = p.len();
    let f0 = f(p)?;
    let m = f0.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut q = p.to_vec();
    for j in 0..n {
        let step = h * (1.0 + p[j].abs());
        q[j] = p[j] + step;
        let fp = f(&q)?;
        q[j] = p[j] - step;
        let fm = f(&q)?;
        q[j] = p[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Damped Gauss–Newton (Levenberg–Marquardt) minimization of ‖f(x)‖² with a
/// finite-difference Jacobian. Returns the refined point and its residual
/// norm; stops when the residual drops below `tol` or progress stalls.
pub(crate) fn levenberg_marquardt(
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>, SystemError>,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, f64), SystemError> {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut lambda = 1e-3;
    let mut r = DVector::from_vec(f(x.as_slice())?);
    let mut rnorm = r.norm();
    for _ in 0..max_iter {
        if rnorm <= tol {
            break;
        }
        let jac = fd_jacobian(f, x.as_slice(), 1e-7)?;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cand = &x - &step;
            let rc = DVector::from_vec(f(cand.as_slice())?);
            if rc.norm() < rnorm {
                x = cand;
                r = rc;
                rnorm = r.norm();
                lambda = (lambda * 0.25).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok((x.as_slice().to_vec(), rnorm))
}

/// Golden-section minimization of a unimodal scalar function on [a, b].
pub(crate) fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Projected-gradient minimization of a smooth objective over a convex set
/// given by its projection map. The gradient is computed by central
/// differences; the step size follows a backtracking rule. The returned
/// flag is true when the run converged (stalled making no further progress)
/// rather than exhausting its iteration budget.
pub(crate) fn projected_gradient(
    objective: &dyn Fn(&[f64]) -> Result<f64, SystemError>,
    project: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    max_iter: usize,
) -> Result<(Vec<f64>, f64, bool), SystemError> {
    let n = x0.len();
    let mut x = project(x0);
    let mut fx = objective(&x)?;
    let mut step = 1.0;
    let mut converged = false;
    for _ in 0..max_iter {
        // Central-difference gradient.
        let mut g = vec![0.0; n];
        let mut q = x.clone();
        for j in 0..n {
            let h = 1e-7 * (1.0 + x[j].abs());
            q[j] = x[j] + h;
            let fp = objective(&q)?;
            q[j] = x[j] - h;
            let fm = objective(&q)?;
            q[j] = x[j];
            g[j] = (fp - fm) / (2.0 * h);
        }
        let gnorm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-14 {
            converged = true;
            break;
        }
        let mut advanced = false;
        for _ in 0..40 {
            let cand: Vec<f64> = (0..n).map(|j| x[j] - step * g[j]).collect();
            let cand = project(&cand);
            let fc = objective(&cand)?;
            let moved: f64 = cand
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if fc < fx - 1e-12 * (1.0 + fx.abs()) {
                x = cand;
                fx = fc;
                step = (step * 1.2).min(4.0);
                advanced = true;
                break;
            }
            step *= 0.5;
            if moved < 1e-15 {
                break;
            }
        }
        if !advanced {
            converged = true;
            break;
        }
    }
    Ok((x, fx, converged))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lm_finds_rosenbrock_valley_root() {
        // Residual form of Rosenbrock: f = (1 - x, 10(y - x^2)), root (1,1).
        let f = |p: &[f64]| -> Result<Vec<f64>, SystemError> {
            Ok(vec![1.0 - p[0], 10.0 * (p[1] - p[0] * p[0])])
        };
        let (x, r) = levenberg_marquardt(&f, &[-1.2, 1.0], 1e-12, 200).unwrap();
        assert!(r < 1e-10, "residual {r}");
        assert!((x[0] - 1.0).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn golden_section_quadratic() {
        let xmin = golden_section(&|x| (x - 0.3) * (x - 0.3), -1.0, 1.0, 60);
        assert!((xmin - 0.3).abs() < 1e-9);
    }

    #[test]
    fn projected_gradient_ball_constraint() {
        // Minimize |x - (2,0)|^2 over the unit ball: optimum (1, 0).
        let obj = |p: &[f64]| -> Result<f64, SystemError> {
            Ok((p[0] - 2.0) * (p[0] - 2.0) + p[1] * p[1])
        };
        let proj = |p: &[f64]| -> Vec<f64> {
            let n: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= 1.0 {
                p.to_vec()
            } else {
                p.iter().map(|v| v / n).collect()
            }
        };
        let (x, fx, converged) = projected_gradient(&obj, &proj, &[0.0, 0.5], 300).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-5, "{x:?}");
        assert!(x[1].abs() < 1e-5);
        assert!((fx - 1.0).abs() < 1e-5);
        assert!(converged);
    }

    #[test]
    fn fd_jacobian_matches_linear_map() {
        let f = |p: &[f64]| -> Result<Vec<f64>, SystemError> {
            Ok(vec![2.0 * p[0] - p[1], p[0] + 3.0 * p[1]])
        };
        let j = fd_jacobian(&f, &[0.4, -0.7], 1e-6).unwrap();
        assert!((j[(0, 0)] - 2.0).abs() < 1e-8);
        assert!((j[(0, 1)] + 1.0).abs() < 1e-8);
        assert!((j[(1, 0)] - 1.0).abs() < 1e-8);
        assert!((j[(1, 1)] - 3.0).abs() < 1e-8);
    }
}
