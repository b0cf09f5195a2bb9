//! Least absolute deviations by a primal-dual interior-point method.
//!
//! `min_b sum_i |y_i - x_i^T b| - g^T b` is solved through its dual
//!
//! ```text
//! min  -y^T a   s.t.  X^T a = (X^T 1 - g) / 2,   0 <= a <= 1
//! ```
//!
//! with Mehrotra predictor-corrector steps. The coefficients are recovered
//! as the negated equality multipliers. Each iteration costs one `p x p`
//! Cholesky factorization of `X^T Q X` for a diagonal `Q`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const FEAS_REL: f64 = 1e-5;

/// Tuning knobs for [`lad_ipm`].
#[derive(Debug, Clone, Copy)]
pub struct IpmOptions {
    /// Duality gap tolerance, relative to `1 + sum |y_i|` over the rows
    /// flagged as scale-bearing.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative ridge added to the normal equations.
    pub ridge: f64,
    /// Design condition numbers above this are rejected.
    pub max_condition: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            ridge: 1e-8,
            max_condition: 1e12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LadSolution {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub gap: f64,
    /// Smallest eigenvalue of the Gram matrix over the largest one; tiny
    /// values mean the design is (numerically) rank deficient and the ridge
    /// decided the solution.
    pub inverse_condition: f64,
}

/// Solves the LAD problem with linear term `-g^T b` for `m` rows of `x`
/// (row-major, `p` columns). An empty `g` means no linear term.
///
/// The dual start `a = 1/2` is infeasible when `g != 0`; the equality
/// residual is driven to zero along with the gap. An unbounded primal shows
/// up as a dual that never becomes feasible and is reported as a fit error.
pub fn lad_ipm(
    x: &[f64],
    p: usize,
    y: &[f64],
    g: &[f64],
    opts: &IpmOptions,
) -> Result<LadSolution> {
    let m = y.len();
    assert_eq!(x.len(), m * p, "design shape");
    assert!(g.is_empty() || g.len() == p, "linear term shape");
    if m == 0 || p == 0 {
        return Err(Error::DegenerateData("empty LAD problem".into()));
    }

    let gram = weighted_gram(x, p, |_| 1.0);
    let inverse_condition = inverse_condition(&gram, opts.ridge);
    if inverse_condition < 1.0 / opts.max_condition {
        return Err(Error::Fit(format!(
            "design condition number {:.3e} exceeds {:.1e}",
            1.0 / inverse_condition,
            opts.max_condition
        )));
    }

    let scale = 1.0 + y.iter().map(|v| v.abs()).sum::<f64>();
    let tol = opts.tol * scale;

    // c = -y, A = X^T, b = A * 0.5, bounds [0, 1].
    let c: Vec<f64> = y.iter().map(|v| -v).collect();
    let mut xs = vec![0.5; m];
    let mut ss = vec![0.5; m];
    let mut b_eq = mat_t_vec(x, p, &xs);
    for (b, g) in b_eq.iter_mut().zip(g) {
        *b -= 0.5 * g;
    }

    // Least-squares dual start.
    let mut dual = {
        let rhs = mat_t_vec(x, p, &c);
        solve_normal(gram.clone(), &rhs, opts.ridge)?
    };
    let mut r = residual(x, p, &c, &dual);
    let mean_abs = r.iter().map(|v| v.abs()).sum::<f64>() / m as f64;
    let shift = 0.1 * mean_abs + 1e-8;
    let mut zs: Vec<f64> = r.iter().map(|&v| v.max(0.0) + shift).collect();
    let mut ws: Vec<f64> = r.iter().map(|&v| (-v).max(0.0) + shift).collect();

    let mut gap = complementarity(&xs, &zs, &ss, &ws);
    let mut it = 0;
    let mut stalled = 0;
    let mut best: (f64, Vec<f64>, Vec<f64>) = (f64::INFINITY, Vec::new(), Vec::new());
    let mut dq = vec![0.0; m];
    let mut rho = vec![0.0; m];
    let mut rxz = vec![0.0; m];
    let mut rsw = vec![0.0; m];
    // The normal equations become extremely ill-conditioned near the optimum
    // and limit how far the equality residual can be closed; a relative
    // residual of FEAS_REL only perturbs the linear term by as much.
    let feas_scale = 1.0 + b_eq.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let feas_tol = FEAS_REL * feas_scale;
    loop {
        // Residuals of the equality constraints.
        let ax = mat_t_vec(x, p, &xs);
        let rp: Vec<f64> = b_eq.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let infeas = rp.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gap <= tol && infeas <= feas_tol {
            break;
        }
        // Near the optimum, try to land on the vertex directly. This is cheap
        // next to an iteration and sidesteps the late iterations in which the
        // normal equations lose all accuracy.
        if gap <= 100.0 * tol {
            let merit = (gap / tol).max(infeas / feas_tol);
            if merit < best.0 {
                best = (merit, dual.clone(), xs.clone());
            }
            if let Some(coef) = purify(x, p, y, &b_eq, &dual, &xs, feas_tol) {
                return Ok(LadSolution {
                    coef,
                    iterations: it,
                    gap,
                    inverse_condition,
                });
            }
        }
        if gap <= tol {
            stalled += 1;
        }
        if it == opts.max_iter || stalled >= 5 {
            if best.0 <= 10.0 {
                // Gap closed and the residual within an order of the
                // tolerance: the best iterate is as accurate as the data allow.
                return Ok(LadSolution {
                    coef: best.1.iter().map(|v| -v).collect(),
                    iterations: it,
                    gap,
                    inverse_condition,
                });
            }
            return Err(Error::Fit(format!(
                "interior point did not converge in {it} iterations (gap {gap:.3e}, tol {tol:.3e}, infeasibility {infeas:.3e}, tol {feas_tol:.3e})"
            )));
        }
        it += 1;

        r = residual(x, p, &c, &dual);
        let rd: Vec<f64> = (0..m).map(|i| r[i] - zs[i] + ws[i]).collect();

        for i in 0..m {
            dq[i] = 1.0 / (zs[i] / xs[i] + ws[i] / ss[i]);
        }
        let normal = weighted_gram(x, p, |i| dq[i]);
        let chol = factor(normal, opts.ridge)?;

        let solve = |rxz: &[f64], rsw: &[f64], rho: &mut [f64]| {
            for i in 0..m {
                rho[i] = rd[i] - rxz[i] / xs[i] + rsw[i] / ss[i];
            }
            let scaled: Vec<f64> = (0..m).map(|i| dq[i] * rho[i]).collect();
            let mut rhs = mat_t_vec(x, p, &scaled);
            rhs.iter_mut().zip(&rp).for_each(|(r, p)| *r += p);
            let mut dy = chol.solve(&DVector::from_vec(rhs));
            let aty = mat_vec(x, p, dy.as_slice());
            let mut dx: Vec<f64> = (0..m).map(|i| dq[i] * (aty[i] - rho[i])).collect();
            // `dq * (X dy - rho)` cancels badly once `dq` spans many orders of
            // magnitude; correct the equality residual of the direction
            // directly. Adding `dq * X e` to `dx` and `e` to `dy` leaves the
            // dual equation untouched.
            for _ in 0..2 {
                let adx = mat_t_vec(x, p, &dx);
                let err: Vec<f64> = rp.iter().zip(&adx).map(|(r, a)| r - a).collect();
                if err.iter().all(|e| e.abs() <= f64::EPSILON * feas_scale) {
                    break;
                }
                let e = chol.solve(&DVector::from_vec(err));
                let xe = mat_vec(x, p, e.as_slice());
                dx.iter_mut().zip(&xe).zip(&dq).for_each(|((d, v), q)| *d += q * v);
                dy += e;
            }
            let dz: Vec<f64> = (0..m).map(|i| (rxz[i] - zs[i] * dx[i]) / xs[i]).collect();
            let dw: Vec<f64> = (0..m).map(|i| (rsw[i] + ws[i] * dx[i]) / ss[i]).collect();
            (dy.as_slice().to_vec(), dx, dz, dw)
        };

        // Affine scaling predictor.
        for i in 0..m {
            rxz[i] = -xs[i] * zs[i];
            rsw[i] = -ss[i] * ws[i];
        }
        let (_, dx, dz, dw) = solve(&rxz, &rsw, &mut rho);
        let ap = primal_step(&xs, &ss, &dx).min(1.0);
        let ad = dual_step(&zs, &ws, &dz, &dw).min(1.0);
        let mu = gap / (2 * m) as f64;
        let mut gap_aff = 0.0;
        for i in 0..m {
            gap_aff += (xs[i] + ap * dx[i]) * (zs[i] + ad * dz[i])
                + (ss[i] - ap * dx[i]) * (ws[i] + ad * dw[i]);
        }
        let mu_aff = gap_aff / (2 * m) as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Centering corrector.
        for i in 0..m {
            rxz[i] = sigma * mu - xs[i] * zs[i] - dx[i] * dz[i];
            rsw[i] = sigma * mu - ss[i] * ws[i] + dx[i] * dw[i];
        }
        let (dy, dx, dz, dw) = solve(&rxz, &rsw, &mut rho);
        let ap = (0.9995 * primal_step(&xs, &ss, &dx)).min(1.0);
        let ad = (0.9995 * dual_step(&zs, &ws, &dz, &dw)).min(1.0);
        // While the equality residual is open, a long dual step with a short
        // primal one would drive the gap to zero at an infeasible point.
        let (ap, ad) = if infeas > feas_tol {
            let a = ap.min(ad);
            (a, a)
        } else {
            (ap, ad)
        };
        for i in 0..m {
            xs[i] += ap * dx[i];
            ss[i] -= ap * dx[i];
            zs[i] += ad * dz[i];
            ws[i] += ad * dw[i];
        }
        dual.iter_mut().zip(&dy).for_each(|(d, s)| *d += ad * s);

        let new_gap = complementarity(&xs, &zs, &ss, &ws);
        if !new_gap.is_finite() {
            return Err(Error::Fit("interior point produced non-finite iterates".into()));
        }
        gap = new_gap;
    }

    let coef = purify(x, p, y, &b_eq, &dual, &xs, feas_tol)
        .unwrap_or_else(|| dual.iter().map(|v| -v).collect());
    Ok(LadSolution {
        coef,
        iterations: it,
        gap,
        inverse_condition,
    })
}

/// Recovers the optimal vertex from a near-optimal interior iterate.
///
/// The `p` rows with the smallest residuals that are linearly independent
/// form the candidate basis; the basic solution is accepted only with a
/// certificate: the implied basic dual values must lie in `[0, 1]`.
fn purify(
    x: &[f64],
    p: usize,
    y: &[f64],
    b_eq: &[f64],
    dual: &[f64],
    xs: &[f64],
    feas_tol: f64,
) -> Option<Vec<f64>> {
    let m = y.len();
    if m < p {
        return None;
    }
    let coef: Vec<f64> = dual.iter().map(|v| -v).collect();
    let fitted = mat_vec(x, p, &coef);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| (y[a] - fitted[a]).abs().total_cmp(&(y[b] - fitted[b]).abs()));

    // Greedy independent subset by Gram-Schmidt.
    let mut basis: Vec<usize> = Vec::with_capacity(p);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(p);
    for &i in &order {
        let row = &x[i * p..(i + 1) * p];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut v = row.to_vec();
        for q in &ortho {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let rest = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if rest > 1e-8 * norm {
            v.iter_mut().for_each(|a| *a /= rest);
            ortho.push(v);
            basis.push(i);
            if basis.len() == p {
                break;
            }
        }
    }
    if basis.len() < p {
        return None;
    }
    let xb = DMatrix::from_fn(p, p, |r, c| x[basis[r] * p + c]);
    let yb = DVector::from_iterator(p, basis.iter().map(|&i| y[i]));
    let lu = xb.clone().lu();
    let b = lu.solve(&yb)?;
    if b.iter().any(|v| !v.is_finite()) {
        return None;
    }

    // Nonbasic duals follow the residual signs; exact zeros keep the
    // interior-point value.
    let scale = 1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let resid: Vec<f64> = mat_vec(x, p, b.as_slice())
        .iter()
        .zip(y)
        .map(|(f, y)| y - f)
        .collect();
    let mut in_basis = vec![false; m];
    basis.iter().for_each(|&i| in_basis[i] = true);
    let mut rhs = DVector::from_column_slice(b_eq);
    for i in (0..m).filter(|&i| !in_basis[i]) {
        let a = if resid[i] > 1e-10 * scale {
            1.0
        } else if resid[i] < -1e-10 * scale {
            0.0
        } else {
            xs[i]
        };
        for c in 0..p {
            rhs[c] -= a * x[i * p + c];
        }
    }
    let ab = xb.transpose().lu().solve(&rhs)?;
    let slack = 1e-7 + feas_tol;
    if ab.iter().all(|a| *a >= -slack && *a <= 1.0 + slack) {
        Some(b.as_slice().to_vec())
    } else {
        None
    }
}

fn complementarity(xs: &[f64], zs: &[f64], ss: &[f64], ws: &[f64]) -> f64 {
    let mut g = 0.0;
    for i in 0..xs.len() {
        g += xs[i] * zs[i] + ss[i] * ws[i];
    }
    g
}

fn primal_step(xs: &[f64], ss: &[f64], dx: &[f64]) -> f64 {
    let mut a = f64::INFINITY;
    for i in 0..xs.len() {
        if dx[i] < 0.0 {
            a = a.min(-xs[i] / dx[i]);
        } else if dx[i] > 0.0 {
            a = a.min(ss[i] / dx[i]);
        }
    }
    a.min(1.0 / 0.9995)
}

fn dual_step(zs: &[f64], ws: &[f64], dz: &[f64], dw: &[f64]) -> f64 {
    let mut a = f64::INFINITY;
    for i in 0..zs.len() {
        if dz[i] < 0.0 {
            a = a.min(-zs[i] / dz[i]);
        }
        if dw[i] < 0.0 {
            a = a.min(-ws[i] / dw[i]);
        }
    }
    a.min(1.0 / 0.9995)
}

/// `c - X y`.
fn residual(x: &[f64], p: usize, c: &[f64], dual: &[f64]) -> Vec<f64> {
    let xy = mat_vec(x, p, dual);
    c.iter().zip(xy).map(|(c, v)| c - v).collect()
}

fn mat_vec(x: &[f64], p: usize, v: &[f64]) -> Vec<f64> {
    x.chunks_exact(p)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_t_vec(x: &[f64], p: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p];
    for (row, &w) in x.chunks_exact(p).zip(v) {
        if w != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += w * a;
            }
        }
    }
    out
}

fn weighted_gram(x: &[f64], p: usize, weight: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let mut g = vec![0.0; p * p];
    for (i, row) in x.chunks_exact(p).enumerate() {
        let w = weight(i);
        for a in 0..p {
            let wa = w * row[a];
            if wa == 0.0 {
                continue;
            }
            let ga = &mut g[a * p..a * p + a + 1];
            for (gb, xb) in ga.iter_mut().zip(&row[..=a]) {
                *gb += wa * xb;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            g[b * p + a] = g[a * p + b];
        }
    }
    DMatrix::from_row_slice(p, p, &g)
}

fn add_ridge(mut m: DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let p = m.nrows();
    let tr = m.trace() / p as f64;
    let jitter = ridge * if tr > 0.0 { tr } else { 1.0 };
    for k in 0..p {
        m[(k, k)] += jitter;
    }
    m
}

/// Cholesky factor of a symmetrically equilibrated normal matrix.
///
/// Interior-point weights span many orders of magnitude near the optimum, so
/// the matrix is scaled to unit diagonal before the ridge is applied; a ridge
/// relative to the raw trace would swamp the weakly weighted directions.
struct NormalFactor {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    inv_sqrt_diag: DVector<f64>,
}

impl NormalFactor {
    fn solve_once(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let scaled = rhs.component_mul(&self.inv_sqrt_diag);
        self.chol.solve(&scaled).component_mul(&self.inv_sqrt_diag)
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut sol = self.solve_once(rhs);
        for _ in 0..2 {
            let resid = rhs - &self.matrix * &sol;
            sol += self.solve_once(&resid);
        }
        sol
    }
}

fn factor(m: DMatrix<f64>, ridge: f64) -> Result<NormalFactor> {
    let p = m.nrows();
    let max_diag = m.diagonal().iter().cloned().fold(0.0, f64::max);
    let floor = if max_diag > 0.0 { max_diag * 1e-300_f64.max(f64::MIN_POSITIVE) } else { 1.0 };
    let inv_sqrt_diag = DVector::from_iterator(p, m.diagonal().iter().map(|&d| 1.0 / d.max(floor).sqrt()));
    let mut scaled = m.clone();
    for a in 0..p {
        for b in 0..p {
            scaled[(a, b)] *= inv_sqrt_diag[a] * inv_sqrt_diag[b];
        }
    }
    let mut ridge = ridge.max(1e-14);
    for _ in 0..6 {
        if let Some(chol) = Cholesky::new(add_ridge(scaled.clone(), ridge)) {
            return Ok(NormalFactor {
                matrix: m,
                chol,
                inv_sqrt_diag,
            });
        }
        ridge *= 100.0;
    }
    Err(Error::Fit("normal equations are not positive definite".into()))
}

fn solve_normal(m: DMatrix<f64>, rhs: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let f = factor(m, ridge)?;
    Ok(f.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec())
}

fn inverse_condition(gram: &DMatrix<f64>, ridge: f64) -> f64 {
    let eig = SymmetricEigen::new(add_ridge(gram.clone(), ridge)).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        (min / max).max(0.0)
    }
}

/// Smallest over largest eigenvalue of `X^T X` without any ridge.
pub fn design_inverse_condition(x: &[f64], p: usize) -> f64 {
    inverse_condition(&weighted_gram(x, p, |_| 1.0), 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn l1(x: &[f64], p: usize, y: &[f64], b: &[f64]) -> f64 {
        mat_vec(x, p, b)
            .iter()
            .zip(y)
            .map(|(f, y)| (y - f).abs())
            .sum()
    }

    #[test]
    fn median_of_intercept_only() {
        let y = [3.0, -1.0, 7.0, 2.0, 10.0];
        let x = vec![1.0; 5];
        let sol = lad_ipm(&x, 1, &y, &[], &IpmOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.coef[0], 3.0, epsilon = 1e-7);
    }

    #[test]
    fn line_through_points() {
        // Exact fit exists: y = 1 + 2 t with one outlier.
        let t = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let mut y: Vec<f64> = t.iter().map(|t| 1.0 + 2.0 * t).collect();
        y[3] += 50.0;
        let x: Vec<f64> = t.iter().flat_map(|&t| [1.0, t]).collect();
        let sol = lad_ipm(&x, 2, &y, &[], &IpmOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.coef[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.coef[1], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(l1(&x, 2, &y, &sol.coef), 50.0, epsilon = 1e-6);
    }

    #[test]
    fn collinear_design_is_rejected() {
        let x = vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let y = [1.0, 2.0, 3.0];
        let opts = IpmOptions {
            ridge: 0.0,
            ..IpmOptions::default()
        };
        assert!(matches!(lad_ipm(&x, 2, &y, &[], &opts), Err(Error::Fit(_))));
    }
}
