//! K-component PLS by deflation, the weight-space estimator and the Krylov
//! characterization of the weight span.

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm2, Matrix, SymMatrix};

/// Relative size of `‖X^(k)ᵀY‖` (against `‖XᵀY‖`) below which deflation stops.
pub const STOP_TOL: f64 = 1e-12;
/// Relative eigenvalue floor for `WᵀΣW` (against its trace).
pub const GRAM_FLOOR: f64 = 1e-12;
/// Numerical-rank tolerance for the normalized Krylov block.
pub const RANK_TOL: f64 = 1e-10;

/// Output of [`fit_pls`].
#[derive(Debug, Clone)]
pub struct PlsFit {
    /// Number of components requested.
    pub requested: usize,
    /// Weights `w_k` as columns (p × K').
    pub weights: Matrix,
    /// Components `t_k` as columns (n × K').
    pub components: Matrix,
    /// Coefficients `W(WᵀΣW)⁻¹Wᵀσ̂`.
    pub beta: Vec<f64>,
    /// Number of leading components actually used in `beta`.
    pub used: usize,
    /// Deflation annihilated `X^(k)ᵀY` before reaching `requested`.
    pub terminated_early: bool,
    /// No component could be built; `beta` is zero.
    pub degenerate: bool,
}

impl PlsFit {
    /// Number of weight columns built (K').
    pub fn built(&self) -> usize {
        self.weights.cols()
    }
}

/// Runs the deflation algorithm for `k` components.
///
/// `w_k = X^(k)ᵀY / ‖X^(k)ᵀY‖`, `t_k = X^(k) w_k`, then
/// `X^(k+1) = X^(k) − t_k (t_kᵀ t_k)⁻¹ t_kᵀ X^(k)`.
pub fn fit_pls(x: &Matrix, y: &[f64], k: usize) -> Result<PlsFit> {
    let (n, p) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::invalid(format!(
            "response has length {} but design has {} rows",
            y.len(),
            n
        )));
    }
    if k == 0 || k > p {
        return Err(Error::invalid(format!("component count {k} outside 1..={p}")));
    }
    if !linalg::is_finite_vec(y) {
        return Err(Error::invalid("response contains non-finite values"));
    }

    let initial = x.tr_mul_vec(y)?;
    let initial_norm = norm2(&initial);
    let mut deflated = x.clone();
    let mut weights = Vec::with_capacity(k);
    let mut components = Vec::with_capacity(k);

    for step in 0..k {
        let cov = if step == 0 {
            initial.clone()
        } else {
            deflated.tr_mul_vec(y)?
        };
        let cov_norm = norm2(&cov);
        if cov_norm == 0.0 || cov_norm < STOP_TOL * initial_norm {
            break;
        }
        let w = linalg::scaled(1.0 / cov_norm, &cov);
        let t = deflated.mul_vec(&w)?;
        let tt = dot(&t, &t);
        if tt == 0.0 {
            break;
        }
        // X^(k) − t (tᵀX^(k)) / tᵀt
        let loading = deflated.tr_mul_vec(&t)?;
        for i in 0..n {
            let f = t[i] / tt;
            if f == 0.0 {
                continue;
            }
            for j in 0..p {
                deflated.set(i, j, deflated.get(i, j) - f * loading[j]);
            }
        }
        weights.push(w);
        components.push(t);
    }

    let built = weights.len();
    let weights_m = Matrix::from_columns(p, &weights);
    let components_m = Matrix::from_columns(n, &components);
    if built == 0 {
        return Ok(PlsFit {
            requested: k,
            weights: weights_m,
            components: components_m,
            beta: vec![0.0; p],
            used: 0,
            terminated_early: true,
            degenerate: true,
        });
    }

    let sigma = linalg::gram(x, n)?;
    let sigma_hat = linalg::scaled(1.0 / n as f64, &initial);
    let (beta, used) = weight_space_estimator_truncated(&weights, &sigma, &sigma_hat)?;
    Ok(PlsFit {
        requested: k,
        weights: weights_m,
        components: components_m,
        beta,
        used,
        terminated_early: built < k,
        degenerate: used == 0,
    })
}

/// `W(WᵀΣW)⁻¹Wᵀσ̂` for weight columns `w`. Fails if `WᵀΣW` is singular.
pub fn weight_space_estimator(
    weights: &[Vec<f64>],
    sigma: &SymMatrix,
    sigma_hat: &[f64],
) -> Result<Vec<f64>> {
    let (beta, used) = weight_space_estimator_truncated(weights, sigma, sigma_hat)?;
    if used < weights.len() {
        return Err(Error::invalid("WᵀΣW is numerically singular"));
    }
    Ok(beta)
}

/// Like [`weight_space_estimator`], but truncates to the longest leading block
/// of columns whose `WᵀΣW` has smallest eigenvalue above `1e-12 · trace`.
fn weight_space_estimator_truncated(
    weights: &[Vec<f64>],
    sigma: &SymMatrix,
    sigma_hat: &[f64],
) -> Result<(Vec<f64>, usize)> {
    let p = sigma.dim();
    if sigma_hat.len() != p || weights.iter().any(|w| w.len() != p) {
        return Err(Error::invalid("weight-space estimator dimension mismatch"));
    }
    let sw: Vec<Vec<f64>> = weights.iter().map(|w| sigma.mul_vec(w)).collect();
    let k = weights.len();
    let wsw = SymMatrix::from_fn(k, |i, j| dot(&weights[i], &sw[j]));

    let mut used = k;
    while used > 0 {
        let lead: Vec<usize> = (0..used).collect();
        let block = wsw.principal_submatrix(&lead);
        let floor = GRAM_FLOOR * linalg::trace(&block);
        if floor > 0.0 && linalg::sym_eigen(&block).values[0] >= floor {
            break;
        }
        used -= 1;
    }
    if used == 0 {
        return Ok((vec![0.0; p], 0));
    }

    let lead: Vec<usize> = (0..used).collect();
    let block = wsw.principal_submatrix(&lead).to_dense();
    let rhs: Vec<f64> = weights[..used].iter().map(|w| dot(w, sigma_hat)).collect();
    let coef = linalg::solve(&block, &rhs)?;
    let mut beta = vec![0.0; p];
    for (w, c) in weights[..used].iter().zip(&coef) {
        linalg::axpy(*c, w, &mut beta);
    }
    Ok((beta, used))
}

/// Orthonormal basis of `span{s, Σs, …, Σ^{K−1}s}`.
#[derive(Debug, Clone)]
pub struct KrylovBasis {
    pub requested: usize,
    /// Orthonormal columns, `K' ≤ K` of them.
    pub basis: Vec<Vec<f64>>,
}

impl KrylovBasis {
    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn as_matrix(&self, p: usize) -> Matrix {
        Matrix::from_columns(p, &self.basis)
    }
}

/// Krylov basis by modified Gram-Schmidt on the block of successive powers,
/// each power normalized to unit length so the rank cut `RANK_TOL` is relative
/// to the largest column.
pub fn krylov_basis(sigma: &SymMatrix, s: &[f64], k: usize) -> Result<KrylovBasis> {
    if k == 0 {
        return Err(Error::invalid("krylov_basis requires K >= 1"));
    }
    if s.len() != sigma.dim() {
        return Err(Error::invalid("krylov_basis dimension mismatch"));
    }
    let mut block = Vec::with_capacity(k);
    let mut current = s.to_vec();
    for _ in 0..k {
        let norm = norm2(&current);
        if norm == 0.0 {
            break;
        }
        current = linalg::scaled(1.0 / norm, &current);
        block.push(current.clone());
        current = sigma.mul_vec(&current);
    }
    Ok(KrylovBasis {
        requested: k,
        basis: linalg::orthonormalize(&block, RANK_TOL),
    })
}

/// `X · beta`.
pub fn predict(x: &Matrix, beta: &[f64]) -> Result<Vec<f64>> {
    x.mul_vec(beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::single::single_component_estimator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_xy(seed: u64, n: usize, p: usize) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, y)
    }

    /// Minimizes ‖Y − Xv‖² over v = Qc by normal equations on the explicit basis.
    fn least_squares_on_basis(x: &Matrix, y: &[f64], q: &[Vec<f64>]) -> Vec<f64> {
        let xq: Vec<Vec<f64>> = q.iter().map(|c| x.mul_vec(c).unwrap()).collect();
        let k = q.len();
        let normal = Matrix::from_fn(k, k, |i, j| dot(&xq[i], &xq[j]));
        let rhs: Vec<f64> = xq.iter().map(|c| dot(c, y)).collect();
        let coef = linalg::solve(&normal, &rhs).unwrap();
        let mut v = vec![0.0; x.cols()];
        for (c, col) in coef.iter().zip(q) {
            linalg::axpy(*c, col, &mut v);
        }
        v
    }

    fn rss(x: &Matrix, y: &[f64], v: &[f64]) -> f64 {
        let pred = x.mul_vec(v).unwrap();
        y.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
    }

    #[test]
    fn orthonormal_noiseless_design_recovers_beta() {
        // X = √n · I stacked: XᵀX/n = I
        let n = 4;
        let p = 2;
        let s = (n as f64 / 2.0).sqrt();
        let x = Matrix::from_fn(n, p, |i, j| if i % p == j { s } else { 0.0 });
        let g = linalg::gram(&x, n).unwrap();
        assert!(g.max_abs_diff(&SymMatrix::identity(p)) < 1e-14);
        let beta = vec![1.5, -0.5];
        let y = x.mul_vec(&beta).unwrap();
        let fit = fit_pls(&x, &y, 1).unwrap();
        assert!((fit.beta[0] - 1.5).abs() < 1e-12 && (fit.beta[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_component_matches_closed_form() {
        for seed in 0..10 {
            let (x, y) = random_xy(seed, 20, 6);
            let fit = fit_pls(&x, &y, 1).unwrap();
            let sigma = linalg::gram(&x, 20).unwrap();
            let sh = linalg::scaled(1.0 / 20.0, &x.tr_mul_vec(&y).unwrap());
            let closed = single_component_estimator(&sh, &sigma).unwrap();
            for (a, b) in fit.beta.iter().zip(&closed.beta) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn three_components_minimize_rss_over_krylov_space() {
        let (x, y) = random_xy(11, 30, 5);
        let fit = fit_pls(&x, &y, 3).unwrap();
        let sigma = linalg::gram(&x, 30).unwrap();
        let sh = linalg::scaled(1.0 / 30.0, &x.tr_mul_vec(&y).unwrap());
        let kb = krylov_basis(&sigma, &sh, 3).unwrap();
        assert_eq!(kb.rank(), 3);
        let ls = least_squares_on_basis(&x, &y, &kb.basis);
        let pred_fit = x.mul_vec(&fit.beta).unwrap();
        let pred_ls = x.mul_vec(&ls).unwrap();
        let diff = norm2(&linalg::sub(&pred_fit, &pred_ls)) / (30f64).sqrt();
        assert!(diff < 1e-8, "prediction gap {diff}");
        assert!(rss(&x, &y, &fit.beta) <= rss(&x, &y, &ls) + 1e-8);
    }

    #[test]
    fn weights_are_unit_and_components_orthogonal() {
        let (x, y) = random_xy(12, 40, 8);
        let fit = fit_pls(&x, &y, 4).unwrap();
        let w = fit.weights.columns();
        let t = fit.components.columns();
        for wk in &w {
            assert!((norm2(wk) - 1.0).abs() < 1e-12);
        }
        for i in 0..t.len() {
            for j in 0..i {
                assert!(dot(&t[i], &t[j]).abs() <= 1e-8 * norm2(&t[i]) * norm2(&t[j]));
            }
        }
    }

    #[test]
    fn zero_response_is_degenerate() {
        let (x, _) = random_xy(13, 10, 3);
        let fit = fit_pls(&x, &[0.0; 10], 2).unwrap();
        assert!(fit.degenerate && fit.terminated_early);
        assert_eq!(fit.built(), 0);
        assert_eq!(fit.beta, vec![0.0; 3]);
    }

    #[test]
    fn early_termination_when_response_is_exhausted() {
        // Y lies in span of the first component: deflation kills X^(2)ᵀY.
        let x = Matrix::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let y = vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let fit = fit_pls(&x, &y, 3).unwrap();
        assert_eq!(fit.built(), 1);
        assert!(fit.terminated_early && !fit.degenerate);
        assert!((fit.beta[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let (x, y) = random_xy(14, 10, 3);
        assert!(fit_pls(&x, &y, 0).is_err());
        assert!(fit_pls(&x, &y, 4).is_err());
        assert!(fit_pls(&x, &y[..9], 1).is_err());
        let mut bad = y.clone();
        bad[0] = f64::INFINITY;
        assert!(fit_pls(&x, &bad, 1).is_err());
    }

    #[test]
    fn krylov_examples() {
        let sigma = SymMatrix::from_fn(2, |i, j| if i == j { 2.0 } else { 0.3 });
        let kb = krylov_basis(&sigma, &[0.6, 0.8], 1).unwrap();
        assert_eq!(kb.rank(), 1);
        assert!((kb.basis[0][0] - 0.6).abs() < 1e-15 && (kb.basis[0][1] - 0.8).abs() < 1e-15);

        let kb = krylov_basis(&SymMatrix::identity(5), &[1.0, -2.0, 0.5, 0.0, 3.0], 4).unwrap();
        assert_eq!(kb.rank(), 1);

        let kb = krylov_basis(&SymMatrix::identity(3), &[0.0; 3], 2).unwrap();
        assert_eq!(kb.rank(), 0);
    }

    #[test]
    fn krylov_span_matches_raw_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let b = Matrix::from_fn(9, 6, |_, _| rng.random_range(-1.0..1.0));
        let sigma = linalg::gram(&b, 9).unwrap();
        let s: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kb = krylov_basis(&sigma, &s, 3).unwrap();
        let s1 = sigma.mul_vec(&s);
        let s2 = sigma.mul_vec(&s1);
        let raw = linalg::orthonormalize(&[s, s1, s2], 1e-12);
        assert!(linalg::max_principal_angle_sine(&kb.basis, &raw) < 1e-8);
        for (i, q) in kb.basis.iter().enumerate() {
            for (j, r) in kb.basis.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(q, r) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn predict_examples() {
        let x = Matrix::identity(3);
        assert_eq!(predict(&x, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(predict(&x, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(predict(&x, &[1.0]).is_err());

        let (x, _) = random_xy(16, 4, 3);
        let beta = [0.3, -1.2, 2.0];
        let got = predict(&x, &beta).unwrap();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..3 {
                s += x.get(i, j) * beta[j];
            }
            assert!((got[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_span_equals_krylov_span() {
        for seed in 0..20 {
            let (x, y) = random_xy(100 + seed, 25, 7);
            let sigma = linalg::gram(&x, 25).unwrap();
            let sh = linalg::scaled(1.0 / 25.0, &x.tr_mul_vec(&y).unwrap());
            for k in 1..=3 {
                let fit = fit_pls(&x, &y, k).unwrap();
                let w = linalg::orthonormalize(&fit.weights.columns(), 1e-12);
                let kb = krylov_basis(&sigma, &sh, k).unwrap();
                assert!(linalg::max_principal_angle_sine(&w, &kb.basis) < 1e-8);
            }
        }
    }
}
