//! LSQR for least-squares / least-norm solutions of `A x = b`.

/// Returns `(x, residual_norm, iterations)`.
pub fn lsqr<F, G>(a_mul: F, at_mul: G, b: &[f64], n: usize, tol: f64, max_iter: usize) -> (Vec<f64>, f64, usize)
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    let mut u = b.to_vec();
    let mut beta = norm(&u);
    if beta == 0.0 {
        return (x, 0.0, 0);
    }
    u.iter_mut().for_each(|v| *v /= beta);
    let mut v = at_mul(&u);
    let mut alpha = norm(&v);
    if alpha == 0.0 {
        return (x, beta, 0);
    }
    v.iter_mut().for_each(|e| *e /= alpha);
    let mut w = v.clone();
    let (mut phibar, mut rhobar) = (beta, alpha);
    let b_norm = beta;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let av = a_mul(&v);
        for (ui, avi) in u.iter_mut().zip(&av) {
            *ui = avi - alpha * *ui;
        }
        beta = norm(&u);
        if beta > 0.0 {
            u.iter_mut().for_each(|e| *e /= beta);
        }
        let atu = at_mul(&u);
        for (vi, ai) in v.iter_mut().zip(&atu) {
            *vi = ai - beta * *vi;
        }
        alpha = norm(&v);
        if alpha > 0.0 {
            v.iter_mut().for_each(|e| *e /= alpha);
        }
        let rho = rhobar.hypot(beta);
        let (c, s) = (rhobar / rho, beta / rho);
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;
        for ((xi, wi), vi) in x.iter_mut().zip(w.iter_mut()).zip(&v) {
            *xi += (phi / rho) * *wi;
            *wi = vi - (theta / rho) * *wi;
        }
        if phibar <= tol * b_norm || alpha == 0.0 {
            break;
        }
    }
    (x, phibar, it)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_norm_solution_of_underdetermined_system() {
        // x0 + x1 = 2 has least-norm solution (1, 1).
        let a = |x: &[f64]| vec![x[0] + x[1]];
        let at = |y: &[f64]| vec![y[0], y[0]];
        let (x, r, _) = lsqr(a, at, &[2.0], 2, 1e-14, 50);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12 && r < 1e-12);
    }
}
