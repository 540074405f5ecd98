//! Independent reference computations used to check the controllers.
//!
//! Nothing here shares code with the quantities it checks: the QP minimizer
//! builds its cost by simulating the augmented model step by step and
//! minimizes it with conjugate gradients, never touching the stacked
//! prediction matrices or the Hessian used by the analytical solution.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::mpc::{AugState, AugmentedModel};

/// Cost of an input-rate sequence, by direct simulation: terminal weight on
/// the last predicted output, stage weight on the others, `r` on every rate.
pub fn simulated_cost(
    am: &AugmentedModel,
    p: &Matrix2<f64>,
    q: &Matrix2<f64>,
    r: f64,
    x0: &AugState,
    reference: &[f64],
    du: &[f64],
) -> f64 {
    let n = du.len();
    let mut x = *x0;
    let mut j = 0.0;
    for (k, d) in du.iter().enumerate() {
        x = am.a * x + am.b * *d;
        let e = am.c * x - nalgebra::Vector2::new(reference[2 * k], reference[2 * k + 1]);
        let w = if k + 1 == n { p } else { q };
        j += (e.transpose() * w * e)[0] + r * d * d;
    }
    j
}

/// Minimizer of [`simulated_cost`]. The predicted outputs are affine in the
/// rates, so their map is recovered column by column from unit-rate
/// simulations; the resulting normal equations are solved by conjugate
/// gradients.
pub fn qp_minimizer(
    am: &AugmentedModel,
    p: &Matrix2<f64>,
    q: &Matrix2<f64>,
    r: f64,
    x0: &AugState,
    reference: &[f64],
    horizon: usize,
) -> DVector<f64> {
    let n = horizon;
    let outputs = |du: &[f64]| {
        let mut x = *x0;
        let mut y = DVector::zeros(2 * n);
        for (k, d) in du.iter().enumerate() {
            x = am.a * x + am.b * *d;
            let o = am.c * x;
            y[2 * k] = o[0];
            y[2 * k + 1] = o[1];
        }
        y
    };
    let zero = vec![0.0; n];
    let y0 = outputs(&zero);
    let mut m = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        let mut e = zero.clone();
        e[i] = 1.0;
        m.set_column(i, &(outputs(&e) - &y0));
    }
    let mut w = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        let blk = if k + 1 == n { p } else { q };
        w.view_mut((2 * k, 2 * k), (2, 2)).copy_from(blk);
    }
    let res = y0 - DVector::from_column_slice(reference);
    // J = (M u + res)' W (M u + res) + r u'u  =>  (M'WM + rI) u = -M'W res
    let h = m.transpose() * &w * &m + DMatrix::identity(n, n) * r;
    let b = -(m.transpose() * &w * res);
    conjugate_gradient(&h, &b, 1e-15, 50 * n)
}

/// Conjugate gradients for a symmetric positive definite system.
pub fn conjugate_gradient(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64, max_iter: usize) -> DVector<f64> {
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let stop = rel_tol * rel_tol * b.dot(b);
    for _ in 0..max_iter {
        if rs <= stop {
            break;
        }
        let ap = a * &p;
        let alpha = rs / p.dot(&ap);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.dot(&r);
        p = &r + (rs_new / rs) * &p;
        rs = rs_new;
    }
    x
}

/// Piecewise-affine reference scaling written directly from its three cases.
pub fn lateral_scale_reference(kappa_hat: f64, a_y: f64, a_zero: f64, a_onset: f64) -> f64 {
    if a_y.abs() > a_zero {
        0.0
    } else if a_y.abs() < a_onset {
        kappa_hat
    } else {
        (a_zero - a_y.abs()) / (a_zero - a_onset) * kappa_hat
    }
}
