//! Gauss rules built with the Golub–Welsch eigenvalue method and polished by Newton steps.

use nalgebra::{DMatrix, SymmetricEigen};

/// `(nodes, weights)` for `∫_0^∞ e^{-x} f(x) dx`.
pub fn gauss_laguerre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = (2 * i + 1) as f64;
        if i + 1 < n {
            let b = (i + 1) as f64;
            jac[(i, i + 1)] = b;
            jac[(i + 1, i)] = b;
        }
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().cloned().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (l, dl) = laguerre_with_derivative(n, *x);
            *x -= l / dl;
        }
        // w = x / ((n+1)² L_{n+1}(x)²)
        let ln1 = laguerre(n + 1, 0.0, *x);
        weights.push(*x / (((n + 1) as f64).powi(2) * ln1 * ln1));
    }
    // the zeroth moment is exactly one; removes accumulated rounding in the weights
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (nodes, weights)
}

/// `(nodes, weights)` for `∫_{-1}^{1} f(x) dx`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        let k = (i + 1) as f64;
        let b = k / (4.0 * k * k - 1.0).sqrt();
        jac[(i, i + 1)] = b;
        jac[(i + 1, i)] = b;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().cloned().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = legendre_with_derivative(n, *x);
            *x -= p / dp;
        }
        let (_, dp) = legendre_with_derivative(n, *x);
        weights.push(2.0 / ((1.0 - *x * *x) * dp * dp));
    }
    (nodes, weights)
}

/// Generalized Laguerre polynomial `L_p^{(α)}(x)` by the three-term recurrence.
pub fn laguerre(p: usize, alpha: f64, x: f64) -> f64 {
    let mut prev = 1.0;
    if p == 0 {
        return prev;
    }
    let mut cur = 1.0 + alpha - x;
    for k in 1..p {
        let k = k as f64;
        let next = ((2.0 * k + 1.0 + alpha - x) * cur - (k + alpha) * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

fn laguerre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let ln = laguerre(n, 0.0, x);
    let lm = laguerre(n - 1, 0.0, x);
    // x L_n' = n (L_n - L_{n-1})
    (ln, n as f64 * (ln - lm) / x)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
