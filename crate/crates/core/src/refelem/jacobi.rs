//! Orthonormal Jacobi polynomials, their derivatives, and Gauss-Lobatto
//! point sets on [-1, 1].

use nalgebra::DMatrix;

/// Factorial as f64. Inputs stay small (polynomial orders), so the direct
/// product is exact well past anything we need.
fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Squared L2 norm of the classical Jacobi polynomial P_0^{a,b} on [-1, 1],
/// for nonnegative integer weights a, b:
/// 2^{a+b+1} / (a+b+1) * a! b! / (a+b)!.
fn gamma0(a: u32, b: u32) -> f64 {
    let apb = a + b;
    2f64.powi(apb as i32 + 1) / (apb as f64 + 1.0) * factorial(a) * factorial(b)
        / factorial(apb)
}

/// Evaluate the orthonormal Jacobi polynomial of degree `n` with nonnegative
/// integer weights `(a, b)` at `x`, via the three-term recurrence.
pub fn jacobi_p(x: f64, a: u32, b: u32, n: usize) -> f64 {
    let (af, bf) = (a as f64, b as f64);
    let p0 = 1.0 / gamma0(a, b).sqrt();
    if n == 0 {
        return p0;
    }
    let gamma1 = (af + 1.0) * (bf + 1.0) / (af + bf + 3.0) * gamma0(a, b);
    let p1 = ((af + bf + 2.0) * x / 2.0 + (af - bf) / 2.0) / gamma1.sqrt();
    if n == 1 {
        return p1;
    }
    let mut aold = 2.0 / (2.0 + af + bf) * ((af + 1.0) * (bf + 1.0) / (af + bf + 3.0)).sqrt();
    let (mut pm2, mut pm1) = (p0, p1);
    for i in 1..n {
        let i = i as f64;
        let h1 = 2.0 * i + af + bf;
        let anew = 2.0 / (h1 + 2.0)
            * ((i + 1.0) * (i + 1.0 + af + bf) * (i + 1.0 + af) * (i + 1.0 + bf)
                / ((h1 + 1.0) * (h1 + 3.0)))
                .sqrt();
        let bnew = -(af * af - bf * bf) / (h1 * (h1 + 2.0));
        let pnew = (-aold * pm2 + (x - bnew) * pm1) / anew;
        pm2 = pm1;
        pm1 = pnew;
        aold = anew;
    }
    pm1
}

/// Derivative of the orthonormal Jacobi polynomial of degree `n`.
pub fn grad_jacobi_p(x: f64, a: u32, b: u32, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    (nf * (nf + a as f64 + b as f64 + 1.0)).sqrt() * jacobi_p(x, a + 1, b + 1, n - 1)
}

/// Gauss quadrature nodes for the Jacobi weight `(a, b)` with `n + 1` points,
/// computed as eigenvalues of the symmetric recurrence matrix.
fn gauss_nodes(a: u32, b: u32, n: usize) -> Vec<f64> {
    let (af, bf) = (a as f64, b as f64);
    if n == 0 {
        return vec![-(af - bf) / (af + bf + 2.0)];
    }
    let m = n + 1;
    let mut j = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        let h1 = 2.0 * i as f64 + af + bf;
        let diag = if i == 0 && af + bf == 0.0 {
            0.0
        } else {
            -(af * af - bf * bf) / ((h1 + 2.0) * h1)
        };
        j[(i, i)] = diag;
        if i + 1 <= n {
            let k = (i + 1) as f64;
            let h1 = 2.0 * i as f64 + af + bf;
            let off = 2.0 / (h1 + 2.0)
                * (k * (k + af + bf) * (k + af) * (k + bf) / ((h1 + 1.0) * (h1 + 3.0))).sqrt();
            j[(i, i + 1)] = off;
            j[(i + 1, i)] = off;
        }
    }
    let eig = j.symmetric_eigen();
    let mut xs: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xs
}

/// Gauss-Lobatto-Legendre nodes: `n + 1` points on [-1, 1] including the
/// endpoints. Requires `n >= 1`.
pub fn gauss_lobatto_nodes(n: usize) -> Vec<f64> {
    assert!(n >= 1, "Gauss-Lobatto point set needs at least two points");
    let mut xs = Vec::with_capacity(n + 1);
    xs.push(-1.0);
    if n >= 2 {
        xs.extend(gauss_nodes(1, 1, n - 2));
    }
    xs.push(1.0);
    xs
}
