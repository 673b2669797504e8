//! Angular-momentum algebra on doubled quantum numbers.
//!
//! Every angular momentum is carried as `2j` so half-integers stay exact.
//! Clebsch–Gordan and 6j symbols use the Racah closed forms with log-factorials.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Angular momentum stored as twice its value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct TwoJ(pub i32);

impl TwoJ {
    pub fn from_int(j: i32) -> Self {
        TwoJ(2 * j)
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    pub fn dim(self) -> usize {
        (self.0 + 1) as usize
    }

    /// Projections `2m` from `+2j` down to `-2j`.
    pub fn projections(self) -> impl Iterator<Item = i32> {
        let tj = self.0;
        (0..=tj).map(move |k| tj - 2 * k)
    }

    /// Index of `2m` in the `m = j, j-1, ..., -j` ordering.
    pub fn index_of(self, two_m: i32) -> usize {
        ((self.0 - two_m) / 2) as usize
    }
}

fn ln_fact(n: i32) -> f64 {
    debug_assert!(n >= 0);
    (2..=n).map(|k| f64::from(k).ln()).sum()
}

/// Factorial of a doubled argument that is known to be even.
fn ln_fact_half(two_n: i32) -> f64 {
    debug_assert!(two_n % 2 == 0 && two_n >= 0, "odd or negative factorial argument {two_n}");
    ln_fact(two_n / 2)
}

fn triangle_ok(a: i32, b: i32, c: i32) -> bool {
    c >= (a - b).abs() && c <= a + b && (a + b + c) % 2 == 0
}

fn ln_delta(a: i32, b: i32, c: i32) -> f64 {
    ln_fact_half(a + b - c) + ln_fact_half(a - b + c) + ln_fact_half(-a + b + c)
        - ln_fact_half(a + b + c + 2)
}

/// `<j1 m1; j2 m2 | J M>` with all arguments doubled.
pub fn clebsch_gordan(j1: i32, m1: i32, j2: i32, m2: i32, j: i32, m: i32) -> f64 {
    if m1 + m2 != m || !triangle_ok(j1, j2, j) {
        return 0.0;
    }
    if m1.abs() > j1 || m2.abs() > j2 || m.abs() > j {
        return 0.0;
    }
    if (j1 + m1) % 2 != 0 || (j2 + m2) % 2 != 0 || (j + m) % 2 != 0 {
        return 0.0;
    }
    let pre = 0.5
        * ((f64::from(j) + 1.0).ln()
            + ln_delta(j1, j2, j)
            + ln_fact_half(j1 + m1)
            + ln_fact_half(j1 - m1)
            + ln_fact_half(j2 + m2)
            + ln_fact_half(j2 - m2)
            + ln_fact_half(j + m)
            + ln_fact_half(j - m));
    // Racah sum over k (undoubled)
    let kmin = 0.max((j2 - j - m1) / 2).max((j1 + m2 - j) / 2);
    let kmax = ((j1 + j2 - j) / 2).min((j1 - m1) / 2).min((j2 + m2) / 2);
    let mut sum = 0.0;
    for k in kmin..=kmax {
        let ln_den = ln_fact(k)
            + ln_fact_half(j1 + j2 - j - 2 * k)
            + ln_fact_half(j1 - m1 - 2 * k)
            + ln_fact_half(j2 + m2 - 2 * k)
            + ln_fact_half(j - j2 + m1 + 2 * k)
            + ln_fact_half(j - j1 - m2 + 2 * k);
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * (pre - ln_den).exp();
    }
    sum
}

/// Wigner 6j symbol `{j1 j2 j3; j4 j5 j6}` with doubled arguments.
pub fn wigner_6j(j1: i32, j2: i32, j3: i32, j4: i32, j5: i32, j6: i32) -> f64 {
    let triads = [(j1, j2, j3), (j1, j5, j6), (j4, j2, j6), (j4, j5, j3)];
    if triads.iter().any(|&(a, b, c)| !triangle_ok(a, b, c)) {
        return 0.0;
    }
    let ln_tri: f64 = triads.iter().map(|&(a, b, c)| ln_delta(a, b, c)).sum::<f64>() * 0.5;
    let a1 = (j1 + j2 + j3) / 2;
    let a2 = (j1 + j5 + j6) / 2;
    let a3 = (j4 + j2 + j6) / 2;
    let a4 = (j4 + j5 + j3) / 2;
    let b1 = (j1 + j2 + j4 + j5) / 2;
    let b2 = (j2 + j3 + j5 + j6) / 2;
    let b3 = (j3 + j1 + j6 + j4) / 2;
    let tmin = a1.max(a2).max(a3).max(a4);
    let tmax = b1.min(b2).min(b3);
    let mut sum = 0.0;
    for t in tmin..=tmax {
        let ln_term = ln_fact(t + 1)
            - ln_fact(t - a1)
            - ln_fact(t - a2)
            - ln_fact(t - a3)
            - ln_fact(t - a4)
            - ln_fact(b1 - t)
            - ln_fact(b2 - t)
            - ln_fact(b3 - t);
        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * (ln_term + ln_tri).exp();
    }
    sum
}

/// Cartesian spin matrices in the `|j m>` basis ordered `m = j, ..., -j`.
#[derive(Clone, Debug)]
pub struct SpinMatrices {
    pub two_j: TwoJ,
    pub x: DMatrix<Complex64>,
    pub y: DMatrix<Complex64>,
    pub z: DMatrix<Complex64>,
}

impl SpinMatrices {
    pub fn new(two_j: TwoJ) -> Self {
        let d = two_j.dim();
        let j = two_j.value();
        let mut plus = DMatrix::<Complex64>::zeros(d, d);
        let mut z = DMatrix::<Complex64>::zeros(d, d);
        for (idx, tm) in two_j.projections().enumerate() {
            let m = f64::from(tm) / 2.0;
            z[(idx, idx)] = Complex64::new(m, 0.0);
            // <m+1| J+ |m>
            if idx > 0 {
                plus[(idx - 1, idx)] = Complex64::new((j * (j + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
            }
        }
        let minus = plus.adjoint();
        let x = (&plus + &minus).map(|c| c * 0.5);
        let y = (&plus - &minus).map(|c| c * Complex64::new(0.0, -0.5));
        SpinMatrices { two_j, x, y, z }
    }

    pub fn dim(&self) -> usize {
        self.two_j.dim()
    }

    pub fn casimir(&self) -> f64 {
        let j = self.two_j.value();
        j * (j + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_known_values() {
        // <1/2 1/2; 1/2 -1/2 | 1 0> = 1/sqrt(2)
        let v = clebsch_gordan(1, 1, 1, -1, 2, 0);
        assert!((v - 0.5f64.sqrt()).abs() < 1e-14);
        // <1/2 1/2; 1/2 -1/2 | 0 0> = 1/sqrt(2)
        let v = clebsch_gordan(1, 1, 1, -1, 0, 0);
        assert!((v - 0.5f64.sqrt()).abs() < 1e-14);
        // <1 1; 1 -1 | 0 0> = 1/sqrt(3)
        let v = clebsch_gordan(2, 2, 2, -2, 0, 0);
        assert!((v - (1.0f64 / 3.0).sqrt()).abs() < 1e-14);
        // stretched
        assert!((clebsch_gordan(8, 8, 2, 2, 10, 10) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cg_orthonormality() {
        let (j1, j2) = (8, 2);
        for j in [6, 8, 10] {
            for jp in [6, 8, 10] {
                for m in (-j.min(jp)..=j.min(jp)).step_by(2) {
                    let mut s = 0.0;
                    for m1 in (-j1..=j1).step_by(2) {
                        let m2 = m - m1;
                        s += clebsch_gordan(j1, m1, j2, m2, j, m)
                            * clebsch_gordan(j1, m1, j2, m2, jp, m);
                    }
                    let want = if j == jp { 1.0 } else { 0.0 };
                    assert!((s - want).abs() < 1e-12, "j={j} jp={jp} m={m} s={s}");
                }
            }
        }
    }

    #[test]
    fn sixj_known_values() {
        // {1 1 1; 1 1 1} = 1/6
        assert!((wigner_6j(2, 2, 2, 2, 2, 2) - 1.0 / 6.0).abs() < 1e-14);
        // {1/2 1/2 1; 1/2 1/2 0} = 1/2
        assert!((wigner_6j(1, 1, 2, 1, 1, 0) - 0.5).abs() < 1e-14);
        // {a b 0; b a c} = (-1)^{a+b+c} / sqrt((2a+1)(2b+1))
        assert!((wigner_6j(2, 2, 0, 2, 2, 2) - (-1.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn sixj_orthogonality() {
        // sum_x (2x+1)(2c+1) {a b x; d e c}{a b x; d e c'} = delta_cc'
        let (a, b, d, e) = (7, 2, 1, 8);
        for c in [1, 3] {
            for cp in [1, 3] {
                let mut s = 0.0;
                for x in (1..=9).step_by(2) {
                    s += f64::from(x + 1)
                        * f64::from(c + 1)
                        * wigner_6j(a, b, x, d, e, c)
                        * wigner_6j(a, b, x, d, e, cp);
                }
                let want = if c == cp { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-12, "c={c} cp={cp} s={s}");
            }
        }
    }

    #[test]
    fn spin_commutators() {
        let s = SpinMatrices::new(TwoJ(8));
        let comm = &s.x * &s.y - &s.y * &s.x;
        let iz = s.z.map(|c| c * Complex64::i());
        assert!((comm - iz).norm() < 1e-12);
        let c2 = &s.x * &s.x + &s.y * &s.y + &s.z * &s.z;
        let want = DMatrix::<Complex64>::identity(9, 9) * Complex64::new(20.0, 0.0);
        assert!((c2 - want).norm() < 1e-12);
    }
}
