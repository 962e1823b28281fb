//! Bessel functions of the first kind, orders 0 and 1.
//!
//! Small arguments use the power series, the mid range Miller's backward
//! recurrence normalized by `J0 + 2 Σ J2k = 1`, and large arguments the
//! Hankel asymptotic expansion.

const SERIES_MAX: f64 = 1e-3;
const ASYMPTOTIC_MIN: f64 = 25.0;
const RESCALE_AT: f64 = 1e250;

/// `J0(x)`.
pub fn j0(x: f64) -> f64 {
    j01(x).0
}

/// `J1(x)`.
pub fn j1(x: f64) -> f64 {
    j01(x).1
}

/// Both `(J0(x), J1(x))` from one evaluation.
pub fn j01(x: f64) -> (f64, f64) {
    if !x.is_finite() {
        return (f64::NAN, f64::NAN);
    }
    let ax = x.abs();
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let (a, b) = if ax < SERIES_MAX {
        series(ax)
    } else if ax < ASYMPTOTIC_MIN {
        miller(ax)
    } else {
        hankel(ax)
    };
    (a, sign * b)
}

fn series(x: f64) -> (f64, f64) {
    let x2 = x * x;
    let j0 = 1.0 - x2 / 4.0 * (1.0 - x2 / 16.0);
    let j1 = x / 2.0 * (1.0 - x2 / 8.0 * (1.0 - x2 / 24.0));
    (j0, j1)
}

fn miller(x: f64) -> (f64, f64) {
    let start = 2 * ((x as usize + 44) / 2);
    let two_over_x = 2.0 / x;
    let mut above = 0.0_f64;
    let mut cur = 1e-30_f64;
    let mut norm = 0.0_f64;
    let mut j1 = 0.0_f64;
    let mut k = start;
    while k > 0 {
        let below = k as f64 * two_over_x * cur - above;
        above = cur;
        cur = below;
        k -= 1;
        if k == 1 {
            j1 = cur;
        }
        if k % 2 == 0 && k > 0 {
            norm += 2.0 * cur;
        }
        if cur.abs() > RESCALE_AT {
            cur /= RESCALE_AT;
            above /= RESCALE_AT;
            norm /= RESCALE_AT;
            j1 /= RESCALE_AT;
        }
    }
    norm += cur;
    (cur / norm, j1 / norm)
}

fn hankel(x: f64) -> (f64, f64) {
    let (p0, q0) = hankel_pq(0.0, x);
    let (p1, q1) = hankel_pq(1.0, x);
    let (s, c) = x.sin_cos();
    let amp = (2.0 / (std::f64::consts::PI * x)).sqrt() * std::f64::consts::FRAC_1_SQRT_2;
    // cos(x - π/4) = (c + s)/√2, sin(x - π/4) = (s - c)/√2,
    // cos(x - 3π/4) = (s - c)/√2, sin(x - 3π/4) = -(s + c)/√2
    let j0 = amp * (p0 * (c + s) - q0 * (s - c));
    let j1 = amp * (p1 * (s - c) + q1 * (s + c));
    (j0, j1)
}

fn hankel_pq(nu: f64, x: f64) -> (f64, f64) {
    let mu = 4.0 * nu * nu;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut term = 1.0_f64;
    let mut last = f64::INFINITY;
    for k in 1..120 {
        let odd = (2 * k - 1) as f64;
        term *= (mu - odd * odd) / (k as f64 * 8.0 * x);
        if term.abs() >= last {
            break;
        }
        last = term.abs();
        match k % 4 {
            1 => q += term,
            2 => p -= term,
            3 => q -= term,
            _ => p += term,
        }
        if term.abs() < 1e-18 {
            break;
        }
    }
    (p, q)
}
