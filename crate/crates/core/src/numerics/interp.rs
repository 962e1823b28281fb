//! Interpolation on uniform lattices.

/// Samples `f(x0 + i·step)` interpolated with the four-point cubic
/// Lagrange stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicTable {
    pub x0: f64,
    pub step: f64,
    pub values: Vec<f64>,
    /// Treat the function as even about `x0` when the stencil runs off the
    /// lower end (radial tables).
    pub even_at_start: bool,
}

impl CubicTable {
    pub fn new(x0: f64, step: f64, values: Vec<f64>) -> Self {
        assert!(values.len() >= 4 && step > 0.0);
        CubicTable { x0, step, values, even_at_start: false }
    }

    pub fn radial(step: f64, values: Vec<f64>) -> Self {
        let mut t = Self::new(0.0, step, values);
        t.even_at_start = true;
        t
    }

    pub fn x_max(&self) -> f64 {
        self.x0 + self.step * (self.values.len() - 1) as f64
    }

    fn at(&self, i: isize) -> f64 {
        let n = self.values.len() as isize;
        let j = if i < 0 && self.even_at_start { -i } else { i.clamp(0, n - 1) };
        self.values[j.min(n - 1) as usize]
    }

    /// Interpolated value; `None` outside `[x0, x_max]`.
    pub fn eval(&self, x: f64) -> Option<f64> {
        let t = (x - self.x0) / self.step;
        let n = self.values.len();
        if !(t >= 0.0 && t <= (n - 1) as f64) {
            return None;
        }
        let mut i = t.floor() as isize;
        let lower = if self.even_at_start { 0 } else { 1 };
        i = i.clamp(lower, n as isize - 3);
        let u = t - i as f64;
        let (fm, f0, f1, f2) = (self.at(i - 1), self.at(i), self.at(i + 1), self.at(i + 2));
        Some(lagrange4(u, fm, f0, f1, f2))
    }
}

#[inline]
fn lagrange4(u: f64, fm: f64, f0: f64, f1: f64, f2: f64) -> f64 {
    let um = u + 1.0;
    let u1 = u - 1.0;
    let u2 = u - 2.0;
    -fm * u * u1 * u2 / 6.0 + f0 * um * u1 * u2 / 2.0 - f1 * um * u * u2 / 2.0
        + f2 * um * u * u1 / 6.0
}

/// Values and first derivatives on `[0, x_max]`, cubic Hermite in between.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteTable {
    pub step: f64,
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
}

impl HermiteTable {
    pub fn build<F: Fn(f64) -> (f64, f64) + Sync>(step: f64, x_max: f64, f: F) -> Self {
        use rayon::prelude::*;
        let n = (x_max / step).ceil() as usize + 2;
        let pairs: Vec<(f64, f64)> = (0..n).into_par_iter().map(|i| f(i as f64 * step)).collect();
        let (values, derivs) = pairs.into_iter().unzip();
        HermiteTable { step, values, derivs }
    }

    pub fn x_max(&self) -> f64 {
        self.step * (self.values.len() - 1) as f64
    }

    /// Interpolated value at `x ≥ 0`; `None` past the end.
    #[inline]
    pub fn eval(&self, x: f64) -> Option<f64> {
        let t = x / self.step;
        let i = t as usize;
        if !(t >= 0.0) || i + 1 >= self.values.len() {
            if t == (self.values.len() - 1) as f64 {
                return self.values.last().copied();
            }
            return None;
        }
        let u = t - i as f64;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (d0, d1) = (self.derivs[i] * self.step, self.derivs[i + 1] * self.step);
        let u2 = u * u;
        let u3 = u2 * u;
        Some(
            (2.0 * u3 - 3.0 * u2 + 1.0) * y0
                + (u3 - 2.0 * u2 + u) * d0
                + (-2.0 * u3 + 3.0 * u2) * y1
                + (u3 - u2) * d1,
        )
    }
}
