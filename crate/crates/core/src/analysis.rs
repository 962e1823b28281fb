//! Decay-time extraction: nonlinear least-squares fits of Var(φ) or
//! ⟨|α|⟩ series, model ranking and weighted averages.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, DVector, Dyn, Owned};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::phasespace::CircularStats;

/// Observable vs delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySeries {
    /// ps, strictly increasing.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Standard errors of `values`.
    pub errors: Option<Vec<f64>>,
    /// Per-point weights such as postselected counts.
    pub weights: Option<Vec<f64>>,
    pub label: String,
}

impl DecaySeries {
    pub fn new(
        times: Vec<f64>,
        values: Vec<f64>,
        errors: Option<Vec<f64>>,
        weights: Option<Vec<f64>>,
        label: &str,
    ) -> Result<Self> {
        let n = times.len();
        if values.len() != n || errors.as_ref().is_some_and(|e| e.len() != n) || weights.as_ref().is_some_and(|w| w.len() != n) {
            return Err(invalid("series columns differ in length"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("series times must be strictly increasing"));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(invalid("series contains non-finite values"));
        }
        Ok(DecaySeries { times, values, errors, weights, label: label.to_string() })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV `t_ps,value,stderr` (stderr blank when unknown).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_ps", "value", "stderr"])?;
        for i in 0..self.len() {
            let e = self.errors.as_ref().map_or(String::new(), |e| e[i].to_string());
            w.write_record([self.times[i].to_string(), self.values[i].to_string(), e])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, label: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let head: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if head.len() < 2 || head[0] != "t_ps" || head[1] != "value" {
            return Err(Error::Format("expected header t_ps,value[,stderr]".into()));
        }
        let (mut t, mut v, mut e) = (Vec::new(), Vec::new(), Vec::new());
        let mut all_err = head.get(2).is_some_and(|h| h == "stderr");
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i).unwrap_or("").trim().parse().map_err(|_| Error::Format(format!("bad number in row {:?}", rec)))
            };
            t.push(num(0)?);
            v.push(num(1)?);
            match rec.get(2).map(str::trim) {
                Some(s) if !s.is_empty() && all_err => e.push(num(2)?),
                _ => all_err = false,
            }
        }
        Self::new(t, v, all_err.then_some(e), None, label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// `a·e^{−t/τ} + d`
    Exponential,
    /// `a·e^{−(t/τ)²} + d`
    Gaussian,
    /// `a·(1 + t/θ)^{−β} + d`
    Power,
    /// `a·(1 + (t − t₀)/θ)^{−β} + d` for `t ≥ t₀`, `a + d` before.
    ShiftedPower,
}

impl Model {
    pub const ALL: [Model; 4] = [Model::Exponential, Model::Gaussian, Model::Power, Model::ShiftedPower];

    pub fn name(self) -> &'static str {
        match self {
            Model::Exponential => "exponential",
            Model::Gaussian => "gaussian",
            Model::Power => "power",
            Model::ShiftedPower => "shifted_power",
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Model::Exponential | Model::Gaussian => &["a", "tau_c", "d"],
            Model::Power => &["a", "theta", "beta", "d"],
            Model::ShiftedPower => &["a", "t0", "theta", "beta", "d"],
        }
    }

    pub fn n_params(self) -> usize {
        self.param_names().len()
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown model '{s}' (exponential, gaussian, power, shifted_power)")))
    }
}

/// Model evaluation in the internal coordinates: scale parameters are
/// fitted as logarithms; the exponential amplitude refers to `t_ref`.
struct Curve {
    model: Model,
    t_ref: f64,
}

impl Curve {
    /// Value and gradient with respect to the internal parameters.
    fn eval(&self, t: f64, x: &[f64], grad: &mut [f64]) -> f64 {
        match self.model {
            Model::Exponential => {
                let tau = x[1].exp();
                let dt = t - self.t_ref;
                let e = (-dt / tau).exp();
                grad[0] = e;
                grad[1] = x[0] * e * dt / tau;
                grad[2] = 1.0;
                x[0] * e + x[2]
            }
            Model::Gaussian => {
                let tau = x[1].exp();
                let u = t / tau;
                let e = (-u * u).exp();
                grad[0] = e;
                grad[1] = x[0] * e * 2.0 * u * u;
                grad[2] = 1.0;
                x[0] * e + x[2]
            }
            Model::Power => {
                let (theta, beta) = (x[1].exp(), x[2].exp());
                let q = 1.0 + t / theta;
                let p = q.powf(-beta);
                grad[0] = p;
                grad[1] = x[0] * beta * p / q * t / theta;
                grad[2] = -x[0] * p * q.ln() * beta;
                grad[3] = 1.0;
                x[0] * p + x[3]
            }
            Model::ShiftedPower => {
                let (t0, theta, beta) = (x[1], x[2].exp(), x[3].exp());
                grad[4] = 1.0;
                if t < t0 {
                    grad[0] = 1.0;
                    grad[1] = 0.0;
                    grad[2] = 0.0;
                    grad[3] = 0.0;
                    return x[0] + x[4];
                }
                let q = 1.0 + (t - t0) / theta;
                let p = q.powf(-beta);
                grad[0] = p;
                grad[1] = x[0] * beta * p / q / theta;
                grad[2] = x[0] * beta * p / q * (t - t0) / theta;
                grad[3] = -x[0] * p * q.ln() * beta;
                x[0] * p + x[4]
            }
        }
    }

    /// Natural parameters and their Jacobian with respect to the internal ones.
    fn natural(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let p = x.len();
        let mut g = DMatrix::<f64>::identity(p, p);
        let mut out = x.to_vec();
        match self.model {
            Model::Exponential => {
                let tau = x[1].exp();
                let shift = (self.t_ref / tau).exp();
                out[0] = x[0] * shift;
                out[1] = tau;
                g[(0, 0)] = shift;
                g[(0, 1)] = -x[0] * shift * self.t_ref / tau;
                g[(1, 1)] = tau;
            }
            Model::Gaussian => {
                out[1] = x[1].exp();
                g[(1, 1)] = out[1];
            }
            Model::Power => {
                for i in [1, 2] {
                    out[i] = x[i].exp();
                    g[(i, i)] = out[i];
                }
            }
            Model::ShiftedPower => {
                for i in [2, 3] {
                    out[i] = x[i].exp();
                    g[(i, i)] = out[i];
                }
            }
        }
        (out, g)
    }

    /// 1/e time of the decaying part and its gradient in internal coordinates.
    fn decay_time(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; x.len()];
        match self.model {
            Model::Exponential | Model::Gaussian => {
                let tau = x[1].exp();
                grad[1] = tau;
                (tau, grad)
            }
            Model::Power | Model::ShiftedPower => {
                let (it, ib) = if self.model == Model::Power { (1, 2) } else { (2, 3) };
                let (theta, beta) = (x[it].exp(), x[ib].exp());
                let k = (1.0 / beta).exp();
                grad[it] = theta * (k - 1.0);
                grad[ib] = -theta * k / beta;
                (theta * (k - 1.0), grad)
            }
        }
    }
}

struct Problem<'a> {
    curve: &'a Curve,
    t: &'a [f64],
    y: &'a [f64],
    sw: &'a [f64],
    x: DVector<f64>,
}

impl Problem<'_> {
    fn residual_vec(&self, x: &[f64]) -> Option<DVector<f64>> {
        let mut g = vec![0.0; x.len()];
        let r: Vec<f64> = (0..self.t.len()).map(|i| self.sw[i] * (self.curve.eval(self.t[i], x, &mut g) - self.y[i])).collect();
        r.iter().all(|v| v.is_finite()).then(|| DVector::from_vec(r))
    }

    fn jacobian_mat(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let p = x.len();
        let mut j = DMatrix::zeros(self.t.len(), p);
        let mut g = vec![0.0; p];
        for i in 0..self.t.len() {
            self.curve.eval(self.t[i], x, &mut g);
            for c in 0..p {
                j[(i, c)] = self.sw[i] * g[c];
            }
        }
        j.iter().all(|v| v.is_finite()).then_some(j)
    }
}

impl LeastSquaresProblem<f64, Dyn, Dyn> for Problem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.x.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        self.residual_vec(self.x.as_slice())
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        self.jacobian_mat(self.x.as_slice())
    }
}

/// Fitted model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub model: Model,
    /// Natural parameters in the order of [`Model::param_names`].
    pub params: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// 1/e time of the decaying part (`τ_c` for the exponential).
    pub tau_c: f64,
    pub tau_c_err: f64,
    /// `‖r‖₂` of the (weighted) residuals.
    pub residual_norm: f64,
    pub n_points: usize,
    #[serde(skip)]
    pub times: Vec<f64>,
    /// Fitted curve at the data times.
    #[serde(skip)]
    pub fitted: Vec<f64>,
    /// `value − fit` at the data times (unweighted).
    #[serde(skip)]
    pub residuals: Vec<f64>,
    #[serde(skip)]
    internal: Vec<f64>,
    #[serde(skip)]
    t_ref: f64,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.model.param_names().iter().position(|n| *n == name).map(|i| self.params[i])
    }

    /// Model value at `t`.
    pub fn predict(&self, t: f64) -> f64 {
        let mut g = vec![0.0; self.internal.len()];
        Curve { model: self.model, t_ref: self.t_ref }.eval(t, &self.internal, &mut g)
    }

    /// JSON `{model, params, stderrs, residual_norm, n_points}` with
    /// parameters keyed by name.
    pub fn report(&self) -> serde_json::Value {
        let names = self.model.param_names();
        let obj = |v: &[f64]| -> serde_json::Map<String, serde_json::Value> {
            names.iter().zip(v).map(|(n, x)| (n.to_string(), serde_json::json!(x))).collect()
        };
        serde_json::json!({
            "model": self.model.name(),
            "params": obj(&self.params),
            "stderrs": obj(&self.stderrs),
            "tau_c": self.tau_c,
            "tau_c_err": self.tau_c_err,
            "residual_norm": self.residual_norm,
            "n_points": self.n_points,
        })
    }

    /// CSV `t_ps,value,fit,residual`.
    pub fn write_residuals<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_ps", "value", "fit", "residual"])?;
        for i in 0..self.n_points {
            let v = self.fitted[i] + self.residuals[i];
            w.write_record([self.times[i].to_string(), v.to_string(), self.fitted[i].to_string(), self.residuals[i].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Gradient of `‖r‖²` in the fit's internal coordinates, analytic and
    /// by central differences.
    pub fn objective_gradients(&self, series: &DecaySeries, opts: &FitOptions) -> Result<(Vec<f64>, Vec<f64>)> {
        let curve = Curve { model: self.model, t_ref: self.t_ref };
        let sw = sqrt_weights(series, opts)?;
        let pr = Problem { curve: &curve, t: &series.times, y: &series.values, sw: &sw, x: DVector::from_vec(self.internal.clone()) };
        let x = &self.internal;
        let r = pr.residual_vec(x).ok_or_else(|| Error::Degenerate("non-finite residuals".into()))?;
        let j = pr.jacobian_mat(x).ok_or_else(|| Error::Degenerate("non-finite Jacobian".into()))?;
        let analytic: Vec<f64> = (j.transpose() * &r * 2.0).iter().copied().collect();
        let obj = |x: &[f64]| pr.residual_vec(x).map_or(f64::NAN, |r| r.norm_squared());
        let numeric = (0..x.len())
            .map(|i| {
                let h = 1e-6 * x[i].abs().max(1.0);
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += h;
                b[i] -= h;
                (obj(&a) - obj(&b)) / (2.0 * h)
            })
            .collect();
        Ok((analytic, numeric))
    }
}

/// Fit weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    /// Weight points by `1/stderr²` from the series errors.
    pub inverse_variance: bool,
}

fn sqrt_weights(series: &DecaySeries, opts: &FitOptions) -> Result<Vec<f64>> {
    if !opts.inverse_variance {
        return Ok(vec![1.0; series.len()]);
    }
    let e = series.errors.as_ref().ok_or_else(|| invalid("inverse-variance weights need series errors"))?;
    e.iter()
        .map(|&s| if s > 0.0 && s.is_finite() { Ok(1.0 / s) } else { Err(invalid(format!("stderr {s} cannot weight a fit"))) })
        .collect()
}

/// `(d₀, a₀, τ₀)`: tail mean of the last 10%, first value minus `d₀`, and
/// the delay at which `value − d₀` first drops to `a₀/e` (half the span if
/// it never does).
fn initial_guess(t: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = y.len();
    let tail = (n as f64 * 0.1).ceil().max(1.0) as usize;
    let d0 = y[n - tail..].iter().sum::<f64>() / tail as f64;
    let a0 = y[0] - d0;
    let target = a0.abs() / std::f64::consts::E;
    let mut tau0 = 0.5 * (t[n - 1] - t[0]);
    for i in 1..n {
        let (u0, u1) = ((y[i - 1] - d0).abs(), (y[i] - d0).abs());
        if u1 <= target && u0 > target {
            let f = (u0 - target) / (u0 - u1);
            tau0 = t[i - 1] + f * (t[i] - t[i - 1]) - t[0];
            break;
        }
    }
    if !(tau0 > 0.0) {
        tau0 = 0.5 * (t[n - 1] - t[0]);
    }
    (d0, a0, tau0)
}

/// Power-law exponents beyond this mean the data prefer the exponential
/// limit `β, θ → ∞` with `θ/β` fixed, where the optimum is not attained.
pub const MAX_POWER_EXPONENT: f64 = 1e4;

pub fn fit_decay(series: &DecaySeries, model: Model) -> Result<FitResult> {
    fit_decay_with(series, model, &FitOptions::default())
}

/// Fits on values divided by `max |value|`, so the optimizer path does not
/// depend on the overall scale of the data.
pub fn fit_decay_with(series: &DecaySeries, model: Model, opts: &FitOptions) -> Result<FitResult> {
    let n = series.len().max(2) as f64;
    let mean = series.values.iter().sum::<f64>() / n;
    let var = series.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var < 1e-12 {
        return Err(Error::Degenerate(format!("flat series (variance {var:.2e}) has no decay")));
    }
    let scale = series.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = DecaySeries {
        values: series.values.iter().map(|v| v / scale).collect(),
        errors: series.errors.as_ref().map(|e| e.iter().map(|v| v / scale).collect()),
        ..series.clone()
    };
    let mut f = fit_scaled(&norm, model, opts).map_err(|e| match e {
        Error::NoConvergence { what, best_residual } if !opts.inverse_variance => {
            Error::NoConvergence { what, best_residual: best_residual * scale }
        }
        e => e,
    })?;
    let last = model.n_params() - 1;
    for i in [0, last] {
        f.params[i] *= scale;
        f.stderrs[i] *= scale;
        f.internal[i] *= scale;
    }
    if !opts.inverse_variance {
        f.residual_norm *= scale;
    }
    f.fitted.iter_mut().chain(f.residuals.iter_mut()).for_each(|v| *v *= scale);
    Ok(f)
}

fn fit_scaled(series: &DecaySeries, model: Model, opts: &FitOptions) -> Result<FitResult> {
    let n = series.len();
    let p = model.n_params();
    if n < 4 || n <= p {
        return Err(invalid(format!("{model} fit needs more than {} points, got {n}", p.max(3))));
    }
    let (t, y) = (&series.times[..], &series.values[..]);
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var < 1e-12 {
        return Err(Error::Degenerate(format!("flat series (variance {var:.2e}) has no decay")));
    }
    let sw = sqrt_weights(series, opts)?;
    let (d0, a0, tau0) = initial_guess(t, y);
    let t_ref = if model == Model::Exponential { t[0] } else { 0.0 };
    let x0: Vec<f64> = match model {
        Model::Exponential => vec![a0, tau0.ln(), d0],
        Model::Gaussian => {
            let tau = tau0 + t[0].max(0.0);
            vec![a0 / (-(t[0] / tau).powi(2)).exp(), tau.ln(), d0]
        }
        Model::Power => vec![a0, tau0.ln(), 0.0, d0],
        Model::ShiftedPower => vec![a0, t[0], tau0.ln(), 0.0, d0],
    };
    let curve = Curve { model, t_ref };
    let run = |x0: Vec<f64>| {
        let problem = Problem { curve: &curve, t, y, sw: &sw, x: DVector::from_vec(x0) };
        let (done, report) = LevenbergMarquardt::new().with_patience(400).minimize(problem);
        let x: Vec<f64> = done.x.iter().copied().collect();
        let best = done.residual_vec(&x).map_or(f64::INFINITY, |r| r.norm());
        (x, best, report.termination)
    };
    let (mut x, mut best, mut term) = run(x0);
    // the shifted law contains the plain one at t0 = 0: start there too
    if model == Model::ShiftedPower && t[0] >= 0.0 {
        if let Ok(p) = fit_scaled(series, Model::Power, opts) {
            let alt = run(vec![p.internal[0], 0.0, p.internal[1], p.internal[2], p.internal[3]]);
            if alt.2.was_successful() && (!term.was_successful() || alt.1 <= best) {
                (x, best, term) = alt;
            }
        }
    }
    if !term.was_successful() || !best.is_finite() {
        return Err(Error::NoConvergence { what: format!("{model} fit ({term:?})"), best_residual: best });
    }
    if let Some(ib) = match model {
        Model::Power => Some(2),
        Model::ShiftedPower => Some(3),
        _ => None,
    } {
        let beta = x[ib].exp();
        if beta > MAX_POWER_EXPONENT {
            return Err(Error::Degenerate(format!("{model} fit ran off to its exponential limit (beta = {beta:.3e})")));
        }
    }
    let done = Problem { curve: &curve, t, y, sw: &sw, x: DVector::from_vec(x.clone()) };
    let j = done.jacobian_mat(&x).ok_or_else(|| Error::NoConvergence { what: format!("{model} Jacobian"), best_residual: best })?;
    let dof = (n - p) as f64;
    let s2 = best * best / dof;
    let cov = (j.transpose() * &j).try_inverse().map(|m| m * s2);
    let (params, g) = curve.natural(&x);
    let (tau_c, tg) = curve.decay_time(&x);
    let (stderrs, tau_c_err) = match &cov {
        Some(c) => {
            let cn = &g * c * g.transpose();
            let se = (0..p).map(|i| cn[(i, i)].max(0.0).sqrt()).collect();
            let tgv = DVector::from_vec(tg);
            (se, (tgv.transpose() * c * &tgv)[(0, 0)].max(0.0).sqrt())
        }
        None => return Err(Error::Degenerate(format!("{model} fit: singular normal matrix at the optimum"))),
    };
    if !(tau_c > 0.0 && tau_c.is_finite() && tau_c_err.is_finite()) {
        return Err(Error::Degenerate(format!("{model} fit: decay time {tau_c:e} +- {tau_c_err:e} is not a finite positive estimate")));
    }
    let mut gbuf = vec![0.0; p];
    let fitted: Vec<f64> = t.iter().map(|&ti| curve.eval(ti, &x, &mut gbuf)).collect();
    let residuals = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    Ok(FitResult {
        model,
        params,
        stderrs,
        tau_c,
        tau_c_err,
        residual_norm: best,
        n_points: n,
        times: t.to_vec(),
        fitted,
        residuals,
        internal: x,
        t_ref,
    })
}

/// Result of one model in a comparison.
#[derive(Debug)]
pub struct ModelOutcome {
    pub model: Model,
    pub result: Result<FitResult>,
}

/// Fits every model and ranks successful fits by residual norm; norms
/// equal within 1e-9 relative (plus 1e-10 of the data norm, for exact
/// data) rank the model with fewer parameters first.
/// Failed fits follow in model order.
pub fn compare_models(series: &DecaySeries) -> Result<Vec<ModelOutcome>> {
    compare_models_with(series, &Model::ALL, &FitOptions::default())
}

pub fn compare_models_with(series: &DecaySeries, models: &[Model], opts: &FitOptions) -> Result<Vec<ModelOutcome>> {
    if series.len() < 6 {
        return Err(invalid(format!("model comparison needs >= 6 points, got {}", series.len())));
    }
    let data_norm = series.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out: Vec<ModelOutcome> = models.iter().map(|&m| ModelOutcome { model: m, result: fit_decay_with(series, m, opts) }).collect();
    out.sort_by(|a, b| match (&a.result, &b.result) {
        (Ok(x), Ok(y)) => {
            let tol = 1e-9 * x.residual_norm.max(y.residual_norm) + 1e-10 * data_norm;
            if (x.residual_norm - y.residual_norm).abs() <= tol {
                x.model.n_params().cmp(&y.model.n_params())
            } else {
                x.residual_norm.total_cmp(&y.residual_norm)
            }
        }
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.model.cmp(&b.model),
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightedTau {
    pub tau_mean: f64,
    pub stderr: f64,
}

/// `Σwτ / Σw` with error `√(Σ w² σ_τ²) / Σw`; zero weights are skipped.
pub fn weighted_mean_tau(results: &[FitResult], weights: &[f64]) -> Result<WeightedTau> {
    if results.len() != weights.len() {
        return Err(invalid(format!("{} fits but {} weights", results.len(), weights.len())));
    }
    if results.is_empty() {
        return Err(Error::Empty("no decay times to average".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(invalid("weights must be finite and >= 0"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("all weights are zero"));
    }
    let (mut m, mut e2) = (0.0, 0.0);
    for (r, &w) in results.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        m += w * r.tau_c;
        e2 += (w * r.tau_c_err).powi(2);
    }
    Ok(WeightedTau { tau_mean: m / total, stderr: e2.sqrt() / total })
}

/// Circular statistics of unit phasors: resultant `⟨e^{iφ}⟩`,
/// `Var = 1 − |resultant|`; `mean_amplitude` is 1.
pub fn circular_stats_from_phases(phases: &[f64]) -> Result<CircularStats> {
    if phases.is_empty() {
        return Err(Error::Empty("no phases".into()));
    }
    let sum: Complex64 = phases.iter().map(|&p| Complex64::from_polar(1.0, p)).sum();
    let r = sum / phases.len() as f64;
    Ok(CircularStats { resultant: r, variance: 1.0 - r.norm(), mean_amplitude: 1.0 })
}
