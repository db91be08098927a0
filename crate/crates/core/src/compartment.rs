//! Classical 1/2/3-tissue compartment models in catenary form: forward
//! simulation against a plasma input, multistart Levenberg-Marquardt fitting
//! of the rate constants, and extrapolation to later frames.
//!
//! The ODE system is linear, so each interval between input breakpoints is
//! integrated exactly with an augmented-matrix exponential under a
//! piecewise-linear input; no generic ODE solver error enters fits.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Tac;
use crate::error::{Error, Result};

/// Catenary compartment model: K1, k2 [, k3, k4 [, k5, k6]] plus a blood
/// volume fraction. K1 is in mL/min/mL, the k's in 1/min.
#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentModelSpec {
    pub n_tissue: usize,
    pub rates: Vec<f64>,
    pub vb: f64,
}

impl CompartmentModelSpec {
    pub fn new(n_tissue: usize, rates: Vec<f64>, vb: f64) -> Result<Self> {
        let spec = CompartmentModelSpec { n_tissue, rates, vb };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n_tissue) {
            return Err(Error::Argument(format!(
                "n_tissue must be 1, 2, or 3, got {}",
                self.n_tissue
            )));
        }
        if self.rates.len() != 2 * self.n_tissue {
            return Err(Error::Argument(format!(
                "{}-tissue model needs {} rates, got {}",
                self.n_tissue,
                2 * self.n_tissue,
                self.rates.len()
            )));
        }
        if self.rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Argument("rates must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.vb) {
            return Err(Error::Argument(format!("vb must lie in [0,1), got {}", self.vb)));
        }
        Ok(())
    }

    pub fn model_name(&self) -> &'static str {
        match self.n_tissue {
            1 => "1TCM",
            2 => "2TCM",
            _ => "3TCM",
        }
    }

    /// System matrix M of dC/dt = M C + e1 K1 Cp for the serial topology.
    fn system_matrix(&self) -> DMatrix<f64> {
        let n = self.n_tissue;
        let r = &self.rates;
        let mut m = DMatrix::zeros(n, n);
        // exchanges: plasma <-> C1 <-> C2 <-> C3
        m[(0, 0)] = -r[1];
        if n >= 2 {
            m[(0, 0)] -= r[2];
            m[(0, 1)] = r[3];
            m[(1, 0)] = r[2];
            m[(1, 1)] = -r[3];
        }
        if n >= 3 {
            m[(1, 1)] -= r[4];
            m[(1, 2)] = r[5];
            m[(2, 1)] = r[4];
            m[(2, 2)] = -r[5];
        }
        m
    }
}

/// Plasma input curve: measured samples (linearly interpolated, zero before
/// the first sample, held constant after the last) or the analytic Feng
/// model.
#[derive(Debug, Clone)]
pub enum InputFunction {
    Sampled(Tac),
    /// (A1, A2, A3, lam1, lam2, lam3).
    Feng([f64; 6]),
}

impl InputFunction {
    pub fn value_at(&self, t: f64) -> f64 {
        match self {
            InputFunction::Sampled(tac) => {
                let times = &tac.times;
                if t < times[0] {
                    return 0.0;
                }
                match times.binary_search_by(|x| x.total_cmp(&t)) {
                    Ok(i) => tac.values[i],
                    Err(i) => {
                        if i >= times.len() {
                            *tac.values.last().unwrap()
                        } else {
                            let (t0, t1) = (times[i - 1], times[i]);
                            let w = (t - t0) / (t1 - t0);
                            tac.values[i - 1] * (1.0 - w) + tac.values[i] * w
                        }
                    }
                }
            }
            InputFunction::Feng(p) => feng_value(p, t),
        }
    }

    /// Times at which the piecewise-linear representation breaks, covering
    /// [0, t_max]. Feng inputs are densified nonuniformly: fine where the
    /// curve is sharp (early bolus), coarser later.
    fn breakpoints(&self, t_max: f64) -> Vec<f64> {
        let mut pts = vec![0.0];
        match self {
            InputFunction::Sampled(tac) => {
                for &t in &tac.times {
                    if t > 0.0 && t <= t_max {
                        pts.push(t);
                    }
                }
            }
            InputFunction::Feng(_) => {
                // dyadic steps and multiplicative placement keep segment
                // widths exactly equal, so the exp(Bh) cache stays small
                let mut push_range = |from: f64, to: f64, step: f64| {
                    let n = ((to - from) / step).ceil() as usize;
                    for i in 1..n {
                        pts.push(from + i as f64 * step);
                    }
                    pts.push(to);
                };
                let a = t_max.min(3.0);
                push_range(0.0, a, 1.0 / 256.0);
                if t_max > 3.0 {
                    let b = t_max.min(10.0);
                    push_range(3.0, b, 1.0 / 64.0);
                }
                if t_max > 10.0 {
                    push_range(10.0, t_max, 1.0 / 16.0);
                }
            }
        }
        if *pts.last().unwrap() < t_max {
            pts.push(t_max);
        }
        pts
    }
}

/// Classic Feng bolus parameter set (A1..A3 in activity units, lambdas in
/// 1/min), a common default for synthetic plasma inputs.
pub const FENG_STANDARD: [f64; 6] =
    [851.1225, 21.8798, 20.8113, 4.133859, 0.01043449, 0.1190996];

/// Feng bolus model, clamped at zero from below:
/// `(A1 t - A2 - A3) e^(-l1 t) + A2 e^(-l2 t) + A3 e^(-l3 t)`.
pub fn feng_value(p: &[f64; 6], t: f64) -> f64 {
    let [a1, a2, a3, l1, l2, l3] = *p;
    let v = (a1 * t - a2 - a3) * (-l1 * t).exp() + a2 * (-l2 * t).exp() + a3 * (-l3 * t).exp();
    v.max(0.0)
}

/// Sample the Feng model at the given times.
pub fn feng_input(params: &[f64; 6], times: &[f64]) -> Result<Tac> {
    let values = times.iter().map(|&t| feng_value(params, t)).collect();
    Tac::new(times.to_vec(), values)
}

/// Simulate the tissue TAC `C_T(t) = (1 - vb) sum_i C_i(t) + vb Cp(t)` at the
/// requested times, starting from C(0) = 0.
///
/// Between consecutive input breakpoints Cp is linear, `Cp(tau) = a + b tau`,
/// and the augmented system y = [C; a; b] with da/dtau = b is autonomous:
/// y(h) = exp(B h) y(0). B is independent of (a, b), so one matrix
/// exponential serves every segment with the same width.
pub fn compartment_forward(
    spec: &CompartmentModelSpec,
    input: &InputFunction,
    times: &[f64],
) -> Result<Tac> {
    spec.validate()?;
    if times.is_empty() || times[0] < 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("times must be strictly increasing and >= 0".into()));
    }
    let n = spec.n_tissue;
    let k1 = spec.rates[0];
    let mut b = DMatrix::zeros(n + 2, n + 2);
    b.view_mut((0, 0), (n, n)).copy_from(&spec.system_matrix());
    b[(0, n)] = k1;
    b[(n, n + 1)] = 1.0;

    let t_max = *times.last().unwrap();
    let mut grid = input.breakpoints(t_max);
    grid.extend(times.iter().copied());
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    // matrix exponentials cached per segment width, stored row-major flat;
    // the stepping loop is allocation-free
    let m = n + 2;
    let mut exp_cache: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut x = [0.0f64; 5];
    let mut y = [0.0f64; 5];
    let mut out = Vec::with_capacity(times.len());
    let mut want = times.iter().peekable();
    if **want.peek().unwrap() == 0.0 {
        out.push(spec.vb * input.value_at(0.0));
        want.next();
    }
    let mut cp_right = input.value_at(grid[0]);
    for seg in grid.windows(2) {
        let (t0, t1) = (seg[0], seg[1]);
        if t0 >= t_max {
            break;
        }
        let h = t1 - t0;
        let c0 = cp_right;
        cp_right = input.value_at(t1);
        let phi = exp_cache
            .entry(h.to_bits())
            .or_insert_with(|| (&b * h).exp().as_slice().to_vec());
        // nalgebra stores column-major: phi[row + col*m]
        x[n] = c0;
        x[n + 1] = (cp_right - c0) / h;
        y[..m].fill(0.0);
        for (col, &xv) in x[..m].iter().enumerate() {
            if xv != 0.0 {
                let base = col * m;
                for (row, yv) in y[..n].iter_mut().enumerate() {
                    *yv += phi[base + row] * xv;
                }
            }
        }
        x[..n].copy_from_slice(&y[..n]);
        if let Some(&&t) = want.peek() {
            if t == t1 {
                let tissue: f64 = x[..n].iter().sum();
                out.push((1.0 - spec.vb) * tissue + spec.vb * cp_right);
                want.next();
            }
        }
    }
    debug_assert!(want.peek().is_none());
    Tac::new(times.to_vec(), out)
}

/// Fit outcome; `rates` follow the same order as [`CompartmentModelSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitResult {
    pub model: String,
    pub rates: Vec<f64>,
    pub vb: f64,
    pub rss: f64,
    pub converged: bool,
    pub n_iters: usize,
    pub multistart_index: usize,
}

impl FitResult {
    pub fn spec(&self) -> Result<CompartmentModelSpec> {
        CompartmentModelSpec::new(self.rates.len() / 2, self.rates.clone(), self.vb)
    }
}

pub fn save_fit(fit: &FitResult, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(fit).expect("fit serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_fit(path: &Path) -> Result<FitResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn rss_of(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum()
}

struct LmOutcome {
    rates: Vec<f64>,
    rss: f64,
    n_iters: usize,
    converged: bool,
    /// rss after every accepted iteration, starting with the initial value.
    trace: Vec<f64>,
}

/// Candidate log-rates are clamped to [ln 1e-6, ln 1e3]: far outside any
/// physiological range, but it stops trial steps from requesting matrix
/// exponentials with norms around 1e40, where nalgebra's exp stalls.
const THETA_MIN: f64 = -13.815510557964274;
const THETA_MAX: f64 = 6.907755278982137;

/// Levenberg-Marquardt over log-rates (positivity by construction) with a
/// central-difference Jacobian. Damping starts at 1e-3, x10 on rejection,
/// /10 on acceptance; stops after 200 iterations or relative rss change
/// below 1e-10.
fn lm_single_start(
    theta0: &[f64],
    target: &[f64],
    times: &[f64],
    input: &InputFunction,
    n_tissue: usize,
) -> Result<LmOutcome> {
    let forward = |theta: &[f64]| -> Result<Vec<f64>> {
        let rates: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let spec = CompartmentModelSpec { n_tissue, rates, vb: 0.0 };
        Ok(compartment_forward(&spec, input, times)?.values)
    };
    let np = theta0.len();
    let mut theta = theta0.to_vec();
    let mut pred = forward(&theta)?;
    let mut rss = rss_of(&pred, target);
    let mut trace = vec![rss];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iters = 0;
    for _ in 0..200 {
        iters += 1;
        // central-difference Jacobian of residuals wrt theta
        let mut jac = DMatrix::zeros(times.len(), np);
        let delta = 1e-5;
        for p in 0..np {
            let mut tp = theta.clone();
            tp[p] += delta;
            let mut tm = theta.clone();
            tm[p] -= delta;
            let fp = forward(&tp)?;
            let fm = forward(&tm)?;
            for j in 0..times.len() {
                jac[(j, p)] = (fp[j] - fm[j]) / (2.0 * delta);
            }
        }
        let resid = DVector::from_iterator(
            times.len(),
            pred.iter().zip(target).map(|(p, t)| p - t),
        );
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * resid;
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = jtj.clone();
            for d in 0..np {
                damped[(d, d)] += lambda;
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cand: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(t, s)| (t - s).clamp(THETA_MIN, THETA_MAX))
                .collect();
            if cand.iter().any(|v| !v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let cand_pred = forward(&cand)?;
            let cand_rss = rss_of(&cand_pred, target);
            if cand_rss.is_finite() && cand_rss < rss {
                let rel = (rss - cand_rss) / rss.max(1e-300);
                theta = cand;
                pred = cand_pred;
                rss = cand_rss;
                trace.push(rss);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < 1e-10 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // damping exhausted: local minimum within numerical resolution
            converged = true;
        }
        if converged {
            break;
        }
    }
    Ok(LmOutcome {
        rates: theta.iter().map(|t| t.exp()).collect(),
        rss,
        n_iters: iters,
        converged,
        trace,
    })
}

/// Multistart nonlinear least squares of a catenary model against the first
/// `fit_frames` samples of `tac`. Starts are log-uniform in [1e-3, 10];
/// the lowest-rss outcome wins, ties broken by start index.
pub fn lm_fit(
    tac: &Tac,
    input: &InputFunction,
    n_tissue: usize,
    fit_frames: usize,
    n_starts: usize,
    seed: u64,
) -> Result<FitResult> {
    if !(1..=3).contains(&n_tissue) {
        return Err(Error::Argument(format!("n_tissue must be 1..3, got {n_tissue}")));
    }
    if fit_frames < 2 || fit_frames > tac.times.len() {
        return Err(Error::Argument(format!(
            "fit_frames must lie in [2, {}], got {fit_frames}",
            tac.times.len()
        )));
    }
    if n_starts == 0 {
        return Err(Error::Argument("n_starts must be >= 1".into()));
    }
    let times = &tac.times[..fit_frames];
    let target = &tac.values[..fit_frames];
    let model = match n_tissue {
        1 => "1TCM",
        2 => "2TCM",
        _ => "3TCM",
    };
    if target.iter().all(|&v| v == 0.0) {
        return Ok(FitResult {
            model: model.into(),
            rates: vec![0.0; 2 * n_tissue],
            vb: 0.0,
            rss: 0.0,
            converged: true,
            n_iters: 0,
            multistart_index: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = ((1e-3f64).ln(), (10f64).ln());
    let mut best: Option<(usize, LmOutcome)> = None;
    for start in 0..n_starts {
        let theta0: Vec<f64> = (0..2 * n_tissue).map(|_| rng.gen_range(lo..hi)).collect();
        let outcome = lm_single_start(&theta0, target, times, input, n_tissue)?;
        let better = match &best {
            None => true,
            Some((_, b)) => outcome.rss < b.rss,
        };
        if better {
            best = Some((start, outcome));
        }
    }
    let (idx, out) = best.unwrap();
    Ok(FitResult {
        model: model.into(),
        rates: out.rates,
        vb: 0.0,
        rss: out.rss,
        converged: out.converged,
        n_iters: out.n_iters,
        multistart_index: idx,
    })
}

/// A fitted model evaluated at later times, with the input extended beyond
/// its measured support by a mono-exponential tail.
#[derive(Debug, Clone)]
pub struct Extrapolation {
    pub tac: Tac,
    /// True when the input tail could not be fitted (fewer than 3 positive
    /// trailing samples) and a constant extension was used instead.
    pub constant_tail: bool,
}

/// Evaluate a fitted model at `test_times`. Sampled inputs are extended
/// beyond their last sample by an exponential fitted to the final 3 samples;
/// if that fit is impossible the last value is held constant.
pub fn ctm_extrapolate(
    fit: &FitResult,
    input: &InputFunction,
    test_times: &[f64],
) -> Result<Extrapolation> {
    let spec = fit.spec()?;
    let t_max = *test_times
        .last()
        .ok_or_else(|| Error::Argument("test_times is empty".into()))?;
    let (extended, constant_tail) = extend_input(input, t_max);
    let tac = compartment_forward(&spec, &extended, test_times)?;
    Ok(Extrapolation { tac, constant_tail })
}

/// Extend a sampled input to cover `t_max`; Feng inputs are analytic and
/// pass through unchanged.
fn extend_input(input: &InputFunction, t_max: f64) -> (InputFunction, bool) {
    let InputFunction::Sampled(tac) = input else {
        return (input.clone(), false);
    };
    let t_last = *tac.times.last().unwrap();
    if t_max <= t_last {
        return (input.clone(), false);
    }
    let n = tac.times.len();
    // mono-exponential tail from the last 3 samples: ln v = a - r t
    let tail_fit = if n >= 3 && tac.values[n - 3..].iter().all(|&v| v > 0.0) {
        let ts = &tac.times[n - 3..];
        let ls: Vec<f64> = tac.values[n - 3..].iter().map(|v| v.ln()).collect();
        let tm = ts.iter().sum::<f64>() / 3.0;
        let lm = ls.iter().sum::<f64>() / 3.0;
        let cov: f64 = ts.iter().zip(&ls).map(|(t, l)| (t - tm) * (l - lm)).sum();
        let var: f64 = ts.iter().map(|t| (t - tm) * (t - tm)).sum();
        if var > 0.0 {
            let slope = cov / var; // expected <= 0 for a decaying tail
            Some((lm - slope * tm, slope))
        } else {
            None
        }
    } else {
        None
    };
    let mut times = tac.times.clone();
    let mut values = tac.values.clone();
    let v_last = *tac.values.last().unwrap();
    let step = 0.25;
    let mut t = t_last + step;
    loop {
        let t_pt = t.min(t_max);
        let v = match tail_fit {
            Some((a, slope)) => (a + slope * t_pt).exp(),
            None => v_last,
        };
        times.push(t_pt);
        values.push(v);
        if t_pt >= t_max {
            break;
        }
        t += step;
    }
    let extended = Tac::new(times, values).expect("extension keeps times increasing");
    (InputFunction::Sampled(extended), tail_fit.is_none())
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn dense_exp_input(t_max: f64) -> InputFunction {
        // Cp(t) = e^{-t}, sampled finely so piecewise-linear error is < 1e-9
        let n = (t_max / 1e-4).round() as usize;
        let times: Vec<f64> = (0..=n).map(|i| i as f64 * 1e-4).collect();
        let values = times.iter().map(|t| (-t).exp()).collect();
        InputFunction::Sampled(Tac::new(times, values).unwrap())
    }

    #[test]
    fn forward_matches_scalar_closed_form() {
        // K1=1, k2=2, Cp=e^{-t}: C_T(t) = e^{-t} - e^{-2t}
        let spec = CompartmentModelSpec::new(1, vec![1.0, 2.0], 0.0).unwrap();
        let input = dense_exp_input(2.0);
        let times = [0.5, 1.0, 2.0];
        let tac = compartment_forward(&spec, &input, &times).unwrap();
        for (i, &t) in times.iter().enumerate() {
            let exact = (-t).exp() - (-2.0 * t).exp();
            assert!((tac.values[i] - exact).abs() < 1e-8, "t={t}");
        }
        assert!((tac.values[1] - 0.23254).abs() < 5e-6);
    }

    #[test]
    fn zero_washout_integrates_input() {
        // K1=1, k2=0, Cp == 1: C_T(t) = t exactly (input linear per segment)
        let spec = CompartmentModelSpec::new(1, vec![1.0, 0.0], 0.0).unwrap();
        let input =
            InputFunction::Sampled(Tac::new(vec![0.0, 10.0], vec![1.0, 1.0]).unwrap());
        let times = [1.0, 2.5, 7.0];
        let tac = compartment_forward(&spec, &input, &times).unwrap();
        for (v, t) in tac.values.iter().zip(times) {
            assert!((v - t).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_uptake_leaves_blood_fraction() {
        let spec = CompartmentModelSpec::new(2, vec![0.0, 0.3, 0.2, 0.1], 0.25).unwrap();
        let input = InputFunction::Feng(FENG_STANDARD);
        let times = [0.5, 1.0, 5.0, 20.0];
        let tac = compartment_forward(&spec, &input, &times).unwrap();
        for (v, t) in tac.values.iter().zip(times) {
            assert!((v - 0.25 * input.value_at(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn feng_properties() {
        assert_eq!(feng_value(&FENG_STANDARD, 0.0), 0.0);
        // single-term form peaks at t = 1/lambda1
        let p = [2.0, 0.0, 0.0, 0.5, 1.0, 1.0];
        let peak_t = 2.0;
        let at_peak = feng_value(&p, peak_t);
        for dt in [-0.05, 0.05] {
            assert!(feng_value(&p, peak_t + dt) < at_peak);
        }
        let zero = [0.0; 6];
        for t in [0.0, 1.0, 50.0] {
            assert_eq!(feng_value(&zero, t), 0.0);
        }
        // clamping: large A2 with negative early lobe stays >= 0
        let lobed = [0.1, 50.0, 0.0, 0.2, 5.0, 1.0];
        for i in 0..100 {
            assert!(feng_value(&lobed, i as f64 * 0.1) >= 0.0);
        }
    }

    #[test]
    fn exponential_integrator_matches_rk4_on_2tcm() {
        let spec = CompartmentModelSpec::new(2, vec![0.6, 0.4, 0.15, 0.05], 0.0).unwrap();
        let input = dense_exp_input(5.0);
        let times = [0.5, 1.0, 2.0, 5.0];
        let ours = compartment_forward(&spec, &input, &times).unwrap();
        let reference = rk4_forward(&spec, &input, &times, 1e-4);
        for (a, b) in ours.values.iter().zip(&reference) {
            assert!((a - b).abs() / b.abs().max(1e-12) < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn nonnegative_output_for_nonnegative_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = InputFunction::Feng(FENG_STANDARD);
        let times: Vec<f64> = (1..=20).map(|i| i as f64 * 2.0).collect();
        for n in 1..=3 {
            for _ in 0..5 {
                let rates: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..1.5)).collect();
                let vb = rng.gen_range(0.0..0.3);
                let spec = CompartmentModelSpec::new(n, rates, vb).unwrap();
                let tac = compartment_forward(&spec, &input, &times).unwrap();
                assert!(tac.values.iter().all(|&v| v >= -1e-12));
            }
        }
    }

    #[test]
    fn linear_in_k1() {
        let input = InputFunction::Feng(FENG_STANDARD);
        let times = [1.0, 5.0, 20.0, 60.0];
        let base = CompartmentModelSpec::new(2, vec![0.5, 0.3, 0.1, 0.05], 0.0).unwrap();
        let scaled = CompartmentModelSpec::new(2, vec![1.5, 0.3, 0.1, 0.05], 0.0).unwrap();
        let a = compartment_forward(&base, &input, &times).unwrap();
        let b = compartment_forward(&scaled, &input, &times).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((3.0 * x - y).abs() < 1e-10 * y.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_invalid_specs_and_times() {
        assert!(CompartmentModelSpec::new(4, vec![0.0; 8], 0.0).is_err());
        assert!(CompartmentModelSpec::new(1, vec![1.0], 0.0).is_err());
        assert!(CompartmentModelSpec::new(1, vec![1.0, -0.1], 0.0).is_err());
        assert!(CompartmentModelSpec::new(1, vec![1.0, 0.1], 1.0).is_err());
        let spec = CompartmentModelSpec::new(1, vec![1.0, 0.1], 0.0).unwrap();
        let input = InputFunction::Feng(FENG_STANDARD);
        assert!(compartment_forward(&spec, &input, &[1.0, 1.0]).is_err());
        assert!(compartment_forward(&spec, &input, &[-1.0, 1.0]).is_err());
    }

    fn pet_like_times() -> Vec<f64> {
        vec![0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 7.5, 10.0, 15.0, 25.0, 40.0]
    }

    #[test]
    fn fit_recovers_known_1tcm_rates() {
        let truth = CompartmentModelSpec::new(1, vec![0.5, 0.3], 0.0).unwrap();
        let input = InputFunction::Feng(FENG_STANDARD);
        let times = pet_like_times();
        let tac = compartment_forward(&truth, &input, &times).unwrap();
        let fit = lm_fit(&tac, &input, 1, 11, 8, 7).unwrap();
        for (f, t) in fit.rates.iter().zip(&truth.rates) {
            assert!((f - t).abs() / t < 0.02, "fit {f} vs truth {t}");
        }
        assert!(fit.rss < 1e-10);
    }

    #[test]
    fn fit_of_zero_tac_is_degenerate() {
        let tac = Tac::new(pet_like_times(), vec![0.0; 11]).unwrap();
        let input = InputFunction::Feng(FENG_STANDARD);
        let fit = lm_fit(&tac, &input, 2, 11, 4, 1).unwrap();
        assert!(fit.rates.iter().all(|&r| r == 0.0));
        assert_eq!(fit.rss, 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn lm_trace_is_monotone_nonincreasing() {
        let truth = CompartmentModelSpec::new(2, vec![0.7, 0.4, 0.1, 0.05], 0.0).unwrap();
        let input = InputFunction::Feng(FENG_STANDARD);
        let times = pet_like_times();
        let tac = compartment_forward(&truth, &input, &times).unwrap();
        let theta0 = vec![0.1f64.ln(); 4];
        let out = lm_single_start(&theta0, &tac.values, &times, &input, 2).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(out.rss <= out.trace[0]);
    }

    #[test]
    fn extrapolation_consistent_within_fit_window() {
        let truth = CompartmentModelSpec::new(1, vec![0.4, 0.2], 0.0).unwrap();
        let input = InputFunction::Feng(FENG_STANDARD);
        let times = pet_like_times();
        let tac = compartment_forward(&truth, &input, &times).unwrap();
        let fit = FitResult {
            model: "1TCM".into(),
            rates: truth.rates.clone(),
            vb: 0.0,
            rss: 0.0,
            converged: true,
            n_iters: 0,
            multistart_index: 0,
        };
        let ext = ctm_extrapolate(&fit, &input, &times).unwrap();
        assert!(!ext.constant_tail);
        for (a, b) in ext.tac.values.iter().zip(&tac.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_then_extrapolate_matches_late_frames() {
        // generate 15 frames, fit on the first 11, check the last 4 within 1%
        let truth = CompartmentModelSpec::new(1, vec![0.5, 0.25], 0.0).unwrap();
        let input = InputFunction::Feng(FENG_STANDARD);
        let mut times = pet_like_times();
        times.extend([55.0, 70.0, 80.0, 90.0]);
        let tac = compartment_forward(&truth, &input, &times).unwrap();
        let fit = lm_fit(&tac, &input, 1, 11, 8, 3).unwrap();
        let ext = ctm_extrapolate(&fit, &input, &times[11..]).unwrap();
        for (a, b) in ext.tac.values.iter().zip(&tac.values[11..]) {
            assert!((a - b).abs() / b.abs() < 0.01, "{a} vs {b}");
        }
    }

    #[test]
    fn sampled_input_tail_extension() {
        // decaying sampled input, extrapolation target beyond its support
        let times: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let values: Vec<f64> = times.iter().map(|t| 5.0 * (-0.2 * t).exp()).collect();
        let input = InputFunction::Sampled(Tac::new(times, values).unwrap());
        let fit = FitResult {
            model: "1TCM".into(),
            rates: vec![0.0, 0.0],
            vb: 0.5,
            rss: 0.0,
            converged: true,
            n_iters: 0,
            multistart_index: 0,
        };
        // K1=0 -> C_T = vb * Cp; the tail fit should track the exponential
        let ext = ctm_extrapolate(&fit, &input, &[12.0, 15.0]).unwrap();
        assert!(!ext.constant_tail);
        for (v, t) in ext.tac.values.iter().zip([12.0, 15.0]) {
            let expect = 0.5 * 5.0 * (-0.2f64 * t).exp();
            assert!((v - expect).abs() / expect < 0.02, "{v} vs {expect}");
        }
        // too few positive samples for a tail fit -> constant fallback
        let flat = InputFunction::Sampled(
            Tac::new(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap(),
        );
        let ext2 = ctm_extrapolate(&fit, &flat, &[3.0]).unwrap();
        assert!(ext2.constant_tail);
    }

    #[test]
    fn fit_json_roundtrip() {
        let fit = FitResult {
            model: "2TCM".into(),
            rates: vec![0.5, 0.3, 0.1, 0.05],
            vb: 0.0,
            rss: 1.25e-4,
            converged: true,
            n_iters: 42,
            multistart_index: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        save_fit(&fit, &path).unwrap();
        let loaded = load_fit(&path).unwrap();
        assert_eq!(loaded.model, "2TCM");
        assert_eq!(loaded.rates, fit.rates);
        assert_eq!(loaded.rss, fit.rss);
        assert_eq!(loaded.multistart_index, 3);
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["model", "rates", "vb", "rss", "converged", "n_iters", "multistart_index"] {
            assert!(text.contains(key));
        }
    }
}
