//! Adam optimization with global-norm gradient clipping, the full-batch
//! training loop over a temporal train/test split, and autoregressive
//! rollout prediction.
//!
//! Gradients are full-batch (all s-1 transitions per iteration) and the loop
//! runs a fixed iteration budget; both keep training deterministic for a
//! fixed seed.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Axis;

use crate::autodiff::{loss_and_gradients, ParamGradients};
use crate::data::{extract_roi_tac, FrameStack, RoiMask};
use crate::error::{Error, Result};
use crate::rdnet::{forward_transition, init_params, NetworkConfig, NetworkParams};
use crate::spectral::SpectralPlan;

/// Adam moment accumulators, shapes matching the parameter arrays.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamGradients,
    pub v: ParamGradients,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            m: ParamGradients::zeros_like(params),
            v: ParamGradients::zeros_like(params),
            step_count: 0,
        }
    }
}

/// Optimization settings. `split` counts frames: training sees frames
/// 1..split and nothing later.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub split: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            split: 11,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            max_iters: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, nt: usize) -> Result<()> {
        if self.split < 2 || self.split > nt {
            return Err(Error::Argument(format!(
                "split must satisfy 2 <= split <= nt ({nt}), got {}",
                self.split
            )));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Argument("lr, eps, clip_norm must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Argument(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        Ok(())
    }
}

/// One completed optimizer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss: f64,
    /// Global gradient L2 norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Scale all gradients by `clip_norm / norm` when the global L2 norm exceeds
/// the threshold. Returns the pre-clip norm and whether clipping fired.
pub fn clip_gradients(grads: &mut ParamGradients, clip_norm: f64) -> (f64, bool) {
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
        (norm, true)
    } else {
        (norm, false)
    }
}

fn adam_update_slice(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &TrainConfig,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// One Adam update in place: moment update, bias correction, parameter step.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &ParamGradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    macro_rules! upd {
        ($field:ident) => {
            adam_update_slice(
                params.$field.as_slice_mut().unwrap(),
                grads.$field.as_slice().unwrap(),
                state.m.$field.as_slice_mut().unwrap(),
                state.v.$field.as_slice_mut().unwrap(),
                cfg,
                bc1,
                bc2,
            )
        };
    }
    upd!(w_open);
    upd!(b_open);
    upd!(rho);
    upd!(k1);
    upd!(k2);
    upd!(b_t);
    upd!(w_t);
    upd!(w_close);
    let mut bc = [params.b_close];
    adam_update_slice(
        &mut bc,
        &[grads.b_close],
        std::slice::from_mut(&mut state.m.b_close),
        std::slice::from_mut(&mut state.v.b_close),
        cfg,
        bc1,
        bc2,
    );
    params.b_close = bc[0];
}

/// Full-batch training from a seeded initialization. Each iteration computes
/// the loss and gradients over frames 1..split, clips, and applies Adam.
/// Aborts with a diagnostic if the loss turns non-finite.
pub fn train(
    stack: &FrameStack,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
) -> Result<(NetworkParams, TrainReport)> {
    net_config.validate()?;
    train_config.validate(stack.times.len())?;
    let plan = SpectralPlan::new(stack.nx, stack.ny);
    let mut params = init_params(net_config, train_config.seed);
    let mut state = AdamState::new(&params);
    let mut report = TrainReport::default();
    for iter in 1..=train_config.max_iters {
        let (loss, mut grads) =
            loss_and_gradients(stack, train_config.split, &params, net_config, &plan)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at iteration {iter}; reduce lr or clip_norm"
            )));
        }
        let (norm, clipped) = clip_gradients(&mut grads, train_config.clip_norm);
        adam_step(&mut params, &grads, &mut state, train_config);
        report.records.push(TrainRecord { iter, loss, grad_norm: norm, clipped });
    }
    Ok((params, report))
}

/// Predict frames after the split autoregressively: the first prediction
/// steps from the observed frame `split`, each later one from the previous
/// prediction, using the true frame times. Returns a stack whose times are
/// `stack.times[split..]`.
pub fn rollout_predict(
    stack: &FrameStack,
    split: usize,
    params: &NetworkParams,
    net_config: &NetworkConfig,
    plan: &SpectralPlan,
) -> Result<FrameStack> {
    let nt = stack.times.len();
    if split < 2 || split >= nt {
        return Err(Error::Argument(format!(
            "rollout needs 2 <= split < nt ({nt}), got {split}"
        )));
    }
    let n_pred = nt - split;
    let mut out = ndarray::Array3::zeros((n_pred, stack.ny, stack.nx));
    let mut current = stack.data.index_axis(Axis(0), split - 1).to_owned();
    for (k, j) in (split..nt).enumerate() {
        let pred = forward_transition(
            &current.view(),
            stack.times[j - 1],
            stack.times[j],
            params,
            net_config,
            plan,
        )?;
        out.index_axis_mut(Axis(0), k).assign(&pred);
        current = pred;
    }
    FrameStack::new(stack.nx, stack.ny, stack.times[split..].to_vec(), out)
}

/// Implausibility of a rollout over the regions of interest: one-step
/// training often yields models whose autoregressive predictions explode,
/// go negative, or grow where the data decays, and which seed wins that
/// lottery is not predictable from the training loss. Score the rollout by
/// how far each region's mean frame-to-frame ratio (chained from the last
/// observed frame) strays outside a broad physically plausible band;
/// finite, gently decaying rollouts score zero. Uses no frames past
/// `split`.
fn rollout_implausibility(
    stack: &FrameStack,
    pred: &FrameStack,
    split: usize,
    rois: &[RoiMask],
) -> f64 {
    const RATIO_LO: f64 = 0.5;
    const RATIO_HI: f64 = 1.05;
    let mut score = 0.0;
    for roi in rois {
        let obs = match extract_roi_tac(stack, roi) {
            Ok(t) => t,
            Err(_) => return f64::INFINITY,
        };
        let tac = match extract_roi_tac(pred, roi) {
            Ok(t) => t,
            Err(_) => return f64::INFINITY,
        };
        let mut prev = obs.values[split - 1];
        for &v in &tac.values {
            if !v.is_finite() || prev.abs() < 1e-300 {
                return f64::INFINITY;
            }
            let q = v / prev;
            score += (RATIO_LO - q).max(0.0).powi(2) + (q - RATIO_HI).max(0.0).powi(2);
            prev = v;
        }
    }
    score
}

/// Run [`train`] for each candidate seed in order and keep the model whose
/// rollout over the post-split times looks most plausible on the given
/// regions of interest (see [`rollout_implausibility`]); a near-zero score
/// short-circuits the search. Ties are broken by final training loss, then
/// by candidate order. Only frames before `split`, the (a priori known)
/// frame times, and the region geometry are consulted, so this is pure
/// training-side model selection.
pub fn train_with_restarts(
    stack: &FrameStack,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
    rois: &[RoiMask],
) -> Result<(NetworkParams, TrainReport, u64)> {
    if seeds.is_empty() {
        return Err(Error::Argument("need at least one candidate seed".into()));
    }
    if rois.is_empty() {
        return Err(Error::Argument("need at least one region for model selection".into()));
    }
    const ACCEPT: f64 = 0.01;
    let plan = SpectralPlan::new(stack.nx, stack.ny);
    let mut best: Option<(f64, f64, NetworkParams, TrainReport, u64)> = None;
    for &seed in seeds {
        let tc = TrainConfig { seed, ..train_config.clone() };
        let (params, report) = match train(stack, net_config, &tc) {
            Ok(x) => x,
            Err(Error::Numerical(_)) => continue, // diverged candidate
            Err(e) => return Err(e),
        };
        let score = match rollout_predict(stack, train_config.split, &params, net_config, &plan)
        {
            Ok(pred) => rollout_implausibility(stack, &pred, train_config.split, rois),
            Err(_) => f64::INFINITY,
        };
        let loss = report.final_loss().unwrap_or(f64::INFINITY);
        let better = match &best {
            None => true,
            Some((bs, bl, ..)) => score < *bs || (score == *bs && loss < *bl),
        };
        if better {
            let accept = score < ACCEPT;
            best = Some((score, loss, params, report, seed));
            if accept {
                break;
            }
        }
    }
    match best {
        Some((_, _, params, report, seed)) => Ok((params, report, seed)),
        None => Err(Error::Numerical(
            "every candidate seed diverged during training".into(),
        )),
    }
}

/// Training log CSV with columns `iter,loss,grad_norm,clipped`.
pub fn write_train_log(report: &TrainReport, path: &Path) -> Result<()> {
    let mut buf = String::from("iter,loss,grad_norm,clipped\n");
    for r in &report.records {
        buf.push_str(&format!("{},{},{},{}\n", r.iter, r.loss, r.grad_norm, r.clipped));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}
