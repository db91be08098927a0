//! Reverse-mode gradients of the training loss through the full transition:
//! opening embed, L IMEX steps (with the implicit-solve adjoint), closing
//! projection. The architecture is static, so the backward pass is written
//! directly per block instead of through a general tape.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use crate::data::FrameStack;
use crate::error::{Error, Result};
use crate::rdnet::{sigmoid, silu, silu_prime, NetworkConfig, NetworkParams};
use crate::spectral::{diffusion_step_vjp, implicit_diffusion_step, SpectralPlan};

/// One gradient array per parameter array, shapes matching [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub w_open: Array1<f64>,
    pub b_open: Array1<f64>,
    pub rho: Array1<f64>,
    pub k1: Array2<f64>,
    pub k2: Array2<f64>,
    pub b_t: Array1<f64>,
    pub w_t: Array2<f64>,
    pub w_close: Array1<f64>,
    pub b_close: f64,
}

impl ParamGradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        ParamGradients {
            w_open: Array1::zeros(params.w_open.raw_dim()),
            b_open: Array1::zeros(params.b_open.raw_dim()),
            rho: Array1::zeros(params.rho.raw_dim()),
            k1: Array2::zeros(params.k1.raw_dim()),
            k2: Array2::zeros(params.k2.raw_dim()),
            b_t: Array1::zeros(params.b_t.raw_dim()),
            w_t: Array2::zeros(params.w_t.raw_dim()),
            w_close: Array1::zeros(params.w_close.raw_dim()),
            b_close: 0.0,
        }
    }

    pub fn accumulate(&mut self, other: &ParamGradients) {
        self.w_open += &other.w_open;
        self.b_open += &other.b_open;
        self.rho += &other.rho;
        self.k1 += &other.k1;
        self.k2 += &other.k2;
        self.b_t += &other.b_t;
        self.w_t += &other.w_t;
        self.w_close += &other.w_close;
        self.b_close += other.b_close;
    }

    pub fn scale(&mut self, factor: f64) {
        self.w_open *= factor;
        self.b_open *= factor;
        self.rho *= factor;
        self.k1 *= factor;
        self.k2 *= factor;
        self.b_t *= factor;
        self.w_t *= factor;
        self.w_close *= factor;
        self.b_close *= factor;
    }

    /// All entries in a fixed order, for norms and finiteness checks.
    pub fn flat_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_open
            .iter()
            .chain(self.b_open.iter())
            .chain(self.rho.iter())
            .chain(self.k1.iter())
            .chain(self.k2.iter())
            .chain(self.b_t.iter())
            .chain(self.w_t.iter())
            .chain(self.w_close.iter())
            .copied()
            .chain(std::iter::once(self.b_close))
    }

    pub fn global_norm(&self) -> f64 {
        self.flat_iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.flat_iter().all(f64::is_finite)
    }
}

/// Intermediates of one IMEX step needed by the backward pass.
pub struct StepRecord {
    /// Step time fed to the reaction.
    pub t: f64,
    /// State entering the step (before diffusion).
    pub u_pre: Array3<f64>,
    /// Post-diffusion state.
    pub u_tilde: Array3<f64>,
    /// Reaction pre-activations `K1 u~ + t_e`, flattened to (c, ny*nx).
    pub z: Array2<f64>,
}

/// Everything recorded during one frame transition.
pub struct TransitionTape {
    pub frame: Array2<f64>,
    pub h: f64,
    pub steps: Vec<StepRecord>,
    /// Channel state after the last step, input to the closing projection.
    pub u_final: Array3<f64>,
}

/// [`crate::rdnet::forward_transition`] with intermediates recorded; the
/// prediction is computed by the same operation sequence and is bit-identical.
pub fn forward_with_tape(
    frame: &ArrayView2<f64>,
    t_j: f64,
    t_j1: f64,
    params: &NetworkParams,
    config: &NetworkConfig,
    plan: &SpectralPlan,
) -> Result<(Array2<f64>, TransitionTape)> {
    if t_j1 <= t_j {
        return Err(Error::Argument(format!("frame times must increase: {t_j} -> {t_j1}")));
    }
    let steps = config.internal_steps;
    let h = (t_j1 - t_j) / steps as f64;
    let kappas = params.kappas();
    let (ny, nx) = frame.dim();
    let c = params.channels();

    let mut u = crate::rdnet::open_embed(frame, params);
    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = t_j + k as f64 * h;
        let mut diffused = Array3::zeros(u.raw_dim());
        for (i, channel) in u.axis_iter(Axis(0)).enumerate() {
            let d = implicit_diffusion_step(&channel, kappas[i], h, plan)?;
            diffused.index_axis_mut(Axis(0), i).assign(&d);
        }
        let te = crate::rdnet::time_embedding(t, params, config);
        let flat = diffused.view().into_shape((c, ny * nx)).expect("contiguous");
        let mut z = params.k1.dot(&flat);
        for (i, mut row) in z.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v + te[i]);
        }
        let a = z.mapv(silu);
        let r = params
            .k2
            .dot(&a)
            .into_shape((c, ny, nx))
            .expect("shape preserved");
        let next = &diffused + &(h * &r);
        records.push(StepRecord { t, u_pre: u, u_tilde: diffused, z });
        u = next;
    }
    let pred = crate::rdnet::close_project(&u, params);
    let tape = TransitionTape { frame: frame.to_owned(), h, steps: records, u_final: u };
    Ok((pred, tape))
}

/// Pull `out_grad` back through the recorded transition. Returns the gradient
/// with respect to the input frame and all parameter gradients.
pub fn backward(
    tape: &TransitionTape,
    out_grad: &ArrayView2<f64>,
    params: &NetworkParams,
    config: &NetworkConfig,
    plan: &SpectralPlan,
) -> Result<(Array2<f64>, ParamGradients)> {
    let (ny, nx) = tape.frame.dim();
    if out_grad.dim() != (ny, nx) {
        return Err(Error::Shape(format!(
            "out_grad is {:?}, transition is ({ny}, {nx})",
            out_grad.dim()
        )));
    }
    let c = params.channels();
    let p = ny * nx;
    let h = tape.h;
    let kappas = params.kappas();
    let mut g = ParamGradients::zeros_like(params);

    // closing: pred = sum_i w_close[i] u_final[i] + b_close
    g.b_close = out_grad.sum();
    let mut gu = Array3::zeros((c, ny, nx));
    for i in 0..c {
        let chan = tape.u_final.index_axis(Axis(0), i);
        g.w_close[i] = out_grad.iter().zip(chan.iter()).map(|(a, b)| a * b).sum();
        gu.index_axis_mut(Axis(0), i)
            .assign(&out_grad.mapv(|v| v * params.w_close[i]));
    }

    for rec in tape.steps.iter().rev() {
        // u_next = u~ + h K2 silu(z), z = K1 u~_flat + t_e
        let gu_flat = gu.view().into_shape((c, p)).expect("contiguous");
        let a = rec.z.mapv(silu);
        g.k2.scaled_add(h, &gu_flat.dot(&a.t()));
        let ga = params.k2.t().dot(&gu_flat) * h;
        let gz = &ga * &rec.z.mapv(silu_prime);
        let ut_flat = rec.u_tilde.view().into_shape((c, p)).expect("contiguous");
        g.k1 += &gz.dot(&ut_flat.t());
        let gte = gz.sum_axis(Axis(1));

        // time embedding: t_e = W_t silu(t_hat b_t)
        let that = rec.t / config.scan_duration;
        let hidden_pre = params.b_t.mapv(|b| that * b);
        let hidden = hidden_pre.mapv(silu);
        for i in 0..c {
            g.w_t.row_mut(i).scaled_add(gte[i], &hidden);
        }
        let ghp = params.w_t.t().dot(&gte) * &hidden_pre.mapv(silu_prime);
        g.b_t.scaled_add(that, &ghp);

        // g wrt u~ combines the skip connection and the reaction input
        let gut = (&gu_flat + &params.k1.t().dot(&gz))
            .into_shape((c, ny, nx))
            .expect("shape preserved");

        // adjoint of the per-channel implicit diffusion solve
        let mut gu_pre = Array3::zeros((c, ny, nx));
        for i in 0..c {
            let (gch, gk) = diffusion_step_vjp(
                &rec.u_pre.index_axis(Axis(0), i),
                &gut.index_axis(Axis(0), i),
                kappas[i],
                h,
                plan,
            )?;
            gu_pre.index_axis_mut(Axis(0), i).assign(&gch);
            g.rho[i] += gk * sigmoid(params.rho[i]);
        }
        gu = gu_pre;
    }

    // opening: u0[i] = w_open[i] frame + b_open[i]
    let mut in_grad = Array2::zeros((ny, nx));
    for i in 0..c {
        let chan = gu.index_axis(Axis(0), i);
        g.w_open[i] = chan.iter().zip(tape.frame.iter()).map(|(a, b)| a * b).sum();
        g.b_open[i] = chan.sum();
        in_grad.scaled_add(params.w_open[i], &chan);
    }
    Ok((in_grad, g))
}

/// Normalized training loss over the first `s` frames and its gradients:
/// `loss = 1/(2 (s-1) nx ny) sum_j ||f(I_j) - I_{j+1}||^2` for j = 1..s-1.
///
/// The raw sum-of-squares is divided by transition and pixel counts so
/// learning rates transfer across grid sizes.
pub fn loss_and_gradients(
    stack: &FrameStack,
    s: usize,
    params: &NetworkParams,
    config: &NetworkConfig,
    plan: &SpectralPlan,
) -> Result<(f64, ParamGradients)> {
    let nt = stack.times.len();
    if s < 2 || s > nt {
        return Err(Error::Argument(format!(
            "split must satisfy 2 <= s <= nt ({nt}), got {s}"
        )));
    }
    let (ny, nx) = (stack.ny, stack.nx);
    let norm = 1.0 / ((s - 1) as f64 * (nx * ny) as f64);
    let mut loss = 0.0;
    let mut grads = ParamGradients::zeros_like(params);
    for j in 0..s - 1 {
        let frame = stack.data.index_axis(Axis(0), j);
        let target = stack.data.index_axis(Axis(0), j + 1);
        let (pred, tape) =
            forward_with_tape(&frame, stack.times[j], stack.times[j + 1], params, config, plan)?;
        let diff = &pred - &target;
        loss += 0.5 * norm * diff.iter().map(|v| v * v).sum::<f64>();
        let out_grad = diff.mapv(|v| v * norm);
        let (_, g) = backward(&tape, &out_grad.view(), params, config, plan)?;
        grads.accumulate(&g);
    }
    Ok((loss, grads))
}
