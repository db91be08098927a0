//! The reaction-diffusion network forward pass: an affine opening embed,
//! shared-parameter IMEX steps combining learned per-channel diffusion with
//! a two-layer channel-mixing reaction MLP and a time embedding, and an
//! affine closing projection back to one channel.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{implicit_diffusion_step, SpectralPlan};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigma(x) (1 + x (1 - sigma(x)))
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Embedded species/channel count c.
    pub channels: usize,
    /// IMEX steps per frame transition.
    pub internal_steps: usize,
    /// Width of the time-embedding hidden layer.
    pub time_dim: usize,
    /// Scan duration in minutes; scalar times are normalized by this.
    pub scan_duration: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { channels: 8, internal_steps: 2, time_dim: 8, scan_duration: 90.0 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.internal_steps == 0 || self.time_dim == 0 {
            return Err(Error::Argument("network config fields must be >= 1".into()));
        }
        if !(self.scan_duration > 0.0) {
            return Err(Error::Argument("scan_duration must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable quantities. Diffusion coefficients are kept positive through
/// `kappa_i = softplus(rho_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
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

impl NetworkParams {
    pub fn kappas(&self) -> Array1<f64> {
        self.rho.mapv(softplus)
    }

    pub fn channels(&self) -> usize {
        self.w_open.len()
    }
}

/// Pixel-wise affine lift of a single frame to c channels.
pub fn open_embed(frame: &ArrayView2<f64>, params: &NetworkParams) -> Array3<f64> {
    let (ny, nx) = frame.dim();
    let c = params.channels();
    let mut u = Array3::zeros((c, ny, nx));
    for i in 0..c {
        let (w, b) = (params.w_open[i], params.b_open[i]);
        u.index_axis_mut(Axis(0), i).assign(&frame.mapv(|v| w * v + b));
    }
    u
}

/// `t_e = W_t silu(t_hat b_t)` with `t_hat = t / scan_duration`.
pub fn time_embedding(t: f64, params: &NetworkParams, config: &NetworkConfig) -> Array1<f64> {
    let that = t / config.scan_duration;
    let hidden = params.b_t.mapv(|b| silu(that * b));
    params.w_t.dot(&hidden)
}

/// Two-layer channel-mixing MLP, `R = K2 silu(K1 u + t_e)`, pointwise in space.
pub fn reaction_apply(
    u: &Array3<f64>,
    t: f64,
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Array3<f64> {
    let (c, ny, nx) = u.dim();
    let te = time_embedding(t, params, config);
    let flat = u.view().into_shape((c, ny * nx)).expect("channel state is contiguous");
    let mut z = params.k1.dot(&flat);
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| silu(v + te[i]));
    }
    let r = params.k2.dot(&z);
    r.into_shape((c, ny, nx)).expect("shape preserved")
}

/// One IMEX step: implicit per-channel diffusion, then an explicit reaction
/// update `u + h R(u~, t)`.
pub fn imex_step(
    u: &Array3<f64>,
    t: f64,
    h: f64,
    params: &NetworkParams,
    config: &NetworkConfig,
    plan: &SpectralPlan,
) -> Result<Array3<f64>> {
    let kappas = params.kappas();
    let mut diffused = Array3::zeros(u.raw_dim());
    for (i, channel) in u.axis_iter(Axis(0)).enumerate() {
        let d = implicit_diffusion_step(&channel, kappas[i], h, plan)?;
        diffused.index_axis_mut(Axis(0), i).assign(&d);
    }
    let r = reaction_apply(&diffused, t, params, config);
    Ok(diffused + h * &r)
}

/// Map frame j at time `t_j` to a prediction at `t_j1` through L shared-
/// parameter IMEX steps, then close back to one channel.
pub fn forward_transition(
    frame: &ArrayView2<f64>,
    t_j: f64,
    t_j1: f64,
    params: &NetworkParams,
    config: &NetworkConfig,
    plan: &SpectralPlan,
) -> Result<Array2<f64>> {
    if t_j1 <= t_j {
        return Err(Error::Argument(format!("frame times must increase: {t_j} -> {t_j1}")));
    }
    let steps = config.internal_steps;
    let h = (t_j1 - t_j) / steps as f64;
    let mut u = open_embed(frame, params);
    for k in 0..steps {
        u = imex_step(&u, t_j + k as f64 * h, h, params, config, plan)?;
    }
    Ok(close_project(&u, params))
}

/// Pixel-wise affine projection of the channel state to a single channel.
pub fn close_project(u: &Array3<f64>, params: &NetworkParams) -> Array2<f64> {
    let (_, ny, nx) = u.dim();
    let mut out = Array2::from_elem((ny, nx), params.b_close);
    for (i, channel) in u.axis_iter(Axis(0)).enumerate() {
        out.scaled_add(params.w_close[i], &channel);
    }
    out
}

/// Seeded initialization: weights zero-mean normal with scale 1/sqrt(fan_in),
/// biases zero, rho set so every initial kappa equals 0.01.
pub fn init_params(config: &NetworkConfig, seed: u64) -> NetworkParams {
    let c = config.channels;
    let dt = config.time_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |fan_in: usize, n: usize| -> Vec<f64> {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    let w_open = Array1::from(draw(1, c));
    let k1 = Array2::from_shape_vec((c, c), draw(c, c * c)).unwrap();
    let k2 = Array2::from_shape_vec((c, c), draw(c, c * c)).unwrap();
    let w_t = Array2::from_shape_vec((c, dt), draw(dt, c * dt)).unwrap();
    let w_close = Array1::from(draw(c, c));
    // softplus(rho) = 0.01
    let rho0 = (0.01f64.exp() - 1.0).ln();
    NetworkParams {
        w_open,
        b_open: Array1::zeros(c),
        rho: Array1::from_elem(c, rho0),
        k1,
        k2,
        b_t: Array1::zeros(dt),
        w_t,
        w_close,
        b_close: 0.0,
    }
}

const MODEL_MAGIC: &[u8; 4] = b"DPRD";
const MODEL_VERSION: u32 = 1;

/// `.dprd` model container: magic | version | length-prefixed JSON config |
/// parameter arrays as f64 little-endian in a fixed order.
pub fn save_model(params: &NetworkParams, config: &NetworkConfig, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in param_iter(params) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(NetworkParams, NetworkConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::format(path, "bad magic, expected \"DPRD\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + json_len {
        return Err(Error::format(path, "truncated config block"));
    }
    let config: NetworkConfig = serde_json::from_slice(&bytes[12..12 + json_len])
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    config.validate()?;
    let (c, dt) = (config.channels, config.time_dim);
    let counts = [c, c, c, c * c, c * c, dt, c * dt, c, 1];
    let total: usize = counts.iter().sum();
    let data = &bytes[12 + json_len..];
    if data.len() != 8 * total {
        return Err(Error::format(
            path,
            format!("expected {} parameter bytes, found {}", 8 * total, data.len()),
        ));
    }
    let mut vals = data
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { (&mut vals).take(n).collect() };
    let params = NetworkParams {
        w_open: Array1::from(take(c)),
        b_open: Array1::from(take(c)),
        rho: Array1::from(take(c)),
        k1: Array2::from_shape_vec((c, c), take(c * c)).unwrap(),
        k2: Array2::from_shape_vec((c, c), take(c * c)).unwrap(),
        b_t: Array1::from(take(dt)),
        w_t: Array2::from_shape_vec((c, dt), take(c * dt)).unwrap(),
        w_close: Array1::from(take(c)),
        b_close: take(1)[0],
    };
    Ok((params, config))
}

fn param_iter(p: &NetworkParams) -> impl Iterator<Item = f64> + '_ {
    p.w_open
        .iter()
        .chain(p.b_open.iter())
        .chain(p.rho.iter())
        .chain(p.k1.iter())
        .chain(p.k2.iter())
        .chain(p.b_t.iter())
        .chain(p.w_t.iter())
        .chain(p.w_close.iter())
        .copied()
        .chain(std::iter::once(p.b_close))
}

/// Params realizing (numerically) the identity transition: channel 0 carries
/// the frame, diffusion is negligible, the reaction is dead.
#[doc(hidden)]
pub fn identity_params(config: &NetworkConfig) -> NetworkParams {
    let c = config.channels;
    let mut w_open = Array1::zeros(c);
    w_open[0] = 1.0;
    let mut w_close = Array1::zeros(c);
    w_close[0] = 1.0;
    NetworkParams {
        w_open,
        b_open: Array1::zeros(c),
        rho: Array1::from_elem(c, -60.0), // softplus(-60) ~ 1e-26
        k1: Array2::zeros((c, c)),
        k2: Array2::zeros((c, c)),
        b_t: Array1::zeros(config.time_dim),
        w_t: Array2::zeros((c, config.time_dim)),
        w_close,
        b_close: 0.0,
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Random params for gradient checks and property tests.
    pub fn random_params(config: &NetworkConfig, seed: u64) -> NetworkParams {
        let c = config.channels;
        let dt = config.time_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect() };
        NetworkParams {
            w_open: Array1::from(draw(c)),
            b_open: Array1::from(draw(c)),
            rho: Array1::from(draw(c)),
            k1: Array2::from_shape_vec((c, c), draw(c * c)).unwrap(),
            k2: Array2::from_shape_vec((c, c), draw(c * c)).unwrap(),
            b_t: Array1::from(draw(dt)),
            w_t: Array2::from_shape_vec((c, dt), draw(c * dt)).unwrap(),
            w_close: Array1::from(draw(c)),
            b_close: draw(1)[0],
        }
    }
}
