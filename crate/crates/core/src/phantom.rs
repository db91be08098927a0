//! Synthetic ground-truth generators: a two-species reaction-diffusion
//! phantom with known dynamics, a kinetic phantom built from per-pixel
//! compartment kinetics with blur-induced effective diffusion, and a
//! Poisson-like noise model. Truth parameters are returned alongside the
//! data so recovery tests need not trust the generator twice.

use ndarray::{Array2, Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compartment::{compartment_forward, CompartmentModelSpec, InputFunction};
use crate::data::FrameStack;
use crate::error::{Error, Result};
use crate::spectral::{implicit_diffusion_step, SpectralPlan};

/// Reaction-diffusion phantom dynamics: species u with logistic growth
/// grazed by v, `r_u = u(1-u) - gamma u v`, `r_v = delta u v - mu v`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdParams {
    pub kappa_u: f64,
    pub kappa_v: f64,
    pub gamma: f64,
    pub delta: f64,
    pub mu: f64,
}

impl Default for RdParams {
    fn default() -> Self {
        RdParams { kappa_u: 0.05, kappa_v: 0.1, gamma: 1.2, delta: 1.0, mu: 0.4 }
    }
}

/// Kinetic phantom: smooth 1TCM rate maps driven by a Feng input, then
/// Gaussian blur and noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticParams {
    pub k1_range: (f64, f64),
    pub k2_range: (f64, f64),
    /// Spectral smoothing strength of the rate maps; larger means smoother.
    pub smoothness: f64,
    /// Gaussian blur width in pixels applied to every frame.
    pub blur_sigma: f64,
    /// Noise scale eta of [`add_noise`].
    pub eta: f64,
    pub feng: [f64; 6],
}

impl Default for KineticParams {
    fn default() -> Self {
        KineticParams {
            k1_range: (0.1, 0.8),
            k2_range: (0.05, 0.5),
            smoothness: 2.0,
            blur_sigma: 1.5,
            eta: 0.02,
            feng: crate::compartment::FENG_STANDARD,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PhantomKind {
    Rd(RdParams),
    Kinetic(KineticParams),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub nx: usize,
    pub ny: usize,
    /// Frame times in minutes, strictly increasing, >= 0.
    pub times: Vec<f64>,
    pub seed: u64,
    #[serde(flatten)]
    pub kind: PhantomKind,
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 {
            return Err(Error::Argument(format!(
                "phantom grid must be at least 8x8, got {}x{}",
                self.nx, self.ny
            )));
        }
        if self.times.len() < 6 {
            return Err(Error::Argument(format!(
                "phantom needs at least 6 frames, got {}",
                self.times.len()
            )));
        }
        if self.times[0] < 0.0 || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument("frame times must be strictly increasing, >= 0".into()));
        }
        match &self.kind {
            PhantomKind::Rd(p) => {
                if p.kappa_u < 0.0 || p.kappa_v < 0.0 {
                    return Err(Error::Argument("diffusivities must be >= 0".into()));
                }
            }
            PhantomKind::Kinetic(p) => {
                if p.blur_sigma < 0.0 || p.eta < 0.0 {
                    return Err(Error::Argument("blur_sigma and eta must be >= 0".into()));
                }
                for (name, (lo, hi)) in [("k1_range", p.k1_range), ("k2_range", p.k2_range)] {
                    if !(0.0 <= lo && lo <= hi) {
                        return Err(Error::Argument(format!("{name} must satisfy 0 <= lo <= hi")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Dynamic-PET-like schedule: 8 short early frames and 7 long late ones over
/// 90 minutes.
pub fn default_frame_times() -> Vec<f64> {
    vec![
        0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 7.5, 10.0, 20.0, 30.0, 45.0, 60.0, 75.0, 90.0,
    ]
}

/// Ground truth accompanying a generated phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PhantomTruth {
    Rd(RdParams),
    Kinetic {
        nx: usize,
        ny: usize,
        /// Row-major K1 and k2 maps.
        k1_map: Vec<f64>,
        k2_map: Vec<f64>,
        feng: [f64; 6],
        blur_sigma: f64,
        eta: f64,
    },
}

/// Seeded band-limited random field scaled into [0, 1]: white noise filtered
/// by `exp(-smoothness * lambda)` in the cosine basis.
fn smooth_field(
    plan: &SpectralPlan,
    smoothness: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let (ny, nx) = (plan.ny, plan.nx);
    let white = Array2::from_shape_fn((ny, nx), |_| rng.sample::<f64, _>(StandardNormal));
    let mut coeffs = plan.dct2_forward(&white.view())?;
    for (idx, lam) in plan.eigs.indexed_iter() {
        coeffs[idx] *= (-smoothness * lam).exp();
    }
    let field = plan.dct2_inverse(&coeffs.view())?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in field.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        return Ok(Array2::from_elem((ny, nx), 0.5));
    }
    Ok(field.mapv(|v| (v - lo) / (hi - lo)))
}

/// Simulate the two-species system with fine IMEX steps (<= 0.01 min) from a
/// seeded smooth initial condition; species u is recorded at the frame times.
pub fn generate_rd_phantom(config: &PhantomConfig) -> Result<(FrameStack, PhantomTruth)> {
    config.validate()?;
    let PhantomKind::Rd(params) = &config.kind else {
        return Err(Error::Argument("config is not an rd phantom".into()));
    };
    let plan = SpectralPlan::new(config.nx, config.ny);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // u starts low so logistic growth acts; v starts lower still
    let mut u = smooth_field(&plan, 2.0, &mut rng)?.mapv(|v| 0.05 + 0.25 * v);
    let mut v = smooth_field(&plan, 2.0, &mut rng)?.mapv(|w| 0.05 + 0.15 * w);

    let mut frames = Array3::zeros((config.times.len(), config.ny, config.nx));
    let mut t = 0.0;
    const MAX_STEP: f64 = 0.01;
    for (j, &target) in config.times.iter().enumerate() {
        let span = target - t;
        if span > 0.0 {
            let n_steps = (span / MAX_STEP).ceil() as usize;
            let h = span / n_steps as f64;
            for _ in 0..n_steps {
                let ut = implicit_diffusion_step(&u.view(), params.kappa_u, h, &plan)?;
                let vt = implicit_diffusion_step(&v.view(), params.kappa_v, h, &plan)?;
                ndarray::Zip::from(&mut u).and(&mut v).and(&ut).and(&vt).for_each(
                    |un, vn, &a, &b| {
                        *un = a + h * (a * (1.0 - a) - params.gamma * a * b);
                        *vn = b + h * (params.delta * a * b - params.mu * b);
                    },
                );
            }
            t = target;
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "reaction-diffusion phantom diverged by t = {target} min"
            )));
        }
        frames.index_axis_mut(Axis(0), j).assign(&u);
    }
    let stack = FrameStack::new(config.nx, config.ny, config.times.clone(), frames)?;
    Ok((stack, PhantomTruth::Rd(params.clone())))
}

/// Per-pixel 1TCM kinetics from smooth seeded rate maps, then per-frame
/// Gaussian blur and noise.
pub fn generate_kinetic_phantom(config: &PhantomConfig) -> Result<(FrameStack, PhantomTruth)> {
    config.validate()?;
    let PhantomKind::Kinetic(params) = &config.kind else {
        return Err(Error::Argument("config is not a kinetic phantom".into()));
    };
    let plan = SpectralPlan::new(config.nx, config.ny);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale_into = |f: Array2<f64>, (lo, hi): (f64, f64)| f.mapv(|v| lo + (hi - lo) * v);
    let k1_map = scale_into(smooth_field(&plan, params.smoothness, &mut rng)?, params.k1_range);
    let k2_map = scale_into(smooth_field(&plan, params.smoothness, &mut rng)?, params.k2_range);

    let input = InputFunction::Feng(params.feng);
    let mut frames = Array3::zeros((config.times.len(), config.ny, config.nx));
    for y in 0..config.ny {
        for x in 0..config.nx {
            let spec = CompartmentModelSpec::new(
                1,
                vec![k1_map[(y, x)], k2_map[(y, x)]],
                0.0,
            )?;
            let tac = compartment_forward(&spec, &input, &config.times)?;
            for (j, &val) in tac.values.iter().enumerate() {
                frames[(j, y, x)] = val;
            }
        }
    }
    if params.blur_sigma > 0.0 {
        for mut frame in frames.axis_iter_mut(Axis(0)) {
            let blurred = gaussian_blur(&frame.view(), params.blur_sigma);
            frame.assign(&blurred);
        }
    }
    let stack = FrameStack::new(config.nx, config.ny, config.times.clone(), frames)?;
    let stack = if params.eta > 0.0 {
        add_noise(&stack, params.eta, config.seed.wrapping_add(1))?
    } else {
        stack
    };
    let truth = PhantomTruth::Kinetic {
        nx: config.nx,
        ny: config.ny,
        k1_map: k1_map.iter().copied().collect(),
        k2_map: k2_map.iter().copied().collect(),
        feng: params.feng,
        blur_sigma: params.blur_sigma,
        eta: params.eta,
    };
    Ok((stack, truth))
}

/// Separable Gaussian blur, kernel truncated at radius 3 sigma and
/// normalized, reflective boundaries. Preserves the frame sum.
pub fn gaussian_blur(frame: &ndarray::ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return frame.to_owned();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for w in kernel.iter_mut() {
        *w /= total;
    }
    let (ny, nx) = frame.dim();
    let reflect = |i: isize, n: usize| -> usize {
        // half-sample mirror: -1 -> 0, -2 -> 1, n -> n-1, ...
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = Array2::zeros((ny, nx));
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - radius, nx);
                acc += w * frame[(y, sx)];
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((ny, nx));
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - radius, ny);
                acc += w * tmp[(sy, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Scaled Poisson-like noise: `v <- max(0, v + eta sqrt(max(v, 0)) z)` with
/// z standard normal, seeded.
pub fn add_noise(stack: &FrameStack, eta: f64, seed: u64) -> Result<FrameStack> {
    if eta < 0.0 {
        return Err(Error::Argument(format!("eta must be >= 0, got {eta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = stack.data.mapv(|v| {
        let z: f64 = rng.sample(StandardNormal);
        (v + eta * v.max(0.0).sqrt() * z).max(0.0)
    });
    FrameStack::new(stack.nx, stack.ny, stack.times.clone(), data)
}
