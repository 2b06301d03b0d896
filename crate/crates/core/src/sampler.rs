//! Masked inpainting sampler over a `frames x bins` latent grid.
//!
//! The sampler walks a Karras noise schedule from `sigma_max` down to zero
//! with a second-order (DPM-2 family) update. Frames before the target mask
//! boundary are held to the fixed content, re-noised to the current level
//! before every update and restored exactly at the end; only the frames at
//! or after the boundary are generated. Each level can be resampled: after
//! an update the sample is pushed back up to the level's noise and updated
//! again.
//!
//! Denoisers are any `g(z, sigma, cond) -> z0_hat`. [`GaussianDenoiser`] is
//! the exact posterior mean for Gaussian data and serves as the analytic
//! stand-in for a trained network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::stems::STEM_COUNT;
use crate::window::MaskBoundary;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("schedule needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("invalid schedule parameters: sigma_min={sigma_min}, sigma_max={sigma_max}, rho={rho}")]
    BadSchedule {
        sigma_min: f64,
        sigma_max: f64,
        rho: f64,
    },
    #[error("latent shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("resamples must be at least 1")]
    NoResamples,
    #[error("Gaussian denoiser needs sigma_data > 0, got {0}")]
    BadSigmaData(f64),
}

/// Frame-major latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    frames: usize,
    bins: usize,
    data: Vec<f32>,
}

impl Latent {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![0.0; frames * bins],
        }
    }

    pub fn filled(frames: usize, bins: usize, value: f32) -> Self {
        Self {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }

    pub fn from_vec(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self, SamplerError> {
        if data.len() != frames * bins {
            return Err(SamplerError::ShapeMismatch {
                expected: (frames, bins),
                got: (data.len() / bins.max(1), bins),
            });
        }
        Ok(Self { frames, bins, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    /// Values of frames `from..`.
    pub fn tail(&self, from: usize) -> &[f32] {
        &self.data[from * self.bins..]
    }

    /// Zeroes every frame the mask hides.
    pub fn apply_mask(&mut self, mask: MaskBoundary) {
        let start = (mask.boundary_frame as usize).min(self.frames) * self.bins;
        self.data[start..].fill(0.0);
    }
}

/// Strictly decreasing noise levels, `sigmas[0] = sigma_max`,
/// `sigmas[N-1] = sigma_min`. The sampler appends a final zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl NoiseSchedule {
    pub fn karras(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self, SamplerError> {
        if n < 2 {
            return Err(SamplerError::TooFewLevels(n));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && rho > 0.0 && sigma_max.is_finite()) {
            return Err(SamplerError::BadSchedule {
                sigma_min,
                sigma_max,
                rho,
            });
        }
        let lo = sigma_min.powf(1.0 / rho);
        let hi = sigma_max.powf(1.0 / rho);
        let mut sigmas: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                (hi + t * (lo - hi)).powf(rho)
            })
            .collect();
        sigmas[0] = sigma_max;
        sigmas[n - 1] = sigma_min;
        Ok(Self {
            sigmas,
            sigma_min,
            sigma_max,
            rho,
        })
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// What the denoiser is conditioned on besides the noisy target.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub instrument: [f32; STEM_COUNT],
    /// Context latent with the unobserved frames already zeroed.
    pub context: Latent,
}

pub trait Denoiser {
    /// Estimate of the clean latent given `z` at noise level `sigma`.
    fn denoise(&self, z: &Latent, sigma: f64, cond: &Conditioning) -> Latent;
}

impl<F> Denoiser for F
where
    F: Fn(&Latent, f64, &Conditioning) -> Latent,
{
    fn denoise(&self, z: &Latent, sigma: f64, cond: &Conditioning) -> Latent {
        self(z, sigma, cond)
    }
}

/// `E[z0 | z]` for `z0 ~ N(mean, sigma_data^2 I)` and `z = z0 + sigma * eps`.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    mean: Latent,
    sigma_data: f64,
}

impl GaussianDenoiser {
    pub fn new(mean: Latent, sigma_data: f64) -> Result<Self, SamplerError> {
        if !(sigma_data > 0.0) {
            return Err(SamplerError::BadSigmaData(sigma_data));
        }
        Ok(Self { mean, sigma_data })
    }

    pub fn mean(&self) -> &Latent {
        &self.mean
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, z: &Latent, sigma: f64, _cond: &Conditioning) -> Latent {
        let sd2 = self.sigma_data * self.sigma_data;
        let gain = if sigma.is_infinite() {
            0.0
        } else {
            (sd2 / (sd2 + sigma * sigma)) as f32
        };
        let data = z
            .data
            .iter()
            .zip(&self.mean.data)
            .map(|(&zi, &mi)| mi + gain * (zi - mi))
            .collect();
        Latent {
            frames: z.frames,
            bins: z.bins,
            data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InpaintSpec {
    /// Frames before the boundary are fixed; the rest are generated.
    pub target: MaskBoundary,
    /// Full-grid latent; only the fixed frames are read.
    pub fixed: Latent,
    /// Updates per noise level.
    pub resamples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solver {
    /// Midpoint update toward a reduced level followed by fresh noise, with
    /// the midpoint placed at `((sigma^(1/rho) + sigma_down^(1/rho)) / 2)^rho`.
    AncestralDpm2 { rho: f64 },
    /// Deterministic midpoint update; the midpoint is the geometric mean of
    /// consecutive levels.
    Dpm2,
}

impl Default for Solver {
    fn default() -> Self {
        Solver::AncestralDpm2 { rho: 1.0 }
    }
}

impl Solver {
    pub fn forward_passes(&self, schedule: &NoiseSchedule, resamples: usize) -> u32 {
        (2 * schedule.len() * resamples) as u32
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let v: f64 = rng.sample(StandardNormal);
    v as f32
}

struct Stepper<'a, D: Denoiser + ?Sized> {
    g: &'a D,
    cond: &'a Conditioning,
    shape: (usize, usize),
}

impl<D: Denoiser + ?Sized> Stepper<'_, D> {
    fn eval(&self, z: &Latent, sigma: f64) -> Result<Latent, SamplerError> {
        let out = self.g.denoise(z, sigma, self.cond);
        if out.shape() != self.shape {
            return Err(SamplerError::ShapeMismatch {
                expected: self.shape,
                got: out.shape(),
            });
        }
        Ok(out)
    }

    /// `x + h * (z - g(z, sigma)) / sigma`, with the coefficient formed in
    /// f64 so that full steps to zero cancel exactly.
    fn euler(&self, x: &Latent, z: &Latent, sigma: f64, h: f64) -> Result<Latent, SamplerError> {
        let den = self.eval(z, sigma)?;
        let c = (h / sigma) as f32;
        let data = x
            .data
            .iter()
            .zip(z.data.iter().zip(&den.data))
            .map(|(&xi, (&zi, &di))| xi + c * (zi - di))
            .collect();
        Ok(Latent {
            frames: x.frames,
            bins: x.bins,
            data,
        })
    }

    /// Returns the updated sample and the standard deviation of fresh noise
    /// still to be added.
    fn step(&self, x: &Latent, a: f64, b: f64, solver: Solver) -> Result<(Latent, f64), SamplerError> {
        let (target, mid, up) = match solver {
            Solver::AncestralDpm2 { rho } => {
                let up = if b > 0.0 {
                    (b * b * (a * a - b * b) / (a * a)).sqrt()
                } else {
                    0.0
                };
                let down = (b * b - up * up).max(0.0).sqrt();
                let mid = ((a.powf(1.0 / rho) + down.powf(1.0 / rho)) / 2.0).powf(rho);
                (down, mid, up)
            }
            Solver::Dpm2 => {
                if b == 0.0 {
                    return Ok((self.euler(x, x, a, -a)?, 0.0));
                }
                (b, (a.ln() * 0.5 + b.ln() * 0.5).exp(), 0.0)
            }
        };
        let x_mid = self.euler(x, x, a, mid - a)?;
        Ok((self.euler(x, &x_mid, mid, target - a)?, up))
    }
}

fn add_noise(x: &mut Latent, from_frame: usize, scale: f64, rng: &mut ChaCha8Rng) {
    if scale == 0.0 {
        return;
    }
    let s = scale as f32;
    for v in &mut x.data[from_frame * x.bins..] {
        *v += s * normal(rng);
    }
}

/// Runs the inpainting sampler; see [`sample_inpaint_traced`].
pub fn sample_inpaint<D: Denoiser + ?Sized>(
    g: &D,
    schedule: &NoiseSchedule,
    spec: &InpaintSpec,
    cond: &Conditioning,
    solver: Solver,
    seed: u64,
) -> Result<Latent, SamplerError> {
    sample_inpaint_traced(g, schedule, spec, cond, solver, seed, |_, _| {})
}

/// Like [`sample_inpaint`], calling `observe(level, sample)` after the last
/// update of each noise level.
pub fn sample_inpaint_traced<D, F>(
    g: &D,
    schedule: &NoiseSchedule,
    spec: &InpaintSpec,
    cond: &Conditioning,
    solver: Solver,
    seed: u64,
    mut observe: F,
) -> Result<Latent, SamplerError>
where
    D: Denoiser + ?Sized,
    F: FnMut(usize, &Latent),
{
    if spec.resamples == 0 {
        return Err(SamplerError::NoResamples);
    }
    let shape = spec.fixed.shape();
    if spec.target.latent_frames as usize != shape.0 {
        return Err(SamplerError::ShapeMismatch {
            expected: (spec.target.latent_frames as usize, shape.1),
            got: shape,
        });
    }
    let boundary = (spec.target.boundary_frame as usize).min(shape.0);
    if boundary == shape.0 {
        return Ok(spec.fixed.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stepper = Stepper { g, cond, shape };
    let split = boundary * shape.1;

    let mut x = Latent::zeros(shape.0, shape.1);
    add_noise(&mut x, boundary, schedule.sigma_max, &mut rng);

    let mut levels = schedule.sigmas.clone();
    levels.push(0.0);
    let mut fixed_noisy = vec![0.0f32; split];
    for (i, pair) in levels.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        let s = a as f32;
        for (dst, &src) in fixed_noisy.iter_mut().zip(&spec.fixed.data[..split]) {
            *dst = src + s * normal(&mut rng);
        }
        for r in 0..spec.resamples {
            x.data[..split].copy_from_slice(&fixed_noisy);
            let (next, up) = stepper.step(&x, a, b, solver)?;
            x = next;
            add_noise(&mut x, boundary, up, &mut rng);
            if r + 1 < spec.resamples {
                add_noise(&mut x, boundary, (a * a - b * b).sqrt(), &mut rng);
            }
        }
        observe(i, &x);
    }
    x.data[..split].copy_from_slice(&spec.fixed.data[..split]);
    Ok(x)
}
