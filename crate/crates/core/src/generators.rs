//! Generator contract and built-in backends.
//!
//! A generator sees one model window of audio (`T * sr` samples) whose
//! unobserved tail is zeroed, plus the previous predictions shifted into
//! the same window, and returns the fade prelude followed by one step of
//! new audio for the last step of the window.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::clock::{ms, SharedClock};
use crate::sampler::{
    sample_inpaint, Conditioning, GaussianDenoiser, InpaintSpec, Latent, NoiseSchedule,
    SamplerError, Solver,
};
use crate::stems::{Stem, STEM_COUNT};
use crate::window::WindowConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("{what} has {got} samples, expected {expected}")]
    BadLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("context audio is non-zero at sample {0}, past the visible region")]
    UnmaskedContext(usize),
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("generator failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct GeneratorRequest {
    /// One model window; samples past `cfg.context_visible_samples()` are 0.
    pub context_audio: Vec<f32>,
    /// Earlier predictions in window coordinates; the last step is empty.
    pub prior_target: Vec<f32>,
    pub instrument: [f32; STEM_COUNT],
    pub cfg: WindowConfig,
    pub step_id: u32,
}

impl GeneratorRequest {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let n = self.cfg.window_samples();
        for (what, buf) in [("context_audio", &self.context_audio), ("prior_target", &self.prior_target)] {
            if buf.len() != n {
                return Err(GeneratorError::BadLength {
                    what,
                    expected: n,
                    got: buf.len(),
                });
            }
        }
        let vis = self.cfg.context_visible_samples();
        if let Some(i) = self.context_audio[vis..].iter().position(|&v| v != 0.0) {
            return Err(GeneratorError::UnmaskedContext(vis + i));
        }
        Ok(())
    }

    pub fn stem(&self) -> Option<Stem> {
        self.instrument
            .iter()
            .position(|&v| v == 1.0)
            .and_then(Stem::from_index)
    }
}

/// Stage durations measured inside a backend.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BackendTimings {
    pub encode_ms: f64,
    pub sampling_ms: f64,
    pub decode_ms: f64,
    pub forward_passes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorResponse {
    /// `fade + step` samples: fade prelude, then the new step.
    pub audio: Vec<f32>,
    pub step_id: u32,
    pub timings: BackendTimings,
}

impl GeneratorResponse {
    pub fn validate(&self, cfg: &WindowConfig) -> Result<(), GeneratorError> {
        let expected = cfg.response_samples();
        if self.audio.len() != expected {
            return Err(GeneratorError::BadLength {
                what: "response",
                expected,
                got: self.audio.len(),
            });
        }
        if self.audio.iter().any(|v| !v.is_finite()) {
            return Err(GeneratorError::Failed("non-finite output".into()));
        }
        Ok(())
    }

    /// The new step, without the fade prelude.
    pub fn body(&self, cfg: &WindowConfig) -> &[f32] {
        &self.audio[cfg.fade()..]
    }
}

/// Anything that can answer a request. Implemented by the built-ins and by
/// test instruments.
pub trait Generate: Send {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GeneratorError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorKind {
    Silence,
    /// Copies the last visible step of context, `delay` samples earlier.
    Echo { delay: usize },
    EnvelopeSynth,
    ToySampler { steps: usize },
    Wrapped {
        inner: Box<GeneratorKind>,
        delay_ms: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        Self { kind, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn build(&self, clock: SharedClock) -> Box<dyn Generate> {
        build_kind(&self.kind, self.seed, clock)
    }
}

fn build_kind(kind: &GeneratorKind, seed: u64, clock: SharedClock) -> Box<dyn Generate> {
    match kind {
        GeneratorKind::Silence => Box::new(Silence),
        GeneratorKind::Echo { delay } => Box::new(Echo { delay: *delay }),
        GeneratorKind::EnvelopeSynth => Box::new(EnvelopeSynth::new(clock)),
        GeneratorKind::ToySampler { steps } => Box::new(ToySampler::new(*steps, seed, clock)),
        GeneratorKind::Wrapped { inner, delay_ms } => Box::new(Wrapped {
            inner: build_kind(inner, seed, clock.clone()),
            delay_ms: *delay_ms,
            clock,
        }),
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorKind::Silence => write!(f, "silence"),
            GeneratorKind::Echo { delay } => write!(f, "echo:{delay}"),
            GeneratorKind::EnvelopeSynth => write!(f, "envelope"),
            GeneratorKind::ToySampler { steps } => write!(f, "toy:{steps}"),
            GeneratorKind::Wrapped { inner, delay_ms } => write!(f, "wrapped:{inner}:{delay_ms}"),
        }
    }
}

impl FromStr for GeneratorKind {
    type Err = String;

    /// `silence`, `echo[:delay_samples]`, `envelope`, `toy[:steps]`,
    /// `wrapped:<inner>:<delay_ms>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("wrapped:") {
            let (inner, delay) = rest
                .rsplit_once(':')
                .ok_or_else(|| format!("{s:?}: expected wrapped:<inner>:<delay_ms>"))?;
            let delay_ms: f64 = delay
                .parse()
                .map_err(|_| format!("{s:?}: bad delay {delay:?}"))?;
            if !(delay_ms >= 0.0 && delay_ms.is_finite()) {
                return Err(format!("{s:?}: delay must be >= 0"));
            }
            return Ok(GeneratorKind::Wrapped {
                inner: Box::new(inner.parse()?),
                delay_ms,
            });
        }
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: usize| -> Result<usize, String> {
            arg.map_or(Ok(default), |a| {
                a.parse().map_err(|_| format!("{s:?}: bad argument {a:?}"))
            })
        };
        match name {
            "silence" if arg.is_none() => Ok(GeneratorKind::Silence),
            "echo" => Ok(GeneratorKind::Echo { delay: num(0)? }),
            "envelope" | "envelope_synth" if arg.is_none() => Ok(GeneratorKind::EnvelopeSynth),
            "toy" | "toy_sampler" => {
                let steps = num(5)?;
                if steps < 2 {
                    return Err(format!("{s:?}: toy sampler needs at least 2 steps"));
                }
                Ok(GeneratorKind::ToySampler { steps })
            }
            _ => Err(format!(
                "unknown generator {s:?}; expected silence, echo[:N], envelope, toy[:N] or wrapped:<inner>:<ms>"
            )),
        }
    }
}

impl FromStr for GeneratorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(GeneratorSpec::new(s.parse()?))
    }
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kind.fmt(f)
    }
}

// ── built-ins ──────────────────────────────────────────────────────────

struct Silence;

impl Generate for Silence {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GeneratorError> {
        req.validate()?;
        Ok(GeneratorResponse {
            audio: vec![0.0; req.cfg.response_samples()],
            step_id: req.step_id,
            timings: BackendTimings::default(),
        })
    }
}

struct Echo {
    delay: usize,
}

impl Generate for Echo {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GeneratorError> {
        req.validate()?;
        let cfg = &req.cfg;
        let len = cfg.response_samples() as i64;
        let end = cfg.context_visible_samples() as i64 - self.delay as i64;
        let start = end - len;
        let audio = (start..end)
            .map(|i| {
                if i >= 0 {
                    req.context_audio[i as usize]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(GeneratorResponse {
            audio,
            step_id: req.step_id,
            timings: BackendTimings::default(),
        })
    }
}

fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len() as f64).sqrt()
}

const TONE_HZ: f64 = 220.0;

/// Window sample range of the response: the fade prelude and the last step.
fn response_range(cfg: &WindowConfig) -> std::ops::Range<usize> {
    let n = cfg.window_samples();
    n - cfg.response_samples()..n
}

/// Frames shifted forward by the structural delay, so each target frame
/// takes its level from a visible context frame.
fn source_frame(cfg: &WindowConfig, frame: u32) -> Option<u32> {
    let lag = i64::from(cfg.step_frames()) * (i64::from(cfg.lookahead()) + 1);
    let src = i64::from(frame) - lag;
    (src >= 0).then_some(src as u32)
}

fn frame_of(cfg: &WindowConfig, sample: usize) -> u32 {
    (sample as u64 * u64::from(cfg.latent_frames()) / cfg.window_samples() as u64) as u32
}

/// Sine at `TONE_HZ` with phase tied to the absolute stream position.
fn tone(cfg: &WindowConfig, step_id: u32, window_pos: usize) -> f64 {
    let abs = u64::from(step_id) * cfg.step_samples() as u64 + window_pos as u64;
    let t = abs as f64 / f64::from(cfg.sample_rate());
    (2.0 * std::f64::consts::PI * TONE_HZ * t).sin()
}

/// Renders the response region as per-frame tones, each scaled so the whole
/// frame's RMS equals `level(frame)`.
fn render_frames<F: Fn(u32) -> f64>(cfg: &WindowConfig, step_id: u32, level: F) -> Vec<f32> {
    let range = response_range(cfg);
    let mut out = vec![0.0f32; range.len()];
    let first = frame_of(cfg, range.start);
    for frame in first..cfg.latent_frames() {
        let span = cfg.frame_span(frame);
        let target = level(frame);
        if target == 0.0 || span.is_empty() {
            continue;
        }
        let raw: Vec<f64> = span.clone().map(|i| tone(cfg, step_id, i)).collect();
        let raw_rms = (raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
        if raw_rms == 0.0 {
            continue;
        }
        let gain = target / raw_rms;
        for (i, v) in span.zip(raw) {
            if i >= range.start {
                out[i - range.start] = (v * gain) as f32;
            }
        }
    }
    out
}

struct EnvelopeSynth {
    clock: SharedClock,
}

impl EnvelopeSynth {
    fn new(clock: SharedClock) -> Self {
        Self { clock }
    }
}

impl Generate for EnvelopeSynth {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GeneratorError> {
        req.validate()?;
        let cfg = &req.cfg;
        let t0 = self.clock.now();
        let levels: Vec<f64> = (0..cfg.latent_frames())
            .map(|f| rms(&req.context_audio[cfg.frame_span(f)]))
            .collect();
        let t1 = self.clock.now();
        let audio = render_frames(cfg, req.step_id, |f| {
            source_frame(cfg, f).map_or(0.0, |s| levels[s as usize])
        });
        let t2 = self.clock.now();
        Ok(GeneratorResponse {
            audio,
            step_id: req.step_id,
            timings: BackendTimings {
                encode_ms: ms(t1 - t0),
                sampling_ms: 0.0,
                decode_ms: ms(t2 - t1),
                forward_passes: 0,
            },
        })
    }
}

/// Synthetic codec: bin `b` of frame `f` is the RMS of the `b`-th of
/// `F_z` equal sub-spans of that frame.
pub fn encode_latent(cfg: &WindowConfig, audio: &[f32]) -> Latent {
    let (tz, fz) = (cfg.latent_frames() as usize, cfg.latent_bins() as usize);
    let mut z = Latent::zeros(tz, fz);
    for f in 0..tz {
        let span = cfg.frame_span(f as u32);
        let frame = &audio[span];
        let row = z.frame_mut(f);
        for (b, v) in row.iter_mut().enumerate() {
            let lo = b * frame.len() / fz;
            let hi = (b + 1) * frame.len() / fz;
            *v = rms(&frame[lo..hi]) as f32;
        }
    }
    z
}

/// Inverse of [`encode_latent`] over the response region: each sub-span
/// becomes a tone at the magnitude of its bin.
pub fn decode_latent(cfg: &WindowConfig, z: &Latent, step_id: u32) -> Vec<f32> {
    let range = response_range(cfg);
    let fz = z.bins();
    let mut out = vec![0.0f32; range.len()];
    for f in frame_of(cfg, range.start)..cfg.latent_frames() {
        let span = cfg.frame_span(f);
        let len = span.len();
        let row = z.frame(f as usize);
        for (j, i) in span.clone().enumerate() {
            if i < range.start {
                continue;
            }
            let b = (j * fz / len).min(fz - 1);
            let amp = f64::from(row[b].abs()) * std::f64::consts::SQRT_2;
            out[i - range.start] = (amp * tone(cfg, step_id, i)) as f32;
        }
    }
    out
}

struct ToySampler {
    schedule: NoiseSchedule,
    seed: u64,
    clock: SharedClock,
}

impl ToySampler {
    fn new(steps: usize, seed: u64, clock: SharedClock) -> Self {
        let schedule = NoiseSchedule::karras(steps.max(2), 1e-4, 50.0, 9.0).expect("fixed parameters are valid");
        Self {
            schedule,
            seed,
            clock,
        }
    }
}

const TOY_SIGMA_DATA: f64 = 0.05;
const TOY_RESAMPLES: usize = 2;

impl Generate for ToySampler {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GeneratorError> {
        req.validate()?;
        let cfg = &req.cfg;
        let t0 = self.clock.now();
        let mut context = encode_latent(cfg, &req.context_audio);
        context.apply_mask(cfg.context_mask());
        let fixed = encode_latent(cfg, &req.prior_target);
        let (tz, fz) = context.shape();
        let mut mean = Latent::zeros(tz, fz);
        for f in 0..tz as u32 {
            if let Some(src) = source_frame(cfg, f) {
                let row = context.frame(src as usize).to_vec();
                mean.frame_mut(f as usize).copy_from_slice(&row);
            }
        }
        let t1 = self.clock.now();

        let denoiser = GaussianDenoiser::new(mean, TOY_SIGMA_DATA)?;
        let spec = InpaintSpec {
            target: cfg.target_mask(),
            fixed,
            resamples: TOY_RESAMPLES,
        };
        let cond = Conditioning {
            instrument: req.instrument,
            context,
        };
        let solver = Solver::default();
        let seed = self.seed ^ u64::from(req.step_id).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let z = sample_inpaint(&denoiser, &self.schedule, &spec, &cond, solver, seed)?;
        let t2 = self.clock.now();
        let audio = decode_latent(cfg, &z, req.step_id);
        let t3 = self.clock.now();
        Ok(GeneratorResponse {
            audio,
            step_id: req.step_id,
            timings: BackendTimings {
                encode_ms: ms(t1 - t0),
                sampling_ms: ms(t2 - t1),
                decode_ms: ms(t3 - t2),
                forward_passes: solver.forward_passes(&self.schedule, TOY_RESAMPLES),
            },
        })
    }
}

/// Runs `inner`, then blocks for the injected delay. The delay is booked as
/// sampling time.
struct Wrapped {
    inner: Box<dyn Generate>,
    delay_ms: f64,
    clock: SharedClock,
}

impl Generate for Wrapped {
    fn generate(&mut self, req: &GeneratorRequest) -> Result<GeneratorResponse, GeneratorError> {
        let t0 = self.clock.now();
        let mut resp = self.inner.generate(req)?;
        let inner_ms = ms(self.clock.now() - t0);
        self.clock.sleep(Duration::from_secs_f64(self.delay_ms / 1000.0));
        let total = ms(self.clock.now() - t0);
        resp.timings.sampling_ms += (total - inner_ms).max(0.0);
        Ok(resp)
    }
}
