//! Sliding-window geometry.
//!
//! Everything here is pure arithmetic over an immutable [`WindowConfig`]:
//! step boundaries, the context read interval, the prediction write
//! interval, the shift that moves a previous prediction into the past of the
//! next window, and the temporal context/target masks on the latent grid.
//!
//! The step ratio is stored as a whole number of latent frames so that all
//! boundary arithmetic is exact integer math.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WindowError {
    #[error("step ratio must lie in (0, 1], got {0}")]
    RatioOutOfRange(String),
    #[error("step ratio {ratio} is not a whole number of latent frames (latent_frames = {latent_frames})")]
    NotOnLatentGrid { ratio: String, latent_frames: u32 },
    #[error("malformed step ratio {0:?}, expected \"n/d\"")]
    BadFraction(String),
    #[error("window of {window_samples} samples at ratio {ratio} gives a fractional step")]
    FractionalStep { window_samples: usize, ratio: StepRatio },
    #[error("receptive field {seconds} s at {sample_rate} Hz is not a whole number of samples")]
    FractionalWindow { seconds: f64, sample_rate: u32 },
    #[error("prediction window lies outside the context: (w + 1) * r = ({lookahead} + 1) * {ratio} >= 1")]
    PredictionOutsideContext { lookahead: i32, ratio: StepRatio },
    #[error("fade of {fade} samples must be shorter than the step of {step} samples")]
    FadeTooLong { fade: usize, step: usize },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("buffer length {got} does not match expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Fraction of the receptive field advanced per step, expressed as
/// `frames / latent_frames`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StepRatio {
    frames: u32,
    latent_frames: u32,
}

impl StepRatio {
    pub fn new(frames: u32, latent_frames: u32) -> Result<Self, WindowError> {
        if latent_frames == 0 {
            return Err(WindowError::NonPositive("latent_frames"));
        }
        if frames == 0 || frames > latent_frames {
            return Err(WindowError::RatioOutOfRange(format!("{frames}/{latent_frames}")));
        }
        Ok(Self {
            frames,
            latent_frames,
        })
    }

    /// Converts `num/den` onto the latent grid, rejecting ratios that do not
    /// land on a whole frame.
    pub fn from_fraction(num: u64, den: u64, latent_frames: u32) -> Result<Self, WindowError> {
        if den == 0 || num == 0 || num > den {
            return Err(WindowError::RatioOutOfRange(format!("{num}/{den}")));
        }
        let scaled = num * u64::from(latent_frames);
        if scaled % den != 0 {
            return Err(WindowError::NotOnLatentGrid {
                ratio: format!("{num}/{den}"),
                latent_frames,
            });
        }
        Self::new((scaled / den) as u32, latent_frames)
    }

    /// Parses `"n/d"` (or a bare integer, which must be `1`) on the given grid.
    pub fn parse(text: &str, latent_frames: u32) -> Result<Self, WindowError> {
        let text = text.trim();
        let (num, den) = match text.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (text, "1"),
        };
        let num: u64 = num
            .parse()
            .map_err(|_| WindowError::BadFraction(text.to_string()))?;
        let den: u64 = den
            .parse()
            .map_err(|_| WindowError::BadFraction(text.to_string()))?;
        Self::from_fraction(num, den, latent_frames)
    }

    /// Step length in latent frames (`T_z * r`).
    pub fn frames(&self) -> u32 {
        self.frames
    }

    pub fn latent_frames(&self) -> u32 {
        self.latent_frames
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.frames) / f64::from(self.latent_frames)
    }

    /// The ratio in lowest terms.
    pub fn reduced(&self) -> (u32, u32) {
        let g = gcd(self.frames, self.latent_frames);
        (self.frames / g, self.latent_frames / g)
    }

    /// `len * r`, if that is a whole number.
    pub fn scale(&self, len: usize) -> Option<usize> {
        let num = len as u64 * u64::from(self.frames);
        let den = u64::from(self.latent_frames);
        (num % den == 0).then(|| (num / den) as usize)
    }
}

impl fmt::Display for StepRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, d) = self.reduced();
        write!(f, "{n}/{d}")
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Retrospective,
    Immediate,
    Lookahead,
}

impl Regime {
    pub fn of(lookahead: i32) -> Self {
        match lookahead {
            w if w < 0 => Regime::Retrospective,
            0 => Regime::Immediate,
            _ => Regime::Lookahead,
        }
    }
}

/// A temporal mask on the latent grid: frames `t < boundary_frame` are
/// visible (mask value 1), the rest are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBoundary {
    pub boundary_frame: u32,
    pub latent_frames: u32,
}

impl MaskBoundary {
    pub fn is_visible(&self, frame: u32) -> bool {
        frame < self.boundary_frame
    }

    /// Per-frame mask values.
    pub fn frame_mask(&self) -> Vec<u8> {
        (0..self.latent_frames)
            .map(|t| u8::from(self.is_visible(t)))
            .collect()
    }

    /// The full `latent_frames x bins` mask, row-major by frame.
    pub fn grid(&self, bins: u32) -> Vec<f32> {
        let mut out = Vec::with_capacity((self.latent_frames * bins) as usize);
        for t in 0..self.latent_frames {
            let v = if self.is_visible(t) { 1.0 } else { 0.0 };
            out.extend(std::iter::repeat(v).take(bins as usize));
        }
        out
    }
}

/// Context mask boundary on a bare latent grid: `T_z - T_z * r * (w + 1)`,
/// clamped to `[0, T_z]`.
pub fn context_boundary(ratio: StepRatio, lookahead: i32) -> MaskBoundary {
    let tz = i64::from(ratio.latent_frames);
    let raw = tz - i64::from(ratio.frames) * (i64::from(lookahead) + 1);
    MaskBoundary {
        boundary_frame: raw.clamp(0, tz) as u32,
        latent_frames: ratio.latent_frames,
    }
}

/// Target mask boundary on a bare latent grid: `T_z - T_z * r`.
pub fn target_boundary(ratio: StepRatio) -> MaskBoundary {
    MaskBoundary {
        boundary_frame: ratio.latent_frames - ratio.frames,
        latent_frames: ratio.latent_frames,
    }
}

/// Half-open interval of absolute sample positions. Start may be negative
/// at session start; such samples read as silence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleSpan {
    pub start: i64,
    pub end: i64,
}

impl SampleSpan {
    pub fn new(start: i64, end: i64) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        (self.end - self.start).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, pos: i64) -> bool {
        self.start <= pos && pos < self.end
    }

    pub fn overlaps(&self, other: &SampleSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// User-facing window parameters, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowParams {
    pub t_seconds: f64,
    pub sample_rate: u32,
    pub latent_frames: u32,
    pub latent_bins: u32,
    pub step_ratio: String,
    pub lookahead_w: i32,
    pub fade_samples: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            t_seconds: 6.0,
            sample_rate: 44_100,
            latent_frames: 64,
            latent_bins: 64,
            step_ratio: "1/4".into(),
            lookahead_w: 1,
            fade_samples: 882,
        }
    }
}

/// Validated streaming geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    window_samples: usize,
    sample_rate: u32,
    latent_bins: u32,
    ratio: StepRatio,
    lookahead: i32,
    fade: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig::from_params(&WindowParams::default()).expect("default window is valid")
    }
}

impl WindowConfig {
    pub fn new(
        window_samples: usize,
        sample_rate: u32,
        latent_bins: u32,
        ratio: StepRatio,
        lookahead: i32,
        fade: usize,
    ) -> Result<Self, WindowError> {
        if window_samples == 0 {
            return Err(WindowError::NonPositive("window_samples"));
        }
        if sample_rate == 0 {
            return Err(WindowError::NonPositive("sample_rate"));
        }
        if latent_bins == 0 {
            return Err(WindowError::NonPositive("latent_bins"));
        }
        let step = ratio
            .scale(window_samples)
            .ok_or(WindowError::FractionalStep {
                window_samples,
                ratio,
            })?;
        // at least one context frame must stay visible
        if i64::from(ratio.frames) * (i64::from(lookahead) + 1) >= i64::from(ratio.latent_frames) {
            return Err(WindowError::PredictionOutsideContext { lookahead, ratio });
        }
        if fade >= step {
            return Err(WindowError::FadeTooLong { fade, step });
        }
        Ok(Self {
            window_samples,
            sample_rate,
            latent_bins,
            ratio,
            lookahead,
            fade,
        })
    }

    pub fn from_params(p: &WindowParams) -> Result<Self, WindowError> {
        if !(p.t_seconds > 0.0) {
            return Err(WindowError::NonPositive("t_seconds"));
        }
        let exact = p.t_seconds * f64::from(p.sample_rate);
        let window_samples = exact.round();
        if (exact - window_samples).abs() > 1e-6 {
            return Err(WindowError::FractionalWindow {
                seconds: p.t_seconds,
                sample_rate: p.sample_rate,
            });
        }
        let ratio = StepRatio::parse(&p.step_ratio, p.latent_frames)?;
        Self::new(
            window_samples as usize,
            p.sample_rate,
            p.latent_bins,
            ratio,
            p.lookahead_w,
            p.fade_samples,
        )
    }

    pub fn to_params(&self) -> WindowParams {
        WindowParams {
            t_seconds: self.window_samples as f64 / f64::from(self.sample_rate),
            sample_rate: self.sample_rate,
            latent_frames: self.ratio.latent_frames,
            latent_bins: self.latent_bins,
            step_ratio: self.ratio.to_string(),
            lookahead_w: self.lookahead,
            fade_samples: self.fade,
        }
    }

    pub fn with_ratio(&self, ratio: StepRatio) -> Result<Self, WindowError> {
        Self::new(
            self.window_samples,
            self.sample_rate,
            self.latent_bins,
            ratio,
            self.lookahead,
            self.fade,
        )
    }

    pub fn with_lookahead(&self, lookahead: i32) -> Result<Self, WindowError> {
        Self::new(
            self.window_samples,
            self.sample_rate,
            self.latent_bins,
            self.ratio,
            lookahead,
            self.fade,
        )
    }

    pub fn with_fade(&self, fade: usize) -> Result<Self, WindowError> {
        Self::new(
            self.window_samples,
            self.sample_rate,
            self.latent_bins,
            self.ratio,
            self.lookahead,
            fade,
        )
    }

    /// `T * sr`.
    pub fn window_samples(&self) -> usize {
        self.window_samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn latent_frames(&self) -> u32 {
        self.ratio.latent_frames
    }

    pub fn latent_bins(&self) -> u32 {
        self.latent_bins
    }

    pub fn ratio(&self) -> StepRatio {
        self.ratio
    }

    pub fn lookahead(&self) -> i32 {
        self.lookahead
    }

    pub fn regime(&self) -> Regime {
        Regime::of(self.lookahead)
    }

    pub fn fade(&self) -> usize {
        self.fade
    }

    /// `T * sr * r`.
    pub fn step_samples(&self) -> usize {
        self.ratio
            .scale(self.window_samples)
            .expect("validated at construction")
    }

    pub fn step_frames(&self) -> u32 {
        self.ratio.frames
    }

    pub fn receptive_field_ms(&self) -> f64 {
        self.window_samples as f64 * 1000.0 / f64::from(self.sample_rate)
    }

    /// Real-time budget `T * r` in milliseconds.
    pub fn step_ms(&self) -> f64 {
        self.step_samples() as f64 * 1000.0 / f64::from(self.sample_rate)
    }

    /// Audio samples covered by latent frame `frame`. Frame spans are not
    /// necessarily whole numbers of samples, so boundaries are floored.
    pub fn frame_span(&self, frame: u32) -> Range<usize> {
        let n = self.window_samples as u64;
        let tz = u64::from(self.ratio.latent_frames);
        let lo = (u64::from(frame) * n / tz) as usize;
        let hi = ((u64::from(frame) + 1) * n / tz) as usize;
        lo..hi
    }

    pub fn context_mask(&self) -> MaskBoundary {
        context_boundary(self.ratio, self.lookahead)
    }

    pub fn target_mask(&self) -> MaskBoundary {
        target_boundary(self.ratio)
    }

    /// Number of leading window samples that carry observed context; the
    /// remainder is zeroed before conditioning.
    pub fn context_visible_samples(&self) -> usize {
        let b = self.context_mask().boundary_frame;
        if b == self.ratio.latent_frames {
            self.window_samples
        } else {
            self.frame_span(b).start
        }
    }

    /// Context sent for the boundary at `curr`: `[curr - step, curr)`.
    pub fn context_read_interval(&self, curr: i64) -> SampleSpan {
        let step = self.step_samples() as i64;
        SampleSpan::new(curr - step, curr)
    }

    /// Where the prediction triggered at `curr` lands:
    /// `[curr + w * step, curr + (w + 1) * step)`.
    pub fn write_interval(&self, curr: i64) -> SampleSpan {
        let step = self.step_samples() as i64;
        let w = i64::from(self.lookahead);
        SampleSpan::new(curr + w * step, curr + (w + 1) * step)
    }

    /// The fade prelude preceding the write interval.
    pub fn fade_interval(&self, curr: i64) -> SampleSpan {
        let start = self.write_interval(curr).start;
        SampleSpan::new(start - self.fade as i64, start)
    }

    /// Length of a generator response: fade prelude plus one step.
    pub fn response_samples(&self) -> usize {
        self.fade + self.step_samples()
    }

    /// Shifts a `T * sr` audio window left by one step.
    pub fn shift_audio<T: Copy + Default>(&self, buf: &mut [T]) -> Result<(), WindowError> {
        if buf.len() != self.window_samples {
            return Err(WindowError::LengthMismatch {
                expected: self.window_samples,
                got: buf.len(),
            });
        }
        shift_left(buf, self.step_samples());
        Ok(())
    }

    /// Shifts a frame-major latent grid (`T_z * F_z` values) left by
    /// `T_z * r` frames.
    pub fn shift_latent<T: Copy + Default>(&self, grid: &mut [T]) -> Result<(), WindowError> {
        let expected = (self.ratio.latent_frames * self.latent_bins) as usize;
        if grid.len() != expected {
            return Err(WindowError::LengthMismatch {
                expected,
                got: grid.len(),
            });
        }
        shift_left(grid, (self.ratio.frames * self.latent_bins) as usize);
        Ok(())
    }
}

/// Moves contents `by` positions toward the front and zero-fills the tail.
pub fn shift_left<T: Copy + Default>(buf: &mut [T], by: usize) {
    let by = by.min(buf.len());
    buf.copy_within(by.., 0);
    let len = buf.len();
    buf[len - by..].fill(T::default());
}

/// Shifts a buffer by `len * r`, which must be a whole number of elements.
pub fn shift_by_ratio<T: Copy + Default>(buf: &mut [T], ratio: StepRatio) -> Result<(), WindowError> {
    let by = ratio.scale(buf.len()).ok_or(WindowError::FractionalStep {
        window_samples: buf.len(),
        ratio,
    })?;
    shift_left(buf, by);
    Ok(())
}

impl FromStr for WindowParams {
    type Err = WindowError;

    /// Compact `T:sr:Tz:Fz:r:w:fade` form used by tests and the CLI.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WindowError::BadFraction(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 7 {
            return Err(bad());
        }
        Ok(WindowParams {
            t_seconds: parts[0].parse().map_err(|_| bad())?,
            sample_rate: parts[1].parse().map_err(|_| bad())?,
            latent_frames: parts[2].parse().map_err(|_| bad())?,
            latent_bins: parts[3].parse().map_err(|_| bad())?,
            step_ratio: parts[4].to_string(),
            lookahead_w: parts[5].parse().map_err(|_| bad())?,
            fade_samples: parts[6].parse().map_err(|_| bad())?,
        })
    }
}
