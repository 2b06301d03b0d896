//! C ABI over the streaming core: window geometry and masks, latency
//! arithmetic, and the chunk codec with a reassembler handle.
//!
//! Every fallible function returns an [`AccompStatus`]. Handles are opaque
//! and must be released with their `_free` function. No function panics
//! across the boundary; an internal panic is reported as
//! `ACCOMP_STATUS_PANIC`.

use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use accomp::latency::{min_step_ratio, rt_feasible, snap_to_latent_grid, LatencyModel, StageTimings};
use accomp::window::{SampleSpan, StepRatio, WindowConfig, WindowError};
use accomp::wire::{
    chunk_samples, decode_packet, encode_packet, ChunkAddress, ChunkHeader, ChunkPacket, FeedOutcome, Reassembler,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccompStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    BufferTooSmall = 3,
    Encode = 4,
    Decode = 5,
    Protocol = 6,
    NoFeasibleRatio = 7,
    Empty = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccompAddress {
    Context = 0,
    Prediction = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccompFeed {
    Incomplete = 0,
    Complete = 1,
    StaleDropped = 2,
    DuplicateDropped = 3,
}

/// Half-open sample interval `[start, end)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccompSpan {
    pub start: i64,
    pub end: i64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AccompStageTimings {
    pub client_to_server_ms: f64,
    pub encode_ms: f64,
    pub sampling_ms: f64,
    pub decode_ms: f64,
    pub server_to_client_ms: f64,
}

/// Opaque window configuration.
pub struct AccompConfig {
    inner: WindowConfig,
}

/// Opaque chunk reassembler. Holds the samples of the last completed step.
pub struct AccompReassembler {
    inner: Reassembler,
    completed: Option<(u32, Vec<f32>)>,
}

fn guard(f: impl FnOnce() -> AccompStatus) -> AccompStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(AccompStatus::Panic)
}

fn span(s: SampleSpan) -> AccompSpan {
    AccompSpan {
        start: s.start,
        end: s.end,
    }
}

/// Creates a configuration on the default 6 s, 44.1 kHz, 64x64 grid.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn accomp_config_new(
    step_frames: u32,
    lookahead: i32,
    fade: u32,
    out: *mut *mut AccompConfig,
) -> AccompStatus {
    let d = WindowConfig::default();
    accomp_config_new_full(
        d.window_samples() as u64,
        d.sample_rate(),
        d.latent_frames(),
        d.latent_bins(),
        step_frames,
        lookahead,
        fade,
        out,
    )
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn accomp_config_new_full(
    window_samples: u64,
    sample_rate: u32,
    latent_frames: u32,
    latent_bins: u32,
    step_frames: u32,
    lookahead: i32,
    fade: u32,
    out: *mut *mut AccompConfig,
) -> AccompStatus {
    if out.is_null() {
        return AccompStatus::NullPointer;
    }
    guard(|| {
        let built: Result<WindowConfig, WindowError> = StepRatio::new(step_frames, latent_frames).and_then(|r| {
            WindowConfig::new(window_samples as usize, sample_rate, latent_bins, r, lookahead, fade as usize)
        });
        match built {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(AccompConfig { inner: cfg }));
                AccompStatus::Ok
            }
            Err(_) => {
                *out = ptr::null_mut();
                AccompStatus::InvalidConfig
            }
        }
    })
}

/// # Safety
/// `cfg` must come from `accomp_config_new*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn accomp_config_free(cfg: *mut AccompConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Samples per step; 0 for a null handle.
///
/// # Safety
/// `cfg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn accomp_config_step_samples(cfg: *const AccompConfig) -> u64 {
    cfg.as_ref().map_or(0, |c| c.inner.step_samples() as u64)
}

/// Fade prelude plus one step; 0 for a null handle.
///
/// # Safety
/// `cfg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn accomp_config_response_samples(cfg: *const AccompConfig) -> u64 {
    cfg.as_ref().map_or(0, |c| c.inner.response_samples() as u64)
}

/// Real-time budget in milliseconds; 0 for a null handle.
///
/// # Safety
/// `cfg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn accomp_config_step_ms(cfg: *const AccompConfig) -> f64 {
    cfg.as_ref().map_or(0.0, |c| c.inner.step_ms())
}

unsafe fn write_mask(boundary: u32, frames: u32, out: *mut u8, len: usize) -> AccompStatus {
    if out.is_null() {
        return AccompStatus::NullPointer;
    }
    if len < frames as usize {
        return AccompStatus::BufferTooSmall;
    }
    let dst = std::slice::from_raw_parts_mut(out, frames as usize);
    for (t, v) in dst.iter_mut().enumerate() {
        *v = u8::from((t as u32) < boundary);
    }
    AccompStatus::Ok
}

/// Writes one byte per latent frame: 1 where the context is visible.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn accomp_context_mask(cfg: *const AccompConfig, out: *mut u8, len: usize) -> AccompStatus {
    let Some(c) = cfg.as_ref() else {
        return AccompStatus::NullPointer;
    };
    let m = c.inner.context_mask();
    write_mask(m.boundary_frame, m.latent_frames, out, len)
}

/// Writes one byte per latent frame: 1 where the target is fixed.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn accomp_target_mask(cfg: *const AccompConfig, out: *mut u8, len: usize) -> AccompStatus {
    let Some(c) = cfg.as_ref() else {
        return AccompStatus::NullPointer;
    };
    let m = c.inner.target_mask();
    write_mask(m.boundary_frame, m.latent_frames, out, len)
}

/// # Safety
/// `cfg` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn accomp_read_interval(cfg: *const AccompConfig, curr: i64, out: *mut AccompSpan) -> AccompStatus {
    match (cfg.as_ref(), out.as_mut()) {
        (Some(c), Some(o)) => {
            *o = span(c.inner.context_read_interval(curr));
            AccompStatus::Ok
        }
        _ => AccompStatus::NullPointer,
    }
}

/// # Safety
/// `cfg` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn accomp_write_interval(cfg: *const AccompConfig, curr: i64, out: *mut AccompSpan) -> AccompStatus {
    match (cfg.as_ref(), out.as_mut()) {
        (Some(c), Some(o)) => {
            *o = span(c.inner.write_interval(curr));
            AccompStatus::Ok
        }
        _ => AccompStatus::NullPointer,
    }
}

/// The fade prelude preceding the write interval.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn accomp_fade_interval(cfg: *const AccompConfig, curr: i64, out: *mut AccompSpan) -> AccompStatus {
    match (cfg.as_ref(), out.as_mut()) {
        (Some(c), Some(o)) => {
            *o = span(c.inner.fade_interval(curr));
            AccompStatus::Ok
        }
        _ => AccompStatus::NullPointer,
    }
}

/// Sum of the five stages; NaN for a null pointer.
///
/// # Safety
/// `t` must be null or valid for reads.
#[no_mangle]
pub unsafe extern "C" fn accomp_full_cycle(t: *const AccompStageTimings) -> f64 {
    t.as_ref().map_or(f64::NAN, |t| {
        StageTimings::new(t.client_to_server_ms, t.encode_ms, t.sampling_ms, t.decode_ms, t.server_to_client_ms)
            .full_cycle()
    })
}

#[no_mangle]
pub extern "C" fn accomp_rt_feasible(d_total_ms: f64, budget_ms: f64) -> bool {
    rt_feasible(d_total_ms, budget_ms).feasible
}

/// Minimum feasible step ratio and its latent-grid snap (frames out of
/// `latent_frames`).
///
/// # Safety
/// `r_star` and `snapped_frames` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn accomp_min_step_ratio(
    d_compute_ms: f64,
    c_ms: f64,
    receptive_field_ms: f64,
    latent_frames: u32,
    r_star: *mut f64,
    snapped_frames: *mut u32,
) -> AccompStatus {
    if r_star.is_null() || snapped_frames.is_null() {
        return AccompStatus::NullPointer;
    }
    guard(|| {
        let Ok(model) = LatencyModel::local(d_compute_ms, c_ms) else {
            return AccompStatus::InvalidConfig;
        };
        let Ok(r) = min_step_ratio(&model, receptive_field_ms) else {
            return AccompStatus::NoFeasibleRatio;
        };
        *r_star = r;
        match snap_to_latent_grid(r, latent_frames) {
            Ok(s) => {
                *snapped_frames = s.frames();
                AccompStatus::Ok
            }
            Err(_) => AccompStatus::NoFeasibleRatio,
        }
    })
}

/// Number of chunks a payload of `samples` splits into.
#[no_mangle]
pub extern "C" fn accomp_chunk_count(samples: u64, packet_size: u64) -> u64 {
    if packet_size == 0 {
        return 0;
    }
    samples.div_ceil(packet_size)
}

/// Encodes one chunk. `written` receives the datagram length; when
/// `capacity` is too small it still receives the required length.
///
/// # Safety
/// `samples` must be valid for `n` floats, `out` for `capacity` bytes and
/// `written` for writes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn accomp_encode_chunk(
    address: AccompAddress,
    step_id: u32,
    chunk_index: u32,
    chunk_total: u32,
    samples: *const f32,
    n: usize,
    packet_size: usize,
    out: *mut u8,
    capacity: usize,
    written: *mut usize,
) -> AccompStatus {
    if samples.is_null() || out.is_null() || written.is_null() {
        return AccompStatus::NullPointer;
    }
    guard(|| {
        let Ok(header) = ChunkHeader::new(step_id, chunk_index, chunk_total) else {
            return AccompStatus::Encode;
        };
        let packet = ChunkPacket {
            address: match address {
                AccompAddress::Context => ChunkAddress::Context,
                AccompAddress::Prediction => ChunkAddress::Prediction,
            },
            header,
            samples: std::slice::from_raw_parts(samples, n).to_vec(),
        };
        let Ok(bytes) = encode_packet(&packet, packet_size) else {
            return AccompStatus::Encode;
        };
        *written = bytes.len();
        if bytes.len() > capacity {
            return AccompStatus::BufferTooSmall;
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
        AccompStatus::Ok
    })
}

/// Encoded size of a chunk carrying `n` samples.
#[no_mangle]
pub extern "C" fn accomp_chunk_datagram_len(address: AccompAddress, n: usize) -> usize {
    let addr_len = match address {
        AccompAddress::Context => accomp::wire::CONTEXT_ADDRESS.len(),
        AccompAddress::Prediction => accomp::wire::PREDICTION_ADDRESS.len(),
    };
    let padded = |l: usize| (l / 4 + 1) * 4;
    // address, ",iiib", three ints, blob size, blob
    padded(addr_len) + padded(5) + 12 + 4 + 4 * n
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn accomp_reassembler_new(packet_size: usize, out: *mut *mut AccompReassembler) -> AccompStatus {
    if out.is_null() {
        return AccompStatus::NullPointer;
    }
    if packet_size == 0 {
        *out = ptr::null_mut();
        return AccompStatus::InvalidConfig;
    }
    *out = Box::into_raw(Box::new(AccompReassembler {
        inner: Reassembler::new(packet_size),
        completed: None,
    }));
    AccompStatus::Ok
}

/// # Safety
/// `r` must come from `accomp_reassembler_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn accomp_reassembler_free(r: *mut AccompReassembler) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Feeds one datagram. On `ACCOMP_FEED_COMPLETE` the step's samples are
/// held until the next completion; fetch them with
/// `accomp_reassembler_take`.
///
/// # Safety
/// `r` must be a live handle, `bytes` valid for `len` bytes, `outcome`
/// and `step_id` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn accomp_reassembler_feed(
    r: *mut AccompReassembler,
    bytes: *const u8,
    len: usize,
    outcome: *mut AccompFeed,
    step_id: *mut u32,
) -> AccompStatus {
    let (Some(r), false, Some(outcome), Some(step_id)) = (r.as_mut(), bytes.is_null(), outcome.as_mut(), step_id.as_mut())
    else {
        return AccompStatus::NullPointer;
    };
    guard(|| {
        let Ok(packet) = decode_packet(std::slice::from_raw_parts(bytes, len)) else {
            return AccompStatus::Decode;
        };
        *step_id = packet.header.step_id();
        match r.inner.feed(&packet) {
            Ok(FeedOutcome::Incomplete) => *outcome = AccompFeed::Incomplete,
            Ok(FeedOutcome::StaleDropped) => *outcome = AccompFeed::StaleDropped,
            Ok(FeedOutcome::DuplicateDropped) => *outcome = AccompFeed::DuplicateDropped,
            Ok(FeedOutcome::Complete { step_id: s, samples }) => {
                *outcome = AccompFeed::Complete;
                r.completed = Some((s, samples));
            }
            Err(_) => return AccompStatus::Protocol,
        }
        AccompStatus::Ok
    })
}

/// Copies out the last completed step. `written` receives the sample
/// count, also when `capacity` is too small.
///
/// # Safety
/// `r` must be a live handle, `out` valid for `capacity` floats and
/// `written` for writes.
#[no_mangle]
pub unsafe extern "C" fn accomp_reassembler_take(
    r: *mut AccompReassembler,
    out: *mut f32,
    capacity: usize,
    written: *mut usize,
) -> AccompStatus {
    let (Some(r), false, Some(written)) = (r.as_mut(), out.is_null(), written.as_mut()) else {
        return AccompStatus::NullPointer;
    };
    let Some((_, samples)) = &r.completed else {
        *written = 0;
        return AccompStatus::Empty;
    };
    *written = samples.len();
    if samples.len() > capacity {
        return AccompStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(samples.as_ptr(), out, samples.len());
    r.completed = None;
    AccompStatus::Ok
}

/// Splits `n` samples into chunk datagrams written back to back into
/// `out`; `lengths` receives each datagram's size. Returns the chunk count
/// through `count`.
///
/// # Safety
/// `samples` valid for `n` floats, `out` for `capacity` bytes, `lengths`
/// for `max_chunks` entries, `count` for writes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn accomp_encode_step(
    address: AccompAddress,
    step_id: u32,
    samples: *const f32,
    n: usize,
    packet_size: usize,
    out: *mut u8,
    capacity: usize,
    lengths: *mut usize,
    max_chunks: usize,
    count: *mut usize,
) -> AccompStatus {
    if samples.is_null() || out.is_null() || lengths.is_null() || count.is_null() {
        return AccompStatus::NullPointer;
    }
    guard(|| {
        let addr = match address {
            AccompAddress::Context => ChunkAddress::Context,
            AccompAddress::Prediction => ChunkAddress::Prediction,
        };
        let Ok(packets) = chunk_samples(addr, step_id, std::slice::from_raw_parts(samples, n), packet_size) else {
            return AccompStatus::Encode;
        };
        *count = packets.len();
        if packets.len() > max_chunks {
            return AccompStatus::BufferTooSmall;
        }
        let mut offset = 0usize;
        let lens = std::slice::from_raw_parts_mut(lengths, packets.len());
        for (p, l) in packets.iter().zip(lens.iter_mut()) {
            let Ok(bytes) = encode_packet(p, packet_size) else {
                return AccompStatus::Encode;
            };
            if offset + bytes.len() > capacity {
                return AccompStatus::BufferTooSmall;
            }
            ptr::copy_nonoverlapping(bytes.as_ptr(), out.add(offset), bytes.len());
            *l = bytes.len();
            offset += bytes.len();
        }
        AccompStatus::Ok
    })
}

#[no_mangle]
pub extern "C" fn accomp_status_str(status: AccompStatus) -> *const c_char {
    let s: &'static std::ffi::CStr = match status {
        AccompStatus::Ok => c"ok",
        AccompStatus::NullPointer => c"null pointer",
        AccompStatus::InvalidConfig => c"invalid configuration",
        AccompStatus::BufferTooSmall => c"buffer too small",
        AccompStatus::Encode => c"encode error",
        AccompStatus::Decode => c"decode error",
        AccompStatus::Protocol => c"protocol error",
        AccompStatus::NoFeasibleRatio => c"no feasible step ratio",
        AccompStatus::Empty => c"nothing to take",
        AccompStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

#[no_mangle]
pub extern "C" fn accomp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
