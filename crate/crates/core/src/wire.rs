//! OSC-over-UDP audio transport.
//!
//! One OSC message per datagram. Audio travels as
//! `<address> ,iiib <step_id> <chunk_index> <chunk_total> <blob>` where the
//! blob is big-endian IEEE-754 float32 samples. A handful of small control
//! messages (`/config`, `/reset`, `/timings`) share the same framing.

use thiserror::Error;

pub const DEFAULT_PACKET_SIZE: usize = 4410;

pub const CONTEXT_ADDRESS: &str = "/context";
pub const PREDICTION_ADDRESS: &str = "/prediction";
pub const CONFIG_ADDRESS: &str = "/config";
pub const RESET_ADDRESS: &str = "/reset";
pub const TIMINGS_ADDRESS: &str = "/timings";

const CHUNK_TAGS: &str = ",iiib";
const CONFIG_TAGS: &str = ",iiiiii";
const RESET_TAGS: &str = ",";
const TIMINGS_TAGS: &str = ",iifffff";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeaderError {
    #[error("chunk_total must be at least 1")]
    ZeroTotal,
    #[error("chunk_index {index} out of range for chunk_total {total}")]
    IndexOutOfRange { index: u32, total: u32 },
    #[error("negative header field {0}")]
    Negative(&'static str),
    #[error("header field {0} does not fit in an int32")]
    TooLarge(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("payload of {len} samples exceeds packet size {packet_size}")]
    PayloadTooLarge { len: usize, packet_size: usize },
    #[error("empty sample payload")]
    EmptyPayload,
    #[error(transparent)]
    Header(#[from] HeaderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("message truncated at byte {at}")]
    Truncated { at: usize },
    #[error("malformed address pattern")]
    BadAddress,
    #[error("unknown address {0:?}")]
    UnknownAddress(String),
    #[error("unexpected type tags {found:?} for {address}")]
    BadTypeTags { address: String, found: String },
    #[error("blob length {0} is not a multiple of 4")]
    BlobLength(i32),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("empty sample payload")]
    EmptyPayload,
    #[error(transparent)]
    Header(#[from] HeaderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("step {step_id}: chunk_total changed from {expected} to {found}")]
    ChunkTotalMismatch {
        step_id: u32,
        expected: u32,
        found: u32,
    },
    #[error("step {step_id} chunk {chunk_index}: {len} samples, expected {expected}")]
    ChunkLength {
        step_id: u32,
        chunk_index: u32,
        len: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChunkHeader {
    step_id: u32,
    chunk_index: u32,
    chunk_total: u32,
}

impl ChunkHeader {
    pub fn new(step_id: u32, chunk_index: u32, chunk_total: u32) -> Result<Self, HeaderError> {
        if chunk_total == 0 {
            return Err(HeaderError::ZeroTotal);
        }
        if chunk_index >= chunk_total {
            return Err(HeaderError::IndexOutOfRange {
                index: chunk_index,
                total: chunk_total,
            });
        }
        if step_id > i32::MAX as u32 {
            return Err(HeaderError::TooLarge("step_id"));
        }
        if chunk_total > i32::MAX as u32 {
            return Err(HeaderError::TooLarge("chunk_total"));
        }
        Ok(Self {
            step_id,
            chunk_index,
            chunk_total,
        })
    }

    fn from_wire(step_id: i32, chunk_index: i32, chunk_total: i32) -> Result<Self, HeaderError> {
        if step_id < 0 {
            return Err(HeaderError::Negative("step_id"));
        }
        if chunk_index < 0 {
            return Err(HeaderError::Negative("chunk_index"));
        }
        if chunk_total < 0 {
            return Err(HeaderError::Negative("chunk_total"));
        }
        Self::new(step_id as u32, chunk_index as u32, chunk_total as u32)
    }

    pub fn step_id(&self) -> u32 {
        self.step_id
    }

    pub fn chunk_index(&self) -> u32 {
        self.chunk_index
    }

    pub fn chunk_total(&self) -> u32 {
        self.chunk_total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkAddress {
    Context,
    Prediction,
}

impl ChunkAddress {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChunkAddress::Context => CONTEXT_ADDRESS,
            ChunkAddress::Prediction => PREDICTION_ADDRESS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPacket {
    pub address: ChunkAddress,
    pub header: ChunkHeader,
    pub samples: Vec<f32>,
}

/// Session parameters that may change between steps. The receptive field
/// and sample rate are fixed for the life of a server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfigMessage {
    pub step_frames: u32,
    pub latent_frames: u32,
    pub lookahead_w: i32,
    pub fade_samples: u32,
    pub packet_size: u32,
    /// Index of the predicted stem.
    pub stem: u32,
}

/// Server-side stage durations for one cycle, sent after the last
/// prediction chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingReport {
    pub step_id: u32,
    pub forward_passes: u32,
    pub ingest_ms: f32,
    pub encode_ms: f32,
    pub sampling_ms: f32,
    pub decode_ms: f32,
    pub send_ms: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Chunk(ChunkPacket),
    Config(ConfigMessage),
    Reset,
    Timings(TimingReport),
}

// ── encoding ───────────────────────────────────────────────────────────

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(s.as_bytes());
    let pad = 4 - s.len() % 4;
    out.extend(std::iter::repeat(0u8).take(pad));
}

fn put_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_be_bytes());
}

/// Encodes one audio chunk as an OSC message.
pub fn encode_packet(packet: &ChunkPacket, packet_size: usize) -> Result<Vec<u8>, EncodeError> {
    if packet.samples.is_empty() {
        return Err(EncodeError::EmptyPayload);
    }
    if packet.samples.len() > packet_size {
        return Err(EncodeError::PayloadTooLarge {
            len: packet.samples.len(),
            packet_size,
        });
    }
    let h = packet.header;
    ChunkHeader::new(h.step_id, h.chunk_index, h.chunk_total)?;

    let blob_len = packet.samples.len() * 4;
    let mut out = Vec::with_capacity(32 + blob_len);
    put_str(&mut out, packet.address.as_str());
    put_str(&mut out, CHUNK_TAGS);
    put_i32(&mut out, h.step_id as i32);
    put_i32(&mut out, h.chunk_index as i32);
    put_i32(&mut out, h.chunk_total as i32);
    put_i32(&mut out, blob_len as i32);
    for &s in &packet.samples {
        put_f32(&mut out, s);
    }
    Ok(out)
}

fn int_field(v: u32, name: &'static str) -> Result<i32, HeaderError> {
    i32::try_from(v).map_err(|_| HeaderError::TooLarge(name))
}

pub fn encode_message(msg: &Message, packet_size: usize) -> Result<Vec<u8>, EncodeError> {
    match msg {
        Message::Chunk(p) => encode_packet(p, packet_size),
        Message::Config(c) => {
            let mut out = Vec::with_capacity(40);
            put_str(&mut out, CONFIG_ADDRESS);
            put_str(&mut out, CONFIG_TAGS);
            put_i32(&mut out, int_field(c.step_frames, "step_frames")?);
            put_i32(&mut out, int_field(c.latent_frames, "latent_frames")?);
            put_i32(&mut out, c.lookahead_w);
            put_i32(&mut out, int_field(c.fade_samples, "fade_samples")?);
            put_i32(&mut out, int_field(c.packet_size, "packet_size")?);
            put_i32(&mut out, int_field(c.stem, "stem")?);
            Ok(out)
        }
        Message::Reset => {
            let mut out = Vec::with_capacity(12);
            put_str(&mut out, RESET_ADDRESS);
            put_str(&mut out, RESET_TAGS);
            Ok(out)
        }
        Message::Timings(t) => {
            let mut out = Vec::with_capacity(48);
            put_str(&mut out, TIMINGS_ADDRESS);
            put_str(&mut out, TIMINGS_TAGS);
            put_i32(&mut out, int_field(t.step_id, "step_id")?);
            put_i32(&mut out, int_field(t.forward_passes, "forward_passes")?);
            for v in [t.ingest_ms, t.encode_ms, t.sampling_ms, t.decode_ms, t.send_ms] {
                put_f32(&mut out, v);
            }
            Ok(out)
        }
    }
}

/// Splits a step's audio into `packet_size` chunks with a shared step id.
pub fn chunk_samples(
    address: ChunkAddress,
    step_id: u32,
    samples: &[f32],
    packet_size: usize,
) -> Result<Vec<ChunkPacket>, EncodeError> {
    if samples.is_empty() {
        return Err(EncodeError::EmptyPayload);
    }
    if packet_size == 0 {
        return Err(EncodeError::PayloadTooLarge {
            len: samples.len(),
            packet_size,
        });
    }
    let total = samples.len().div_ceil(packet_size) as u32;
    samples
        .chunks(packet_size)
        .enumerate()
        .map(|(i, chunk)| {
            Ok(ChunkPacket {
                address,
                header: ChunkHeader::new(step_id, i as u32, total)?,
                samples: chunk.to_vec(),
            })
        })
        .collect()
}

/// Chunks and encodes in one go.
pub fn encode_step(
    address: ChunkAddress,
    step_id: u32,
    samples: &[f32],
    packet_size: usize,
) -> Result<Vec<Vec<u8>>, EncodeError> {
    chunk_samples(address, step_id, samples, packet_size)?
        .iter()
        .map(|p| encode_packet(p, packet_size))
        .collect()
}

// ── decoding ───────────────────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DecodeError::Truncated { at: self.buf.len() })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn string(&mut self) -> Result<&'a str, Option<DecodeError>> {
        let rest = &self.buf[self.pos..];
        let nul = rest.iter().position(|&b| b == 0).ok_or(None)?;
        let padded = (nul / 4 + 1) * 4;
        if padded > rest.len() {
            return Err(Some(DecodeError::Truncated { at: self.buf.len() }));
        }
        if rest[nul..padded].iter().any(|&b| b != 0) {
            return Err(None);
        }
        let s = std::str::from_utf8(&rest[..nul]).map_err(|_| None)?;
        self.pos += padded;
        Ok(s)
    }

    fn i32(&mut self) -> Result<i32, DecodeError> {
        let b = self.take(4)?;
        Ok(i32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, DecodeError> {
        let b = self.take(4)?;
        Ok(f32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<(), DecodeError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

/// Decodes any message this protocol speaks.
pub fn decode_message(bytes: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let address = r.string().map_err(|e| e.unwrap_or(DecodeError::BadAddress))?;
    if !address.starts_with('/') {
        return Err(DecodeError::BadAddress);
    }
    let tags = r.string().map_err(|e| {
        e.unwrap_or_else(|| DecodeError::BadTypeTags {
            address: address.to_string(),
            found: String::new(),
        })
    })?;
    let expect_tags = |want: &str| {
        if tags == want {
            Ok(())
        } else {
            Err(DecodeError::BadTypeTags {
                address: address.to_string(),
                found: tags.to_string(),
            })
        }
    };

    let msg = match address {
        CONTEXT_ADDRESS | PREDICTION_ADDRESS => {
            expect_tags(CHUNK_TAGS)?;
            let step_id = r.i32()?;
            let chunk_index = r.i32()?;
            let chunk_total = r.i32()?;
            let blob_len = r.i32()?;
            if blob_len < 0 || blob_len % 4 != 0 {
                return Err(DecodeError::BlobLength(blob_len));
            }
            if blob_len == 0 {
                return Err(DecodeError::EmptyPayload);
            }
            let raw = r.take(blob_len as usize)?;
            let header = ChunkHeader::from_wire(step_id, chunk_index, chunk_total)?;
            let samples = raw
                .chunks_exact(4)
                .map(|b| f32::from_be_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let address = if address == CONTEXT_ADDRESS {
                ChunkAddress::Context
            } else {
                ChunkAddress::Prediction
            };
            Message::Chunk(ChunkPacket {
                address,
                header,
                samples,
            })
        }
        CONFIG_ADDRESS => {
            expect_tags(CONFIG_TAGS)?;
            let step_frames = r.i32()?;
            let latent_frames = r.i32()?;
            let lookahead_w = r.i32()?;
            let fade = r.i32()?;
            let packet_size = r.i32()?;
            let stem = r.i32()?;
            if step_frames < 0 || latent_frames < 0 || fade < 0 || packet_size < 0 || stem < 0 {
                return Err(DecodeError::Header(HeaderError::Negative("config")));
            }
            Message::Config(ConfigMessage {
                step_frames: step_frames as u32,
                latent_frames: latent_frames as u32,
                lookahead_w,
                fade_samples: fade as u32,
                packet_size: packet_size as u32,
                stem: stem as u32,
            })
        }
        RESET_ADDRESS => {
            expect_tags(RESET_TAGS)?;
            Message::Reset
        }
        TIMINGS_ADDRESS => {
            expect_tags(TIMINGS_TAGS)?;
            let step_id = r.i32()?;
            let forward_passes = r.i32()?;
            if step_id < 0 || forward_passes < 0 {
                return Err(DecodeError::Header(HeaderError::Negative("step_id")));
            }
            Message::Timings(TimingReport {
                step_id: step_id as u32,
                forward_passes: forward_passes as u32,
                ingest_ms: r.f32()?,
                encode_ms: r.f32()?,
                sampling_ms: r.f32()?,
                decode_ms: r.f32()?,
                send_ms: r.f32()?,
            })
        }
        other => return Err(DecodeError::UnknownAddress(other.to_string())),
    };
    r.finish()?;
    Ok(msg)
}

/// Decodes an audio chunk; any other message is an [`DecodeError::UnknownAddress`].
pub fn decode_packet(bytes: &[u8]) -> Result<ChunkPacket, DecodeError> {
    match decode_message(bytes)? {
        Message::Chunk(p) => Ok(p),
        Message::Config(_) => Err(DecodeError::UnknownAddress(CONFIG_ADDRESS.into())),
        Message::Reset => Err(DecodeError::UnknownAddress(RESET_ADDRESS.into())),
        Message::Timings(_) => Err(DecodeError::UnknownAddress(TIMINGS_ADDRESS.into())),
    }
}

// ── reassembly ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum FeedOutcome {
    Incomplete,
    Complete { step_id: u32, samples: Vec<f32> },
    StaleDropped,
    DuplicateDropped,
}

#[derive(Debug)]
struct Partial {
    chunk_total: u32,
    received: Vec<bool>,
    count: u32,
    staging: Vec<f32>,
    last_len: usize,
}

/// Gathers the chunks of one step at a time.
///
/// The highest step id seen is the current step. Older steps are stale, a
/// newer step discards whatever partial data is held, and a step that has
/// completed (or expired) accepts nothing further.
#[derive(Debug)]
pub struct Reassembler {
    packet_size: usize,
    current_step_id: Option<u32>,
    partial: Option<Partial>,
}

impl Reassembler {
    pub fn new(packet_size: usize) -> Self {
        Self {
            packet_size,
            current_step_id: None,
            partial: None,
        }
    }

    pub fn packet_size(&self) -> usize {
        self.packet_size
    }

    /// Takes effect from the next step.
    pub fn set_packet_size(&mut self, packet_size: usize) {
        self.packet_size = packet_size;
    }

    pub fn current_step_id(&self) -> Option<u32> {
        self.current_step_id
    }

    /// True while a step has some but not all of its chunks.
    pub fn is_partial(&self) -> bool {
        self.partial.is_some()
    }

    /// Forget everything, including which step ids have been seen.
    pub fn reset(&mut self) {
        self.current_step_id = None;
        self.partial = None;
    }

    /// Abandons an incomplete step; returns its id if there was one.
    pub fn expire(&mut self) -> Option<u32> {
        self.partial.take().and(self.current_step_id)
    }

    pub fn feed(&mut self, packet: &ChunkPacket) -> Result<FeedOutcome, ProtocolError> {
        let h = packet.header;
        match self.current_step_id {
            Some(cur) if h.step_id < cur => return Ok(FeedOutcome::StaleDropped),
            Some(cur) if h.step_id == cur && self.partial.is_none() => {
                return Ok(FeedOutcome::DuplicateDropped)
            }
            Some(cur) if h.step_id == cur => {}
            _ => {
                self.current_step_id = Some(h.step_id);
                self.partial = Some(Partial {
                    chunk_total: h.chunk_total,
                    received: vec![false; h.chunk_total as usize],
                    count: 0,
                    staging: vec![0.0; h.chunk_total as usize * self.packet_size],
                    last_len: 0,
                });
            }
        }

        let ps = self.packet_size;
        let partial = self.partial.as_mut().expect("partial set above");
        if h.chunk_total != partial.chunk_total {
            return Err(ProtocolError::ChunkTotalMismatch {
                step_id: h.step_id,
                expected: partial.chunk_total,
                found: h.chunk_total,
            });
        }
        let idx = h.chunk_index as usize;
        if partial.received[idx] {
            return Ok(FeedOutcome::DuplicateDropped);
        }
        let is_last = h.chunk_index + 1 == h.chunk_total;
        let len = packet.samples.len();
        if (!is_last && len != ps) || (is_last && len > ps) || len == 0 {
            return Err(ProtocolError::ChunkLength {
                step_id: h.step_id,
                chunk_index: h.chunk_index,
                len,
                expected: ps,
            });
        }
        partial.staging[idx * ps..idx * ps + len].copy_from_slice(&packet.samples);
        partial.received[idx] = true;
        partial.count += 1;
        if is_last {
            partial.last_len = len;
        }
        if partial.count < partial.chunk_total {
            return Ok(FeedOutcome::Incomplete);
        }

        let mut done = self.partial.take().expect("partial present");
        done.staging
            .truncate((done.chunk_total as usize - 1) * ps + done.last_len);
        Ok(FeedOutcome::Complete {
            step_id: h.step_id,
            samples: done.staging,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn header(s: u32, i: u32, t: u32) -> ChunkHeader {
        ChunkHeader::new(s, i, t).unwrap()
    }

    fn ramp(n: usize) -> Vec<f32> {
        (0..n).map(|i| (i as f32 / n as f32) * 2.0 - 1.0).collect()
    }

    #[test]
    fn round_trip_example() {
        let p = ChunkPacket {
            address: ChunkAddress::Context,
            header: header(7, 3, 15),
            samples: ramp(4410),
        };
        let bytes = encode_packet(&p, 4410).unwrap();
        assert_eq!(bytes.len() % 4, 0);
        assert_eq!(decode_packet(&bytes).unwrap(), p);
    }

    #[test]
    fn minimal_payload_layout() {
        let p = ChunkPacket {
            address: ChunkAddress::Context,
            header: header(0, 0, 1),
            samples: vec![0.5],
        };
        let bytes = encode_packet(&p, 4410).unwrap();
        // "/context\0\0\0\0" + ",iiib\0\0\0" + 3 ints + blob size + 1 float
        assert_eq!(bytes.len(), 12 + 8 + 12 + 4 + 4);
        assert_eq!(&bytes[0..12], b"/context\0\0\0\0");
        assert_eq!(&bytes[12..20], b",iiib\0\0\0");
        assert_eq!(&bytes[32..36], &4i32.to_be_bytes());
        assert_eq!(&bytes[36..40], &0.5f32.to_be_bytes());
    }

    #[test]
    fn fifteen_chunks_per_step() {
        let packets = chunk_samples(ChunkAddress::Context, 0, &ramp(66_150), 4410).unwrap();
        assert_eq!(packets.len(), 15);
        assert!(packets.iter().all(|p| p.samples.len() == 4410));
        // fade prelude + step
        let packets = chunk_samples(ChunkAddress::Prediction, 0, &ramp(67_032), 4410).unwrap();
        assert_eq!(packets.len(), 16);
        assert_eq!(packets[15].samples.len(), 67_032 - 15 * 4410);
    }

    #[test]
    fn encode_rejects_oversize_and_empty() {
        let p = ChunkPacket {
            address: ChunkAddress::Context,
            header: header(0, 0, 1),
            samples: vec![0.0; 11],
        };
        assert_eq!(
            encode_packet(&p, 10),
            Err(EncodeError::PayloadTooLarge {
                len: 11,
                packet_size: 10
            })
        );
        let empty = ChunkPacket {
            samples: vec![],
            ..p
        };
        assert_eq!(encode_packet(&empty, 10), Err(EncodeError::EmptyPayload));
    }

    #[test]
    fn header_invariants() {
        assert_eq!(ChunkHeader::new(0, 0, 0), Err(HeaderError::ZeroTotal));
        assert!(matches!(
            ChunkHeader::new(0, 3, 3),
            Err(HeaderError::IndexOutOfRange { .. })
        ));
    }

    fn raw_chunk(tags: &str, ints: &[i32], blob: Option<&[u8]>) -> Vec<u8> {
        let mut out = Vec::new();
        put_str(&mut out, CONTEXT_ADDRESS);
        put_str(&mut out, tags);
        for &i in ints {
            put_i32(&mut out, i);
        }
        if let Some(b) = blob {
            put_i32(&mut out, b.len() as i32);
            out.extend_from_slice(b);
        }
        out
    }

    #[test]
    fn decode_errors_are_distinct() {
        let missing_blob = raw_chunk(",iii", &[1, 0, 1], None);
        assert!(matches!(
            decode_packet(&missing_blob),
            Err(DecodeError::BadTypeTags { .. })
        ));

        let bad_index = raw_chunk(CHUNK_TAGS, &[1, 5, 5], Some(&[0, 0, 0, 0]));
        assert_eq!(
            decode_packet(&bad_index),
            Err(DecodeError::Header(HeaderError::IndexOutOfRange { index: 5, total: 5 }))
        );

        let mut odd_blob = raw_chunk(CHUNK_TAGS, &[1, 0, 1], None);
        put_i32(&mut odd_blob, 6);
        odd_blob.extend_from_slice(&[0; 8]);
        assert_eq!(decode_packet(&odd_blob), Err(DecodeError::BlobLength(6)));

        let good = raw_chunk(CHUNK_TAGS, &[1, 0, 1], Some(&[0, 0, 0, 0, 0, 0, 0, 0]));
        assert!(decode_packet(&good).is_ok());
        assert!(matches!(
            decode_packet(&good[..good.len() - 1]),
            Err(DecodeError::Truncated { .. })
        ));
        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0; 4]);
        assert_eq!(decode_packet(&trailing), Err(DecodeError::TrailingBytes(4)));

        assert_eq!(decode_packet(b"noslash\0"), Err(DecodeError::BadAddress));
        assert_eq!(decode_packet(b"/context"), Err(DecodeError::BadAddress));
        assert_eq!(decode_packet(&[]), Err(DecodeError::BadAddress));
        let mut unknown = Vec::new();
        put_str(&mut unknown, "/other");
        put_str(&mut unknown, ",");
        assert_eq!(
            decode_packet(&unknown),
            Err(DecodeError::UnknownAddress("/other".into()))
        );
    }

    #[test]
    fn control_messages_round_trip() {
        let msgs = [
            Message::Reset,
            Message::Config(ConfigMessage {
                step_frames: 8,
                latent_frames: 64,
                lookahead_w: -1,
                fade_samples: 882,
                packet_size: 4410,
                stem: 2,
            }),
            Message::Timings(TimingReport {
                step_id: 3,
                forward_passes: 20,
                ingest_ms: 1.5,
                encode_ms: 2.0,
                sampling_ms: 480.0,
                decode_ms: 72.0,
                send_ms: 0.25,
            }),
        ];
        for m in msgs {
            let bytes = encode_message(&m, 4410).unwrap();
            assert_eq!(bytes.len() % 4, 0);
            assert_eq!(decode_message(&bytes).unwrap(), m);
        }
    }

    fn step_packets(step: u32, n: usize) -> (Vec<f32>, Vec<ChunkPacket>) {
        let samples: Vec<f32> = (0..n).map(|i| ((i * 7 + step as usize) % 1000) as f32 / 1000.0).collect();
        let packets = chunk_samples(ChunkAddress::Context, step, &samples, 4410).unwrap();
        (samples, packets)
    }

    #[test]
    fn reverse_order_reconstruction() {
        let (samples, packets) = step_packets(7, 66_150);
        let mut r = Reassembler::new(4410);
        for (k, p) in packets.iter().rev().enumerate() {
            let out = r.feed(p).unwrap();
            if k < 14 {
                assert_eq!(out, FeedOutcome::Incomplete);
            } else {
                assert_eq!(
                    out,
                    FeedOutcome::Complete {
                        step_id: 7,
                        samples: samples.clone()
                    }
                );
            }
        }
    }

    #[test]
    fn stale_and_duplicate_handling() {
        let (_, p6) = step_packets(6, 66_150);
        let (_, p5) = step_packets(5, 66_150);
        let mut r = Reassembler::new(4410);
        r.feed(&p6[0]).unwrap();
        assert_eq!(r.feed(&p5[0]).unwrap(), FeedOutcome::StaleDropped);

        let (_, p7) = step_packets(7, 66_150);
        assert_eq!(r.feed(&p7[3]).unwrap(), FeedOutcome::Incomplete);
        assert_eq!(r.feed(&p7[3]).unwrap(), FeedOutcome::DuplicateDropped);
        // step 6 partial was discarded when 7 arrived
        assert_eq!(r.feed(&p6[1]).unwrap(), FeedOutcome::StaleDropped);
    }

    #[test]
    fn completed_step_accepts_nothing_more() {
        let (_, p) = step_packets(2, 9000);
        let mut r = Reassembler::new(4410);
        for pk in &p {
            r.feed(pk).unwrap();
        }
        assert_eq!(r.feed(&p[0]).unwrap(), FeedOutcome::DuplicateDropped);
        assert_eq!(r.current_step_id(), Some(2));
    }

    #[test]
    fn chunk_total_disagreement_is_a_protocol_error() {
        let mut r = Reassembler::new(4);
        let a = ChunkPacket {
            address: ChunkAddress::Context,
            header: header(1, 0, 3),
            samples: vec![0.0; 4],
        };
        let b = ChunkPacket {
            header: header(1, 1, 4),
            ..a.clone()
        };
        r.feed(&a).unwrap();
        assert!(matches!(
            r.feed(&b),
            Err(ProtocolError::ChunkTotalMismatch { .. })
        ));
        let short = ChunkPacket {
            header: header(1, 1, 3),
            samples: vec![0.0; 3],
            ..a
        };
        assert!(matches!(r.feed(&short), Err(ProtocolError::ChunkLength { .. })));
    }

    #[test]
    fn expire_drops_partial_step() {
        let (_, p) = step_packets(4, 66_150);
        let mut r = Reassembler::new(4410);
        for pk in &p[..14] {
            r.feed(pk).unwrap();
        }
        assert_eq!(r.expire(), Some(4));
        assert_eq!(r.expire(), None);
        assert_eq!(r.feed(&p[14]).unwrap(), FeedOutcome::DuplicateDropped);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            step in 0u32..i32::MAX as u32,
            total in 1u32..64,
            idx_seed in any::<u32>(),
            samples in prop::collection::vec(-1.0f32..1.0, 1..300),
        ) {
            let p = ChunkPacket {
                address: if step % 2 == 0 { ChunkAddress::Context } else { ChunkAddress::Prediction },
                header: header(step, idx_seed % total, total),
                samples,
            };
            let bytes = encode_packet(&p, 300).unwrap();
            prop_assert_eq!(bytes.len() % 4, 0);
            prop_assert_eq!(decode_packet(&bytes).unwrap(), p);
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
            let _ = decode_message(&bytes);
        }

        #[test]
        fn order_independence(seed in any::<u64>(), n in 1usize..20_000) {
            let (samples, mut packets) = step_packets(3, n);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            packets.shuffle(&mut rng);
            let mut r = Reassembler::new(4410);
            let mut complete = None;
            for p in &packets {
                if let FeedOutcome::Complete { samples, .. } = r.feed(p).unwrap() {
                    prop_assert!(complete.is_none());
                    complete = Some(samples);
                }
            }
            prop_assert_eq!(complete, Some(samples));
        }
    }
}
