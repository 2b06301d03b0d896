//! Inference server: chunk ingestion, rolling buffers, generator calls and
//! prediction return.
//!
//! The receive loop owns an [`Ingest`], the worker owns the
//! [`ServerState`] and the generator, and the send path owns the outbound
//! socket. They communicate only through channels.

use std::fmt;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use thiserror::Error;

use crate::clock::{ms, Clock, SharedClock};
use crate::generators::{Generate, GeneratorError, GeneratorRequest, GeneratorResponse};
use crate::net::{bind_udp, is_timeout};
use crate::stems::Stem;
use crate::window::{shift_left, StepRatio, WindowConfig, WindowError};
use crate::wire::{
    decode_message, encode_message, encode_step, ChunkAddress, ChunkPacket, ConfigMessage,
    EncodeError, FeedOutcome, Message, ProtocolError, Reassembler, TimingReport,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CycleError {
    #[error("step {step_id}: received {got} samples, expected {expected}")]
    StepLength {
        step_id: u32,
        expected: usize,
        got: usize,
    },
    #[error("step {step_id}: {source}")]
    Generator {
        step_id: u32,
        source: GeneratorError,
    },
    #[error("step {step_id}: generator answered for step {answered}")]
    WrongStep { step_id: u32, answered: u32 },
    #[error("step {step_id}: {source}")]
    Encode { step_id: u32, source: EncodeError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Not all chunks arrived within one step duration.
    Timeout,
    /// A newer step started before this one completed.
    Superseded,
    /// The chunks disagreed with each other.
    Protocol,
    /// The generator or the cycle failed.
    Failed,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::Timeout => "timeout",
            DropReason::Superseded => "superseded",
            DropReason::Protocol => "protocol",
            DropReason::Failed => "failed",
        }
    }
}

impl FromStr for DropReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [DropReason::Timeout, DropReason::Superseded, DropReason::Protocol, DropReason::Failed]
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown drop reason {s:?}"))
    }
}

/// A fully reassembled context step, ready for a cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleTrigger {
    pub step_id: u32,
    pub samples: Vec<f32>,
    /// When the first chunk of the step arrived.
    pub first_chunk_at: Duration,
    pub completed_at: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IngestEvent {
    Trigger(CycleTrigger),
    Dropped { step_id: u32, reason: DropReason },
    Config(ConfigMessage),
    Reset,
}

/// Reassembly of `/context` steps with a completion deadline.
#[derive(Debug)]
pub struct Ingest {
    reassembler: Reassembler,
    timeout: Duration,
    partial_since: Option<Duration>,
    stale_packets: u64,
    duplicate_packets: u64,
}

impl Ingest {
    pub fn new(packet_size: usize, timeout: Duration) -> Self {
        Self {
            reassembler: Reassembler::new(packet_size),
            timeout,
            partial_since: None,
            stale_packets: 0,
            duplicate_packets: 0,
        }
    }

    /// Timeout of one step duration for `cfg`.
    pub fn for_config(cfg: &WindowConfig, packet_size: usize) -> Self {
        Self::new(packet_size, Duration::from_secs_f64(cfg.step_ms() / 1000.0))
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn stale_packets(&self) -> u64 {
        self.stale_packets
    }

    pub fn duplicate_packets(&self) -> u64 {
        self.duplicate_packets
    }

    pub fn on_message(&mut self, msg: Message, now: Duration) -> Vec<IngestEvent> {
        match msg {
            Message::Chunk(p) if p.address == ChunkAddress::Context => self.on_chunk(&p, now),
            Message::Chunk(_) | Message::Timings(_) => Vec::new(),
            Message::Config(c) => {
                self.reassembler.set_packet_size(c.packet_size as usize);
                vec![IngestEvent::Config(c)]
            }
            Message::Reset => {
                self.reassembler.reset();
                self.partial_since = None;
                vec![IngestEvent::Reset]
            }
        }
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn on_chunk(&mut self, packet: &ChunkPacket, now: Duration) -> Vec<IngestEvent> {
        let mut events = Vec::new();
        let step = packet.header.step_id();
        if let Some(cur) = self.reassembler.current_step_id() {
            if step > cur && self.reassembler.is_partial() {
                events.push(IngestEvent::Dropped {
                    step_id: cur,
                    reason: DropReason::Superseded,
                });
                self.partial_since = None;
            }
        }
        match self.reassembler.feed(packet) {
            Ok(FeedOutcome::Incomplete) => {
                self.partial_since.get_or_insert(now);
            }
            Ok(FeedOutcome::Complete { step_id, samples }) => {
                let first = self.partial_since.take().unwrap_or(now);
                events.push(IngestEvent::Trigger(CycleTrigger {
                    step_id,
                    samples,
                    first_chunk_at: first,
                    completed_at: now,
                }));
            }
            Ok(FeedOutcome::StaleDropped) => self.stale_packets += 1,
            Ok(FeedOutcome::DuplicateDropped) => self.duplicate_packets += 1,
            Err(ProtocolError::ChunkTotalMismatch { step_id, .. })
            | Err(ProtocolError::ChunkLength { step_id, .. }) => {
                self.reassembler.expire();
                self.partial_since = None;
                events.push(IngestEvent::Dropped {
                    step_id,
                    reason: DropReason::Protocol,
                });
            }
        }
        events
    }

    /// Drops the partial step once it has been incomplete for longer than
    /// the timeout.
    pub fn poll(&mut self, now: Duration) -> Option<IngestEvent> {
        let since = self.partial_since?;
        if now.saturating_sub(since) < self.timeout {
            return None;
        }
        self.partial_since = None;
        self.reassembler.expire().map(|step_id| IngestEvent::Dropped {
            step_id,
            reason: DropReason::Timeout,
        })
    }
}

/// Stage durations of one server cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ServerTimings {
    pub ingest_ms: f64,
    pub encode_ms: f64,
    pub sampling_ms: f64,
    pub decode_ms: f64,
    pub forward_passes: u32,
}

impl ServerTimings {
    pub fn report(&self, step_id: u32, send_ms: f64) -> TimingReport {
        TimingReport {
            step_id,
            forward_passes: self.forward_passes,
            ingest_ms: self.ingest_ms as f32,
            encode_ms: self.encode_ms as f32,
            sampling_ms: self.sampling_ms as f32,
            decode_ms: self.decode_ms as f32,
            send_ms: send_ms as f32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CycleOutput {
    pub step_id: u32,
    pub response: GeneratorResponse,
    /// Encoded `/prediction` datagrams.
    pub packets: Vec<Vec<u8>>,
    pub timings: ServerTimings,
}

/// Rolling buffers of one session. Both rings hold `T * sr` samples of
/// audio and move left by one step per cycle.
#[derive(Debug, Clone)]
pub struct ServerState {
    cfg: WindowConfig,
    packet_size: usize,
    stem: Stem,
    context_ring: Vec<f32>,
    generated_ring: Vec<f32>,
    current_step_id: Option<u32>,
    cycles: u64,
}

impl ServerState {
    pub fn new(cfg: WindowConfig, packet_size: usize, stem: Stem) -> Self {
        let n = cfg.window_samples();
        Self {
            cfg,
            packet_size,
            stem,
            context_ring: vec![0.0; n],
            generated_ring: vec![0.0; n],
            current_step_id: None,
            cycles: 0,
        }
    }

    pub fn cfg(&self) -> &WindowConfig {
        &self.cfg
    }

    pub fn packet_size(&self) -> usize {
        self.packet_size
    }

    pub fn stem(&self) -> Stem {
        self.stem
    }

    pub fn context_ring(&self) -> &[f32] {
        &self.context_ring
    }

    pub fn generated_ring(&self) -> &[f32] {
        &self.generated_ring
    }

    pub fn current_step_id(&self) -> Option<u32> {
        self.current_step_id
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    /// Applies a client's session parameters. The receptive field, sample
    /// rate and latent grid stay fixed.
    pub fn apply_config(&mut self, msg: &ConfigMessage) -> Result<(), WindowError> {
        if msg.latent_frames != self.cfg.latent_frames() {
            return Err(WindowError::NotOnLatentGrid {
                ratio: format!("{}/{}", msg.step_frames, msg.latent_frames),
                latent_frames: self.cfg.latent_frames(),
            });
        }
        let ratio = StepRatio::new(msg.step_frames, msg.latent_frames)?;
        let cfg = WindowConfig::new(
            self.cfg.window_samples(),
            self.cfg.sample_rate(),
            self.cfg.latent_bins(),
            ratio,
            msg.lookahead_w,
            msg.fade_samples as usize,
        )?;
        let stem = Stem::from_index(msg.stem as usize).unwrap_or(self.stem);
        self.cfg = cfg;
        self.packet_size = msg.packet_size as usize;
        self.stem = stem;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.context_ring.fill(0.0);
        self.generated_ring.fill(0.0);
        self.current_step_id = None;
        self.cycles = 0;
    }

    /// The model window for a ring ending at the current boundary: its
    /// right edge sits `(w + 1)` steps later, and everything past the
    /// visible context is zero.
    pub fn context_window(cfg: &WindowConfig, ring: &[f32]) -> Vec<f32> {
        let n = cfg.window_samples();
        let lead = (i64::from(cfg.lookahead()) + 1) as usize * cfg.step_samples();
        let mut out = vec![0.0f32; n];
        out[..n - lead].copy_from_slice(&ring[lead..]);
        out[cfg.context_visible_samples()..].fill(0.0);
        out
    }

    pub fn run_cycle(
        &mut self,
        trigger: &CycleTrigger,
        generator: &mut dyn Generate,
        clock: &dyn Clock,
    ) -> Result<CycleOutput, CycleError> {
        let cfg = self.cfg;
        let step_id = trigger.step_id;
        let step = cfg.step_samples();
        if trigger.samples.len() != step {
            return Err(CycleError::StepLength {
                step_id,
                expected: step,
                got: trigger.samples.len(),
            });
        }
        let mut ring = self.context_ring.clone();
        shift_left(&mut ring, step);
        let n = ring.len();
        ring[n - step..].copy_from_slice(&trigger.samples);
        let mut prior = self.generated_ring.clone();
        shift_left(&mut prior, step);

        let req = GeneratorRequest {
            context_audio: Self::context_window(&cfg, &ring),
            prior_target: prior,
            instrument: self.stem.one_hot(),
            cfg,
            step_id,
        };
        let ingest_ms = ms(clock.now().saturating_sub(trigger.first_chunk_at));
        let response = generator
            .generate(&req)
            .map_err(|source| CycleError::Generator { step_id, source })?;
        if response.step_id != step_id {
            return Err(CycleError::WrongStep {
                step_id,
                answered: response.step_id,
            });
        }
        response
            .validate(&cfg)
            .map_err(|source| CycleError::Generator { step_id, source })?;
        let packets = encode_step(ChunkAddress::Prediction, step_id, &response.audio, self.packet_size)
            .map_err(|source| CycleError::Encode { step_id, source })?;

        let mut prior = req.prior_target;
        prior[n - step..].copy_from_slice(response.body(&cfg));
        self.context_ring = ring;
        self.generated_ring = prior;
        self.current_step_id = Some(step_id);
        self.cycles += 1;

        let t = response.timings;
        Ok(CycleOutput {
            step_id,
            timings: ServerTimings {
                ingest_ms,
                encode_ms: t.encode_ms,
                sampling_ms: t.sampling_ms,
                decode_ms: t.decode_ms,
                forward_passes: t.forward_passes,
            },
            response,
            packets,
        })
    }
}

// ── event log ──────────────────────────────────────────────────────────

/// One line of the server's stdout log.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerEvent {
    Listening { recv: SocketAddr, send_to: SocketAddr },
    Cycle(TimingReport),
    Dropped { step_id: u32, reason: DropReason },
    Error { step_id: Option<u32>, message: String },
    Config(ConfigMessage),
    Reset,
}

impl fmt::Display for ServerEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServerEvent::Listening { recv, send_to } => {
                write!(f, "event=listening recv={recv} send_to={send_to}")
            }
            ServerEvent::Cycle(t) => write!(
                f,
                "event=cycle step={} passes={} ingest_ms={:.3} encode_ms={:.3} sampling_ms={:.3} decode_ms={:.3} send_ms={:.3}",
                t.step_id, t.forward_passes, t.ingest_ms, t.encode_ms, t.sampling_ms, t.decode_ms, t.send_ms
            ),
            ServerEvent::Dropped { step_id, reason } => {
                write!(f, "event=dropped step={step_id} reason={}", reason.as_str())
            }
            ServerEvent::Error { step_id, message } => {
                let step = step_id.map_or("-".to_string(), |s| s.to_string());
                write!(f, "event=error step={step} message={}", message.replace(char::is_whitespace, "_"))
            }
            ServerEvent::Config(c) => write!(
                f,
                "event=config step_frames={} latent_frames={} w={} fade={} packet_size={} stem={}",
                c.step_frames, c.latent_frames, c.lookahead_w, c.fade_samples, c.packet_size, c.stem
            ),
            ServerEvent::Reset => write!(f, "event=reset"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad event line: {0}")]
pub struct EventParseError(pub String);

impl FromStr for ServerEvent {
    type Err = EventParseError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = || EventParseError(line.to_string());
        let fields: Vec<(&str, &str)> = line
            .split_whitespace()
            .map(|tok| tok.split_once('=').ok_or_else(bad))
            .collect::<Result<_, _>>()?;
        let get = |key: &str| fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).ok_or_else(bad);
        fn num<T: FromStr>(v: &str, bad: impl Fn() -> EventParseError) -> Result<T, EventParseError> {
            v.parse().map_err(|_| bad())
        }
        match get("event")? {
            "listening" => Ok(ServerEvent::Listening {
                recv: num(get("recv")?, bad)?,
                send_to: num(get("send_to")?, bad)?,
            }),
            "cycle" => Ok(ServerEvent::Cycle(TimingReport {
                step_id: num(get("step")?, bad)?,
                forward_passes: num(get("passes")?, bad)?,
                ingest_ms: num(get("ingest_ms")?, bad)?,
                encode_ms: num(get("encode_ms")?, bad)?,
                sampling_ms: num(get("sampling_ms")?, bad)?,
                decode_ms: num(get("decode_ms")?, bad)?,
                send_ms: num(get("send_ms")?, bad)?,
            })),
            "dropped" => Ok(ServerEvent::Dropped {
                step_id: num(get("step")?, bad)?,
                reason: get("reason")?.parse().map_err(|_| bad())?,
            }),
            "error" => {
                let step = get("step")?;
                Ok(ServerEvent::Error {
                    step_id: if step == "-" { None } else { Some(num(step, bad)?) },
                    message: get("message")?.replace('_', " "),
                })
            }
            "config" => Ok(ServerEvent::Config(ConfigMessage {
                step_frames: num(get("step_frames")?, bad)?,
                latent_frames: num(get("latent_frames")?, bad)?,
                lookahead_w: num(get("w")?, bad)?,
                fade_samples: num(get("fade")?, bad)?,
                packet_size: num(get("packet_size")?, bad)?,
                stem: num(get("stem")?, bad)?,
            })),
            "reset" => Ok(ServerEvent::Reset),
            _ => Err(bad()),
        }
    }
}

// ── UDP runtime ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub recv_addr: SocketAddr,
    /// Where predictions go.
    pub client_addr: SocketAddr,
    pub cfg: WindowConfig,
    pub packet_size: usize,
    pub stem: Stem,
}

pub struct ServerHandle {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    events: Receiver<ServerEvent>,
    local_addr: SocketAddr,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn events(&self) -> &Receiver<ServerEvent> {
        &self.events
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

enum Outbound {
    Cycle(CycleOutput),
}

/// Starts the receive loop, the inference worker and the send path.
pub fn spawn(
    opts: ServerOptions,
    generator: Box<dyn Generate>,
    clock: SharedClock,
) -> io::Result<ServerHandle> {
    let recv_sock = bind_udp(opts.recv_addr)?;
    let local_addr = recv_sock.local_addr()?;
    let send_sock = UdpSocket::bind(crate::net::any_addr(0))?;
    let stop = Arc::new(AtomicBool::new(false));
    let (ev_tx, ev_rx) = unbounded();
    let (work_tx, work_rx) = unbounded::<IngestEvent>();
    let (out_tx, out_rx) = unbounded::<Outbound>();

    let _ = ev_tx.send(ServerEvent::Listening {
        recv: local_addr,
        send_to: opts.client_addr,
    });

    let recv = {
        let stop = stop.clone();
        let clock = clock.clone();
        let ev_tx = ev_tx.clone();
        let ingest = Ingest::for_config(&opts.cfg, opts.packet_size);
        let window_samples = opts.cfg.window_samples();
        let sample_rate = opts.cfg.sample_rate();
        std::thread::Builder::new()
            .name("server-recv".into())
            .spawn(move || {
                receive_loop(recv_sock, ingest, window_samples, sample_rate, clock, stop, work_tx, ev_tx)
            })?
    };

    let worker = {
        let clock = clock.clone();
        let ev_tx = ev_tx.clone();
        let state = ServerState::new(opts.cfg, opts.packet_size, opts.stem);
        std::thread::Builder::new()
            .name("server-worker".into())
            .spawn(move || worker_loop(state, generator, clock, work_rx, out_tx, ev_tx))?
    };

    let sender = {
        let target = opts.client_addr;
        std::thread::Builder::new()
            .name("server-send".into())
            .spawn(move || send_loop(send_sock, target, clock, out_rx, ev_tx))?
    };

    Ok(ServerHandle {
        stop,
        threads: vec![recv, worker, sender],
        events: ev_rx,
        local_addr,
    })
}

#[allow(clippy::too_many_arguments)]
fn receive_loop(
    sock: UdpSocket,
    mut ingest: Ingest,
    window_samples: usize,
    sample_rate: u32,
    clock: SharedClock,
    stop: Arc<AtomicBool>,
    work: Sender<IngestEvent>,
    events: Sender<ServerEvent>,
) {
    let mut buf = vec![0u8; 65_536];
    while !stop.load(Ordering::SeqCst) {
        match sock.recv_from(&mut buf) {
            Ok((n, _)) => match decode_message(&buf[..n]) {
                Ok(msg) => {
                    for ev in ingest.on_message(msg, clock.now()) {
                        if let IngestEvent::Config(c) = &ev {
                            let step = window_samples as f64 * f64::from(c.step_frames)
                                / f64::from(c.latent_frames.max(1));
                            ingest.set_timeout(Duration::from_secs_f64(step / f64::from(sample_rate)));
                        }
                        forward(ev, &work, &events);
                    }
                }
                Err(e) => {
                    let _ = events.send(ServerEvent::Error {
                        step_id: None,
                        message: e.to_string(),
                    });
                }
            },
            Err(e) if is_timeout(&e) => {}
            Err(e) => {
                let _ = events.send(ServerEvent::Error {
                    step_id: None,
                    message: e.to_string(),
                });
            }
        }
        if let Some(ev) = ingest.poll(clock.now()) {
            forward(ev, &work, &events);
        }
    }
}

fn forward(ev: IngestEvent, work: &Sender<IngestEvent>, events: &Sender<ServerEvent>) {
    if let IngestEvent::Dropped { step_id, reason } = ev {
        let _ = events.send(ServerEvent::Dropped { step_id, reason });
    } else {
        let _ = work.send(ev);
    }
}

fn worker_loop(
    mut state: ServerState,
    mut generator: Box<dyn Generate>,
    clock: SharedClock,
    work: Receiver<IngestEvent>,
    out: Sender<Outbound>,
    events: Sender<ServerEvent>,
) {
    for ev in work.iter() {
        match ev {
            IngestEvent::Trigger(t) => match state.run_cycle(&t, generator.as_mut(), clock.as_ref()) {
                Ok(done) => {
                    let _ = out.send(Outbound::Cycle(done));
                }
                Err(e) => {
                    let _ = events.send(ServerEvent::Error {
                        step_id: Some(t.step_id),
                        message: e.to_string(),
                    });
                    let _ = events.send(ServerEvent::Dropped {
                        step_id: t.step_id,
                        reason: DropReason::Failed,
                    });
                }
            },
            IngestEvent::Config(c) => match state.apply_config(&c) {
                Ok(()) => {
                    let _ = events.send(ServerEvent::Config(c));
                }
                Err(e) => {
                    let _ = events.send(ServerEvent::Error {
                        step_id: None,
                        message: format!("rejected config: {e}"),
                    });
                }
            },
            IngestEvent::Reset => {
                state.reset();
                let _ = events.send(ServerEvent::Reset);
            }
            IngestEvent::Dropped { .. } => {}
        }
    }
}

fn send_loop(
    sock: UdpSocket,
    target: SocketAddr,
    clock: SharedClock,
    out: Receiver<Outbound>,
    events: Sender<ServerEvent>,
) {
    for Outbound::Cycle(done) in out.iter() {
        let t0 = clock.now();
        let mut failed = None;
        for p in &done.packets {
            if let Err(e) = sock.send_to(p, target) {
                failed = Some(e);
                break;
            }
        }
        let send_ms = ms(clock.now().saturating_sub(t0));
        if let Some(e) = failed {
            let _ = events.send(ServerEvent::Error {
                step_id: Some(done.step_id),
                message: e.to_string(),
            });
            continue;
        }
        let report = done.timings.report(done.step_id, send_ms);
        if let Ok(bytes) = encode_message(&Message::Timings(report), 0) {
            let _ = sock.send_to(&bytes, target);
        }
        let _ = events.send(ServerEvent::Cycle(report));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::generators::{GeneratorKind, GeneratorSpec};
    use crate::wire::{chunk_samples, DEFAULT_PACKET_SIZE};

    fn cfg() -> WindowConfig {
        WindowConfig::default()
    }

    fn chunks(step_id: u32, samples: &[f32]) -> Vec<ChunkPacket> {
        chunk_samples(ChunkAddress::Context, step_id, samples, DEFAULT_PACKET_SIZE).unwrap()
    }

    fn ms_(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    #[test]
    fn triggers_on_the_last_chunk() {
        let mut ing = Ingest::for_config(&cfg(), DEFAULT_PACKET_SIZE);
        let step: Vec<f32> = (0..66_150).map(|i| i as f32).collect();
        let pk = chunks(0, &step);
        assert_eq!(pk.len(), 15);
        for (i, p) in pk.iter().enumerate() {
            let ev = ing.on_chunk(p, ms_(i as u64));
            if i < 14 {
                assert!(ev.is_empty());
            } else {
                match &ev[..] {
                    [IngestEvent::Trigger(t)] => {
                        assert_eq!(t.samples, step);
                        assert_eq!(t.first_chunk_at, ms_(0));
                        assert_eq!(t.completed_at, ms_(14));
                    }
                    other => panic!("{other:?}"),
                }
            }
        }
    }

    #[test]
    fn incomplete_step_times_out() {
        let mut ing = Ingest::for_config(&cfg(), DEFAULT_PACKET_SIZE);
        assert_eq!(ing.timeout(), ms_(1500));
        let pk = chunks(3, &[0.5; 66_150]);
        for p in &pk[..14] {
            assert!(ing.on_chunk(p, ms_(100)).is_empty());
        }
        assert_eq!(ing.poll(ms_(1599)), None);
        assert_eq!(
            ing.poll(ms_(1600)),
            Some(IngestEvent::Dropped {
                step_id: 3,
                reason: DropReason::Timeout
            })
        );
        // the late last chunk does not trigger
        assert!(ing.on_chunk(&pk[14], ms_(1700)).is_empty());
        assert_eq!(ing.poll(ms_(5000)), None);
    }

    #[test]
    fn stale_chunks_are_ignored() {
        let mut ing = Ingest::for_config(&cfg(), DEFAULT_PACKET_SIZE);
        let old = chunks(9, &[0.1; 66_150]);
        let new = chunks(10, &[0.2; 66_150]);
        ing.on_chunk(&old[0], ms_(0));
        let ev = ing.on_chunk(&new[0], ms_(1));
        assert_eq!(
            ev,
            vec![IngestEvent::Dropped {
                step_id: 9,
                reason: DropReason::Superseded
            }]
        );
        for p in &old[1..] {
            assert!(ing.on_chunk(p, ms_(2)).is_empty());
        }
        assert_eq!(ing.stale_packets(), 14);
        let mut fired = 0;
        for p in &new[1..] {
            fired += ing.on_chunk(p, ms_(3)).len();
        }
        assert_eq!(fired, 1);
    }

    fn trigger(step_id: u32, samples: Vec<f32>) -> CycleTrigger {
        CycleTrigger {
            step_id,
            samples,
            first_chunk_at: Duration::ZERO,
            completed_at: Duration::ZERO,
        }
    }

    #[test]
    fn echo_cycle_returns_the_ingested_step() {
        let c = cfg();
        let clock = Arc::new(VirtualClock::new());
        let mut g = GeneratorSpec::new(GeneratorKind::Echo { delay: 0 }).build(clock.clone());
        let mut s = ServerState::new(c, DEFAULT_PACKET_SIZE, Stem::Bass);
        let mut log = Vec::new();
        for t in 0..6u32 {
            let step: Vec<f32> = (0..66_150).map(|i| ((t as usize * 66_150 + i) as f32 * 0.01).sin()).collect();
            log.extend_from_slice(&step);
            let out = s.run_cycle(&trigger(t, step.clone()), g.as_mut(), clock.as_ref()).unwrap();
            assert_eq!(out.response.audio.len(), 67_032);
            assert_eq!(out.response.body(&c), &step[..]);
            assert_eq!(out.packets.len(), 16);
            // ring holds the last T seconds of everything ingested
            let n = c.window_samples();
            let expect: Vec<f32> = if log.len() >= n {
                log[log.len() - n..].to_vec()
            } else {
                let mut v = vec![0.0; n - log.len()];
                v.extend_from_slice(&log);
                v
            };
            assert_eq!(s.context_ring(), &expect[..]);
        }
        s.reset();
        assert!(s.context_ring().iter().all(|&v| v == 0.0));
        assert!(s.generated_ring().iter().all(|&v| v == 0.0));
        assert_eq!(s.current_step_id(), None);
    }

    #[test]
    fn failed_cycle_leaves_rings_untouched() {
        struct Broken;
        impl Generate for Broken {
            fn generate(&mut self, _: &GeneratorRequest) -> Result<GeneratorResponse, GeneratorError> {
                Err(GeneratorError::Failed("nope".into()))
            }
        }
        let clock = VirtualClock::new();
        let mut s = ServerState::new(cfg(), DEFAULT_PACKET_SIZE, Stem::Bass);
        let before = s.context_ring().to_vec();
        let err = s.run_cycle(&trigger(0, vec![1.0; 66_150]), &mut Broken, &clock);
        assert!(matches!(err, Err(CycleError::Generator { .. })));
        assert_eq!(s.context_ring(), &before[..]);
        assert_eq!(s.cycles(), 0);
        let short = s.run_cycle(&trigger(1, vec![1.0; 10]), &mut Broken, &clock);
        assert!(matches!(short, Err(CycleError::StepLength { .. })));
    }

    #[test]
    fn context_window_is_masked_and_aligned() {
        let c = cfg();
        let ring: Vec<f32> = (0..c.window_samples()).map(|i| i as f32 + 1.0).collect();
        let win = ServerState::context_window(&c, &ring);
        // w = 1, r = 1/4: the last 3 s of the ring fill the first half
        assert_eq!(&win[..132_300], &ring[132_300..]);
        assert!(win[132_300..].iter().all(|&v| v == 0.0));
        let c0 = c.with_lookahead(-1).unwrap();
        assert_eq!(ServerState::context_window(&c0, &ring), ring);
    }

    #[test]
    fn config_updates_geometry() {
        let mut s = ServerState::new(cfg(), DEFAULT_PACKET_SIZE, Stem::Bass);
        let msg = ConfigMessage {
            step_frames: 8,
            latent_frames: 64,
            lookahead_w: 0,
            fade_samples: 441,
            packet_size: 2000,
            stem: 3,
        };
        s.apply_config(&msg).unwrap();
        assert_eq!(s.cfg().step_samples(), 33_075);
        assert_eq!(s.packet_size(), 2000);
        assert_eq!(s.stem(), Stem::Piano);
        assert!(s.apply_config(&ConfigMessage { step_frames: 32, lookahead_w: 1, ..msg }).is_err());
        assert!(s.apply_config(&ConfigMessage { latent_frames: 32, ..msg }).is_err());
    }

    #[test]
    fn event_lines_round_trip() {
        let events = [
            ServerEvent::Cycle(TimingReport {
                step_id: 4,
                forward_passes: 20,
                ingest_ms: 1.25,
                encode_ms: 2.5,
                sampling_ms: 500.0,
                decode_ms: 0.125,
                send_ms: 3.0,
            }),
            ServerEvent::Dropped {
                step_id: 7,
                reason: DropReason::Timeout,
            },
            ServerEvent::Error {
                step_id: None,
                message: "bad datagram".into(),
            },
            ServerEvent::Config(ConfigMessage {
                step_frames: 16,
                latent_frames: 64,
                lookahead_w: 1,
                fade_samples: 882,
                packet_size: 4410,
                stem: 0,
            }),
            ServerEvent::Reset,
            ServerEvent::Listening {
                recv: "127.0.0.1:9000".parse().unwrap(),
                send_to: "127.0.0.1:9001".parse().unwrap(),
            },
        ];
        for e in events {
            let line = e.to_string();
            assert_eq!(line.parse::<ServerEvent>().unwrap(), e, "{line}");
        }
        assert!("event=bogus".parse::<ServerEvent>().is_err());
        assert!("no equals".parse::<ServerEvent>().is_err());
    }
}
