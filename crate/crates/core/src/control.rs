//! Session control: the command surface, per-cycle metrics, and the client
//! session that ties the engine to the wire.
//!
//! Commands and events travel as newline-delimited JSON over one TCP
//! connection. See `docs/control-protocol.md` for the schema.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, OutputFormat};
use crate::clock::ms;
use crate::config::{check_packet_size, SessionConfig};
use crate::engine::{Action, CommitOutcome, Mode, SessionState};
use crate::latency::{rt_feasible_for, StageTimings};
use crate::stems::{Stem, STEM_COUNT};
use crate::window::{StepRatio, WindowConfig, WindowError};
use crate::wire::{
    ChunkAddress, ConfigMessage, FeedOutcome, Message, Reassembler, TimingReport,
};

/// Replay depth for late metric subscribers.
pub const METRIC_HISTORY: usize = 256;

/// A step ratio given either as `"n/d"` or as a decimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatioInput {
    Number(f64),
    Text(String),
}

impl RatioInput {
    pub fn resolve(&self, latent_frames: u32) -> Result<StepRatio, WindowError> {
        let value = match self {
            RatioInput::Text(t) if t.contains('/') => return StepRatio::parse(t, latent_frames),
            RatioInput::Text(t) => t
                .trim()
                .parse::<f64>()
                .map_err(|_| WindowError::BadFraction(t.clone()))?,
            RatioInput::Number(v) => *v,
        };
        if !(value > 0.0 && value <= 1.0) {
            return Err(WindowError::RatioOutOfRange(value.to_string()));
        }
        let frames = value * f64::from(latent_frames);
        if (frames - frames.round()).abs() > 1e-9 {
            return Err(WindowError::NotOnLatentGrid {
                ratio: value.to_string(),
                latent_frames,
            });
        }
        StepRatio::new(frames.round() as u32, latent_frames)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum ControlCommand {
    SetParams {
        #[serde(default)]
        r: Option<RatioInput>,
        #[serde(default)]
        w: Option<i32>,
        #[serde(default)]
        fade: Option<usize>,
        #[serde(default)]
        packet_size: Option<usize>,
    },
    SelectInstrument {
        stem: Stem,
    },
    Play,
    Stop,
    Next,
    Clean,
    Write {
        path: PathBuf,
    },
    Verbose {
        on: bool,
    },
    GetState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRequest {
    #[serde(default)]
    pub id: Option<u64>,
    #[serde(flatten)]
    pub cmd: ControlCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsView {
    pub t_seconds: f64,
    pub r: String,
    pub w: i32,
    pub fade: usize,
    pub packet_size: usize,
    pub step_samples: usize,
    pub rt_budget_ms: f64,
}

impl ParamsView {
    fn of(cfg: &WindowConfig, packet_size: usize) -> Self {
        Self {
            t_seconds: cfg.receptive_field_ms() / 1000.0,
            r: cfg.ratio().to_string(),
            w: cfg.lookahead(),
            fade: cfg.fade(),
            packet_size,
            step_samples: cfg.step_samples(),
            rt_budget_ms: cfg.step_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub playing: bool,
    pub verbose: bool,
    pub cursor_samples: i64,
    pub params: ParamsView,
    pub staged: Option<ParamsView>,
    pub stem: Stem,
    pub staged_stem: Option<Stem>,
    pub underruns: u64,
    pub steps_sent: u64,
    pub events_emitted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    Reply {
        #[serde(default)]
        id: Option<u64>,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state: Option<SessionSnapshot>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Metric {
        event: MetricEvent,
    },
}

/// One per completed or dropped cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub step_id: u32,
    /// Boundary (absolute sample) that triggered the cycle.
    pub curr: i64,
    pub timings: StageTimings,
    pub d_total_ms: f64,
    pub rt_budget_ms: f64,
    pub feasible: bool,
    pub underrun: bool,
    pub late: bool,
    pub dropped: bool,
    pub stem: Stem,
    pub r: String,
    pub w: i32,
    pub server_ingest_ms: Option<f64>,
    pub server_send_ms: Option<f64>,
    pub timestamp_ms: f64,
}

#[derive(Default)]
struct HubInner {
    history: VecDeque<MetricEvent>,
    subscribers: Vec<Sender<MetricEvent>>,
    total: u64,
}

/// Ordered fan-out of metric events.
#[derive(Clone, Default)]
pub struct MetricsHub {
    inner: Arc<Mutex<HubInner>>,
}

impl MetricsHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, ev: MetricEvent) {
        let mut g = self.inner.lock().expect("metrics lock");
        if g.history.len() == METRIC_HISTORY {
            g.history.pop_front();
        }
        g.history.push_back(ev.clone());
        g.total += 1;
        g.subscribers.retain(|s| s.send(ev.clone()).is_ok());
    }

    /// The replayed history followed by a live feed.
    pub fn subscribe(&self) -> (Vec<MetricEvent>, Receiver<MetricEvent>) {
        let mut g = self.inner.lock().expect("metrics lock");
        let (tx, rx) = unbounded();
        g.subscribers.push(tx);
        (g.history.iter().cloned().collect(), rx)
    }

    pub fn total(&self) -> u64 {
        self.inner.lock().expect("metrics lock").total
    }

    pub fn history(&self) -> Vec<MetricEvent> {
        self.inner.lock().expect("metrics lock").history.iter().cloned().collect()
    }
}

/// What the session wants sent to the server.
#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    Config(ConfigMessage),
    Context { step_id: u32, samples: Vec<f32> },
    Reset,
}

#[derive(Debug, Clone)]
struct CycleRecord {
    curr: i64,
    cfg: WindowConfig,
    stem: Stem,
    sent_at: Duration,
    done_at: Option<Duration>,
    underrun: bool,
    late: bool,
    report: Option<TimingReport>,
}

/// Splits a measured round trip into the five cycle stages. Encode,
/// sampling and decode come from the server; the remainder is network and
/// queueing, booked to the two directions.
pub fn compose_timings(round_trip_ms: f64, report: Option<&TimingReport>) -> StageTimings {
    let Some(r) = report else {
        return StageTimings::new(round_trip_ms / 2.0, 0.0, 0.0, 0.0, round_trip_ms / 2.0);
    };
    let (enc, samp, dec) = (f64::from(r.encode_ms), f64::from(r.sampling_ms), f64::from(r.decode_ms));
    let rest = (round_trip_ms - enc - samp - dec).max(0.0);
    let (ingest, send) = (f64::from(r.ingest_ms), f64::from(r.send_ms));
    let (up, down) = if rest >= ingest + send {
        let net = rest - ingest - send;
        (ingest + net / 2.0, send + net / 2.0)
    } else {
        (rest / 2.0, rest / 2.0)
    };
    StageTimings::new(up, enc, samp, dec, down).with_forward_passes(r.forward_passes)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CommandError {
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error("{0}")]
    Invalid(String),
    #[error("write failed: {0}")]
    Write(String),
}

/// The client side of one session: engine state, prediction reassembly,
/// transport and metrics.
pub struct ClientSession {
    engine: SessionState,
    packet_size: usize,
    staged_packet_size: Option<usize>,
    reassembler: Reassembler,
    cycles: BTreeMap<u32, CycleRecord>,
    playing: bool,
    verbose: bool,
    hub: MetricsHub,
    steps_sent: u64,
    emitted: u64,
    log: Vec<String>,
}

impl ClientSession {
    pub fn new(cfg: SessionConfig, stem: Stem, mode: Mode, hub: MetricsHub) -> Self {
        Self {
            engine: SessionState::new(cfg.window, stem, mode),
            packet_size: cfg.packet_size,
            staged_packet_size: None,
            reassembler: Reassembler::new(cfg.packet_size),
            cycles: BTreeMap::new(),
            playing: true,
            verbose: false,
            hub,
            steps_sent: 0,
            emitted: 0,
            log: Vec::new(),
        }
    }

    pub fn engine(&self) -> &SessionState {
        &self.engine
    }

    pub fn hub(&self) -> &MetricsHub {
        &self.hub
    }

    pub fn is_playing(&self) -> bool {
        self.playing
    }

    pub fn set_playing(&mut self, on: bool) {
        self.playing = on;
    }

    pub fn packet_size(&self) -> usize {
        self.packet_size
    }

    pub fn verbose(&self) -> bool {
        self.verbose
    }

    /// Human-readable lines produced while verbose; drained by the caller.
    pub fn drain_log(&mut self) -> Vec<String> {
        std::mem::take(&mut self.log)
    }

    /// First message of a session, so the server matches our geometry.
    pub fn hello(&self) -> Outbound {
        Outbound::Config(self.config_message())
    }

    fn config_message(&self) -> ConfigMessage {
        let cfg = self.engine.cfg();
        ConfigMessage {
            step_frames: cfg.step_frames(),
            latent_frames: cfg.latent_frames(),
            lookahead_w: cfg.lookahead(),
            fade_samples: cfg.fade() as u32,
            packet_size: self.packet_size as u32,
            stem: self.engine.predicted().index() as u32,
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            playing: self.playing,
            verbose: self.verbose,
            cursor_samples: self.engine.cursor(),
            params: ParamsView::of(self.engine.cfg(), self.packet_size),
            staged: (self.engine.staged_cfg().is_some() || self.staged_packet_size.is_some()).then(|| {
                ParamsView::of(
                    self.engine.staged_cfg().unwrap_or(self.engine.cfg()),
                    self.staged_packet_size.unwrap_or(self.packet_size),
                )
            }),
            stem: self.engine.predicted(),
            staged_stem: self.engine.staged_stem(),
            underruns: self.engine.underruns(),
            steps_sent: self.steps_sent,
            events_emitted: self.emitted,
        }
    }

    /// Feeds one block of input (one slice per stem). Does nothing while
    /// stopped.
    pub fn on_block(&mut self, block: &[&[f32]; STEM_COUNT], now: Duration) -> Vec<Outbound> {
        if !self.playing {
            return Vec::new();
        }
        let actions = self.engine.on_audio_block(block);
        let out = self.apply_actions(actions, now);
        self.flush_reportless(now);
        out
    }

    fn apply_actions(&mut self, actions: Vec<Action>, now: Duration) -> Vec<Outbound> {
        let mut out = Vec::new();
        for a in actions {
            match a {
                Action::ConfigChanged { .. } => {
                    if let Some(ps) = self.staged_packet_size.take() {
                        self.packet_size = ps;
                    }
                    self.reassembler.set_packet_size(self.packet_size);
                    out.push(Outbound::Config(self.config_message()));
                }
                Action::SendContext {
                    step_id,
                    curr,
                    cfg,
                    stem,
                    audio,
                } => {
                    self.cycles.insert(
                        step_id,
                        CycleRecord {
                            curr,
                            cfg,
                            stem,
                            sent_at: now,
                            done_at: None,
                            underrun: false,
                            late: false,
                            report: None,
                        },
                    );
                    self.steps_sent += 1;
                    out.push(Outbound::Context { step_id, samples: audio });
                }
                Action::Underrun { .. } => {}
                Action::Expired { step_id, .. } => {
                    if let Some(mut rec) = self.cycles.remove(&step_id) {
                        let w = rec.cfg.write_interval(rec.curr);
                        rec.underrun = w.end > self.engine.warmup_end() && self.engine.played_gaps().overlaps(w);
                        self.emit(step_id, rec, true, now);
                    }
                }
            }
        }
        out
    }

    /// Committed cycles whose timing report never came are reported once
    /// playback has passed their write interval.
    fn flush_reportless(&mut self, now: Duration) {
        let cursor = self.engine.cursor();
        let ready: Vec<u32> = self
            .cycles
            .iter()
            .filter(|(_, r)| r.done_at.is_some() && r.cfg.write_interval(r.curr).end <= cursor)
            .map(|(&id, _)| id)
            .collect();
        for id in ready {
            let rec = self.cycles.remove(&id).expect("listed above");
            self.emit(id, rec, false, now);
        }
    }

    pub fn on_message(&mut self, msg: Message, now: Duration) {
        match msg {
            Message::Chunk(p) if p.address == ChunkAddress::Prediction => match self.reassembler.feed(&p) {
                Ok(FeedOutcome::Complete { step_id, samples }) => self.on_prediction(step_id, &samples, now),
                Ok(_) => {}
                Err(e) => self.note(format!("prediction: {e}")),
            },
            Message::Timings(t) => {
                if let Some(rec) = self.cycles.get_mut(&t.step_id) {
                    rec.report = Some(t);
                    if rec.done_at.is_some() {
                        let rec = self.cycles.remove(&t.step_id).expect("present");
                        self.emit(t.step_id, rec, false, now);
                    }
                }
            }
            _ => {}
        }
    }

    fn on_prediction(&mut self, step_id: u32, audio: &[f32], now: Duration) {
        match self.engine.commit_prediction(step_id, audio) {
            Ok(CommitOutcome::Committed { late, underrun, .. }) => {
                if let Some(rec) = self.cycles.get_mut(&step_id) {
                    rec.done_at = Some(now);
                    rec.late = late;
                    rec.underrun = underrun;
                    if rec.report.is_some() {
                        let rec = self.cycles.remove(&step_id).expect("present");
                        self.emit(step_id, rec, false, now);
                    }
                }
            }
            Ok(CommitOutcome::Dropped { step_id, kind }) => {
                self.note(format!("step {step_id}: prediction dropped ({kind:?})"));
                if let Some(rec) = self.cycles.remove(&step_id) {
                    self.emit(step_id, rec, true, now);
                }
            }
            Err(e) => {
                self.note(e.to_string());
                if let Some(rec) = self.cycles.remove(&step_id) {
                    self.emit(step_id, rec, true, now);
                }
            }
        }
    }

    fn note(&mut self, line: String) {
        if self.verbose {
            self.log.push(line);
        }
    }

    fn emit(&mut self, step_id: u32, rec: CycleRecord, dropped: bool, now: Duration) {
        let rtt = ms(rec.done_at.unwrap_or(now).saturating_sub(rec.sent_at));
        let timings = compose_timings(rtt, rec.report.as_ref());
        let d_total = timings.full_cycle();
        let verdict = rt_feasible_for(d_total, &rec.cfg);
        let ev = MetricEvent {
            step_id,
            curr: rec.curr,
            timings,
            d_total_ms: d_total,
            rt_budget_ms: verdict.budget_ms,
            feasible: verdict.feasible && !dropped,
            underrun: rec.underrun,
            late: rec.late,
            dropped,
            stem: rec.stem,
            r: rec.cfg.ratio().to_string(),
            w: rec.cfg.lookahead(),
            server_ingest_ms: rec.report.map(|r| f64::from(r.ingest_ms)),
            server_send_ms: rec.report.map(|r| f64::from(r.send_ms)),
            timestamp_ms: ms(now),
        };
        if self.verbose {
            self.log.push(format!(
                "step {} d={:.1}ms budget={:.0}ms underrun={} dropped={}",
                step_id, d_total, ev.rt_budget_ms, ev.underrun, dropped
            ));
        }
        self.emitted += 1;
        self.hub.publish(ev);
    }

    /// Applies a command. Parameter changes are staged for the next
    /// boundary; the returned messages go to the server.
    pub fn handle(&mut self, cmd: ControlCommand, now: Duration) -> Result<(SessionSnapshot, Vec<Outbound>), CommandError> {
        let mut out = Vec::new();
        match cmd {
            ControlCommand::SetParams { r, w, fade, packet_size } => {
                let base = *self.engine.staged_cfg().unwrap_or(self.engine.cfg());
                let ratio = match &r {
                    Some(r) => r.resolve(base.latent_frames())?,
                    None => base.ratio(),
                };
                let cfg = WindowConfig::new(
                    base.window_samples(),
                    base.sample_rate(),
                    base.latent_bins(),
                    ratio,
                    w.unwrap_or(base.lookahead()),
                    fade.unwrap_or(base.fade()),
                )?;
                let ps = match packet_size {
                    Some(p) => check_packet_size(p).map_err(|e| CommandError::Invalid(e.to_string()))?,
                    None => self.staged_packet_size.unwrap_or(self.packet_size),
                };
                self.engine.stage_config(cfg);
                self.staged_packet_size = Some(ps);
            }
            ControlCommand::SelectInstrument { stem } => self.engine.stage_stem(stem),
            ControlCommand::Play => self.playing = true,
            ControlCommand::Stop => self.playing = false,
            ControlCommand::Next => {
                let actions = self.engine.force_send();
                out = self.apply_actions(actions, now);
            }
            ControlCommand::Clean => {
                self.engine.clean();
                for (id, rec) in std::mem::take(&mut self.cycles) {
                    self.emit(id, rec, true, now);
                }
                self.reassembler.reset();
                out.push(Outbound::Reset);
                out.push(Outbound::Config(self.config_message()));
            }
            ControlCommand::Write { path } => {
                self.write_session(&path).map_err(|e| CommandError::Write(e.to_string()))?;
            }
            ControlCommand::Verbose { on } => self.verbose = on,
            ControlCommand::GetState => {}
        }
        Ok((self.snapshot(), out))
    }

    /// Input stems followed by the generated stem, as 32-bit float WAV.
    pub fn write_session(&self, path: &std::path::Path) -> Result<(), crate::audio::AudioError> {
        let channels = self.session_channels();
        let refs: Vec<&[f32]> = channels.iter().map(Vec::as_slice).collect();
        write_wav(path, self.engine.cfg().sample_rate(), &refs, OutputFormat::Float32)
    }

    /// Five equal-length channels: bass, drums, guitar, piano inputs (the
    /// predicted stem's input is silent) and the generated stem, up to the
    /// playback head.
    pub fn session_channels(&self) -> Vec<Vec<f32>> {
        let len = self.engine.cursor().max(0) as usize;
        let buf = self.engine.buffer();
        let fit = |v: &[f32]| {
            let mut v = v[..v.len().min(len)].to_vec();
            v.resize(len, 0.0);
            v
        };
        let mut out: Vec<Vec<f32>> = Stem::ALL
            .iter()
            .map(|&s| if s == self.engine.predicted() { vec![0.0; len] } else { fit(buf.stem(s)) })
            .collect();
        out.push(fit(buf.stem(self.engine.predicted())));
        out
    }
}

/// Renders a command result as a reply line.
pub fn reply_for(id: Option<u64>, result: Result<SessionSnapshot, CommandError>) -> ControlMessage {
    match result {
        Ok(state) => ControlMessage::Reply {
            id,
            ok: true,
            state: Some(state),
            error: None,
        },
        Err(e) => ControlMessage::Reply {
            id,
            ok: false,
            state: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn parse_request(line: &str) -> Result<ControlRequest, String> {
    serde_json::from_str(line).map_err(|e| format!("bad command: {e}"))
}

// ── TCP endpoint ───────────────────────────────────────────────────────

/// A request waiting for the session owner, with the channel its reply
/// goes back on.
pub type PendingRequest = (ControlRequest, Sender<ControlMessage>);

pub struct ControlServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ControlServer {
    /// Serves one connection at a time. Requests are forwarded to
    /// `requests`; metric events from `hub` are pushed as they happen,
    /// after a replay of recent history.
    pub fn spawn(addr: SocketAddr, requests: Sender<PendingRequest>, hub: MetricsHub) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::Builder::new().name("control".into()).spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = serve_connection(stream, &requests, &hub, &flag);
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(_) => std::thread::sleep(Duration::from_millis(10)),
                }
            }
        })?;
        Ok(Self {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn write_line(stream: &Mutex<TcpStream>, msg: &ControlMessage) -> io::Result<()> {
    let mut line = serde_json::to_string(msg).map_err(io::Error::other)?;
    line.push('\n');
    stream.lock().expect("stream lock").write_all(line.as_bytes())
}

fn serve_connection(
    stream: TcpStream,
    requests: &Sender<PendingRequest>,
    hub: &MetricsHub,
    stop: &AtomicBool,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let done = Arc::new(AtomicBool::new(false));

    let (replay, feed) = hub.subscribe();
    let pusher = {
        let writer = writer.clone();
        let done = done.clone();
        std::thread::spawn(move || {
            for event in replay {
                if write_line(&writer, &ControlMessage::Metric { event }).is_err() {
                    return;
                }
            }
            while !done.load(Ordering::SeqCst) {
                if let Ok(event) = feed.recv_timeout(Duration::from_millis(50)) {
                    if write_line(&writer, &ControlMessage::Metric { event }).is_err() {
                        return;
                    }
                }
            }
        })
    };

    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => break Ok(()),
            Ok(_) => {
                let text = line.trim();
                if text.is_empty() {
                    continue;
                }
                let reply = match parse_request(text) {
                    Ok(req) => {
                        let id = req.id;
                        let (tx, rx) = bounded(1);
                        if requests.send((req, tx)).is_err() {
                            break Ok(());
                        }
                        rx.recv_timeout(Duration::from_secs(5)).unwrap_or(ControlMessage::Reply {
                            id,
                            ok: false,
                            state: None,
                            error: Some("session did not answer".into()),
                        })
                    }
                    Err(e) => ControlMessage::Reply {
                        id: None,
                        ok: false,
                        state: None,
                        error: Some(e),
                    },
                };
                if let Err(e) = write_line(&writer, &reply) {
                    break Err(e);
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => break Err(e),
        }
    };
    done.store(true, Ordering::SeqCst);
    let _ = pusher.join();
    result
}

/// Minimal blocking client for the control endpoint.
pub struct ControlClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
    metrics: Vec<MetricEvent>,
}

impl ControlClient {
    pub fn connect(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            next_id: 1,
            metrics: Vec::new(),
        })
    }

    fn read_message(&mut self) -> io::Result<ControlMessage> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "control connection closed"));
        }
        serde_json::from_str(&line).map_err(io::Error::other)
    }

    /// Sends a command and waits for its reply; metric events seen on the
    /// way are kept for [`ControlClient::take_metrics`].
    pub fn call(&mut self, cmd: ControlCommand) -> io::Result<Result<SessionSnapshot, String>> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&ControlRequest { id: Some(id), cmd }).map_err(io::Error::other)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        loop {
            match self.read_message()? {
                ControlMessage::Metric { event } => self.metrics.push(event),
                ControlMessage::Reply { id: Some(got), ok, state, error } if got == id => {
                    return Ok(if ok {
                        state.ok_or_else(|| "reply without state".to_string())
                    } else {
                        Err(error.unwrap_or_default())
                    });
                }
                ControlMessage::Reply { .. } => {}
            }
        }
    }

    /// Waits for the next metric event.
    pub fn next_metric(&mut self) -> io::Result<MetricEvent> {
        if !self.metrics.is_empty() {
            return Ok(self.metrics.remove(0));
        }
        loop {
            if let ControlMessage::Metric { event } = self.read_message()? {
                return Ok(event);
            }
        }
    }

    pub fn take_metrics(&mut self) -> Vec<MetricEvent> {
        std::mem::take(&mut self.metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SessionConfig;

    fn session() -> ClientSession {
        ClientSession::new(SessionConfig::default(), Stem::Guitar, Mode::FileDriven, MetricsHub::new())
    }

    fn set_r(r: RatioInput, w: Option<i32>) -> ControlCommand {
        ControlCommand::SetParams {
            r: Some(r),
            w,
            fade: None,
            packet_size: None,
        }
    }

    #[test]
    fn command_json_shapes() {
        let req = parse_request(r#"{"id":3,"cmd":"set_params","r":"1/8","w":1}"#).unwrap();
        assert_eq!(req.id, Some(3));
        assert_eq!(req.cmd, set_r(RatioInput::Text("1/8".into()), Some(1)));
        let req = parse_request(r#"{"cmd":"select_instrument","stem":"drums"}"#).unwrap();
        assert_eq!(req.cmd, ControlCommand::SelectInstrument { stem: Stem::Drums });
        for c in ["play", "stop", "next", "clean", "get_state"] {
            assert!(parse_request(&format!(r#"{{"cmd":"{c}"}}"#)).is_ok());
        }
        assert!(parse_request(r#"{"cmd":"verbose","on":true}"#).is_ok());
        assert!(parse_request(r#"{"cmd":"write","path":"/tmp/x.wav"}"#).is_ok());
        assert!(parse_request(r#"{"cmd":"explode"}"#).is_err());
        assert!(parse_request("not json").is_err());
    }

    #[test]
    fn set_params_validation() {
        let mut s = session();
        let err = s.handle(set_r(RatioInput::Number(0.3), None), Duration::ZERO).unwrap_err();
        assert!(matches!(err, CommandError::Window(WindowError::NotOnLatentGrid { .. })), "{err}");
        let err = s.handle(set_r(RatioInput::Text("1/2".into()), Some(1)), Duration::ZERO).unwrap_err();
        assert!(matches!(err, CommandError::Window(WindowError::PredictionOutsideContext { .. })), "{err}");
        let err = s
            .handle(
                ControlCommand::SetParams {
                    r: None,
                    w: None,
                    fade: Some(70_000),
                    packet_size: None,
                },
                Duration::ZERO,
            )
            .unwrap_err();
        assert!(matches!(err, CommandError::Window(WindowError::FadeTooLong { .. })));
        let err = s
            .handle(
                ControlCommand::SetParams {
                    r: None,
                    w: None,
                    fade: None,
                    packet_size: Some(0),
                },
                Duration::ZERO,
            )
            .unwrap_err();
        assert!(matches!(err, CommandError::Invalid(_)));
        assert!(s.snapshot().staged.is_none());

        let (snap, out) = s.handle(set_r(RatioInput::Text("1/8".into()), Some(1)), Duration::ZERO).unwrap();
        assert!(out.is_empty());
        assert_eq!(snap.params.r, "1/4");
        assert_eq!(snap.staged.as_ref().unwrap().r, "1/8");
        assert_eq!(snap.staged.unwrap().rt_budget_ms, 750.0);
        assert_eq!(RatioInput::Number(0.25).resolve(64).unwrap(), StepRatio::new(16, 64).unwrap());
    }

    fn silent_block(n: usize) -> Vec<f32> {
        vec![0.0; n]
    }

    #[test]
    fn next_while_stopped_runs_one_cycle() {
        let mut s = session();
        let z = silent_block(1000);
        let out = s.on_block(&[&z, &z, &z, &z], Duration::ZERO);
        assert_eq!(out.len(), 1);
        s.handle(ControlCommand::Stop, Duration::ZERO).unwrap();
        assert!(s.on_block(&[&z, &z, &z, &z], Duration::ZERO).is_empty());
        let (_, out) = s.handle(ControlCommand::Next, Duration::from_millis(10)).unwrap();
        let step_id = match &out[..] {
            [Outbound::Context { step_id, samples }] => {
                assert_eq!(samples.len(), 66_150);
                *step_id
            }
            other => panic!("{other:?}"),
        };
        assert_eq!(step_id, 1);
        let before = s.hub().total();
        let pred = crate::wire::chunk_samples(ChunkAddress::Prediction, step_id, &vec![0.1; 67_032], 4410).unwrap();
        for p in pred {
            s.on_message(Message::Chunk(p), Duration::from_millis(300));
        }
        s.on_message(
            Message::Timings(TimingReport {
                step_id,
                forward_passes: 0,
                ingest_ms: 1.0,
                encode_ms: 2.0,
                sampling_ms: 100.0,
                decode_ms: 3.0,
                send_ms: 4.0,
            }),
            Duration::from_millis(301),
        );
        assert_eq!(s.hub().total(), before + 1);
        let ev = s.hub().history().pop().unwrap();
        assert_eq!(ev.step_id, 1);
        assert!(!ev.dropped && !ev.underrun);
        assert!((ev.d_total_ms - 290.0).abs() < 1e-9);
        assert_eq!(ev.timings.sampling_ms, 100.0);
        assert!(ev.feasible);
    }

    #[test]
    fn composed_timings_sum_to_the_round_trip() {
        let r = TimingReport {
            step_id: 0,
            forward_passes: 20,
            ingest_ms: 10.0,
            encode_ms: 5.0,
            sampling_ms: 500.0,
            decode_ms: 5.0,
            send_ms: 20.0,
        };
        for rtt in [0.0, 100.0, 530.0, 560.0, 2000.0] {
            let t = compose_timings(rtt, Some(&r));
            assert!(t.validate().is_ok());
            let expect = rtt.max(510.0);
            assert!((t.full_cycle() - expect).abs() < 1e-9, "{rtt}");
        }
        assert_eq!(compose_timings(80.0, None).full_cycle(), 80.0);
    }

    #[test]
    fn hub_replays_the_last_256() {
        let hub = MetricsHub::new();
        let ev = |i: u32| MetricEvent {
            step_id: i,
            curr: 0,
            timings: StageTimings::default(),
            d_total_ms: 0.0,
            rt_budget_ms: 1500.0,
            feasible: true,
            underrun: false,
            late: false,
            dropped: false,
            stem: Stem::Bass,
            r: "1/4".into(),
            w: 1,
            server_ingest_ms: None,
            server_send_ms: None,
            timestamp_ms: 0.0,
        };
        let (_, early) = hub.subscribe();
        for i in 0..300 {
            hub.publish(ev(i));
        }
        let (replay, late) = hub.subscribe();
        assert_eq!(replay.len(), 256);
        assert_eq!(replay[0].step_id, 44);
        assert_eq!(early.try_iter().count(), 300);
        hub.publish(ev(300));
        assert_eq!(late.try_recv().unwrap().step_id, 300);
        let line = serde_json::to_string(&ControlMessage::Metric { event: ev(7) }).unwrap();
        assert!(line.starts_with(r#"{"type":"metric""#));
        assert_eq!(serde_json::from_str::<ControlMessage>(&line).unwrap(), ControlMessage::Metric { event: ev(7) });
    }

    #[test]
    fn clean_resets_and_notifies_the_server() {
        let mut s = session();
        let z = silent_block(70_000);
        s.on_block(&[&z, &z, &z, &z], Duration::ZERO);
        let (_, out) = s.handle(ControlCommand::Clean, Duration::ZERO).unwrap();
        assert_eq!(out[0], Outbound::Reset);
        assert!(matches!(out[1], Outbound::Config(_)));
        assert!(s.engine().pending().is_empty());
        // every abandoned cycle still gets its event
        assert_eq!(s.hub().total(), 2);
        assert!(s.hub().history().iter().all(|e| e.dropped));
    }

    #[test]
    fn tcp_round_trip() {
        let hub = MetricsHub::new();
        let (tx, rx) = unbounded::<PendingRequest>();
        let server = ControlServer::spawn("127.0.0.1:0".parse().unwrap(), tx, hub.clone()).unwrap();
        let owner = std::thread::spawn(move || {
            let mut s = ClientSession::new(SessionConfig::default(), Stem::Guitar, Mode::FileDriven, hub);
            for (req, reply) in rx.iter().take(3) {
                let res = s.handle(req.cmd, Duration::ZERO).map(|(snap, _)| snap);
                let _ = reply.send(reply_for(req.id, res));
            }
        });
        let mut c = ControlClient::connect(server.local_addr()).unwrap();
        let st = c.call(ControlCommand::GetState).unwrap().unwrap();
        assert_eq!(st.params.r, "1/4");
        assert_eq!(st.params.rt_budget_ms, 1500.0);
        let bad = c.call(set_r(RatioInput::Text("1/2".into()), Some(1))).unwrap();
        assert!(bad.unwrap_err().contains("outside the context"));
        let ok = c.call(ControlCommand::SelectInstrument { stem: Stem::Piano }).unwrap().unwrap();
        assert_eq!(ok.staged_stem, Some(Stem::Piano));
        owner.join().unwrap();
    }
}
