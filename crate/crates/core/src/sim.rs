//! Deterministic session on a virtual timeline: client, server and network
//! in one thread, with datagrams passing through the real wire codec.
//!
//! Time is the playback position. The server is serial, so a cycle starts
//! when both its context has arrived and the previous cycle is done; its
//! duration is whatever the generator spends on the shared virtual clock.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use crate::clock::{Clock, VirtualClock};
use crate::config::SessionConfig;
use crate::control::{ClientSession, CommandError, ControlCommand, MetricsHub, Outbound, SessionSnapshot};
use crate::engine::Mode;
use crate::generators::{Generate, GeneratorSpec};
use crate::server::{DropReason, Ingest, IngestEvent, ServerEvent, ServerState};
use crate::stems::{Stem, STEM_COUNT};
use crate::wire::{decode_message, encode_message, encode_step, ChunkAddress, Message};

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub session: SessionConfig,
    pub stem: Stem,
    pub generator: GeneratorSpec,
    pub uplink_ms: f64,
    pub downlink_ms: f64,
    /// Samples per audio callback.
    pub block: usize,
}

impl SimOptions {
    pub fn new(generator: GeneratorSpec) -> Self {
        Self {
            session: SessionConfig::default(),
            stem: Stem::Guitar,
            generator,
            uplink_ms: 1.0,
            downlink_ms: 1.0,
            block: 512,
        }
    }
}

pub struct Simulation {
    client: ClientSession,
    server: ServerState,
    ingest: Ingest,
    generator: Box<dyn Generate>,
    clock: Arc<VirtualClock>,
    server_free: Duration,
    to_client: VecDeque<(Duration, Vec<u8>)>,
    inputs: [Vec<f32>; STEM_COUNT],
    uplink: Duration,
    downlink: Duration,
    block: usize,
    events: Vec<ServerEvent>,
}

impl Simulation {
    pub fn new(opts: SimOptions, inputs: [Vec<f32>; STEM_COUNT]) -> Self {
        let clock = Arc::new(VirtualClock::new());
        let cfg = opts.session;
        let mut sim = Self {
            client: ClientSession::new(cfg, opts.stem, Mode::FileDriven, MetricsHub::new()),
            server: ServerState::new(cfg.window, cfg.packet_size, opts.stem),
            ingest: Ingest::for_config(&cfg.window, cfg.packet_size),
            generator: opts.generator.build(clock.clone()),
            clock,
            server_free: Duration::ZERO,
            to_client: VecDeque::new(),
            inputs,
            uplink: Duration::from_secs_f64(opts.uplink_ms / 1000.0),
            downlink: Duration::from_secs_f64(opts.downlink_ms / 1000.0),
            block: opts.block.max(1),
            events: Vec::new(),
        };
        let hello = sim.client.hello();
        sim.transmit(vec![hello], Duration::ZERO);
        sim
    }

    pub fn client(&self) -> &ClientSession {
        &self.client
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn hub(&self) -> MetricsHub {
        self.client.hub().clone()
    }

    pub fn server_events(&self) -> &[ServerEvent] {
        &self.events
    }

    pub fn input_len(&self) -> usize {
        self.inputs.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Playback time of the client cursor.
    pub fn now(&self) -> Duration {
        let sr = f64::from(self.client.engine().cfg().sample_rate());
        Duration::from_secs_f64(self.client.engine().cursor() as f64 / sr)
    }

    pub fn command(&mut self, cmd: ControlCommand) -> Result<SessionSnapshot, CommandError> {
        let now = self.now();
        let (snap, out) = self.client.handle(cmd, now)?;
        self.transmit(out, now);
        Ok(snap)
    }

    /// Plays one block. Returns false once the input is exhausted or the
    /// session is stopped.
    pub fn step(&mut self) -> bool {
        if !self.client.is_playing() {
            return false;
        }
        let cursor = self.client.engine().cursor().max(0) as usize;
        let len = self.input_len();
        if cursor >= len {
            return false;
        }
        let now = self.now();
        self.deliver(now);
        let end = (cursor + self.block).min(len);
        let slice = |v: &Vec<f32>| -> Vec<f32> {
            let mut s = v[cursor.min(v.len())..end.min(v.len())].to_vec();
            s.resize(end - cursor, 0.0);
            s
        };
        let blocks: Vec<Vec<f32>> = self.inputs.iter().map(slice).collect();
        let refs: [&[f32]; STEM_COUNT] = std::array::from_fn(|i| blocks[i].as_slice());
        let out = self.client.on_block(&refs, now);
        self.transmit(out, now);
        true
    }

    /// Advances wall time without playing audio, delivering what arrives.
    pub fn idle(&mut self, until: Duration) {
        self.deliver(until);
    }

    pub fn run_to_end(&mut self) {
        while self.step() {}
        let now = self.now();
        self.deliver(now + Duration::from_secs(3600));
    }

    pub fn run_samples(&mut self, n: usize) {
        let stop = self.client.engine().cursor() + n as i64;
        while self.client.engine().cursor() < stop && self.step() {}
    }

    fn deliver(&mut self, now: Duration) {
        while self.to_client.front().is_some_and(|(t, _)| *t <= now) {
            let (t, bytes) = self.to_client.pop_front().expect("checked");
            if let Ok(msg) = decode_message(&bytes) {
                self.client.on_message(msg, t);
            }
        }
    }

    fn transmit(&mut self, out: Vec<Outbound>, now: Duration) {
        let ps = self.client.packet_size();
        for o in out {
            let datagrams = match o {
                Outbound::Config(c) => vec![encode_message(&Message::Config(c), ps).expect("config encodes")],
                Outbound::Reset => vec![encode_message(&Message::Reset, ps).expect("reset encodes")],
                Outbound::Context { step_id, samples } => {
                    encode_step(ChunkAddress::Context, step_id, &samples, ps).expect("context encodes")
                }
            };
            let arrival = now + self.uplink;
            for bytes in datagrams {
                let msg = decode_message(&bytes).expect("own datagram decodes");
                for ev in self.ingest.on_message(msg, arrival) {
                    self.serve(ev, arrival);
                }
            }
        }
    }

    fn serve(&mut self, ev: IngestEvent, arrival: Duration) {
        match ev {
            IngestEvent::Trigger(t) => {
                let start = arrival.max(self.server_free);
                self.clock.set(start);
                match self.server.run_cycle(&t, self.generator.as_mut(), self.clock.as_ref()) {
                    Ok(done) => {
                        let finish = self.clock.now();
                        self.server_free = finish;
                        let at = finish + self.downlink;
                        let report = done.timings.report(done.step_id, 0.0);
                        for p in done.packets {
                            self.to_client.push_back((at, p));
                        }
                        let bytes = encode_message(&Message::Timings(report), 0).expect("timings encode");
                        self.to_client.push_back((at, bytes));
                        self.events.push(ServerEvent::Cycle(report));
                    }
                    Err(e) => {
                        self.events.push(ServerEvent::Error {
                            step_id: Some(t.step_id),
                            message: e.to_string(),
                        });
                        self.events.push(ServerEvent::Dropped {
                            step_id: t.step_id,
                            reason: DropReason::Failed,
                        });
                    }
                }
            }
            IngestEvent::Config(c) => match self.server.apply_config(&c) {
                Ok(()) => {
                    self.ingest.set_timeout(Duration::from_secs_f64(self.server.cfg().step_ms() / 1000.0));
                    self.events.push(ServerEvent::Config(c));
                }
                Err(e) => self.events.push(ServerEvent::Error {
                    step_id: None,
                    message: format!("rejected config: {e}"),
                }),
            },
            IngestEvent::Reset => {
                self.server.reset();
                self.events.push(ServerEvent::Reset);
            }
            IngestEvent::Dropped { step_id, reason } => self.events.push(ServerEvent::Dropped { step_id, reason }),
        }
    }
}

/// Four test stems: distinct deterministic tones per stem.
pub fn tone_stems(len: usize, sample_rate: u32) -> [Vec<f32>; STEM_COUNT] {
    let freqs = [55.0, 97.0, 196.0, 330.0];
    std::array::from_fn(|s| {
        (0..len)
            .map(|i| {
                let t = i as f64 / f64::from(sample_rate);
                (0.2 * (2.0 * std::f64::consts::PI * freqs[s] * t).sin()) as f32
            })
            .collect()
    })
}
