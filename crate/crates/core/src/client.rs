//! The performing client over UDP: plays input stems on a clock, streams
//! contexts to a server and mixes predictions back in.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver};

use crate::clock::SharedClock;
use crate::config::SessionConfig;
use crate::control::{
    reply_for, ClientSession, ControlServer, MetricEvent, MetricsHub, Outbound, PendingRequest,
};
use crate::engine::Mode;
use crate::net::{bind_udp, is_timeout};
use crate::stems::{Stem, STEM_COUNT};
use crate::window::SampleSpan;
use crate::wire::{decode_message, encode_message, encode_step, ChunkAddress, Message};

pub struct PerformOptions {
    pub session: SessionConfig,
    pub stem: Stem,
    pub server: SocketAddr,
    /// Where predictions are received.
    pub listen: SocketAddr,
    pub inputs: [Vec<f32>; STEM_COUNT],
    /// Samples per audio callback.
    pub block: usize,
    pub out: Option<PathBuf>,
    pub control: Option<SocketAddr>,
    /// How long to keep listening after the input ends.
    pub tail: Duration,
    pub start_stopped: bool,
}

impl PerformOptions {
    pub fn new(server: SocketAddr, listen: SocketAddr, inputs: [Vec<f32>; STEM_COUNT]) -> Self {
        Self {
            session: SessionConfig::default(),
            stem: Stem::Guitar,
            server,
            listen,
            inputs,
            block: 512,
            out: None,
            control: None,
            tail: Duration::from_secs(1),
            start_stopped: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerformReport {
    pub underruns: u64,
    pub steps_sent: u64,
    pub warmup_end: i64,
    /// Playback regions of the predicted stem that had nothing committed.
    pub played_gaps: Vec<SampleSpan>,
    pub events: Vec<MetricEvent>,
    /// Four inputs (the predicted one silent) and the generated stem.
    pub channels: Vec<Vec<f32>>,
}

struct Link {
    sock: UdpSocket,
    server: SocketAddr,
}

impl Link {
    fn send(&self, session: &ClientSession, out: Vec<Outbound>) -> io::Result<()> {
        let ps = session.packet_size();
        for o in out {
            let datagrams = match o {
                Outbound::Config(c) => vec![encode_message(&Message::Config(c), ps).map_err(io::Error::other)?],
                Outbound::Reset => vec![encode_message(&Message::Reset, ps).map_err(io::Error::other)?],
                Outbound::Context { step_id, samples } => {
                    encode_step(ChunkAddress::Context, step_id, &samples, ps).map_err(io::Error::other)?
                }
            };
            for d in datagrams {
                self.sock.send_to(&d, self.server)?;
            }
        }
        Ok(())
    }
}

type Inbox = Receiver<(Message, Duration)>;

fn spawn_receiver(
    sock: UdpSocket,
    clock: SharedClock,
    stop: Arc<AtomicBool>,
) -> io::Result<(Inbox, std::thread::JoinHandle<()>)> {
    let (tx, rx) = unbounded();
    let handle = std::thread::Builder::new().name("client-recv".into()).spawn(move || {
        let mut buf = vec![0u8; 65_536];
        while !stop.load(Ordering::SeqCst) {
            match sock.recv_from(&mut buf) {
                Ok((n, _)) => {
                    if let Ok(msg) = decode_message(&buf[..n]) {
                        if tx.send((msg, clock.now())).is_err() {
                            return;
                        }
                    }
                }
                Err(e) if is_timeout(&e) => {}
                Err(_) => std::thread::sleep(Duration::from_millis(1)),
            }
        }
    })?;
    Ok((rx, handle))
}

/// Runs a session to the end of the input. `stop` ends it early.
pub fn perform(
    opts: PerformOptions,
    hub: MetricsHub,
    clock: SharedClock,
    stop: Arc<AtomicBool>,
) -> io::Result<PerformReport> {
    let sock = bind_udp(opts.listen)?;
    let done = Arc::new(AtomicBool::new(false));
    let (inbox, recv_thread) = spawn_receiver(sock.try_clone()?, clock.clone(), done.clone())?;
    let link = Link {
        sock,
        server: opts.server,
    };

    let (req_tx, req_rx) = unbounded::<PendingRequest>();
    let _control = match opts.control {
        Some(addr) => Some(ControlServer::spawn(addr, req_tx, hub.clone())?),
        None => None,
    };

    let mut session = ClientSession::new(opts.session, opts.stem, Mode::FileDriven, hub);
    session.set_playing(!opts.start_stopped);
    link.send(&session, vec![session.hello()])?;

    let sr = f64::from(opts.session.window.sample_rate());
    let len = opts.inputs.iter().map(Vec::len).max().unwrap_or(0);
    let block = opts.block.max(1);
    // playback position = resumed_cursor + (now - resumed_at) * sr
    let mut resumed_at = clock.now();
    let mut resumed_cursor = 0i64;
    let mut was_playing = session.is_playing();
    let mut ended_at: Option<Duration> = None;

    let result = 'run: loop {
        if stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        while let Ok((msg, at)) = inbox.try_recv() {
            session.on_message(msg, at);
        }
        while let Ok((req, reply)) = req_rx.try_recv() {
            let now = clock.now();
            let res = session.handle(req.cmd, now);
            let res = match res {
                Ok((snap, out)) => link.send(&session, out).map(|_| snap).map_err(|e| {
                    crate::control::CommandError::Invalid(format!("send failed: {e}"))
                }),
                Err(e) => Err(e),
            };
            let _ = reply.send(reply_for(req.id, res));
        }
        for line in session.drain_log() {
            eprintln!("{line}");
        }

        let now = clock.now();
        if session.is_playing() != was_playing {
            was_playing = session.is_playing();
            resumed_at = now;
            resumed_cursor = session.engine().cursor();
        }
        let cursor = session.engine().cursor();
        if session.is_playing() && (cursor as usize) < len {
            let target = resumed_cursor + (now.saturating_sub(resumed_at).as_secs_f64() * sr) as i64;
            let mut c = cursor as usize;
            while (c + block) as i64 <= target && c < len {
                let end = (c + block).min(len);
                let blocks: Vec<Vec<f32>> = opts
                    .inputs
                    .iter()
                    .map(|v| {
                        let mut s = v[c.min(v.len())..end.min(v.len())].to_vec();
                        s.resize(end - c, 0.0);
                        s
                    })
                    .collect();
                let refs: [&[f32]; STEM_COUNT] = std::array::from_fn(|i| blocks[i].as_slice());
                let out = session.on_block(&refs, clock.now());
                if let Err(e) = link.send(&session, out) {
                    break 'run Err(e);
                }
                c = end;
            }
        }
        if session.engine().cursor() as usize >= len {
            let end = *ended_at.get_or_insert(now);
            if session.engine().pending().is_empty() || now.saturating_sub(end) >= opts.tail {
                break Ok(());
            }
        }
        clock.sleep(Duration::from_millis(2));
    };

    done.store(true, Ordering::SeqCst);
    let _ = recv_thread.join();
    result?;
    // late stragglers
    while let Ok((msg, at)) = inbox.try_recv() {
        session.on_message(msg, at);
    }
    if let Some(path) = &opts.out {
        session.write_session(path).map_err(io::Error::other)?;
    }
    Ok(PerformReport {
        underruns: session.engine().underruns(),
        steps_sent: session.snapshot().steps_sent,
        warmup_end: session.engine().warmup_end(),
        played_gaps: session.engine().played_gaps().spans().collect(),
        events: session.hub().history(),
        channels: session.session_channels(),
    })
}
