use std::io::{BufRead, BufReader, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpStream};
use std::thread;
use std::time::Duration;

use accomp::config::SessionConfig;
use accomp::control::{
    reply_for, ClientSession, ControlClient, ControlCommand, ControlServer, MetricsHub, PendingRequest, RatioInput,
};
use accomp::engine::Mode;
use accomp::generators::GeneratorSpec;
use accomp::sim::{tone_stems, SimOptions, Simulation};
use accomp::stems::Stem;
use crossbeam_channel::unbounded;

/// A control endpoint backed by a session that only handles commands.
fn endpoint() -> (ControlServer, MetricsHub, thread::JoinHandle<()>) {
    let hub = MetricsHub::new();
    let (tx, rx) = unbounded::<PendingRequest>();
    let server = ControlServer::spawn(SocketAddr::from((Ipv4Addr::LOCALHOST, 0)), tx, hub.clone()).unwrap();
    let session_hub = hub.clone();
    let worker = thread::spawn(move || {
        let mut s = ClientSession::new(SessionConfig::default(), Stem::Guitar, Mode::FileDriven, session_hub);
        while let Ok((req, reply)) = rx.recv() {
            let res = s.handle(req.cmd, Duration::ZERO).map(|(snap, _)| snap);
            let _ = reply.send(reply_for(req.id, res));
        }
    });
    (server, hub, worker)
}

#[test]
fn parameter_changes_are_staged_and_validated() {
    let (server, _hub, _worker) = endpoint();
    let mut c = ControlClient::connect(server.local_addr()).unwrap();

    let s = c.call(ControlCommand::GetState).unwrap().unwrap();
    assert_eq!(s.params.r, "1/4");
    assert_eq!(s.params.step_samples, 66_150);
    assert!(s.staged.is_none());

    let set = |r: RatioInput| ControlCommand::SetParams {
        r: Some(r),
        w: None,
        fade: None,
        packet_size: None,
    };
    let s = c.call(set(RatioInput::Text("1/8".into()))).unwrap().unwrap();
    let staged = s.staged.expect("staged until the next boundary");
    assert_eq!(staged.r, "1/8");
    assert_eq!(staged.step_samples, 33_075);
    assert_eq!(s.params.r, "1/4");

    // 0.3 * 64 is not a whole number of latent frames
    let err = c.call(set(RatioInput::Number(0.3))).unwrap().unwrap_err();
    assert!(!err.is_empty());
    // 3/64 gives a fractional sample step
    assert!(c.call(set(RatioInput::Text("3/64".into()))).unwrap().is_err());

    let s = c.call(ControlCommand::Verbose { on: true }).unwrap().unwrap();
    assert!(s.verbose);
    let s = c.call(ControlCommand::Stop).unwrap().unwrap();
    assert!(!s.playing);
}

#[test]
fn raw_json_lines_round_trip() {
    let (server, _hub, _worker) = endpoint();
    let stream = TcpStream::connect(server.local_addr()).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    let mut read = || {
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        serde_json::from_str::<serde_json::Value>(&line).unwrap()
    };

    w.write_all(b"{\"id\":5,\"cmd\":\"set_params\",\"r\":0.125,\"w\":0}\n").unwrap();
    let v = read();
    assert_eq!(v["type"], "reply");
    assert_eq!(v["id"], 5);
    assert_eq!(v["ok"], true);
    assert_eq!(v["state"]["staged"]["r"], "1/8");
    assert_eq!(v["state"]["staged"]["w"], 0);

    w.write_all(b"{\"id\":6,\"cmd\":\"no_such_command\"}\n").unwrap();
    let v = read();
    assert_eq!(v["ok"], false);
    assert!(v["error"].is_string());

    w.write_all(b"not json\n").unwrap();
    assert_eq!(read()["ok"], false);
}

#[test]
fn metrics_reach_subscribers_with_history() {
    let mut sim = Simulation::new(
        SimOptions::new("wrapped:echo:200".parse::<GeneratorSpec>().unwrap()),
        tone_stems(44_100 * 20, 44_100),
    );
    sim.run_to_end();
    let hub = sim.hub();
    let history = hub.history();
    assert!(history.len() >= 8, "{}", history.len());

    // a late subscriber first gets the retained history
    let (tx, _rx) = unbounded::<PendingRequest>();
    let server = ControlServer::spawn(SocketAddr::from((Ipv4Addr::LOCALHOST, 0)), tx, hub.clone()).unwrap();
    let mut c = ControlClient::connect(server.local_addr()).unwrap();
    let first = c.next_metric().unwrap();
    assert_eq!(first, history[0]);

    let v = serde_json::to_value(&history[3]).unwrap();
    for key in [
        "step_id",
        "curr",
        "timings",
        "d_total_ms",
        "rt_budget_ms",
        "feasible",
        "underrun",
        "late",
        "dropped",
        "stem",
        "r",
        "w",
        "timestamp_ms",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let e = &history[3];
    assert!(e.feasible && !e.underrun && !e.dropped);
    assert!(e.d_total_ms < e.rt_budget_ms);
    assert!((e.rt_budget_ms - 1500.0).abs() < 1e-9);
    assert!(e.d_total_ms >= 200.0);
}

const STEP: usize = 66_150;

/// Input long enough for `steps` boundaries, the first at sample 0.
fn simulate(generator: &str, steps: usize) -> Simulation {
    let mut sim = Simulation::new(
        SimOptions::new(generator.parse::<GeneratorSpec>().unwrap()),
        tone_stems((steps - 1) * STEP + 1, 44_100),
    );
    sim.run_to_end();
    sim
}

#[test]
fn feasible_session_emits_one_event_per_cycle() {
    let sim = simulate("echo:0", 10);
    let events = sim.hub().history();
    assert_eq!(events.len(), 10);
    assert!(events.iter().all(|e| !e.underrun && !e.dropped && e.feasible));
    let ids: Vec<u32> = events.iter().map(|e| e.step_id).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]), "{ids:?}");
}

#[test]
fn slow_generator_flags_underruns_from_the_first_uncovered_step() {
    let sim = simulate("wrapped:echo:2000", 10);
    let events = sim.hub().history();
    assert!(!events.is_empty());
    assert!(events.iter().all(|e| !e.feasible));
    let warmup_end = sim.client().engine().warmup_end();
    // the cycle at 0 fills the last warm-up step; the next one is the
    // first whose output has to be played
    let first_uncovered = events.iter().position(|e| e.curr + 2 * STEP as i64 > warmup_end).unwrap();
    assert_eq!(first_uncovered, 1);
    let first = events.iter().position(|e| e.underrun).expect("an underrun");
    assert_eq!(first, first_uncovered);
    // every cycle whose output lands inside the input is too late
    let len = sim.input_len() as i64;
    for e in &events[first..] {
        assert_eq!(e.underrun, e.curr + STEP as i64 <= len, "{e:?}");
    }
}

#[test]
fn stopped_session_emits_nothing() {
    let mut sim = Simulation::new(
        SimOptions::new("echo:0".parse::<GeneratorSpec>().unwrap()),
        tone_stems(4 * STEP, 44_100),
    );
    sim.run_samples(2 * STEP + 10);
    let before = sim.hub().total();
    sim.command(ControlCommand::Stop).unwrap();
    sim.idle(Duration::from_secs(60));
    let settled = sim.hub().total();
    sim.run_to_end();
    sim.idle(Duration::from_secs(600));
    assert_eq!(sim.hub().total(), settled);
    assert!(settled >= before);
}
