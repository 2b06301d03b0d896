use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use accomp::audio::read_wav;
use accomp::client::{perform, PerformOptions};
use accomp::clock::{MonotonicClock, ScaledClock, SharedClock};
use accomp::config::load_or_default;
use accomp::control::MetricsHub;
use accomp::fuzz::{fuzz_decoder, fuzz_reassembly};
use accomp::generators::GeneratorSpec;
use accomp::latency::measurements::{LOCAL_TRANSFER_COEFF_MS, RECEPTIVE_FIELD_MS, STEP_SWEEP};
use accomp::latency::{format_sweep_csv, format_sweep_table, min_step_ratio, snap_to_latent_grid, sweep, LatencyModel, SweepLine, Topology};
use accomp::net::{any_addr, resolve};
use accomp::sampler::{sample_inpaint, Conditioning, GaussianDenoiser, InpaintSpec, Latent, NoiseSchedule, Solver};
use accomp::server::{spawn, ServerOptions};
use accomp::stems::{Stem, STEM_COUNT};
use accomp::window::{StepRatio, WindowConfig};

#[derive(Parser)]
#[command(name = "accomp", version, about = "Look-ahead accompaniment streaming")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an inference server.
    Serve(ServeArgs),
    /// Play a four-stem file against a server.
    Perform(PerformArgs),
    /// Predict cycle latency across step ratios.
    Sweep(SweepArgs),
    /// Print the context and target masks for a configuration.
    Mask(MaskArgs),
    /// Run the inpainting sampler with a Gaussian denoiser and dump the latent.
    Sample(SampleArgs),
    /// Throw random and mutated datagrams at the decoder and reassembler.
    Fuzz(FuzzArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// Port for incoming contexts.
    #[arg(long, env = "ACCOMP_SERVER_PORT", default_value_t = 9000)]
    recv_port: u16,
    /// Client port predictions are sent to.
    #[arg(long, env = "ACCOMP_CLIENT_PORT", default_value_t = 9001)]
    send_port: u16,
    #[arg(long, env = "ACCOMP_CLIENT_HOST", default_value = "127.0.0.1")]
    client_host: String,
    #[arg(long, default_value = "echo:0")]
    generator: GeneratorSpec,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "guitar")]
    predict: Stem,
    #[arg(long)]
    verbose: bool,
    /// Exit after this many seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct PerformArgs {
    /// Four-channel WAV: bass, drums, guitar, piano.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "guitar")]
    predict: Stem,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "ACCOMP_SERVER_HOST", default_value = "127.0.0.1")]
    server: String,
    /// Local port predictions arrive on.
    #[arg(long, env = "ACCOMP_CLIENT_PORT", default_value_t = 9001)]
    recv_port: u16,
    /// Server port contexts are sent to.
    #[arg(long, env = "ACCOMP_SERVER_PORT", default_value_t = 9000)]
    send_port: u16,
    /// Five-channel WAV of the session: inputs then the generated stem.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Serve the control protocol on this local TCP port.
    #[arg(long, env = "ACCOMP_CONTROL_PORT")]
    control_port: Option<u16>,
    /// Playback speed relative to real time.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    #[arg(long, default_value_t = 64)]
    block: usize,
    /// Wait for a `play` command before starting.
    #[arg(long)]
    stopped: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Local,
    Remote,
}

#[derive(Args)]
struct SweepArgs {
    /// Replay the measured stage timings of the reference step-ratio sweep.
    #[arg(long)]
    fixture: bool,
    #[arg(long, default_value = "model")]
    model: String,
    /// Encode plus sampling, ms.
    #[arg(long, default_value_t = 532.0)]
    enc_sample_ms: f64,
    #[arg(long, default_value_t = 64.0)]
    decode_ms: f64,
    /// Transfer cost per unit step ratio, ms.
    #[arg(long, default_value_t = LOCAL_TRANSFER_COEFF_MS)]
    c_ms: f64,
    /// Per-direction network floor for remote deployments, ms.
    #[arg(long, default_value_t = 0.0)]
    floor_ms: f64,
    #[arg(long, value_enum, default_value_t = TopologyArg::Local)]
    topology: TopologyArg,
    /// Step ratios as fractions.
    #[arg(long, value_delimiter = ',', default_value = "1/4,1/8,1/16,1/64")]
    ratios: Vec<String>,
    #[arg(long, default_value_t = 6.0)]
    t_seconds: f64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    r: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    w: Option<i32>,
    /// Dump full frame-by-bin grids as JSON instead of frame vectors.
    #[arg(long)]
    grid: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    resamples: usize,
    #[arg(long, default_value_t = 1e-4)]
    sigma_min: f64,
    #[arg(long, default_value_t = 50.0)]
    sigma_max: f64,
    #[arg(long, default_value_t = 9.0)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_data: f64,
    /// Value of the prior mean over the generated region.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    mean: f32,
    /// Value of the fixed frames.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    fixed: f32,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long, default_value_t = 100_000)]
    iterations: u64,
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Serve(a) => serve(a),
        Command::Perform(a) => run_perform(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Mask(a) => mask(a),
        Command::Sample(a) => sample(a),
        Command::Fuzz(a) => fuzz(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn serve(a: ServeArgs) -> CliResult {
    let session = load_or_default(a.config.as_deref())?;
    let clock: SharedClock = Arc::new(MonotonicClock::new());
    let opts = ServerOptions {
        recv_addr: any_addr(a.recv_port),
        client_addr: resolve(&a.client_host, a.send_port)?,
        cfg: session.window,
        packet_size: session.packet_size,
        stem: a.predict,
    };
    let handle = spawn(opts, a.generator.build(clock.clone()), clock)?;
    let deadline = a.duration.map(|s| std::time::Instant::now() + Duration::from_secs_f64(s));
    loop {
        if deadline.is_some_and(|d| std::time::Instant::now() >= d) {
            break;
        }
        if let Ok(ev) = handle.events().recv_timeout(Duration::from_millis(100)) {
            let quiet = matches!(ev, accomp::server::ServerEvent::Config(_));
            if a.verbose || !quiet {
                println!("{ev}");
            }
        }
    }
    handle.shutdown();
    Ok(())
}

fn run_perform(a: PerformArgs) -> CliResult {
    let session = load_or_default(a.config.as_deref())?;
    let file = read_wav(&a.input)?;
    file.expect(STEM_COUNT, session.window.sample_rate())?;
    let mut channels = file.channels.into_iter();
    let inputs: [Vec<f32>; STEM_COUNT] = std::array::from_fn(|_| channels.next().expect("four channels"));
    let clock: SharedClock = if a.speed == 1.0 {
        Arc::new(MonotonicClock::new())
    } else {
        Arc::new(ScaledClock::new(a.speed))
    };
    let mut opts = PerformOptions::new(resolve(&a.server, a.send_port)?, any_addr(a.recv_port), inputs);
    opts.session = session;
    opts.stem = a.predict;
    opts.block = a.block;
    opts.out = a.out;
    opts.control = a.control_port.map(accomp::net::loopback);
    opts.start_stopped = a.stopped;
    opts.tail = Duration::from_secs_f64(session.window.step_ms() / 1000.0 * 2.0);
    let report = perform(opts, MetricsHub::new(), clock, Arc::new(AtomicBool::new(false)))?;
    println!(
        "steps_sent={} events={} underruns={} warmup_end={}",
        report.steps_sent,
        report.events.len(),
        report.underruns,
        report.warmup_end
    );
    Ok(())
}

fn run_sweep(a: SweepArgs) -> CliResult {
    let lines: Vec<SweepLine> = if a.fixture {
        ["diffusion", "cd"]
            .iter()
            .flat_map(|name| {
                STEP_SWEEP
                    .iter()
                    .filter(|m| m.model.label() == *name)
                    .map(|m| {
                        let r = StepRatio::new(m.step_frames, 64).expect("fixture ratio");
                        let total = m.stages().full_cycle();
                        let budget = RECEPTIVE_FIELD_MS * r.as_f64();
                        SweepLine {
                            model: m.model.label().to_string(),
                            r: r.to_string(),
                            budget_ms: budget,
                            client_to_server_ms: m.client_to_server_ms,
                            enc_sample_ms: m.enc_sample_ms,
                            decode_ms: m.decode_ms,
                            server_to_client_ms: m.server_to_client_ms,
                            total_ms: total,
                            rt: total < budget,
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    } else {
        let ratios = a
            .ratios
            .iter()
            .map(|r| StepRatio::parse(r, 64))
            .collect::<Result<Vec<_>, _>>()?;
        let d_compute = a.enc_sample_ms + a.decode_ms;
        let model = LatencyModel::new(d_compute, a.c_ms, a.floor_ms)?;
        let topology = match a.topology {
            TopologyArg::Local => Topology::Local,
            TopologyArg::Remote => Topology::Remote,
        };
        let t_ms = a.t_seconds * 1000.0;
        let lines = sweep(&a.model, a.enc_sample_ms, a.decode_ms, &model, topology, t_ms, &ratios);
        if matches!(a.format, Format::Text) {
            if let Ok(r) = min_step_ratio(&model, t_ms) {
                let snapped = snap_to_latent_grid(r, 64).map(|s| s.to_string()).unwrap_or_else(|e| e.to_string());
                eprintln!("r* = {r:.4} (grid: {snapped})");
            }
        }
        lines
    };
    match a.format {
        Format::Text => print!("{}", format_sweep_table(&lines)),
        Format::Csv => print!("{}", format_sweep_csv(&lines)),
        Format::Json => println!("{}", serde_json::to_string_pretty(&lines)?),
    }
    Ok(())
}

fn window_for(config: Option<&std::path::Path>, r: Option<&str>, w: Option<i32>) -> Result<WindowConfig, Box<dyn std::error::Error>> {
    let mut cfg = load_or_default(config)?.window;
    if let Some(r) = r {
        cfg = cfg.with_ratio(StepRatio::parse(r, cfg.latent_frames())?)?;
    }
    if let Some(w) = w {
        cfg = cfg.with_lookahead(w)?;
    }
    Ok(cfg)
}

fn mask(a: MaskArgs) -> CliResult {
    let cfg = window_for(a.config.as_deref(), a.r.as_deref(), a.w)?;
    let (ctx, tgt) = (cfg.context_mask(), cfg.target_mask());
    if a.grid {
        let out = serde_json::json!({
            "frames": cfg.latent_frames(),
            "bins": cfg.latent_bins(),
            "context": ctx.grid(cfg.latent_bins()),
            "target": tgt.grid(cfg.latent_bins()),
        });
        println!("{out}");
        return Ok(());
    }
    let row = |m: Vec<u8>| m.iter().map(|v| char::from(b'0' + v)).collect::<String>();
    println!("r={} w={} regime={:?}", cfg.ratio(), cfg.lookahead(), cfg.regime());
    println!("context boundary={:>3} {}", ctx.boundary_frame, row(ctx.frame_mask()));
    println!("target  boundary={:>3} {}", tgt.boundary_frame, row(tgt.frame_mask()));
    Ok(())
}

fn sample(a: SampleArgs) -> CliResult {
    let cfg = load_or_default(a.config.as_deref())?.window;
    let (frames, bins) = (cfg.latent_frames() as usize, cfg.latent_bins() as usize);
    let target = cfg.target_mask();
    let g = GaussianDenoiser::new(Latent::filled(frames, bins, a.mean), a.sigma_data)?;
    let spec = InpaintSpec {
        target,
        fixed: Latent::filled(frames, bins, a.fixed),
        resamples: a.resamples,
    };
    let mut context = Latent::filled(frames, bins, a.fixed);
    context.apply_mask(cfg.context_mask());
    let cond = Conditioning {
        instrument: Stem::Guitar.one_hot(),
        context,
    };
    let sched = NoiseSchedule::karras(a.steps, a.sigma_min, a.sigma_max, a.rho)?;
    let solver = if a.deterministic { Solver::Dpm2 } else { Solver::default() };
    let z = sample_inpaint(&g, &sched, &spec, &cond, solver, a.seed)?;
    let out = serde_json::json!({
        "frames": frames,
        "bins": bins,
        "target_boundary": target.boundary_frame,
        "sigmas": sched.sigmas,
        "data": z.data(),
    });
    match a.out {
        Some(p) => std::fs::write(p, out.to_string())?,
        None => println!("{out}"),
    }
    Ok(())
}

fn fuzz(a: FuzzArgs) -> CliResult {
    let mut report = fuzz_decoder(a.iterations, a.seed);
    fuzz_reassembly(a.trials, a.seed, &mut report);
    println!("{}", serde_json::to_string(&report)?);
    if !report.ok() {
        return Err("fuzz found failures".into());
    }
    Ok(())
}
