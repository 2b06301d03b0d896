//! Measured per-stage timings (milliseconds, means) for the reference
//! deployments and the step-ratio sweep, used as fixtures for the cycle
//! arithmetic.

use super::StageTimings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Diffusion,
    ConsistencyDistilled,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Diffusion => "diffusion",
            ModelKind::ConsistencyDistilled => "cd",
        }
    }
}

/// One deployment measured at `r = 1/4`, `T = 6 s`.
#[derive(Debug, Clone, Copy)]
pub struct Deployment {
    pub config: u8,
    pub client: &'static str,
    pub server: &'static str,
    pub model: ModelKind,
    pub stages: StageTimings,
    pub reported_full_cycle_ms: f64,
    pub reported_rt: bool,
}

const fn st(to: f64, enc: f64, samp: f64, passes: u32, dec: f64, back: f64) -> StageTimings {
    StageTimings {
        client_to_server_ms: to,
        encode_ms: enc,
        sampling_ms: samp,
        forward_passes: passes,
        decode_ms: dec,
        server_to_client_ms: back,
    }
}

const fn dep(
    config: u8,
    client: &'static str,
    server: &'static str,
    model: ModelKind,
    stages: StageTimings,
    total: f64,
) -> Deployment {
    Deployment {
        config,
        client,
        server,
        model,
        stages,
        reported_full_cycle_ms: total,
        reported_rt: true,
    }
}

use ModelKind::{ConsistencyDistilled as Cd, Diffusion as Diff};

pub const DEPLOYMENTS: [Deployment; 8] = [
    dep(1, "Win 10, SD", "Win 10, RTX 2070, local", Diff, st(17.0, 40.0, 1175.0, 10, 141.0, 25.0), 1398.0),
    dep(1, "Win 10, SD", "Win 10, RTX 2070, local", Cd, st(17.0, 40.0, 130.0, 2, 150.0, 25.0), 362.0),
    dep(2, "Win 10, SD", "Linux, RTX A6000, Paris", Diff, st(188.0, 52.0, 480.0, 10, 72.0, 189.0), 981.0),
    dep(2, "Win 10, SD", "Linux, RTX A6000, Paris", Cd, st(188.0, 52.0, 88.0, 2, 72.0, 189.0), 589.0),
    dep(3, "Mac M2, local", "Mac M2, MPS, local", Diff, st(20.0, 55.0, 1072.0, 10, 89.0, 20.0), 1256.0),
    dep(3, "Mac M2, local", "Mac M2, MPS, local", Cd, st(20.0, 55.0, 146.0, 2, 90.0, 20.0), 331.0),
    dep(4, "Win 10, SD", "Mac M2, MPS, SD, remote", Diff, st(107.0, 55.0, 1072.0, 10, 89.0, 107.0), 1434.0),
    dep(4, "Win 10, SD", "Mac M2, MPS, SD, remote", Cd, st(107.0, 56.0, 146.0, 2, 90.0, 107.0), 506.0),
];

/// Receptive field used in every measurement.
pub const RECEPTIVE_FIELD_MS: f64 = 6000.0;

/// Step-ratio sweep on the remote A6000 deployment. Encoding and sampling
/// were reported as one combined figure.
#[derive(Debug, Clone, Copy)]
pub struct SweepMeasurement {
    pub model: ModelKind,
    /// Step length in frames of a 64-frame latent grid.
    pub step_frames: u32,
    pub reported_budget_ms: f64,
    pub client_to_server_ms: f64,
    pub enc_sample_ms: f64,
    pub decode_ms: f64,
    pub server_to_client_ms: f64,
    pub reported_total_ms: f64,
    pub reported_rt: bool,
}

impl SweepMeasurement {
    /// The combined encode+sampling figure is booked under sampling.
    pub fn stages(&self) -> StageTimings {
        StageTimings::new(
            self.client_to_server_ms,
            0.0,
            self.enc_sample_ms,
            self.decode_ms,
            self.server_to_client_ms,
        )
    }
}

const fn sw(
    model: ModelKind,
    step_frames: u32,
    budget: f64,
    to: f64,
    enc_sample: f64,
    dec: f64,
    back: f64,
    total: f64,
    rt: bool,
) -> SweepMeasurement {
    SweepMeasurement {
        model,
        step_frames,
        reported_budget_ms: budget,
        client_to_server_ms: to,
        enc_sample_ms: enc_sample,
        decode_ms: dec,
        server_to_client_ms: back,
        reported_total_ms: total,
        reported_rt: rt,
    }
}

pub const STEP_SWEEP: [SweepMeasurement; 8] = [
    sw(Diff, 16, 1500.0, 188.0, 532.0, 72.0, 189.0, 981.0, true),
    sw(Diff, 8, 750.0, 145.0, 532.0, 67.0, 145.0, 889.0, false),
    sw(Diff, 4, 375.0, 145.0, 532.0, 64.0, 145.0, 886.0, false),
    sw(Diff, 1, 94.0, 145.0, 532.0, 64.0, 145.0, 886.0, false),
    sw(Cd, 16, 1500.0, 188.0, 140.0, 72.0, 189.0, 589.0, true),
    sw(Cd, 8, 750.0, 145.0, 140.0, 67.0, 145.0, 497.0, true),
    sw(Cd, 4, 375.0, 145.0, 140.0, 64.0, 145.0, 494.0, false),
    sw(Cd, 1, 94.0, 145.0, 140.0, 64.0, 145.0, 494.0, false),
];

/// Local transfer coefficient (ms per unit r) and the A6000 compute costs.
pub const LOCAL_TRANSFER_COEFF_MS: f64 = 80.0;
pub const A6000_COMPUTE_MS: [(ModelKind, f64); 2] = [(Diff, 596.0), (Cd, 204.0)];
