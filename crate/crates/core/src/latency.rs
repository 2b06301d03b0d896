//! Full-cycle latency accounting and real-time feasibility.
//!
//! Times are milliseconds throughout; step ratios are dimensionless.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::window::{StepRatio, WindowConfig, WindowError};

pub mod measurements;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatencyError {
    #[error("{0} must be non-negative and finite")]
    Negative(&'static str),
    #[error("transfer coefficient {c_ms} ms is not below the receptive field {t_ms} ms; no step ratio is feasible")]
    NoFeasibleRatio { c_ms: f64, t_ms: f64 },
    #[error("step ratio {0} exceeds 1; no latent grid point")]
    NoGridPoint(f64),
    #[error(transparent)]
    Window(#[from] WindowError),
}

/// One measured (or simulated) prediction cycle, broken into its five
/// sequential stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub client_to_server_ms: f64,
    pub encode_ms: f64,
    pub sampling_ms: f64,
    pub forward_passes: u32,
    pub decode_ms: f64,
    pub server_to_client_ms: f64,
}

impl StageTimings {
    pub fn new(
        client_to_server_ms: f64,
        encode_ms: f64,
        sampling_ms: f64,
        decode_ms: f64,
        server_to_client_ms: f64,
    ) -> Self {
        Self {
            client_to_server_ms,
            encode_ms,
            sampling_ms,
            forward_passes: 0,
            decode_ms,
            server_to_client_ms,
        }
    }

    pub fn with_forward_passes(mut self, n: u32) -> Self {
        self.forward_passes = n;
        self
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        for (name, v) in [
            ("client_to_server_ms", self.client_to_server_ms),
            ("encode_ms", self.encode_ms),
            ("sampling_ms", self.sampling_ms),
            ("decode_ms", self.decode_ms),
            ("server_to_client_ms", self.server_to_client_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LatencyError::Negative(name));
            }
        }
        Ok(())
    }

    pub fn full_cycle(&self) -> f64 {
        full_cycle(self)
    }
}

pub fn full_cycle(st: &StageTimings) -> f64 {
    st.client_to_server_ms + st.encode_ms + st.sampling_ms + st.decode_ms + st.server_to_client_ms
}

/// `d(r) = d_compute + c * r`, with an optional per-direction network
/// floor for remote deployments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub d_compute_ms: f64,
    pub c_ms: f64,
    pub network_floor_ms: f64,
}

impl LatencyModel {
    pub fn new(d_compute_ms: f64, c_ms: f64, network_floor_ms: f64) -> Result<Self, LatencyError> {
        for (name, v) in [
            ("d_compute", d_compute_ms),
            ("c", c_ms),
            ("network_floor", network_floor_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LatencyError::Negative(name));
            }
        }
        Ok(Self {
            d_compute_ms,
            c_ms,
            network_floor_ms,
        })
    }

    pub fn local(d_compute_ms: f64, c_ms: f64) -> Result<Self, LatencyError> {
        Self::new(d_compute_ms, c_ms, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub d_total_ms: f64,
    pub budget_ms: f64,
    pub feasible: bool,
    pub slack_ms: f64,
}

/// Step duration `T * r` in milliseconds.
pub fn step_budget_ms(receptive_field_ms: f64, ratio: StepRatio) -> f64 {
    receptive_field_ms * ratio.as_f64()
}

/// Real-time holds when the full cycle finishes strictly inside one step.
pub fn rt_feasible(d_total_ms: f64, budget_ms: f64) -> FeasibilityReport {
    FeasibilityReport {
        d_total_ms,
        budget_ms,
        feasible: d_total_ms < budget_ms,
        slack_ms: budget_ms - d_total_ms,
    }
}

pub fn rt_feasible_for(d_total_ms: f64, cfg: &WindowConfig) -> FeasibilityReport {
    rt_feasible(d_total_ms, cfg.step_ms())
}

/// `r* = d_compute / (T - c)`.
pub fn min_step_ratio(model: &LatencyModel, receptive_field_ms: f64) -> Result<f64, LatencyError> {
    if model.c_ms >= receptive_field_ms {
        return Err(LatencyError::NoFeasibleRatio {
            c_ms: model.c_ms,
            t_ms: receptive_field_ms,
        });
    }
    Ok(model.d_compute_ms / (receptive_field_ms - model.c_ms))
}

/// Smallest `k / latent_frames >= r_star` with `k >= 1`.
pub fn snap_to_latent_grid(r_star: f64, latent_frames: u32) -> Result<StepRatio, LatencyError> {
    if !(r_star >= 0.0) {
        return Err(LatencyError::Negative("r_star"));
    }
    if r_star > 1.0 {
        return Err(LatencyError::NoGridPoint(r_star));
    }
    let tz = f64::from(latent_frames);
    let mut k = (r_star * tz).ceil() as u32;
    // ceil on a product that should be an exact integer can overshoot by one ulp
    if k > 1 && f64::from(k - 1) / tz >= r_star {
        k -= 1;
    }
    Ok(StepRatio::new(k.max(1), latent_frames)?)
}

/// Transfer cost for one direction.
pub fn transfer_per_direction_ms(model: &LatencyModel, ratio: f64, topology: Topology) -> f64 {
    let linear = model.c_ms * ratio / 2.0;
    match topology {
        Topology::Local => linear,
        Topology::Remote => linear.max(model.network_floor_ms),
    }
}

/// Predicted cycle time. Locally `d_compute + c * r`; remotely each
/// direction is clamped below by the network floor.
pub fn predict_cycle(model: &LatencyModel, ratio: f64, topology: Topology) -> f64 {
    model.d_compute_ms + 2.0 * transfer_per_direction_ms(model, ratio, topology)
}

/// One row of a step-ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepLine {
    pub model: String,
    pub r: String,
    pub budget_ms: f64,
    pub client_to_server_ms: f64,
    pub enc_sample_ms: f64,
    pub decode_ms: f64,
    pub server_to_client_ms: f64,
    pub total_ms: f64,
    pub rt: bool,
}

/// Predicts each stage of a cycle across step ratios. The
/// encode-plus-sampling and decode costs make up `d_compute`.
pub fn sweep(
    model_name: &str,
    enc_sample_ms: f64,
    decode_ms: f64,
    model: &LatencyModel,
    topology: Topology,
    receptive_field_ms: f64,
    ratios: &[StepRatio],
) -> Vec<SweepLine> {
    ratios
        .iter()
        .map(|&r| {
            let transfer = transfer_per_direction_ms(model, r.as_f64(), topology);
            let total = enc_sample_ms + decode_ms + 2.0 * transfer;
            let budget = step_budget_ms(receptive_field_ms, r);
            SweepLine {
                model: model_name.to_string(),
                r: r.to_string(),
                budget_ms: budget,
                client_to_server_ms: transfer,
                enc_sample_ms,
                decode_ms,
                server_to_client_ms: transfer,
                total_ms: total,
                rt: rt_feasible(total, budget).feasible,
            }
        })
        .collect()
}

pub fn format_sweep_table(lines: &[SweepLine]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>7} {:>8} {:>10} {:>11} {:>7} {:>10} {:>8} {:>3}",
        "model", "r", "T*r", "to_server", "enc+sample", "dec", "to_client", "total", "RT"
    );
    for l in lines {
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>8.0} {:>10.0} {:>11.0} {:>7.0} {:>10.0} {:>8.0} {:>3}",
            l.model,
            l.r,
            l.budget_ms,
            l.client_to_server_ms,
            l.enc_sample_ms,
            l.decode_ms,
            l.server_to_client_ms,
            l.total_ms,
            if l.rt { "yes" } else { "no" }
        );
    }
    out
}

pub fn format_sweep_csv(lines: &[SweepLine]) -> String {
    let mut out = String::from("model,r,budget_ms,client_to_server_ms,enc_sample_ms,decode_ms,server_to_client_ms,total_ms,rt\n");
    for l in lines {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            l.model,
            l.r,
            l.budget_ms,
            l.client_to_server_ms,
            l.enc_sample_ms,
            l.decode_ms,
            l.server_to_client_ms,
            l.total_ms,
            l.rt
        );
    }
    out
}
