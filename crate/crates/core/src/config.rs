//! Session configuration files (TOML).
//!
//! ```toml
//! T_seconds = 6.0
//! sample_rate = 44100
//! latent_frames = 64
//! latent_bins = 64
//! step_ratio = "1/4"
//! lookahead_w = 1
//! fade_samples = 882
//! packet_size = 4410
//! ```
//!
//! Every key is optional and defaults to the values above.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::window::{WindowConfig, WindowError, WindowParams};
use crate::wire::DEFAULT_PACKET_SIZE;

/// Keep one chunk inside a single UDP datagram.
pub const MAX_PACKET_SIZE: usize = 16_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error("packet_size must be in 1..={MAX_PACKET_SIZE}, got {0}")]
    PacketSize(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionFile {
    #[serde(rename = "T_seconds", alias = "t_seconds")]
    pub t_seconds: f64,
    pub sample_rate: u32,
    pub latent_frames: u32,
    pub latent_bins: u32,
    pub step_ratio: String,
    pub lookahead_w: i32,
    pub fade_samples: usize,
    pub packet_size: usize,
}

impl Default for SessionFile {
    fn default() -> Self {
        let p = WindowParams::default();
        Self {
            t_seconds: p.t_seconds,
            sample_rate: p.sample_rate,
            latent_frames: p.latent_frames,
            latent_bins: p.latent_bins,
            step_ratio: p.step_ratio,
            lookahead_w: p.lookahead_w,
            fade_samples: p.fade_samples,
            packet_size: DEFAULT_PACKET_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionConfig {
    pub window: WindowConfig,
    pub packet_size: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            packet_size: DEFAULT_PACKET_SIZE,
        }
    }
}

pub fn check_packet_size(packet_size: usize) -> Result<usize, ConfigError> {
    if packet_size == 0 || packet_size > MAX_PACKET_SIZE {
        return Err(ConfigError::PacketSize(packet_size));
    }
    Ok(packet_size)
}

impl SessionFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn resolve(&self) -> Result<SessionConfig, ConfigError> {
        let window = WindowConfig::from_params(&WindowParams {
            t_seconds: self.t_seconds,
            sample_rate: self.sample_rate,
            latent_frames: self.latent_frames,
            latent_bins: self.latent_bins,
            step_ratio: self.step_ratio.clone(),
            lookahead_w: self.lookahead_w,
            fade_samples: self.fade_samples,
        })?;
        Ok(SessionConfig {
            window,
            packet_size: check_packet_size(self.packet_size)?,
        })
    }
}

/// Loads `path`, or the defaults when no path is given.
pub fn load_or_default(path: Option<&Path>) -> Result<SessionConfig, ConfigError> {
    match path {
        Some(p) => SessionFile::load(p)?.resolve(),
        None => SessionFile::default().resolve(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = SessionFile::parse("").unwrap().resolve().unwrap();
        assert_eq!(c, SessionConfig::default());
        let c = SessionFile::parse("step_ratio = \"1/8\"\nlookahead_w = 0\npacket_size = 2205\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.window.step_samples(), 33_075);
        assert_eq!(c.window.lookahead(), 0);
        assert_eq!(c.packet_size, 2205);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(SessionFile::parse("nonsense = 1").is_err());
        assert!(matches!(
            SessionFile::parse("step_ratio = \"1/2\"").unwrap().resolve(),
            Err(ConfigError::Window(WindowError::PredictionOutsideContext { .. }))
        ));
        assert!(matches!(
            SessionFile::parse("packet_size = 0").unwrap().resolve(),
            Err(ConfigError::PacketSize(0))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("session.toml");
        let f = SessionFile {
            fade_samples: 441,
            ..SessionFile::default()
        };
        std::fs::write(&path, toml::to_string(&f).unwrap()).unwrap();
        assert_eq!(SessionFile::load(&path).unwrap(), f);
        assert!(load_or_default(Some(&dir.path().join("missing.toml"))).is_err());
    }
}
