use std::sync::Arc;
use std::time::Duration;

use clap::ValueEnum;
use gridfill_core::backend::{
    make_analytic_gaussian, make_consensus_backend, remote_backend, BackendDescriptor, Codec, DenoiserBackend,
    Endpoint, IdentityCodec, ZeroBackend,
};
use gridfill_core::diffusion::{NoiseSchedule, ScheduleConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Analytic Gaussian prior, one view at a time.
    Gaussian,
    /// Gaussian prior pulled toward the per-position mean of a grid.
    Consensus,
    /// Predicts zero noise.
    Zero,
    /// Model server over the wire protocol.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// `tcp://host:port` or `unix:///path`, for the remote backend.
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    /// Prior mean of clean latents for the local backends.
    pub mean: f64,
    /// Per-position prior deviation.
    pub sigma: f64,
    /// Per-channel deviation shared by all positions of one input.
    pub shared_sigma: f64,
    /// Consensus pull in [0, 1].
    pub strength: f64,
    pub schedule: ScheduleConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Consensus,
            endpoint: None,
            timeout_secs: 30,
            mean: 0.5,
            sigma: 0.25,
            shared_sigma: 0.2,
            strength: 0.9,
            schedule: ScheduleConfig::default(),
        }
    }
}

pub struct Backend {
    pub denoiser: Box<dyn DenoiserBackend>,
    pub codec: Box<dyn Codec>,
    pub schedule: Arc<NoiseSchedule>,
    pub descriptor: BackendDescriptor,
}

impl BackendConfig {
    pub fn build(&self) -> CliResult<Backend> {
        let schedule = Arc::new(NoiseSchedule::new(&self.schedule).context(|| "noise schedule".into())?);
        let gaussian = || {
            make_analytic_gaussian(self.mean, self.sigma, schedule.clone())
                .and_then(|g| g.with_shared_sigma(self.shared_sigma))
                .context(|| "gaussian backend".into())
        };
        let (denoiser, codec): (Box<dyn DenoiserBackend>, Box<dyn Codec>) = match self.kind {
            BackendKind::Gaussian => (Box::new(gaussian()?), Box::new(IdentityCodec)),
            BackendKind::Consensus => {
                let b = make_consensus_backend(gaussian()?, self.strength).context(|| "consensus backend".into())?;
                (Box::new(b), Box::new(IdentityCodec))
            }
            BackendKind::Zero => (Box::new(ZeroBackend), Box::new(IdentityCodec)),
            BackendKind::Remote => {
                let raw = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| CliError::Config("the remote backend needs --endpoint".into()))?;
                let endpoint: Endpoint = raw.parse().map_err(|e| CliError::Config(format!("{e}")))?;
                let (b, c) = remote_backend(&endpoint, Duration::from_secs(self.timeout_secs))
                    .context(|| format!("connecting to {endpoint}"))?;
                (Box::new(b), Box::new(c))
            }
        };
        let descriptor = denoiser.descriptor();
        Ok(Backend {
            denoiser,
            codec,
            schedule,
            descriptor,
        })
    }
}
