//! Denoiser backends and latent codecs.
//!
//! Samplers only talk to [`DenoiserBackend`]; three implementations ship:
//! an analytic Gaussian-prior oracle, a grid-coupled consensus prior, and a
//! client for the framed wire protocol spoken by an external model server.

mod consensus;
mod gaussian;
pub mod protocol;
mod remote;
pub mod stub;

pub use consensus::{make_consensus_backend, ConsensusBackend};
pub use gaussian::{make_analytic_gaussian, AnalyticGaussian, PriorMean};
pub use remote::{
    remote_backend, remote_backend_with_window, Endpoint, RemoteBackend, RemoteCodec, ServerInfo, DEFAULT_WINDOW,
};

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::diffusion::{cfg_combine, Conditioning, GuidanceScales, Latent};
use crate::error::{Error, Result};

/// What a backend accepts and how it behaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    /// Accepted latent shape as (height, width, channels); 0 = unconstrained.
    pub latent_shape: [usize; 3],
    pub supports_text: bool,
    pub grid_aware: bool,
    pub deterministic: bool,
}

impl BackendDescriptor {
    pub fn check_shape(&self, z: &Latent) -> Result<()> {
        for (axis, (&want, &got)) in self.latent_shape.iter().zip(z.shape()).enumerate() {
            if want != 0 && want != got {
                return Err(Error::shape(format!(
                    "backend {} expects latent {:?}, got {:?} (axis {axis})",
                    self.name,
                    self.latent_shape,
                    z.shape()
                )));
            }
        }
        Ok(())
    }
}

pub trait DenoiserBackend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Noise estimate for a single conditioning branch.
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Conditioning) -> Result<Latent>;

    /// Guided noise estimate. The default evaluates only the branches the
    /// scales need and combines them with [`cfg_combine`].
    fn predict_guided(&self, z_t: &Latent, t: usize, cond: &Conditioning, scales: &GuidanceScales) -> Result<Latent> {
        let image_only = cond.without_text();
        let eps_img = self.predict_noise(z_t, t, &image_only)?;
        let text_used = scales.s_image != 0.0 && self.descriptor().supports_text && cond.effective_text().is_some();
        let eps_img_text = if text_used {
            self.predict_noise(z_t, t, cond)?
        } else {
            eps_img.clone()
        };
        let eps_uncond = if scales.s_text != 0.0 {
            self.predict_noise(z_t, t, &image_only.without_image())?
        } else {
            eps_img.clone()
        };
        cfg_combine(&eps_img, &eps_img_text, &eps_uncond, scales)
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Default)]
pub struct ZeroBackend;

impl DenoiserBackend for ZeroBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "zero".into(),
            latent_shape: [0; 3],
            supports_text: false,
            grid_aware: false,
            deterministic: true,
        }
    }

    fn predict_noise(&self, z_t: &Latent, _t: usize, _cond: &Conditioning) -> Result<Latent> {
        Ok(Latent::zeros(z_t.raw_dim()))
    }
}

/// Maps pixels to latents and back.
pub trait Codec: Send + Sync {
    fn encode(&self, image: &Image) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<Image>;
    /// Spatial downscale from pixels to latents (1 = same resolution).
    fn scale_factor(&self) -> usize;
}

/// Pixels are the latents.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        Ok(image.mapv(f64::from))
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        Ok(latent.mapv(|v| v as f32))
    }

    fn scale_factor(&self) -> usize {
        1
    }
}
