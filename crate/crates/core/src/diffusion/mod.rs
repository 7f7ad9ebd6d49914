//! Noise schedules, the forward process, DDIM stepping, guidance and
//! known-region enforcement.

mod ops;
mod sampler;
mod schedule;

pub(crate) use ops::check_mask;
pub use ops::{
    add_noise, cfg_combine, ddim_step, enforce_known, Conditioning, GuidanceScales, Latent, LatentMask, Tiling,
};
pub use sampler::{initial_latent, sample, sample_with, standard_normal};
pub use schedule::{
    ddim_timesteps, make_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_TRAIN_STEPS,
};
