use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::Args;
use gridfill_core::backend::stub::{serve_blocking, StubConfig};
use gridfill_core::backend::BackendDescriptor;
use gridfill_core::data::{
    load_dataset, load_render_depths, make_synthetic_scene, save_dataset, save_renders, ArcSpec, DepthEncoding,
    DepthMap, MultiViewDataset, PixelMask, SceneSpec,
};
use gridfill_core::diffusion::GuidanceScales;
use gridfill_core::du::{latent_mask, run_training, DepthPrior, LevelSchedule, TrainConfig, TrainMode};
use gridfill_core::field::{load_field, render_view, save_field, RenderOptions};
use gridfill_core::grid::{independent_inpaint, joint_inpaint, planned_layouts, JointSampleConfig, LatentBatch};
use gridfill_core::metrics::{default_near_offset, eval_dataset_consistency};
use gridfill_core::rng::{derive, derive_seed, tags};
use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, BackendKind};
use crate::error::{CliError, CliResult, Context};
use crate::run::{load_config, to_value, RunDir};
use crate::GlobalArgs;

fn load_data(dir: &Path) -> CliResult<MultiViewDataset> {
    load_dataset(dir).context(|| format!("loading dataset {}", dir.display()))
}

// make-synthetic

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    /// Output run directory; the dataset is written at its root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Voxels per axis of the ground-truth field.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    boxes: Option<usize>,
}

pub fn make_synthetic(g: &GlobalArgs, a: MakeSyntheticArgs) -> CliResult<()> {
    let mut spec: SceneSpec = load_config(g.config.as_deref())?;
    spec.num_views = a.views.unwrap_or(spec.num_views);
    spec.width = a.width.unwrap_or(spec.width);
    spec.height = a.height.unwrap_or(spec.height);
    spec.field_resolution = a.resolution.unwrap_or(spec.field_resolution);
    spec.num_boxes = a.boxes.unwrap_or(spec.num_boxes);

    let scene = make_synthetic_scene(&spec, &mut derive(g.seed, &[tags::SCENE])).context(|| "scene spec".into())?;
    let mut run = RunDir::create(&a.out)?;
    save_dataset(&scene.dataset, &run.root).context(|| "writing dataset".into())?;
    run.record(gridfill_core::data::MANIFEST_FILE);
    let enc = DepthEncoding::for_max_depth(scene.dataset.far).context(|| "depth encoding".into())?;
    save_renders(&scene.gt_images, &scene.gt_depth, &run.path("gt"), &enc).context(|| "writing ground truth".into())?;
    run.record("gt/index.json");
    save_field(&scene.gt_field, &run.path("gt_field.gfv1")).context(|| "writing ground-truth field".into())?;
    run.record("gt_field.gfv1");
    run.write_json("scene.json", &spec)?;
    println!(
        "wrote {} views to {} ({} unknown pixels)",
        scene.dataset.len(),
        a.out.display(),
        scene.dataset.frames.iter().map(|f| f.num_unknown()).sum::<usize>()
    );
    run.finish("make-synthetic", g.seed, &spec)
}

// inpaint-joint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintConfig {
    pub backend: BackendConfig,
    /// Use the first `views` frames; all when absent.
    pub views: Option<usize>,
    pub m_repeats: usize,
    pub num_steps: usize,
    /// Starting timestep; the schedule length when absent.
    pub t_start: Option<usize>,
    pub scales: GuidanceScales,
    /// Frame placed in every grid.
    pub reference: Option<usize>,
    pub text: Option<String>,
    /// Sample each view on its own instead of in grids.
    pub independent: bool,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            views: None,
            m_repeats: 8,
            num_steps: 20,
            t_start: None,
            scales: GuidanceScales::default(),
            reference: None,
            text: None,
            independent: false,
        }
    }
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Model server address for `--backend remote`.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    s_image: Option<f64>,
    #[arg(long)]
    s_text: Option<f64>,
    #[arg(long)]
    text: Option<String>,
}

impl BackendArgs {
    fn apply(&self, b: &mut BackendConfig, scales: &mut GuidanceScales, text: &mut Option<String>) {
        if let Some(k) = self.backend {
            b.kind = k;
        }
        if self.endpoint.is_some() {
            b.endpoint = self.endpoint.clone();
        }
        if let Some(s) = self.s_image {
            scales.s_image = s;
        }
        if let Some(s) = self.s_text {
            scales.s_text = s;
        }
        if self.text.is_some() {
            *text = self.text.clone();
        }
    }
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    /// Number of views inpainted together.
    #[arg(long)]
    n: Option<usize>,
    /// Grid reshuffles averaged per step.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    t_start: Option<usize>,
    #[arg(long)]
    reference: Option<usize>,
    #[arg(long)]
    independent: bool,
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    seed: u64,
    sampler_seed: u64,
    config: &'a InpaintConfig,
    backend: BackendDescriptor,
    views: Vec<String>,
    grids_per_repeat: usize,
    known_checksum: String,
}

pub fn inpaint_joint(g: &GlobalArgs, a: InpaintArgs) -> CliResult<()> {
    let mut cfg: InpaintConfig = load_config(g.config.as_deref())?;
    a.backend.apply(&mut cfg.backend, &mut cfg.scales, &mut cfg.text);
    cfg.views = a.n.or(cfg.views);
    cfg.m_repeats = a.m.unwrap_or(cfg.m_repeats);
    cfg.num_steps = a.steps.unwrap_or(cfg.num_steps);
    cfg.t_start = a.t_start.or(cfg.t_start);
    cfg.reference = a.reference.or(cfg.reference);
    cfg.independent |= a.independent;

    let mut ds = load_data(&a.data)?;
    let n = cfg.views.unwrap_or(ds.len());
    if n == 0 || n > ds.len() {
        return Err(CliError::Config(format!("--n {n} with a {}-view dataset", ds.len())));
    }
    ds.frames.truncate(n);
    if let Some(r) = cfg.reference {
        if r >= n {
            return Err(CliError::Config(format!("--reference {r} is not one of the {n} views")));
        }
    }
    let checksum = ds.known_checksum();
    let backend = cfg.backend.build()?;
    let scale = backend.codec.scale_factor();
    let mut latents = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for f in &ds.frames {
        latents.push(
            backend
                .codec
                .encode(&f.image)
                .context(|| format!("encoding {}", f.name))?,
        );
        masks.push(latent_mask(&f.known, scale).context(|| format!("mask of {}", f.name))?);
    }
    let batch = LatentBatch::new(latents, masks, (0..n).collect())
        .context(|| "latent batch".into())?
        .with_text(cfg.text.clone());
    let sampler_seed = derive_seed(g.seed, &[tags::SAMPLER]);
    let sample_cfg = JointSampleConfig {
        m_repeats: cfg.m_repeats,
        num_steps: cfg.num_steps,
        t_start: cfg.t_start.unwrap_or(backend.schedule.num_train_steps()),
        scales: cfg.scales,
        reference_index: cfg.reference,
        seed: sampler_seed,
        fixed_layouts: None,
    };
    let grids_per_repeat = if cfg.independent {
        0
    } else {
        planned_layouts(&batch, &sample_cfg)
            .context(|| "grid layouts".into())?
            .first()
            .and_then(|s| s.first())
            .map_or(0, |r| r.len())
    };
    let out = if cfg.independent {
        independent_inpaint(backend.denoiser.as_ref(), &batch, &sample_cfg, &backend.schedule)
    } else {
        joint_inpaint(backend.denoiser.as_ref(), &batch, &sample_cfg, &backend.schedule)
    }
    .context(|| "inpainting".into())?;

    for (f, z) in ds.frames.iter_mut().zip(&out) {
        let decoded = backend.codec.decode(z).context(|| format!("decoding {}", f.name))?;
        if decoded.dim() != f.image.dim() {
            return Err(CliError::Core {
                context: format!("decoding {}", f.name),
                source: gridfill_core::Error::Shape(format!("{:?} vs {:?}", decoded.dim(), f.image.dim())),
            });
        }
        for ((y, x), &k) in f.known.indexed_iter() {
            if !k {
                for c in 0..3 {
                    f.image[[y, x, c]] = decoded[[y, x, c]].clamp(0.0, 1.0);
                }
            }
        }
    }
    if ds.known_checksum() != checksum {
        return Err(CliError::Config("known pixels changed during inpainting".into()));
    }

    let mut run = RunDir::create(&a.out)?;
    save_dataset(&ds, &run.path("dataset")).context(|| "writing inpainted dataset".into())?;
    run.record("dataset/transforms.json");
    let provenance = Provenance {
        seed: g.seed,
        sampler_seed,
        config: &cfg,
        backend: backend.descriptor.clone(),
        views: ds.frames.iter().map(|f| f.name.clone()).collect(),
        grids_per_repeat,
        known_checksum: checksum,
    };
    run.write_json("provenance.json", &provenance)?;
    println!("inpainted {n} views into {}", run.path("dataset").display());
    run.finish("inpaint-joint", g.seed, &cfg)
}

// train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub train: TrainConfig,
    pub backend: BackendConfig,
    /// Depth prior: `none`, `gt` for the dataset's `gt/` renders with
    /// noise, or a directory of depth renders used as is.
    pub depth: String,
    /// Depth-ranking weight used when a prior is set and the training
    /// config leaves it at zero.
    pub default_depth_weight: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            backend: BackendConfig::default(),
            depth: "none".into(),
            default_depth_weight: 0.1,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    t_min: Option<f64>,
    /// Iterations after warmup.
    #[arg(long)]
    total: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Iterations between dataset updates.
    #[arg(short = 'S', long = "update-interval")]
    update_interval: Option<usize>,
    #[arg(long, value_enum)]
    noise_schedule: Option<ScheduleArg>,
    /// Views re-inpainted per update.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// `none`, `gt`, or a depth render directory.
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    depth_weight: Option<f64>,
    #[arg(long)]
    eval_near_offset: Option<f64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    JointDu,
    IndependentDu,
    InpaintOnce,
    MaskedOnly,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::JointDu => TrainMode::JointDu,
            ModeArg::IndependentDu => TrainMode::IndependentDu,
            ModeArg::InpaintOnce => TrainMode::InpaintOnce,
            ModeArg::MaskedOnly => TrainMode::MaskedOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ScheduleArg {
    Linear,
    Random,
}

fn load_depth_prior(
    cfg: &TrainRunConfig,
    data: &std::path::Path,
    ds: &MultiViewDataset,
    seed: u64,
) -> CliResult<DepthPrior> {
    let (dir, with_noise) = match cfg.depth.as_str() {
        "none" | "" => return Ok(DepthPrior::none()),
        "gt" => (data.join("gt"), true),
        other => (PathBuf::from(other), false),
    };
    let (_, maps) = load_render_depths(&dir).context(|| format!("loading depth from {}", dir.display()))?;
    if maps.len() != ds.len() {
        return Err(CliError::Config(format!(
            "{} depth maps in {} for {} views",
            maps.len(),
            dir.display(),
            ds.len()
        )));
    }
    if with_noise {
        let mut rng = derive(seed, &[tags::DEPTH, 1]);
        DepthPrior::from_ground_truth(&maps, cfg.train.depth.prior_noise, &mut rng).context(|| "depth prior".into())
    } else {
        let valid: Vec<PixelMask> = maps
            .iter()
            .map(|m: &DepthMap| m.mapv(|d| d.is_finite() && d > 0.0))
            .collect();
        DepthPrior::external(maps, valid).context(|| "depth prior".into())
    }
}

pub fn train(g: &GlobalArgs, a: TrainArgs) -> CliResult<()> {
    let mut cfg: TrainRunConfig = load_config(g.config.as_deref())?;
    {
        let t = &mut cfg.train;
        a.backend.apply(&mut cfg.backend, &mut t.scales, &mut t.text);
        t.mode = a.mode.map(Into::into).unwrap_or(t.mode);
        t.t_min = a.t_min.unwrap_or(t.t_min);
        t.total_iterations = a.total.unwrap_or(t.total_iterations);
        t.warmup_iterations = a.warmup.unwrap_or(t.warmup_iterations);
        t.update_interval = a.update_interval.unwrap_or(t.update_interval);
        if let Some(s) = a.noise_schedule {
            t.noise_schedule = match s {
                ScheduleArg::Linear => LevelSchedule::Linear,
                ScheduleArg::Random => LevelSchedule::Random,
            };
        }
        t.batch_views = a.n.unwrap_or(t.batch_views);
        t.m_repeats = a.m.unwrap_or(t.m_repeats);
        t.num_steps = a.steps.unwrap_or(t.num_steps);
        t.field_resolution = a.resolution.unwrap_or(t.field_resolution);
        t.rays_per_batch = a.rays.unwrap_or(t.rays_per_batch);
        t.render.samples_per_ray = a.samples.unwrap_or(t.render.samples_per_ray);
        t.loss.depth = a.depth_weight.unwrap_or(t.loss.depth);
        t.eval_near_offset = a.eval_near_offset.or(t.eval_near_offset);
        t.seed = g.seed;
    }
    if let Some(d) = &a.depth {
        cfg.depth = d.clone();
    }
    if cfg.depth != "none" && cfg.train.loss.depth == 0.0 {
        cfg.train.loss.depth = cfg.default_depth_weight;
    }
    cfg.train.validate().context(|| "training config".into())?;

    let ds = load_data(&a.data)?;
    let prior = load_depth_prior(&cfg, &a.data, &ds, g.seed)?;
    if !prior.is_active() {
        cfg.train.loss.depth = 0.0;
    }
    let backend = if cfg.train.mode.updates() {
        Some(cfg.backend.build()?)
    } else {
        None
    };
    let mut run = RunDir::create(&a.out)?;
    let checkpoint = run.path("field.gfv1");
    let zero = crate::backend::BackendConfig {
        kind: BackendKind::Zero,
        ..BackendConfig::default()
    };
    let fallback;
    let b = match &backend {
        Some(b) => b,
        None => {
            fallback = zero.build()?;
            &fallback
        }
    };
    let outcome = run_training(
        &cfg.train,
        &ds,
        b.denoiser.as_ref(),
        b.codec.as_ref(),
        &b.schedule,
        &prior,
        Some(&checkpoint),
    )
    .context(|| "training".into())?;

    save_field(&outcome.field, &checkpoint).context(|| "writing checkpoint".into())?;
    run.record("field.gfv1");
    save_dataset(&outcome.dataset, &run.path("dataset")).context(|| "writing updated dataset".into())?;
    run.record("dataset/transforms.json");
    let report = serde_json::json!({
        "run_config": to_value(&cfg),
        "backend": backend.as_ref().map(|b| b.descriptor.clone()),
        "report": outcome.report,
    });
    run.write_json("report.json", &report)?;
    run.write_text("metrics.csv", &outcome.report.final_metrics.to_csv())?;
    let m = &outcome.report.final_metrics;
    println!(
        "trained {:?}: PSNR {:.2} (known {}, unknown {})",
        cfg.train.mode,
        m.mean_psnr,
        fmt_opt(m.mean_psnr_known),
        fmt_opt(m.mean_psnr_unknown)
    );
    run.finish("train", g.seed, &cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
}

// render

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub orbit: ArcSpec,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fov_y_degrees: f64,
    pub render: RenderOptions,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            orbit: ArcSpec::default(),
            frames: 300,
            width: 32,
            height: 32,
            fov_y_degrees: 60.0,
            render: RenderOptions::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    /// Camera height (world y).
    #[arg(long)]
    elevation: Option<f64>,
    #[arg(long)]
    start_deg: Option<f64>,
    #[arg(long)]
    end_deg: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
}

pub fn render(g: &GlobalArgs, a: RenderArgs) -> CliResult<()> {
    let mut cfg: RenderConfig = load_config(g.config.as_deref())?;
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.orbit.radius = a.radius.unwrap_or(cfg.orbit.radius);
    cfg.orbit.height = a.elevation.unwrap_or(cfg.orbit.height);
    cfg.orbit.start_degrees = a.start_deg.unwrap_or(cfg.orbit.start_degrees);
    cfg.orbit.end_degrees = a.end_deg.unwrap_or(cfg.orbit.end_degrees);
    cfg.render.samples_per_ray = a.samples.unwrap_or(cfg.render.samples_per_ray);

    let field = load_field(&a.field).context(|| format!("loading {}", a.field.display()))?;
    cfg.render.far = cfg.render.far.max(field.bounds().diagonal());
    cfg.render.validate().context(|| "render options".into())?;
    let cams = cfg
        .orbit
        .cameras(cfg.frames, cfg.width, cfg.height, cfg.fov_y_degrees)
        .context(|| "orbit path".into())?;
    let mut images = Vec::with_capacity(cams.len());
    let mut depths = Vec::with_capacity(cams.len());
    for cam in &cams {
        let r = render_view(&field, cam, &cfg.render, None).context(|| "rendering".into())?;
        images.push(r.rgb);
        depths.push(r.depth);
    }
    let mut run = RunDir::create(&a.out)?;
    let enc = DepthEncoding::for_max_depth(cfg.render.far).context(|| "depth encoding".into())?;
    save_renders(&images, &depths, &run.path("renders"), &enc).context(|| "writing renders".into())?;
    run.record("renders/index.json");
    println!("rendered {} frames to {}", images.len(), run.path("renders").display());
    run.finish("render", g.seed, &cfg)
}

// eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct EvalConfig {
    /// Added to the dataset near distance; a fraction of the scene
    /// diagonal when absent.
    pub near_offset: Option<f64>,
    pub render: RenderOptions,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    near_offset: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
}

pub fn eval(g: &GlobalArgs, a: EvalArgs) -> CliResult<()> {
    let mut cfg: EvalConfig = load_config(g.config.as_deref())?;
    cfg.near_offset = a.near_offset.or(cfg.near_offset);
    cfg.render.samples_per_ray = a.samples.unwrap_or(cfg.render.samples_per_ray);
    let field = load_field(&a.field).context(|| format!("loading {}", a.field.display()))?;
    let ds = load_data(&a.data)?;
    let offset = cfg.near_offset.unwrap_or_else(|| default_near_offset(&ds));
    let report = eval_dataset_consistency(&field, &ds, &cfg.render, offset).context(|| "evaluation".into())?;
    let mut run = RunDir::create(&a.out)?;
    run.write_json("metrics.json", &report)?;
    run.write_text("metrics.csv", &report.to_csv())?;
    println!(
        "PSNR {:.2}, SSIM {}, unknown PSNR {}",
        report.mean_psnr,
        fmt_opt(report.mean_ssim),
        fmt_opt(report.mean_psnr_unknown)
    );
    run.finish("eval", g.seed, &cfg)
}

// serve-stub

#[derive(Debug, Args)]
pub struct ServeStubArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Advertised latent shape `h,w,c`; 0 leaves an axis free.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    latent_shape: Option<Vec<usize>>,
    #[arg(long)]
    text: bool,
    #[arg(long, default_value_t = 8)]
    window: usize,
}

pub fn serve_stub(_g: &GlobalArgs, a: ServeStubArgs) -> CliResult<()> {
    let mut cfg = StubConfig {
        supports_text: a.text,
        window: a.window,
        ..StubConfig::default()
    };
    if let Some(s) = a.latent_shape {
        cfg.latent_shape = [s[0], s[1], s[2]];
    }
    let listener = TcpListener::bind(&a.listen).map_err(|e| CliError::Config(format!("bind {}: {e}", a.listen)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| CliError::Config(format!("bind {}: {e}", a.listen)))?;
    println!("listening on tcp://{addr}");
    serve_blocking(listener, cfg);
    Ok(())
}
