//! Acceptance criteria. Each test prints one `ACCEPTANCE [PASS|FAIL]` line
//! straight to stderr so the verdicts show up even when output is captured.
//! Timed criteria run one at a time.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use gridfill_core::backend::{make_analytic_gaussian, make_consensus_backend, Codec, ConsensusBackend, IdentityCodec};
use gridfill_core::data::{make_synthetic_scene, Image, MultiViewDataset, SceneSpec, SyntheticScene};
use gridfill_core::diffusion::{
    add_noise, cfg_combine, ddim_step, ddim_timesteps, make_schedule, sample, Conditioning, GuidanceScales, Latent,
    LatentMask, NoiseSchedule, ScheduleKind,
};
use gridfill_core::du::{
    anneal_t, latent_mask, rank_hinge, run_training, DepthPrior, LevelSchedule, TrainConfig, TrainMode, TrainOutcome,
};
use gridfill_core::field::{
    render_rays, softplus_inv, Aabb, Background, FieldOptimizer, LossWeights, OptimizerConfig, RadianceField, RayBatch,
    RayTape, RenderOptions,
};
use gridfill_core::grid::{
    grid_tile, grid_untile, independent_inpaint, joint_inpaint, permute_into_grids, reference_layouts, GridLayout,
    JointSampleConfig, LatentBatch,
};
use gridfill_core::metrics::{cross_view_consistency, default_near_offset, eval_dataset_consistency};
use gridfill_core::rng::{derive, derive_seed, tags};
use rand::Rng;
use rand_distr::StandardNormal;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("ACCEPTANCE [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

fn sched() -> Arc<NoiseSchedule> {
    Arc::new(make_schedule(ScheduleKind::Linear, 1000).unwrap())
}

fn consensus(s: &Arc<NoiseSchedule>) -> ConsensusBackend {
    let prior = make_analytic_gaussian(0.5, 0.25, s.clone())
        .unwrap()
        .with_shared_sigma(0.2)
        .unwrap();
    make_consensus_backend(prior, 0.9).unwrap()
}

fn room(views: usize, seed: u64) -> SyntheticScene {
    let spec = SceneSpec {
        num_views: views,
        ..SceneSpec::default()
    };
    make_synthetic_scene(&spec, &mut derive(seed, &[tags::SCENE])).unwrap()
}

fn encode_dataset(ds: &MultiViewDataset, codec: &dyn Codec) -> LatentBatch {
    let latents = ds.frames.iter().map(|f| codec.encode(&f.image).unwrap()).collect();
    let masks = ds
        .frames
        .iter()
        .map(|f| latent_mask(&f.known, codec.scale_factor()).unwrap())
        .collect();
    LatentBatch::new(latents, masks, (0..ds.len()).collect()).unwrap()
}

#[test]
fn grid_algebra() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = derive(1, &[]);
    let mut failures = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(4..12);
        let dim = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..5));
        let latents: Vec<Latent> = (0..n)
            .map(|_| Latent::from_shape_fn(dim, |_| rng.gen::<f64>()))
            .collect();
        let masks: Vec<LatentMask> = (0..n)
            .map(|_| LatentMask::from_shape_fn((dim.0, dim.1), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }))
            .collect();
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..4 {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        let layout = GridLayout::new([idx[0], idx[1], idx[2], idx[3]]).unwrap();
        let (grid, _) = grid_tile(&latents, &masks, &layout).unwrap();
        let back = grid_untile(&grid, &layout).unwrap();
        if back.iter().any(|(i, l)| l != latents[*i]) {
            failures += 1;
        }
    }
    let mut partitions = 0;
    for k in 1..=25 {
        for s in 0..40 {
            let layouts = permute_into_grids(4 * k, &mut derive(s, &[k as u64])).unwrap();
            let all: Vec<usize> = layouts.iter().flat_map(|l| l.members()).collect();
            let set: BTreeSet<usize> = all.iter().copied().collect();
            if all.len() == 4 * k && set.len() == 4 * k && set.iter().all(|&v| v < 4 * k) {
                partitions += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "grid algebra",
        failures == 0 && partitions == 1000 && elapsed < Duration::from_secs(5),
        &format!(
            "{failures}/1000 roundtrip mismatches, {partitions}/1000 permutations partition, {:.2} s (limit 5 s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn scheduler_correctness() {
    let _g = serial();
    let s = sched();
    let (mu, sigma) = (0.3, 0.5);
    let backend = make_analytic_gaussian(mu, sigma, s.clone()).unwrap();
    let cond = Conditioning::from_known(&Latent::zeros((1, 1, 1)), &LatentMask::zeros((1, 1))).unwrap();
    let scales = GuidanceScales::default();
    let run = |eps: f64, seed: u64| -> f64 {
        let z = Latent::from_elem((1, 1, 1), eps);
        sample(&backend, &z, &cond, &scales, 20, 1000, &s, &mut derive(seed, &[1])).unwrap()[[0, 0, 0]]
    };
    // 500 antithetic pairs: deterministic DDIM under a Gaussian prior is
    // affine in the initial noise, so each pair isolates the sampler's bias.
    let mut rng = derive(2, &[]);
    let mut outs = Vec::with_capacity(1000);
    for k in 0..500 {
        let e: f64 = rng.sample(StandardNormal);
        outs.push(run(e, 2 * k));
        outs.push(run(-e, 2 * k + 1));
    }
    let mean = outs.iter().sum::<f64>() / outs.len() as f64;
    let std = (outs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (outs.len() - 1) as f64).sqrt();
    let bias = (mean - mu).abs() / sigma;

    // Independent draws, reported for context.
    let mut rng = derive(3, &[]);
    let plain: Vec<f64> = (0..1000).map(|k| run(rng.sample(StandardNormal), 5000 + k)).collect();
    let plain_mean = plain.iter().sum::<f64>() / 1000.0;
    let plain_z = (plain_mean - mu) / (sigma / 1000f64.sqrt());

    // Exact-noise inversion.
    let mut max_err: f64 = 0.0;
    let mut rng = derive(4, &[]);
    for _ in 0..200 {
        let z0 = Latent::from_shape_fn((2, 2, 4), |_| rng.gen_range(-2.0..2.0));
        let eps = Latent::from_shape_fn((2, 2, 4), |_| rng.sample(StandardNormal));
        let ts = ddim_timesteps(1000, 20);
        let mut z = add_noise(&z0, &eps, ts[0], &s).unwrap();
        for w in ts.windows(2) {
            z = ddim_step(&z, &eps, w[0], w[1], &s).unwrap();
        }
        max_err = z.iter().zip(&z0).map(|(a, b)| (a - b).abs()).fold(max_err, f64::max);
    }
    verdict(
        "scheduler correctness",
        bias < 0.02 && max_err < 1e-6,
        &format!(
            "|mean - mu| = {bias:.5} sigma over 1000 runs (limit 0.02), sample std {:.4} sigma, \
             independent-draw mean z-score {plain_z:.2}; inversion max error {max_err:.2e} (limit 1e-6)",
            std / sigma
        ),
    );
}

#[test]
fn cfg_identities() {
    let _g = serial();
    let mut rng = derive(5, &[]);
    let mut exact = true;
    let mut max_lin: f64 = 0.0;
    for _ in 0..200 {
        let dim = (3, 4, 2);
        let mut draw = || Latent::from_shape_fn(dim, |_| rng.gen_range(-3.0..3.0));
        let (io, it, un) = (draw(), draw(), draw());
        let (io2, it2, un2) = (draw(), draw(), draw());
        exact &= cfg_combine(
            &io,
            &it,
            &un,
            &GuidanceScales {
                s_image: 0.0,
                s_text: 0.0,
            },
        )
        .unwrap()
            == io;
        exact &= cfg_combine(
            &io,
            &it,
            &un,
            &GuidanceScales {
                s_image: 1.0,
                s_text: 0.0,
            },
        )
        .unwrap()
            == it;
        let sc = GuidanceScales {
            s_image: rng.gen_range(0.0..8.0),
            s_text: rng.gen_range(0.0..8.0),
        };
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let lhs = cfg_combine(&(&io * a + &io2 * b), &(&it * a + &it2 * b), &(&un * a + &un2 * b), &sc).unwrap();
        let rhs = cfg_combine(&io, &it, &un, &sc).unwrap() * a + cfg_combine(&io2, &it2, &un2, &sc).unwrap() * b;
        max_lin = lhs.iter().zip(&rhs).map(|(x, y)| (x - y).abs()).fold(max_lin, f64::max);
    }
    verdict(
        "CFG identities",
        exact && max_lin < 1e-12,
        &format!("(0,0) and (1,0) bit-exact: {exact}; linearity max deviation {max_lin:.1e} (float rounding only)"),
    );
}

#[test]
fn known_pixel_contract() {
    let _g = serial();
    let s = sched();
    let backend = consensus(&s);
    let sc = room(40, 21);
    let before = sc.dataset.known_checksum();

    let batch = encode_dataset(&sc.dataset, &IdentityCodec);
    let cfg = JointSampleConfig {
        m_repeats: 8,
        num_steps: 20,
        seed: 3,
        ..JointSampleConfig::default()
    };
    let out = joint_inpaint(&backend, &batch, &cfg, &s).unwrap();
    // Write every decoded pixel back, known ones included.
    let mut ds = sc.dataset.clone();
    for (f, z) in ds.frames.iter_mut().zip(&out) {
        f.image = IdentityCodec.decode(z).unwrap();
    }
    let joint_ok = ds.known_checksum() == before;

    let mut tc = TrainConfig {
        total_iterations: 1000,
        warmup_iterations: 300,
        update_interval: 250,
        batch_views: 16,
        m_repeats: 4,
        rays_per_batch: 256,
        field_resolution: 32,
        seed: 4,
        ..TrainConfig::default()
    };
    tc.loss.depth = 0.1;
    let prior = DepthPrior::from_ground_truth(&sc.gt_depth, 0.05, &mut derive(4, &[tags::DEPTH])).unwrap();
    let run = run_training(&tc, &sc.dataset, &backend, &IdentityCodec, &s, &prior, None).unwrap();
    let du_ok = run.report.known_pixels_verified
        && run.dataset.known_checksum() == before
        && run.report.known_checksum == before
        && run.report.updates.len() == 4;
    verdict(
        "known-pixel contract",
        joint_ok && du_ok,
        &format!(
            "joint_inpaint checksum preserved: {joint_ok}; DU run ({} updates, depth ranking on) checksum preserved: {du_ok}",
            run.report.updates.len()
        ),
    );
}

#[test]
fn consistency_direction() {
    let _g = serial();
    let start = Instant::now();
    let s = sched();
    let backend = consensus(&s);
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in 0..20u64 {
        let sc = room(40, 100 + seed);
        let batch = encode_dataset(&sc.dataset, &IdentityCodec);
        assert_eq!(batch.latent_dim(), (32, 32, 3));
        let cfg = JointSampleConfig {
            m_repeats: 8,
            num_steps: 20,
            seed: derive_seed(seed, &[tags::SAMPLER]),
            ..JointSampleConfig::default()
        };
        let score = |latents: Vec<Latent>| {
            let images: Vec<Image> = latents.iter().map(|z| IdentityCodec.decode(z).unwrap()).collect();
            let known: Vec<_> = sc.dataset.frames.iter().map(|f| f.known.clone()).collect();
            cross_view_consistency(&images, &known, &sc.dataset, &sc.gt_depth, 1)
                .unwrap()
                .mean_abs_diff
        };
        let joint = score(joint_inpaint(&backend, &batch, &cfg, &s).unwrap());
        let single = score(independent_inpaint(&backend, &batch, &cfg, &s).unwrap());
        if joint < single {
            wins += 1;
        }
        gaps.push((joint, single));
    }
    let elapsed = start.elapsed();
    let mean = |f: fn(&(f64, f64)) -> f64| gaps.iter().map(f).sum::<f64>() / gaps.len() as f64;
    verdict(
        "consistency direction",
        wins >= 18 && elapsed < Duration::from_secs(600),
        &format!(
            "joint < independent in {wins}/20 seeds (need 18); mean cross-view |diff| joint {:.4} vs independent {:.4}; {:.0} s (limit 600 s)",
            mean(|g| g.0),
            mean(|g| g.1),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn rendering_physics() {
    let _g = serial();
    let mut rng = derive(6, &[]);
    let opts = RenderOptions {
        samples_per_ray: 256,
        transmittance_cutoff: 0.0,
        ..RenderOptions::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let sigma = rng.gen_range(0.05..5.0);
        let half = [0, 1, 2].map(|_| rng.gen_range(0.5..2.0));
        let bounds = Aabb::new(half.map(|h| -h), half).unwrap();
        let field =
            RadianceField::constant([4, 4, 4], bounds, Background::Black, softplus_inv(sigma), [0.0; 3]).unwrap();
        // A ray along an axis, starting outside the box.
        let axis = rng.gen_range(0..3);
        let mut origin = [0, 1, 2].map(|a| rng.gen_range(-0.5..0.5) * half[a]);
        origin[axis] = -half[axis] - rng.gen_range(0.0..0.3);
        let mut dir = [0.0; 3];
        dir[axis] = 1.0;
        let chord = 2.0 * half[axis];
        let enter = -half[axis] - origin[axis];
        // The march covers the chord with up to a quarter of slack each side.
        let near = (enter - rng.gen_range(0.0..0.25) * chord).max(0.0);
        let far = enter + chord * (1.0 + rng.gen_range(0.0..0.25));
        let rays = RayBatch::new(vec![origin], vec![dir], near, far, vec![0]).unwrap();
        let out = render_rays(&field, &rays, &opts, None).unwrap()[0];
        let want = 1.0 - (-sigma * chord).exp();
        worst = worst.max((out.opacity - want).abs() / want);
    }

    let mut max_sum: f64 = 0.0;
    let mut rays_checked = 0;
    for _ in 0..100 {
        let res = [rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8)];
        let n = res.iter().product::<usize>() * 4;
        let params = (0..n).map(|i| {
            if i % 4 == 0 {
                rng.gen_range(-5.0..12.0)
            } else {
                rng.gen_range(-4.0..4.0)
            }
        });
        let field = RadianceField::from_params(
            res,
            Aabb::new([-1.0; 3], [1.0; 3]).unwrap(),
            Background::White,
            params.collect(),
        )
        .unwrap();
        let k = 100;
        let origins: Vec<[f64; 3]> = (0..k).map(|_| [0, 1, 2].map(|_| rng.gen_range(-2.0..2.0))).collect();
        let dirs: Vec<[f64; 3]> = (0..k)
            .map(|_| {
                let v: [f64; 3] = [0, 1, 2].map(|_| rng.sample(StandardNormal));
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|x| x / l)
            })
            .collect();
        let o = RenderOptions {
            samples_per_ray: rng.gen_range(2..128),
            transmittance_cutoff: if rng.gen_bool(0.5) { 0.0 } else { 1e-4 },
            ..RenderOptions::default()
        };
        let rays = RayBatch::new(
            origins,
            dirs,
            rng.gen_range(0.0..0.5),
            rng.gen_range(1.0..6.0),
            (0..k).collect(),
        )
        .unwrap();
        let tape = RayTape::forward(&field, &rays, &o, Some(&mut derive(rays_checked as u64, &[]))).unwrap();
        for r in 0..k {
            max_sum = max_sum.max(tape.weights(r).sum::<f64>());
            rays_checked += 1;
        }
    }
    verdict(
        "rendering physics",
        worst < 0.01 && max_sum <= 1.0 && rays_checked == 10_000,
        &format!(
            "homogeneous opacity max relative error {:.3}% at 256 samples (limit 1%); max weight sum {max_sum:.12} over {rays_checked} rays (limit 1)",
            100.0 * worst
        ),
    );
}

#[test]
fn gradient_checks() {
    let _g = serial();
    let mut rng = derive(7, &[]);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for _ in 0..100 {
        let res = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
        let n = res.iter().product::<usize>() * 4;
        let params: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bg = if rng.gen_bool(0.5) {
            Background::White
        } else {
            Background::Black
        };
        let mut field = RadianceField::from_params(res, Aabb::new([-1.0; 3], [1.0; 3]).unwrap(), bg, params).unwrap();
        let k = rng.gen_range(2..8);
        let origins: Vec<[f64; 3]> = (0..k)
            .map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), -2.0])
            .collect();
        let dirs: Vec<[f64; 3]> = (0..k)
            .map(|_| {
                let v = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0];
                let l = (v[0] * v[0] + v[1] * v[1] + 1.0f64).sqrt();
                v.map(|x| x / l)
            })
            .collect();
        let rays = RayBatch::new(origins, dirs, 0.5, 3.5, (0..k).collect()).unwrap();
        let targets: Vec<[f64; 3]> = (0..k).map(|_| [0, 1, 2].map(|_| rng.gen::<f64>())).collect();
        let opts = RenderOptions {
            samples_per_ray: rng.gen_range(4..32),
            near: 0.5,
            far: 3.5,
            transmittance_cutoff: 0.0,
        };
        let weights = LossWeights {
            mse: rng.gen_range(0.5..2.0),
            l1: 0.0,
            depth: if rng.gen_bool(0.7) {
                rng.gen_range(0.1..1.0)
            } else {
                0.0
            },
        };
        let pairs: Vec<(usize, usize)> = (0..rng.gen_range(1..10))
            .map(|_| (rng.gen_range(0..k), rng.gen_range(0..k)))
            .filter(|(a, b)| a != b)
            .collect();
        let margin = rng.gen_range(0.0..0.2);
        let hinge = |d: &[f64]| rank_hinge(d, &pairs, margin);
        let active = |f: &RadianceField| -> Vec<bool> {
            let d: Vec<f64> = render_rays(f, &rays, &opts, None)
                .unwrap()
                .iter()
                .map(|o| o.depth)
                .collect();
            pairs.iter().map(|&(a, b)| d[a] - d[b] + margin > 0.0).collect()
        };

        let mut opt = FieldOptimizer::new(&field, OptimizerConfig::default()).unwrap();
        let loss_at = |f: &RadianceField, opt: &mut FieldOptimizer| {
            opt.loss_and_grad(f, &rays, &targets, &weights, &opts, None, Some(&hinge))
                .unwrap()
                .loss
        };
        loss_at(&field, &mut opt);
        let grad = opt.gradient().to_vec();
        let base_active = active(&field);
        let mut scratch = FieldOptimizer::new(&field, OptimizerConfig::default()).unwrap();
        for i in 0..n {
            let orig = field.params()[i];
            field.params_mut()[i] = orig + h;
            let plus = loss_at(&field, &mut scratch);
            let act_plus = active(&field);
            field.params_mut()[i] = orig - h;
            let minus = loss_at(&field, &mut scratch);
            let act_minus = active(&field);
            field.params_mut()[i] = orig;
            // A hinge kink inside the stencil makes the difference meaningless.
            if weights.depth != 0.0 && (act_plus != base_active || act_minus != base_active) {
                skipped += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    verdict(
        "gradient checks",
        worst < 1e-3 && checked > 0,
        &format!(
            "max relative error {worst:.2e} (limit 1e-3) over {checked} parameters in 100 configurations \
             (photometric + depth ranking, f64; {skipped} coordinates straddling a hinge kink skipped)"
        ),
    );
}

fn e2e_config(mode: TrainMode, schedule: LevelSchedule, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        mode,
        noise_schedule: schedule,
        total_iterations: 4000,
        warmup_iterations: 1000,
        update_interval: 250,
        batch_views: 16,
        m_repeats: 4,
        rays_per_batch: 256,
        field_resolution: 64,
        log_every: 500,
        seed,
        ..TrainConfig::default()
    };
    cfg.render.samples_per_ray = 96;
    cfg
}

fn unknown_psnr(out: &TrainOutcome) -> f64 {
    out.report
        .final_metrics
        .mean_psnr_unknown
        .expect("scene has unknown pixels")
}

/// Render-vs-ground-truth PSNR over unknown pixels, for context only.
fn gt_unknown_psnr(out: &TrainOutcome, sc: &SyntheticScene, cfg: &TrainConfig) -> f64 {
    let mut ds = out.dataset.clone();
    for (f, gt) in ds.frames.iter_mut().zip(&sc.gt_images) {
        f.image = gt.clone();
    }
    let offset = cfg.eval_near_offset.unwrap_or_else(|| default_near_offset(&ds));
    eval_dataset_consistency(&out.field, &ds, &cfg.render, offset)
        .unwrap()
        .mean_psnr_unknown
        .unwrap()
}

#[test]
fn end_to_end_distillation_and_anneal_schedule() {
    let _g = serial();
    let s = sched();
    let backend = consensus(&s);
    let train = |sc: &SyntheticScene, cfg: &TrainConfig| {
        run_training(
            cfg,
            &sc.dataset,
            &backend,
            &IdentityCodec,
            &s,
            &DepthPrior::none(),
            None,
        )
        .unwrap()
    };

    let start = Instant::now();
    let mut ordered = 0;
    let mut rows = Vec::new();
    let mut linear_runs = Vec::new();
    for seed in 1..=5u64 {
        let sc = room(40, seed);
        let mut psnr = Vec::new();
        let mut gt = Vec::new();
        for mode in [TrainMode::JointDu, TrainMode::InpaintOnce, TrainMode::MaskedOnly] {
            let cfg = e2e_config(mode, LevelSchedule::Linear, seed);
            let out = train(&sc, &cfg);
            assert!(out.report.known_pixels_verified);
            psnr.push(unknown_psnr(&out));
            gt.push(gt_unknown_psnr(&out, &sc, &cfg));
            if mode == TrainMode::JointDu {
                linear_runs.push((sc.clone(), out));
            }
        }
        if psnr[0] > psnr[1] && psnr[1] > psnr[2] {
            ordered += 1;
        }
        rows.push(format!(
            "seed {seed}: {:.2} > {:.2} > {:.2} (vs ground truth {:.2} / {:.2} / {:.2})",
            psnr[0], psnr[1], psnr[2], gt[0], gt[1], gt[2]
        ));
    }
    let e2e_time = start.elapsed();

    let endpoints = anneal_t(0, 4000, 0.4) == 1.0 && anneal_t(4000, 4000, 0.4) == 0.4;
    let mut worse = 0;
    let mut ablation = Vec::new();
    for (seed, (sc, linear)) in (1..=5u64).zip(&linear_runs) {
        let cfg = e2e_config(TrainMode::JointDu, LevelSchedule::Random, seed);
        let random = train(sc, &cfg);
        let levels: Vec<f64> = random.report.updates.iter().map(|u| u.level).collect();
        assert!(levels.iter().all(|l| (0.02..=0.98).contains(l)));
        let (r, l) = (unknown_psnr(&random), unknown_psnr(linear));
        // Higher error means lower PSNR.
        if r < l {
            worse += 1;
        }
        ablation.push(format!(
            "seed {seed}: random {r:.2} vs linear {l:.2} (vs ground truth {:.2} / {:.2})",
            gt_unknown_psnr(&random, sc, &cfg),
            gt_unknown_psnr(linear, sc, &cfg)
        ));
    }

    let e2e_pass = ordered >= 4 && e2e_time < Duration::from_secs(1800);
    let anneal_pass = endpoints && worse >= 4;
    let e2e_line = format!(
        "unknown-region render-vs-inpaint PSNR joint-DU > inpaint-once > masked-only in {ordered}/5 seeds (need 4); {:.0} s for 15 runs (limit 1800 s); {}",
        e2e_time.as_secs_f64(),
        rows.join("; ")
    );
    let anneal_line = format!(
        "anneal_t(0) = 1.0 and anneal_t(total) = 0.4 exactly: {endpoints}; random schedule has higher render-vs-inpaint error than linear in {worse}/5 seeds (need 4); {}",
        ablation.join("; ")
    );
    // Print both lines before either assertion fires.
    let _ = std::io::stderr().write_all(
        format!(
            "ACCEPTANCE [{}] end-to-end distillation: {e2e_line}\nACCEPTANCE [{}] anneal schedule: {anneal_line}\n",
            if e2e_pass { "PASS" } else { "FAIL" },
            if anneal_pass { "PASS" } else { "FAIL" }
        )
        .as_bytes(),
    );
    assert!(e2e_pass, "end-to-end distillation: {e2e_line}");
    assert!(anneal_pass, "anneal schedule: {anneal_line}");
}

#[test]
fn reference_grids() {
    let _g = serial();
    let layouts = reference_layouts(31, 0).unwrap();
    let all_have_ref = layouts.iter().all(|l| l.members().contains(&0));
    let others: Vec<usize> = layouts.iter().flat_map(|l| l.members()).filter(|&v| v != 0).collect();
    let set: BTreeSet<usize> = others.iter().copied().collect();
    let partition = others.len() == 30 && set == (1..31).collect::<BTreeSet<_>>();
    verdict(
        "reference grids",
        layouts.len() == 10 && all_have_ref && partition,
        &format!(
            "n = 31, reference 0: {} grids (need 10), reference in every grid: {all_have_ref}, other 30 views partitioned: {partition}",
            layouts.len()
        ),
    );
}
