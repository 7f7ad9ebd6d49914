use gridfill_core::data::{make_synthetic_scene, Image, SceneSpec};
use gridfill_core::field::{softplus_inv, RenderOptions};
use gridfill_core::metrics::{
    cross_view_consistency, default_near_offset, eval_dataset_consistency, psnr, ssim, ssim_map,
};
use gridfill_core::rng::derive;
use rand::Rng;

/// SSIM by separable filtering of whole moment images.
fn reference_ssim(a: &Image, b: &Image) -> f64 {
    let (h, w, _) = a.dim();
    let luma = |img: &Image| -> Vec<Vec<f64>> {
        (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| {
                        [0.299, 0.587, 0.114]
                            .iter()
                            .enumerate()
                            .map(|(c, k)| k * img[[y, x, c]] as f64)
                            .sum()
                    })
                    .collect()
            })
            .collect()
    };
    let kernel: Vec<f64> = {
        let raw: Vec<f64> = (-5i32..=5).map(|i| (-(i * i) as f64 / 4.5).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let filter = |img: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let rows: Vec<Vec<f64>> = img
            .iter()
            .map(|r| {
                (0..w - 10)
                    .map(|x| (0..11).map(|k| kernel[k] * r[x + k]).sum())
                    .collect()
            })
            .collect();
        (0..h - 10)
            .map(|y| {
                (0..w - 10)
                    .map(|x| (0..11).map(|k| kernel[k] * rows[y + k][x]).sum())
                    .collect()
            })
            .collect()
    };
    let (la, lb) = (luma(a), luma(b));
    let prod = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        p.iter()
            .zip(q)
            .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u * v).collect())
            .collect()
    };
    let (ma, mb) = (filter(&la), filter(&lb));
    let (saa, sbb, sab) = (
        filter(&prod(&la, &la)),
        filter(&prod(&lb, &lb)),
        filter(&prod(&la, &lb)),
    );
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut n = 0.0;
    for y in 0..h - 10 {
        for x in 0..w - 10 {
            let (mu1, mu2) = (ma[y][x], mb[y][x]);
            let v1 = saa[y][x] - mu1 * mu1;
            let v2 = sbb[y][x] - mu2 * mu2;
            let cov = sab[y][x] - mu1 * mu2;
            total += (2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2) / ((mu1 * mu1 + mu2 * mu2 + c1) * (v1 + v2 + c2));
            n += 1.0;
        }
    }
    total / n
}

#[test]
fn ssim_matches_reference_implementation() {
    let mut rng = derive(21, &[]);
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(11..24), rng.gen_range(11..24));
        let a = Image::from_shape_fn((h, w, 3), |_| rng.gen::<f32>());
        let b = a.mapv(|v| (v + rng.gen_range(-0.2f32..0.2)).clamp(0.0, 1.0));
        let got = ssim(&a, &b).unwrap();
        let want = reference_ssim(&a, &b);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert_eq!(ssim_map(&a, &b).unwrap().dim(), (h - 10, w - 10));
    }
}

#[test]
fn ssim_of_a_gradient_and_its_negative_is_negative() {
    let a = Image::from_shape_fn((16, 16, 3), |(y, x, _)| (0.1 + 0.8 * (x + y) as f64 / 30.0) as f32);
    let neg = a.mapv(|v| 1.0 - v);
    let s = ssim(&a, &neg).unwrap();
    assert!(s < 0.0, "{s}");
    assert!((s - reference_ssim(&a, &neg)).abs() < 1e-9);
}

#[test]
fn psnr_of_known_mse() {
    let a = Image::zeros((5, 7, 3));
    let b = Image::from_elem((5, 7, 3), 0.1);
    assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-5);
}

fn scene(views: usize) -> gridfill_core::data::SyntheticScene {
    let spec = SceneSpec {
        num_views: views,
        width: 24,
        height: 24,
        field_resolution: 32,
        samples_per_ray: 64,
        ..SceneSpec::default()
    };
    make_synthetic_scene(&spec, &mut derive(8, &[])).unwrap()
}

#[test]
fn independent_random_colors_score_like_the_color_distribution() {
    let s = scene(10);
    let mut rng = derive(1, &[]);
    let images: Vec<Image> = s
        .dataset
        .frames
        .iter()
        .map(|f| Image::from_shape_fn(f.image.dim(), |_| rng.gen::<f32>()))
        .collect();
    let known: Vec<_> = s.dataset.frames.iter().map(|f| f.known.clone()).collect();
    let stats = cross_view_consistency(&images, &known, &s.dataset, &s.gt_depth, 1).unwrap();
    assert!(stats.correspondences > 500);

    // Direct Monte-Carlo estimate of E|u - v| averaged over channels.
    let mut mc_rng = derive(2, &[]);
    let trials = 200_000;
    let mc: f64 = (0..trials)
        .map(|_| {
            (0..3)
                .map(|_| (mc_rng.gen::<f32>() as f64 - mc_rng.gen::<f32>() as f64).abs())
                .sum::<f64>()
                / 3.0
        })
        .sum::<f64>()
        / trials as f64;
    assert!(
        (stats.mean_abs_diff - mc).abs() < 0.02,
        "{} vs {mc}",
        stats.mean_abs_diff
    );

    // Identical content everywhere scores zero.
    let flat: Vec<Image> = images.iter().map(|i| Image::from_elem(i.dim(), 0.3)).collect();
    let zero = cross_view_consistency(&flat, &known, &s.dataset, &s.gt_depth, 1).unwrap();
    assert_eq!(zero.mean_abs_diff, 0.0);
    assert!(cross_view_consistency(&flat, &known, &s.dataset, &[], 1).is_err());
}

#[test]
fn near_offset_matters_only_with_a_floater() {
    let s = scene(4);
    let mut ds = s.dataset.clone();
    for (f, gt) in ds.frames.iter_mut().zip(&s.gt_images) {
        f.image = gt.clone();
    }
    let opts = RenderOptions {
        samples_per_ray: 512,
        ..RenderOptions::default()
    };
    // Past every sample whose stencil can reach the floater below.
    let offset = default_near_offset(&ds).max(4.0 * s.gt_field.cell_size()[0]);
    let clean0 = eval_dataset_consistency(&s.gt_field, &ds, &opts, 0.0).unwrap();
    let clean1 = eval_dataset_consistency(&s.gt_field, &ds, &opts, offset).unwrap();
    // Only the quadrature changes when the shell is empty.
    assert!((clean0.mean_psnr - clean1.mean_psnr).abs() < 0.1);

    // Fill the voxels around the first camera.
    let mut floater = s.gt_field.clone();
    let eye = ds.frames[0].camera.origin();
    let cell = floater.cell_size();
    let res = floater.resolution();
    for z in 0..res[2] {
        for y in 0..res[1] {
            for x in 0..res[0] {
                let c = floater.voxel_center(x, y, z);
                if (0..3).all(|a| (c[a] - eye[a]).abs() < cell[a]) {
                    let v = floater.voxel_index(x, y, z);
                    floater.set_voxel(v, softplus_inv(500.0), [5.0, -5.0, 5.0]);
                }
            }
        }
    }
    let dirty0 = eval_dataset_consistency(&floater, &ds, &opts, 0.0).unwrap();
    let dirty1 = eval_dataset_consistency(&floater, &ds, &opts, offset).unwrap();
    assert!(dirty0.views[0].psnr < clean0.views[0].psnr - 10.0);
    // Other cameras may see the floater; the first one no longer does.
    assert_eq!(dirty1.views[0], clean1.views[0]);
}
