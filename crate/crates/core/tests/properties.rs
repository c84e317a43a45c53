use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tch::{Kind, Tensor};

use shapefree::diffusion::{downsample_mask, forward_diffuse, predict_x0, NoiseSchedule, ScheduleConfig};
use shapefree::eval::{background_consistency, frechet_distance, parse_rating, unified_from_axes, SsimDistance};
use shapefree::mask::{BinaryMask, SoftMask};
use shapefree::sampler::{blend, combine_guidance, EditSession, GuidanceConfig};

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), w * h)
        .prop_map(move |bits| BinaryMask::from_fn(w, h, |x, y| bits[y * w + x]))
}

fn image_strategy(w: u32, h: u32) -> impl Strategy<Value = RgbImage> {
    prop::collection::vec(any::<u8>(), (w * h * 3) as usize)
        .prop_map(move |px| RgbImage::from_raw(w, h, px).unwrap())
}

fn tensor_from(values: &[f64], shape: &[i64]) -> Tensor {
    Tensor::from_slice(values).view(shape).to_kind(Kind::Double)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn iou_is_symmetric_reflexive_and_zero_when_disjoint(a in mask_strategy(7, 5), b in mask_strategy(7, 5)) {
        let ab = a.iou(&b).unwrap();
        prop_assert_eq!(ab, b.iou(&a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if !a.is_empty() {
            prop_assert_eq!(a.iou(&a).unwrap(), 1.0);
            prop_assert_eq!(a.iou(&a.invert()).unwrap(), 0.0);
        }
    }

    #[test]
    fn border_flood_is_the_complement_of_mask_and_holes(m in mask_strategy(9, 8)) {
        let outside = m.outside_region();
        let holes: usize = m.hole_areas().iter().sum();
        prop_assert_eq!(outside.area() + m.area() + holes, 9 * 8);
        prop_assert_eq!(outside.intersection_area(&m).unwrap(), 0);
        // Every border pixel is mask or outside.
        for x in 0..9 {
            for y in [0, 7] {
                prop_assert!(m.get(x, y) || outside.get(x, y));
            }
        }
    }

    #[test]
    fn inversion_recovers_the_clean_latent(
        clean in prop::collection::vec(-1.0f64..1.0, 12),
        noise in prop::collection::vec(-4.0f64..4.0, 12),
        t in 1usize..=1000,
    ) {
        let sched = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let c = tensor_from(&clean, &[1, 3, 2, 2]);
        let n = tensor_from(&noise, &[1, 3, 2, 2]);
        let back = predict_x0(&forward_diffuse(&c, &[t], &n, &sched).unwrap(), &n, &[t], &sched).unwrap();
        let err = (back - &c).norm().double_value(&[]);
        prop_assert!(err <= 1e-5 * c.norm().double_value(&[]).max(1e-12));
    }

    #[test]
    fn downsampling_is_linear(a in mask_strategy(8, 8), b in mask_strategy(8, 8), wa in 0.0f32..=1.0, frac in 0.0f32..=1.0) {
        let wb = (1.0 - wa) * frac;
        let mix: Vec<f32> = a.to_soft().as_slice().iter().zip(b.to_soft().as_slice()).map(|(x, y)| wa * x + wb * y).collect();
        let mixed = shapefree::diffusion::omp::downsample_soft(&SoftMask::from_vec(8, 8, mix).unwrap(), (4, 4)).unwrap();
        let da = downsample_mask(&a, (4, 4)).unwrap();
        let db = downsample_mask(&b, (4, 4)).unwrap();
        for ((m, x), y) in mixed.as_slice().iter().zip(da.as_slice()).zip(db.as_slice()) {
            prop_assert!((m - (wa * x + wb * y)).abs() < 1e-5);
        }
    }

    #[test]
    fn unit_guidance_scales_return_the_full_prediction(
        u in prop::collection::vec(-10.0f64..10.0, 6),
        i in prop::collection::vec(-10.0f64..10.0, 6),
        f in prop::collection::vec(-10.0f64..10.0, 6),
    ) {
        let out = combine_guidance(&Tensor::from_slice(&u), &Tensor::from_slice(&i), &Tensor::from_slice(&f), 1.0, 1.0);
        let got = Vec::<f64>::try_from(&out).unwrap();
        for (g, want) in got.iter().zip(&f) {
            // Two cancelling additions of values ≤ 10 in magnitude.
            prop_assert!((g - want).abs() <= 64.0 * f64::EPSILON);
        }
    }

    #[test]
    fn blend_preserves_unmasked_pixels_and_is_idempotent(
        prev in image_strategy(6, 5),
        generated in image_strategy(6, 5),
        m in mask_strategy(6, 5),
    ) {
        let once = blend(&prev, &generated, &m).unwrap();
        for (x, y, p) in prev.enumerate_pixels() {
            let want = if m.get(x as usize, y as usize) { generated.get_pixel(x, y) } else { p };
            prop_assert_eq!(once.get_pixel(x, y), want);
        }
        prop_assert_eq!(blend(&once, &generated, &m).unwrap(), once);
    }

    #[test]
    fn iterative_sessions_keep_the_background(
        base in image_strategy(6, 6),
        rounds in prop::collection::vec((image_strategy(6, 6), mask_strategy(6, 6)), 1..5),
    ) {
        let mut s = EditSession::new(base.clone());
        for (k, (img, m)) in rounds.into_iter().enumerate() {
            s.commit("apple", GuidanceConfig { seed: k as u64, ..Default::default() }, img, m).unwrap();
            let u = s.union_mask();
            for (x, y, p) in base.enumerate_pixels() {
                if !u.get(x as usize, y as usize) {
                    prop_assert_eq!(s.current.get_pixel(x, y), p);
                }
            }
        }
    }

    #[test]
    fn background_consistency_vanishes_when_the_mask_covers_every_change(
        x in image_strategy(16, 16),
        out in image_strategy(16, 16),
        extra in mask_strategy(16, 16),
    ) {
        let changed = BinaryMask::from_fn(16, 16, |i, j| x.get_pixel(i as u32, j as u32) != out.get_pixel(i as u32, j as u32));
        let m = changed.union(&extra).unwrap();
        prop_assert_eq!(background_consistency(&x, &out, &m, &SsimDistance).unwrap(), 0.0);
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_equal_inputs(
        mu1 in prop::collection::vec(-3.0f64..3.0, 3),
        mu2 in prop::collection::vec(-3.0f64..3.0, 3),
        a1 in prop::collection::vec(-1.0f64..1.0, 9),
        a2 in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        // A·Aᵀ + εI is symmetric positive definite.
        let spd = |a: &[f64]| {
            let m = DMatrix::from_row_slice(3, 3, a);
            &m * m.transpose() + DMatrix::identity(3, 3) * 0.05
        };
        let (m1, m2) = (DVector::from_vec(mu1), DVector::from_vec(mu2));
        let (c1, c2) = (spd(&a1), spd(&a2));
        let d12 = frechet_distance(&m1, &c1, &m2, &c2).unwrap();
        let d21 = frechet_distance(&m2, &c2, &m1, &c1).unwrap();
        prop_assert!(d12 >= 0.0);
        prop_assert!((d12 - d21).abs() <= 1e-8 * d12.max(1.0));
        prop_assert!(frechet_distance(&m1, &c1, &m1, &c1).unwrap() < 1e-9);
    }

    #[test]
    fn unified_score_ignores_positive_affine_rescaling_of_an_axis(
        raw in prop::collection::vec(prop::array::uniform4(-50.0f64..50.0), 2..5),
        success in prop::collection::vec(0.0f64..=1.0, 5),
        axis in 0usize..4,
        scale in 0.1f64..10.0,
        shift in -100.0f64..100.0,
    ) {
        let success = &success[..raw.len()];
        let base = unified_from_axes(&raw, success).unwrap();
        let moved: Vec<[f64; 4]> = raw.iter().map(|a| { let mut b = *a; b[axis] = b[axis] * scale + shift; b }).collect();
        let after = unified_from_axes(&moved, success).unwrap();
        for (x, y) in base.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn ratings_round_trip_through_the_parser(n in 1u8..=5, why in "[a-z][a-z ]{0,30}") {
        let (r, text) = parse_rating(&format!("Rating: {n} - {why}")).unwrap();
        prop_assert_eq!(r, n);
        prop_assert_eq!(text, why.trim());
    }
}

#[test]
fn zero_mask_blend_is_the_previous_image_and_full_mask_the_generated_one() {
    let prev = RgbImage::from_fn(5, 5, |x, y| Rgb([x as u8, y as u8, 3]));
    let gen = RgbImage::from_pixel(5, 5, Rgb([200, 100, 50]));
    assert_eq!(blend(&prev, &gen, &BinaryMask::new(5, 5)).unwrap(), prev);
    assert_eq!(blend(&prev, &gen, &BinaryMask::filled(5, 5)).unwrap(), gen);
}

#[test]
fn alpha_bar_decreases_strictly_inside_the_unit_interval() {
    let sched = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let a = sched.alpha_bars();
    assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(a.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn forward_noise_has_the_scheduled_variance() {
    // Var(z̃_t) for z̃ = 0 is 1 − ᾱ_t; 200k draws give a standard error
    // of about 0.3% of the variance.
    let sched = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let mut r = shapefree::diffusion::rng::stream("test-variance", &[0]);
    for t in [1usize, 50, 400, 1000] {
        let noise = shapefree::diffusion::rng::randn(&mut r, &[1, 1, 400, 500]).to_kind(Kind::Double);
        let z = forward_diffuse(&noise.zeros_like(), &[t], &noise, &sched).unwrap();
        let var = z.var(true).double_value(&[]);
        let want = 1.0 - sched.alpha_bar(t).unwrap();
        assert!((var / want - 1.0).abs() < 0.015, "t={t}: {var} vs {want}");
    }
}
