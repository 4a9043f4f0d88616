use image::{Rgb, RgbImage};
use platewaste::augment::{apply, expand_training_set, sample_plan, AugmentationPlan, AugmentationSpec, PlanOp};
use platewaste::dataio::Sample;
use platewaste::maskcore::{class_pixel_counts, LabelMask};
use proptest::prelude::*;

/// A plate-like mask: a disk of class 1 with a class-2 bar through it,
/// kept away from the border like real food.
fn plate(size: usize, r: f64) -> (RgbImage, LabelMask) {
    let c = (size as f64 - 1.0) / 2.0;
    let labels: Vec<u8> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 - c, (i / size) as f64 - c);
            if x * x + y * y > r * r {
                0
            } else if y.abs() < r / 4.0 {
                2
            } else {
                1
            }
        })
        .collect();
    let img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let l = labels[y as usize * size + x as usize];
        Rgb([l * 100, 50, 200 - l * 60])
    });
    (img, LabelMask::new(size, size, 3, labels).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_and_shear_keep_food_within_resampling_noise(
        deg in -15.0f64..15.0,
        sx in -15.0f64..15.0,
        sy in -15.0f64..15.0,
    ) {
        let (img, mask) = plate(48, 14.0);
        let before = class_pixel_counts(&mask).counts;
        let plan = AugmentationPlan { ops: vec![PlanOp::Rotate { degrees: deg }, PlanOp::Shear { x: sx, y: sy }] };
        let (_, out) = apply(&plan, &img, &mask).unwrap();
        prop_assert!(out.labels().iter().all(|&l| l < 3));
        let after = class_pixel_counts(&out).counts;
        // Shear scales area by 1 - sx·sy; nearest-neighbour sampling adds a
        // boundary-sized error on top.
        let area_factor = 1.0 - sx * sy / 1e4;
        for c in 1..3 {
            let expected = before[c] as f64 * area_factor;
            let tol = 0.08 * before[c] as f64 + 8.0;
            prop_assert!((after[c] as f64 - expected).abs() <= tol, "class {} {} -> {}", c, before[c], after[c]);
        }
    }

    #[test]
    fn photometric_plans_never_touch_masks(seed in any::<u64>(), index in 0u64..1000) {
        let (img, mask) = plate(24, 8.0);
        let plan = sample_plan(&AugmentationSpec::preset("Fesenjan").unwrap(), seed, index);
        let photometric = AugmentationPlan { ops: plan.ops.into_iter().filter(PlanOp::is_photometric).collect() };
        let (_, out) = apply(&photometric, &img, &mask).unwrap();
        prop_assert_eq!(out, mask);
    }
}

#[test]
fn border_fill_only_grows_background_for_centred_food() {
    let (img, mask) = plate(64, 20.0);
    for deg in [-15.0, -7.5, 7.5, 15.0] {
        let plan = AugmentationPlan { ops: vec![PlanOp::Rotate { degrees: deg }] };
        let (_, out) = apply(&plan, &img, &mask).unwrap();
        // The plate stays in frame, so any change is interpolation noise.
        let (a, b) = (class_pixel_counts(&mask).counts, class_pixel_counts(&out).counts);
        let food_a = a[1] + a[2];
        let food_b = b[1] + b[2];
        assert!((food_a as i64 - food_b as i64).abs() <= 16, "{food_a} -> {food_b}");
    }
}

#[test]
fn expansion_is_reproducible_and_sized() {
    let (img, mask) = plate(16, 5.0);
    let samples: Vec<Sample> = (0..10)
        .map(|i| Sample { id: format!("s{i}"), image: img.clone(), mask: mask.clone() })
        .collect();
    let spec = AugmentationSpec::preset("AdasPolo").unwrap();
    let a = expand_training_set(&samples, &spec, 3, 9, true).unwrap();
    let b = expand_training_set(&samples, &spec, 3, 9, true).unwrap();
    assert_eq!(a.len(), 30);
    assert_eq!(a, b);
    for (k, s) in a.iter().enumerate() {
        if k % 3 == 0 {
            assert_eq!(s, &samples[k / 3]);
        }
    }
    let all = expand_training_set(&samples, &spec, 3, 9, false).unwrap();
    assert_eq!(all.len(), 30);
    assert_eq!(expand_training_set(&samples, &spec, 1, 9, true).unwrap(), samples);
    assert!(expand_training_set(&samples, &spec, 0, 9, true).is_err());
}
