use std::collections::HashSet;

use proptest::prelude::*;

use djkd_core::complexity::count_macs;
use djkd_core::data::{apply_augment, binarize, split_indices, AugmentParams, ClassFilter, ClassLabel, SegSample, SplitPlan};
use djkd_core::losses::{cross_entropy_terms, dice_terms, iou_terms, kl_terms, EPS_SMOOTH};
use djkd_core::metrics::{image_metrics, MetricsReport};
use djkd_core::models::{student_spec, teacher_spec, unet_reference_spec};
use djkd_core::{StudentConfig, TeacherConfig, Tensor};

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

fn mask(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|n| (probs(n), mask(n)))
}

fn filter() -> impl Strategy<Value = ClassFilter> {
    prop_oneof![Just(ClassFilter::Benign), Just(ClassFilter::Malignant), Just(ClassFilter::All)]
}

proptest! {
    #[test]
    fn hard_losses_are_nonnegative((q, y) in pair()) {
        prop_assert!(cross_entropy_terms(&q, &y).unwrap().0 >= 0.0);
        prop_assert!(dice_terms(&q, &y, EPS_SMOOTH).unwrap().0 >= -1e-12);
        prop_assert!(iou_terms(&q, &y).unwrap().0 >= -1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_maps(
        (p, q) in (1usize..64).prop_flat_map(|n| (probs(n), probs(n))),
        t in 0.25..8.0f64,
    ) {
        prop_assert!(kl_terms(&p, &q, t).unwrap().0 >= -1e-12);
        let (v, g) = kl_terms(&p, &p, t).unwrap();
        prop_assert!(v.abs() < 1e-12);
        prop_assert!(g.iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn perfect_prediction_minimizes_overlap_losses(y in (2usize..64).prop_flat_map(mask)) {
        // With one class absent its Dice term cannot reach its maximum.
        prop_assume!(y.contains(&0.0) && y.contains(&1.0));
        prop_assert!(dice_terms(&y, &y, EPS_SMOOTH).unwrap().0.abs() < 1e-6);
        prop_assert!(iou_terms(&y, &y).unwrap().0.abs() < 1e-6);
    }

    #[test]
    fn metrics_are_unit_interval(
        (p, y) in (1usize..128).prop_flat_map(|n| (prop::collection::vec(0.0..=1.0f32, n), prop::collection::vec(prop::bool::ANY, n))),
    ) {
        let m: Vec<f32> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let r = image_metrics(&p, &m).unwrap();
        for v in r.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn mean_lies_between_extremes(dices in prop::collection::vec(0.0..=1.0f64, 1..20)) {
        let reports: Vec<MetricsReport> = dices.iter().map(|&d| MetricsReport { dice: d, ..MetricsReport::default() }).collect();
        let m = MetricsReport::mean(&reports).unwrap();
        let lo = dices.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = dices.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m.dice >= lo - 1e-12 && m.dice <= hi + 1e-12);
        prop_assert_eq!(m.n_images, dices.len());
    }

    #[test]
    fn splits_are_disjoint_and_class_filtered(
        labels in prop::collection::vec(prop_oneof![Just(ClassLabel::Benign), Just(ClassLabel::Malignant)], 4..80),
        train_classes in filter(),
        test_classes in filter(),
        fraction in 0.05..0.95f64,
        seed in any::<u64>(),
    ) {
        let present: HashSet<ClassLabel> = labels.iter().copied().collect();
        let plan = SplitPlan { train_classes, test_classes, train_fraction: fraction, seed };
        let wanted: HashSet<ClassLabel> = train_classes.classes().iter().chain(test_classes.classes()).copied().collect();
        match split_indices(&labels, &plan) {
            Ok((tr, te)) => {
                let trs: HashSet<usize> = tr.iter().copied().collect();
                prop_assert!(te.iter().all(|i| !trs.contains(i)));
                prop_assert!(tr.iter().all(|&i| train_classes.accepts(labels[i])));
                prop_assert!(te.iter().all(|&i| test_classes.accepts(labels[i])));
                prop_assert_eq!(split_indices(&labels, &plan).unwrap(), (tr.clone(), te.clone()));
                if train_classes == ClassFilter::All && test_classes == ClassFilter::All {
                    prop_assert_eq!(tr.len() + te.len(), labels.len());
                }
            }
            Err(_) => prop_assert!(!wanted.is_subset(&present)),
        }
    }

    #[test]
    fn augmentation_keeps_image_and_mask_aligned(
        bits in prop::collection::vec(prop::bool::ANY, 16 * 16),
        hflip in any::<bool>(),
        vflip in any::<bool>(),
        rotation_deg in -10.0..10.0f64,
    ) {
        // An image equal to its mask must stay equal to it after binarizing.
        let plane: Vec<f32> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let rgb: Vec<f32> = plane.iter().chain(&plane).chain(&plane).copied().collect();
        let sample = SegSample {
            image: Tensor::from_vec(&[3, 16, 16], rgb).unwrap(),
            mask: Tensor::from_vec(&[1, 16, 16], plane).unwrap(),
            class_label: ClassLabel::Benign,
        };
        let params = AugmentParams { hflip, vflip, rotation_deg, brightness_scale: 1.0 };
        let out = apply_augment(&sample, &params);
        for c in 0..3 {
            let chan: Vec<f32> = out.image.data()[c * 256..(c + 1) * 256].iter().map(|&v| binarize(v)).collect();
            prop_assert_eq!(&chan[..], out.mask.data());
        }
    }
}

#[test]
fn macs_scale_with_pixel_count() {
    let specs = [
        unet_reference_spec(),
        student_spec(&StudentConfig::default()).unwrap(),
        teacher_spec(&TeacherConfig::compact()).unwrap(),
    ];
    for spec in &specs {
        for base in [64usize, 128, 256] {
            let small = count_macs(spec, base, base).unwrap();
            let large = count_macs(spec, 2 * base, 2 * base).unwrap();
            assert_eq!(large, 4 * small, "{} at {base}", spec.name);
        }
    }
}
