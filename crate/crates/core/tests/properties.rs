use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recess_core::dataset::{class_weight, grouped_kfold, train_val_split, Annotation, ClassLabel, DatasetManifest, Side};
use recess_core::evolve::{mutate, Bounds, Gene, HyperParams, MutationParams};
use recess_core::imaging::{iou, scale_box, BBox, BinaryMask};
use recess_core::losses::ciou_loss;
use recess_core::metrics::{classification_metrics, ConfusionMatrix};
use recess_core::model::{decode_box_params, target_assignment, Mode, ModelConfig};
use recess_core::preprocess::{dilate, opening, remove_small_components, MorphKernel};
use recess_core::training::{early_stopper, sgd_momentum_step};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..80.0f64, 1.0..80.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn mask() -> impl Strategy<Value = BinaryMask> {
    (4usize..24, 4usize..24, any::<u64>(), 0.1..0.7f64).prop_map(|(w, h, seed, p)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BinaryMask::from_fn(w, h, |_, _| rand::Rng::gen_bool(&mut rng, p)).unwrap()
    })
}

fn kernel() -> impl Strategy<Value = MorphKernel> {
    (0usize..3).prop_map(|k| MorphKernel::rect(2 * k + 1))
}

fn manifest_from(sizes: &[usize], labels: &[bool]) -> DatasetManifest {
    let mut entries = Vec::new();
    for (p, &n) in sizes.iter().enumerate() {
        for v in 0..n {
            let i = entries.len();
            entries.push(Annotation {
                image_id: format!("img{i:04}"),
                image_path: format!("images/img{i:04}.png"),
                patient_id: format!("p{p:03}"),
                side: Side::Unknown,
                visit: v as u32 + 1,
                label: if labels[i % labels.len()] { ClassLabel::Distended } else { ClassLabel::NonDistended },
                sqr_box: BBox::new(10.0, 10.0, 100.0, 40.0).unwrap(),
                width: 256,
                height: 256,
            });
        }
    }
    DatasetManifest::new(entries).unwrap()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ciou_dominates_one_minus_iou(a in bbox(), b in bbox()) {
        let l = ciou_loss(&a, &b);
        prop_assert!(l >= 1.0 - iou(&a, &b) - 1e-12);
        prop_assert!(l < 3.0);
        prop_assert_eq!(ciou_loss(&a, &a), 0.0);
    }

    #[test]
    fn scale_box_round_trips(b in bbox(), w in 64usize..1024, h in 64usize..1024) {
        let back = scale_box(&scale_box(&b, 256, 256, w, h), w, h, 256, 256);
        prop_assert!((back.x_min - b.x_min).abs() < 1e-9 && (back.y_max - b.y_max).abs() < 1e-9);
        prop_assert!((iou(&back, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn morphology_orders_masks(m in mask(), k in kernel(), min_size in 1usize..10) {
        let opened = opening(&m, &k);
        prop_assert!(opened.is_subset_of(&m));
        prop_assert_eq!(opening(&opened, &k), opened);
        prop_assert!(m.is_subset_of(&dilate(&m, &k)));
        prop_assert!(remove_small_components(&m, min_size).is_subset_of(&m));
    }

    #[test]
    fn grouped_folds_partition_by_patient(
        sizes in prop::collection::vec(1usize..5, 6..40),
        labels in prop::collection::vec(any::<bool>(), 1..7),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        prop_assume!(sizes.len() >= k);
        let manifest = manifest_from(&sizes, &labels);
        let folds = grouped_kfold(&manifest, k, seed).unwrap();
        let mut seen = BTreeSet::new();
        for f in &folds {
            for id in &f.test_ids {
                prop_assert!(seen.insert(id.clone()), "image in two test folds");
            }
            let split = train_val_split(f, &manifest, 0.8, seed);
            let patients = |ids: &BTreeSet<String>| -> BTreeSet<String> {
                ids.iter().map(|id| manifest.get(id).unwrap().patient_id.clone()).collect()
            };
            let (tr, va, te) = (patients(&split.train_ids), patients(&split.val_ids), patients(&split.test_ids));
            prop_assert!(tr.is_disjoint(&te) && tr.is_disjoint(&va) && va.is_disjoint(&te));
            prop_assert_eq!(split.train_ids.len() + split.val_ids.len() + split.test_ids.len(), manifest.len());
        }
        prop_assert_eq!(seen.len(), manifest.len());
    }

    #[test]
    fn class_weight_is_negative_to_positive_ratio(pos in 1usize..200, neg in 0usize..400) {
        let mut labels = vec![true; pos];
        labels.extend(vec![false; neg]);
        let manifest = manifest_from(&vec![1; pos + neg], &labels);
        let ids = manifest.entries().iter().map(|a| a.image_id.clone()).collect();
        prop_assert!((class_weight(&ids, &manifest).unwrap() - neg as f64 / pos as f64).abs() < 1e-12);
    }

    #[test]
    fn balanced_accuracy_is_mean_of_rates(tp in 0usize..200, fn_ in 0usize..200, tn in 0usize..200, fp in 0usize..200) {
        prop_assume!(tp + fn_ > 0 && tn + fp > 0);
        let (sens, spec, ba) = classification_metrics(&ConfusionMatrix { tp, fn_, tn, fp }).unwrap();
        prop_assert!((ba - (spec + sens) / 2.0).abs() < 1e-12);
        prop_assert!((sens - tp as f64 / (tp + fn_) as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ba));
    }

    #[test]
    fn target_encoding_decodes_to_ground_truth(b in bbox()) {
        let config = ModelConfig::tiny(Mode::DetectionTwoClass);
        let t = target_assignment(&b, Some(ClassLabel::Distended), &config);
        let prior = config.anchor_priors[t.anchor];
        let (cx, cy, w, h) = decode_box_params(&[t.tx, t.ty, t.tw, t.th], t.row, t.col, prior, config.stride());
        let (gx, gy) = b.center();
        prop_assert!((cx - gx).abs() < 1e-6 && (cy - gy).abs() < 1e-6);
        prop_assert!((w - b.width()).abs() < 1e-9 && (h - b.height()).abs() < 1e-9);
    }

    #[test]
    fn momentum_free_sgd_is_gradient_descent(
        w in prop::collection::vec(-5.0..5.0f64, 1..20),
        lr in 0.0..1.0f64,
    ) {
        let g: Vec<f64> = w.iter().map(|x| x * 0.5 - 1.0).collect();
        let mut weights = w.clone();
        let mut velocity = vec![0.0; w.len()];
        sgd_momentum_step(&mut weights, &g, &mut velocity, lr, 0.0).unwrap();
        for i in 0..w.len() {
            prop_assert!((weights[i] - (w[i] - lr * g[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stopping_returns_argmax(seq in prop::collection::vec(0.0..1.0f64, 1..60), patience in 1usize..10) {
        let (stop, best) = early_stopper(&seq, patience);
        // first index of the running maximum up to the stopping point
        let mut b = 0;
        let mut fired = false;
        for (i, &f) in seq.iter().enumerate() {
            if f > seq[b] {
                b = i;
            }
            if i - b >= patience {
                fired = true;
                break;
            }
        }
        prop_assert_eq!(best, b);
        prop_assert_eq!(stop, fired);
    }

    #[test]
    fn mutation_stays_in_bounds(lr in 1e-5..0.1f64, mom in 0.6..0.98f64, seed in any::<u64>()) {
        let parent = HyperParams { learning_rate: Some(lr), sgd_momentum: Some(mom), ..Default::default() };
        let bounds = Bounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let child = mutate(&parent, &bounds, &MutationParams::default(), &mut rng);
            prop_assert!(child.validate(&bounds).is_ok());
            prop_assert!(child.get(Gene::LearningRate).unwrap() > 0.0);
            prop_assert_eq!(child.genes().len(), 2);
        }
    }
}
