use std::collections::BTreeMap;

use openslot::ans::{build_noise_pseudolabel, ClassifierHeads, HeadOutput, LabelMode, PaddedLabelSet};
use openslot::bench::{generate_benchmark, BenchmarkConfig, SplitName, SplitSizes};
use openslot::datagen::{default_universe, generate_scene, SceneSpec};
use openslot::eval::build_osr_splits;
use openslot::graph::Graph;
use openslot::matching::{hungarian, Assignment, CostMatrix};
use openslot::nn::ParamStore;
use openslot::optim::OptimizerState;
use openslot::osod::{detect, OsodConfig};
use openslot::scoring::{aggregate, fit_mahalanobis, score_mahalanobis, Scheme};
use openslot::slot::{SlotModel, SlotModelConfig};
use openslot::Tensor;
use proptest::prelude::*;

fn matrix(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-30.0f64..30.0, r * c).prop_map(move |d| Tensor::from_matrix(r, c, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_ops_stay_finite_and_grads_match_shapes(x in matrix(3, 5), y in matrix(3, 5)) {
        let mut g = Graph::new();
        let a = g.param(x);
        let b = g.param(y);
        let mut outs = vec![g.softmax(a, 1).unwrap(), g.log_softmax(a, 0).unwrap(), g.logsumexp(a, 1).unwrap()];
        outs.push(g.layer_norm(a, 1e-5).unwrap());
        outs.push(g.sigmoid(b));
        outs.push(g.tanh(b));
        let sq = g.square(b);
        let pos = g.add_scalar(sq, 1.0);
        outs.push(g.ln(pos));
        outs.push(g.div(a, pos).unwrap());
        outs.push(g.matmul_nt(a, b).unwrap());
        let mut total = g.sum(outs[0]);
        for &o in &outs {
            prop_assert!(g.value(o).is_finite());
            let s = g.sum(o);
            total = g.add(total, s).unwrap();
        }
        let grads = g.backward(total).unwrap();
        for v in [a, b] {
            let gv = grads.get(v).unwrap();
            prop_assert_eq!(gv.shape(), g.value(v).shape());
            prop_assert!(gv.is_finite());
        }
    }

    #[test]
    fn adam_counts_steps_and_keeps_shapes(steps in 1usize..6, d in prop::collection::vec(-1.0f64..1.0, 6)) {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_matrix(2, 3, d.clone()).unwrap());
        let mut opt = OptimizerState::adam(1e-2).unwrap();
        let grads: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::from_matrix(2, 3, d).unwrap())].into();
        for k in 1..=steps {
            opt.step(&mut params, &grads).unwrap();
            prop_assert_eq!(opt.step_count(), k as u64);
        }
        prop_assert_eq!(params.get("w").unwrap().shape(), &[2, 3]);
        let wrong: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::zeros(&[3, 3]))].into();
        prop_assert!(opt.step(&mut params, &wrong).is_err());
    }

    #[test]
    fn hungarian_returns_a_permutation_no_worse_than_identity(
        n in 1usize..=8,
        vals in prop::collection::vec(-5.0f64..5.0, 64),
    ) {
        let cost = CostMatrix::new(n, vals[..n * n].to_vec()).unwrap();
        let a = hungarian(&cost);
        let mut seen = a.perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let id: f64 = (0..n).map(|i| cost.get(i, i)).sum();
        prop_assert!(a.total(&cost) <= id + 1e-9);
    }

    #[test]
    fn padded_labels_are_one_hot_then_null(
        labels in prop::collection::btree_set(0usize..6, 1..=4),
        extra in 0usize..3,
    ) {
        let labels: Vec<usize> = labels.into_iter().collect();
        let n = labels.len() + extra;
        let p = PaddedLabelSet::new(&labels, n, 6).unwrap();
        prop_assert_eq!(p.num_labels(), labels.len());
        for r in 0..n {
            let row = p.rows.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            prop_assert_eq!(ones + zeros, 6);
            prop_assert_eq!(ones, usize::from(!p.null_rows[r]));
        }
        prop_assert!(PaddedLabelSet::new(&labels, labels.len() - 1, 6).is_err());
    }

    #[test]
    fn noise_pseudolabel_contains_invalid_slots(
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        nulls in prop::collection::vec(any::<bool>(), 6),
        inv in prop::collection::vec(any::<bool>(), 6),
    ) {
        let a = Assignment { perm };
        let m = build_noise_pseudolabel(&a, &nulls, &inv);
        prop_assert_eq!(m.len(), 6);
        for i in 0..6 {
            prop_assert!(!inv[i] || m[i]);
            prop_assert_eq!(m[i], inv[i] || nulls[a.perm[i]]);
        }
    }

    #[test]
    fn heads_do_not_depend_on_slot_position(
        seed in 0u64..1000,
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 8), 5),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let heads = ClassifierHeads::new(8, 4, 16, seed).unwrap();
        let out = heads.forward(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let out2 = heads.forward(&Tensor::from_rows(&shuffled).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(out2.fg_logits.row(k), out.fg_logits.row(i));
            prop_assert_eq!(out2.nz_logits[k], out.nz_logits[i]);
        }
    }

    #[test]
    fn aggregation_sums_the_selected_slots(
        per_slot in prop::collection::vec(-10.0f64..10.0, 2..8),
        gamma in 0.05f64..0.95,
        nz_seed in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let n = per_slot.len();
        let nz = &nz_seed[..n];
        let all = aggregate(&per_slot, Scheme::All, None).unwrap();
        prop_assert!((all.decision - per_slot.iter().sum::<f64>()).abs() < 1e-9);
        let sel = aggregate(&per_slot, Scheme::Selective { gamma }, Some(nz)).unwrap();
        let mask = sel.fg_mask.clone().unwrap();
        prop_assert_eq!(mask.len(), n);
        if mask.iter().any(|&m| m) {
            let want: f64 = per_slot.iter().zip(&mask).filter(|(_, &m)| m).map(|(s, _)| s).sum();
            prop_assert!((sel.decision - want).abs() < 1e-9);
        } else {
            prop_assert_eq!(sel.decision, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn mahalanobis_scores_are_finite_and_peak_at_means(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..20),
    ) {
        let labels: Vec<usize> = (0..pts.len()).map(|i| i % 2).collect();
        let m = fit_mahalanobis(&pts, &labels, 1e-3).unwrap();
        for p in &pts {
            prop_assert!(score_mahalanobis(&m, p).unwrap().is_finite());
        }
        for (_, mean) in &m.means {
            prop_assert!(score_mahalanobis(&m, mean).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn detections_are_proper_boxes_inside_the_image(
        maps in prop::collection::vec(0.0f64..1.0, 6 * 64),
        fg in prop::collection::vec(-10.0f64..10.0, 6 * 3),
        nz in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let masks = Tensor::from_matrix(6, 64, maps).unwrap();
        let heads = HeadOutput { fg_logits: Tensor::from_matrix(6, 3, fg).unwrap(), nz_logits: nz };
        let cfg = OsodConfig { min_pixels: 1, ..OsodConfig::default() };
        for d in detect(&masks, (8, 8), &heads, &[0, 1, 2], (64, 64), &cfg) {
            let b = d.bbox;
            prop_assert!(b.x0 < b.x1 && b.y0 < b.y1);
            prop_assert!(b.x1 <= 64 && b.y1 <= 64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn slot_attention_columns_sum_to_one(model_seed in 0u64..100, scene_seed in 0u64..1000, infer_seed: u64) {
        let model = SlotModel::new(SlotModelConfig::default(), model_seed).unwrap();
        let scene = generate_scene(&SceneSpec::new(vec![0, 7, 3]), &default_universe(), scene_seed).unwrap();
        let set = model.infer(&scene.image_f64(), infer_seed).unwrap();
        prop_assert_eq!(set.num_slots(), 6);
        for p in 0..set.attn.cols() {
            let s: f64 = (0..6).map(|i| set.attn.at(i, p)).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!((0..6).all(|i| set.attn.at(i, p) >= 0.0));
        }
    }

    #[test]
    fn placed_objects_have_visible_masks_and_tight_boxes(
        objects in prop::collection::vec(0usize..12, 1..=4),
        seed: u64,
    ) {
        let spec = SceneSpec::new(objects.clone());
        if let Ok(scene) = generate_scene(&spec, &default_universe(), seed) {
            prop_assert_eq!(scene.objects.len(), objects.len());
            for o in &scene.objects {
                prop_assert!(o.mask.count() >= spec.min_visible);
                prop_assert_eq!(o.mask.bbox(), Some(o.bbox));
                prop_assert!(o.bbox.x1 as usize <= scene.width && o.bbox.y1 as usize <= scene.height);
            }
        }
    }

    #[test]
    fn osr_splits_respect_label_spaces(seed in 0u64..500, mode in prop_oneof![Just(LabelMode::Single), Just(LabelMode::Multi)]) {
        let cfg = BenchmarkConfig {
            seed,
            sizes: SplitSizes { train: 12, test_known: 6, test_h: 6, test_m: 6 },
            ..BenchmarkConfig::default()
        };
        let bench = generate_benchmark(&cfg).unwrap();
        let s = build_osr_splits(&bench.entries, &cfg.kkc, &cfg.uuc, mode).unwrap();
        let labels = |i: usize| &bench.entries[i].label_ids;
        for &i in &s.train {
            prop_assert!(labels(i).iter().all(|c| cfg.kkc.contains(c)));
            prop_assert_eq!(bench.entries[i].split, SplitName::Train);
            if mode == LabelMode::Single {
                prop_assert_eq!(labels(i).len(), 1);
            }
        }
        for &i in &s.test_known {
            prop_assert!(labels(i).iter().all(|c| cfg.kkc.contains(c)));
        }
        for &i in &s.test_h {
            prop_assert!(labels(i).iter().all(|c| !cfg.kkc.contains(c)));
        }
        for &i in &s.test_m {
            prop_assert!(labels(i).iter().any(|c| cfg.kkc.contains(c)));
            prop_assert!(labels(i).iter().any(|c| cfg.uuc.contains(c)));
        }
        prop_assert_eq!(s.test_known.len() + s.test_h.len() + s.test_m.len(), 18);
    }
}
