use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hat_core::config::RunConfig;
use hat_core::eval::{average_precision, evaluate, map_at, Detection, EvalConfig, GroundTruth};
use hat_core::history::{HistoryConfig, HistoryModule};
use hat_core::infer::{run_stream, GateKind, InferenceOptions};
use hat_core::model::HatModel;
use hat_core::numerics::{random_tensor, ParamStore, Tape};
use hat_core::postproc::audit_online;
use hat_core::synthdata::{generate, ProceduralGrammar};

fn segment() -> impl Strategy<Value = (f64, f64)> {
    (0.0f64..50.0, 0.5f64..12.0).prop_map(|(s, l)| (s, s + l))
}

fn detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0usize..2, 0usize..3, segment(), 0.0f64..1.0, 0u32..80), 0..25).prop_map(|v| {
        v.into_iter()
            .map(|(vid, class, (start, end), score, emission_time)| Detection {
                video: format!("v{vid}"),
                class,
                start,
                end,
                score,
                emission_time,
            })
            .collect()
    })
}

fn ground_truth() -> impl Strategy<Value = Vec<GroundTruth>> {
    prop::collection::vec((0usize..2, 0usize..3, segment()), 1..12).prop_map(|v| {
        v.into_iter()
            .map(|(vid, class, (start, end))| GroundTruth {
                video: format!("v{vid}"),
                class,
                start,
                end,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_is_a_probability(dets in detections(), gt in ground_truth(), thr in 0.05f64..1.0) {
        for c in 0..3 {
            let d: Vec<Detection> = dets.iter().filter(|d| d.class == c).cloned().collect();
            let g: Vec<GroundTruth> = gt.iter().filter(|g| g.class == c).cloned().collect();
            if let Some(ap) = average_precision(&d, &g, thr) {
                prop_assert!((0.0..=1.0).contains(&ap), "{ap}");
            }
        }
    }

    #[test]
    fn map_does_not_increase_with_threshold(dets in detections(), gt in ground_truth()) {
        let table = map_at(&dets, &gt, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 0.9]);
        for w in table.map.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", table.map);
        }
        prop_assert!(table.map.iter().all(|&m| (0.0..=100.0).contains(&m)));
    }

    #[test]
    fn evaluation_replays_identically(dets in detections(), gt in ground_truth()) {
        let cfg = EvalConfig::default();
        prop_assert_eq!(evaluate(&dets, &gt, &cfg), evaluate(&dets, &gt, &cfg));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_a_function_of_length_and_seed(t_len in 20usize..200, seed in any::<u64>()) {
        let g = ProceduralGrammar::default();
        let (a, ra) = generate(&g, t_len, seed).unwrap();
        let (b, rb) = generate(&g, t_len, seed).unwrap();
        prop_assert_eq!(a.features.data(), b.features.data());
        prop_assert_eq!(&a.annotations, &b.annotations);
        prop_assert_eq!(ra, rb);
        prop_assert_eq!(a.features.shape(), &[t_len, g.feature_dim]);
    }

    #[test]
    fn compressed_history_size_ignores_history_length(extra in 1usize..60, l_comp in 1usize..6, seed in 0u64..100) {
        let l_h = l_comp + extra;
        let cfg = HistoryConfig {
            l_h,
            l_comp,
            n_c: 1,
            n_r: 1,
            heads_c: 2,
            heads_r: 2,
            ..HistoryConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = HistoryModule::new(&mut store, &mut rng, &cfg, 8, 3).unwrap();
        let mut tape = Tape::new(&store);
        let h = tape.input(random_tensor(&[l_h, 8], seed));
        let c = m.compress(&mut tape, h).unwrap();
        prop_assert_eq!(tape.value(c.compressed.0).shape(), &[l_comp, 8]);
    }
}

#[test]
fn ambiguous_pairs_share_features() {
    let g = ProceduralGrammar::default();
    let protos = g.prototypes();
    for &(a, b) in &g.ambiguous {
        assert_eq!(protos[a], protos[b]);
    }
}

#[test]
fn ablations_stay_runnable_and_online() {
    let video = generate(&ProceduralGrammar::default(), 50, 4).unwrap().0;
    for ablation in [
        None,
        Some("history=off"),
        Some("anticipation=off"),
        Some("refinement=off"),
        Some("integration=concat"),
        Some("integration=avgpool"),
        Some("integration=none"),
        Some("loss=ce"),
    ] {
        let ablations: Vec<String> = ablation.iter().map(|s| s.to_string()).collect();
        let (cfg, _) = RunConfig::build(RunConfig::toy(), None, &[], &ablations).unwrap();
        let (model, store) = HatModel::build::<f32>(&cfg).unwrap();
        for gate in [GateKind::Osn, GateKind::Score] {
            let opts = InferenceOptions {
                audit: true,
                attention: false,
                gate,
            };
            let a = run_stream(&model, &store, &video.features, opts).unwrap();
            let report = audit_online(a.trace.as_ref().unwrap(), cfg.anchor.max_size() as f64).unwrap();
            assert!(report.passed, "{ablation:?}: {report:?}");
            let b = run_stream(&model, &store, &video.features, opts).unwrap();
            assert_eq!(a.psi, b.psi, "{ablation:?}");
        }
    }
}
