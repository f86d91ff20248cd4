mod common;

use asr_ctta::adapters::select_samples;
use asr_ctta::asr::{label_flip_score, shrink_restore, FlipConfig, FlipMonitor, ShrinkRestoreConfig};
use asr_ctta::harness::{RunConfig, StepRow};
use asr_ctta::io::{checkpoint, trace};
use asr_ctta::model::{l2_norm, Architecture, ModelState, ProbOutput, StatsMode};
use asr_ctta::stream::{
    apply_corruption, build_schedule, CorruptionKind, CorruptionParams, ScheduleConfig, SegmentSpec,
};
use asr_ctta::Matrix;
use common::{randomized_model, random_matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch_strategy() -> impl Strategy<Value = Architecture> {
    (1usize..6, prop::collection::vec((1usize..6, any::<bool>()), 0..3), 2usize..5).prop_map(|(d, hidden, k)| {
        Architecture {
            input_dim: d,
            hidden_widths: hidden.iter().map(|h| h.0).collect(),
            num_classes: k,
            norm_after_hidden: hidden.iter().map(|h| h.1).collect(),
        }
    })
}

fn kind_strategy() -> impl Strategy<Value = CorruptionKind> {
    prop::sample::select(CorruptionKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions(arch in arch_strategy(), seed in any::<u64>(), scale in 0.1f64..50.0, batch in prop::bool::ANY) {
        let mode = if batch { StatsMode::Batch } else { StatsMode::Running };
        let m = randomized_model(&arch, seed, mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 5, arch.input_dim, scale);
        let p = m.predict(&x).unwrap();
        for i in 0..5 {
            let row = p.probs.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(p.confidence[i], row[p.predicted[i]]);
        }
        prop_assert_eq!(m.predict(&x).unwrap(), p);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(arch in arch_strategy(), seed in any::<u64>()) {
        let mut m = randomized_model(&arch, seed, StatsMode::Running);
        m.snap_to_f32();
        let back = checkpoint::decode(&checkpoint::encode(&m)).unwrap();
        prop_assert_eq!(back.arch(), m.arch());
        prop_assert_eq!(back.theta(), m.theta());
        prop_assert_eq!(back.theta_pre(), m.theta_pre());
        prop_assert_eq!(back.stats(), m.stats());
        prop_assert_eq!(back.source_stats(), m.source_stats());
    }

    #[test]
    fn shrink_restore_obeys_triangle_inequality(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40),
        lambda in 0.01f64..0.5,
        gamma in 0.01f64..0.49,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let cfg = ShrinkRestoreConfig { lambda, gamma };
        let r = shrink_restore(&a, &b, &cfg).unwrap();
        prop_assert!(l2_norm(&r) <= lambda * l2_norm(&a) + gamma * l2_norm(&b) + 1e-9);
    }

    #[test]
    fn unchanged_predictions_score_zero(logits in prop::collection::vec(-5.0f64..5.0, 12), bump in 0.0f64..0.3) {
        let before = ProbOutput::from_logits(&Matrix::from_vec(4, 3, logits.clone()).unwrap());
        // a small uniform shift of every logit changes no argmax
        let shifted: Vec<f64> = logits.iter().map(|v| v + bump).collect();
        let after = ProbOutput::from_logits(&Matrix::from_vec(4, 3, shifted).unwrap());
        prop_assert_eq!(&before.predicted, &after.predicted);
        prop_assert_eq!(label_flip_score(&before, &after).unwrap(), 0.0);
    }

    #[test]
    fn corruption_identity_and_isometry(kind in kind_strategy(), seed in any::<u64>(), severity in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 6, 7, 3.0);
        let p = CorruptionParams::default();
        prop_assert_eq!(apply_corruption(&x, kind, 0.0, &p, &mut rng).unwrap(), x.clone());
        let y = apply_corruption(&x, kind, severity, &p, &mut rng).unwrap();
        prop_assert!(y.is_finite());
        if kind == CorruptionKind::PlaneRotation {
            for (a, b) in x.iter_rows().zip(y.iter_rows()) {
                prop_assert!((l2_norm(a) - l2_norm(b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn schedules_blend_continuously(
        segs in prop::collection::vec((kind_strategy(), 0.0f64..5.0, 1u64..40), 1..5),
        transition in 0u64..15,
    ) {
        let segments: Vec<SegmentSpec> = segs.iter().map(|&(kind, severity, hold)| SegmentSpec { kind, severity, hold }).collect();
        let total: u64 = segments.iter().map(|s| s.hold).sum::<u64>() + transition * (segments.len() as u64 - 1);
        let s = build_schedule(&ScheduleConfig::Explicit { segments, transition_steps: transition }, 0).unwrap();
        prop_assert_eq!(s.total_steps(), total);
        let mut prev = s.severity_at(0).unwrap().severity();
        for t in 0..total {
            let b = s.severity_at(t).unwrap();
            prop_assert!((b.components.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((b.severity() - prev).abs() <= s.max_slope() + 1e-12);
            prev = b.severity();
        }
    }

    #[test]
    fn selection_ignores_row_order(logits in prop::collection::vec(-4.0f64..4.0, 24), rot in 0usize..8, avg in prop::collection::vec(0.01f64..1.0, 3)) {
        let m = Matrix::from_vec(8, 3, logits).unwrap();
        let p = ProbOutput::from_logits(&m);
        let order: Vec<usize> = (0..8).map(|i| (i + rot) % 8).collect();
        let q = ProbOutput::from_logits(&m.select_rows(&order));
        let h0 = 0.4 * 3f64.ln() * 2.0;
        let mut a: Vec<(usize, u64)> = select_samples(&p, h0, 0.9, Some(&avg)).into_iter().map(|(i, w)| (i, w.to_bits())).collect();
        let mut b: Vec<(usize, u64)> = select_samples(&q, h0, 0.9, Some(&avg)).into_iter().map(|(i, w)| (order[i], w.to_bits())).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn flip_decisions_depend_only_on_the_scores(scores in prop::collection::vec(0.0f64..3.0, 1..300), beta in 0.0f64..0.95, burn_in in 1usize..30) {
        let cfg = FlipConfig { beta, burn_in, ..FlipConfig::default() };
        let run = || {
            let mut m = FlipMonitor::new(cfg.clone()).unwrap();
            scores.iter().map(|&s| {
                let snap = m.observe(s).unwrap();
                if snap.triggered { m.reset(); }
                snap
            }).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
        let mut m = FlipMonitor::new(cfg.clone()).unwrap();
        for _ in 0..50 {
            prop_assert!((m.observe(scores[0]).unwrap().lf_smoothed - scores[0]).abs() <= 1e-12 * scores[0].abs().max(1.0));
        }
    }

    #[test]
    fn trace_rows_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6), flags in any::<(bool, bool, bool)>()) {
        let row = StepRow {
            step: 17,
            domain: CorruptionKind::MeanShift,
            severity: values[0].abs() % 5.0,
            accuracy: values[1].abs() % 1.0,
            lf_raw: values[2],
            lf_smoothed: values[3],
            min_estimate: flags.0.then_some(values[4]),
            armed: flags.1,
            triggered: flags.2,
            weight_norm: values[5].abs(),
            num_selected: 9,
        };
        let mut c = RunConfig::default();
        c.materialize();
        let bytes = trace::render_trace(&c, std::slice::from_ref(&row)).unwrap();
        let back = trace::parse_trace(std::str::from_utf8(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back.rows, vec![row]);
    }
}

#[test]
fn fresh_models_survive_checkpoints() {
    let m = ModelState::init(&Architecture::default(), 42).unwrap();
    let back = checkpoint::decode(&checkpoint::encode(&m)).unwrap();
    assert_eq!(back.theta(), m.theta());
}
