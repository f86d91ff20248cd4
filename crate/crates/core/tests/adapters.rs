mod common;

use asr_ctta::adapters::{
    bn_stats_step, eata_lite_step, select_samples, tent_step, Adapter, AdapterConfig, BnStatsConfig, EataLiteConfig,
    MaskPolicy, TentConfig,
};
use asr_ctta::harness::{prepare_source, RunConfig};
use asr_ctta::model::{l2_norm, ModelState, TrainableMask};
use asr_ctta::stream::{build_schedule, StreamState};
use asr_ctta::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn source() -> (RunConfig, ModelState) {
    let mut c = RunConfig::default();
    c.materialize();
    let m = prepare_source(&c).unwrap().model;
    (c, m)
}

fn batches(c: &RunConfig, n: usize) -> Vec<Matrix> {
    let sched = build_schedule(&c.schedule, c.seed).unwrap();
    let mut s = StreamState::new(sched, c.source_distribution().unwrap(), c.corruption.clone(), c.seed).unwrap();
    (0..n).map(|_| s.sample_batch(64).unwrap().unwrap().0.features).collect()
}

fn mean_entropy(m: &ModelState, x: &Matrix) -> f64 {
    let h = m.predict(x).unwrap().entropies();
    h.iter().sum::<f64>() / h.len() as f64
}

#[test]
fn bn_stats_on_clean_data_recovers_source_statistics() {
    let (c, mut m) = source();
    let n_batch = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (x, _) = c.source_distribution().unwrap().sample(n_batch, &mut rng);
    let theta = m.theta().to_vec();
    bn_stats_step(&mut m, &x, true).unwrap();
    assert_eq!(m.theta(), &theta[..]);
    // both sides are sample estimates: the source stats come from the training set
    let n_src = c.source.samples as f64;
    let se = (1.0 / n_src + 1.0 / n_batch as f64).sqrt();
    for (got, src) in m.stats().iter().zip(m.source_stats()) {
        let mean_dev: f64 = got
            .mean
            .iter()
            .zip(&src.mean)
            .zip(&src.var)
            .map(|((a, b), v)| (a - b).abs() / v.sqrt())
            .sum::<f64>()
            / got.mean.len() as f64;
        assert!(mean_dev < 3.0 * se, "mean standardized deviation {mean_dev} vs {}", 3.0 * se);
    }
}

#[test]
fn bn_stats_is_idempotent_on_repeated_batches() {
    let (c, mut m) = source();
    let x = &batches(&c, 1)[0];
    let a = bn_stats_step(&mut m, x, true).unwrap();
    let b = bn_stats_step(&mut m, x, true).unwrap();
    assert_eq!(a.preds_after, b.preds_after);
    assert_eq!(b.preds_before, b.preds_after);
    assert!(bn_stats_step(&mut m, &Matrix::zeros(1, 16), true).is_err());
}

#[test]
fn tent_lowers_entropy_for_small_steps() {
    let (c, m0) = source();
    let cfg = TentConfig {
        lr: 1e-3,
        update_stats: false,
        ..TentConfig::default()
    };
    let mask = TrainableMask::norm_affine(m0.layout());
    let xs = batches(&c, 100);
    let mut m = m0.clone();
    let mut descended = 0;
    for x in &xs {
        let before = mean_entropy(&m, x);
        tent_step(&mut m, x, &cfg, &mask).unwrap();
        if mean_entropy(&m, x) <= before {
            descended += 1;
        }
    }
    assert!(descended >= 95, "{descended}/100");
}

#[test]
fn tent_changes_only_masked_entries() {
    let (c, mut m) = source();
    let mask = TrainableMask::norm_affine(m.layout());
    let theta0 = m.theta().to_vec();
    let pre = m.theta_pre().to_vec();
    for x in batches(&c, 20) {
        tent_step(&mut m, &x, &TentConfig::default(), &mask).unwrap();
    }
    let mut moved = 0;
    for i in 0..theta0.len() {
        if mask.get(i) {
            moved += usize::from(m.theta()[i] != theta0[i]);
        } else {
            assert_eq!(m.theta()[i].to_bits(), theta0[i].to_bits());
        }
    }
    assert!(moved > 0);
    assert_eq!(m.theta_pre(), &pre[..]);
}

#[test]
fn tent_with_zero_lr_is_a_no_op() {
    let (c, mut m) = source();
    let before = m.clone();
    let cfg = TentConfig {
        lr: 0.0,
        ..TentConfig::default()
    };
    let r = tent_step(&mut m, &batches(&c, 1)[0], &cfg, &TrainableMask::norm_affine(before.layout())).unwrap();
    assert_eq!(r.preds_before, r.preds_after);
    assert_eq!(m.theta(), before.theta());
    assert_eq!(m.stats(), before.stats());
}

#[test]
fn disabled_adapters_leave_the_model_alone() {
    let (c, m0) = source();
    let configs = [
        AdapterConfig::BnStats(BnStatsConfig { update_stats: false }),
        AdapterConfig::Tent(TentConfig {
            lr: 0.0,
            update_stats: false,
            ..TentConfig::default()
        }),
        AdapterConfig::EataLite(EataLiteConfig {
            lr: 0.0,
            update_stats: false,
            trainable: MaskPolicy::AllParameters,
            ..EataLiteConfig::default()
        }),
    ];
    let xs = batches(&c, 10);
    for cfg in configs {
        let mut m = m0.clone();
        let mut a = Adapter::new(cfg.clone(), &m).unwrap();
        for x in &xs {
            let r = a.step(&mut m, x).unwrap();
            assert_eq!(r.preds_before, m0.predict(x).unwrap(), "{}", cfg.name());
        }
        assert_eq!(m.theta(), m0.theta());
        assert_eq!(m.stats(), m0.stats());
    }
}

#[test]
fn preds_before_is_a_pure_forward_of_the_pre_step_model() {
    let (c, m0) = source();
    for cfg in [
        AdapterConfig::BnStats(BnStatsConfig { update_stats: true }),
        AdapterConfig::Tent(TentConfig::default()),
        AdapterConfig::EataLite(EataLiteConfig::default()),
    ] {
        let mut cfg = cfg;
        cfg.materialize(5);
        let mut m = m0.clone();
        let mut a = Adapter::new(cfg, &m).unwrap();
        for x in batches(&c, 30) {
            let expected = m.predict(&x).unwrap();
            let r = a.step(&mut m, &x).unwrap();
            assert_eq!(r.preds_before, expected);
            assert_eq!(r.preds_after, m.predict(&x).unwrap());
            assert_eq!(m.theta_pre(), m0.theta_pre());
        }
    }
}

#[test]
fn eata_zero_threshold_selects_nothing() {
    let (c, mut m) = source();
    let cfg = EataLiteConfig {
        entropy_threshold: Some(0.0),
        update_stats: false,
        ..EataLiteConfig::default()
    };
    let theta = m.theta().to_vec();
    let mut avg = None;
    let mask = TrainableMask::norm_affine(m.layout());
    let r = eata_lite_step(&mut m, &batches(&c, 1)[0], &cfg, &mask, &mut avg).unwrap();
    assert_eq!(r.num_selected, 0);
    assert_eq!(m.theta(), &theta[..]);
}

#[test]
fn eata_anchor_keeps_weights_near_source() {
    let (c, m0) = source();
    let xs = batches(&c, 100);
    let drift = |rho: f64| {
        let cfg = EataLiteConfig {
            lr: 5e-4,
            anchor_weight: rho,
            entropy_threshold: Some(0.4 * 5f64.ln()),
            ..EataLiteConfig::default()
        };
        let mut m = m0.clone();
        let mask = TrainableMask::norm_affine(m.layout());
        let mut avg = None;
        for x in &xs {
            eata_lite_step(&mut m, x, &cfg, &mask, &mut avg).unwrap();
        }
        let d: Vec<f64> = m.theta().iter().zip(m.theta_pre()).map(|(a, b)| a - b).collect();
        l2_norm(&d)
    };
    let free = drift(0.0);
    let anchored = drift(1e3);
    assert!(anchored < free, "anchored {anchored} vs free {free}");
}

#[test]
fn eata_selection_predicate() {
    let p = asr_ctta::model::ProbOutput::from_logits(&Matrix::from_rows(&[vec![8.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap());
    let h = p.entropies();
    let avg = [0.0, 1.0, 0.0];
    // first row: entropy just under the threshold and nearly orthogonal to the average
    let sel = select_samples(&p, h[0] + 1e-9, 0.95, Some(&avg));
    assert_eq!(sel.len(), 1);
    assert_eq!(sel[0].0, 0);
    assert!((sel[0].1 - (1e-9f64).exp()).abs() < 1e-12);
    assert!(select_samples(&p, h[0], 0.95, Some(&avg)).is_empty());
}
