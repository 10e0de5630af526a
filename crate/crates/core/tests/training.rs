//! Optimisation, ablation switches, cross-validation and metric identities.

use std::rc::Rc;

use graphmmp_core::attention::attention_layer;
use graphmmp_core::config::RunConfig;
use graphmmp_core::cv::{ablate, cross_validate, stratified_folds};
use graphmmp_core::graph::{Edge, GraphConfig, GraphMeta};
use graphmmp_core::metrics::{auc, compute_metrics, THRESHOLD};
use graphmmp_core::model::{forward, GraphBatch, ModelConfig, ModelParams};
use graphmmp_core::optim::Adam;
use graphmmp_core::synth::{generate, SynthSpec};
use graphmmp_core::train::{evaluate, train_step, Ablation, TrainConfig};
use graphmmp_core::{FeatureGraph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph(rng: &mut ChaCha8Rng, sizes: &[usize]) -> FeatureGraph {
    let modality_of: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &s)| vec![k; s]).collect();
    let feature_index: Vec<usize> = sizes.iter().flat_map(|&s| 0..s).collect();
    let m = modality_of.len();
    let mut edges = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if modality_of[i] == modality_of[j] || rng.random::<f64>() < 0.5 {
                let w = rng.random_range(0.5..1.0);
                edges.push(Edge { src: i, dst: j, weight: w });
                edges.push(Edge { src: j, dst: i, weight: w });
            }
        }
    }
    FeatureGraph {
        node_values: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        modality_of,
        feature_index,
        edges,
        meta: GraphMeta { seed: 0, bins: 8, p: 0.5, tau: 0.1, fingerprint: None },
    }
}

#[test]
fn fifty_adam_steps_halve_the_loss() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = graph(&mut rng, &[4, 3]);
        let tc = TrainConfig { learning_rate: 1e-2, ..Default::default() };
        let cfg = tc.model(true);
        let mut model = ModelParams::init(&mut rng, &cfg);
        let batch = GraphBatch::new(&[&g]).unwrap();
        let label = (seed % 2) as u8;
        let (initial, _) = evaluate(&model, &cfg, &batch, &[label]).unwrap();
        let mut adam = Adam::new(tc.adam());
        for _ in 0..50 {
            train_step(&mut model, &cfg, &mut adam, &batch, Rc::from([label as usize])).unwrap();
        }
        let (after, _) = evaluate(&model, &cfg, &batch, &[label]).unwrap();
        assert!(after <= 0.5 * initial, "seed {seed}: {initial} -> {after}");
    }
}

fn leaky(t: &Tensor, slope: f64) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { slope * v })
}

#[test]
fn disabled_fusion_equals_hand_wired_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = ModelConfig { use_mgf: false, ..Default::default() };
    let model = ModelParams::init(&mut rng, &cfg);
    for _ in 0..5 {
        let g = graph(&mut rng, &[5, 4]);
        let h0 = Tensor::new(vec![g.node_count(), 1], g.node_values.clone()).unwrap();
        let h1 = leaky(&attention_layer(&model.layer1, &h0, &g.edges).unwrap(), cfg.leaky_slope);
        let h2 = leaky(&attention_layer(&model.layer2, &h1, &g.edges).unwrap(), cfg.leaky_slope);
        let d = h2.cols();
        let mut pooled = vec![0.0; d];
        for i in 0..h2.rows() {
            for (p, v) in pooled.iter_mut().zip(h2.row(i)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= h2.rows() as f64);
        let logits: Vec<f64> = (0..2)
            .map(|c| (0..d).map(|k| pooled[k] * model.head_w.at(k, c)).sum::<f64>() + model.head_b.data()[c])
            .collect();
        let out = forward(&model, &cfg, &g).unwrap();
        for c in 0..2 {
            assert!((out[c] - logits[c]).abs() <= 1e-12 * logits[c].abs().max(1.0), "{out:?} vs {logits:?}");
        }
        // The fused model differs on the same graph.
        let fused = forward(&model, &ModelConfig::default(), &g).unwrap();
        assert_ne!(fused, out);
    }
}

fn small_cohort(seed: u64) -> graphmmp_core::Dataset {
    generate(&SynthSpec { n: 30, modality_sizes: [3, 3], seed, ..Default::default() }).unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig { max_epochs: 3, patience: 2, folds: 3, heads: 2, d_head: 2, state_size: 4, ..Default::default() }
}

#[test]
fn default_switches_reproduce_the_full_model() {
    let ds = small_cohort(1);
    let tc = quick_train();
    let gc = GraphConfig::default();
    let full = cross_validate(&ds, &tc, &gc, Ablation::default(), 5, "fp", 1).unwrap();
    let abl = ablate(&ds, &tc, &gc, 5, "fp", 1).unwrap();
    assert_eq!(abl.rows[0].report, full.report);
    assert_eq!(serde_json::to_string(&abl.rows[0].report).unwrap(), serde_json::to_string(&full.report).unwrap());
    assert_ne!(abl.rows[1].report, full.report);
    assert_ne!(abl.rows[2].report, full.report);
}

#[test]
fn parallel_folds_match_sequential() {
    let ds = small_cohort(2);
    let tc = quick_train();
    let gc = GraphConfig::default();
    let a = cross_validate(&ds, &tc, &gc, Ablation::default(), 9, "fp", 1).unwrap();
    let b = cross_validate(&ds, &tc, &gc, Ablation::default(), 9, "fp", 3).unwrap();
    assert_eq!(a.report, b.report);
}

fn brute_force_auc(scores: &[(f64, u8)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for p in scores.iter().filter(|s| s.1 == 1) {
        for n in scores.iter().filter(|s| s.1 == 0) {
            pairs += 1.0;
            wins += if p.0 > n.0 {
                1.0
            } else if p.0 == n.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn scored() -> impl Strategy<Value = Vec<(f64, u8)>> {
    // Coarse grid so ties occur.
    prop::collection::vec((0u8..20, 0u8..2), 2..60)
        .prop_map(|v| v.into_iter().map(|(s, y)| (s as f64 / 19.0, y)).collect())
}

proptest! {
    #[test]
    fn auc_matches_pair_counting(scores in scored()) {
        match auc(&scores) {
            Some(a) => prop_assert!((a - brute_force_auc(&scores)).abs() < 1e-12),
            None => prop_assert!(scores.iter().all(|s| s.1 == scores[0].1)),
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(scores in scored()) {
        let mapped: Vec<(f64, u8)> = scores.iter().map(|&(s, y)| ((3.0 * s).exp() - 7.0, y)).collect();
        prop_assert_eq!(auc(&scores), auc(&mapped));
    }

    #[test]
    fn metric_identities(scores in scored()) {
        let m = compute_metrics(&scores).unwrap();
        let correct = scores.iter().filter(|&&(s, y)| (s >= THRESHOLD) == (y == 1)).count();
        prop_assert!((m.acc - correct as f64 / scores.len() as f64).abs() < 1e-15);
        if m.precision + m.recall > 0.0 {
            let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - f1).abs() < 1e-12);
        } else {
            prop_assert_eq!(m.f1, 0.0);
        }
    }

    #[test]
    fn folds_are_a_stratified_disjoint_cover(n_pos in 5usize..40, n_neg in 5usize..40, folds in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n_pos + n_neg)
            .map(|i| graphmmp_core::PatientRecord {
                id: format!("id{:03}", rng.random_range(0..1000) * 100 + i),
                modalities: vec![vec![0.0]],
                label: u8::from(i < n_pos),
            })
            .collect();
        let ds = graphmmp_core::Dataset::new("t", vec![], records, "d").unwrap();
        let splits = stratified_folds(&ds, folds, seed).unwrap();
        let mut seen = vec![0; ds.len()];
        for s in &splits {
            for &i in &s.val {
                seen[i] += 1;
            }
            prop_assert_eq!(s.train.len() + s.val.len(), ds.len());
            let pos = s.val.iter().filter(|&&i| ds.records[i].label == 1).count() as f64;
            prop_assert!((pos - n_pos as f64 / folds as f64).abs() <= 1.0);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn run_config_round_trips(
        seed in any::<u64>(),
        lr in 1e-6f64..1.0,
        epochs in 1usize..500,
        batch in 1usize..64,
        bins in 2usize..32,
        p in 0.01f64..=1.0,
        no_mi in any::<bool>(),
        no_mgf in any::<bool>(),
    ) {
        let mut cfg = RunConfig { seed, ..Default::default() };
        cfg.train.learning_rate = lr;
        cfg.train.max_epochs = epochs;
        cfg.train.patience = epochs.min(50);
        cfg.train.batch_size = batch;
        cfg.graph.bins = bins;
        cfg.graph.inter_prob = p;
        cfg.ablation = Ablation { no_mi, no_mgf };
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.fingerprint("d"), cfg.fingerprint("d"));
    }
}
