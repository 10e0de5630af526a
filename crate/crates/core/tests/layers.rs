//! Attention, fusion and full-model properties on random inputs.

use std::rc::Rc;

use graphmmp_core::attention::{attention_layer, attention_weights, AttentionLayerParams};
use graphmmp_core::gradcheck;
use graphmmp_core::graph::Edge;
use graphmmp_core::mgf::{mgf_forward, naive_scan, scan_inputs, selective_scan, MgfParams};
use graphmmp_core::model::{forward_tape, GraphBatch, ModelConfig, ModelParams, ModelVars};
use graphmmp_core::tape::ScanVars;
use graphmmp_core::{FeatureGraph, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Random symmetric edge list without self-loops; weights in `[0.5, 1)`.
fn random_edges(rng: &mut ChaCha8Rng, m: usize, density: f64) -> Vec<Edge> {
    let mut edges = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if rng.random::<f64>() < density {
                let w = rng.random_range(0.5..1.0);
                edges.push(Edge { src: i, dst: j, weight: w });
                edges.push(Edge { src: j, dst: i, weight: w });
            }
        }
    }
    edges
}

fn random_layer(rng: &mut ChaCha8Rng, d_in: usize) -> AttentionLayerParams {
    let heads = rng.random_range(1..4);
    let d_head = rng.random_range(1..5);
    AttentionLayerParams::init(rng, d_in, heads, d_head)
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let m = rng.random_range(2..=30);
        let d_in = rng.random_range(1..5);
        let layer = random_layer(&mut rng, d_in);
        let states = random(&mut rng, &[m, d_in], 3.0);
        let edges = random_edges(&mut rng, m, 0.3);
        let alpha = attention_weights(&layer, &states, &edges).unwrap();
        let mut sums = vec![0.0; m * layer.heads];
        let mut has_in = vec![false; m];
        for (e, edge) in edges.iter().enumerate() {
            has_in[edge.dst] = true;
            for h in 0..layer.heads {
                sums[edge.dst * layer.heads + h] += alpha.at(e, h);
            }
        }
        for i in (0..m).filter(|&i| has_in[i]) {
            for h in 0..layer.heads {
                assert!((sums[i * layer.heads + h] - 1.0).abs() < 1e-9);
            }
        }
        let out = attention_layer(&layer, &states, &edges).unwrap();
        assert_eq!(out.shape(), &[m, layer.heads * layer.d_head + d_in]);
        for i in (0..m).filter(|&i| !has_in[i]) {
            assert!(out.row(i)[..layer.heads * layer.d_head].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let m = rng.random_range(2..=20);
        let layer = random_layer(&mut rng, 3);
        let states = random(&mut rng, &[m, 3], 2.0);
        let edges = random_edges(&mut rng, m, 0.4);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        // node i moves to position perm[i]
        let mut permuted = vec![0.0; states.len()];
        for i in 0..m {
            permuted[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(states.row(i));
        }
        let permuted = Tensor::new(vec![m, 3], permuted).unwrap();
        let p_edges: Vec<Edge> = edges
            .iter()
            .map(|e| Edge { src: perm[e.src], dst: perm[e.dst], weight: e.weight })
            .collect();
        let out = attention_layer(&layer, &states, &edges).unwrap();
        let p_out = attention_layer(&layer, &permuted, &p_edges).unwrap();
        for i in 0..m {
            assert_eq!(out.row(i), p_out.row(perm[i]));
        }
    }
}

#[test]
fn edge_weight_change_is_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let m = rng.random_range(3..=15);
        let layer = random_layer(&mut rng, 2);
        let states = random(&mut rng, &[m, 2], 2.0);
        let edges = random_edges(&mut rng, m, 0.5);
        if edges.is_empty() {
            continue;
        }
        let k = rng.random_range(0..edges.len());
        let mut bumped = edges.clone();
        bumped[k].weight += 0.3;
        let target = edges[k].dst;
        let a0 = attention_weights(&layer, &states, &edges).unwrap();
        let a1 = attention_weights(&layer, &states, &bumped).unwrap();
        for (e, edge) in edges.iter().enumerate() {
            if edge.dst != target {
                assert_eq!(a0.row(e), a1.row(e));
            }
        }
        let o0 = attention_layer(&layer, &states, &edges).unwrap();
        let o1 = attention_layer(&layer, &states, &bumped).unwrap();
        for i in (0..m).filter(|&i| i != target) {
            assert_eq!(o0.row(i), o1.row(i));
        }
    }
}

/// Tape scan over several segments against the naive recurrence per segment.
#[test]
fn segmented_scan_matches_naive_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=6);
        let params = MgfParams::init(&mut rng, d, n);
        let lens: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..=64)).collect();
        let total: usize = lens.iter().sum();
        let seq = random(&mut rng, &[total, d], 2.0);
        let inputs = scan_inputs(&params, &seq).unwrap();
        let mut segments = Vec::new();
        let mut start = 0;
        for &l in &lens {
            segments.push((start, l));
            start += l;
        }
        let mut tape = Tape::new();
        let x = tape.constant(inputs.x.clone());
        let delta = tape.constant(Tensor::new(vec![total, 1], inputs.delta.clone()).unwrap());
        let b = tape.constant(inputs.b.clone());
        let c = tape.constant(inputs.c.clone());
        let a_log = tape.constant(params.a_log.clone());
        let d_skip = tape.constant(params.d_skip.clone());
        let y = tape
            .selective_scan(ScanVars { x, delta, b, c, a_log, d_skip }, Rc::from(segments.clone()))
            .unwrap();
        let y = tape.value(y).clone();
        for &(s, l) in &segments {
            let rows = |t: &Tensor| Tensor::new(vec![l, t.cols()], t.data()[s * t.cols()..(s + l) * t.cols()].to_vec()).unwrap();
            let part = graphmmp_core::mgf::ScanInputs {
                x: rows(&inputs.x),
                delta: inputs.delta[s..s + l].to_vec(),
                b: rows(&inputs.b),
                c: rows(&inputs.c),
            };
            let expected = naive_scan(&part, &params.a_log, params.d_skip.data());
            assert_eq!(rows(&y).data(), expected.data());
        }
    }
}

#[test]
fn scan_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let m = rng.random_range(2..=32);
        let d = rng.random_range(1..=6);
        let params = MgfParams::init(&mut rng, d, 4);
        let seq = random(&mut rng, &[m, d], 1.0);
        let t = rng.random_range(1..m);
        let mut perturbed = seq.clone();
        for v in &mut perturbed.data_mut()[t * d..] {
            *v += 0.7;
        }
        let y0 = selective_scan(&params, &seq).unwrap();
        let y1 = selective_scan(&params, &perturbed).unwrap();
        assert_eq!(&y0.data()[..t * d], &y1.data()[..t * d]);
        assert_ne!(&y0.data()[t * d..], &y1.data()[t * d..]);
    }
}

#[test]
fn amplified_inputs_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = MgfParams::init(&mut rng, 8, 16);
    let seq = random(&mut rng, &[64, 8], 10.0);
    assert!(selective_scan(&params, &seq).unwrap().is_finite());
}

#[test]
fn node_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = MgfParams::init(&mut rng, 3, 4);
    let states = random(&mut rng, &[5, 3], 1.0);
    let modality_of = [0, 0, 0, 1, 1];
    let a = mgf_forward(&params, &states, &modality_of, &[0, 1, 2, 0, 1]).unwrap();
    let b = mgf_forward(&params, &states, &modality_of, &[2, 1, 0, 1, 0]).unwrap();
    assert_ne!(a, b);
}

fn six_node_graph(rng: &mut ChaCha8Rng) -> FeatureGraph {
    let modality_of = vec![0, 0, 0, 1, 1, 1];
    let mut edges = Vec::new();
    for i in 0..6 {
        for j in i + 1..6 {
            if modality_of[i] == modality_of[j] || (i + j) % 2 == 1 {
                let w = rng.random_range(0.5..1.0);
                edges.push(Edge { src: i, dst: j, weight: w });
                edges.push(Edge { src: j, dst: i, weight: w });
            }
        }
    }
    FeatureGraph {
        node_values: (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
        modality_of,
        feature_index: vec![0, 1, 2, 0, 1, 2],
        edges,
        meta: graphmmp_core::graph::GraphMeta { seed: 0, bins: 8, p: 0.5, tau: 0.1, fingerprint: None },
    }
}

fn full_model_check(use_mgf: bool, graphs: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig { heads: 2, d_head: 3, state_size: 4, use_mgf, ..Default::default() };
    let model = ModelParams::init(&mut rng, &cfg);
    let gs: Vec<FeatureGraph> = (0..graphs).map(|_| six_node_graph(&mut rng)).collect();
    let refs: Vec<&FeatureGraph> = gs.iter().collect();
    let batch = GraphBatch::new(&refs).unwrap();
    let labels: Rc<[usize]> = (0..graphs).map(|g| g % 2).collect();
    let params: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let report = gradcheck::check_default(&params, |tape, vars| {
        let v = ModelVars::from_vars(&cfg, vars)?;
        let logits = forward_tape(tape, &v, &batch, &cfg)?;
        tape.cross_entropy(logits, labels.clone())
    })
    .unwrap();
    assert_eq!(report.checked, model.parameter_count());
    assert!(report.passed(), "{:?}", report.mismatches.first());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        full_model_check(true, 1, seed);
    }
}

#[test]
fn batched_and_ablated_gradients_match() {
    full_model_check(true, 3, 10);
    full_model_check(false, 2, 11);
}
