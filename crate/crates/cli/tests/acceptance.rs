//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;
use std::time::{Duration, Instant};

use graphmmp_core::attention::{attention_weights, AttentionLayerParams};
use graphmmp_core::cv::{stratified_folds, MetricsReport};
use graphmmp_core::gradcheck;
use graphmmp_core::graph::{edge_weight, estimate_mi, Edge, GraphMeta, TAU};
use graphmmp_core::mgf::{naive_scan, scan_inputs, selective_scan, MgfParams};
use graphmmp_core::model::{forward_tape, GraphBatch, ModelConfig, ModelParams, ModelVars};
use graphmmp_core::report::{ablation_from_json, metrics_from_json};
use graphmmp_core::synth::{generate, SynthSpec};
use graphmmp_core::tape::ScanVars;
use graphmmp_core::{FeatureGraph, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn bin(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut cuts = Vec::new();
    for b in 1..bins {
        let c = sorted[b * values.len() / bins];
        if cuts.last() != Some(&c) {
            cuts.push(c);
        }
    }
    values.iter().map(|v| cuts.iter().filter(|&&c| c <= *v).count()).collect()
}

/// Plug-in MI from hash-map histogram counts on quantile bins.
fn oracle_mi(xs: &[f64], ys: &[f64], bins: usize) -> f64 {
    let (bx, by) = (bin(xs, bins), bin(ys, bins));
    let n = xs.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut mx: HashMap<usize, f64> = HashMap::new();
    let mut my: HashMap<usize, f64> = HashMap::new();
    for i in 0..xs.len() {
        *joint.entry((bx[i], by[i])).or_default() += 1.0;
        *mx.entry(bx[i]).or_default() += 1.0;
        *my.entry(by[i]).or_default() += 1.0;
    }
    let mut total = 0.0;
    for (&(a, b), &c) in &joint {
        let p = c / n;
        total += p * (p / (mx[&a] / n * (my[&b] / n))).ln();
    }
    total.max(0.0)
}

fn mi_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = [4, 8, 16][seed as usize % 3];
        let rho = rng.random_range(-0.95..0.95);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| rho * x + (1.0 - rho * rho).sqrt() * rng.random_range(-1.0..1.0)).collect();
        let got = estimate_mi(&xs, &ys, bins).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_mi(&xs, &ys, bins)).abs());
    }
    let t = start.elapsed();
    check(
        worst <= 1e-12 && t < Duration::from_secs(10),
        format!("max |diff| {worst:.2e} over 50 datasets, {:.2}s", t.as_secs_f64()),
    )
}

fn mi_analytic_cases() -> Outcome {
    let xs: Vec<f64> = (0..100).map(|i| (i % 4) as f64).collect();
    let identity = estimate_mi(&xs, &xs, 4).map_err(|e| e.to_string())?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for x in 0..4 {
        for y in 0..4 {
            a.push(x as f64);
            b.push(y as f64);
        }
    }
    let product = estimate_mi(&a, &b, 4).map_err(|e| e.to_string())?;
    let d = (identity - 4f64.ln()).abs();
    check(
        d <= 1e-9 && product.abs() <= 1e-12,
        format!("identity |I - ln 4| = {d:.1e}, product I = {product:.1e}"),
    )
}

fn edge_weight_range() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Plug-in MI never exceeds ln B; ln 64 covers any practical bin count.
    let max_mi = 64f64.ln();
    let out_of_range = (0..10_000)
        .map(|_| edge_weight(rng.random_range(0.0..=max_mi), TAU))
        .filter(|w| !(0.5..1.0).contains(w))
        .count();
    // Pre-clip sigmoid values below tau come from negative inputs.
    let clipped = (0..1000).all(|i| edge_weight(-2.2 - i as f64 * 0.05, TAU) == 0.1);
    check(
        out_of_range == 0 && clipped && edge_weight(0.0, TAU) == 0.5,
        format!("{out_of_range} of 10000 outside [0.5, 1); sub-tau clip exact: {clipped}"),
    )
}

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

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(2..=30);
        let d_in = rng.random_range(1..6);
        let heads = rng.random_range(1..5);
        let d_head = rng.random_range(1..6);
        let layer = AttentionLayerParams::init(&mut rng, d_in, heads, d_head);
        let states = random(&mut rng, &[m, d_in], 3.0);
        let density = rng.random_range(0.1..0.9);
        let edges = random_edges(&mut rng, m, density);
        let alpha = attention_weights(&layer, &states, &edges).map_err(|e| e.to_string())?;
        let mut sums = vec![None; m * heads];
        for (e, edge) in edges.iter().enumerate() {
            for h in 0..heads {
                *sums[edge.dst * heads + h].get_or_insert(0.0) += alpha.at(e, h);
            }
        }
        for s in sums.into_iter().flatten() {
            worst = worst.max((s - 1.0f64).abs());
        }
    }
    check(worst <= 1e-9, format!("max |sum - 1| = {worst:.1e} over 100 graphs"))
}

fn six_node_graph(rng: &mut ChaCha8Rng) -> FeatureGraph {
    let modality_of = vec![0, 0, 0, 1, 1, 1];
    let mut edges = Vec::new();
    for i in 0..6 {
        for j in i + 1..6 {
            if modality_of[i] == modality_of[j] || rng.random::<f64>() < 0.5 {
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
        meta: GraphMeta { seed: 0, bins: 8, p: 0.5, tau: TAU, fingerprint: None },
    }
}

fn full_model_gradcheck() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig { heads: 2, d_head: 3, state_size: 4, ..Default::default() };
    let model = ModelParams::init(&mut rng, &cfg);
    let g = six_node_graph(&mut rng);
    let batch = GraphBatch::new(&[&g]).map_err(|e| e.to_string())?;
    let params: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let report = gradcheck::check(&params, 1e-5, 1e-4, 1e-7, |tape, vars| {
        let v = ModelVars::from_vars(&cfg, vars)?;
        let logits = forward_tape(tape, &v, &batch, &cfg)?;
        tape.cross_entropy(logits, Rc::from([1usize]))
    })
    .map_err(|e| e.to_string())?;
    let t = start.elapsed();
    check(
        report.passed() && report.checked == model.parameter_count() && t < Duration::from_secs(60),
        format!(
            "{} scalars, {} mismatches, max abs err {:.1e}, {:.2}s",
            report.checked,
            report.mismatches.len(),
            report.max_abs_err,
            t.as_secs_f64()
        ),
    )
}

fn scan_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut equal = 0;
    let mut causal = 0;
    for _ in 0..20 {
        let m = rng.random_range(1..=64);
        let d = rng.random_range(1..=8);
        let n_state = rng.random_range(1..=16);
        let params = MgfParams::init(&mut rng, d, n_state);
        let seq = random(&mut rng, &[m, d], 2.0);
        let inputs = scan_inputs(&params, &seq).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let vars = ScanVars {
            x: tape.constant(inputs.x.clone()),
            delta: tape.constant(Tensor::new(vec![m, 1], inputs.delta.clone()).unwrap()),
            b: tape.constant(inputs.b.clone()),
            c: tape.constant(inputs.c.clone()),
            a_log: tape.constant(params.a_log.clone()),
            d_skip: tape.constant(params.d_skip.clone()),
        };
        let y = tape.selective_scan(vars, Rc::from([(0, m)])).map_err(|e| e.to_string())?;
        let naive = naive_scan(&inputs, &params.a_log, params.d_skip.data());
        if tape.value(y).data() == naive.data() {
            equal += 1;
        }
        if m > 1 {
            let t = rng.random_range(1..m);
            let mut bumped = seq.clone();
            for v in &mut bumped.data_mut()[t * d..] {
                *v += 1.0;
            }
            let a = selective_scan(&params, &seq).map_err(|e| e.to_string())?;
            let b = selective_scan(&params, &bumped).map_err(|e| e.to_string())?;
            if a.data()[..t * d] == b.data()[..t * d] {
                causal += 1;
            }
        } else {
            causal += 1;
        }
    }
    check(
        equal == 20 && causal == 20,
        format!("{equal}/20 bitwise equal to naive recurrence, {causal}/20 causal"),
    )
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graphmmp"))
}

fn run(args: &[&str]) -> Result<(), String> {
    let out = binary().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("graphmmp {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_report(dir: &Path) -> Result<(MetricsReport, String), String> {
    let text = std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    Ok((metrics_from_json(&text).map_err(|e| e.to_string())?, text))
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn manifest(&self, name: &str) -> PathBuf {
        self.root.join(name).join("manifest.json")
    }
}

fn end_to_end(ws: &Workspace) -> Outcome {
    let start = Instant::now();
    let data = ws.root.join("high");
    run(&["synth", "--out", p(&data)])?;
    let out = ws.root.join("cv_high");
    run(&["cv", "--manifest", p(&ws.manifest("high")), "--out", p(&out), "--seed", "7"])?;
    let t = start.elapsed();
    let (report, _) = read_report(&out)?;
    let auc = report.mean.auc.unwrap_or(f64::NAN);

    let null_data = ws.root.join("null");
    run(&["synth", "--out", p(&null_data), "--strength", "0"])?;
    let null_out = ws.root.join("cv_null");
    run(&["cv", "--manifest", p(&ws.manifest("null")), "--out", p(&null_out), "--seed", "7"])?;
    let (null, _) = read_report(&null_out)?;
    let null_auc = null.mean.auc.unwrap_or(f64::NAN);
    check(
        report.mean.acc >= 0.90 && auc >= 0.95 && (null_auc - 0.5).abs() <= 0.1 && t < Duration::from_secs(300),
        format!(
            "ACC {:.4}, AUC {auc:.4} in {:.0}s; null AUC {null_auc:.4}",
            report.mean.acc,
            t.as_secs_f64()
        ),
    )
}

const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn ablation_direction(ws: &Workspace) -> Outcome {
    let mut acc: HashMap<String, Vec<f64>> = HashMap::new();
    let mut order = Vec::new();
    for seed in ABLATION_SEEDS {
        let out = ws.root.join(format!("ablate_{seed}"));
        let s = seed.to_string();
        run(&["ablate", "--manifest", p(&ws.manifest("high")), "--out", p(&out), "--seed", &s])?;
        let text = std::fs::read_to_string(out.join("ablation.json")).map_err(|e| e.to_string())?;
        let report = ablation_from_json(&text).map_err(|e| e.to_string())?;
        for row in report.rows {
            if !order.contains(&row.variant) {
                order.push(row.variant.clone());
            }
            acc.entry(row.variant).or_default().push(row.report.mean.acc);
        }
    }
    let mean = |v: &str| acc[v].iter().sum::<f64>() / acc[v].len() as f64;
    let (full, no_mi, no_mgf) = (mean("full"), mean("w/o MI"), mean("w/o MGF"));
    let per_seed: Vec<String> = order
        .iter()
        .map(|v| format!("{v} [{}]", acc[v].iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ")))
        .collect();
    check(
        full >= no_mi && full >= no_mgf,
        format!(
            "mean ACC full {full:.4}, w/o MI {no_mi:.4}, w/o MGF {no_mgf:.4}; per seed: {}",
            per_seed.join("; ")
        ),
    )
}

fn determinism(ws: &Workspace) -> Outcome {
    let (_, first) = read_report(&ws.root.join("cv_high"))?;
    let again = ws.root.join("cv_high_again");
    run(&["cv", "--manifest", p(&ws.manifest("high")), "--out", p(&again), "--seed", "7"])?;
    let (_, second) = read_report(&again)?;
    let ds = generate(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let splits = stratified_folds(&ds, 5, 7).map_err(|e| e.to_string())?;
    let mut seen = vec![0; ds.len()];
    for s in &splits {
        for &i in &s.val {
            seen[i] += 1;
        }
    }
    let cover = seen.iter().all(|&c| c == 1);
    check(
        first == second && cover,
        format!("report JSON identical: {}; folds form exact cover: {cover}", first == second),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let ws = Workspace { root: tmp.path().to_path_buf(), _tmp: tmp };
    let criteria: Vec<Criterion> = vec![
        ("1 MI oracle equivalence", Box::new(mi_oracle_equivalence)),
        ("2 MI analytic cases", Box::new(mi_analytic_cases)),
        ("3 edge-weight range", Box::new(edge_weight_range)),
        ("4 attention normalization", Box::new(attention_normalization)),
        ("5 full-model gradient check", Box::new(full_model_gradcheck)),
        ("6 selective-scan oracle and causality", Box::new(scan_oracle)),
        ("7 end-to-end synthetic learning", Box::new(|| end_to_end(&ws))),
        ("8 ablation direction over 5 seeds", Box::new(|| ablation_direction(&ws))),
        ("10 determinism", Box::new(|| determinism(&ws))),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        match f() {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    println!(
        "EXEMPT criterion 9 published cohort figures: the liver cohort is private and the METABRIC preprocessing \
         is unspecified, so no numeric gate applies; the manifest path loads such data for holders"
    );
    println!("{} of {} gated criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
