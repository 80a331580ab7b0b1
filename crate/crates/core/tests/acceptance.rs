//! Acceptance criteria A1–A11, one PASS/FAIL line each.
//!
//! Run with `cargo test -p autofis --test acceptance`. Pass criterion ids
//! as arguments to run a subset, e.g. `-- A4 A7`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use autofis::config::RunConfig;
use autofis::data::{enumerate_interactions, InteractionId, Order};
use autofis::interaction::{
    bn_backward, bn_normalize, ArchitectureParams, BatchStats, BnConfig, BnPhase, BnState, Coverage, GateSet, LayerMode,
};
use autofis::metrics::{auc, pearson, ScoredSet};
use autofis::network::{Head, Model, ModelConfig, Phase};
use autofis::optim::{grda_step, GrdaConfig, GrdaState};
use autofis::par::Execution;
use autofis::persistence::{Checkpoint, InteractionManifest};
use autofis::pipeline::{
    self, prepare_data, random_gates, retrain_with_gates, run_pipeline, search_stage, search_with,
    third_order_pipeline, train_plain, transfer_model, Prepared,
};
use autofis::rng::{indexed_substream, Stream};
use autofis::tensor::Matrix;
use rand::Rng;

use common::{max_gradient_error, perturbed_model, top_by_magnitude, toy_data};

const SYNTHETIC: &str = include_str!("../../../configs/synthetic.toml");
const TRIPLES: &str = include_str!("../../../configs/synthetic_triples.toml");
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

const SMALL: &str = r#"
[run]
seed = 3

[synthetic]
n_train = 3000
n_test = 800
fields = 5
categories = 8
planted = ["0,1", "2,4"]
calibration_samples = 2000

[model]
embed_dim = 4

[grda]
lr = 10.0

[search]
epochs = 3
batch_size = 100

[retrain]
epochs = 2
batch_size = 100

[eval]
batch_size = 1000
"#;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn config(text: &str, overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_with(text, &o).expect("acceptance config")
}

fn test_auc(report: &pipeline::StageReport) -> f64 {
    report.test.expect("test split").auc
}

/// Searches and pipelines over the five synthetic seeds, shared by A1–A3.
struct SyntheticRuns {
    data: Vec<Prepared>,
    pipelines: Vec<pipeline::PipelineOutcome>,
    plain_auc: Vec<f64>,
}

fn synthetic_runs() -> Result<SyntheticRuns, autofis::Error> {
    let mut runs = SyntheticRuns {
        data: Vec::new(),
        pipelines: Vec::new(),
        plain_auc: Vec::new(),
    };
    for seed in SEEDS {
        let cfg = config(SYNTHETIC, &[&format!("run.seed={seed}")]);
        let data = prepare_data(&cfg)?;
        runs.pipelines.push(run_pipeline(&cfg, &data)?);
        runs.plain_auc.push(test_auc(&train_plain(&cfg, &data)?.1));
        runs.data.push(data);
    }
    Ok(runs)
}

fn a1(runs: &SyntheticRuns) -> Outcome {
    let mut recovered = 0;
    let mut sparse = 0;
    let mut detail = Vec::new();
    for (data, run) in runs.data.iter().zip(&runs.pipelines) {
        let planted = data.synthetic.as_ref().unwrap().planted_ids();
        let alpha = &run.manifest.alpha;
        let mut top: Vec<InteractionId> = top_by_magnitude(alpha.values(), 3)
            .into_iter()
            .map(|k| alpha.ids()[k])
            .collect();
        top.sort();
        let mut want = planted.clone();
        want.sort();
        let zeros = alpha
            .ids()
            .iter()
            .zip(alpha.values())
            .filter(|(id, &a)| !planted.contains(id) && a == 0.0)
            .count();
        recovered += usize::from(top == want);
        sparse += usize::from(zeros >= 6);
        detail.push(format!("{}:{zeros}", if top == want { "top3" } else { "miss" }));
    }
    let ok = recovered >= 4 && sparse == SEEDS.len();
    Ok((
        ok,
        format!(
            "planted top-3 in {recovered}/5, >=6 zeros in {sparse}/5 [{}]",
            detail.join(" ")
        ),
    ))
}

fn a2(runs: &SyntheticRuns) -> Outcome {
    let diffs: Vec<f64> = runs
        .pipelines
        .iter()
        .zip(&runs.plain_auc)
        .map(|(p, plain)| test_auc(p.report.stage(pipeline::RETRAIN).unwrap()) - plain)
        .collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Ok((
        mean >= -0.001,
        format!("mean AutoFM - FM test AUC {mean:+.5} over 5 seeds"),
    ))
}

fn a3(runs: &SyntheticRuns) -> Outcome {
    let cfg = config(SYNTHETIC, &["run.seed=1"]);
    let data = &runs.data[0];
    let run = &runs.pipelines[0];
    let searched = test_auc(run.report.stage(pipeline::RETRAIN).unwrap());
    let open = run.manifest.gates.open_count();
    let mut random = Vec::new();
    for draw in 0..10 {
        let gates = random_gates(run.manifest.gates.ids(), open, cfg.run.seed, draw)?;
        let (_, report) = retrain_with_gates(&cfg, data, &gates, pipeline::RANDOM_GATES)?;
        random.push(test_auc(&report));
    }
    let mean = random.iter().sum::<f64>() / random.len() as f64;
    Ok((
        searched > mean,
        format!("searched {searched:.4} vs mean of 10 random gate sets {mean:.4} ({open} open)"),
    ))
}

/// Minimizer of `(a - u)^2 / 2 + g |a|` by bisection on its monotone
/// right derivative.
fn prox_by_bisection(u: f64, g: f64) -> f64 {
    let right_derivative = |a: f64| if a >= 0.0 { a - u + g } else { a - u - g };
    let (mut lo, mut hi) = (-u.abs() - g - 1.0, u.abs() + g + 1.0);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if right_derivative(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if right_derivative(lo) > 0.0 || lo.abs() < 1e-300 {
        lo
    } else {
        hi
    }
}

fn a4() -> Outcome {
    let mut rng = indexed_substream(4, Stream::Data, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let cfg = GrdaConfig {
            lr: rng.random_range(1e-3..5.0),
            c: rng.random_range(0.0..0.1),
            mu: rng.random_range(0.5..1.0),
        };
        let a0: f64 = rng.random_range(-2.0..2.0);
        let acc: f64 = rng.random_range(-1.0..1.0);
        let grad: f64 = rng.random_range(-1.0..1.0);
        let t: u64 = rng.random_range(1..5000);
        let mut state = GrdaState {
            initial: vec![a0],
            accumulator: vec![acc],
            step: t - 1,
        };
        let mut alpha = [rng.random_range(-1.0..1.0)];
        grda_step(&mut alpha, &[grad], &mut state, &cfg)?;
        let u = a0 - cfg.lr * (acc + grad);
        let g = cfg.c * cfg.lr.sqrt() * (t as f64 * cfg.lr).powf(cfg.mu);
        worst = worst.max((alpha[0] - prox_by_bisection(u, g)).abs());
    }

    let cs = [0.0, 0.001, 0.003, 0.01, 0.03, 0.1];
    let mut monotone = 0;
    for trajectory in 0..100u64 {
        let mut rng = indexed_substream(4, Stream::Data, 1 + trajectory);
        let steps = 200;
        let dims = 12;
        let a0: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..dims).map(|_| rng.random_range(-0.05..0.05)).collect())
            .collect();
        let zeros: Vec<Vec<bool>> = cs
            .iter()
            .map(|&c| {
                let cfg = GrdaConfig { lr: 1.0, c, mu: 0.6 };
                let mut state = GrdaState::new(&a0);
                let mut alpha = a0.clone();
                for g in &grads {
                    grda_step(&mut alpha, g, &mut state, &cfg).unwrap();
                }
                alpha.iter().map(|&a| a == 0.0).collect()
            })
            .collect();
        let nested = zeros
            .windows(2)
            .all(|w| w[0].iter().zip(&w[1]).all(|(&lo, &hi)| !lo || hi));
        monotone += usize::from(nested);
    }
    let ok = worst <= 1e-10 && monotone == 100;
    Ok((
        ok,
        format!("max |closed form - bisection| {worst:.2e}; zero sets nested in c on {monotone}/100"),
    ))
}

fn a5() -> Outcome {
    let heads = [
        (Head::Fm, Vec::new()),
        (Head::Fm3, Vec::new()),
        (Head::DeepFm, vec![4, 1]),
        (Head::Ipnn, vec![4, 1]),
    ];
    let modes = [LayerMode::Plain, LayerMode::Search, LayerMode::Retrain];
    let data = toy_data(5, 12, true);
    let mut worst = (0.0, String::new());
    for (head, mlp) in &heads {
        for &mode in &modes {
            let cfg = ModelConfig {
                head: *head,
                embed_dim: 3,
                mlp_layers: mlp.clone(),
                pair_mode: mode,
                triple_mode: (*head == Head::Fm3).then_some(mode),
                mlp_bn: *head == Head::DeepFm,
                ..ModelConfig::default()
            };
            let closed: &[usize] = if mode == LayerMode::Retrain { &[1, 4] } else { &[] };
            let model = perturbed_model(&data, &cfg, closed, 6);
            let (err, at) = max_gradient_error(&model, &data, 1e-5);
            if err >= worst.0 {
                worst = (err, format!("{head:?}/{mode:?} {at}"));
            }
        }
    }
    Ok((
        worst.0 < 1e-4,
        format!(
            "12 head x mode combinations, max rel error {:.2e} at {}",
            worst.0, worst.1
        ),
    ))
}

fn a6() -> Outcome {
    let eps = BnConfig::default().epsilon;
    let mut rng = indexed_substream(6, Stream::Data, 0);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let cols = 5;
    for &rows in &[2usize, 16, 2000] {
        for _ in 0..20 {
            let scale: f64 = rng.random_range(0.01..10.0);
            let shift: f64 = rng.random_range(-5.0..5.0);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| shift + scale * rng.random_range(-1.0..1.0))
                .collect();
            let x = Matrix::from_vec(rows, cols, data)?;
            let columns: Vec<usize> = (0..cols).collect();
            let out = bn_normalize(&x, BnPhase::Train, &BnState::new(cols, BnConfig::default()), &columns)?;
            let raw = BatchStats::of(&x);
            let got = BatchStats::of(&out.normalized);
            for c in 0..cols {
                worst_mean = worst_mean.max(got.mean[c].abs());
                let expected = raw.var[c] / (raw.var[c] + eps);
                worst_var = worst_var.max((got.var[c] - expected).abs());
            }
        }
    }

    let (rows, h) = (7, 1e-6);
    let x = Matrix::from_vec(rows, 3, (0..rows * 3).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let w = Matrix::from_vec(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let state = BnState::new(3, BnConfig::default());
    let objective = |x: &Matrix| -> f64 {
        let y = bn_normalize(x, BnPhase::Train, &state, &[0, 1, 2]).unwrap().normalized;
        y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    };
    let out = bn_normalize(&x, BnPhase::Train, &state, &[0, 1, 2])?;
    let dx = bn_backward(&w, &out.normalized, out.stats.as_ref().unwrap(), eps);
    let mut worst_grad: f64 = 0.0;
    for k in 0..rows * 3 {
        let mut plus = x.clone();
        plus.as_mut_slice()[k] += h;
        let mut minus = x.clone();
        minus.as_mut_slice()[k] -= h;
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let analytic = dx.as_slice()[k];
        worst_grad = worst_grad.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
    }
    let ok = worst_mean < 1e-6 && worst_var <= 1e-4 && worst_grad < 1e-4;
    Ok((
        ok,
        format!("max |mean| {worst_mean:.1e}, max var error {worst_var:.1e}, backward rel error {worst_grad:.1e}"),
    ))
}

fn a7() -> Outcome {
    let mut rng = indexed_substream(7, Stream::Data, 0);
    let mut exact = 0;
    for set in 0..100 {
        let n = rng.random_range(2..=300);
        let levels = if set % 2 == 0 { 4 } else { 1000 };
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut doubled, mut pos, mut neg) = (0u128, 0u128, 0u128);
        for (i, &yi) in labels.iter().enumerate() {
            if yi == 1 {
                pos += 1;
                for (j, &yj) in labels.iter().enumerate() {
                    if yj == 0 {
                        doubled += match scores[i].total_cmp(&scores[j]) {
                            std::cmp::Ordering::Greater => 2,
                            std::cmp::Ordering::Equal => 1,
                            std::cmp::Ordering::Less => 0,
                        };
                    }
                }
            } else {
                neg += 1;
            }
        }
        let oracle = doubled as f64 / (2 * pos * neg) as f64;
        exact += usize::from(auc(&ScoredSet::new(scores, labels)?)? == oracle);
    }
    Ok((exact == 100, format!("{exact}/100 sets match pair counting exactly")))
}

fn a8() -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    for trial in 0..5u64 {
        let mut rho = [0.0; 2];
        for (slot, bn) in [true, false].into_iter().enumerate() {
            let magnitudes: Vec<Vec<f64>> = (0..2)
                .map(|k| {
                    let cfg = config(
                        SYNTHETIC,
                        &[
                            &format!("synthetic.data_seed={}", 1 + trial),
                            &format!("run.seed={}", 1000 + 2 * trial + k),
                            &format!("model.interaction_bn={bn}"),
                        ],
                    );
                    let data = prepare_data(&cfg).expect("synthetic data");
                    let out = search_stage(&cfg, &data).expect("search");
                    out.manifest.alpha.values().iter().map(|a| a.abs()).collect()
                })
                .collect();
            rho[slot] = pearson(&magnitudes[0], &magnitudes[1])?;
        }
        wins += usize::from(rho[0] > rho[1]);
        detail.push(format!("{:.2}/{:.2}", rho[0], rho[1]));
    }
    Ok((
        wins >= 4,
        format!(
            "BN more stable in {wins}/5 trials, |alpha| Pearson bn/no-bn [{}]",
            detail.join(" ")
        ),
    ))
}

fn a9() -> Outcome {
    let cfg = config(SMALL, &[]);
    let data = prepare_data(&cfg)?;
    let a = run_pipeline(&cfg, &data)?;
    let b = run_pipeline(&cfg, &data)?;
    let same_manifest = a.manifest.to_text() == b.manifest.to_text();
    let hash = cfg.hash();
    let same_model = pipeline::model_checkpoint(&a.model, &hash)?.to_bytes()?
        == pipeline::model_checkpoint(&b.model, &hash)?.to_bytes()?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("search-0001.ckpt");
    let full = search_with(&cfg, &data, None, &mut |t| {
        if t.cursor.epoch == 1 {
            t.to_checkpoint(&hash)?.save(&path)?;
        }
        Ok(())
    })?;
    let ckpt = Checkpoint::load(&path)?;
    let resumed = search_with(&cfg, &data, Some(&ckpt), &mut |_| Ok(()))?;
    let same_resume = full.manifest.to_text() == resumed.manifest.to_text() && full.model == resumed.model;
    Ok((
        same_manifest && same_model && same_resume,
        format!("repeat manifest {same_manifest}, repeat model {same_model}, resume {same_resume}"),
    ))
}

/// Copies every tensor `to` shares with `from` by name.
fn copy_tensors(from: &Model, to: &mut Model) {
    let source: Vec<(String, Vec<f64>)> = from.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    for (name, t) in to.tensors_mut() {
        if let Some((_, v)) = source.iter().find(|(n, v)| *n == name && v.len() == t.len()) {
            t.copy_from_slice(v);
        }
    }
}

fn max_logit_gap(a: &Model, b: &Model, data: &autofis::data::Dataset) -> f64 {
    let rows: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&rows);
    let mut worst: f64 = 0.0;
    for phase in [Phase::Train, Phase::Eval] {
        let x = a.forward(&batch, phase, Execution::Sequential).unwrap().logits;
        let y = b.forward(&batch, phase, Execution::Sequential).unwrap().logits;
        for (p, q) in x.iter().zip(&y) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

fn a10() -> Outcome {
    let data = toy_data(10, 16, true);
    let schema = data.schema();
    let m = schema.field_count();
    let mut gaps = Vec::new();

    for mode in [LayerMode::Plain, LayerMode::Search] {
        let fm_cfg = ModelConfig {
            embed_dim: 3,
            pair_mode: mode,
            ..ModelConfig::default()
        };
        let fm = perturbed_model(&data, &fm_cfg, &[], 11);
        let deep_cfg = ModelConfig {
            head: Head::DeepFm,
            mlp_layers: vec![5, 1],
            ..fm_cfg
        };
        let mut deep = perturbed_model(&data, &deep_cfg, &[], 12);
        copy_tensors(&fm, &mut deep);
        for (name, t) in deep.tensors_mut() {
            if name.starts_with("mlp.") {
                t.fill(0.0);
            }
        }
        gaps.push(max_logit_gap(&fm, &deep, &data));
    }

    for head in [Head::Fm, Head::DeepFm, Head::Ipnn] {
        let mlp = if head == Head::Fm { Vec::new() } else { vec![4, 1] };
        let plain_cfg = ModelConfig {
            head,
            embed_dim: 3,
            mlp_layers: mlp,
            interaction_bn: false,
            ..ModelConfig::default()
        };
        let plain = perturbed_model(&data, &plain_cfg, &[], 13);
        let retrain_cfg = ModelConfig {
            pair_mode: LayerMode::Retrain,
            ..plain_cfg.clone()
        };
        let mut retrain = perturbed_model(&data, &retrain_cfg, &[], 14);
        copy_tensors(&plain, &mut retrain);
        retrain.pairs.alpha.fill(1.0);
        gaps.push(max_logit_gap(&plain, &retrain, &data));
    }

    let cfg = RunConfig::default();
    let target = ModelConfig {
        head: Head::Ipnn,
        embed_dim: 3,
        mlp_layers: vec![6, 1],
        interaction_bn: false,
        ..ModelConfig::default()
    };
    let manifest = InteractionManifest::new(
        schema,
        ArchitectureParams::uniform(m, Coverage::Pair, 0.3),
        GateSet::all_open(m, Coverage::Pair),
        pipeline::SEARCH,
        1,
        &cfg.hash(),
    )?;
    let mut transferred = transfer_model(&cfg, &manifest, schema, &target)?;
    for (name, t) in transferred.tensors_mut() {
        if name != "alpha.pair" {
            for v in t.iter_mut() {
                *v += 0.1;
            }
        }
    }
    let mut ipnn = perturbed_model(&data, &target, &[], 15);
    copy_tensors(&transferred, &mut ipnn);
    gaps.push(max_logit_gap(&transferred, &ipnn, &data));

    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    Ok((
        worst <= 1e-12,
        format!("max logit gap {worst:.1e} over {} reductions", gaps.len()),
    ))
}

fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0u32..1 << m)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..m).filter(|i| mask >> i & 1 == 1).collect())
        .collect();
    out.sort();
    out
}

fn a11() -> Outcome {
    let mut counts_ok = true;
    for m in 0..=10 {
        for (order, k) in [(Order::Pair, 2), (Order::Triple, 3)] {
            let got: Vec<Vec<usize>> = enumerate_interactions(m, order)
                .iter()
                .map(|id| id.fields().collect())
                .collect();
            counts_ok &= got == subsets(m, k);
        }
    }

    let mut recovered = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let cfg = config(TRIPLES, &[&format!("run.seed={seed}")]);
        let data = prepare_data(&cfg)?;
        let pairs = search_stage(&cfg, &data)?;
        let out = third_order_pipeline(&cfg, &data, &pairs.manifest)?;
        let all = &out.manifest.alpha;
        let triple_ids: Vec<InteractionId> = all
            .ids()
            .iter()
            .copied()
            .filter(|id| id.order() == Order::Triple)
            .collect();
        let triple_alpha = all.of_order(Order::Triple);
        let mut top: Vec<InteractionId> = top_by_magnitude(&triple_alpha, 3)
            .into_iter()
            .map(|k| triple_ids[k])
            .collect();
        top.sort();
        let mut want = data.synthetic.as_ref().unwrap().planted_ids();
        want.sort();
        recovered += usize::from(top == want);
        detail.push(if top == want { "top3" } else { "miss" });
    }
    Ok((
        counts_ok && recovered >= 4,
        format!(
            "enumeration m<=10 {counts_ok}; planted triples top-3 in {recovered}/5 [{}]",
            detail.join(" ")
        ),
    ))
}

fn report(id: &str, outcome: Outcome, seconds: f64) -> bool {
    match outcome {
        Ok((ok, detail)) => {
            println!("{id} {} {detail} ({seconds:.1}s)", if ok { "PASS" } else { "FAIL" });
            ok
        }
        Err(e) => {
            println!("{id} FAIL error: {e} ({seconds:.1}s)");
            false
        }
    }
}

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let run = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut failed = Vec::new();
    let mut check = |id: &str, f: &mut dyn FnMut() -> Outcome| {
        if run(id) {
            let start = Instant::now();
            if !report(id, f(), start.elapsed().as_secs_f64()) {
                failed.push(id.to_string());
            }
        }
    };

    let runs = if ["A1", "A2", "A3"].iter().any(|id| run(id)) {
        let start = Instant::now();
        let runs = synthetic_runs();
        println!(
            "synthetic pipelines over 5 seeds: {:.1}s",
            start.elapsed().as_secs_f64()
        );
        Some(runs)
    } else {
        None
    };
    let shared = |f: fn(&SyntheticRuns) -> Outcome| -> Outcome {
        match runs.as_ref().expect("shared runs") {
            Ok(r) => f(r),
            Err(e) => Err(e.to_string().into()),
        }
    };
    check("A1", &mut || shared(a1));
    check("A2", &mut || shared(a2));
    check("A3", &mut || shared(a3));
    check("A4", &mut a4);
    check("A5", &mut a5);
    check("A6", &mut a6);
    check("A7", &mut a7);
    check("A8", &mut a8);
    check("A9", &mut a9);
    check("A10", &mut a10);
    check("A11", &mut a11);

    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(" "));
        ExitCode::FAILURE
    }
}
