//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use autofis::data::{Dataset, FieldSchema, Instance, Reduce};
use autofis::interaction::{ArchitectureParams, GateSet};
use autofis::network::{Model, ModelConfig};
use autofis::par::Execution;
use autofis::rng::{indexed_substream, Stream};
use rand::Rng;

/// Random instances over four fields, two of them multi-hot when `multi`.
pub fn toy_data(seed: u64, rows: usize, multi: bool) -> Dataset {
    let cards = vec![3, 4, 2, 5];
    let schema = if multi {
        FieldSchema::new(cards.clone(), vec![false, true, false, true], Reduce::Average).unwrap()
    } else {
        FieldSchema::one_hot(cards.clone()).unwrap()
    };
    let mut rng = indexed_substream(seed, Stream::Data, 99);
    let mut data = Dataset::new(schema.clone());
    for _ in 0..rows {
        let fields = (0..4)
            .map(|i| {
                let k = if schema.is_multi_hot(i) {
                    rng.random_range(1..=3)
                } else {
                    1
                };
                let mut v: Vec<u32> = (0..k).map(|_| rng.random_range(0..cards[i] as u32)).collect();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        data.push(&Instance::new(fields, rng.random_range(0..2)).unwrap())
            .unwrap();
    }
    data
}

/// A model with every trainable tensor moved off its initial value.
pub fn perturbed_model(data: &Dataset, config: &ModelConfig, closed: &[usize], seed: u64) -> Model {
    let m = data.schema().field_count();
    let open = GateSet::all_open(m, config.coverage());
    let mut flags = open.flags().to_vec();
    for &c in closed {
        flags[c] = false;
    }
    let gates = GateSet::new(open.ids().to_vec(), flags).unwrap();
    let alpha = ArchitectureParams::uniform(m, config.coverage(), 0.7);
    let mut rng = indexed_substream(seed, Stream::Init, 77);
    let mut model = Model::with_architecture(data.schema(), config, &alpha, &gates, &mut rng).unwrap();
    for (_, t) in model.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    model
}

/// Largest relative error between analytic gradients and central
/// differences of the batch loss at step `h`, with magnitudes floored at
/// `1e-6`.
pub fn max_gradient_error(model: &Model, data: &Dataset, h: f64) -> (f64, String) {
    let rows: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&rows);
    let loss = |m: &Model| m.loss_and_grad(&batch, Execution::Sequential).unwrap().0;
    let (_, grads, _) = model.loss_and_grad(&batch, Execution::Sequential).unwrap();
    let mut worst = (0.0, String::new());
    for (name, g) in grads.dense(model) {
        for k in 0..g.len() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                for (n, t) in m.tensors_mut() {
                    if n == name {
                        t[k] += delta;
                    }
                }
                loss(&m)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let diff = (numeric - g[k]).abs();
            let err = diff / numeric.abs().max(g[k].abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{name}[{k}]"));
            }
        }
    }
    worst
}

/// Ranks of `values` by decreasing magnitude.
pub fn top_by_magnitude(values: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    order.truncate(n);
    order
}
