//! Poly-2 style synthetic data with a planted set of interactions.
//!
//! Each instance draws one category per field from that field's
//! distribution. The score is
//! `z = b + sum_i w_i[x_i] + sum_{c in C} v_c[x_c] + noise` with every weight
//! a table lookup keyed by the sampled categories, and the label is
//! `z >= threshold`.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FieldSchema, InteractionId, Order};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Weights of one planted interaction, row-major over its categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedTerm {
    pub id: InteractionId,
    pub weights: Vec<f64>,
}

/// Every sampled parameter of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub fields: usize,
    pub categories: usize,
    pub seed: u64,
    pub bias: f64,
    pub noise_sigma: f64,
    pub threshold: f64,
    /// Category distribution of each field.
    pub distributions: Vec<Vec<f64>>,
    /// Linear weight of each (field, category).
    pub linear: Vec<Vec<f64>>,
    pub planted: Vec<PlantedTerm>,
}

/// Knobs for sampling a [`SyntheticSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticOptions {
    pub fields: usize,
    pub categories: usize,
    pub planted: Vec<InteractionId>,
    /// Noise standard deviation as a multiple of the std of the noiseless
    /// score.
    pub noise_scale: f64,
    /// Draws used to calibrate the noise scale and the threshold.
    pub calibration_samples: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            fields: 6,
            categories: 60,
            planted: ["0,1", "2,5", "3,4"].map(|s| s.parse().expect("valid id")).to_vec(),
            noise_scale: 0.01,
            calibration_samples: 100_000,
        }
    }
}

impl SyntheticOptions {
    /// Three planted triples instead of pairs, over fewer categories so
    /// every cell of a trilinear table is observed.
    pub fn planted_triples() -> Self {
        Self {
            categories: 10,
            planted: ["0,1,2", "1,3,4", "2,4,5"]
                .map(|s| s.parse().expect("valid id"))
                .to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields < 2 || self.categories < 1 {
            return Err(Error::Config(
                "synthetic data needs >= 2 fields and >= 1 category".into(),
            ));
        }
        if self.planted.iter().any(|id| id.max_field() >= self.fields) {
            return Err(Error::Config("planted interaction references a missing field".into()));
        }
        let mut ids = self.planted.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != self.planted.len() {
            return Err(Error::Config("planted interactions repeat".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        if self.calibration_samples == 0 {
            return Err(Error::Config("calibration_samples must be positive".into()));
        }
        Ok(())
    }
}

fn table_len(categories: usize, order: Order) -> usize {
    categories.pow(order.arity() as u32)
}

fn dirichlet_one<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl SyntheticSpec {
    /// Samples distributions and weights, then calibrates the noise and
    /// threshold on presampled noiseless scores.
    pub fn sample(options: &SyntheticOptions, seed: u64) -> Result<Self> {
        options.validate()?;
        let (m, n) = (options.fields, options.categories);
        let mut rng = substream(seed, Stream::SyntheticParams);
        let distributions: Vec<Vec<f64>> = (0..m).map(|_| dirichlet_one(n, &mut rng)).collect();
        let linear: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let planted = options
            .planted
            .iter()
            .map(|&id| PlantedTerm {
                id,
                weights: (0..table_len(n, id.order()))
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect(),
            })
            .collect();
        let bias = StandardNormal.sample(&mut rng);
        let mut spec = Self {
            fields: m,
            categories: n,
            seed,
            bias,
            noise_sigma: 0.0,
            threshold: 0.0,
            distributions,
            linear,
            planted,
        };
        let samplers = spec.samplers()?;
        let mut cal = substream(seed, Stream::Calibration);
        let mut x = vec![0usize; m];
        let mut scores: Vec<f64> = (0..options.calibration_samples)
            .map(|_| {
                spec.draw(&samplers, &mut cal, &mut x);
                spec.score(&x)
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / scores.len() as f64;
        spec.noise_sigma = options.noise_scale * var.sqrt();
        spec.threshold = median(&mut scores);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.fields, self.categories);
        if m < 2 || n < 1 {
            return Err(Error::Config(
                "synthetic data needs >= 2 fields and >= 1 category".into(),
            ));
        }
        if self.distributions.len() != m || self.linear.len() != m {
            return Err(Error::Config("per-field tables must cover every field".into()));
        }
        for (i, p) in self.distributions.iter().enumerate() {
            if p.len() != n || p.iter().any(|&q| !(q >= 0.0)) {
                return Err(Error::Config(format!("field {i} distribution is malformed")));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("field {i} distribution sums to {total}")));
            }
        }
        if self.linear.iter().any(|w| w.len() != n) {
            return Err(Error::Config("linear weights must have one entry per category".into()));
        }
        for t in &self.planted {
            if t.id.max_field() >= m {
                return Err(Error::Config(format!("planted {} references a missing field", t.id)));
            }
            if t.weights.len() != table_len(n, t.id.order()) {
                return Err(Error::Config(format!("planted {} has the wrong table size", t.id)));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> FieldSchema {
        FieldSchema::one_hot(vec![self.categories; self.fields]).expect("validated spec")
    }

    pub fn planted_ids(&self) -> Vec<InteractionId> {
        self.planted.iter().map(|t| t.id).collect()
    }

    fn samplers(&self) -> Result<Vec<WeightedIndex<f64>>> {
        self.distributions
            .iter()
            .map(|p| WeightedIndex::new(p).map_err(|e| Error::Config(format!("bad distribution: {e}"))))
            .collect()
    }

    fn draw<R: Rng + ?Sized>(&self, samplers: &[WeightedIndex<f64>], rng: &mut R, x: &mut [usize]) {
        for (xi, s) in x.iter_mut().zip(samplers) {
            *xi = s.sample(rng);
        }
    }

    /// The noiseless score of the categories `x`.
    pub fn score(&self, x: &[usize]) -> f64 {
        let mut z = self.bias;
        for (w, &xi) in self.linear.iter().zip(x) {
            z += w[xi];
        }
        for t in &self.planted {
            let mut cell = 0;
            for f in t.id.fields() {
                cell = cell * self.categories + x[f];
            }
            z += t.weights[cell];
        }
        z
    }

    pub fn to_toml(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(format!("# autofis synthetic spec v1\n{body}"))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::persistence::write_atomic(path, self.to_toml()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Draws `n_train` then `n_test` i.i.d. instances from the `Data` stream of
/// the spec's seed.
pub fn generate_synthetic(spec: &SyntheticSpec, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let samplers = spec.samplers()?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = substream(spec.seed, Stream::Data);
    let schema = spec.schema();
    let mut x = vec![0usize; spec.fields];
    let mut idx = vec![0u32; spec.fields];
    let mut make = |count: usize| -> Result<Dataset> {
        let mut data = Dataset::new(schema.clone());
        for _ in 0..count {
            spec.draw(&samplers, &mut rng, &mut x);
            let eps = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let label = u8::from(spec.score(&x) + eps >= spec.threshold);
            for (o, &v) in idx.iter_mut().zip(&x) {
                *o = v as u32;
            }
            data.push_one_hot(&idx, label)?;
        }
        Ok(data)
    };
    let train = make(n_train)?;
    let test = make(n_test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_options() -> SyntheticOptions {
        SyntheticOptions {
            categories: 10,
            calibration_samples: 20_000,
            ..SyntheticOptions::default()
        }
    }

    #[test]
    fn default_layout() {
        let o = SyntheticOptions::default();
        assert_eq!((o.fields, o.categories), (6, 60));
        let ids: Vec<String> = o.planted.iter().map(ToString::to_string).collect();
        assert_eq!(ids, ["0,1", "2,5", "3,4"]);
    }

    #[test]
    fn constant_score_labels_everything_positive() {
        let mut spec = SyntheticSpec::sample(&small_options(), 1).unwrap();
        spec.linear.iter_mut().flatten().for_each(|w| *w = 0.0);
        spec.planted.iter_mut().for_each(|t| t.weights.fill(0.0));
        spec.bias = 1.0;
        spec.noise_sigma = 0.0;
        spec.threshold = 0.0;
        let (train, test) = generate_synthetic(&spec, 100, 50).unwrap();
        assert_eq!(train.positives(), 100);
        assert_eq!(test.positives(), 50);
    }

    #[test]
    fn median_threshold_balances_labels() {
        let spec = SyntheticSpec::sample(&SyntheticOptions::default(), 4).unwrap();
        let (train, _) = generate_synthetic(&spec, 20_000, 0).unwrap();
        let ratio = train.positives() as f64 / train.len() as f64;
        assert!((ratio - 0.5).abs() <= 0.02, "{ratio}");
    }

    #[test]
    fn distributions_sum_to_one() {
        let spec = SyntheticSpec::sample(&small_options(), 2).unwrap();
        for p in &spec.distributions {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(spec.noise_sigma > 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::sample(&small_options(), 9).unwrap();
        let (a, _) = generate_synthetic(&spec, 500, 0).unwrap();
        let (b, _) = generate_synthetic(&SyntheticSpec::sample(&small_options(), 9).unwrap(), 500, 0).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert!((0..500).all(|r| a.get(r).to_owned() == b.get(r).to_owned()));
    }

    #[test]
    fn spec_round_trips_through_text() {
        let spec = SyntheticSpec::sample(&SyntheticOptions::planted_triples(), 3).unwrap();
        let back = SyntheticSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn score_uses_table_lookups() {
        let mut spec = SyntheticSpec::sample(&small_options(), 5).unwrap();
        spec.bias = 0.5;
        let x = [1, 2, 3, 4, 5, 6];
        let mut expect = 0.5;
        for (i, &xi) in x.iter().enumerate() {
            expect += spec.linear[i][xi];
        }
        expect += spec.planted[0].weights[x[0] * 10 + x[1]];
        expect += spec.planted[1].weights[x[2] * 10 + x[5]];
        expect += spec.planted[2].weights[x[3] * 10 + x[4]];
        assert_eq!(spec.score(&x), expect);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSpec::sample(&small_options(), 6).unwrap();
        spec.distributions[0][0] += 0.1;
        assert!(spec.validate().is_err());
        let bad = SyntheticOptions {
            planted: vec!["0,9".parse().unwrap()],
            ..small_options()
        };
        assert!(bad.validate().is_err());
    }
}
