//! Synthetic weakly labeled datasets with known instance-level truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Bag, Instance, Label, SwslDataset};
use crate::error::{Result, SwslError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub num_supervised_pos: usize,
    pub num_supervised_neg: usize,
    pub num_pos_bags: usize,
    pub num_neg_bags: usize,
    pub bag_size: usize,
    /// Fraction of each clean positive bag that is truly positive.
    pub witness_rate: f64,
    /// Fraction of positive bags that hold no true positive at all.
    pub bag_label_noise: f64,
    pub signal_noise_sd: f64,
    pub cluster_separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            dim: 8,
            num_supervised_pos: 25,
            num_supervised_neg: 25,
            num_pos_bags: 20,
            num_neg_bags: 20,
            bag_size: 10,
            witness_rate: 0.3,
            bag_label_noise: 0.0,
            signal_noise_sd: 1.0,
            cluster_separation: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SwslError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SwslError::parse(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SwslError::InvalidArgument(m));
        if self.dim == 0 {
            return fail("dim must be at least 1".into());
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return fail(format!(
                "witness_rate must lie in (0, 1], got {}",
                self.witness_rate
            ));
        }
        if !(0.0..1.0).contains(&self.bag_label_noise) {
            return fail(format!(
                "bag_label_noise must lie in [0, 1), got {}",
                self.bag_label_noise
            ));
        }
        if !(self.signal_noise_sd >= 0.0 && self.signal_noise_sd.is_finite()) {
            return fail("signal_noise_sd must be non-negative".into());
        }
        if !(self.cluster_separation >= 0.0 && self.cluster_separation.is_finite()) {
            return fail("cluster_separation must be non-negative".into());
        }
        if (self.num_pos_bags + self.num_neg_bags) > 0 && self.bag_size == 0 {
            return fail("bag_size must be at least 1 when bags are requested".into());
        }
        let total = self.num_supervised_pos
            + self.num_supervised_neg
            + (self.num_pos_bags + self.num_neg_bags) * self.bag_size;
        if total == 0 {
            return fail("configuration generates no instances".into());
        }
        Ok(())
    }

    /// True positives per clean positive bag.
    pub fn witnesses_per_bag(&self) -> usize {
        // The small offset keeps products like 0.3 * 10 from rounding up past 3.
        ((self.witness_rate * self.bag_size as f64 - 1e-9).ceil() as usize)
            .clamp(1, self.bag_size.max(1))
    }

    pub fn num_noisy_bags(&self) -> usize {
        (self.bag_label_noise * self.num_pos_bags as f64).round() as usize
    }
}

/// True label of every generated instance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub labels: BTreeMap<String, Label>,
}

impl GroundTruth {
    pub fn label(&self, id: &str) -> Option<Label> {
        self.labels.get(id).copied()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SwslError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SwslError::parse(path, e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| SwslError::io(path, e))
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    pos_mean: Vec<f64>,
}

impl Sampler {
    fn draw(&mut self, label: Label) -> Vec<f64> {
        let sign = label.value();
        let raw: Vec<f64> = self
            .pos_mean
            .iter()
            .map(|m| sign * m + self.noise.sample(&mut self.rng))
            .collect();
        let pos: Vec<f64> = raw.iter().map(|&z| softplus(z)).collect();
        let total: f64 = pos.iter().sum();
        pos.into_iter().map(|v| v / total).collect()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Draw a dataset and its instance truth.
///
/// Positives and negatives come from isotropic Gaussians whose means sit at
/// `±separation/2` along an alternating-sign direction, then pass through
/// softplus and L1 normalization so every feature vector is a histogram.
pub fn generate(config: &SynthConfig) -> Result<(SwslDataset, GroundTruth)> {
    config.validate()?;
    let d = config.dim;
    let scale = 0.5 * config.cluster_separation / (d as f64).sqrt();
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        noise: Normal::new(0.0, config.signal_noise_sd)
            .map_err(|e| SwslError::InvalidArgument(e.to_string()))?,
        pos_mean: (0..d)
            .map(|j| if j % 2 == 0 { scale } else { -scale })
            .collect(),
    };

    let mut instances = Vec::new();
    let mut bags = Vec::new();
    let mut truth = GroundTruth::default();

    let supervised = std::iter::repeat_n(Label::Positive, config.num_supervised_pos).chain(
        std::iter::repeat_n(Label::Negative, config.num_supervised_neg),
    );
    for (i, label) in supervised.enumerate() {
        let id = format!("s{i}");
        instances.push(Instance::new(id.clone(), sampler.draw(label), Some(label)));
        truth.labels.insert(id, label);
    }

    let mut order: Vec<usize> = (0..config.num_pos_bags).collect();
    order.shuffle(&mut sampler.rng);
    let noisy: Vec<bool> = {
        let mut flags = vec![false; config.num_pos_bags];
        for &t in order.iter().take(config.num_noisy_bags()) {
            flags[t] = true;
        }
        flags
    };
    let witnesses = config.witnesses_per_bag();
    for (t, &is_noisy) in noisy.iter().enumerate() {
        let mut labels = vec![Label::Negative; config.bag_size];
        if !is_noisy {
            labels[..witnesses].fill(Label::Positive);
            labels.shuffle(&mut sampler.rng);
        }
        let bag_id = format!("pb{t}");
        let mut members = Vec::with_capacity(config.bag_size);
        for (j, label) in labels.into_iter().enumerate() {
            let id = format!("{bag_id}_{j}");
            instances.push(Instance::new(id.clone(), sampler.draw(label), None));
            truth.labels.insert(id.clone(), label);
            members.push(id);
        }
        bags.push(Bag::new(bag_id, Label::Positive, members));
    }

    for t in 0..config.num_neg_bags {
        let bag_id = format!("nb{t}");
        let mut members = Vec::with_capacity(config.bag_size);
        for j in 0..config.bag_size {
            let id = format!("{bag_id}_{j}");
            instances.push(Instance::new(
                id.clone(),
                sampler.draw(Label::Negative),
                None,
            ));
            truth.labels.insert(id.clone(), Label::Negative);
            members.push(id);
        }
        bags.push(Bag::new(bag_id, Label::Negative, members));
    }

    Ok((SwslDataset::new(instances, bags)?, truth))
}
