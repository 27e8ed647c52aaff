//! Instances, bags, datasets and the canonical training layout.
//!
//! The training layout places every instance with a known label first
//! (supervised instances, then members of negative bags) and the members of
//! positive bags after them, grouped bag by bag. Indices are 0-based in
//! memory; [`BagRange::one_based`] gives the 1-based `(p_t, q_t)` pair used in
//! reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwslError};

/// A binary label in {-1, +1}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_sign(value: f64) -> Label {
        if value > 0.0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Label::Negative => -1.0,
            Label::Positive => 1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl TryFrom<i64> for Label {
    type Error = String;

    fn try_from(v: i64) -> std::result::Result<Self, Self::Error> {
        match v {
            -1 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be -1 or 1, got {other}")),
        }
    }
}

impl From<Label> for i64 {
    fn from(l: Label) -> i64 {
        match l {
            Label::Negative => -1,
            Label::Positive => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub features: Vec<f64>,
    #[serde(default)]
    pub label: Option<Label>,
}

impl Instance {
    pub fn new(id: impl Into<String>, features: Vec<f64>, label: Option<Label>) -> Self {
        Instance {
            id: id.into(),
            features,
            label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bag {
    pub id: String,
    pub label: Label,
    /// Member instance ids, in recording order.
    pub instances: Vec<String>,
}

impl Bag {
    pub fn new(id: impl Into<String>, label: Label, instances: Vec<String>) -> Self {
        Bag {
            id: id.into(),
            label,
            instances,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    instances: Vec<Instance>,
    #[serde(default)]
    bags: Vec<Bag>,
}

/// A validated collection of instances and bags.
///
/// Labeled instances that no bag references form the supervised set. All
/// feature vectors share one dimensionality, every bag member resolves to a
/// stored instance, and no instance belongs to more than one bag.
#[derive(Clone, Debug)]
pub struct SwslDataset {
    instances: Vec<Instance>,
    bags: Vec<Bag>,
    by_id: HashMap<String, usize>,
    supervised: Vec<usize>,
}

impl PartialEq for SwslDataset {
    fn eq(&self, other: &Self) -> bool {
        self.instances == other.instances && self.bags == other.bags
    }
}

impl SwslDataset {
    pub fn new(instances: Vec<Instance>, bags: Vec<Bag>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(instances.len());
        let mut dim = None;
        for (i, inst) in instances.iter().enumerate() {
            if by_id.insert(inst.id.clone(), i).is_some() {
                return Err(SwslError::InvalidData(format!(
                    "duplicate instance id `{}`",
                    inst.id
                )));
            }
            if inst.features.is_empty() {
                return Err(SwslError::InvalidData(format!(
                    "instance `{}` has an empty feature vector",
                    inst.id
                )));
            }
            if let Some(j) = inst.features.iter().position(|v| !v.is_finite()) {
                return Err(SwslError::InvalidData(format!(
                    "instance `{}` has a non-finite feature at position {j}",
                    inst.id
                )));
            }
            match dim {
                None => dim = Some(inst.features.len()),
                Some(d) if d != inst.features.len() => {
                    return Err(SwslError::dim_in(
                        d,
                        inst.features.len(),
                        format!("instance `{}`", inst.id),
                    ))
                }
                _ => {}
            }
        }

        let mut owner: HashMap<&str, &str> = HashMap::new();
        let mut bag_ids = HashSet::new();
        for bag in &bags {
            if !bag_ids.insert(bag.id.as_str()) {
                return Err(SwslError::InvalidData(format!(
                    "duplicate bag id `{}`",
                    bag.id
                )));
            }
            if bag.instances.is_empty() {
                return Err(SwslError::InvalidData(format!("bag `{}` is empty", bag.id)));
            }
            for member in &bag.instances {
                let Some(&idx) = by_id.get(member) else {
                    return Err(SwslError::InvalidData(format!(
                        "bag `{}` references missing instance id `{member}`",
                        bag.id
                    )));
                };
                if let Some(prev) = owner.insert(member.as_str(), bag.id.as_str()) {
                    return Err(SwslError::InvalidData(format!(
                        "instance `{member}` appears in bag `{prev}` and bag `{}`",
                        bag.id
                    )));
                }
                match (bag.label, instances[idx].label) {
                    (Label::Positive, Some(_)) => {
                        return Err(SwslError::InvalidData(format!(
                            "instance `{member}` carries a label but belongs to positive bag `{}`",
                            bag.id
                        )))
                    }
                    (Label::Negative, Some(Label::Positive)) => {
                        return Err(SwslError::InvalidData(format!(
                            "instance `{member}` is labeled +1 but belongs to negative bag `{}`",
                            bag.id
                        )))
                    }
                    _ => {}
                }
            }
        }

        let mut supervised = Vec::new();
        for (i, inst) in instances.iter().enumerate() {
            if owner.contains_key(inst.id.as_str()) {
                continue;
            }
            if inst.label.is_none() {
                return Err(SwslError::InvalidData(format!(
                    "instance `{}` has no label and belongs to no bag",
                    inst.id
                )));
            }
            supervised.push(i);
        }

        Ok(SwslDataset {
            instances,
            bags,
            by_id,
            supervised,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn instance(&self, id: &str) -> Option<&Instance> {
        self.by_id.get(id).map(|&i| &self.instances[i])
    }

    /// Supervised instances in file order.
    pub fn supervised(&self) -> impl Iterator<Item = &Instance> + '_ {
        self.supervised.iter().map(move |&i| &self.instances[i])
    }

    pub fn num_supervised(&self) -> usize {
        self.supervised.len()
    }

    pub fn positive_bags(&self) -> impl Iterator<Item = &Bag> + '_ {
        self.bags.iter().filter(|b| b.label.is_positive())
    }

    pub fn negative_bags(&self) -> impl Iterator<Item = &Bag> + '_ {
        self.bags.iter().filter(|b| !b.label.is_positive())
    }

    /// Feature vectors of a bag's members, in bag order.
    pub fn bag_features(&self, bag: &Bag) -> Vec<&[f64]> {
        bag.instances
            .iter()
            .map(|id| self.instances[self.by_id[id]].features.as_slice())
            .collect()
    }

    /// Feature dimensionality, or `None` for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.instances.first().map(|i| i.features.len())
    }

    /// Keep the supervised instances and bags whose ids satisfy `keep`.
    /// Instances that are neither supervised nor members of a kept bag are dropped.
    pub fn filter_items(&self, mut keep: impl FnMut(&str) -> bool) -> SwslDataset {
        let kept_sup: HashSet<usize> = self
            .supervised
            .iter()
            .copied()
            .filter(|&i| keep(&self.instances[i].id))
            .collect();
        let bags: Vec<Bag> = self.bags.iter().filter(|b| keep(&b.id)).cloned().collect();
        let members: HashSet<&str> = bags
            .iter()
            .flat_map(|b| b.instances.iter().map(String::as_str))
            .collect();
        let instances: Vec<Instance> = self
            .instances
            .iter()
            .enumerate()
            .filter(|(i, inst)| kept_sup.contains(i) || members.contains(inst.id.as_str()))
            .map(|(_, inst)| inst.clone())
            .collect();
        SwslDataset::new(instances, bags).expect("a filtered valid dataset stays valid")
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SwslError::parse(origin, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| SwslError::parse(origin, "top level must be an object"))?;
        for key in obj.keys() {
            if key != "instances" && key != "bags" {
                return Err(SwslError::parse(origin, format!("unknown field `{key}`")));
            }
        }
        let instances = parse_records::<Instance>(obj.get("instances"), "instances", origin, true)?;
        let bags = parse_records::<Bag>(obj.get("bags"), "bags", origin, false)?;
        SwslDataset::new(instances, bags).map_err(|e| match e {
            SwslError::InvalidData(msg) => SwslError::parse(origin, msg),
            other => other,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SwslError::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    pub fn to_json_string(&self) -> String {
        let file = DatasetFile {
            instances: self.instances.clone(),
            bags: self.bags.clone(),
        };
        serde_json::to_string_pretty(&file).expect("dataset serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| SwslError::io(path, e))
    }
}

fn parse_records<T: serde::de::DeserializeOwned>(
    value: Option<&serde_json::Value>,
    field: &str,
    origin: &Path,
    required: bool,
) -> Result<Vec<T>> {
    let arr = match value {
        None if required => {
            return Err(SwslError::parse(origin, format!("missing field `{field}`")))
        }
        None => return Ok(Vec::new()),
        Some(v) => v
            .as_array()
            .ok_or_else(|| SwslError::parse(origin, format!("`{field}` must be an array")))?,
    };
    arr.iter()
        .enumerate()
        .map(|(i, rec)| {
            T::deserialize(rec).map_err(|e| SwslError::parse(origin, format!("{field}[{i}]: {e}")))
        })
        .collect()
}

/// Inclusive 0-based index range of one positive bag in the training layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagRange {
    pub start: usize,
    pub end: usize,
}

impl BagRange {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    /// The `(p_t, q_t)` pair with 1-based indices.
    pub fn one_based(&self) -> (usize, usize) {
        (self.start + 1, self.end + 1)
    }
}

/// Where a training-layout position came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub instance_id: String,
    pub bag_id: Option<String>,
}

/// The merged training set in canonical order.
///
/// Positions `0..n` hold labeled instances, positions `n..N` hold the members
/// of positive bags, and `bag_ranges` tiles `n..N` contiguously in bag order.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedDataset {
    pub features: Vec<Vec<f64>>,
    /// Labels of the first `n` positions.
    pub labels: Vec<Label>,
    pub bag_ranges: Vec<BagRange>,
    pub provenance: Vec<Provenance>,
}

impl IndexedDataset {
    /// Number of labeled positions.
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Number of positive-bag positions.
    pub fn m(&self) -> usize {
        self.features.len() - self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn num_bags(&self) -> usize {
        self.bag_ranges.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.features.first().map(Vec::len)
    }
}

/// Lay a dataset out for training: supervised instances (file order), then
/// negative-bag members labeled -1 (bag order, then member order), then the
/// positive bags, each as one contiguous block.
pub fn assemble_training_set(dataset: &SwslDataset) -> Result<IndexedDataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    let dim = dataset.dim();

    let push = |features: &mut Vec<Vec<f64>>,
                provenance: &mut Vec<Provenance>,
                inst: &Instance,
                bag: Option<&Bag>|
     -> Result<()> {
        if Some(inst.features.len()) != dim {
            return Err(SwslError::dim_in(
                dim.unwrap_or(0),
                inst.features.len(),
                format!("instance `{}`", inst.id),
            ));
        }
        features.push(inst.features.clone());
        provenance.push(Provenance {
            instance_id: inst.id.clone(),
            bag_id: bag.map(|b| b.id.clone()),
        });
        Ok(())
    };

    for inst in dataset.supervised() {
        push(&mut features, &mut provenance, inst, None)?;
        labels.push(inst.label.expect("supervised instances are labeled"));
    }
    for bag in dataset.negative_bags() {
        for id in &bag.instances {
            push(
                &mut features,
                &mut provenance,
                dataset.instance(id).expect("validated reference"),
                Some(bag),
            )?;
            labels.push(Label::Negative);
        }
    }
    let mut bag_ranges = Vec::new();
    for bag in dataset.positive_bags() {
        if bag.instances.is_empty() {
            return Err(SwslError::InvalidData(format!(
                "positive bag `{}` is empty",
                bag.id
            )));
        }
        let start = provenance.len();
        for id in &bag.instances {
            push(
                &mut features,
                &mut provenance,
                dataset.instance(id).expect("validated reference"),
                Some(bag),
            )?;
        }
        bag_ranges.push(BagRange {
            start,
            end: provenance.len() - 1,
        });
    }

    Ok(IndexedDataset {
        features,
        labels,
        bag_ranges,
        provenance,
    })
}

/// Fold assignment of supervised instances and bags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub assignments: BTreeMap<String, usize>,
    pub num_folds: usize,
}

impl FoldSpec {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(training part, held-out part)` for one fold.
    pub fn split(&self, dataset: &SwslDataset, fold: usize) -> (SwslDataset, SwslDataset) {
        let train = dataset.filter_items(|id| self.fold_of(id) != Some(fold));
        let test = dataset.filter_items(|id| self.fold_of(id) == Some(fold));
        (train, test)
    }
}

/// Assign supervised instances and whole bags to folds.
///
/// Positive and negative items are shuffled separately and dealt round-robin
/// (positives first), so fold sizes differ by at most one and positives are
/// spread across folds.
pub fn make_folds(dataset: &SwslDataset, num_folds: usize, seed: u64) -> Result<FoldSpec> {
    if num_folds < 2 {
        return Err(SwslError::InvalidArgument(format!(
            "need at least 2 folds, got {num_folds}"
        )));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for inst in dataset.supervised() {
        if inst.label == Some(Label::Positive) {
            positives.push(inst.id.clone());
        } else {
            negatives.push(inst.id.clone());
        }
    }
    for bag in dataset.bags() {
        if bag.label.is_positive() {
            positives.push(bag.id.clone());
        } else {
            negatives.push(bag.id.clone());
        }
    }
    let total = positives.len() + negatives.len();
    if total < num_folds {
        return Err(SwslError::InvalidArgument(format!(
            "{total} items cannot fill {num_folds} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let assignments = positives
        .into_iter()
        .chain(negatives)
        .enumerate()
        .map(|(k, id)| (id, k % num_folds))
        .collect();
    Ok(FoldSpec {
        assignments,
        num_folds,
    })
}
