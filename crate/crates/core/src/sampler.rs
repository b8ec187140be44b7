//! Annotation-subset samplers (cluster-balanced EDS and the uniform random
//! baseline) and scenario-imbalance diagnostics.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::manifest::{self, DatasetManifest, ScenarioAxis, Split, SubsetHeader};

/// Where a sampled id came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Cluster(usize),
    Random,
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Provenance::Cluster(c) => s.serialize_u64(*c as u64),
            Provenance::Random => s.serialize_str("random"),
        }
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|c| Provenance::Cluster(c as usize))
                .ok_or_else(|| serde::de::Error::custom("cluster index must be a non-negative integer")),
            serde_json::Value::String(s) if s == "random" => Ok(Provenance::Random),
            other => Err(serde::de::Error::custom(format!("bad provenance {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Eds,
    Random,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Eds => "eds",
            SamplerKind::Random => "random",
        })
    }
}

/// Which records a sampler may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplePool {
    Labeled,
    Unlabeled,
    /// labeled-train and unlabeled together
    Train,
    All,
}

impl SamplePool {
    pub fn contains(self, split: Split) -> bool {
        match self {
            SamplePool::Labeled => split == Split::LabeledTrain,
            SamplePool::Unlabeled => split == Split::Unlabeled,
            SamplePool::Train => matches!(split, Split::LabeledTrain | Split::Unlabeled),
            SamplePool::All => true,
        }
    }

    /// Pool ids, sorted.
    pub fn ids(self, m: &DatasetManifest) -> Vec<&str> {
        let mut ids: Vec<&str> = m
            .records()
            .iter()
            .filter(|r| self.contains(r.split))
            .map(|r| r.id.as_str())
            .collect();
        ids.sort_unstable();
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledSubset {
    pub ids: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub seed: u64,
    pub target_size: usize,
    pub method: SamplerKind,
}

impl SampledSubset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn truncated(mut self, budget: usize) -> Self {
        self.ids.truncate(budget);
        self.provenance.truncate(budget);
        self.target_size = self.target_size.min(budget);
        self
    }

    /// Per-cluster pick counts (EDS subsets only).
    pub fn cluster_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for p in &self.provenance {
            if let Provenance::Cluster(c) = p {
                counts[*c] += 1;
            }
        }
        counts
    }
}

/// Draws `min(n, |C_i|)` ids uniformly without replacement from every
/// cluster, then refills the shortfall one id at a time from the cluster with
/// the most remaining members (ties to the lowest index) until `n * k` ids are
/// picked or the clusters are exhausted.
///
/// Output order is round-major: the first pick of every cluster, then the
/// second, and so on, followed by refills. Truncating the list therefore
/// keeps the per-cluster balance.
pub fn eds_sample(model: &ClusterModel, n: usize, seed: u64) -> Result<SampledSubset> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = model.members();
    for m in members.iter_mut() {
        m.shuffle(&mut rng);
    }
    let k = model.k();
    let total: usize = members.iter().map(Vec::len).sum();
    let target = n.saturating_mul(k).min(total);

    let mut ids = Vec::with_capacity(target);
    let mut provenance = Vec::with_capacity(target);
    let mut taken = vec![0usize; k];
    let deepest = members.iter().map(Vec::len).max().unwrap_or(0);
    for round in 0..n.min(deepest) {
        for (c, m) in members.iter().enumerate() {
            if round < m.len() {
                ids.push(m[round].to_string());
                provenance.push(Provenance::Cluster(c));
                taken[c] += 1;
            }
        }
    }
    while ids.len() < target {
        let (c, _) = members
            .iter()
            .enumerate()
            .map(|(c, m)| (c, m.len() - taken[c]))
            .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
        ids.push(members[c][taken[c]].to_string());
        provenance.push(Provenance::Cluster(c));
        taken[c] += 1;
    }
    Ok(SampledSubset {
        ids,
        provenance,
        seed,
        target_size: n.saturating_mul(k),
        method: SamplerKind::Eds,
    })
}

/// EDS sized to an arbitrary budget: draws with `n = ceil(budget / k)` and
/// keeps the first `budget` ids.
pub fn eds_sample_budget(model: &ClusterModel, budget: usize, seed: u64) -> Result<SampledSubset> {
    let n = budget.div_ceil(model.k()).max(1);
    let mut s = eds_sample(model, n, seed)?.truncated(budget);
    s.target_size = budget;
    Ok(s)
}

/// Uniform sample without replacement over an explicit, sorted id pool.
pub fn random_sample_ids(pool: &[&str], size: usize, seed: u64) -> Result<SampledSubset> {
    if size > pool.len() {
        return Err(Error::PoolTooSmall {
            requested: size,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), size);
    let ids: Vec<String> = picks.iter().map(|i| pool[i].to_string()).collect();
    Ok(SampledSubset {
        provenance: vec![Provenance::Random; ids.len()],
        ids,
        seed,
        target_size: size,
        method: SamplerKind::Random,
    })
}

pub fn random_sample(
    m: &DatasetManifest,
    pool: SamplePool,
    size: usize,
    seed: u64,
) -> Result<SampledSubset> {
    random_sample_ids(&pool.ids(m), size, seed)
}

/// Normalized frequency of each value of one scenario axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDensity {
    pub axis: ScenarioAxis,
    /// `(value, probability)` over the support, in enum order.
    pub density: Vec<(String, f64)>,
}

impl ScenarioDensity {
    pub fn get(&self, value: &str) -> Option<f64> {
        self.density.iter().find(|(v, _)| v == value).map(|(_, p)| *p)
    }
}

/// Density of `axis` among the subset records. The support is every value of
/// that axis present in the full manifest, so values missing from the subset
/// get zero mass.
pub fn density_estimate(
    ids: &[String],
    m: &DatasetManifest,
    axis: ScenarioAxis,
) -> Result<ScenarioDensity> {
    let support = m.axis_support(axis);
    let mut counts = vec![0usize; support.len()];
    for id in ids {
        let v = m.require(id)?.scenario.value(axis);
        let slot = support.iter().position(|s| *s == v).expect("support covers manifest");
        counts[slot] += 1;
    }
    let total = ids.len();
    let density = support
        .iter()
        .zip(&counts)
        .map(|(v, &c)| {
            let p = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            (v.to_string(), p)
        })
        .collect();
    Ok(ScenarioDensity { axis, density })
}

/// `KL(p || u) = sum p ln(p / u)` with `u` uniform over the density's support
/// and `0 ln 0 = 0`.
pub fn kl_to_uniform(d: &ScenarioDensity) -> f64 {
    kl_to_uniform_probs(&d.density.iter().map(|(_, p)| *p).collect::<Vec<_>>())
}

pub fn kl_to_uniform_probs(probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let u = 1.0 / probs.len() as f64;
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p / u).ln())
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisDiagnostic {
    pub density: ScenarioDensity,
    pub kl_to_uniform: f64,
}

/// Densities and KL for every scenario axis.
pub fn diagnose(ids: &[String], m: &DatasetManifest) -> Result<Vec<AxisDiagnostic>> {
    ScenarioAxis::ALL
        .iter()
        .map(|&axis| {
            let density = density_estimate(ids, m, axis)?;
            Ok(AxisDiagnostic {
                kl_to_uniform: kl_to_uniform(&density),
                density,
            })
        })
        .collect()
}

/// Writes the subset as a manifest fragment with a provenance column.
pub fn write_subset(subset: &SampledSubset, m: &DatasetManifest, path: &Path) -> Result<()> {
    let records = subset
        .ids
        .iter()
        .map(|id| m.require(id))
        .collect::<Result<Vec<_>>>()?;
    let header = SubsetHeader {
        method: subset.method.to_string(),
        seed: subset.seed,
        target_size: subset.target_size,
    };
    let text = manifest::render_lines(
        m.class_names(),
        Some(&header),
        records.into_iter().zip(subset.provenance.iter().map(|&p| Some(p))),
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a subset file back into the subset and its manifest fragment.
pub fn read_subset(path: &Path) -> Result<(SampledSubset, DatasetManifest)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = manifest::parse_lines(&text)?;
    let header = parsed.subset.ok_or(Error::Parse {
        line: 1,
        message: "not a subset file: header has no subset section".into(),
    })?;
    let method = match header.method.as_str() {
        "eds" => SamplerKind::Eds,
        "random" => SamplerKind::Random,
        other => {
            return Err(Error::InvalidEnum {
                field: "method",
                value: other.to_string(),
            })
        }
    };
    let mut ids = Vec::new();
    let mut provenance = Vec::new();
    let mut records = Vec::new();
    for (r, p) in parsed.records {
        ids.push(r.id.clone());
        provenance.push(p.ok_or_else(|| Error::InvalidRecord {
            id: r.id.clone(),
            message: "missing provenance".into(),
        })?);
        records.push(r);
    }
    let fragment = DatasetManifest::new(parsed.classes, records)?;
    Ok((
        SampledSubset {
            ids,
            provenance,
            seed: header.seed,
            target_size: header.target_size,
            method,
        },
        fragment,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{default_class_names, ImageRecord, RoadType, ScenarioTag, TimeOfDay, Weather};
    use proptest::prelude::*;
    use std::collections::{BTreeMap, HashSet};

    pub(crate) fn model_with_sizes(sizes: &[usize]) -> ClusterModel {
        let mut assignments = BTreeMap::new();
        for (c, &s) in sizes.iter().enumerate() {
            for j in 0..s {
                assignments.insert(format!("c{c:03}-{j:04}"), c);
            }
        }
        ClusterModel::from_parts(vec![vec![0.0]; sizes.len()], assignments, 0.0).unwrap()
    }

    fn manifest_with(weathers: &[Weather]) -> DatasetManifest {
        let records = weathers
            .iter()
            .enumerate()
            .map(|(i, &w)| ImageRecord {
                id: format!("r{i}"),
                image_path: format!("{i}.ppm").into(),
                label_path: None,
                scenario: ScenarioTag::new(w, TimeOfDay::Day, RoadType::Rural),
                split: Split::Unlabeled,
            })
            .collect();
        DatasetManifest::new(default_class_names(), records).unwrap()
    }

    #[test]
    fn eds_two_per_cluster() {
        let s = eds_sample(&model_with_sizes(&[5, 5]), 2, 1).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.cluster_counts(2), vec![2, 2]);
    }

    #[test]
    fn eds_refill_trace() {
        let s = eds_sample(&model_with_sizes(&[1, 7]), 3, 9).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.cluster_counts(2), vec![1, 5]);
        // refills come last
        assert_eq!(&s.provenance[4..], &[Provenance::Cluster(1), Provenance::Cluster(1)]);
    }

    #[test]
    fn eds_default_budget() {
        let sizes: Vec<usize> = (0..300).map(|i| 5 + (i * 37) % 60).collect();
        let s = eds_sample(&model_with_sizes(&sizes), 10, 3).unwrap();
        assert_eq!(s.len(), 3000);
    }

    #[test]
    fn eds_budget_truncation_keeps_balance() {
        let s = eds_sample_budget(&model_with_sizes(&[10, 10, 10]), 7, 2).unwrap();
        assert_eq!(s.len(), 7);
        assert_eq!(s.cluster_counts(3), vec![3, 2, 2]);
    }

    #[test]
    fn random_examples() {
        let m = manifest_with(&[Weather::Sunny; 10]);
        let all = random_sample(&m, SamplePool::All, 10, 5).unwrap();
        let mut ids = all.ids.clone();
        ids.sort();
        assert_eq!(ids, SamplePool::All.ids(&m));

        let a = random_sample(&m, SamplePool::All, 5, 1).unwrap();
        let b = random_sample(&m, SamplePool::All, 5, 2).unwrap();
        assert_ne!(
            a.ids.iter().collect::<HashSet<_>>(),
            b.ids.iter().collect::<HashSet<_>>()
        );
        assert_eq!(a, random_sample(&m, SamplePool::All, 5, 1).unwrap());

        assert!(matches!(
            random_sample(&m, SamplePool::All, 11, 0),
            Err(Error::PoolTooSmall { requested: 11, available: 10 })
        ));
        assert!(matches!(
            random_sample(&m, SamplePool::Labeled, 1, 0),
            Err(Error::PoolTooSmall { .. })
        ));
    }

    #[test]
    fn random_large_pool() {
        let m = manifest_with(&vec![Weather::Sunny; 5000]);
        assert_eq!(random_sample(&m, SamplePool::Unlabeled, 3000, 4).unwrap().len(), 3000);
    }

    #[test]
    fn density_examples() {
        use Weather::*;
        let m = manifest_with(&[Sunny, Sunny, Rainy, Rainy]);
        let all: Vec<String> = (0..4).map(|i| format!("r{i}")).collect();
        let d = density_estimate(&all, &m, ScenarioAxis::Weather).unwrap();
        assert_eq!(d.get("sunny"), Some(0.5));
        assert_eq!(d.get("rainy"), Some(0.5));
        assert!(kl_to_uniform(&d).abs() < 1e-15);

        let m = manifest_with(&[Sunny, Sunny, Sunny, Rainy]);
        let d = density_estimate(&all, &m, ScenarioAxis::Weather).unwrap();
        assert_eq!(d.get("sunny"), Some(0.75));
        assert_eq!(d.get("rainy"), Some(0.25));
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_to_uniform(&d) - expected).abs() < 1e-12);
        assert!((expected - 0.1308).abs() < 1e-4);

        let only_sunny: Vec<String> = (0..3).map(|i| format!("r{i}")).collect();
        let d = density_estimate(&only_sunny, &m, ScenarioAxis::Weather).unwrap();
        assert_eq!(d.get("sunny"), Some(1.0));
        assert_eq!(d.get("rainy"), Some(0.0));
        assert!((kl_to_uniform(&d) - 2f64.ln()).abs() < 1e-12);

        let d = density_estimate(&all, &m, ScenarioAxis::Time).unwrap();
        assert_eq!(d.density, vec![("day".to_string(), 1.0)]);

        assert!(matches!(
            density_estimate(&["nope".to_string()], &m, ScenarioAxis::Weather),
            Err(Error::UnknownId(_))
        ));
    }

    #[test]
    fn subset_file_round_trip() {
        let m = manifest_with(&[Weather::Sunny, Weather::Foggy, Weather::Snowy]);
        let s = SampledSubset {
            ids: vec!["r2".into(), "r0".into()],
            provenance: vec![Provenance::Cluster(4), Provenance::Random],
            seed: 11,
            target_size: 2,
            method: SamplerKind::Eds,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        write_subset(&s, &m, &p).unwrap();
        let (back, fragment) = read_subset(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(fragment.len(), 2);
        assert!(DatasetManifest::load(&p).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn eds_budget_and_uniqueness(sizes in prop::collection::vec(1usize..30, 1..20), n in 1usize..12, seed in any::<u64>()) {
            let model = model_with_sizes(&sizes);
            let s = eds_sample(&model, n, seed).unwrap();
            let total: usize = sizes.iter().sum();
            prop_assert_eq!(s.len(), (n * sizes.len()).min(total));
            let unique: HashSet<_> = s.ids.iter().collect();
            prop_assert_eq!(unique.len(), s.len());
            for (c, &count) in s.cluster_counts(sizes.len()).iter().enumerate() {
                prop_assert!(count <= sizes[c]);
                prop_assert!(count >= n.min(sizes[c]));
            }
            for (id, p) in s.ids.iter().zip(&s.provenance) {
                prop_assert_eq!(Provenance::Cluster(model.assignments()[id]), *p);
            }
        }

        #[test]
        fn kl_nonnegative_and_zero_only_at_uniform(raw in prop::collection::vec(0.0f64..1.0, 1..8)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let kl = kl_to_uniform_probs(&p);
            prop_assert!(kl >= 0.0);
            let u = 1.0 / p.len() as f64;
            let max_dev = p.iter().map(|v| (v - u).abs()).fold(0.0, f64::max);
            if max_dev > 1e-3 { prop_assert!(kl > 0.0); }
        }
    }
}
