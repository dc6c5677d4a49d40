//! Planted block datasets and seed-stability benchmarks.

use std::collections::BTreeMap;
use std::io::Write;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DesignMatrix, RandomSeed};
use crate::engine::{build_tree, cut_tree, CutTarget, NodeStatus, PppConfig, PppTree};
use crate::error::{PppError, Result};

/// Block model: entry `(i, j)` is `block_means[instance_labels[i]][feature_labels[j]]`
/// plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub instance_labels: Vec<usize>,
    pub feature_labels: Vec<usize>,
    /// Indexed `[instance_block][feature_block]`.
    pub block_means: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub seed: RandomSeed,
}

/// Contiguous, near-equal blocks.
fn contiguous_labels(n: usize, blocks: usize) -> Vec<usize> {
    (0..n).map(|i| i * blocks / n).collect()
}

impl PlantedSpec {
    /// Contiguous blocks with `gap` on the cells where `(ib + fb) % max(rows, cols) == 0`
    /// and zero elsewhere.
    pub fn checkerboard(
        n_instances: usize,
        n_features: usize,
        instance_blocks: usize,
        feature_blocks: usize,
        gap: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let m = instance_blocks.max(feature_blocks).max(1);
        let means = (0..instance_blocks)
            .map(|ib| {
                (0..feature_blocks)
                    .map(|fb| if (ib + fb) % m == 0 { gap } else { 0.0 })
                    .collect()
            })
            .collect();
        let spec = Self {
            instance_labels: contiguous_labels(n_instances, instance_blocks.max(1)),
            feature_labels: contiguous_labels(n_features, feature_blocks.max(1)),
            block_means: means,
            noise_sigma,
            seed: RandomSeed(seed),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two-level nesting: four feature blocks and four instance blocks. Feature
    /// blocks `{0, 1}` and `{2, 3}` share `top_gap` on their instance pair,
    /// and each block adds `sub_gap` on its own instance block.
    pub fn nested(
        n_instances: usize,
        n_features: usize,
        top_gap: f64,
        sub_gap: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let means = (0..4)
            .map(|ib: usize| {
                (0..4)
                    .map(|fb: usize| {
                        let top = if ib / 2 == fb / 2 { top_gap } else { 0.0 };
                        let sub = if ib == fb { sub_gap } else { 0.0 };
                        top + sub
                    })
                    .collect()
            })
            .collect();
        let spec = Self {
            instance_labels: contiguous_labels(n_instances, 4),
            feature_labels: contiguous_labels(n_features, 4),
            block_means: means,
            noise_sigma,
            seed: RandomSeed(seed),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_instances(&self) -> usize {
        self.instance_labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_instances() == 0 || self.n_features() == 0 {
            return Err(PppError::Config("planted data needs at least one row and column".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PppError::Config("noise sigma must be finite and non-negative".into()));
        }
        let rows = self.block_means.len();
        let cols = self.block_means.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || self.block_means.iter().any(|r| r.len() != cols) {
            return Err(PppError::Config("block means must form a non-empty rectangle".into()));
        }
        if self.instance_labels.iter().any(|&l| l >= rows) || self.feature_labels.iter().any(|&l| l >= cols) {
            return Err(PppError::Config("block label outside the block-mean table".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedData {
    pub matrix: DesignMatrix,
    pub instance_labels: Vec<usize>,
    pub feature_labels: Vec<usize>,
}

pub fn generate_planted(spec: &PlantedSpec) -> Result<PlantedData> {
    spec.validate()?;
    let mut rng = spec.seed.rng();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| PppError::Config(e.to_string()))?;
    let (n, f) = (spec.n_instances(), spec.n_features());
    let mut values = Vec::with_capacity(n * f);
    for &ib in &spec.instance_labels {
        for &fb in &spec.feature_labels {
            values.push(spec.block_means[ib][fb] + noise.sample(&mut rng));
        }
    }
    let matrix = DesignMatrix::new(n, f, values)?
        .with_instance_ids((0..n).map(|i| format!("i{i}")).collect())?
        .with_feature_ids((0..f).map(|j| format!("f{j}")).collect())?;
    Ok(PlantedData {
        matrix,
        instance_labels: spec.instance_labels.clone(),
        feature_labels: spec.feature_labels.clone(),
    })
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Hubert-Arabie adjusted Rand index. Two single-cluster labelings count as identical.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PppError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len() as u64;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        // both labelings trivial in the same way
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Root feature bipartition as a label vector, with feature 0 always on side 0.
pub fn canonical_root_split(tree: &PppTree) -> Option<Vec<usize>> {
    let eval = tree.root.best_eval.as_ref()?;
    let split = eval.feature_split.as_ref()?;
    let flip = !split[0].contains(0);
    let mut labels = vec![0; tree.n_features()];
    for j in split[1].iter() {
        labels[j] = 1;
    }
    if flip {
        labels.iter_mut().for_each(|l| *l = 1 - *l);
    }
    Some(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub root_status: NodeStatus,
    /// Canonical root bipartition, `None` when the root did not split.
    pub root_split: Option<Vec<usize>>,
    pub root_phi: Option<f64>,
    pub n_leaves: usize,
    pub depth: usize,
    pub leaf_labels: Vec<usize>,
    /// ARI of the root split against a reference labeling when one was given.
    pub reference_ari: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub per_seed: Vec<SeedOutcome>,
    /// Distinct root outcomes (`None` = no split) and their frequencies, most frequent first.
    pub split_frequencies: Vec<(Option<Vec<usize>>, f64)>,
    pub modal_frequency: f64,
    pub pairwise_leaf_ari: Vec<f64>,
    pub mean_leaf_ari: f64,
    pub root_phi: Option<PhiStats>,
    pub unsplittable_roots: usize,
}

/// Builds one tree per master seed and summarizes agreement between them.
pub fn repeatability_trial(
    data: &DesignMatrix,
    config: &PppConfig,
    seeds: &[u64],
    reference: Option<&[usize]>,
) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(PppError::Config("a repeatability trial needs at least two seeds".into()));
    }
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = PppConfig {
                master_seed: RandomSeed(seed),
                ..config.clone()
            };
            let tree = build_tree(data, &cfg)?;
            let root_split = canonical_root_split(&tree);
            let reference_ari = match (reference, &root_split) {
                (Some(r), Some(s)) => Some(adjusted_rand_index(r, s)?),
                (Some(_), None) => Some(0.0),
                _ => None,
            };
            let clusters = cut_tree(&tree.root, CutTarget::Leaves)?;
            Ok(SeedOutcome {
                seed,
                root_status: tree.root.status,
                root_split,
                root_phi: tree.root.best_eval.as_ref().and_then(|e| e.phi),
                n_leaves: clusters.len(),
                depth: tree.depth(),
                leaf_labels: labels_from_clusters(&clusters, tree.n_features()),
                reference_ari,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counts: Vec<(Option<Vec<usize>>, usize)> = Vec::new();
    for o in &per_seed {
        match counts.iter_mut().find(|(s, _)| *s == o.root_split) {
            Some((_, c)) => *c += 1,
            None => counts.push((o.root_split.clone(), 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1));
    let total = per_seed.len() as f64;
    let split_frequencies: Vec<_> = counts.into_iter().map(|(s, c)| (s, c as f64 / total)).collect();
    let modal_frequency = split_frequencies[0].1;

    let mut pairwise_leaf_ari = Vec::new();
    for i in 0..per_seed.len() {
        for j in i + 1..per_seed.len() {
            pairwise_leaf_ari.push(adjusted_rand_index(&per_seed[i].leaf_labels, &per_seed[j].leaf_labels)?);
        }
    }
    let mean_leaf_ari = pairwise_leaf_ari.iter().sum::<f64>() / pairwise_leaf_ari.len() as f64;

    let phis: Vec<f64> = per_seed.iter().filter_map(|o| o.root_phi).collect();
    let root_phi = (!phis.is_empty()).then(|| PhiStats {
        count: phis.len(),
        mean: phis.iter().sum::<f64>() / phis.len() as f64,
        min: phis.iter().copied().fold(f64::INFINITY, f64::min),
        max: phis.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    });
    let unsplittable_roots = per_seed
        .iter()
        .filter(|o| o.root_status != NodeStatus::Internal)
        .count();
    Ok(StabilityReport {
        per_seed,
        split_frequencies,
        modal_frequency,
        pairwise_leaf_ari,
        mean_leaf_ari,
        root_phi,
        unsplittable_roots,
    })
}

/// Cluster label per feature from a list of clusters.
pub fn labels_from_clusters(clusters: &[Vec<usize>], n_features: usize) -> Vec<usize> {
    let mut labels = vec![0; n_features];
    for (c, members) in clusters.iter().enumerate() {
        for &j in members {
            labels[j] = c;
        }
    }
    labels
}

impl StabilityReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// One line per seed: `seed,root_status,root_phi,n_leaves,depth,reference_ari,root_split`.
    pub fn write_per_seed_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "root_status", "root_phi", "n_leaves", "depth", "reference_ari", "root_split"])?;
        for o in &self.per_seed {
            let status = serde_json::to_value(o.root_status)?;
            let split = o
                .root_split
                .as_ref()
                .map(|s| s.iter().map(|l| l.to_string()).collect::<String>())
                .unwrap_or_default();
            out.write_record([
                o.seed.to_string(),
                status.as_str().unwrap_or_default().to_string(),
                o.root_phi.map(|p| p.to_string()).unwrap_or_default(),
                o.n_leaves.to_string(),
                o.depth.to_string(),
                o.reference_ari.map(|a| a.to_string()).unwrap_or_default(),
                split,
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn noiseless_blocks_are_piecewise_constant() {
        let spec = PlantedSpec::checkerboard(6, 4, 2, 2, 3.0, 0.0, 1).unwrap();
        let d = generate_planted(&spec).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                let expect = if (i / 3 + j / 2) % 2 == 0 { 3.0 } else { 0.0 };
                assert_eq!(d.matrix.get(i, j), expect);
            }
        }
        assert_eq!(d.instance_labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(d.feature_labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = PlantedSpec::checkerboard(20, 10, 2, 2, 4.0, 1.0, 9).unwrap();
        assert_eq!(generate_planted(&spec).unwrap(), generate_planted(&spec).unwrap());
    }

    #[test]
    fn block_means_within_three_standard_errors() {
        let spec = PlantedSpec::checkerboard(200, 20, 2, 2, 4.0, 0.1, 5).unwrap();
        let d = generate_planted(&spec).unwrap();
        for ib in 0..2 {
            for fb in 0..2 {
                let mut sum = 0.0;
                let mut n = 0.0;
                for i in 0..200 {
                    for j in 0..20 {
                        if d.instance_labels[i] == ib && d.feature_labels[j] == fb {
                            sum += d.matrix.get(i, j);
                            n += 1.0;
                        }
                    }
                }
                let bound = 3.0 * 0.1 / f64::sqrt(n);
                assert!((sum / n - spec.block_means[ib][fb]).abs() <= bound);
            }
        }
    }

    #[test]
    fn nested_means_layout() {
        let spec = PlantedSpec::nested(8, 8, 4.0, 2.0, 0.0, 0).unwrap();
        assert_eq!(spec.block_means[0], vec![6.0, 4.0, 0.0, 0.0]);
        assert_eq!(spec.block_means[3], vec![0.0, 0.0, 4.0, 6.0]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(PlantedSpec::checkerboard(10, 4, 2, 2, 1.0, -1.0, 0).is_err());
        let mut spec = PlantedSpec::checkerboard(10, 4, 2, 2, 1.0, 0.5, 0).unwrap();
        spec.feature_labels[0] = 7;
        assert!(generate_planted(&spec).is_err());
    }

    /// Rand-index pair counting with the expectation taken over all pairs.
    fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut in_a, mut in_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                pairs += 1.0;
                in_a += sa as u8 as f64;
                in_b += sb as u8 as f64;
                both += (sa && sb) as u8 as f64;
            }
        }
        let expected = in_a * in_b / pairs;
        (both - expected) / ((in_a + in_b) / 2.0 - expected)
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0, 0, 0], &[0, 1, 1, 0, 0]).unwrap(), 0.0);
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
        let a = [0, 0, 1, 1, 2, 2, 0];
        let b = [1, 0, 1, 1, 2, 0, 0];
        assert!((adjusted_rand_index(&a, &b).unwrap() - ari_by_pairs(&a, &b)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ari_properties(a in proptest::collection::vec(0usize..4, 3..30), seed in 0u64..1000) {
            let mut rng = RandomSeed(seed).rng();
            let b: Vec<usize> = a.iter().map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
            let ab = adjusted_rand_index(&a, &b).unwrap();
            prop_assert!((ab - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
            let permuted: Vec<usize> = a.iter().map(|&l| 3 - l).collect();
            prop_assert!((adjusted_rand_index(&permuted, &b).unwrap() - ab).abs() < 1e-12);
            let oracle = ari_by_pairs(&a, &b);
            if oracle.is_finite() {
                prop_assert!((ab - oracle).abs() < 1e-9);
            }
        }
    }
}
