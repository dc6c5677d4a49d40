//! Design matrix, index sets and seeded randomness shared by every stage.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PppError, Result};

/// Dense `N x f` table of finite reals. Rows are instances, columns are features.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: Vec<f64>,
    n_instances: usize,
    n_features: usize,
    instance_ids: Option<Vec<String>>,
    feature_ids: Option<Vec<String>>,
}

impl DesignMatrix {
    /// Builds a matrix from row-major values.
    pub fn new(n_instances: usize, n_features: usize, values: Vec<f64>) -> Result<Self> {
        if n_instances == 0 || n_features == 0 {
            return Err(PppError::Validation(format!(
                "matrix must be non-empty, got {n_instances}x{n_features}"
            )));
        }
        if values.len() != n_instances * n_features {
            return Err(PppError::LengthMismatch {
                left: values.len(),
                right: n_instances * n_features,
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(PppError::Validation(format!(
                "non-finite entry at row {}, column {}",
                pos / n_features,
                pos % n_features
            )));
        }
        Ok(Self {
            values,
            n_instances,
            n_features,
            instance_ids: None,
            feature_ids: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_features) {
            return Err(PppError::LengthMismatch {
                left: bad.len(),
                right: n_features,
            });
        }
        Self::new(rows.len(), n_features, rows.concat())
    }

    pub fn with_instance_ids(mut self, ids: Vec<String>) -> Result<Self> {
        check_labels(&ids, self.n_instances, "instance")?;
        self.instance_ids = Some(ids);
        Ok(self)
    }

    pub fn with_feature_ids(mut self, ids: Vec<String>) -> Result<Self> {
        check_labels(&ids, self.n_features, "feature")?;
        self.feature_ids = Some(ids);
        Ok(self)
    }

    /// Enforces the minimum shape the clustering pipeline accepts (2 x 2).
    pub fn ensure_clusterable(&self) -> Result<()> {
        if self.n_instances < 2 || self.n_features < 2 {
            return Err(PppError::Validation(format!(
                "need at least 2 instances and 2 features, got {}x{}",
                self.n_instances, self.n_features
            )));
        }
        Ok(())
    }

    pub fn n_instances(&self) -> usize {
        self.n_instances
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn instance_ids(&self) -> Option<&[String]> {
        self.instance_ids.as_deref()
    }

    pub fn feature_ids(&self) -> Option<&[String]> {
        self.feature_ids.as_deref()
    }

    /// Label of feature `j`, falling back to its index.
    pub fn feature_label(&self, j: usize) -> String {
        match &self.feature_ids {
            Some(ids) => ids[j].clone(),
            None => j.to_string(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_features + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_features)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Per-column population variance.
    pub fn column_variances(&self) -> Vec<f64> {
        let n = self.n_instances as f64;
        (0..self.n_features)
            .map(|j| {
                let mean = self.rows().map(|r| r[j]).sum::<f64>() / n;
                self.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n
            })
            .collect()
    }
}

fn check_labels(ids: &[String], expected: usize, what: &str) -> Result<()> {
    if ids.len() != expected {
        return Err(PppError::LengthMismatch {
            left: ids.len(),
            right: expected,
        });
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(PppError::Validation(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(())
}

/// Sorted, duplicate-free indices into a universe `0..universe_size`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexSet {
    indices: Vec<usize>,
    universe_size: usize,
}

impl IndexSet {
    /// Sorts and deduplicates `indices`; fails on any index outside the universe.
    pub fn new(indices: impl IntoIterator<Item = usize>, universe_size: usize) -> Result<Self> {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        if let Some(&index) = indices.iter().find(|&&i| i >= universe_size) {
            return Err(PppError::IndexOutOfBounds {
                index,
                universe: universe_size,
            });
        }
        Ok(Self {
            indices,
            universe_size,
        })
    }

    pub fn full(universe_size: usize) -> Self {
        Self {
            indices: (0..universe_size).collect(),
            universe_size,
        }
    }

    pub fn empty(universe_size: usize) -> Self {
        Self {
            indices: Vec::new(),
            universe_size,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn universe_size(&self) -> usize {
        self.universe_size
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        self.indices.iter().filter(|&&i| other.contains(i)).count()
    }

    /// Maps positions of `inner` (which indexes into `self`) back to this set's universe.
    pub fn compose(&self, inner: &IndexSet) -> Result<IndexSet> {
        if inner.universe_size != self.len() {
            return Err(PppError::LengthMismatch {
                left: inner.universe_size,
                right: self.len(),
            });
        }
        Ok(IndexSet {
            indices: inner.iter().map(|p| self.indices[p]).collect(),
            universe_size: self.universe_size,
        })
    }
}

/// Explicit seed for every randomized operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomSeed(pub u64);

impl RandomSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Deterministic child seed for a labelled sub-stream.
    pub fn derive(self, stream: u64) -> RandomSeed {
        RandomSeed(splitmix64(self.0 ^ splitmix64(stream.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    /// Child seed keyed by an arbitrary byte path (e.g. a tree node path).
    pub fn derive_path(self, path: &[u8]) -> RandomSeed {
        let mut state = splitmix64(self.0 ^ 0x5050_5050_5050_5050);
        for &b in path {
            state = splitmix64(state ^ u64::from(b));
        }
        state = splitmix64(state ^ path.len() as u64);
        RandomSeed(state)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Restricts `m` to the given rows and columns, keeping order and labels.
pub fn submatrix(m: &DesignMatrix, rows: &IndexSet, cols: &IndexSet) -> Result<DesignMatrix> {
    if rows.is_empty() || cols.is_empty() {
        return Err(PppError::DegenerateSelection(
            "row and column selections must be non-empty".into(),
        ));
    }
    for (set, limit) in [(rows, m.n_instances), (cols, m.n_features)] {
        if let Some(&index) = set.as_slice().last().filter(|&&i| i >= limit) {
            return Err(PppError::IndexOutOfBounds {
                index,
                universe: limit,
            });
        }
    }
    let mut values = Vec::with_capacity(rows.len() * cols.len());
    for i in rows.iter() {
        let row = m.row(i);
        values.extend(cols.iter().map(|j| row[j]));
    }
    let mut out = DesignMatrix::new(rows.len(), cols.len(), values)?;
    out.instance_ids = m
        .instance_ids
        .as_ref()
        .map(|ids| rows.iter().map(|i| ids[i].clone()).collect());
    out.feature_ids = m
        .feature_ids
        .as_ref()
        .map(|ids| cols.iter().map(|j| ids[j].clone()).collect());
    Ok(out)
}

/// Feature columns as points of length `N`.
pub fn column_vectors(m: &DesignMatrix) -> Vec<Vec<f64>> {
    (0..m.n_features).map(|j| m.column(j)).collect()
}

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
