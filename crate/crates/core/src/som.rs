//! Self-organizing map vector quantization of instance vectors.
//!
//! A rectangular grid of codebook vectors is trained online: each step draws a
//! random row, finds its best matching unit and pulls every unit towards the
//! row with a Gaussian neighborhood kernel whose gain and radius decay
//! linearly over the step budget. After training one assignment pass fills
//! per-unit hit counts, and [`codebook_match`] links every unit to its nearest
//! data row so the mixture layer can work on real observations.

use std::io::Write;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sq_dist, DesignMatrix, RandomSeed};
use crate::error::{PppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub epochs: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Rows whose BMU distance exceeds this quantile of all BMU distances get
    /// no hit. `1.0` keeps every row.
    pub hit_quantile: f64,
    pub seed: RandomSeed,
}

/// Default grid for `n` training rows: 8x8 from 1000 rows up, otherwise a
/// square of side `ceil(n^(1/4))` (about `sqrt(n)` units), shrunk to at most `n` units.
pub fn default_grid(n: usize) -> (usize, usize) {
    if n >= 1000 {
        return (8, 8);
    }
    let side = ((n as f64).powf(0.25).ceil() as usize).max(2);
    let (mut rows, cols) = (side, side);
    while rows > 1 && rows * cols > n {
        rows -= 1;
    }
    if rows * cols > n.max(2) {
        return (1, n.max(2));
    }
    (rows, cols)
}

impl SomConfig {
    /// Default schedule for a node with `n` rows.
    pub fn for_instances(n: usize, seed: RandomSeed) -> Self {
        let (grid_rows, grid_cols) = default_grid(n);
        Self::with_grid(grid_rows, grid_cols, seed)
    }

    pub fn with_grid(grid_rows: usize, grid_cols: usize, seed: RandomSeed) -> Self {
        let sigma_start = (grid_rows.max(grid_cols) as f64 / 2.0).max(1.0);
        Self {
            grid_rows,
            grid_cols,
            epochs: 10,
            alpha_start: 0.5,
            alpha_end: 0.02,
            sigma_start,
            sigma_end: 0.1_f64.min(sigma_start),
            hit_quantile: 1.0,
            seed,
        }
    }

    pub fn units(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(PppError::Config(msg.to_string()));
        if self.units() < 2 {
            return bad("SOM needs at least 2 units");
        }
        if self.epochs == 0 {
            return bad("SOM epochs must be >= 1");
        }
        if !(self.alpha_end > 0.0 && self.alpha_end <= self.alpha_start && self.alpha_start <= 1.0) {
            return bad("SOM learning rates must satisfy 0 < alpha_end <= alpha_start <= 1");
        }
        if !(self.sigma_end > 0.0 && self.sigma_end <= self.sigma_start) {
            return bad("SOM radii must satisfy 0 < sigma_end <= sigma_start");
        }
        if !(self.hit_quantile > 0.0 && self.hit_quantile <= 1.0) {
            return bad("hit quantile must lie in (0, 1]");
        }
        Ok(())
    }

    /// Learning rate and radius at step `t` of `total_steps`.
    pub fn schedule(&self, t: usize, total_steps: usize) -> (f64, f64) {
        let frac = if total_steps <= 1 {
            0.0
        } else {
            t.min(total_steps - 1) as f64 / (total_steps - 1) as f64
        };
        (
            self.alpha_start + (self.alpha_end - self.alpha_start) * frac,
            self.sigma_start + (self.sigma_end - self.sigma_start) * frac,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SomModel {
    codebook: Vec<f64>,
    dim: usize,
    grid_coords: Vec<(usize, usize)>,
    hit_counts: Vec<usize>,
    config: SomConfig,
    final_qe: f64,
}

impl SomModel {
    pub fn units(&self) -> usize {
        self.grid_coords.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unit(&self, k: usize) -> &[f64] {
        &self.codebook[k * self.dim..(k + 1) * self.dim]
    }

    pub fn grid_coords(&self) -> &[(usize, usize)] {
        &self.grid_coords
    }

    pub fn hit_counts(&self) -> &[usize] {
        &self.hit_counts
    }

    pub fn config(&self) -> &SomConfig {
        &self.config
    }

    pub fn final_qe(&self) -> f64 {
        self.final_qe
    }

    fn total_steps(&self, n_rows: usize) -> usize {
        self.config.epochs * n_rows
    }

    fn grid_sq_dist(&self, c: usize, i: usize) -> f64 {
        let (a, b) = (self.grid_coords[c], self.grid_coords[i]);
        let dr = a.0 as f64 - b.0 as f64;
        let dc = a.1 as f64 - b.1 as f64;
        dr * dr + dc * dc
    }

    fn bmu_unchecked(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.units() {
            let d = sq_dist(x, self.unit(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Moves every unit towards `x` by its weight: `m_k += w_k (x - m_k)`.
    pub(crate) fn apply_update(&mut self, x: &[f64], weights: &[f64]) {
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let unit = &mut self.codebook[k * self.dim..(k + 1) * self.dim];
            for (m, &v) in unit.iter_mut().zip(x) {
                *m += w * (v - *m);
            }
        }
    }

    fn fill_hits(&mut self, data: &DesignMatrix) {
        let bmus: Vec<(usize, f64)> = data.rows().map(|r| self.bmu_unchecked(r)).collect();
        let cutoff = if self.config.hit_quantile >= 1.0 {
            f64::INFINITY
        } else {
            let mut d: Vec<f64> = bmus.iter().map(|b| b.1).collect();
            d.sort_by(f64::total_cmp);
            let pos = ((self.config.hit_quantile * d.len() as f64).ceil() as usize).clamp(1, d.len());
            d[pos - 1]
        };
        self.hit_counts = vec![0; self.units()];
        for &(k, d) in &bmus {
            if d <= cutoff {
                self.hit_counts[k] += 1;
            }
        }
        self.final_qe = bmus.iter().map(|b| b.1).sum::<f64>() / bmus.len() as f64;
    }
}

/// Samples the codebook from data rows without replacement.
pub fn init_som(config: SomConfig, data: &DesignMatrix) -> Result<SomModel> {
    config.validate()?;
    let k = config.units();
    let n = data.n_instances();
    if k > n {
        warn!("SOM has {k} units but only {n} training rows; some units start duplicated");
    }
    let mut rng = config.seed.derive(0).rng();
    let mut picks = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    while picks.len() < k {
        picks.push(rng.random_range(0..n));
    }
    let dim = data.n_features();
    let mut codebook = Vec::with_capacity(k * dim);
    for &i in &picks {
        codebook.extend_from_slice(data.row(i));
    }
    let grid_coords = (0..config.grid_rows)
        .flat_map(|r| (0..config.grid_cols).map(move |c| (r, c)))
        .collect();
    let mut som = SomModel {
        codebook,
        dim,
        grid_coords,
        hit_counts: vec![0; k],
        config,
        final_qe: 0.0,
    };
    som.final_qe = quantization_error(&som, data)?;
    Ok(som)
}

/// Nearest unit to `x` and its squared distance; ties go to the lowest unit.
pub fn find_bmu(som: &SomModel, x: &[f64]) -> Result<(usize, f64)> {
    if x.len() != som.dim {
        return Err(PppError::Dimension {
            expected: som.dim,
            actual: x.len(),
        });
    }
    Ok(som.bmu_unchecked(x))
}

/// Gaussian kernel `alpha(t) * exp(-|r_c - r_i|^2 / (2 sigma(t)^2))` over grid coordinates.
pub fn neighborhood_weight(som: &SomModel, c: usize, i: usize, t: usize, total_steps: usize) -> f64 {
    let (alpha, sigma) = som.config.schedule(t, total_steps);
    alpha * (-som.grid_sq_dist(c, i) / (2.0 * sigma * sigma)).exp()
}

/// Online training for `epochs * N` steps, then one hit-count pass.
pub fn train_som(mut som: SomModel, data: &DesignMatrix) -> Result<SomModel> {
    som.config.validate()?;
    if data.n_features() != som.dim {
        return Err(PppError::Dimension {
            expected: som.dim,
            actual: data.n_features(),
        });
    }
    let n = data.n_instances();
    let total = som.total_steps(n);
    let mut rng = som.config.seed.derive(1).rng();
    let mut weights = vec![0.0; som.units()];
    for t in 0..total {
        let x = data.row(rng.random_range(0..n));
        let (c, _) = som.bmu_unchecked(x);
        for (i, w) in weights.iter_mut().enumerate() {
            *w = neighborhood_weight(&som, c, i, t, total);
        }
        som.apply_update(x, &weights);
    }
    som.fill_hits(data);
    Ok(som)
}

/// Mean squared distance of each row to its BMU.
pub fn quantization_error(som: &SomModel, data: &DesignMatrix) -> Result<f64> {
    if data.n_features() != som.dim {
        return Err(PppError::Dimension {
            expected: som.dim,
            actual: data.n_features(),
        });
    }
    let total: f64 = data.rows().map(|r| som.bmu_unchecked(r).1).sum();
    Ok(total / data.n_instances() as f64)
}

/// For every unit, the nearest data row plus the codebook priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookMatchSet {
    /// Row index (into the matrix the SOM was matched against) per unit.
    pub matched_instance_ids: Vec<usize>,
    pub matched_vectors: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
}

impl CodebookMatchSet {
    pub fn len(&self) -> usize {
        self.matched_instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matched_instance_ids.is_empty()
    }
}

pub fn codebook_match(som: &SomModel, data: &DesignMatrix) -> Result<CodebookMatchSet> {
    if data.n_features() != som.dim {
        return Err(PppError::Dimension {
            expected: som.dim,
            actual: data.n_features(),
        });
    }
    let mut ids = Vec::with_capacity(som.units());
    for k in 0..som.units() {
        let unit = som.unit(k);
        let mut best = (0, f64::INFINITY);
        for (i, row) in data.rows().enumerate() {
            let d = sq_dist(row, unit);
            if d < best.1 {
                best = (i, d);
            }
        }
        ids.push(best.0);
    }
    let matched_vectors = ids.iter().map(|&i| data.row(i).to_vec()).collect();
    Ok(CodebookMatchSet {
        matched_instance_ids: ids,
        matched_vectors,
        priors: codebook_priors(som),
    })
}

/// Hit counts weighted by each unit's kernel at its own grid position under
/// the final schedule, normalized to a probability vector.
pub fn codebook_priors(som: &SomModel) -> Vec<f64> {
    let k = som.units();
    let total_steps = som.config.epochs.max(1);
    let raw: Vec<f64> = (0..k)
        .map(|u| som.hit_counts[u] as f64 * neighborhood_weight(som, u, u, total_steps - 1, total_steps))
        .collect();
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        warn!("no SOM unit received hits; falling back to a uniform prior");
        return vec![1.0 / k as f64; k];
    }
    raw.iter().map(|r| r / sum).collect()
}

/// Writes `unit_row,unit_col,hit_count,prior,v0..v{d-1}` per unit.
pub fn write_codebook_csv<W: Write>(som: &SomModel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "unit_row".to_string(),
        "unit_col".to_string(),
        "hit_count".to_string(),
        "prior".to_string(),
    ];
    header.extend((0..som.dim).map(|j| format!("v{j}")));
    w.write_record(&header)?;
    let priors = codebook_priors(som);
    for k in 0..som.units() {
        let (r, c) = som.grid_coords[k];
        let mut rec = vec![
            r.to_string(),
            c.to_string(),
            som.hit_counts[k].to_string(),
            priors[k].to_string(),
        ];
        rec.extend(som.unit(k).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
impl SomModel {
    pub(crate) fn from_parts(codebook: Vec<Vec<f64>>, grid: (usize, usize), hits: Vec<usize>) -> Self {
        let dim = codebook[0].len();
        let config = SomConfig::with_grid(grid.0, grid.1, RandomSeed(0));
        SomModel {
            codebook: codebook.concat(),
            dim,
            grid_coords: (0..grid.0).flat_map(|r| (0..grid.1).map(move |c| (r, c))).collect(),
            hit_counts: hits,
            config,
            final_qe: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn random_data(n: usize, d: usize, seed: u64) -> DesignMatrix {
        let mut rng = RandomSeed(seed).rng();
        let values = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        DesignMatrix::new(n, d, values).unwrap()
    }

    fn linear_scan(som: &SomModel, x: &[f64]) -> (usize, f64) {
        let mut best = 0;
        for k in 1..som.units() {
            if sq_dist(x, som.unit(k)) < sq_dist(x, som.unit(best)) {
                best = k;
            }
        }
        (best, sq_dist(x, som.unit(best)))
    }

    #[test]
    fn default_grid_rules() {
        assert_eq!(default_grid(5000), (8, 8));
        assert_eq!(default_grid(400), (5, 5));
        assert_eq!(default_grid(2), (1, 2));
        assert_eq!(default_grid(3), (1, 2));
        for n in 2..1000 {
            let (r, c) = default_grid(n);
            assert!(r * c >= 2 && r * c <= n.max(2), "n={n} grid={r}x{c}");
        }
    }

    #[test]
    fn init_two_units_on_two_rows_is_permutation() {
        let data = DesignMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let som = init_som(SomConfig::with_grid(1, 2, RandomSeed(5)), &data).unwrap();
        let mut units = vec![som.unit(0).to_vec(), som.unit(1).to_vec()];
        units.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(units, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(som.hit_counts().iter().all(|&h| h == 0));
    }

    #[test]
    fn init_is_deterministic_and_samples_rows() {
        let data = random_data(100, 3, 11);
        let cfg = SomConfig::with_grid(2, 2, RandomSeed(9));
        let a = init_som(cfg.clone(), &data).unwrap();
        let b = init_som(cfg, &data).unwrap();
        assert_eq!(a, b);
        for k in 0..4 {
            assert!(data.rows().any(|r| r == a.unit(k)));
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let data = random_data(10, 2, 1);
        let mut cfg = SomConfig::with_grid(1, 1, RandomSeed(0));
        assert!(matches!(init_som(cfg.clone(), &data), Err(PppError::Config(_))));
        cfg = SomConfig::with_grid(2, 2, RandomSeed(0));
        cfg.alpha_start = 0.0;
        cfg.alpha_end = 0.0;
        assert!(matches!(init_som(cfg, &data), Err(PppError::Config(_))));
    }

    #[test]
    fn bmu_examples() {
        let som = SomModel::from_parts(vec![vec![0.0, 0.0], vec![10.0, 10.0]], (1, 2), vec![0, 0]);
        assert_eq!(find_bmu(&som, &[1.0, 1.0]).unwrap(), (0, 2.0));
        assert_eq!(find_bmu(&som, &[10.0, 10.0]).unwrap(), (1, 0.0));
        assert!(matches!(find_bmu(&som, &[1.0]), Err(PppError::Dimension { .. })));
        let data = random_data(16, 4, 3);
        let cfg = SomConfig::with_grid(4, 4, RandomSeed(1));
        let som = init_som(cfg, &data).unwrap();
        assert_eq!(find_bmu(&som, som.unit(3)).unwrap(), (3, 0.0));
    }

    #[test]
    fn neighborhood_values() {
        let data = random_data(10, 2, 1);
        let mut cfg = SomConfig::with_grid(2, 2, RandomSeed(0));
        cfg.alpha_start = 0.5;
        cfg.alpha_end = 0.5;
        cfg.sigma_start = 1.0;
        cfg.sigma_end = 1.0;
        let som = init_som(cfg, &data).unwrap();
        assert_eq!(neighborhood_weight(&som, 2, 2, 0, 10), 0.5);
        // units 0 and 1 are one grid step apart
        let w = neighborhood_weight(&som, 0, 1, 3, 10);
        assert!((w - 0.5 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((w - 0.30327).abs() < 1e-5);

        let far = SomModel::from_parts(vec![vec![0.0]; 11], (1, 11), vec![0; 11]);
        let mut far = far;
        far.config.sigma_start = 0.5;
        far.config.sigma_end = 0.5;
        // grid distance 10 => sqdist 100
        assert!(neighborhood_weight(&far, 0, 10, 0, 1) < 1e-80);
    }

    #[test]
    fn indicator_kernel_reduces_to_winner_only_update() {
        let mut som = SomModel::from_parts(vec![vec![0.0, 0.0], vec![4.0, 4.0], vec![9.0, 1.0]], (1, 3), vec![0; 3]);
        let before = som.clone();
        let x = [3.0, 5.0];
        let (c, _) = find_bmu(&som, &x).unwrap();
        let alpha = 0.3;
        let weights: Vec<f64> = (0..3).map(|k| if k == c { alpha } else { 0.0 }).collect();
        som.apply_update(&x, &weights);
        for k in 0..3 {
            if k == c {
                let expect: Vec<f64> = before.unit(k).iter().zip(&x).map(|(m, v)| m + alpha * (v - m)).collect();
                assert_eq!(som.unit(k), expect.as_slice());
            } else {
                assert_eq!(som.unit(k), before.unit(k));
            }
        }
    }

    #[test]
    fn identical_rows_converge() {
        let data = DesignMatrix::from_rows(&vec![vec![1.5, -2.0, 0.25]; 20]).unwrap();
        let mut cfg = SomConfig::with_grid(2, 3, RandomSeed(4));
        cfg.epochs = 50;
        let som = train_som(init_som(cfg, &data).unwrap(), &data).unwrap();
        assert!(som.final_qe() < 1e-6);
        assert_eq!(som.hit_counts().iter().sum::<usize>(), 20);
    }

    #[test]
    fn two_blobs_get_one_unit_each() {
        let mut rng = RandomSeed(8).rng();
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut rows = Vec::new();
        for i in 0..60 {
            let c = if i % 2 == 0 { 0.0 } else { 10.0 };
            rows.push(vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng)]);
        }
        let data = DesignMatrix::from_rows(&rows).unwrap();
        let mut cfg = SomConfig::with_grid(1, 2, RandomSeed(2));
        cfg.epochs = 30;
        let som = train_som(init_som(cfg, &data).unwrap(), &data).unwrap();
        let boxes: Vec<(f64, f64)> = [0, 1]
            .iter()
            .map(|&parity| {
                let vals: Vec<f64> = rows.iter().enumerate().filter(|(i, _)| i % 2 == parity).flat_map(|(_, r)| r.clone()).collect();
                (vals.iter().cloned().fold(f64::INFINITY, f64::min), vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            })
            .collect();
        let inside = |u: &[f64], b: (f64, f64)| u.iter().all(|&v| v >= b.0 && v <= b.1);
        let covered: Vec<bool> = boxes.iter().map(|&b| (0..2).any(|k| inside(som.unit(k), b))).collect();
        assert_eq!(covered, vec![true, true]);
    }

    #[test]
    fn quantization_error_examples() {
        let data = random_data(6, 2, 21);
        let rows: Vec<Vec<f64>> = data.rows().map(<[f64]>::to_vec).collect();
        let som = SomModel::from_parts(rows, (2, 3), vec![0; 6]);
        assert_eq!(quantization_error(&som, &data).unwrap(), 0.0);

        let centroid: Vec<f64> = (0..2).map(|j| data.column(j).iter().sum::<f64>() / 6.0).collect();
        let one = SomModel::from_parts(vec![centroid.clone()], (1, 1), vec![0]);
        let oracle: f64 = data.rows().map(|r| sq_dist(r, &centroid)).sum::<f64>() / 6.0;
        assert!((quantization_error(&one, &data).unwrap() - oracle).abs() < 1e-12);

        let data = random_data(30, 3, 5);
        let som = train_som(init_som(SomConfig::with_grid(2, 2, RandomSeed(3)), &data).unwrap(), &data).unwrap();
        let mean: f64 = data.rows().map(|r| find_bmu(&som, r).unwrap().1).sum::<f64>() / 30.0;
        assert_eq!(quantization_error(&som, &data).unwrap(), mean);
        assert_eq!(som.final_qe(), mean);
    }

    #[test]
    fn codebook_match_examples() {
        let data = random_data(5, 2, 13);
        let rows: Vec<Vec<f64>> = data.rows().map(<[f64]>::to_vec).collect();
        let som = SomModel::from_parts(rows, (1, 5), vec![1; 5]);
        assert_eq!(codebook_match(&som, &data).unwrap().matched_instance_ids, vec![0, 1, 2, 3, 4]);

        let far = SomModel::from_parts(vec![vec![1e6, 1e6], data.row(2).to_vec()], (1, 2), vec![0, 5]);
        let m = codebook_match(&far, &data).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.matched_instance_ids[1], 2);

        let data = random_data(40, 3, 17);
        let som = train_som(init_som(SomConfig::with_grid(3, 3, RandomSeed(6)), &data).unwrap(), &data).unwrap();
        let m = codebook_match(&som, &data).unwrap();
        for k in 0..som.units() {
            let mut best = 0;
            for i in 1..40 {
                if sq_dist(data.row(i), som.unit(k)) < sq_dist(data.row(best), som.unit(k)) {
                    best = i;
                }
            }
            assert_eq!(m.matched_instance_ids[k], best);
            assert_eq!(m.matched_vectors[k], data.row(best));
        }
    }

    #[test]
    fn prior_examples() {
        let som = SomModel::from_parts(vec![vec![0.0]; 4], (2, 2), vec![3, 3, 3, 3]);
        assert!(codebook_priors(&som).iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let som = SomModel::from_parts(vec![vec![0.0]; 2], (1, 2), vec![4, 0]);
        assert_eq!(codebook_priors(&som), vec![1.0, 0.0]);
        let som = SomModel::from_parts(vec![vec![0.0]; 2], (1, 2), vec![1, 3]);
        assert_eq!(codebook_priors(&som), vec![0.25, 0.75]);
        let som = SomModel::from_parts(vec![vec![0.0]; 2], (1, 2), vec![0, 0]);
        assert_eq!(codebook_priors(&som), vec![0.5, 0.5]);
    }

    #[test]
    fn hit_quantile_excludes_outliers() {
        let mut rows = vec![vec![0.0, 0.0]; 9];
        rows.push(vec![50.0, 50.0]);
        let data = DesignMatrix::from_rows(&rows).unwrap();
        let mut som = SomModel::from_parts(vec![vec![0.0, 0.0], vec![1.0, 1.0]], (1, 2), vec![0, 0]);
        som.config.hit_quantile = 0.9;
        som.fill_hits(&data);
        assert_eq!(som.hit_counts().iter().sum::<usize>(), 9);
    }

    #[test]
    fn codebook_export_layout() {
        let som = SomModel::from_parts(vec![vec![1.0, 2.0], vec![3.0, 4.0]], (1, 2), vec![1, 3]);
        let mut buf = Vec::new();
        write_codebook_csv(&som, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "unit_row,unit_col,hit_count,prior,v0,v1");
        assert_eq!(lines[2], "0,1,3,0.75,3,4");
    }

    #[test]
    fn training_is_deterministic() {
        let data = random_data(50, 4, 2);
        let cfg = SomConfig::with_grid(3, 2, RandomSeed(77));
        let a = train_som(init_som(cfg.clone(), &data).unwrap(), &data).unwrap();
        let b = train_som(init_som(cfg, &data).unwrap(), &data).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn bmu_agrees_with_linear_scan(seed in 0u64..10_000) {
            let data = random_data(16, 3, seed);
            let som = init_som(SomConfig::with_grid(4, 4, RandomSeed(seed)), &data).unwrap();
            let mut rng = RandomSeed(seed + 1).rng();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            prop_assert_eq!(find_bmu(&som, &x).unwrap(), linear_scan(&som, &x));
        }

        #[test]
        fn priors_form_probability_vector(hits in proptest::collection::vec(0usize..50, 4)) {
            let som = SomModel::from_parts(vec![vec![0.0]; 4], (2, 2), hits);
            let p = codebook_priors(&som);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
