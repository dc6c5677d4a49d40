//! Split validation and tree growth.
//!
//! Each node quantizes its instances with a SOM, models the codebook-matched
//! rows with a Gaussian mixture, bisects its features with k-means and then
//! asks how well the parent's matched rows are explained by mixtures fitted
//! on each child's columns. Rows claimed by a child with posterior above the
//! threshold form that child's `gamma` set; the overlap of each child set with
//! the parent's high-density set `gamma0` gives `phi1` and `phi2`, combined
//! into `phi = phi1 * phi2 / (phi1 + phi2)`. The best of several seeded
//! attempts is kept and the two children recurse on their own gamma rows.

use std::io::Write;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::{column_vectors, submatrix, DesignMatrix, IndexSet, RandomSeed};
use crate::error::{PppError, Result};
use crate::gmm::{
    default_reg_epsilon, fit_em, init_gmm_from_codebook, mixture_scores, CovarianceMode, GaussianMixture,
};
use crate::kmeans::{kmeans_bisect_with, KmeansInit};
use crate::som::{codebook_match, init_som, train_som, CodebookMatchSet, SomConfig, SomModel};

const STREAM_PARENT_SOM: u64 = 1;
const STREAM_KMEANS: u64 = 2;
const STREAM_CHILD_SOM: [u64; 2] = [3, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorMode {
    /// Each parent vector's two child posteriors sum to one.
    #[default]
    Competitive,
    /// Density times prior, divided by the summed densities over the parent vectors.
    Weighted,
}

/// Which rows feed the feature bisection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaRows {
    /// Rows in `gamma0` when it has at least two members, otherwise all node rows.
    #[default]
    Gamma0,
    All,
}

/// What the `gamma0` threshold is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Density divided by the node's maximum density.
    #[default]
    Normalized,
    /// Raw mixture density.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomSettings {
    /// Fixed grid for every node; `None` picks one from the node size.
    pub grid: Option<(usize, usize)>,
    pub epochs: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// `None` uses half the larger grid side (at least 1).
    pub sigma_start: Option<f64>,
    pub sigma_end: f64,
    pub hit_quantile: f64,
}

impl Default for SomSettings {
    fn default() -> Self {
        Self {
            grid: None,
            epochs: 10,
            alpha_start: 0.5,
            alpha_end: 0.02,
            sigma_start: None,
            sigma_end: 0.1,
            hit_quantile: 1.0,
        }
    }
}

impl SomSettings {
    pub fn config_for(&self, n_rows: usize, seed: RandomSeed) -> SomConfig {
        let mut cfg = match self.grid {
            Some((r, c)) => SomConfig::with_grid(r, c, seed),
            None => SomConfig::for_instances(n_rows, seed),
        };
        cfg.epochs = self.epochs;
        cfg.alpha_start = self.alpha_start;
        cfg.alpha_end = self.alpha_end;
        if let Some(s) = self.sigma_start {
            cfg.sigma_start = s;
        }
        cfg.sigma_end = self.sigma_end.min(cfg.sigma_start);
        cfg.hit_quantile = self.hit_quantile;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// `None` uses `1e-6` times the node's mean column variance.
    pub reg_epsilon: Option<f64>,
    /// `None` picks full up to 50 dimensions, diagonal above.
    pub covariance_mode: Option<CovarianceMode>,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
            reg_epsilon: None,
            covariance_mode: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PppConfig {
    pub som: SomSettings,
    pub em: EmSettings,
    pub max_split_attempts: usize,
    /// Non-improving attempts tolerated after the first positive `phi`.
    pub patience: usize,
    pub score_threshold: f64,
    pub min_features_to_split: usize,
    pub posterior_mode: PosteriorMode,
    pub gamma_rows: GammaRows,
    pub score_mode: ScoreMode,
    pub kmeans_init: KmeansInit,
    pub kmeans_max_iter: usize,
    pub master_seed: RandomSeed,
}

impl Default for PppConfig {
    fn default() -> Self {
        Self {
            som: SomSettings::default(),
            em: EmSettings::default(),
            max_split_attempts: 20,
            patience: 5,
            score_threshold: 0.5,
            min_features_to_split: 2,
            posterior_mode: PosteriorMode::default(),
            gamma_rows: GammaRows::default(),
            score_mode: ScoreMode::default(),
            kmeans_init: KmeansInit::default(),
            kmeans_max_iter: 300,
            master_seed: RandomSeed(0),
        }
    }
}

impl PppConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            master_seed: RandomSeed(seed),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PppError::Config(m.to_string()));
        if self.max_split_attempts == 0 {
            return bad("max_split_attempts must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return bad("score_threshold must lie in (0, 1)");
        }
        if self.min_features_to_split < 2 {
            return bad("min_features_to_split must be >= 2");
        }
        if !(self.em.tol > 0.0) || self.em.max_iter == 0 {
            return bad("EM needs tol > 0 and max_iter >= 1");
        }
        if matches!(self.em.reg_epsilon, Some(r) if !(r >= 0.0)) {
            return bad("reg_epsilon must be non-negative");
        }
        if self.kmeans_max_iter == 0 {
            return bad("kmeans_max_iter must be >= 1");
        }
        if let Some((r, c)) = self.som.grid {
            if r * c < 2 {
                return bad("SOM grid needs at least 2 units");
            }
        }
        // Schedule checks are shared with the SOM itself.
        self.som.config_for(2, RandomSeed(0)).validate()
    }
}

/// Outcome of one seeded split attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    /// Feature bipartition (global feature indices); `None` when k-means
    /// could not split the node.
    pub feature_split: Option<[IndexSet; 2]>,
    /// Node instances (global indices) with parent score above the threshold.
    pub gamma0: IndexSet,
    /// Parent matched-vector positions claimed by each child.
    pub gamma1: IndexSet,
    pub gamma2: IndexSet,
    /// Global instance index of every parent matched vector.
    pub parent_matched_instances: Vec<usize>,
    pub phi1: f64,
    pub phi2: f64,
    pub phi: Option<f64>,
    pub posteriors1: Vec<f64>,
    pub posteriors2: Vec<f64>,
    pub seed: RandomSeed,
}

impl SplitEvaluation {
    fn degenerate(gamma0: IndexSet, parent: &[usize], k: usize, seed: RandomSeed) -> Self {
        Self {
            feature_split: None,
            gamma0,
            gamma1: IndexSet::empty(k),
            gamma2: IndexSet::empty(k),
            parent_matched_instances: parent.to_vec(),
            phi1: 0.0,
            phi2: 0.0,
            phi: None,
            posteriors1: vec![0.0; k],
            posteriors2: vec![0.0; k],
            seed,
        }
    }

    /// Instances (global indices) behind a child's gamma set.
    pub fn child_instances(&self, child: usize) -> IndexSet {
        let gamma = if child == 0 { &self.gamma1 } else { &self.gamma2 };
        let universe = self.gamma0.universe_size();
        IndexSet::new(gamma.iter().map(|k| self.parent_matched_instances[k]), universe)
            .expect("matched instances lie in the instance universe")
    }

    /// Mean posterior of the vectors each child claims: `posteriors1` over
    /// `gamma1` together with `posteriors2` over `gamma2`. Zero when both are empty.
    pub fn mean_posterior(&self) -> f64 {
        let claimed: Vec<f64> = self
            .gamma1
            .iter()
            .map(|k| self.posteriors1[k])
            .chain(self.gamma2.iter().map(|k| self.posteriors2[k]))
            .collect();
        if claimed.is_empty() {
            return 0.0;
        }
        claimed.iter().sum::<f64>() / claimed.len() as f64
    }

    /// A split is accepted only with a positive `phi`.
    pub fn is_accepted(&self) -> bool {
        matches!(self.phi, Some(p) if p > 0.0)
    }
}

/// Indices whose value is strictly above `threshold`.
pub fn gamma_set(scores: &[f64], threshold: f64) -> IndexSet {
    IndexSet::new(
        scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(i, _)| i),
        scores.len(),
    )
    .expect("positions are in range")
}

/// Log-density of each parent matched vector, projected onto `cols`, under a child mixture.
pub fn child_log_densities(
    parent: &CodebookMatchSet,
    cols: &[usize],
    child: &GaussianMixture,
) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = parent
        .matched_vectors
        .iter()
        .map(|v| cols.iter().map(|&j| v[j]).collect())
        .collect();
    child.row_log_densities(&DesignMatrix::from_rows(&rows)?)
}

/// Posterior of every parent matched vector under each child mixture.
///
/// `log_densities[c][k]` is the child-`c` log-density of parent vector `k`.
/// A zero normalizer yields zeros.
pub fn child_posteriors(priors: &[f64], log_densities: [&[f64]; 2], mode: PosteriorMode) -> Result<[Vec<f64>; 2]> {
    let k = priors.len();
    for l in log_densities {
        if l.len() != k {
            return Err(PppError::LengthMismatch {
                left: l.len(),
                right: k,
            });
        }
    }
    match mode {
        PosteriorMode::Competitive => {
            let mut out = [vec![0.0; k], vec![0.0; k]];
            for i in 0..k {
                let (a, b) = (log_densities[0][i], log_densities[1][i]);
                if priors[i] <= 0.0 || (a == f64::NEG_INFINITY && b == f64::NEG_INFINITY) {
                    continue;
                }
                // the prior multiplies both numerators and cancels
                let p1 = 1.0 / (1.0 + (b - a).exp());
                out[0][i] = p1;
                out[1][i] = 1.0 - p1;
            }
            Ok(out)
        }
        PosteriorMode::Weighted => {
            let per_child = |l: &[f64]| {
                let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return vec![0.0; k];
                }
                let norm: f64 = l.iter().map(|v| (v - max).exp()).sum();
                l.iter().zip(priors).map(|(v, p)| (v - max).exp() / norm * p).collect()
            };
            Ok([per_child(log_densities[0]), per_child(log_densities[1])])
        }
    }
}

/// `100 |child ∩ gamma0| / |child|`, zero for an empty child set.
pub fn overlap_fraction(child_gamma: &IndexSet, gamma0: &IndexSet) -> f64 {
    if child_gamma.is_empty() {
        return 0.0;
    }
    100.0 * child_gamma.intersection_len(gamma0) as f64 / child_gamma.len() as f64
}

/// `phi1 phi2 / (phi1 + phi2)`, undefined when both are zero.
pub fn split_objective(phi1: f64, phi2: f64) -> Option<f64> {
    let sum = phi1 + phi2;
    if sum > 0.0 {
        Some(phi1 * phi2 / sum)
    } else {
        None
    }
}

/// A SOM plus the mixture fitted on its matched rows.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub som: SomModel,
    pub matches: CodebookMatchSet,
    pub mixture: GaussianMixture,
}

fn quantize_and_fit(x: &DesignMatrix, config: &PppConfig, seed: RandomSeed) -> Result<QuantizedModel> {
    let som_cfg = config.som.config_for(x.n_instances(), seed);
    let som = train_som(init_som(som_cfg, x)?, x)?;
    let matches = codebook_match(&som, x)?;
    let mode = config
        .em
        .covariance_mode
        .unwrap_or_else(|| CovarianceMode::for_dim(x.n_features()));
    let reg = config.em.reg_epsilon.unwrap_or_else(|| default_reg_epsilon(x));
    let init = init_gmm_from_codebook(&matches, x, mode, reg)?;
    let matched = DesignMatrix::from_rows(&matches.matched_vectors)?;
    let fit = fit_em(&init, &matched, config.em.tol, config.em.max_iter)?;
    Ok(QuantizedModel {
        som,
        matches,
        mixture: fit.mixture,
    })
}

/// Every model built during one attempt, for export and inspection.
#[derive(Debug, Clone)]
pub struct SplitArtifacts {
    pub evaluation: SplitEvaluation,
    pub parent: QuantizedModel,
    pub children: Option<[QuantizedModel; 2]>,
}

/// One seeded attempt at splitting `node`.
pub fn evaluate_split(
    node: &PppNode,
    data: &DesignMatrix,
    config: &PppConfig,
    attempt_seed: RandomSeed,
) -> Result<SplitEvaluation> {
    Ok(evaluate_split_detailed(node, data, config, attempt_seed)?.evaluation)
}

pub fn evaluate_split_detailed(
    node: &PppNode,
    data: &DesignMatrix,
    config: &PppConfig,
    attempt_seed: RandomSeed,
) -> Result<SplitArtifacts> {
    if node.feature_set.len() < 2 || node.instance_set.len() < 2 {
        return Err(PppError::DegenerateSelection(format!(
            "node {} has {} features and {} instances",
            node.path,
            node.feature_set.len(),
            node.instance_set.len()
        )));
    }
    let x = submatrix(data, &node.instance_set, &node.feature_set)?;
    let instances = node.instance_set.as_slice();

    // parent quantization and high-density set
    let parent = quantize_and_fit(&x, config, attempt_seed.derive(STREAM_PARENT_SOM))?;
    let scores = mixture_scores(&parent.mixture, &x)?;
    let score_values = match config.score_mode {
        ScoreMode::Normalized => &scores.normalized,
        ScoreMode::Raw => &scores.density,
    };
    let gamma0_local = gamma_set(score_values, config.score_threshold);
    let gamma0 = node.instance_set.compose(&gamma0_local)?;
    let parent_ids: Vec<usize> = parent.matches.matched_instance_ids.iter().map(|&i| instances[i]).collect();
    let k = parent.matches.len();

    // feature bisection
    let rows = match config.gamma_rows {
        GammaRows::Gamma0 if gamma0_local.len() >= 2 => gamma0_local.clone(),
        _ => IndexSet::full(x.n_instances()),
    };
    let points = column_vectors(&submatrix(&x, &rows, &IndexSet::full(x.n_features()))?);
    let split = match kmeans_bisect_with(
        &points,
        attempt_seed.derive(STREAM_KMEANS),
        config.kmeans_max_iter,
        config.kmeans_init,
    ) {
        Ok(r) => r,
        Err(PppError::DegenerateSplit(reason)) => {
            debug!("node {}: k-means degenerate ({reason})", node.path);
            return Ok(SplitArtifacts {
                evaluation: SplitEvaluation::degenerate(gamma0, &parent_ids, k, attempt_seed),
                parent,
                children: None,
            });
        }
        Err(e) => return Err(e),
    };
    let local_cols = [split.cluster(0), split.cluster(1)];

    // child quantization and posteriors of the parent's matched rows
    let mut children = Vec::with_capacity(2);
    let mut log_dens = Vec::with_capacity(2);
    for (c, cols) in local_cols.iter().enumerate() {
        let col_set = IndexSet::new(cols.iter().copied(), x.n_features())?;
        let xc = submatrix(&x, &IndexSet::full(x.n_instances()), &col_set)?;
        let model = quantize_and_fit(&xc, config, attempt_seed.derive(STREAM_CHILD_SOM[c]))?;
        log_dens.push(child_log_densities(&parent.matches, cols, &model.mixture)?);
        children.push(model);
    }
    let [p1, p2] = child_posteriors(&parent.matches.priors, [&log_dens[0], &log_dens[1]], config.posterior_mode)?;
    let gamma1 = gamma_set(&p1, config.score_threshold);
    let gamma2 = gamma_set(&p2, config.score_threshold);

    let feature_split = [
        node.feature_set.compose(&IndexSet::new(local_cols[0].iter().copied(), x.n_features())?)?,
        node.feature_set.compose(&IndexSet::new(local_cols[1].iter().copied(), x.n_features())?)?,
    ];
    let mut evaluation = SplitEvaluation {
        feature_split: Some(feature_split),
        gamma0,
        gamma1,
        gamma2,
        parent_matched_instances: parent_ids,
        phi1: 0.0,
        phi2: 0.0,
        phi: None,
        posteriors1: p1,
        posteriors2: p2,
        seed: attempt_seed,
    };
    evaluation.phi1 = overlap_fraction(&evaluation.child_instances(0), &evaluation.gamma0);
    evaluation.phi2 = overlap_fraction(&evaluation.child_instances(1), &evaluation.gamma0);
    evaluation.phi = split_objective(evaluation.phi1, evaluation.phi2);
    let children: [QuantizedModel; 2] = children.try_into().expect("two children");
    Ok(SplitArtifacts {
        evaluation,
        parent,
        children: Some(children),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    /// Too few features to split.
    LeafTerminal,
    Internal,
    /// No attempt produced a positive `phi`.
    LeafUnsplittable,
    /// Not grown yet.
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: usize,
    pub phi1: f64,
    pub phi2: f64,
    pub phi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PppNode {
    /// `r` for the root, then one digit per level (`r0`, `r01`, ...).
    pub path: String,
    pub depth: usize,
    pub feature_set: IndexSet,
    pub instance_set: IndexSet,
    pub best_eval: Option<SplitEvaluation>,
    pub children: Option<Box<[PppNode; 2]>>,
    pub status: NodeStatus,
    pub phi_trace: Vec<AttemptRecord>,
}

impl PppNode {
    pub fn new(path: impl Into<String>, depth: usize, feature_set: IndexSet, instance_set: IndexSet) -> Self {
        Self {
            path: path.into(),
            depth,
            feature_set,
            instance_set,
            best_eval: None,
            children: None,
            status: NodeStatus::Pending,
            phi_trace: Vec::new(),
        }
    }

    pub fn root(data: &DesignMatrix) -> Self {
        Self::new(
            "r",
            0,
            IndexSet::full(data.n_features()),
            IndexSet::full(data.n_instances()),
        )
    }

    pub fn attempt_seed(&self, master: RandomSeed, attempt: usize) -> RandomSeed {
        master.derive_path(self.path.as_bytes()).derive(attempt as u64)
    }

    /// Number of split evaluations performed at this node.
    pub fn evaluations(&self) -> usize {
        self.phi_trace.len()
    }

    /// Pre-order traversal.
    pub fn walk(&self) -> Vec<&PppNode> {
        let mut out = vec![self];
        if let Some(kids) = &self.children {
            out.extend(kids[0].walk());
            out.extend(kids[1].walk());
        }
        out
    }
}

/// Decides this node's fate; children are created but not grown.
pub fn grow_node(mut node: PppNode, data: &DesignMatrix, config: &PppConfig) -> Result<PppNode> {
    if node.feature_set.len() < config.min_features_to_split {
        node.status = NodeStatus::LeafTerminal;
        return Ok(node);
    }
    if node.instance_set.len() < 2 {
        node.status = NodeStatus::LeafUnsplittable;
        return Ok(node);
    }
    let mut best: Option<SplitEvaluation> = None;
    let mut stale = 0usize;
    for attempt in 0..config.max_split_attempts {
        let eval = evaluate_split(&node, data, config, node.attempt_seed(config.master_seed, attempt))?;
        node.phi_trace.push(AttemptRecord {
            attempt,
            phi1: eval.phi1,
            phi2: eval.phi2,
            phi: eval.phi,
        });
        let improved = eval.is_accepted()
            && best.as_ref().is_none_or(|b| eval.phi > b.phi);
        if improved {
            best = Some(eval);
            stale = 0;
        } else if best.is_some() {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    match best {
        None => {
            debug!("node {}: no positive phi in {} attempts", node.path, node.phi_trace.len());
            node.status = NodeStatus::LeafUnsplittable;
        }
        Some(eval) => {
            let split = eval.feature_split.clone().expect("accepted splits carry a bipartition");
            let kids = [0, 1].map(|c| {
                PppNode::new(
                    format!("{}{c}", node.path),
                    node.depth + 1,
                    split[c].clone(),
                    eval.child_instances(c),
                )
            });
            info!(
                "node {}: split {}+{} features, phi {:.3}",
                node.path,
                split[0].len(),
                split[1].len(),
                eval.phi.unwrap_or(0.0)
            );
            node.children = Some(Box::new(kids));
            node.best_eval = Some(eval);
            node.status = NodeStatus::Internal;
        }
    }
    Ok(node)
}

fn grow_recursive(node: PppNode, data: &DesignMatrix, config: &PppConfig) -> Result<PppNode> {
    let mut node = grow_node(node, data, config)?;
    if let Some(kids) = node.children.take() {
        let [a, b] = *kids;
        let (a, b) = rayon::join(|| grow_recursive(a, data, config), || grow_recursive(b, data, config));
        node.children = Some(Box::new([a?, b?]));
    }
    Ok(node)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PppTree {
    pub root: PppNode,
    pub n_instances: usize,
    pub feature_ids: Vec<String>,
    pub config: PppConfig,
}

impl PppTree {
    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn nodes(&self) -> Vec<&PppNode> {
        self.root.walk()
    }

    pub fn leaves(&self) -> Vec<&PppNode> {
        self.nodes().into_iter().filter(|n| n.children.is_none()).collect()
    }

    pub fn depth(&self) -> usize {
        self.nodes().iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

/// Grows the full tree depth-first from all features and all instances.
/// Sibling subtrees may grow in parallel; every node's randomness comes from
/// its own path so the result does not depend on scheduling.
pub fn build_tree(data: &DesignMatrix, config: &PppConfig) -> Result<PppTree> {
    config.validate()?;
    data.ensure_clusterable()?;
    let root = grow_recursive(PppNode::root(data), data, config)?;
    Ok(PppTree {
        root,
        n_instances: data.n_instances(),
        feature_ids: (0..data.n_features()).map(|j| data.feature_label(j)).collect(),
        config: config.clone(),
    })
}

/// Where to cut a tree into feature clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutTarget {
    Leaves,
    /// Nodes at this depth (or shallower leaves) form the clusters.
    Depth(i64),
}

/// Minimal view shared by grown trees and saved tree documents.
pub trait TreeView {
    fn feature_indices(&self) -> Vec<usize>;
    fn child_views(&self) -> Option<[&Self; 2]>;
}

impl TreeView for PppNode {
    fn feature_indices(&self) -> Vec<usize> {
        self.feature_set.as_slice().to_vec()
    }

    fn child_views(&self) -> Option<[&Self; 2]> {
        self.children.as_ref().map(|k| [&k[0], &k[1]])
    }
}

/// Feature clusters at the requested cut, in pre-order.
pub fn cut_tree<T: TreeView>(root: &T, target: CutTarget) -> Result<Vec<Vec<usize>>> {
    let limit = match target {
        CutTarget::Leaves => None,
        CutTarget::Depth(d) if d < 0 => {
            return Err(PppError::Config(format!("cut depth must be non-negative, got {d}")));
        }
        CutTarget::Depth(d) => Some(d as usize),
    };
    let mut out = Vec::new();
    collect_cut(root, 0, limit, &mut out);
    Ok(out)
}

fn collect_cut<T: TreeView>(node: &T, depth: usize, limit: Option<usize>, out: &mut Vec<Vec<usize>>) {
    match node.child_views() {
        Some([a, b]) if limit.is_none_or(|l| depth < l) => {
            collect_cut(a, depth + 1, limit, out);
            collect_cut(b, depth + 1, limit, out);
        }
        _ => out.push(node.feature_indices()),
    }
}

/// Serializable node record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub path: String,
    pub depth: usize,
    pub status: NodeStatus,
    pub features: Vec<usize>,
    pub feature_ids: Vec<String>,
    pub n_instances: usize,
    pub gamma0_size: Option<usize>,
    pub gamma1_size: Option<usize>,
    pub gamma2_size: Option<usize>,
    pub phi1: Option<f64>,
    pub phi2: Option<f64>,
    pub phi: Option<f64>,
    pub mean_posterior: Option<f64>,
    pub phi_trace: Vec<Option<f64>>,
    pub children: Vec<NodeDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub n_instances: usize,
    pub n_features: usize,
    pub feature_ids: Vec<String>,
    pub master_seed: u64,
    pub root: NodeDocument,
}

impl TreeView for NodeDocument {
    fn feature_indices(&self) -> Vec<usize> {
        self.features.clone()
    }

    fn child_views(&self) -> Option<[&Self; 2]> {
        match self.children.as_slice() {
            [a, b] => Some([a, b]),
            _ => None,
        }
    }
}

fn node_document(node: &PppNode, ids: &[String]) -> NodeDocument {
    let eval = node.best_eval.as_ref();
    NodeDocument {
        path: node.path.clone(),
        depth: node.depth,
        status: node.status,
        features: node.feature_indices(),
        feature_ids: node.feature_set.iter().map(|j| ids[j].clone()).collect(),
        n_instances: node.instance_set.len(),
        gamma0_size: eval.map(|e| e.gamma0.len()),
        gamma1_size: eval.map(|e| e.gamma1.len()),
        gamma2_size: eval.map(|e| e.gamma2.len()),
        phi1: eval.map(|e| e.phi1),
        phi2: eval.map(|e| e.phi2),
        phi: eval.and_then(|e| e.phi),
        mean_posterior: eval.map(SplitEvaluation::mean_posterior),
        phi_trace: node.phi_trace.iter().map(|a| a.phi).collect(),
        children: node
            .children
            .as_ref()
            .map(|k| vec![node_document(&k[0], ids), node_document(&k[1], ids)])
            .unwrap_or_default(),
    }
}

impl PppTree {
    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            n_instances: self.n_instances,
            n_features: self.n_features(),
            feature_ids: self.feature_ids.clone(),
            master_seed: self.config.master_seed.0,
            root: node_document(&self.root, &self.feature_ids),
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        self.to_document().write_json(w)
    }

    /// One row per split attempt: `node_path,attempt,phi1,phi2,phi` (empty `phi` when undefined).
    pub fn write_diagnostics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["node_path", "attempt", "phi1", "phi2", "phi"])?;
        for node in self.nodes() {
            for a in &node.phi_trace {
                out.write_record([
                    node.path.clone(),
                    a.attempt.to_string(),
                    a.phi1.to_string(),
                    a.phi2.to_string(),
                    a.phi.map(|p| p.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// `(depth, internal nodes, mean phi)` for every depth with an accepted split.
    pub fn phi_by_level(&self) -> Vec<(usize, usize, f64)> {
        level_means(self, |e| e.phi.unwrap_or(0.0))
    }

    /// `(depth, internal nodes, mean child posterior)` per depth.
    pub fn posterior_by_level(&self) -> Vec<(usize, usize, f64)> {
        level_means(self, SplitEvaluation::mean_posterior)
    }
}

fn level_means(tree: &PppTree, value: impl Fn(&SplitEvaluation) -> f64) -> Vec<(usize, usize, f64)> {
    let mut acc: Vec<(usize, f64)> = Vec::new();
    for node in tree.nodes() {
        if let (NodeStatus::Internal, Some(e)) = (node.status, &node.best_eval) {
            if acc.len() <= node.depth {
                acc.resize(node.depth + 1, (0, 0.0));
            }
            acc[node.depth].0 += 1;
            acc[node.depth].1 += value(e);
        }
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(d, (n, s))| (d, n, s / n as f64))
        .collect()
}

impl TreeDocument {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json<R: std::io::Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }
}

/// `feature_id,cluster_id` for every feature, in feature order.
pub fn write_assignment_csv<W: Write>(clusters: &[Vec<usize>], feature_ids: &[String], w: W) -> Result<()> {
    let mut label = vec![None; feature_ids.len()];
    for (c, members) in clusters.iter().enumerate() {
        for &j in members {
            let slot = label.get_mut(j).ok_or(PppError::IndexOutOfBounds {
                index: j,
                universe: feature_ids.len(),
            })?;
            *slot = Some(c);
        }
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["feature_id", "cluster_id"])?;
    for (id, c) in feature_ids.iter().zip(label) {
        let c = c.ok_or_else(|| PppError::Validation(format!("feature {id} is in no cluster")))?;
        out.write_record([id.as_str(), &c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
