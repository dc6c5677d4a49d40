//! Two-cluster k-means used to bisect a node's feature set: Lloyd iterations,
//! then single-point transfers (Hartigan) whenever Lloyd has settled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sq_dist, RandomSeed};
use crate::error::{PppError, Result};

/// How the two starting centers are picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KmeansInit {
    /// Two distinct points drawn uniformly.
    #[default]
    Random,
    /// k-means++ seeding: second center drawn proportional to squared distance.
    PlusPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansResult {
    /// Label in `{0, 1}` per point.
    pub assignment: Vec<u8>,
    pub centers: [Vec<f64>; 2],
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each Lloyd pass and each transfer pass that moved points.
    pub objective_trace: Vec<f64>,
    pub seed: RandomSeed,
}

impl KmeansResult {
    pub fn cluster(&self, label: u8) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `sum_x min_c |x - c|^2`.
pub fn kmeans_objective(centers: &[Vec<f64>; 2], points: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| sq_dist(p, &centers[0]).min(sq_dist(p, &centers[1])))
        .sum()
}

fn nearest(centers: &[Vec<f64>; 2], p: &[f64]) -> (u8, f64) {
    let (d0, d1) = (sq_dist(p, &centers[0]), sq_dist(p, &centers[1]));
    if d1 < d0 {
        (1, d1)
    } else {
        (0, d0)
    }
}

fn mean_of(points: &[Vec<f64>], assignment: &[u8], label: u8) -> Vec<f64> {
    let dim = points[0].len();
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for (p, _) in points.iter().zip(assignment).filter(|(_, &a)| a == label) {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    acc
}

/// One assignment pass (ties to label 0) followed by one center update.
/// If a label ends up empty, the point farthest from its center moves there.
pub fn lloyd_iterate(centers: &[Vec<f64>; 2], points: &[Vec<f64>]) -> (Vec<u8>, [Vec<f64>; 2], f64) {
    let labelled: Vec<(u8, f64)> = points.iter().map(|p| nearest(centers, p)).collect();
    let mut assignment: Vec<u8> = labelled.iter().map(|l| l.0).collect();
    for empty in [0u8, 1] {
        if points.len() >= 2 && !assignment.contains(&empty) {
            let farthest = labelled
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, l)| if l.1 > best.1 { (i, l.1) } else { best })
                .0;
            assignment[farthest] = empty;
        }
    }
    let new_centers = [mean_of(points, &assignment, 0), mean_of(points, &assignment, 1)];
    let objective = kmeans_objective(&new_centers, points);
    (assignment, new_centers, objective)
}

fn initial_centers(points: &[Vec<f64>], seed: RandomSeed, init: KmeansInit) -> Result<[Vec<f64>; 2]> {
    let mut rng = seed.rng();
    let first = rng.random_range(0..points.len());
    let others: Vec<usize> = (0..points.len()).filter(|&i| points[i] != points[first]).collect();
    if others.is_empty() {
        return Err(PppError::DegenerateSplit("all points are identical".into()));
    }
    let second = match init {
        KmeansInit::Random => others[rng.random_range(0..others.len())],
        KmeansInit::PlusPlus => {
            let weights: Vec<f64> = others.iter().map(|&i| sq_dist(&points[i], &points[first])).collect();
            let total: f64 = weights.iter().sum();
            let mut target = rng.random_range(0.0..total);
            let mut pick = *others.last().expect("non-empty");
            for (&i, w) in others.iter().zip(&weights) {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        }
    };
    Ok([points[first].clone(), points[second].clone()])
}

/// Moves single points between clusters while a move lowers the within-cluster
/// sum of squares. Returns whether anything moved; centers are recomputed
/// from the final assignment.
pub fn hartigan_pass(points: &[Vec<f64>], assignment: &mut [u8], centers: &mut [Vec<f64>; 2]) -> bool {
    let mut sizes = [0usize; 2];
    assignment.iter().for_each(|&a| sizes[a as usize] += 1);
    let scale = kmeans_objective(centers, points).max(f64::MIN_POSITIVE);
    let mut moved = false;
    for (i, p) in points.iter().enumerate() {
        let from = assignment[i] as usize;
        let to = 1 - from;
        let (nf, nt) = (sizes[from] as f64, sizes[to] as f64);
        if sizes[from] < 2 {
            continue;
        }
        let gain = nf / (nf - 1.0) * sq_dist(p, &centers[from]) - nt / (nt + 1.0) * sq_dist(p, &centers[to]);
        if gain > 1e-12 * scale {
            for (c, v) in centers[from].iter_mut().zip(p) {
                *c = (nf * *c - v) / (nf - 1.0);
            }
            for (c, v) in centers[to].iter_mut().zip(p) {
                *c = (nt * *c + v) / (nt + 1.0);
            }
            sizes[from] -= 1;
            sizes[to] += 1;
            assignment[i] = to as u8;
            moved = true;
        }
    }
    if moved {
        *centers = [mean_of(points, assignment, 0), mean_of(points, assignment, 1)];
    }
    moved
}

/// Seeded two-means bisection. Lloyd passes run until the assignment stops
/// changing; a transfer pass then tries single-point moves and Lloyd resumes
/// if any point moved. `max_iter` bounds the Lloyd passes.
pub fn kmeans_bisect(points: &[Vec<f64>], seed: RandomSeed, max_iter: usize) -> Result<KmeansResult> {
    kmeans_bisect_with(points, seed, max_iter, KmeansInit::Random)
}

pub fn kmeans_bisect_with(
    points: &[Vec<f64>],
    seed: RandomSeed,
    max_iter: usize,
    init: KmeansInit,
) -> Result<KmeansResult> {
    if points.len() < 2 {
        return Err(PppError::DegenerateSplit(format!("need at least 2 points, got {}", points.len())));
    }
    if max_iter == 0 {
        return Err(PppError::Config("k-means max_iter must be >= 1".into()));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(PppError::Dimension {
            expected: dim,
            actual: p.len(),
        });
    }
    let mut centers = initial_centers(points, seed, init)?;
    let mut previous: Option<Vec<u8>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut assignment = Vec::new();
    let mut objective = f64::NAN;
    let mut passes = 0;
    while passes < max_iter {
        let (a, c, obj) = lloyd_iterate(&centers, points);
        passes += 1;
        centers = c;
        objective = obj;
        trace.push(obj);
        let stable = previous.as_ref() == Some(&a);
        previous = Some(a.clone());
        assignment = a;
        if stable {
            if !hartigan_pass(points, &mut assignment, &mut centers) {
                converged = true;
                break;
            }
            objective = kmeans_objective(&centers, points);
            trace.push(objective);
            previous = Some(assignment.clone());
        }
    }
    if !converged {
        // Align labels with the final centers so the objective is consistent.
        let (a, c, obj) = lloyd_iterate(&centers, points);
        if a == assignment {
            converged = true;
        }
        assignment = a;
        centers = c;
        objective = obj;
    }
    Ok(KmeansResult {
        assignment,
        centers,
        objective,
        iterations: passes,
        converged,
        objective_trace: trace,
        seed,
    })
}
