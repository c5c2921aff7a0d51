//! Curvature-based imperceptibility scoring and patch selection.
//!
//! Where a trigger hides well is decided geometrically: per-point curvature
//! (mean |cosine| between neighbour chords and the point normal), per-point
//! imperceptibility score IS (population standard deviation of the
//! neighbours' curvatures), and per-patch PIS (mean member IS). High PIS
//! marks geometrically complex regions where perturbations are least visible.

use crate::error::{Error, Result};
use crate::geometry::{
    estimate_normals, farthest_point_sample, gather_rows, KdTree, Patch, PointCloud,
};
use crate::rng::{derive, Domain};
use serde::{Deserialize, Serialize};

/// Per-point and per-patch scores for one cloud/patchification.
#[derive(Debug, Clone, PartialEq)]
pub struct ImperceptibilityMap {
    /// IS value per cloud point (length N, all finite and non-negative).
    pub point_scores: Vec<f64>,
    /// PIS value per patch (length g): mean member IS.
    pub patch_scores: Vec<f64>,
}

/// How the m patches receiving the trigger are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    /// Top-m patches by descending PIS (the default attack).
    #[serde(rename = "hpis")]
    HighPis,
    /// Bottom-m patches by ascending PIS (ablation).
    #[serde(rename = "lpis")]
    LowPis,
    /// Seeded-uniform m patches (ablation).
    Random,
    /// Ignore patches entirely: one pseudo-patch of m·k_g FPS points
    /// (ablation; the trigger then has m·k_g rows).
    #[serde(rename = "fpsp")]
    FpsPoints,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "hpis" => Ok(SelectionStrategy::HighPis),
            "lpis" => Ok(SelectionStrategy::LowPis),
            "random" => Ok(SelectionStrategy::Random),
            "fpsp" => Ok(SelectionStrategy::FpsPoints),
            other => Err(format!(
                "unknown strategy {other:?}; expected hpis, lpis, random, or fpsp"
            )),
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SelectionStrategy::HighPis => "hpis",
            SelectionStrategy::LowPis => "lpis",
            SelectionStrategy::Random => "random",
            SelectionStrategy::FpsPoints => "fpsp",
        };
        f.write_str(s)
    }
}

/// Result of [`select_patches`]: either indices into the patch list (in
/// descending-PIS application order) or the FPS pseudo-patch.
#[derive(Debug, Clone)]
pub enum Selection {
    /// Indices into the supplied patch slice, descending PIS (ties by lower
    /// patch index).
    Patches(Vec<usize>),
    /// Single pseudo-patch of m·k_g FPS-sampled points.
    PointSet(Patch),
}

/// Local curvature of point `j`: mean over its `k_c` nearest neighbours
/// (excluding `j` itself) of |⟨(q − x_j)/‖q − x_j‖, n_j⟩|. Lies in [0, 1].
/// Requires normals and `k_c <= N − 1`.
pub fn point_curvature(cloud: &PointCloud, j: usize, k_c: usize) -> Result<f64> {
    point_curvature_flagged(cloud, j, k_c).map(|(c, _)| c)
}

/// [`point_curvature`] plus the number of zero-length chords encountered
/// (coincident neighbours); each such term contributes 0 to the mean.
pub fn point_curvature_flagged(cloud: &PointCloud, j: usize, k_c: usize) -> Result<(f64, usize)> {
    validate_curvature_inputs(cloud, k_c)?;
    let tree = KdTree::build(cloud.points());
    let neighbours = tree.knn_excluding(cloud.point(j), k_c, Some(j));
    Ok(curvature_from_neighbours(cloud, j, &neighbours))
}

fn validate_curvature_inputs(cloud: &PointCloud, k_c: usize) -> Result<()> {
    if cloud.normals().is_none() {
        return Err(Error::NormalsMissing {
            op: "point curvature",
        });
    }
    if k_c == 0 {
        return Err(Error::BadCount {
            name: "k_c",
            got: 0,
            reason: "must be at least 1",
        });
    }
    if k_c + 1 > cloud.len() {
        return Err(Error::TooFewPoints {
            op: "point curvature",
            needed: k_c + 1,
            got: cloud.len(),
        });
    }
    Ok(())
}

fn curvature_from_neighbours(cloud: &PointCloud, j: usize, neighbours: &[usize]) -> (f64, usize) {
    let p = cloud.point(j);
    let n = cloud.normal(j);
    let mut sum = 0.0;
    let mut zero_chords = 0usize;
    for &q in neighbours {
        let qp = cloud.point(q);
        let chord = [qp[0] - p[0], qp[1] - p[1], qp[2] - p[2]];
        let len = (chord[0] * chord[0] + chord[1] * chord[1] + chord[2] * chord[2]).sqrt();
        if len == 0.0 {
            zero_chords += 1;
            continue; // coincident neighbour: the term contributes 0
        }
        sum += ((chord[0] * n[0] + chord[1] * n[1] + chord[2] * n[2]) / len).abs();
    }
    (sum / neighbours.len() as f64, zero_chords)
}

/// Population standard deviation: sqrt(mean((x − mean)²)).
fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Imperceptibility score of point `j`: population standard deviation of the
/// curvature values of its `k_c` nearest neighbours (the point's own
/// curvature is not in the set).
pub fn imperceptibility_score(cloud: &PointCloud, j: usize, k_c: usize) -> Result<f64> {
    validate_curvature_inputs(cloud, k_c)?;
    let tree = KdTree::build(cloud.points());
    let neighbours = tree.knn_excluding(cloud.point(j), k_c, Some(j));
    let curvatures: Vec<f64> = neighbours
        .iter()
        .map(|&q| {
            let nq = tree.knn_excluding(cloud.point(q), k_c, Some(q));
            curvature_from_neighbours(cloud, q, &nq).0
        })
        .collect();
    Ok(population_std(&curvatures))
}

/// Mean member IS of a patch.
pub fn patch_imperceptibility_score(map: &ImperceptibilityMap, patch: &Patch) -> f64 {
    let sum: f64 = patch
        .member_indices
        .iter()
        .map(|&i| map.point_scores[i])
        .sum();
    sum / patch.len() as f64
}

/// Score every point (IS) and every patch (PIS) of a cloud in one pass.
/// Normals are taken from the cloud when present, otherwise estimated with
/// a 10-point neighbourhood.
pub fn score_cloud(
    cloud: &PointCloud,
    patches: &[Patch],
    k_c: usize,
) -> Result<ImperceptibilityMap> {
    let estimated;
    let scored: &PointCloud = if cloud.normals().is_some() {
        cloud
    } else {
        estimated = estimate_normals(cloud, 10.min(cloud.len()))?.cloud;
        &estimated
    };
    validate_curvature_inputs(scored, k_c)?;

    let n = scored.len();
    let tree = KdTree::build(scored.points());
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|j| tree.knn_excluding(scored.point(j), k_c, Some(j)))
        .collect();
    let curvatures: Vec<f64> = (0..n)
        .map(|j| curvature_from_neighbours(scored, j, &neighbours[j]).0)
        .collect();
    let point_scores: Vec<f64> = (0..n)
        .map(|j| {
            let vals: Vec<f64> = neighbours[j].iter().map(|&q| curvatures[q]).collect();
            population_std(&vals)
        })
        .collect();
    let map = ImperceptibilityMap {
        patch_scores: patches
            .iter()
            .map(|p| {
                p.member_indices
                    .iter()
                    .map(|&i| point_scores[i])
                    .sum::<f64>()
                    / p.len() as f64
            })
            .collect(),
        point_scores,
    };
    Ok(map)
}

/// Choose the m patches that receive the trigger. The returned patch indices
/// are ordered by descending PIS (ties by lower patch index) — the order the
/// write-once overlap rule applies them in. `FpsPoints` instead returns one
/// pseudo-patch of m·k_g farthest-point-sampled points.
pub fn select_patches(
    cloud: &PointCloud,
    patches: &[Patch],
    map: &ImperceptibilityMap,
    m: usize,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Selection> {
    let g = patches.len();
    if map.patch_scores.len() != g {
        return Err(Error::DimensionMismatch {
            context: "select_patches",
            left: map.patch_scores.len(),
            right: g,
        });
    }
    if m > g && strategy != SelectionStrategy::FpsPoints {
        return Err(Error::BadCount {
            name: "m",
            got: m,
            reason: "cannot select more patches than patchify produced",
        });
    }
    let descending = |indices: &mut Vec<usize>| {
        indices.sort_by(|&a, &b| {
            map.patch_scores[b]
                .total_cmp(&map.patch_scores[a])
                .then(a.cmp(&b))
        });
    };
    match strategy {
        SelectionStrategy::HighPis => {
            let mut order: Vec<usize> = (0..g).collect();
            descending(&mut order);
            order.truncate(m);
            Ok(Selection::Patches(order))
        }
        SelectionStrategy::LowPis => {
            let mut order: Vec<usize> = (0..g).collect();
            order.sort_by(|&a, &b| {
                map.patch_scores[a]
                    .total_cmp(&map.patch_scores[b])
                    .then(a.cmp(&b))
            });
            order.truncate(m);
            descending(&mut order);
            Ok(Selection::Patches(order))
        }
        SelectionStrategy::Random => {
            let mut rng = derive(seed, Domain::RandomPatchPick, 0);
            let mut picked = rand::seq::index::sample(&mut rng, g, m).into_vec();
            descending(&mut picked);
            Ok(Selection::Patches(picked))
        }
        SelectionStrategy::FpsPoints => {
            let k_g = patches.first().map(Patch::len).unwrap_or(0);
            let total = m * k_g;
            if total == 0 || total > cloud.len() {
                return Err(Error::TooFewPoints {
                    op: "fps-points selection",
                    needed: total.max(1),
                    got: cloud.len(),
                });
            }
            let member_indices = farthest_point_sample(cloud, total, seed)?;
            let coords = gather_rows(cloud.points(), &member_indices);
            Ok(Selection::PointSet(Patch {
                center_index: member_indices[0],
                member_indices,
                coords,
            }))
        }
    }
}
