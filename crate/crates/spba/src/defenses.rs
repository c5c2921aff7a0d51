//! Defenses and the defense-evaluation baseline: random data augmentations,
//! statistical outlier removal (SOR), gradient-saliency point removal, and a
//! crude cluster-injection attack that SOR is known to defeat.
//!
//! Every random augmentation is split into two stages so tests can force the
//! draw: [`draw_augment`] samples concrete parameters, [`apply_augment`]
//! applies them deterministically. [`augment`] chains the two with a seed
//! derived from `(kind, sample_index)`.

use crate::classifier::{self, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud};
use crate::rng::{derive, Domain};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default SOR neighbourhood size.
pub const SOR_DEFAULT_K: usize = 60;
/// Default SOR standard-deviation multiplier.
pub const SOR_DEFAULT_SIGMA_MULT: f64 = 0.5;
/// Default number of high-saliency points a saliency defense removes.
pub const SALIENCY_DEFAULT_N: usize = 40;
/// Center of the baseline injection cluster (clouds are normalized, so this
/// sits well off most surfaces).
pub const CLUSTER_CENTER: [f64; 3] = [0.5, 0.5, 0.5];
/// Radius of the baseline injection cluster.
pub const CLUSTER_RADIUS: f64 = 0.05;
/// Fraction of points the baseline injection replaces.
pub const CLUSTER_FRACTION: f64 = 0.03;

/// The supported random augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    /// Uniform rotation in [-10 deg, +10 deg] about z.
    #[serde(rename = "rotz")]
    RotationZ,
    /// Independent uniform [-10 deg, +10 deg] rotations about x, y, z,
    /// applied in that order.
    #[serde(rename = "rot3d")]
    Rotation3D,
    /// Uniform isotropic scale in [0.5, 1.5].
    #[serde(rename = "scale")]
    Scaling,
    /// Independent uniform [-0.1, 0.1] translation per axis.
    Shift,
    /// Remove a uniform fraction in [0, 20%] of points (at least one point
    /// always survives).
    Dropout,
    /// Per-coordinate Gaussian noise, sigma 0.02, clamped to +/-0.05.
    Jitter,
}

impl AugmentKind {
    pub fn all() -> [AugmentKind; 6] {
        [
            AugmentKind::RotationZ,
            AugmentKind::Rotation3D,
            AugmentKind::Scaling,
            AugmentKind::Shift,
            AugmentKind::Dropout,
            AugmentKind::Jitter,
        ]
    }

    /// Stable id mixed into the RNG stream so each kind draws independently.
    fn id(self) -> u64 {
        match self {
            AugmentKind::RotationZ => 1,
            AugmentKind::Rotation3D => 2,
            AugmentKind::Scaling => 3,
            AugmentKind::Shift => 4,
            AugmentKind::Dropout => 5,
            AugmentKind::Jitter => 6,
        }
    }
}

impl std::str::FromStr for AugmentKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rotz" => Ok(AugmentKind::RotationZ),
            "rot3d" => Ok(AugmentKind::Rotation3D),
            "scale" => Ok(AugmentKind::Scaling),
            "shift" => Ok(AugmentKind::Shift),
            "dropout" => Ok(AugmentKind::Dropout),
            "jitter" => Ok(AugmentKind::Jitter),
            other => Err(format!(
                "unknown augmentation {other:?}; expected rotz, rot3d, scale, shift, dropout, or jitter"
            )),
        }
    }
}

impl std::fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AugmentKind::RotationZ => "rotz",
            AugmentKind::Rotation3D => "rot3d",
            AugmentKind::Scaling => "scale",
            AugmentKind::Shift => "shift",
            AugmentKind::Dropout => "dropout",
            AugmentKind::Jitter => "jitter",
        };
        f.write_str(s)
    }
}

/// Concrete, fully drawn augmentation parameters. Applying the identity
/// value of each variant (zero angles, factor 1, zero offset, no removals,
/// zero noise) returns the input unchanged.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentParams {
    RotationZ { angle: f64 },
    Rotation3D { x: f64, y: f64, z: f64 },
    Scaling { factor: f64 },
    Shift { offset: [f64; 3] },
    Dropout { removed: Vec<usize> },
    Jitter { noise: Array2<f64> },
}

/// Sample concrete parameters for `kind` on a cloud of `n` points.
pub fn draw_augment<R: Rng>(kind: AugmentKind, n: usize, rng: &mut R) -> AugmentParams {
    let deg = 10.0f64.to_radians();
    match kind {
        AugmentKind::RotationZ => AugmentParams::RotationZ {
            angle: rng.random_range(-deg..=deg),
        },
        AugmentKind::Rotation3D => AugmentParams::Rotation3D {
            x: rng.random_range(-deg..=deg),
            y: rng.random_range(-deg..=deg),
            z: rng.random_range(-deg..=deg),
        },
        AugmentKind::Scaling => AugmentParams::Scaling {
            factor: rng.random_range(0.5..=1.5),
        },
        AugmentKind::Shift => AugmentParams::Shift {
            offset: [
                rng.random_range(-0.1..=0.1),
                rng.random_range(-0.1..=0.1),
                rng.random_range(-0.1..=0.1),
            ],
        },
        AugmentKind::Dropout => {
            let fraction = rng.random_range(0.0..=0.2);
            let count = ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
            let mut removed = rand::seq::index::sample(rng, n, count).into_vec();
            removed.sort_unstable();
            AugmentParams::Dropout { removed }
        }
        AugmentKind::Jitter => {
            let gauss = Normal::new(0.0f64, 0.02).expect("fixed sigma");
            let mut noise = Array2::zeros((n, 3));
            for v in noise.iter_mut() {
                *v = gauss.sample(rng).clamp(-0.05, 0.05);
            }
            AugmentParams::Jitter { noise }
        }
    }
}

/// 3x3 rotation about x by `a` radians.
fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (c, s) = (a.cos(), a.sin());
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

/// 3x3 rotation about y by `a` radians.
fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (c, s) = (a.cos(), a.sin());
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// 3x3 rotation about z by `a` radians.
fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (c, s) = (a.cos(), a.sin());
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// In-place `v <- R v` on every row of `m`.
fn rotate_rows(m: &mut Array2<f64>, r: &[[f64; 3]; 3]) {
    for i in 0..m.nrows() {
        let v = [m[[i, 0]], m[[i, 1]], m[[i, 2]]];
        for c in 0..3 {
            m[[i, c]] = r[c][0] * v[0] + r[c][1] * v[1] + r[c][2] * v[2];
        }
    }
}

/// Rebuild a cloud keeping only the rows not listed in `removed` (which must
/// be sorted, deduplicated, and in range). Normals and label follow.
fn keep_complement(cloud: &PointCloud, removed: &[usize]) -> Result<PointCloud> {
    let n = cloud.len();
    for w in removed.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::BadCount {
                name: "removed indices",
                got: w[0],
                reason: "must be strictly increasing",
            });
        }
    }
    if let Some(&last) = removed.last() {
        if last >= n {
            return Err(Error::BadCount {
                name: "removed index",
                got: last,
                reason: "out of range",
            });
        }
    }
    if removed.len() >= n {
        return Err(Error::TooFewPoints {
            op: "point removal",
            needed: 1,
            got: 0,
        });
    }
    let mut mask = vec![true; n];
    for &i in removed {
        mask[i] = false;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut points = Array2::zeros((kept.len(), 3));
    for (row, &i) in kept.iter().enumerate() {
        let p = cloud.point(i);
        for c in 0..3 {
            points[[row, c]] = p[c];
        }
    }
    let mut out = PointCloud::new(points)?;
    if cloud.normals().is_some() {
        let mut normals = Array2::zeros((kept.len(), 3));
        for (row, &i) in kept.iter().enumerate() {
            let q = cloud.normal(i);
            for c in 0..3 {
                normals[[row, c]] = q[c];
            }
        }
        out = out.with_normals(normals)?;
    }
    if let Some(label) = cloud.label() {
        out = out.with_label(label);
    }
    Ok(out)
}

/// Apply fully drawn augmentation parameters. Rotations are applied to both
/// coordinates and normals; scaling, shifting, and jitter touch coordinates
/// only (isotropic scaling and translation leave directions unchanged).
pub fn apply_augment(cloud: &PointCloud, params: &AugmentParams) -> Result<PointCloud> {
    match params {
        AugmentParams::RotationZ { angle } => {
            let r = rot_z(*angle);
            let mut points = cloud.points().to_owned();
            rotate_rows(&mut points, &r);
            let rotated = cloud.replace_points(points)?;
            match cloud.normals() {
                Some(normals) => {
                    let mut nm = normals.to_owned();
                    rotate_rows(&mut nm, &r);
                    rotated.with_normals(nm)
                }
                None => Ok(rotated),
            }
        }
        AugmentParams::Rotation3D { x, y, z } => {
            let rs = [rot_x(*x), rot_y(*y), rot_z(*z)];
            let mut points = cloud.points().to_owned();
            for r in &rs {
                rotate_rows(&mut points, r);
            }
            let rotated = cloud.replace_points(points)?;
            match cloud.normals() {
                Some(normals) => {
                    let mut nm = normals.to_owned();
                    for r in &rs {
                        rotate_rows(&mut nm, r);
                    }
                    rotated.with_normals(nm)
                }
                None => Ok(rotated),
            }
        }
        AugmentParams::Scaling { factor } => {
            if !(factor.is_finite() && *factor > 0.0) {
                return Err(Error::BadParam {
                    name: "factor",
                    got: *factor,
                    reason: "must be finite and positive",
                });
            }
            cloud.replace_points(cloud.points().to_owned() * *factor)
        }
        AugmentParams::Shift { offset } => {
            let mut points = cloud.points().to_owned();
            for i in 0..points.nrows() {
                for c in 0..3 {
                    points[[i, c]] += offset[c];
                }
            }
            cloud.replace_points(points)
        }
        AugmentParams::Dropout { removed } => keep_complement(cloud, removed),
        AugmentParams::Jitter { noise } => {
            if noise.dim() != (cloud.len(), 3) {
                return Err(Error::DimensionMismatch {
                    context: "jitter noise rows vs cloud points",
                    left: noise.nrows(),
                    right: cloud.len(),
                });
            }
            cloud.replace_points(cloud.points().to_owned() + noise)
        }
    }
}

/// Draw and apply one augmentation. The RNG stream is keyed by the kind and
/// the sample index, so augmenting a dataset in parallel stays deterministic
/// and no two samples (or kinds) share draws.
pub fn augment(
    cloud: &PointCloud,
    kind: AugmentKind,
    seed: u64,
    sample_index: u64,
) -> Result<PointCloud> {
    debug_assert!(sample_index < 1 << 56, "sample index overflows the stream id");
    let mut rng = derive(seed, Domain::Augment, (kind.id() << 56) | sample_index);
    let params = draw_augment(kind, cloud.len(), &mut rng);
    apply_augment(cloud, &params)
}

/// Draw and apply a sequence of augmentations. Each step draws from its own
/// stream keyed by the kind and its position in the chain, so repeated kinds
/// and reordered chains never share randomness. Returns the transformed
/// cloud together with every step's drawn parameters, which is what
/// [`backprop_augment_chain`] needs to map gradients back to the input.
pub fn apply_augment_chain(
    cloud: &PointCloud,
    kinds: &[AugmentKind],
    seed: u64,
) -> Result<(PointCloud, Vec<AugmentParams>)> {
    let mut current = cloud.clone();
    let mut chain = Vec::with_capacity(kinds.len());
    for (step, &kind) in kinds.iter().enumerate() {
        let mut rng = derive(seed, Domain::Augment, (kind.id() << 56) | step as u64);
        let params = draw_augment(kind, current.len(), &mut rng);
        current = apply_augment(&current, &params)?;
        chain.push(params);
    }
    Ok((current, chain))
}

/// Map a loss gradient with respect to the augmented coordinates back to a
/// gradient with respect to the input coordinates of [`apply_augment`].
/// `n_in` is the input cloud's point count. All augmentations are affine in
/// the coordinates for a fixed draw: rotations transpose, scaling rescales,
/// shift and jitter pass through, and dropout scatters surviving rows back
/// to their original positions (removed rows receive zero).
pub fn backprop_augment(
    params: &AugmentParams,
    n_in: usize,
    grad_out: &ndarray::ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let expect_rows = |want: usize| -> Result<()> {
        if grad_out.nrows() != want || grad_out.ncols() != 3 {
            return Err(Error::DimensionMismatch {
                context: "augmentation gradient rows vs augmented cloud",
                left: grad_out.nrows(),
                right: want,
            });
        }
        Ok(())
    };
    // Row-vector convention: out = in · Rᵀ, hence d in = d out · R.
    let rotate_back = |rs: &[[[f64; 3]; 3]]| -> Result<Array2<f64>> {
        expect_rows(n_in)?;
        let mut grad = grad_out.to_owned();
        for r in rs.iter().rev() {
            for i in 0..grad.nrows() {
                let g = [grad[[i, 0]], grad[[i, 1]], grad[[i, 2]]];
                for c in 0..3 {
                    grad[[i, c]] = r[0][c] * g[0] + r[1][c] * g[1] + r[2][c] * g[2];
                }
            }
        }
        Ok(grad)
    };
    match params {
        AugmentParams::RotationZ { angle } => rotate_back(&[rot_z(*angle)]),
        AugmentParams::Rotation3D { x, y, z } => {
            rotate_back(&[rot_x(*x), rot_y(*y), rot_z(*z)])
        }
        AugmentParams::Scaling { factor } => {
            expect_rows(n_in)?;
            Ok(grad_out.to_owned() * *factor)
        }
        AugmentParams::Shift { .. } | AugmentParams::Jitter { .. } => {
            expect_rows(n_in)?;
            Ok(grad_out.to_owned())
        }
        AugmentParams::Dropout { removed } => {
            let n_out = n_in.checked_sub(removed.len()).ok_or(Error::BadCount {
                name: "removed indices",
                got: removed.len(),
                reason: "more removals than input points",
            })?;
            expect_rows(n_out)?;
            let mut mask = vec![true; n_in];
            for &i in removed {
                if i >= n_in {
                    return Err(Error::BadCount {
                        name: "removed index",
                        got: i,
                        reason: "out of range",
                    });
                }
                mask[i] = false;
            }
            let mut grad = Array2::zeros((n_in, 3));
            let mut row = 0usize;
            for i in 0..n_in {
                if mask[i] {
                    for c in 0..3 {
                        grad[[i, c]] = grad_out[[row, c]];
                    }
                    row += 1;
                }
            }
            if row != n_out {
                return Err(Error::BadCount {
                    name: "removed indices",
                    got: n_in - row,
                    reason: "duplicates in the removal list",
                });
            }
            Ok(grad)
        }
    }
}

/// Map a gradient back through a whole augmentation chain (the inverse walk
/// of [`apply_augment_chain`]). `n_in` is the original cloud's point count.
pub fn backprop_augment_chain(
    chain: &[AugmentParams],
    n_in: usize,
    grad_out: &ndarray::ArrayView2<f64>,
) -> Result<Array2<f64>> {
    // Point counts entering each step (dropout is the only size changer).
    let mut sizes = Vec::with_capacity(chain.len());
    let mut n = n_in;
    for params in chain {
        sizes.push(n);
        if let AugmentParams::Dropout { removed } = params {
            n = n.checked_sub(removed.len()).ok_or(Error::BadCount {
                name: "removed indices",
                got: removed.len(),
                reason: "more removals than input points",
            })?;
        }
    }
    let mut grad = grad_out.to_owned();
    for (params, &size) in chain.iter().zip(&sizes).rev() {
        grad = backprop_augment(params, size, &grad.view())?;
    }
    Ok(grad)
}

/// Outcome of statistical outlier removal.
#[derive(Debug, Clone)]
pub struct SorResult {
    /// Surviving points in their original order.
    pub cloud: PointCloud,
    /// Indices (into the input) of the removed points, ascending.
    pub removed: Vec<usize>,
}

/// Statistical outlier removal: a point is dropped when its mean distance to
/// its `k` nearest neighbours (itself excluded) exceeds the cloud-wide mean
/// of that statistic by more than `sigma_mult` standard deviations. The
/// minimum-distance point can never be dropped, so the result is non-empty.
pub fn sor(cloud: &PointCloud, k: usize, sigma_mult: f64) -> Result<SorResult> {
    let n = cloud.len();
    if k == 0 {
        return Err(Error::BadCount {
            name: "k",
            got: 0,
            reason: "must be at least 1",
        });
    }
    if k >= n {
        return Err(Error::BadCount {
            name: "k",
            got: k,
            reason: "must be smaller than the cloud size",
        });
    }
    if !(sigma_mult.is_finite() && sigma_mult >= 0.0) {
        return Err(Error::BadParam {
            name: "sigma_mult",
            got: sigma_mult,
            reason: "must be finite and non-negative",
        });
    }
    let means: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let p = cloud.point(i);
            // k+1 nearest including the query point itself; drop one
            // occurrence of i (ties at distance zero keep the other point).
            let mut neighbours = knn(cloud, p, k + 1)?;
            if let Some(pos) = neighbours.iter().position(|&j| j == i) {
                neighbours.remove(pos);
            } else {
                neighbours.truncate(k);
            }
            let mut sum = 0.0;
            for &j in neighbours.iter().take(k) {
                let q = cloud.point(j);
                let d2: f64 = (0..3).map(|c| (p[c] - q[c]) * (p[c] - q[c])).sum();
                sum += d2.sqrt();
            }
            Ok(sum / k as f64)
        })
        .collect::<Result<_>>()?;

    let mu = means.iter().sum::<f64>() / n as f64;
    let var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n as f64;
    let threshold = mu + sigma_mult * var.sqrt();
    let removed: Vec<usize> = (0..n).filter(|&i| means[i] > threshold).collect();
    let cloud = keep_complement(cloud, &removed)?;
    Ok(SorResult { cloud, removed })
}

/// Indices of the `n` points with the largest saliency, descending (ties by
/// ascending index). Saliency of a point is the L2 norm of the gradient of
/// the predicted-class logit with respect to that point's coordinates.
pub fn saliency_topk(params: &ModelParams, cloud: &PointCloud, n: usize) -> Result<Vec<usize>> {
    if n > cloud.len() {
        return Err(Error::BadCount {
            name: "n",
            got: n,
            reason: "cannot exceed the cloud size",
        });
    }
    let predicted = classifier::predict(params, cloud)?;
    let grad = classifier::logit_input_gradient(params, cloud, predicted)?;
    let mut order: Vec<(f64, usize)> = (0..cloud.len())
        .map(|i| {
            let g = grad.row(i);
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            (norm, i)
        })
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(n).map(|(_, i)| i).collect())
}

/// Remove the listed points (the saliency defense, given `saliency_topk`
/// output). Order of `indices` does not matter; duplicates are collapsed.
pub fn drop_points(cloud: &PointCloud, indices: &[usize]) -> Result<PointCloud> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    keep_complement(cloud, &sorted)
}

/// Outcome of the cluster-injection baseline.
#[derive(Debug, Clone)]
pub struct ClusterInjection {
    pub cloud: PointCloud,
    /// Indices whose rows now hold cluster points, ascending.
    pub replaced: Vec<usize>,
}

/// The crude baseline attack: replace a random 3% of points (at least one)
/// with points drawn uniformly inside a small ball far off the normalized
/// surface. Point count is preserved; replaced normals point away from the
/// ball center.
pub fn baseline_cluster_inject(cloud: &PointCloud, seed: u64) -> Result<ClusterInjection> {
    let n = cloud.len();
    let count = ((CLUSTER_FRACTION * n as f64).round() as usize).clamp(1, n);
    let mut rng = derive(seed, Domain::ClusterInject, 0);
    let mut replaced = rand::seq::index::sample(&mut rng, n, count).into_vec();
    replaced.sort_unstable();

    let mut points = cloud.points().to_owned();
    let mut normals = cloud.normals().map(|v| v.to_owned());
    for &i in &replaced {
        // uniform direction via uniform z and azimuth, uniform radius via
        // the cube-root transform
        let z: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let u: f64 = rng.random_range(0.0..=1.0);
        let s = (1.0 - z * z).max(0.0).sqrt();
        let dir = [s * phi.cos(), s * phi.sin(), z];
        let r = CLUSTER_RADIUS * u.cbrt();
        for c in 0..3 {
            points[[i, c]] = CLUSTER_CENTER[c] + r * dir[c];
        }
        if let Some(nm) = normals.as_mut() {
            for c in 0..3 {
                nm[[i, c]] = dir[c];
            }
        }
    }
    let mut out = cloud.replace_points(points)?;
    if let Some(nm) = normals {
        out = out.with_normals(nm)?;
    }
    Ok(ClusterInjection { cloud: out, replaced })
}
