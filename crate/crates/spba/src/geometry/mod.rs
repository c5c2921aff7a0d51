//! Point-cloud containers and the geometric groundwork of the pipeline:
//! normalization, exact k-NN, farthest point sampling, patchification, and
//! covariance-based normal estimation.
//!
//! All selection rules here are deterministic. Randomness (the farthest point
//! sampling start) is driven by an explicit seed, and every tie — equal
//! distances, equal coordinates — is broken by the lowest index.

mod kdtree;
mod xyz;

pub use kdtree::KdTree;
pub use xyz::{read_xyz, write_xyz};

use crate::error::{Error, Result};
use crate::rng::{derive, Domain};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

/// Tolerance for accepting a supplied normal as unit length.
const UNIT_NORMAL_TOL: f64 = 1e-6;

/// A labeled 3D point cloud with optional per-point unit normals.
///
/// Invariants enforced at construction and on every mutation:
/// coordinates are finite, the matrix is `N x 3`, and normals (when present)
/// are unit length and row-parallel to the points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
    normals: Option<Array2<f64>>,
    label: Option<usize>,
}

impl PointCloud {
    /// Wrap an `N x 3` coordinate matrix. Rejects non-finite entries and
    /// wrong widths.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        check_points(&points, "point cloud")?;
        Ok(PointCloud {
            points,
            normals: None,
            label: None,
        })
    }

    /// Convenience constructor from row slices.
    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        let mut a = Array2::zeros((rows.len(), 3));
        for (i, r) in rows.iter().enumerate() {
            a[[i, 0]] = r[0];
            a[[i, 1]] = r[1];
            a[[i, 2]] = r[2];
        }
        PointCloud::new(a)
    }

    /// Attach per-point unit normals. Row count must match the points and
    /// every row must have length 1 within `1e-6`.
    pub fn with_normals(mut self, normals: Array2<f64>) -> Result<Self> {
        check_points(&normals, "normals")?;
        if normals.nrows() != self.points.nrows() {
            return Err(Error::NormalCountMismatch {
                normals: normals.nrows(),
                points: self.points.nrows(),
            });
        }
        for (i, row) in normals.rows().into_iter().enumerate() {
            let len = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            if (len - 1.0).abs() > UNIT_NORMAL_TOL {
                return Err(Error::NotUnitNormal {
                    index: i,
                    length: len,
                    tol: UNIT_NORMAL_TOL,
                });
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    /// Attach a class label.
    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    /// Replace the coordinates, keeping normals and label. The new matrix
    /// must have the same row count when normals are present.
    pub fn replace_points(&self, points: Array2<f64>) -> Result<Self> {
        check_points(&points, "point cloud")?;
        if let Some(n) = &self.normals {
            if n.nrows() != points.nrows() {
                return Err(Error::NormalCountMismatch {
                    normals: n.nrows(),
                    points: points.nrows(),
                });
            }
        }
        Ok(PointCloud {
            points,
            normals: self.normals.clone(),
            label: self.label,
        })
    }

    /// Coordinate matrix view (`N x 3`).
    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    /// Normal matrix view, if normals are attached.
    pub fn normals(&self) -> Option<ArrayView2<'_, f64>> {
        self.normals.as_ref().map(|n| n.view())
    }

    /// Class label, if one is attached.
    pub fn label(&self) -> Option<usize> {
        self.label
    }

    /// Number of points.
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    /// True when the cloud has no points.
    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// The `i`-th point as an array.
    pub fn point(&self, i: usize) -> [f64; 3] {
        [
            self.points[[i, 0]],
            self.points[[i, 1]],
            self.points[[i, 2]],
        ]
    }

    /// The `i`-th normal as an array. Panics when normals are absent.
    pub fn normal(&self, i: usize) -> [f64; 3] {
        let n = self.normals.as_ref().expect("cloud has no normals");
        [n[[i, 0]], n[[i, 1]], n[[i, 2]]]
    }

    /// Center the cloud on its centroid and scale so the farthest point sits
    /// on the unit sphere. Normals and label carry over unchanged (rigid
    /// translation plus uniform scaling do not rotate normals).
    ///
    /// Fails with [`Error::ZeroExtent`] when all points coincide.
    pub fn normalize(&self) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::TooFewPoints {
                op: "normalize",
                needed: 1,
                got: 0,
            });
        }
        let centroid = self
            .points
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty cloud has a centroid");
        let mut centered = self.points.clone();
        for mut row in centered.rows_mut() {
            row[0] -= centroid[0];
            row[1] -= centroid[1];
            row[2] -= centroid[2];
        }
        let max_norm = centered
            .rows()
            .into_iter()
            .map(|r| (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt())
            .fold(0.0f64, f64::max);
        if max_norm == 0.0 {
            return Err(Error::ZeroExtent);
        }
        centered.mapv_inplace(|v| v / max_norm);
        self.replace_points(centered)
    }
}

fn check_points(points: &Array2<f64>, context: &'static str) -> Result<()> {
    if points.ncols() != 3 {
        return Err(Error::BadPointWidth {
            expected: 3,
            got: points.ncols(),
        });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context });
    }
    Ok(())
}

/// A local patch: a center point and the `k_g` cloud indices that form its
/// neighbourhood, together with a snapshot of their coordinates.
///
/// `member_indices[0]` is always `center_index`; the remaining members are
/// the `k_g - 1` nearest other points ordered by `(distance, index)`.
/// `coords` rows are parallel to `member_indices` and hold the *original*
/// (unnormalized-by-the-patch, cloud-frame) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center_index: usize,
    pub member_indices: Vec<usize>,
    pub coords: Array2<f64>,
}

impl Patch {
    /// Number of member points.
    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    /// True when the patch has no members (never produced by `patchify`).
    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }
}

/// The `k` nearest neighbours of `query` among the cloud's points, sorted by
/// `(distance, index)`. Requires `1 <= k <= N`.
pub fn knn(cloud: &PointCloud, query: [f64; 3], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::BadCount {
            name: "k",
            got: 0,
            reason: "must be at least 1",
        });
    }
    if k > cloud.len() {
        return Err(Error::TooFewPoints {
            op: "knn",
            needed: k,
            got: cloud.len(),
        });
    }
    Ok(KdTree::build(cloud.points()).knn(query, k))
}

/// Farthest point sampling: pick `g` indices that spread across the cloud.
///
/// The first center is a seeded-uniform draw; to keep the draw independent of
/// storage order, the uniform rank is taken in the coordinate-lexicographic
/// ordering of the points (ties by index). Every later center is the point
/// maximizing the distance to its nearest already-selected center, ties by
/// lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, g: usize, seed: u64) -> Result<Vec<usize>> {
    let n = cloud.len();
    if g == 0 {
        return Err(Error::BadCount {
            name: "g",
            got: 0,
            reason: "must be at least 1",
        });
    }
    if g > n {
        return Err(Error::TooFewPoints {
            op: "farthest_point_sample",
            needed: g,
            got: n,
        });
    }
    let mut rng = derive(seed, Domain::Fps, 0);
    let rank = rng.random_range(0..n);
    let mut lex: Vec<usize> = (0..n).collect();
    lex.sort_unstable_by(|&a, &b| {
        let pa = cloud.point(a);
        let pb = cloud.point(b);
        pa[0]
            .total_cmp(&pb[0])
            .then(pa[1].total_cmp(&pb[1]))
            .then(pa[2].total_cmp(&pb[2]))
            .then(a.cmp(&b))
    });
    let first = lex[rank];

    let mut selected = Vec::with_capacity(g);
    selected.push(first);
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| dist2(cloud.point(i), cloud.point(first)))
        .collect();
    while selected.len() < g {
        let mut best = 0usize;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        selected.push(best);
        let bp = cloud.point(best);
        for i in 0..n {
            let d2 = dist2(cloud.point(i), bp);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }
    Ok(selected)
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Split the cloud into `g` patches of `k_g` points each: centers via
/// farthest point sampling, members via exact k-NN around each center.
/// Patches may overlap; member coordinates are the original cloud
/// coordinates.
pub fn patchify(cloud: &PointCloud, g: usize, k_g: usize, seed: u64) -> Result<Vec<Patch>> {
    if k_g == 0 {
        return Err(Error::BadCount {
            name: "k_g",
            got: 0,
            reason: "must be at least 1",
        });
    }
    if k_g > cloud.len() {
        return Err(Error::TooFewPoints {
            op: "patchify",
            needed: k_g,
            got: cloud.len(),
        });
    }
    let centers = farthest_point_sample(cloud, g, seed)?;
    let tree = KdTree::build(cloud.points());
    let mut patches = Vec::with_capacity(g);
    for center in centers {
        let mut member_indices = Vec::with_capacity(k_g);
        member_indices.push(center);
        member_indices.extend(tree.knn_excluding(cloud.point(center), k_g - 1, Some(center)));
        let coords = gather_rows(cloud.points(), &member_indices);
        patches.push(Patch {
            center_index: center,
            member_indices,
            coords,
        });
    }
    Ok(patches)
}

/// Copy the rows named by `indices` into a fresh matrix of the same width.
pub(crate) fn gather_rows(matrix: ArrayView2<'_, f64>, indices: &[usize]) -> Array2<f64> {
    let cols = matrix.ncols();
    let mut out = Array2::zeros((indices.len(), cols));
    for (r, &i) in indices.iter().enumerate() {
        for c in 0..cols {
            out[[r, c]] = matrix[[i, c]];
        }
    }
    out
}

/// Result of [`estimate_normals`]: the cloud with normals attached plus the
/// indices whose neighbourhoods were too degenerate (rank < 2) for a plane
/// fit; those fall back to the +z normal.
#[derive(Debug, Clone)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub degenerate: Vec<usize>,
}

/// Estimate per-point unit normals as the smallest-eigenvalue eigenvector of
/// the `k`-neighbourhood covariance (the neighbourhood includes the point
/// itself). Normals are oriented away from the cloud centroid; when that dot
/// product is exactly zero the sign is resolved toward positive z, then
/// positive y, then positive x. Requires `3 <= k <= N`.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<NormalEstimate> {
    if k < 3 {
        return Err(Error::BadCount {
            name: "k",
            got: k,
            reason: "normal estimation needs at least 3 neighbours",
        });
    }
    if k > cloud.len() {
        return Err(Error::TooFewPoints {
            op: "estimate_normals",
            needed: k,
            got: cloud.len(),
        });
    }
    let tree = KdTree::build(cloud.points());
    let centroid = cloud
        .points
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty cloud");
    let mut normals = Array2::zeros((cloud.len(), 3));
    let mut degenerate = Vec::new();
    for i in 0..cloud.len() {
        let neigh = tree.knn(cloud.point(i), k);
        let mut mean = [0.0f64; 3];
        for &j in &neigh {
            let p = cloud.point(j);
            mean[0] += p[0];
            mean[1] += p[1];
            mean[2] += p[2];
        }
        for m in &mut mean {
            *m /= k as f64;
        }
        let mut cov = Array2::<f64>::zeros((3, 3));
        for &j in &neigh {
            let p = cloud.point(j);
            let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
            for r in 0..3 {
                for c in 0..3 {
                    cov[[r, c]] += d[r] * d[c];
                }
            }
        }
        cov.mapv_inplace(|v| v / k as f64);
        let (eigenvalues, eigenvectors) = crate::spectral::eigen::symmetric_eigen_sorted(&cov)?;
        // Rank check: collinear (or fully coincident) neighbourhoods have
        // their two smallest eigenvalues at ~0 and admit no stable normal.
        let rank_deficient = eigenvalues[1] <= eigenvalues[2] * 1e-9;
        let n = if rank_deficient {
            degenerate.push(i);
            [0.0, 0.0, 1.0]
        } else {
            let mut n = [
                eigenvectors[[0, 0]],
                eigenvectors[[1, 0]],
                eigenvectors[[2, 0]],
            ];
            let p = cloud.point(i);
            let outward = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
            let dot = n[0] * outward[0] + n[1] * outward[1] + n[2] * outward[2];
            let flip = if dot != 0.0 {
                dot < 0.0
            } else if n[2] != 0.0 {
                // Tangential point: orient toward +z, then +y, then +x.
                n[2] < 0.0
            } else if n[1] != 0.0 {
                n[1] < 0.0
            } else {
                n[0] < 0.0
            };
            if flip {
                n = [-n[0], -n[1], -n[2]];
            }
            n
        };
        normals[[i, 0]] = n[0];
        normals[[i, 1]] = n[1];
        normals[[i, 2]] = n[2];
    }
    let out = cloud.clone().with_normals(normals)?;
    Ok(NormalEstimate {
        cloud: out,
        degenerate,
    })
}

/// Mean of the points, exposed for fixtures and diagnostics.
pub fn centroid(cloud: &PointCloud) -> Result<Array1<f64>> {
    if cloud.is_empty() {
        return Err(Error::TooFewPoints {
            op: "centroid",
            needed: 1,
            got: 0,
        });
    }
    Ok(cloud
        .points
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty cloud"))
}
