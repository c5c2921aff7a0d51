//! Patch-local spectral machinery: kNN graphs, combinatorial Laplacians,
//! eigenbases, the graph Fourier transform, and trigger injection.
//!
//! A trigger is a single `k_g x 3` coefficient matrix ξ shared by every
//! selected patch of every sample. Injection adds `U ξ` to a patch's
//! coordinates, where `U` is the patch Laplacian's eigenbasis — algebraically
//! identical to `igft(gft(S) + ξ)` but exact at ξ = 0 and directly
//! differentiable, so the additive form is the production path and the
//! GFT/IGFT round trip is kept as an independent cross-check.

pub mod eigen;

use crate::error::{Error, Result};
use crate::geometry::{patchify, Patch, PointCloud};
use crate::imperceptibility::{score_cloud, select_patches, Selection, SelectionStrategy};
use ndarray::{Array2, ArrayView2};
use std::path::Path;

/// Unweighted symmetrized kNN graph over one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGraph {
    adjacency: Array2<f64>,
    degrees: Vec<usize>,
}

impl PatchGraph {
    /// Symmetric 0/1 adjacency matrix with zero diagonal.
    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    /// Row sums of the adjacency matrix (exact integer counts).
    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Number of graph nodes.
    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    /// True for the zero-node graph (never produced by `build_knn_graph`).
    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }
}

/// Build the patch graph: connect each member point to its `k_p` nearest
/// other members (ties by lowest index), then symmetrize with logical OR.
/// Requires `k_p < k_g`.
pub fn build_knn_graph(patch: &Patch, k_p: usize) -> Result<PatchGraph> {
    let k = patch.len();
    if k_p >= k {
        return Err(Error::BadCount {
            name: "k_p",
            got: k_p,
            reason: "must be smaller than the patch size k_g",
        });
    }
    let tree = crate::geometry::KdTree::build(patch.coords.view());
    let mut adjacency = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        let query = [
            patch.coords[[i, 0]],
            patch.coords[[i, 1]],
            patch.coords[[i, 2]],
        ];
        for j in tree.knn_excluding(query, k_p, Some(i)) {
            adjacency[[i, j]] = 1.0;
            adjacency[[j, i]] = 1.0;
        }
    }
    let degrees = (0..k)
        .map(|i| (0..k).filter(|&j| adjacency[[i, j]] == 1.0).count())
        .collect();
    Ok(PatchGraph { adjacency, degrees })
}

/// Combinatorial Laplacian `L = D - A`. Degrees are integer edge counts, so
/// every row sums to exactly 0.0 in floating point.
pub fn laplacian(graph: &PatchGraph) -> Array2<f64> {
    let k = graph.len();
    let mut l = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            l[[i, j]] = if i == j {
                graph.degrees[i] as f64
            } else {
                -graph.adjacency[[i, j]]
            };
        }
    }
    l
}

/// Orthonormal eigenbasis of a patch Laplacian: columns of `U` sorted by
/// ascending eigenvalue, signs canonicalized (largest-magnitude entry
/// positive, ties to the lowest row index).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    eigenvectors: Array2<f64>,
    eigenvalues: Vec<f64>,
}

impl SpectralBasis {
    /// `k_g x k_g` orthonormal matrix, one eigenvector per column.
    pub fn eigenvectors(&self) -> &Array2<f64> {
        &self.eigenvectors
    }

    /// Ascending eigenvalues, parallel to the columns.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Basis dimension (the patch size).
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    /// True for the zero-dimensional basis (never produced in practice).
    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Eigendecompose a (symmetric) Laplacian into a [`SpectralBasis`].
pub fn eigendecompose(l: &Array2<f64>) -> Result<SpectralBasis> {
    let (eigenvalues, eigenvectors) = eigen::symmetric_eigen_sorted(l)?;
    Ok(SpectralBasis {
        eigenvectors,
        eigenvalues,
    })
}

/// Graph Fourier transform: `Ŝ = Uᵀ S`.
pub fn gft(basis: &SpectralBasis, coords: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if coords.nrows() != basis.len() {
        return Err(Error::DimensionMismatch {
            context: "gft",
            left: basis.len(),
            right: coords.nrows(),
        });
    }
    Ok(basis.eigenvectors.t().dot(&coords))
}

/// Inverse graph Fourier transform: `S = U Ŝ`.
pub fn igft(basis: &SpectralBasis, spectral: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if spectral.nrows() != basis.len() {
        return Err(Error::DimensionMismatch {
            context: "igft",
            left: basis.len(),
            right: spectral.nrows(),
        });
    }
    Ok(basis.eigenvectors.dot(&spectral))
}

/// The optimizable spectral trigger ξ: one coefficient row per eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTrigger {
    coefficients: Array2<f64>,
}

impl SpectralTrigger {
    /// Wrap a `k x 3` coefficient matrix. Entries must be finite.
    pub fn new(coefficients: Array2<f64>) -> Result<Self> {
        if coefficients.ncols() != 3 {
            return Err(Error::BadPointWidth {
                expected: 3,
                got: coefficients.ncols(),
            });
        }
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "trigger coefficients",
            });
        }
        Ok(SpectralTrigger { coefficients })
    }

    /// The all-zero trigger (injection identity).
    pub fn zeros(rows: usize) -> Self {
        SpectralTrigger {
            coefficients: Array2::zeros((rows, 3)),
        }
    }

    /// Coefficient matrix view.
    pub fn coefficients(&self) -> &Array2<f64> {
        &self.coefficients
    }

    /// Mutable access for the trigger optimizer.
    pub fn coefficients_mut(&mut self) -> &mut Array2<f64> {
        &mut self.coefficients
    }

    /// Number of coefficient rows.
    pub fn rows(&self) -> usize {
        self.coefficients.nrows()
    }
}

/// Poisoned coordinates for one patch: `S' + U ξ` (the linear form of
/// `igft(gft(S') + ξ)`, exact at ξ = 0).
pub fn inject_trigger(
    patch: &Patch,
    basis: &SpectralBasis,
    trigger: &SpectralTrigger,
) -> Result<Array2<f64>> {
    injected_coords(patch.coords.view(), basis, trigger)
}

/// [`inject_trigger`] on a raw coordinate matrix.
pub fn injected_coords(
    coords: ArrayView2<'_, f64>,
    basis: &SpectralBasis,
    trigger: &SpectralTrigger,
) -> Result<Array2<f64>> {
    if coords.nrows() != basis.len() || trigger.rows() != basis.len() {
        return Err(Error::DimensionMismatch {
            context: "inject_trigger",
            left: basis.len(),
            right: coords.nrows().max(trigger.rows()),
        });
    }
    Ok(&coords + &basis.eigenvectors.dot(&trigger.coefficients))
}

/// Geometry/selection parameters that define *where* a trigger lands.
/// A subset of the full attack config, shared by poisoning and training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoisonParams {
    /// Number of patches produced by farthest point sampling.
    pub g: usize,
    /// Patch size (points per patch).
    pub k_g: usize,
    /// Number of selected patches.
    pub m: usize,
    /// Curvature/score neighbourhood size.
    pub k_c: usize,
    /// Patch-graph neighbour count.
    pub k_p: usize,
    /// Patch selection strategy.
    pub strategy: SelectionStrategy,
}

impl Default for PoisonParams {
    fn default() -> Self {
        PoisonParams {
            g: 32,
            k_g: 32,
            m: 16,
            k_c: 10,
            k_p: 10,
            strategy: SelectionStrategy::HighPis,
        }
    }
}

/// One selected patch inside a [`PoisonPlan`]: its members, its eigenbasis,
/// and the write-once mask resolving overlaps with higher-PIS patches.
#[derive(Debug, Clone)]
pub struct PlannedPatch {
    member_indices: Vec<usize>,
    basis: SpectralBasis,
    write_mask: Vec<bool>,
    pis: f64,
}

impl PlannedPatch {
    /// Cloud indices of the patch members (row-parallel to the basis).
    pub fn member_indices(&self) -> &[usize] {
        &self.member_indices
    }

    /// The patch Laplacian eigenbasis.
    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    /// `write_mask[r]` is true when row `r` of this patch actually writes its
    /// poisoned coordinate (false when a higher-PIS patch already owns it).
    pub fn write_mask(&self) -> &[bool] {
        &self.write_mask
    }

    /// Patch imperceptibility score used for ordering.
    pub fn pis(&self) -> f64 {
        self.pis
    }
}

/// Everything needed to poison one specific cloud: the selected patches in
/// descending-PIS order with their bases and write masks. Bases depend only
/// on geometry, so a plan can be cached and re-applied for every new ξ.
#[derive(Debug, Clone)]
pub struct PoisonPlan {
    n_points: usize,
    trigger_rows: usize,
    patches: Vec<PlannedPatch>,
}

impl PoisonPlan {
    /// Selected patches in application (descending PIS) order.
    pub fn patches(&self) -> &[PlannedPatch] {
        &self.patches
    }

    /// Required ξ row count (`k_g`, or `m·k_g` for the FPS-points strategy).
    pub fn trigger_rows(&self) -> usize {
        self.trigger_rows
    }

    /// Sorted indices of the points this plan rewrites.
    pub fn perturbed_indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .patches
            .iter()
            .flat_map(|p| {
                p.member_indices
                    .iter()
                    .zip(&p.write_mask)
                    .filter(|(_, &w)| w)
                    .map(|(&i, _)| i)
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Apply the plan: add `U ξ` rows onto the owned points of each selected
    /// patch. The input must be the cloud the plan was built from (same point
    /// count); inputs are always the original coordinates.
    pub fn apply(&self, cloud: &PointCloud, trigger: &SpectralTrigger) -> Result<PointCloud> {
        if cloud.len() != self.n_points {
            return Err(Error::DimensionMismatch {
                context: "poison plan application",
                left: self.n_points,
                right: cloud.len(),
            });
        }
        if trigger.rows() != self.trigger_rows {
            return Err(Error::DimensionMismatch {
                context: "trigger rows",
                left: self.trigger_rows,
                right: trigger.rows(),
            });
        }
        let mut points = cloud.points().to_owned();
        for patch in &self.patches {
            let delta = patch.basis.eigenvectors().dot(trigger.coefficients());
            for (r, &idx) in patch.member_indices.iter().enumerate() {
                if patch.write_mask[r] {
                    points[[idx, 0]] += delta[[r, 0]];
                    points[[idx, 1]] += delta[[r, 1]];
                    points[[idx, 2]] += delta[[r, 2]];
                }
            }
        }
        cloud.replace_points(points)
    }

    /// Chain rule through [`apply`](Self::apply): given the gradient of a
    /// scalar loss with respect to the poisoned coordinates (N×3), accumulate
    /// the gradient with respect to ξ. Since `apply` adds `Uξ` rows onto the
    /// written points, each patch contributes `Uᵀ · G` with the rows of `G`
    /// zeroed wherever the write mask is off.
    pub fn trigger_gradient(&self, poisoned_grad: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if poisoned_grad.nrows() != self.n_points || poisoned_grad.ncols() != 3 {
            return Err(Error::DimensionMismatch {
                context: "trigger gradient input",
                left: poisoned_grad.nrows(),
                right: self.n_points,
            });
        }
        let mut dxi = Array2::zeros((self.trigger_rows, 3));
        for patch in &self.patches {
            let k = patch.member_indices.len();
            let mut masked = Array2::zeros((k, 3));
            let mut any = false;
            for (r, &idx) in patch.member_indices.iter().enumerate() {
                if patch.write_mask[r] {
                    for c in 0..3 {
                        masked[[r, c]] = poisoned_grad[[idx, c]];
                    }
                    any = true;
                }
            }
            if any {
                dxi = dxi + patch.basis.eigenvectors().t().dot(&masked);
            }
        }
        Ok(dxi)
    }
}

/// Build the poison plan for one cloud: patchify, score, select, and prepare
/// per-patch bases plus the write-once overlap masks (descending-PIS order).
pub fn build_poison_plan(
    cloud: &PointCloud,
    params: &PoisonParams,
    seed: u64,
) -> Result<PoisonPlan> {
    let trigger_rows = match params.strategy {
        SelectionStrategy::FpsPoints => params.m * params.k_g,
        _ => params.k_g,
    };
    if params.m == 0 {
        return Ok(PoisonPlan {
            n_points: cloud.len(),
            trigger_rows,
            patches: Vec::new(),
        });
    }
    let patches = patchify(cloud, params.g, params.k_g, seed)?;
    let map = score_cloud(cloud, &patches, params.k_c)?;
    let selection = select_patches(cloud, &patches, &map, params.m, params.strategy, seed)?;
    let selected: Vec<(Patch, f64)> = match selection {
        Selection::Patches(indices) => indices
            .into_iter()
            .map(|i| (patches[i].clone(), map.patch_scores[i]))
            .collect(),
        Selection::PointSet(pseudo) => {
            let pis = pseudo
                .member_indices
                .iter()
                .map(|&i| map.point_scores[i])
                .sum::<f64>()
                / pseudo.len() as f64;
            vec![(pseudo, pis)]
        }
    };

    let mut owned = vec![false; cloud.len()];
    let mut planned = Vec::with_capacity(selected.len());
    for (patch, pis) in selected {
        let graph = build_knn_graph(&patch, params.k_p)?;
        let basis = eigendecompose(&laplacian(&graph))?;
        let write_mask: Vec<bool> = patch
            .member_indices
            .iter()
            .map(|&i| {
                let first = !owned[i];
                owned[i] = true;
                first
            })
            .collect();
        planned.push(PlannedPatch {
            member_indices: patch.member_indices,
            basis,
            write_mask,
            pis,
        });
    }
    Ok(PoisonPlan {
        n_points: cloud.len(),
        trigger_rows,
        patches: planned,
    })
}

/// One-shot poisoning: build the plan for `cloud` and apply `trigger`.
/// Deterministic in `(cloud, params, trigger, seed)`.
pub fn poison_sample(
    cloud: &PointCloud,
    params: &PoisonParams,
    trigger: &SpectralTrigger,
    seed: u64,
) -> Result<PointCloud> {
    build_poison_plan(cloud, params, seed)?.apply(cloud, trigger)
}

/// Write a trigger file: little-endian `u32` row count, then the row-major
/// `k x 3` coefficients as 64-bit floats.
pub fn save_trigger(trigger: &SpectralTrigger, path: &Path) -> Result<()> {
    let mut w = crate::ioutil::create_writer(path)?;
    let k = u32::try_from(trigger.rows()).expect("trigger row count fits in u32");
    w.write_u32(k)?;
    for v in trigger.coefficients.iter() {
        w.write_f64(*v)?;
    }
    w.finish()
}

/// Read a trigger file written by [`save_trigger`].
pub fn load_trigger(path: &Path) -> Result<SpectralTrigger> {
    let mut r = crate::ioutil::open_reader(path)?;
    let k = r.read_u32()? as usize;
    let mut coefficients = Array2::zeros((k, 3));
    for row in 0..k {
        for c in 0..3 {
            coefficients[[row, c]] = r.read_f64()?;
        }
    }
    SpectralTrigger::new(coefficients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Domain};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::Rng;

    fn patch_from_rows(rows: &[[f64; 3]]) -> Patch {
        let cloud = PointCloud::from_rows(rows).unwrap();
        Patch {
            center_index: 0,
            member_indices: (0..rows.len()).collect(),
            coords: cloud.points().to_owned(),
        }
    }

    fn random_patch(k: usize, seed: u64) -> Patch {
        let mut rng = derive(seed, Domain::ShapeSample, 7777);
        let rows: Vec<[f64; 3]> = (0..k)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        patch_from_rows(&rows)
    }

    fn random_matrix(rows: usize, seed: u64) -> Array2<f64> {
        let mut rng = derive(seed, Domain::ShapeSample, 8888);
        let mut m = Array2::zeros((rows, 3));
        for v in m.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn three_points_k2_is_complete_graph() {
        let patch = patch_from_rows(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let graph = build_knn_graph(&patch, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 1.0 };
                assert_eq!(graph.adjacency()[[i, j]], expected);
            }
        }
        assert_eq!(graph.degrees(), &[2, 2, 2]);
        // K3 spectrum {0, 3, 3}
        let basis = eigendecompose(&laplacian(&graph)).unwrap();
        let vals = basis.eigenvalues();
        assert_abs_diff_eq!(vals[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(vals[1], 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(vals[2], 3.0, epsilon = 1e-9);
    }

    #[test]
    fn collinear_points_k1_symmetrize_to_path() {
        // Directed edges 0→1, 1→0, 2→1; OR-symmetrization adds 1–2.
        let patch = patch_from_rows(&[[0.0; 3], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let graph = build_knn_graph(&patch, 1).unwrap();
        let expected = arr2(&[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        assert_eq!(graph.adjacency(), &expected);
        let l = laplacian(&graph);
        let expected_l = arr2(&[[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]]);
        assert_eq!(l, expected_l);
        // Path-3 spectrum {0, 1, 3}
        let basis = eigendecompose(&l).unwrap();
        assert_abs_diff_eq!(basis.eigenvalues()[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(basis.eigenvalues()[1], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(basis.eigenvalues()[2], 3.0, epsilon = 1e-9);
    }

    #[test]
    fn k_p_must_be_smaller_than_patch() {
        let patch = patch_from_rows(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(build_knn_graph(&patch, 3).is_err());
    }

    #[test]
    fn laplacian_rows_sum_to_exactly_zero() {
        let patch = random_patch(24, 3);
        let graph = build_knn_graph(&patch, 5).unwrap();
        let l = laplacian(&graph);
        for i in 0..24 {
            let sum: f64 = (0..24).map(|j| l[[i, j]]).sum();
            assert_eq!(sum, 0.0, "row {i} sums to {sum}, not exactly zero");
        }
        assert_eq!(l, l.t().to_owned());
    }

    #[test]
    fn basis_invariants_on_random_patch() {
        let patch = random_patch(32, 11);
        let graph = build_knn_graph(&patch, 10).unwrap();
        let l = laplacian(&graph);
        let basis = eigendecompose(&l).unwrap();
        let u = basis.eigenvectors();
        // orthonormality
        let gram = u.t().dot(u);
        let mut frob = 0.0f64;
        for i in 0..32 {
            for j in 0..32 {
                let t = gram[[i, j]] - if i == j { 1.0 } else { 0.0 };
                frob += t * t;
            }
        }
        assert!(frob.sqrt() <= 1e-9, "UᵀU−I Frobenius = {}", frob.sqrt());
        // reconstruction
        let lu = l.dot(u);
        for col in 0..32 {
            for row in 0..32 {
                let resid = (lu[[row, col]] - basis.eigenvalues()[col] * u[[row, col]]).abs();
                assert!(resid <= 1e-7, "LU − UΛ residual {resid}");
            }
        }
        assert!(basis.eigenvalues()[0] >= -1e-9);
        for w in basis.eigenvalues().windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn connected_graph_has_single_zero_eigenvalue_with_constant_vector() {
        let patch = random_patch(16, 5);
        let graph = build_knn_graph(&patch, 4).unwrap();
        let basis = eigendecompose(&laplacian(&graph)).unwrap();
        let zeros = basis
            .eigenvalues()
            .iter()
            .filter(|&&v| v.abs() < 1e-9)
            .count();
        assert_eq!(zeros, 1, "random geometric patch should be connected");
        let expected = 1.0 / (16.0f64).sqrt();
        for row in 0..16 {
            assert_abs_diff_eq!(basis.eigenvectors()[[row, 0]], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn edgeless_graph_gives_identity_basis() {
        let patch = random_patch(6, 2);
        let graph = build_knn_graph(&patch, 0).unwrap();
        let basis = eigendecompose(&laplacian(&graph)).unwrap();
        assert_eq!(basis.eigenvalues(), &[0.0; 6]);
        assert_eq!(basis.eigenvectors(), &Array2::<f64>::eye(6));
    }

    #[test]
    fn gft_igft_roundtrip_and_parseval() {
        let patch = random_patch(20, 9);
        let graph = build_knn_graph(&patch, 6).unwrap();
        let basis = eigendecompose(&laplacian(&graph)).unwrap();
        let coords = random_matrix(20, 1);
        let spectral = gft(&basis, coords.view()).unwrap();
        let back = igft(&basis, spectral.view()).unwrap();
        for (a, b) in coords.iter().zip(back.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
        let f = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(f(&coords), f(&spectral), epsilon = 1e-9 * f(&coords).max(1.0));
        // inverse direction: gft(igft(Ŝ)) = Ŝ
        let spec2 = random_matrix(20, 2);
        let round = gft(&basis, igft(&basis, spec2.view()).unwrap().view()).unwrap();
        for (a, b) in spec2.iter().zip(round.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn gft_of_constant_signal_concentrates_in_zero_row() {
        let patch = random_patch(12, 21);
        let graph = build_knn_graph(&patch, 4).unwrap();
        let basis = eigendecompose(&laplacian(&graph)).unwrap();
        let mut coords = Array2::zeros((12, 3));
        for mut row in coords.rows_mut() {
            row[0] = 0.4;
            row[1] = -1.2;
            row[2] = 2.5;
        }
        let spectral = gft(&basis, coords.view()).unwrap();
        for r in 1..12 {
            for c in 0..3 {
                assert!(
                    spectral[[r, c]].abs() <= 1e-9,
                    "energy leaked to row {r}: {}",
                    spectral[[r, c]]
                );
            }
        }
    }

    #[test]
    fn gft_of_basis_is_identity() {
        let patch = random_patch(10, 23);
        let graph = build_knn_graph(&patch, 3).unwrap();
        let basis = eigendecompose(&laplacian(&graph)).unwrap();
        let s = basis.eigenvectors().clone();
        let spectral = gft(&basis, s.view()).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(spectral[[i, j]], expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn inject_zero_trigger_is_identity() {
        let patch = random_patch(14, 31);
        let graph = build_knn_graph(&patch, 5).unwrap();
        let basis = eigendecompose(&laplacian(&graph)).unwrap();
        let out = inject_trigger(&patch, &basis, &SpectralTrigger::zeros(14)).unwrap();
        assert_eq!(out, patch.coords);
    }

    #[test]
    fn inject_single_row_is_rank_one_update() {
        let patch = random_patch(14, 33);
        let graph = build_knn_graph(&patch, 5).unwrap();
        let basis = eigendecompose(&laplacian(&graph)).unwrap();
        let mut xi = Array2::zeros((14, 3));
        let r = 3;
        xi[[r, 0]] = 0.25;
        xi[[r, 1]] = -0.5;
        xi[[r, 2]] = 0.125;
        let trigger = SpectralTrigger::new(xi.clone()).unwrap();
        let out = inject_trigger(&patch, &basis, &trigger).unwrap();
        for row in 0..14 {
            for c in 0..3 {
                let expected =
                    patch.coords[[row, c]] + basis.eigenvectors()[[row, r]] * xi[[r, c]];
                assert_abs_diff_eq!(out[[row, c]], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn injection_matches_spectral_route_and_preserves_norm() {
        let patch = random_patch(16, 35);
        let graph = build_knn_graph(&patch, 6).unwrap();
        let basis = eigendecompose(&laplacian(&graph)).unwrap();
        let trigger = SpectralTrigger::new(random_matrix(16, 3)).unwrap();
        let additive = inject_trigger(&patch, &basis, &trigger).unwrap();
        // Independent route: through the spectral domain.
        let mut spectral = gft(&basis, patch.coords.view()).unwrap();
        spectral += trigger.coefficients();
        let via_spectrum = igft(&basis, spectral.view()).unwrap();
        for (a, b) in additive.iter().zip(via_spectrum.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
        // ‖Uξ‖_F = ‖ξ‖_F (orthonormality)
        let delta = &additive - &patch.coords;
        let f = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(f(&delta), f(trigger.coefficients()), epsilon = 1e-9);
    }

    fn bumpy_cloud(n: usize, seed: u64) -> PointCloud {
        // Jittered grid: distinct pairwise distances, non-trivial curvature.
        let mut rng = derive(seed, Domain::ShapeSample, 4141);
        let side = (n as f64).sqrt().ceil() as usize;
        let rows: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let x = (i % side) as f64;
                let y = (i / side) as f64;
                [
                    x + rng.random_range(-0.2..0.2),
                    y + rng.random_range(-0.2..0.2),
                    (x * 0.9).sin() * 0.5 + rng.random_range(-0.2..0.2),
                ]
            })
            .collect();
        PointCloud::from_rows(&rows).unwrap().normalize().unwrap()
    }

    #[test]
    fn poison_with_m_zero_or_zero_trigger_is_identity() {
        let cloud = bumpy_cloud(60, 1);
        let mut params = PoisonParams {
            g: 6,
            k_g: 12,
            m: 0,
            k_c: 5,
            k_p: 4,
            strategy: SelectionStrategy::HighPis,
        };
        let trigger = SpectralTrigger::new(random_matrix(12, 5)).unwrap();
        let out = poison_sample(&cloud, &params, &trigger, 7).unwrap();
        assert_eq!(out.points(), cloud.points());

        params.m = 3;
        let zero = SpectralTrigger::zeros(12);
        let out = poison_sample(&cloud, &params, &zero, 7).unwrap();
        assert_eq!(out.points(), cloud.points());
    }

    #[test]
    fn poison_is_deterministic_and_write_once() {
        let cloud = bumpy_cloud(80, 2);
        let params = PoisonParams {
            g: 10,
            k_g: 16,
            m: 6,
            k_c: 5,
            k_p: 4,
            strategy: SelectionStrategy::HighPis,
        };
        let trigger = SpectralTrigger::new(random_matrix(16, 6)).unwrap();
        let a = poison_sample(&cloud, &params, &trigger, 3).unwrap();
        let b = poison_sample(&cloud, &params, &trigger, 3).unwrap();
        assert_eq!(a.points(), b.points());

        let plan = build_poison_plan(&cloud, &params, 3).unwrap();
        // descending PIS order
        let pis: Vec<f64> = plan.patches().iter().map(|p| p.pis()).collect();
        for w in pis.windows(2) {
            assert!(w[0] >= w[1], "patches not in descending PIS order: {pis:?}");
        }
        // write-once: across all patches, each point owns at most one write
        let mut seen = std::collections::HashSet::new();
        for patch in plan.patches() {
            for (r, &idx) in patch.member_indices().iter().enumerate() {
                if patch.write_mask()[r] {
                    assert!(seen.insert(idx), "point {idx} written twice");
                }
            }
        }
        // overlap exists in this configuration (g·k_g > N)
        let written = seen.len();
        assert!(
            written < params.m * params.k_g,
            "expected overlap: {written} written of {} slots",
            params.m * params.k_g
        );
        // non-members unchanged, written points moved by their patch delta
        let poisoned = plan.apply(&cloud, &trigger).unwrap();
        for i in 0..cloud.len() {
            let moved = poisoned.point(i) != cloud.point(i);
            assert_eq!(
                moved && !seen.contains(&i),
                false,
                "unwritten point {i} moved"
            );
        }
    }

    #[test]
    fn poison_commutes_with_permutation() {
        let cloud = bumpy_cloud(50, 9);
        let params = PoisonParams {
            g: 8,
            k_g: 10,
            m: 4,
            k_c: 5,
            k_p: 3,
            strategy: SelectionStrategy::HighPis,
        };
        let trigger = SpectralTrigger::new(random_matrix(10, 8)).unwrap();
        let perm: Vec<usize> = {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..cloud.len()).collect();
            idx.shuffle(&mut derive(4, Domain::ShapeSample, 0));
            idx
        };
        let permuted_rows: Vec<[f64; 3]> = perm.iter().map(|&i| cloud.point(i)).collect();
        let permuted = PointCloud::from_rows(&permuted_rows).unwrap();
        let a = poison_sample(&cloud, &params, &trigger, 5).unwrap();
        let b = poison_sample(&permuted, &params, &trigger, 5).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(
                b.point(new_row),
                a.point(old_row),
                "permutation covariance broke at row {old_row}"
            );
        }
    }

    #[test]
    fn fps_points_strategy_uses_one_pseudo_patch() {
        let cloud = bumpy_cloud(70, 12);
        let params = PoisonParams {
            g: 8,
            k_g: 8,
            m: 4,
            k_c: 5,
            k_p: 3,
            strategy: SelectionStrategy::FpsPoints,
        };
        let plan = build_poison_plan(&cloud, &params, 6).unwrap();
        assert_eq!(plan.patches().len(), 1);
        assert_eq!(plan.trigger_rows(), 32);
        assert_eq!(plan.patches()[0].member_indices().len(), 32);
        let trigger = SpectralTrigger::new(random_matrix(32, 13)).unwrap();
        let out = plan.apply(&cloud, &trigger).unwrap();
        assert_eq!(out.len(), cloud.len());
        // all 32 FPS points perturbed (no overlap within a single patch)
        assert_eq!(plan.perturbed_indices().len(), 32);
    }

    #[test]
    fn trigger_file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trigger.bin");
        let trigger = SpectralTrigger::new(random_matrix(32, 77)).unwrap();
        save_trigger(&trigger, &path).unwrap();
        let back = load_trigger(&path).unwrap();
        assert_eq!(trigger.coefficients(), back.coefficients());
    }

    #[test]
    fn truncated_trigger_file_names_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.bin");
        let trigger = SpectralTrigger::new(random_matrix(4, 78)).unwrap();
        save_trigger(&trigger, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        match load_trigger(&path).unwrap_err() {
            Error::Truncated { offset, .. } => {
                // 4-byte header + 11 complete doubles read; the 12th fails at 4+11*8
                assert_eq!(offset, 4 + 11 * 8);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn mismatched_trigger_rows_are_rejected() {
        let cloud = bumpy_cloud(40, 15);
        let params = PoisonParams {
            g: 4,
            k_g: 8,
            m: 2,
            k_c: 4,
            k_p: 3,
            strategy: SelectionStrategy::HighPis,
        };
        let plan = build_poison_plan(&cloud, &params, 1).unwrap();
        let wrong = SpectralTrigger::zeros(9);
        assert!(matches!(
            plan.apply(&cloud, &wrong).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn trigger_gradient_matches_finite_differences() {
        // L(ξ) = Σ_ij W_ij · apply(cloud, ξ)_ij is linear in ξ, so central
        // differences recover its gradient Uᵀ-projected through the plan
        // essentially exactly.
        let cloud = bumpy_cloud(50, 23);
        let params = PoisonParams {
            g: 5,
            k_g: 10,
            m: 3,
            k_c: 4,
            k_p: 3,
            strategy: SelectionStrategy::HighPis,
        };
        let plan = build_poison_plan(&cloud, &params, 2).unwrap();
        let weights = {
            let mut rng = derive(99, Domain::ShapeSample, 1234);
            Array2::from_shape_fn((cloud.len(), 3), |_| rng.random_range(-1.0..1.0))
        };
        let loss = |trigger: &SpectralTrigger| -> f64 {
            let poisoned = plan.apply(&cloud, trigger).unwrap();
            (&poisoned.points() * &weights.view()).sum()
        };
        let trigger = SpectralTrigger::new(random_matrix(10, 31)).unwrap();
        let analytic = plan.trigger_gradient(&weights.view()).unwrap();
        let h = 1e-5;
        for r in 0..10 {
            for c in 0..3 {
                let mut plus = trigger.clone();
                plus.coefficients_mut()[[r, c]] += h;
                let mut minus = trigger.clone();
                minus.coefficients_mut()[[r, c]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert_abs_diff_eq!(fd, analytic[[r, c]], epsilon = 1e-6);
            }
        }

        // wrong input shape is rejected
        let bad = Array2::<f64>::zeros((cloud.len() + 1, 3));
        assert!(plan.trigger_gradient(&bad.view()).is_err());
    }
}
