//! Exact k-nearest-neighbour search over 3D points.
//!
//! A static kd-tree with median splits. Queries return *exactly* the result
//! of sorting all points by `(squared distance, index)` and taking the first
//! `k`; ties between equidistant points are always broken by the lower index.
//! That exactness is what makes the rest of the pipeline reproducible, so the
//! pruning rule errs on the side of descending: a far subtree is skipped only
//! when every point in it is *strictly* farther than the current worst
//! candidate (an equal distance could still win on index).

use ndarray::ArrayView2;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Candidate ordering: lexicographic by `(squared distance, index)`.
/// The heap is a max-heap, so `peek()` is the current worst candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Index into the original point array.
    point: u32,
    /// Split axis at this node (0, 1, or 2).
    axis: u8,
}

/// Static kd-tree over a snapshot of the points it was built from.
#[derive(Debug, Clone)]
pub struct KdTree {
    pts: Vec<[f64; 3]>,
    /// Tree in implicit layout: the node for slice `[lo, hi)` sits at
    /// `mid = lo + (hi - lo) / 2`; `[lo, mid)` and `(mid, hi]` are its
    /// children.
    nodes: Vec<Node>,
}

impl KdTree {
    /// Build a tree over `points` (an `N x 3` view). The build is
    /// deterministic: splits use the axis of largest extent and order points
    /// by `(coordinate, index)`.
    pub fn build(points: ArrayView2<'_, f64>) -> Self {
        let n = points.nrows();
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|i| [points[[i, 0]], points[[i, 1]], points[[i, 2]]])
            .collect();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = vec![
            Node {
                point: u32::MAX,
                axis: 0
            };
            n
        ];
        if n > 0 {
            build_recursive(&pts, &mut order, &mut nodes, 0);
        }
        KdTree { pts, nodes }
    }

    /// Number of indexed points.
    pub fn len(&self) -> usize {
        self.pts.len()
    }

    /// True when the tree holds no points.
    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// The `k` nearest neighbours of `query`, sorted ascending by
    /// `(squared distance, index)`. Panics if `k` exceeds the point count;
    /// callers validate sizes at their own API boundary.
    pub fn knn(&self, query: [f64; 3], k: usize) -> Vec<usize> {
        self.knn_excluding(query, k, None)
    }

    /// Like [`KdTree::knn`] but never returns `exclude`; useful for
    /// neighbourhoods of a point that must not contain the point itself.
    pub fn knn_excluding(&self, query: [f64; 3], k: usize, exclude: Option<usize>) -> Vec<usize> {
        let available = self.len() - usize::from(exclude.is_some());
        assert!(
            k <= available,
            "knn asked for {k} of {available} available points"
        );
        if k == 0 {
            return Vec::new();
        }
        let skip = exclude.map(|e| e as u32).unwrap_or(u32::MAX);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(0, self.nodes.len(), query, k, skip, &mut heap);
        let mut out = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|c| c.index as usize).collect()
    }

    /// Squared distance from `query` to its nearest indexed point.
    pub fn nearest_dist2(&self, query: [f64; 3]) -> f64 {
        assert!(!self.is_empty(), "nearest_dist2 on empty tree");
        let mut heap = BinaryHeap::with_capacity(2);
        self.search(0, self.nodes.len(), query, 1, u32::MAX, &mut heap);
        heap.peek().expect("non-empty tree yields a neighbour").d2
    }

    fn search(
        &self,
        lo: usize,
        hi: usize,
        query: [f64; 3],
        k: usize,
        skip: u32,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let node = self.nodes[mid];
        if node.point != skip {
            let cand = Candidate {
                d2: dist2(self.pts[node.point as usize], query),
                index: node.point,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap is non-empty") {
                heap.pop();
                heap.push(cand);
            }
        }
        let axis = node.axis as usize;
        let delta = query[axis] - self.pts[node.point as usize][axis];
        let (near_lo, near_hi, far_lo, far_hi) = if delta < 0.0 {
            (lo, mid, mid + 1, hi)
        } else {
            (mid + 1, hi, lo, mid)
        };
        self.search(near_lo, near_hi, query, k, skip, heap);
        // Visit the far side unless every point there is strictly worse than
        // the current worst: on an exact tie the far side can still supply a
        // lower index.
        let worst = heap.peek().copied();
        let must_visit = heap.len() < k
            || match worst {
                Some(w) => delta * delta <= w.d2,
                None => true,
            };
        if must_visit {
            self.search(far_lo, far_hi, query, k, skip, heap);
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build_recursive(pts: &[[f64; 3]], order: &mut [u32], nodes: &mut [Node], offset: usize) {
    if order.is_empty() {
        return;
    }
    // Split on the axis with the largest spread of the slice.
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = pts[i as usize];
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let mut axis = 0usize;
    let mut best = f64::NEG_INFINITY;
    for a in 0..3 {
        let spread = max[a] - min[a];
        if spread > best {
            best = spread;
            axis = a;
        }
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        pts[a as usize][axis]
            .total_cmp(&pts[b as usize][axis])
            .then(a.cmp(&b))
    });
    nodes[offset + mid] = Node {
        point: order[mid],
        axis: axis as u8,
    };
    let (left, rest) = order.split_at_mut(mid);
    let right = &mut rest[1..];
    build_recursive(pts, left, nodes, offset);
    build_recursive(pts, right, nodes, offset + mid + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    /// Brute-force oracle: sort all admissible indices by
    /// `(squared distance, index)` and take the first `k`.
    fn brute_knn(
        pts: &Array2<f64>,
        query: [f64; 3],
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = (0..pts.nrows())
            .filter(|i| Some(*i) != exclude)
            .map(|i| {
                (
                    dist2([pts[[i, 0]], pts[[i, 1]], pts[[i, 2]]], query),
                    i,
                )
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().take(k).map(|(_, i)| i).collect()
    }

    fn cloud_from(rows: &[[f64; 3]]) -> Array2<f64> {
        let mut a = Array2::zeros((rows.len(), 3));
        for (i, r) in rows.iter().enumerate() {
            for c in 0..3 {
                a[[i, c]] = r[c];
            }
        }
        a
    }

    #[test]
    fn matches_oracle_on_grid_with_ties() {
        // A regular grid has massive distance ties; index order must decide.
        let mut rows = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    rows.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let pts = cloud_from(&rows);
        let tree = KdTree::build(pts.view());
        for (qi, q) in [[0.0, 0.0, 0.0], [1.5, 1.5, 1.5], [3.0, 0.0, 2.0]]
            .into_iter()
            .enumerate()
        {
            for k in [1, 2, 7, 27, 64] {
                assert_eq!(
                    tree.knn(q, k),
                    brute_knn(&pts, q, k, None),
                    "query {qi} k={k}"
                );
            }
        }
    }

    #[test]
    fn duplicate_points_resolve_by_index() {
        let pts = cloud_from(&[
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
        ]);
        let tree = KdTree::build(pts.view());
        assert_eq!(tree.knn([1.0, 1.0, 1.0], 3), vec![0, 2, 3]);
        assert_eq!(tree.knn_excluding([1.0, 1.0, 1.0], 3, Some(2)), vec![0, 3, 1]);
    }

    #[test]
    fn nearest_dist2_matches_knn() {
        let pts = cloud_from(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 3.0, 0.0]]);
        let tree = KdTree::build(pts.view());
        assert_eq!(tree.nearest_dist2([1.1, 0.0, 0.0]), (2.0 - 1.1) * (2.0 - 1.1));
    }

    proptest! {
        /// The tree agrees with the brute-force oracle on random clouds,
        /// including clouds with quantized coordinates that force ties.
        #[test]
        fn tree_matches_bruteforce(
            raw in prop::collection::vec((-4i32..=4, -4i32..=4, -4i32..=4), 1..60),
            kq in 0usize..60,
            qx in -4.5f64..4.5, qy in -4.5f64..4.5, qz in -4.5f64..4.5,
        ) {
            let rows: Vec<[f64;3]> = raw
                .iter()
                .map(|&(x, y, z)| [x as f64 / 2.0, y as f64 / 2.0, z as f64 / 2.0])
                .collect();
            let pts = cloud_from(&rows);
            let tree = KdTree::build(pts.view());
            let k = kq % rows.len() + usize::from(rows.len() > 0).min(1);
            let k = k.min(rows.len());
            let q = [qx, qy, qz];
            prop_assert_eq!(tree.knn(q, k), brute_knn(&pts, q, k, None));
            let excl = kq % rows.len();
            let ke = k.min(rows.len() - 1);
            prop_assert_eq!(
                tree.knn_excluding(q, ke, Some(excl)),
                brute_knn(&pts, q, ke, Some(excl))
            );
        }
    }
}
