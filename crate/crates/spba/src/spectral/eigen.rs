//! Dense symmetric eigensolver: cyclic Jacobi with deterministic output.
//!
//! Patch Laplacians are small (k_g ≤ a few hundred), so a hand-rolled Jacobi
//! iteration is both fast enough and — more importantly — fully deterministic
//! across platforms. Determinism is load-bearing: eigenvector columns index
//! rows of the shared spectral trigger, so their order *and sign* must be
//! reproducible. The canonical form is:
//!
//! * columns sorted by ascending eigenvalue,
//! * the entry of largest magnitude in each column made positive
//!   (magnitude ties resolved by the lowest row index),
//! * equal eigenvalues ordered by the row index of that largest-magnitude
//!   entry.

use crate::error::{Error, Result};
use ndarray::Array2;

/// Maximum |a[i][j] − a[j][i]| accepted before declaring the input asymmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

const MAX_SWEEPS: usize = 64;

/// Eigendecompose a symmetric matrix. Returns `(eigenvalues, eigenvectors)`
/// in the canonical sorted/signed form described in the module docs;
/// `eigenvectors` holds one eigenvector per column, parallel to the
/// eigenvalue order.
pub fn symmetric_eigen_sorted(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "symmetric eigendecomposition",
            left: n,
            right: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "eigendecomposition input",
        });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = (a[[i, j]] - a[[j, i]]).abs();
            if delta > SYMMETRY_TOL {
                return Err(Error::AsymmetricMatrix {
                    i,
                    j,
                    delta,
                    tol: SYMMETRY_TOL,
                });
            }
        }
    }
    if n == 0 {
        return Ok((Vec::new(), Array2::zeros((0, 0))));
    }

    // Work on the exactly-symmetrized copy; for already-symmetric input this
    // is the identity map.
    let mut w = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (w[[i, j]] + w[[j, i]]);
            w[[i, j]] = s;
            w[[j, i]] = s;
        }
    }
    let mut u = Array2::<f64>::eye(n);

    // Convergence target: off-diagonal Frobenius norm small relative to the
    // matrix scale. The residual ‖LU − UΛ‖ inherits this bound.
    let scale = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-14 * scale;

    let mut converged = false;
    let mut off = off_norm(&w);
    for _ in 0..MAX_SWEEPS {
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                // Stable computation of the rotation minimizing w[p][q].
                let theta = (w[[q, q]] - w[[p, p]]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                let wpp = w[[p, p]];
                let wqq = w[[q, q]];
                w[[p, p]] = wpp - t * apq;
                w[[q, q]] = wqq + t * apq;
                w[[p, q]] = 0.0;
                w[[q, p]] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let wrp = w[[r, p]];
                        let wrq = w[[r, q]];
                        w[[r, p]] = c * wrp - s * wrq;
                        w[[p, r]] = w[[r, p]];
                        w[[r, q]] = s * wrp + c * wrq;
                        w[[q, r]] = w[[r, q]];
                    }
                }
                for r in 0..n {
                    let urp = u[[r, p]];
                    let urq = u[[r, q]];
                    u[[r, p]] = c * urp - s * urq;
                    u[[r, q]] = s * urp + c * urq;
                }
            }
        }
        off = off_norm(&w);
    }
    if !converged && off > tol {
        return Err(Error::EigenNoConvergence {
            sweeps: MAX_SWEEPS,
            off,
        });
    }

    let mut eigenvalues: Vec<f64> = (0..n).map(|i| w[[i, i]]).collect();

    // Canonical signs, plus the pivot row that orders degenerate eigenspaces.
    let mut pivot_rows = vec![0usize; n];
    for col in 0..n {
        let mut best_row = 0usize;
        let mut best_mag = f64::NEG_INFINITY;
        for row in 0..n {
            let mag = u[[row, col]].abs();
            if mag > best_mag {
                best_mag = mag;
                best_row = row;
            }
        }
        if u[[best_row, col]] < 0.0 {
            for row in 0..n {
                u[[row, col]] = -u[[row, col]];
            }
        }
        pivot_rows[col] = best_row;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        eigenvalues[x]
            .total_cmp(&eigenvalues[y])
            .then(pivot_rows[x].cmp(&pivot_rows[y]))
            .then(x.cmp(&y))
    });
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, new_col]] = u[[row, old_col]];
        }
    }
    eigenvalues = order.iter().map(|&c| w[[c, c]]).collect();
    Ok((eigenvalues, vectors))
}

fn off_norm(w: &Array2<f64>) -> f64 {
    let n = w.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += 2.0 * w[[i, j]] * w[[i, j]];
        }
    }
    sum.sqrt()
}
