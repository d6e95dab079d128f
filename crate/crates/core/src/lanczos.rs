//! Thick-restart Lanczos with full reorthogonalization for extreme eigenpairs
//! of a real symmetric operator given only as a matrix-vector product.
//!
//! The projected matrix `VᵀAV` is assembled entry by entry from explicit
//! products, so Ritz values are exact Rayleigh quotients of the current basis.
//! Convergence is decided on explicit residual norms `‖Ay − θy‖`.
//! The basis starts from a block of random vectors so that degenerate
//! eigenvalues up to the block size are resolved.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Largest,
    Smallest,
}

#[derive(Debug, Clone)]
pub struct LanczosOptions {
    /// Basis size per cycle; 0 picks `max(3k, k + 30)`.
    pub basis_size: usize,
    /// Number of random start vectors.
    pub block_size: usize,
    pub max_cycles: usize,
    /// Absolute residual norm required of every returned pair.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions {
            basis_size: 0,
            block_size: 4,
            max_cycles: 500,
            tol: 1e-11,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenPairs {
    /// Ordered from the requested end of the spectrum.
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub matvecs: usize,
}

/// Eight independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// One classical Gram-Schmidt pass; returns the remaining norm.
fn orthogonalize_once(basis: &[Vec<f64>], w: &mut [f64]) -> f64 {
    let coeffs: Vec<f64> = basis.iter().map(|v| dot(v, w)).collect();
    for (v, c) in basis.iter().zip(coeffs) {
        axpy(-c, v, w);
    }
    norm(w)
}

/// Two passes of classical Gram-Schmidt; returns the remaining norm.
fn orthogonalize(basis: &[Vec<f64>], w: &mut [f64]) -> f64 {
    orthogonalize_once(basis, w);
    orthogonalize_once(basis, w)
}

fn random_orthonormal(basis: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    for _ in 0..8 {
        let mut w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let before = norm(&w);
        let after = orthogonalize(basis, &mut w);
        if after > 1e-8 * before {
            w.iter_mut().for_each(|x| *x /= after);
            return Some(w);
        }
    }
    None
}

/// The `k` eigenpairs at the `which` end of the spectrum of the `n`-dimensional
/// symmetric operator `matvec`.
///
/// Each cycle expands the basis vector by vector in order; once it is full the
/// remaining products only fill the projected matrix and their out-of-basis
/// parts form the frontier. A restart keeps the leading Ritz vectors plus the
/// orthonormalized frontier, which spans every kept residual, so the Krylov
/// relation `AY = YΘ + FC` carries over and kept vectors are never multiplied
/// again. Converged pairs are confirmed by explicit residuals before returning.
pub fn eigsh<F>(n: usize, k: usize, which: Which, mut matvec: F, opts: &LanczosOptions) -> Result<EigenPairs>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "requested {k} eigenpairs of a {n}-dimensional operator"
        )));
    }
    let m = if opts.basis_size == 0 {
        (3 * k).max(k + 30)
    } else {
        opts.basis_size.max(k + 2)
    }
    .min(n);
    let keep = (k + (m - k) / 4).min(m.saturating_sub(1)).max(k.min(m));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + opts.block_size);
    for _ in 0..opts.block_size.max(1).min(m) {
        match random_orthonormal(&basis, n, &mut rng) {
            Some(v) => basis.push(v),
            None => break,
        }
    }
    let cap = m + opts.block_size.max(1);
    let mut h = DMatrix::<f64>::zeros(cap, cap);
    // Leading basis vectors that are Ritz vectors with known Rayleigh quotients.
    let mut known = 0usize;
    let mut frontier = 0usize;
    let mut ritz_values: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut matvecs = 0usize;

    for _cycle in 0..opts.max_cycles {
        let mut pending: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut j = known;
        loop {
            if known >= k && j == known + frontier {
                // Every frontier product is in: AY − YΘ = F C is now explicit.
                let estimate: Vec<f64> = (0..k)
                    .map(|i| (known..j).map(|c| h[(i, c)] * h[(i, c)]).sum::<f64>().sqrt())
                    .collect();
                if estimate.iter().all(|&r| r < opts.tol) {
                    let mut residuals = Vec::with_capacity(k);
                    for i in 0..k {
                        matvec(&basis[i], &mut w);
                        matvecs += 1;
                        axpy(-ritz_values[i], &basis[i], &mut w);
                        residuals.push(norm(&w));
                    }
                    if residuals.iter().all(|&r| r < opts.tol) {
                        return Ok(EigenPairs {
                            values: ritz_values[..k].to_vec(),
                            vectors: basis.drain(..k).collect(),
                            residuals,
                            matvecs,
                        });
                    }
                }
            }
            if j == basis.len() {
                if basis.len() >= m {
                    break;
                }
                match random_orthonormal(&basis, n, &mut rng) {
                    Some(v) => basis.push(v),
                    None => break,
                }
            }
            matvec(&basis[j], &mut w);
            matvecs += 1;
            let coeffs: Vec<f64> = basis.iter().map(|v| dot(v, &w)).collect();
            for (i, &c) in coeffs.iter().enumerate() {
                h[(i, j)] = c;
                h[(j, i)] = c;
            }
            let before = norm(&w);
            for (v, &c) in basis.iter().zip(&coeffs) {
                axpy(-c, v, &mut w);
            }
            let mut after = norm(&w);
            // Second Gram-Schmidt pass only when cancellation was severe.
            if after < 0.7 * before {
                after = orthogonalize_once(&basis, &mut w);
            }
            if basis.len() < m {
                if after > 1e-14 * before && after > 1e-300 {
                    basis.push(w.iter().map(|x| x / after).collect());
                }
            } else {
                pending.push((w.clone(), before));
            }
            j += 1;
        }

        let size = basis.len();
        let sub = h.view((0, 0), (size, size)).into_owned();
        let eig = SymmetricEigen::new(sub);
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (eig.eigenvalues[a], eig.eigenvalues[b]);
            match which {
                Which::Largest => y.total_cmp(&x),
                Which::Smallest => x.total_cmp(&y),
            }
        });
        let p = keep.min(size);
        let mut kept = Vec::with_capacity(cap);
        ritz_values.clear();
        for &c in order.iter().take(p) {
            let mut y = vec![0.0; n];
            for (i, v) in basis.iter().enumerate() {
                axpy(eig.eigenvectors[(i, c)], v, &mut y);
            }
            // Re-normalize against accumulated rounding.
            let ny = norm(&y);
            y.iter_mut().for_each(|x| *x /= ny);
            kept.push(y);
            ritz_values.push(eig.eigenvalues[c]);
        }
        h.fill(0.0);
        for (i, &t) in ritz_values.iter().enumerate() {
            h[(i, i)] = t;
        }
        known = p;
        frontier = 0;
        for (mut r, before) in pending {
            let after = orthogonalize(&kept, &mut r);
            if after > 1e-14 * before && after > 1e-300 {
                r.iter_mut().for_each(|x| *x /= after);
                kept.push(r);
                frontier += 1;
            }
        }
        basis = kept;
    }
    Err(Error::NoConvergence(format!(
        "Lanczos did not reach residual {:e} within {} cycles",
        opts.tol, opts.max_cycles
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_matvec(a: &DMatrix<f64>) -> impl FnMut(&[f64], &mut [f64]) + '_ {
        move |x, y| {
            for i in 0..a.nrows() {
                y[i] = (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum();
            }
        }
    }

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
        &a + a.transpose()
    }

    fn sorted_eigs(a: &DMatrix<f64>) -> Vec<f64> {
        let mut e: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().cloned().collect();
        e.sort_by(|a, b| a.total_cmp(b));
        e
    }

    #[test]
    fn matches_dense_both_ends() {
        let a = random_symmetric(150, 1);
        let exact = sorted_eigs(&a);
        let opts = LanczosOptions::default();
        let lo = eigsh(150, 5, Which::Smallest, dense_matvec(&a), &opts).unwrap();
        let hi = eigsh(150, 5, Which::Largest, dense_matvec(&a), &opts).unwrap();
        for i in 0..5 {
            assert!((lo.values[i] - exact[i]).abs() < 1e-10);
            assert!((hi.values[i] - exact[149 - i]).abs() < 1e-10);
            assert!(lo.residuals[i] < 1e-10 && hi.residuals[i] < 1e-10);
        }
    }

    #[test]
    fn resolves_degenerate_eigenvalues() {
        // diag with a triply degenerate top eigenvalue, rotated by a random
        // orthogonal matrix.
        let n = 80;
        let mut d = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            d[(i, i)] = if i < 3 { 2.0 } else { 1.0 - i as f64 / n as f64 };
        }
        let q = random_symmetric(n, 7).qr().q();
        let a = &q * d * q.transpose();
        let r = eigsh(n, 4, Which::Largest, dense_matvec(&a), &LanczosOptions::default()).unwrap();
        for i in 0..3 {
            assert!((r.values[i] - 2.0).abs() < 1e-10);
        }
        assert!((r.values[3] - (1.0 - 3.0 / n as f64)).abs() < 1e-10);
    }

    #[test]
    fn whole_space_when_small() {
        let a = random_symmetric(6, 3);
        let exact = sorted_eigs(&a);
        let r = eigsh(6, 6, Which::Smallest, dense_matvec(&a), &LanczosOptions::default()).unwrap();
        for i in 0..6 {
            assert!((r.values[i] - exact[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn vectors_are_orthonormal() {
        let a = random_symmetric(60, 5);
        let r = eigsh(60, 4, Which::Largest, dense_matvec(&a), &LanczosOptions::default()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&r.vectors[i], &r.vectors[j]) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_bad_k() {
        let a = random_symmetric(4, 1);
        assert!(eigsh(4, 0, Which::Largest, dense_matvec(&a), &LanczosOptions::default()).is_err());
        assert!(eigsh(4, 5, Which::Largest, dense_matvec(&a), &LanczosOptions::default()).is_err());
    }
}
