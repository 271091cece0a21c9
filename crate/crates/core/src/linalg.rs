//! Small dense linear-algebra helpers on complex matrices.

use crate::error::{Error, Result};
use crate::fock::{CMat, C64};
use nalgebra::DVector;

/// Hermitian eigendecomposition with eigenvalues sorted ascending.
/// Columns of the returned matrix are the eigenvectors.
pub fn eigh(a: &CMat) -> (Vec<f64>, CMat) {
    let n = a.nrows();
    if n == 0 {
        return (vec![], CMat::zeros(0, 0));
    }
    let herm = (a + a.adjoint()) * C64::new(0.5, 0.0);
    let se = herm.symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]).then(i.cmp(&j)));
    let vals = idx.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vecs = CMat::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &se.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn singular_values(a: &CMat) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return vec![];
    }
    let mut s: Vec<f64> = a.clone().singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Row and column index sets of the blocks of `a` after permuting it to
/// block-diagonal form (connected components of the nonzero pattern).
/// Zero rows and columns are dropped.
pub fn blocks(a: &CMat) -> Vec<(Vec<usize>, Vec<usize>)> {
    let (nr, nc) = a.shape();
    let mut parent: Vec<usize> = (0..nr + nc).collect();
    let mut used = vec![false; nr + nc];
    for j in 0..nc {
        for i in 0..nr {
            if a[(i, j)] != C64::new(0.0, 0.0) {
                used[i] = true;
                used[nr + j] = true;
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, nr + j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; nr + nc];
    let mut out: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for x in 0..nr + nc {
        if !used[x] {
            continue;
        }
        let r = find(&mut parent, x);
        if slot[r] == usize::MAX {
            slot[r] = out.len();
            out.push((vec![], vec![]));
        }
        let b = &mut out[slot[r]];
        if x < nr {
            b.0.push(x);
        } else {
            b.1.push(x - nr);
        }
    }
    out
}

/// Spectral norm, computed blockwise when the nonzero pattern decouples.
pub fn op_norm(a: &CMat) -> f64 {
    let bl = blocks(a);
    if bl.len() <= 1 {
        return singular_values(a).first().copied().unwrap_or(0.0);
    }
    bl.iter()
        .map(|(r, c)| {
            let sub = CMat::from_fn(r.len(), c.len(), |i, j| a[(r[i], c[j])]);
            singular_values(&sub).first().copied().unwrap_or(0.0)
        })
        .fold(0.0, f64::max)
}

pub fn min_singular(a: &CMat) -> f64 {
    singular_values(a).last().copied().unwrap_or(0.0)
}

pub fn fro(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// ‖a − b‖_F / max(‖b‖_F, tiny).
pub fn rel_fro(a: &CMat, b: &CMat) -> f64 {
    let d = fro(&(a - b));
    let s = fro(b);
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

/// Orthonormal basis (as columns) of the range of a Hermitian positive
/// semidefinite matrix, keeping eigenvectors with eigenvalue above `floor`.
pub fn range_basis(h: &CMat, floor: f64) -> CMat {
    let (vals, vecs) = eigh(h);
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > floor).collect();
    let mut u = CMat::zeros(h.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        u.set_column(c, &vecs.column(i));
    }
    u
}

pub fn inverse(a: &CMat) -> Result<CMat> {
    if a.nrows() == 0 {
        return Ok(CMat::zeros(0, 0));
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular matrix in inversion".into()))
}

/// Hermitian matrix function: V f(Λ) V†.
pub fn herm_fn(a: &CMat, f: impl Fn(f64) -> C64) -> CMat {
    let (vals, vecs) = eigh(a);
    let n = a.nrows();
    let mut d = CMat::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = f(vals[i]);
    }
    &vecs * d * vecs.adjoint()
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    fro(&(a - a.adjoint())) <= tol * fro(a).max(1.0)
}

pub fn vnorm(v: &DVector<C64>) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Row-by-row matrix of `n` identity-like embedding: columns of `b` in the
/// first factor tensored with the identity on `m` field states.
pub fn kron_identity(b: &CMat, m: usize) -> CMat {
    let mut out = CMat::zeros(b.nrows() * m, b.ncols() * m);
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            let v = b[(i, j)];
            if v == C64::new(0.0, 0.0) {
                continue;
            }
            for s in 0..m {
                out[(i * m + s, j * m + s)] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigh_sorted_and_reconstructs() {
        let a = CMat::from_fn(4, 4, |i, j| {
            let x = (i * 7 + j * 3) as f64 * 0.1;
            if i == j {
                c(x)
            } else {
                C64::new(0.1 * (i + j) as f64, 0.05 * (i as f64 - j as f64))
            }
        });
        let h = (&a + a.adjoint()) * c(0.5);
        let (vals, vecs) = eigh(&h);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let back = herm_fn(&h, c);
        assert!(rel_fro(&back, &h) < 1e-12);
        assert!(rel_fro(&(vecs.adjoint() * &vecs), &CMat::identity(4, 4)) < 1e-12);
    }

    #[test]
    fn range_basis_of_projector() {
        let mut p = CMat::zeros(3, 3);
        p[(0, 0)] = c(1.0);
        p[(2, 2)] = c(1.0);
        let u = range_basis(&p, 1e-10);
        assert_eq!(u.ncols(), 2);
        assert!(rel_fro(&(&u * u.adjoint()), &p) < 1e-12);
    }

    #[test]
    fn blockwise_norm_matches_dense() {
        // permuted block diagonal plus an off-diagonal coupling pattern
        let mut a = CMat::zeros(6, 5);
        a[(0, 3)] = C64::new(1.0, 2.0);
        a[(4, 3)] = c(-0.5);
        a[(2, 1)] = c(3.0);
        a[(2, 0)] = C64::new(0.0, 1.0);
        a[(5, 4)] = c(0.25);
        assert_eq!(blocks(&a).len(), 3);
        let dense = singular_values(&a)[0];
        assert!((op_norm(&a) - dense).abs() < 1e-13 * dense);
        assert_eq!(op_norm(&CMat::zeros(3, 3)), 0.0);
    }

    #[test]
    fn kron_identity_blocks() {
        let b = CMat::from_fn(2, 2, |i, j| c((i * 2 + j) as f64));
        let k = kron_identity(&b, 3);
        assert_eq!(k[(1 * 3 + 2, 0 * 3 + 2)], c(2.0));
        assert_eq!(k[(1 * 3 + 2, 0 * 3 + 1)], c(0.0));
    }
}
