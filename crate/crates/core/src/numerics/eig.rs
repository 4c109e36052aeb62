use super::Matrix;
use crate::error::{Error, Result};

/// Inputs whose largest asymmetry exceeds this (scaled by `max(1, max|m|)`)
/// are rejected.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Cap on implicit QL iterations per eigenvalue.
const MAX_ITERATIONS: usize = 60;

/// The `k` smallest eigenpairs of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// `n × k`, column `j` pairs with `values[j]`.
    pub vectors: Matrix,
}

/// Full symmetric eigendecomposition (Householder reduction to tridiagonal
/// form, then implicit QL with Wilkinson-style shifts), returning the `k`
/// smallest eigenpairs.
///
/// Each eigenvector's sign is fixed so that its largest-magnitude entry (first
/// one on ties) is positive, which makes the output reproducible.
pub fn symmetric_eig(m: &Matrix, k: usize) -> Result<SymmetricEigen> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::shape(format!("eigensolver needs a square matrix, got {:?}", m.shape())));
    }
    if n == 0 {
        return Err(Error::Empty("eigensolver input"));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("requested {k} eigenpairs of a {n}x{n} matrix")));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    let scale = m.max_abs();
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOLERANCE * scale.max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }

    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| 0.5 * (m[(i, j)] + m[(j, i)])).collect()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    tridiagonal_ql(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]).then(i.cmp(&j)));
    order.truncate(k);

    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Matrix::zeros(n, k);
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for r in 0..n {
            if v[r][src].abs() > v[pivot][src].abs() {
                pivot = r;
            }
        }
        let sign = if v[pivot][src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[(r, col)] = sign * v[r][src];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Householder reduction of the symmetric matrix in `v` to tridiagonal form.
/// On return `d` is the diagonal, `e[1..]` the subdiagonal and `v` the
/// accumulated orthogonal transform.
fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1]);
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for x in &mut d[..i] {
                *x /= scale;
                h += *x * *x;
            }
            let f = d[i - 1];
            let g = if f > 0.0 { -h.sqrt() } else { h.sqrt() };
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].fill(0.0);
            for j in 0..i {
                let f = d[j];
                v[j][i] = f;
                let mut g = e[j] + v[j][j] * f;
                for kk in (j + 1)..i {
                    g += v[kk][j] * d[kk];
                    e[kk] += v[kk][j] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let (f, g) = (d[j], e[j]);
                for kk in j..i {
                    v[kk][j] -= f * e[kk] + g * d[kk];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for kk in 0..=i {
                d[kk] = v[kk][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for kk in 0..=i {
                    g += v[kk][i + 1] * v[kk][j];
                }
                for kk in 0..=i {
                    v[kk][j] -= g * d[kk];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

/// Diagonalizes the tridiagonal `(d, e)` in place, rotating the columns of
/// `v` along. Eigenvalues are left unsorted in `d`.
fn tridiagonal_ql(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut shift = 0.0;
    let mut tst1 = 0.0f64;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > f64::EPSILON * tst1 {
            m += 1;
        }
        if m > l {
            let mut iterations = 0;
            loop {
                iterations += 1;
                if iterations > MAX_ITERATIONS {
                    return Err(Error::NoConvergence {
                        iterations: MAX_ITERATIONS,
                        residual: e[l].abs(),
                    });
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for x in &mut d[l + 2..] {
                    *x -= h;
                }
                shift += h;

                p = d[m];
                let (mut c, mut c2, mut c3) = (1.0, 1.0, 1.0);
                let el1 = e[l + 1];
                let (mut s, mut s2) = (0.0, 0.0);
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        let h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= f64::EPSILON * tst1 {
                    break;
                }
            }
        }
        d[l] += shift;
        e[l] = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x = rng.random_range(-1.0..1.0);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    #[test]
    fn identity_spectrum() {
        let e = symmetric_eig(&Matrix::identity(3), 3).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_is_axis_aligned() {
        let mut m = Matrix::zeros(3, 3);
        m[(0, 0)] = 3.0;
        m[(1, 1)] = 1.0;
        m[(2, 2)] = 2.0;
        let e = symmetric_eig(&m, 2).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0]);
        assert_eq!(e.vectors.column(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(e.vectors.column(1), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_symmetric(6, &mut rng);
        let ours = symmetric_eig(&m, 6).unwrap();

        let dense = nalgebra::DMatrix::from_fn(6, 6, |i, j| m[(i, j)]);
        let oracle = nalgebra::SymmetricEigen::new(dense);
        let mut pairs: Vec<(f64, Vec<f64>)> = (0..6)
            .map(|j| (oracle.eigenvalues[j], oracle.eigenvectors.column(j).iter().copied().collect()))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        for (j, (value, vector)) in pairs.iter().enumerate() {
            assert!((ours.values[j] - value).abs() < 1e-6);
            // Compare up to sign.
            let ours_col = ours.vectors.column(j);
            let d = super::super::dot(&ours_col, vector);
            assert!((d.abs() - 1.0).abs() < 1e-6, "column {j}: |dot| = {}", d.abs());
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(symmetric_eig(&m, 1), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn rejects_too_many_pairs() {
        assert!(symmetric_eig(&Matrix::identity(2), 3).is_err());
    }

    #[test]
    fn sign_convention_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_symmetric(8, &mut rng);
        let e = symmetric_eig(&m, 8).unwrap();
        for j in 0..8 {
            let col = e.vectors.column(j);
            let pivot = col.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn zero_matrix() {
        let e = symmetric_eig(&Matrix::zeros(4, 4), 2).unwrap();
        assert_eq!(e.values, vec![0.0, 0.0]);
    }
}
