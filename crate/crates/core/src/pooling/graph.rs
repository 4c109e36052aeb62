use super::ClusterAssignment;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Undirected token adjacency. Built from an 8-connected grid, or coarsened
/// from a finer adjacency once tokens have been pooled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    mask: Vec<bool>,
    grid: Option<(usize, usize)>,
}

/// `mask[i][j]` is true iff cells `i ≠ j` differ by at most one step in both
/// grid coordinates. Cells are numbered row-major.
pub fn build_grid_adjacency(h: usize, w: usize) -> Adjacency {
    let n = h * w;
    let mut mask = vec![false; n * n];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            for r2 in r.saturating_sub(1)..(r + 2).min(h) {
                for c2 in c.saturating_sub(1)..(c + 2).min(w) {
                    let j = r2 * w + c2;
                    if i != j {
                        mask[i * n + j] = true;
                    }
                }
            }
        }
    }
    Adjacency {
        n,
        mask,
        grid: Some((h, w)),
    }
}

impl Adjacency {
    /// Builds an adjacency from an explicit symmetric mask; the diagonal is
    /// ignored.
    pub fn from_mask(n: usize, mut mask: Vec<bool>) -> Result<Self> {
        if mask.len() != n * n {
            return Err(Error::shape(format!("adjacency mask for {n} tokens needs {} entries", n * n)));
        }
        for i in 0..n {
            mask[i * n + i] = false;
            for j in (i + 1)..n {
                if mask[i * n + j] != mask[j * n + i] {
                    return Err(Error::InvalidArgument(format!("adjacency mask is asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Adjacency { n, mask, grid: None })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.is_edge(i, j))
    }

    pub fn edge_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count() / 2
    }

    /// Connected components of the subgraph induced by `members`.
    pub fn components_within(&self, members: &[usize]) -> usize {
        let mut seen = vec![false; self.n];
        let inside: Vec<bool> = {
            let mut v = vec![false; self.n];
            for &m in members {
                v[m] = true;
            }
            v
        };
        let mut count = 0;
        for &start in members {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                for j in self.neighbors(i) {
                    if inside[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    pub fn components(&self) -> usize {
        let all: Vec<usize> = (0..self.n).collect();
        self.components_within(&all)
    }

    /// Cluster-level adjacency: two clusters touch iff some pair of their
    /// members is adjacent here.
    pub fn coarsen(&self, assignment: &ClusterAssignment) -> Result<Adjacency> {
        if assignment.labels.len() != self.n {
            return Err(Error::shape(format!(
                "assignment covers {} tokens, adjacency has {}",
                assignment.labels.len(),
                self.n
            )));
        }
        let k = assignment.n_clusters;
        let mut mask = vec![false; k * k];
        for i in 0..self.n {
            for j in self.neighbors(i) {
                let (a, b) = (assignment.labels[i], assignment.labels[j]);
                if a != b {
                    mask[a * k + b] = true;
                }
            }
        }
        Ok(Adjacency {
            n: k,
            mask,
            grid: None,
        })
    }
}

fn check_square(m: &Matrix, adj: &Adjacency, what: &str) -> Result<()> {
    if m.shape() != (adj.n, adj.n) {
        return Err(Error::shape(format!(
            "{what} is {:?}, adjacency has {} tokens",
            m.shape(),
            adj.n
        )));
    }
    Ok(())
}

/// `S = A_p ⊙ H + A_pᵀ ⊙ Hᵀ`
pub fn symmetrize_attention(a_p: &Matrix, adj: &Adjacency) -> Result<Matrix> {
    check_square(a_p, adj, "patch attention")?;
    let n = adj.n;
    Ok(Matrix::from_fn(n, n, |i, j| {
        let mut s = 0.0;
        if adj.is_edge(i, j) {
            s += a_p[(i, j)];
        }
        if adj.is_edge(j, i) {
            s += a_p[(j, i)];
        }
        s
    }))
}

/// Row softmax restricted to each token's neighbours; off-mask entries stay
/// exactly zero.
pub fn edge_softmax(s: &Matrix, adj: &Adjacency) -> Result<Matrix> {
    check_square(s, adj, "affinity")?;
    let n = adj.n;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let max = adj.neighbors(i).map(|j| s[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in adj.neighbors(i) {
            let e = (s[(i, j)] - max).exp();
            out[(i, j)] = e;
            total += e;
        }
        for j in adj.neighbors(i) {
            out[(i, j)] /= total;
        }
    }
    Ok(out)
}

/// `L = I − D^{-1/2} W D^{-1/2}` with `W = (S′ + S′ᵀ) / 2`.
pub fn normalized_laplacian(s_prime: &Matrix) -> Result<Matrix> {
    let n = s_prime.rows();
    if s_prime.cols() != n {
        return Err(Error::shape(format!("affinity must be square, got {:?}", s_prime.shape())));
    }
    if s_prime.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("affinity weights must be finite and non-negative".into()));
    }
    let w = Matrix::from_fn(n, n, |i, j| 0.5 * (s_prime[(i, j)] + s_prime[(j, i)]));
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let degree: f64 = w.row(i).iter().sum();
        if degree <= 0.0 {
            return Err(Error::IsolatedVertex(i));
        }
        inv_sqrt.push(1.0 / degree.sqrt());
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv_sqrt[i] * w[(i, j)] * inv_sqrt[j]
    }))
}

/// The symmetric affinity fed to the Laplacian:
/// `(S′ + S′ᵀ) / 2` with `S′ = edge_softmax(symmetrize_attention(A_p))`.
pub fn pooling_affinity(a_p: &Matrix, adj: &Adjacency) -> Result<Matrix> {
    let s = symmetrize_attention(a_p, adj)?;
    let sp = edge_softmax(&s, adj)?;
    let n = adj.n;
    Ok(Matrix::from_fn(n, n, |i, j| 0.5 * (sp[(i, j)] + sp[(j, i)])))
}
