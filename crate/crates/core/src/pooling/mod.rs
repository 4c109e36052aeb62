//! Spectral token pooling.
//!
//! Patch attention is restricted to the spatial neighbourhood graph and
//! symmetrised, turned into edge weights with a neighbour-only row softmax,
//! and embedded with the smallest eigenvectors of the normalised Laplacian.
//! K-means++ on the (row-normalised) embedding groups the tokens and each group
//! is replaced by the mean of its features.

mod graph;
mod kmeans;
mod render;

use rand::Rng;

pub use graph::{
    build_grid_adjacency, edge_softmax, normalized_laplacian, pooling_affinity,
    symmetrize_attention, Adjacency,
};
pub use kmeans::{kmeans_pp, KMeansConfig, KMeansResult};
pub use render::{render_cluster_map, render_heatmap};

use crate::error::{Error, Result};
use crate::numerics::{symmetric_eig, Matrix};

/// Token → cluster map with labels numbered by first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub n_clusters: usize,
    pub sizes: Vec<usize>,
}

impl ClusterAssignment {
    /// Validates that every id in `0..n_clusters` occurs.
    pub fn from_labels(labels: Vec<usize>, n_clusters: usize) -> Result<Self> {
        let mut sizes = vec![0usize; n_clusters];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_clusters {
                return Err(Error::InvalidArgument(format!(
                    "token {i} has cluster {l}, only {n_clusters} clusters exist"
                )));
            }
            sizes[l] += 1;
        }
        if let Some(c) = sizes.iter().position(|s| *s == 0) {
            return Err(Error::InvalidArgument(format!("cluster {c} is empty")));
        }
        Ok(ClusterAssignment {
            labels,
            n_clusters,
            sizes,
        })
    }

    /// Renumbers arbitrary labels so cluster ids follow first appearance.
    pub fn canonical(raw: &[usize], n_clusters: usize) -> Result<Self> {
        let mut map = vec![usize::MAX; raw.iter().copied().max().map_or(0, |m| m + 1)];
        let mut next = 0;
        let labels = raw
            .iter()
            .map(|&r| {
                if map[r] == usize::MAX {
                    map[r] = next;
                    next += 1;
                }
                map[r]
            })
            .collect();
        ClusterAssignment::from_labels(labels, n_clusters)
    }

    pub fn singletons(n: usize) -> Self {
        ClusterAssignment {
            labels: (0..n).collect(),
            n_clusters: n,
            sizes: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    /// Maps original tokens straight to the clusters of a later pooling layer
    /// applied to this layer's output.
    pub fn compose(&self, next: &ClusterAssignment) -> Result<ClusterAssignment> {
        if next.labels.len() != self.n_clusters {
            return Err(Error::shape(format!(
                "next layer pools {} tokens, this layer produced {}",
                next.labels.len(),
                self.n_clusters
            )));
        }
        let labels = self.labels.iter().map(|&l| next.labels[l]).collect::<Vec<_>>();
        ClusterAssignment::canonical(&labels, next.n_clusters)
    }

    const HEADER: &'static str = "# hctx cluster assignment v1";

    /// Text dump: a fixed header line, a `# tokens N clusters K` line, then
    /// one cluster id per line in token order.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{}\n# tokens {} clusters {}\n",
            Self::HEADER,
            self.labels.len(),
            self.n_clusters
        );
        for l in &self.labels {
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("cluster assignment", d);
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(bad("missing header".into()));
        }
        let dims = lines.next().ok_or_else(|| bad("missing size line".into()))?;
        let fields: Vec<&str> = dims.split_whitespace().collect();
        let (tokens, clusters) = match fields.as_slice() {
            ["#", "tokens", n, "clusters", k] => (
                n.parse::<usize>().map_err(|e| bad(format!("token count: {e}")))?,
                k.parse::<usize>().map_err(|e| bad(format!("cluster count: {e}")))?,
            ),
            _ => return Err(bad(format!("bad size line {dims:?}"))),
        };
        if clusters > tokens {
            return Err(bad(format!("{clusters} clusters for {tokens} tokens")));
        }
        let mut labels = Vec::with_capacity(tokens.min(1 << 20));
        for (i, line) in lines.enumerate() {
            if labels.len() == tokens {
                return Err(bad(format!("unexpected trailing line {}", i + 3)));
            }
            labels.push(
                line.trim()
                    .parse::<usize>()
                    .map_err(|e| bad(format!("line {}: {e}", i + 3)))?,
            );
        }
        if labels.len() != tokens {
            return Err(bad(format!("expected {tokens} labels, found {}", labels.len())));
        }
        ClusterAssignment::from_labels(labels, clusters)
    }
}

/// Knobs of [`spectral_pool_with`].
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PoolConfig {
    pub kmeans: KMeansConfig,
}

/// Rows of the `k` smallest Laplacian eigenvectors, each scaled to unit length.
pub fn spectral_embedding(affinity: &Matrix, k: usize) -> Result<Matrix> {
    let laplacian = normalized_laplacian(affinity)?;
    let eig = symmetric_eig(&laplacian, k)?;
    let mut u = eig.vectors;
    for i in 0..u.rows() {
        let norm = crate::numerics::norm(u.row(i));
        if norm > 0.0 {
            for v in u.row_mut(i) {
                *v /= norm;
            }
        }
    }
    Ok(u)
}

/// Pools `tokens` (`N × D`) into `n_clusters` averaged tokens.
pub fn spectral_pool(
    tokens: &Matrix,
    a_p: &Matrix,
    adj: &Adjacency,
    n_clusters: usize,
    rng: &mut impl Rng,
) -> Result<(Matrix, ClusterAssignment)> {
    spectral_pool_with(tokens, a_p, adj, n_clusters, &PoolConfig::default(), rng)
}

pub fn spectral_pool_with(
    tokens: &Matrix,
    a_p: &Matrix,
    adj: &Adjacency,
    n_clusters: usize,
    config: &PoolConfig,
    rng: &mut impl Rng,
) -> Result<(Matrix, ClusterAssignment)> {
    let n = tokens.rows();
    if adj.len() != n {
        return Err(Error::shape(format!("{n} tokens but adjacency over {}", adj.len())));
    }
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::InvalidArgument(format!("cannot pool {n} tokens into {n_clusters}")));
    }
    let affinity = pooling_affinity(a_p, adj)?;
    let components = adj.components();
    if components > 1 {
        return Err(Error::Disconnected { components });
    }
    let assignment = if n_clusters == n {
        ClusterAssignment::singletons(n)
    } else {
        let embedding = spectral_embedding(&affinity, n_clusters)?;
        let km = kmeans_pp(&embedding, n_clusters, &config.kmeans, rng)?;
        ClusterAssignment::canonical(&km.labels, n_clusters)?
    };
    let pooled = average_pool(tokens, &assignment)?;
    Ok((pooled, assignment))
}

/// Mean of the member tokens of each cluster.
pub fn average_pool(tokens: &Matrix, assignment: &ClusterAssignment) -> Result<Matrix> {
    if tokens.rows() != assignment.len() {
        return Err(Error::shape(format!(
            "{} tokens but the assignment covers {}",
            tokens.rows(),
            assignment.len()
        )));
    }
    let mut out = Matrix::zeros(assignment.n_clusters, tokens.cols());
    for (i, &l) in assignment.labels.iter().enumerate() {
        for (o, t) in out.row_mut(l).iter_mut().zip(tokens.row(i)) {
            *o += t;
        }
    }
    for c in 0..assignment.n_clusters {
        let inv = 1.0 / assignment.sizes[c] as f64;
        for o in out.row_mut(c) {
            *o *= inv;
        }
    }
    Ok(out)
}

/// How gradients flow back through [`average_pool`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradMode {
    /// Every member token receives its cluster's full gradient.
    #[default]
    Copy,
    /// Exact adjoint of averaging: the cluster gradient divided by its size.
    Adjoint,
}

pub fn pool_backward(grad_pooled: &Matrix, assignment: &ClusterAssignment, mode: GradMode) -> Result<Matrix> {
    if grad_pooled.rows() != assignment.n_clusters {
        return Err(Error::shape(format!(
            "gradient has {} rows for {} clusters",
            grad_pooled.rows(),
            assignment.n_clusters
        )));
    }
    let mut out = Matrix::zeros(assignment.len(), grad_pooled.cols());
    for (i, &l) in assignment.labels.iter().enumerate() {
        let scale = match mode {
            GradMode::Copy => 1.0,
            GradMode::Adjoint => 1.0 / assignment.sizes[l] as f64,
        };
        for (o, g) in out.row_mut(i).iter_mut().zip(grad_pooled.row(l)) {
            *o = g * scale;
        }
    }
    Ok(out)
}
