//! Radius-ball clustering and the minimal-radius search.

use serde::{Deserialize, Serialize};

use crate::channel::Point2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Ascending point indices.
    pub members: Vec<usize>,
    /// Position of the lowest-index member.
    pub anchor: Point2,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Merges overlapping `r`-balls: points whose balls overlap (centers within
/// `2r`) end up in the same cluster, transitively. Clusters are ordered by
/// their lowest member index.
pub fn cluster(points: &[Point2], r: f64) -> Result<Vec<Cluster>> {
    if !(r > 0.0) {
        return Err(Error::Contract(format!("cluster radius must be positive, got {r}")));
    }
    let reach2 = (2.0 * r) * (2.0 * r);
    let mut uf = UnionFind::new(points.len());
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i] - points[j];
            if d.dot(d) <= reach2 {
                uf.union(i, j);
            }
        }
    }
    let mut by_root: Vec<Option<usize>> = vec![None; points.len()];
    let mut clusters: Vec<Cluster> = Vec::new();
    for i in 0..points.len() {
        let root = uf.find(i);
        match by_root[root] {
            Some(c) => clusters[c].members.push(i),
            None => {
                by_root[root] = Some(clusters.len());
                clusters.push(Cluster {
                    id: clusters.len(),
                    members: vec![i],
                    anchor: points[i],
                });
            }
        }
    }
    Ok(clusters)
}

/// Median of cluster sizes (mean of the two middle values for an even count).
pub fn median_size(clusters: &[Cluster]) -> f64 {
    let mut sizes: Vec<usize> = clusters.iter().map(Cluster::len).collect();
    if sizes.is_empty() {
        return 0.0;
    }
    sizes.sort_unstable();
    let n = sizes.len();
    if n % 2 == 1 {
        sizes[n / 2] as f64
    } else {
        (sizes[n / 2 - 1] + sizes[n / 2]) as f64 / 2.0
    }
}

/// Smallest candidate radius whose median cluster size reaches `n_min`.
pub fn select_radius(points: &[Point2], candidate_radii: &[f64], n_min: usize) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Contract("select_radius needs at least one point".into()));
    }
    if n_min == 0 {
        return Err(Error::Contract("n_min must be at least 1".into()));
    }
    if candidate_radii.is_empty() || candidate_radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("candidate radii must be non-empty and strictly ascending".into()));
    }
    let mut best = (f64::NEG_INFINITY, candidate_radii[0]);
    for &r in candidate_radii {
        let med = median_size(&cluster(points, r)?);
        if med >= n_min as f64 {
            return Ok(r);
        }
        if med > best.0 {
            best = (med, r);
        }
    }
    Err(Error::RadiusSearch {
        n_min,
        best_median: best.0,
        best_radius: best.1,
    })
}

/// Default grid: 0.25 m to 8 m in 0.25 m steps.
pub fn default_radius_grid() -> Vec<f64> {
    (1..=32).map(|i| i as f64 * 0.25).collect()
}
