//! Train/test partition of clusters and trajectory sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cluster::Cluster;
use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.7;
pub const TEST_RETRY_BUDGET: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Point indices of one cluster assigned to each side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClusterSplit {
    pub fn is_test_point(&self, idx: usize) -> bool {
        self.test.binary_search(&idx).is_ok()
    }
}

/// Shuffles the members and assigns `round(fraction * n)` of them to
/// training, clamped so both sides keep at least one point.
pub fn split_cluster(cluster: &Cluster, train_fraction: f64, seed: u64) -> Result<ClusterSplit> {
    let n = cluster.len();
    if n < 2 {
        return Err(Error::SingletonCluster { cluster: cluster.id });
    }
    let mut members = cluster.members.clone();
    members.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = members[..n_train].to_vec();
    let mut test = members[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(ClusterSplit { train, test })
}

/// Ordered vertex list drawn from one cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub cluster: usize,
    pub vertices: Vec<usize>,
    pub split: Split,
    /// Per vertex: the point belongs to the cluster's test side.
    pub unseen: Vec<bool>,
}

impl Trajectory {
    pub fn contains_unseen(&self) -> bool {
        self.unseen.iter().any(|&u| u)
    }
}

/// Draws `count` length-`s` trajectories.
///
/// Train trajectories pick vertices uniformly with replacement from the
/// cluster's train points. Test trajectories pick from the whole cluster and
/// are kept only when at least one vertex is a test point; each requested
/// trajectory gets [`TEST_RETRY_BUDGET`] attempts.
pub fn sample_trajectories(
    cluster: &Cluster,
    split: &ClusterSplit,
    s: usize,
    count: usize,
    which: Split,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if s == 0 {
        return Err(Error::Contract("trajectory length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    match which {
        Split::Train => {
            if split.train.is_empty() {
                return Err(Error::Contract(format!("cluster {} has no train points", cluster.id)));
            }
            for _ in 0..count {
                let vertices: Vec<usize> = (0..s)
                    .map(|_| split.train[rng.random_range(0..split.train.len())])
                    .collect();
                out.push(Trajectory {
                    cluster: cluster.id,
                    unseen: vec![false; s],
                    vertices,
                    split: Split::Train,
                });
            }
        }
        Split::Test => {
            if split.test.is_empty() {
                return Err(Error::Contract(format!("cluster {} has no test points", cluster.id)));
            }
            for _ in 0..count {
                let mut accepted = None;
                for _ in 0..TEST_RETRY_BUDGET {
                    let vertices: Vec<usize> = (0..s)
                        .map(|_| cluster.members[rng.random_range(0..cluster.len())])
                        .collect();
                    let unseen: Vec<bool> = vertices.iter().map(|&v| split.is_test_point(v)).collect();
                    if unseen.iter().any(|&u| u) {
                        accepted = Some((vertices, unseen));
                        break;
                    }
                }
                let (vertices, unseen) = accepted.ok_or(Error::SamplingExhausted {
                    cluster: cluster.id,
                    attempts: TEST_RETRY_BUDGET,
                })?;
                out.push(Trajectory {
                    cluster: cluster.id,
                    vertices,
                    split: Split::Test,
                    unseen,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Point2;

    fn cl(n: usize) -> Cluster {
        Cluster {
            id: 3,
            members: (10..10 + n).collect(),
            anchor: Point2::default(),
        }
    }

    #[test]
    fn seventy_thirty() {
        let s = split_cluster(&cl(10), TRAIN_FRACTION, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (7, 3));
        let s = split_cluster(&cl(2), TRAIN_FRACTION, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 1));
        assert_eq!(split_cluster(&cl(10), 0.7, 42).unwrap(), split_cluster(&cl(10), 0.7, 42).unwrap());
        assert!(matches!(
            split_cluster(&cl(1), 0.7, 0),
            Err(Error::SingletonCluster { cluster: 3 })
        ));
    }

    #[test]
    fn single_vertex_trajectory() {
        let c = cl(4);
        let sp = split_cluster(&c, 0.7, 0).unwrap();
        let t = sample_trajectories(&c, &sp, 1, 5, Split::Train, 0).unwrap();
        assert!(t.iter().all(|t| t.vertices.len() == 1 && sp.train.contains(&t.vertices[0])));
    }

    #[test]
    fn train_vertices_come_from_train_side() {
        let c = cl(10);
        let sp = split_cluster(&c, 0.7, 5).unwrap();
        let t = sample_trajectories(&c, &sp, 5, 1000, Split::Train, 9).unwrap();
        assert_eq!(t.len(), 1000);
        for tr in &t {
            assert!(tr.vertices.iter().all(|v| sp.train.contains(v)));
            assert!(!tr.contains_unseen());
        }
    }

    #[test]
    fn test_draws_always_hold_an_unseen_point() {
        let c = cl(10);
        let sp = split_cluster(&c, 0.7, 5).unwrap();
        let t = sample_trajectories(&c, &sp, 5, 500, Split::Test, 9).unwrap();
        for tr in &t {
            assert!(tr.contains_unseen());
            for (v, u) in tr.vertices.iter().zip(&tr.unseen) {
                assert_eq!(*u, sp.test.contains(v));
            }
        }
    }

    #[test]
    fn exhausted_budget_is_reported() {
        // A split whose test side is not part of the cluster can never accept.
        let c = cl(4);
        let bogus = ClusterSplit {
            train: c.members.clone(),
            test: vec![999],
        };
        assert!(matches!(
            sample_trajectories(&c, &bogus, 3, 1, Split::Test, 0),
            Err(Error::SamplingExhausted { cluster: 3, attempts: TEST_RETRY_BUDGET })
        ));
    }
}
