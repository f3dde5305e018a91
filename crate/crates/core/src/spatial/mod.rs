//! Spatial-context construction: clustering, train/test partition,
//! trajectory sampling and feature assembly.

pub mod cluster;
pub mod dataset;
pub mod sampling;

pub use cluster::{cluster, default_radius_grid, median_size, select_radius, Cluster, UnionFind};
pub use dataset::{
    assemble_features, build_dataset, read_jsonl, render, write_jsonl, Dataset, DatasetConfig, TrajectorySample,
};
pub use sampling::{sample_trajectories, split_cluster, ClusterSplit, Split, Trajectory, TEST_RETRY_BUDGET, TRAIN_FRACTION};
