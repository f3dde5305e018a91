//! Synthetic multipath channels and CFR fingerprints.

pub mod cfr;
pub mod geometry;
pub mod scene;
pub mod trace;

pub use cfr::{cfr_from_paths, dominant_path, fingerprint, BandConfig, Fingerprint};
pub use geometry::{Bounds, Point2, Wall};
pub use scene::{derive_seed, Preset, Scene};
pub use trace::{trace_paths, Path, PathSet, SPEED_OF_LIGHT};
