//! Trajectory-level samples and dataset construction.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use super::cluster::{cluster, default_radius_grid, select_radius, Cluster};
use super::sampling::{sample_trajectories, split_cluster, Split, Trajectory, TRAIN_FRACTION};
use crate::channel::{derive_seed, fingerprint, trace_paths, BandConfig, Fingerprint, Point2, Scene};
use crate::error::{Error, Result};

/// One training or test example: `s` fingerprints, their coordinates and
/// the centroid target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    /// Vertex-major `[aod, aoa, d, g]` per vertex, length `4 s`.
    pub v_num: Vec<f64>,
    /// `s x 3 x N_c`.
    pub v_cfr: Vec<Vec<Vec<f64>>>,
    /// `s` vertex coordinates followed by their centroid.
    pub targets: Vec<[f64; 2]>,
    pub band_id: usize,
    pub split: Split,
    pub los_flags: Vec<bool>,
    /// Per vertex: the point never appears in any train trajectory.
    pub unseen_flags: Vec<bool>,
    pub contains_unseen: bool,
    pub cluster_id: usize,
    /// Shared by the renderings of one trajectory across bands.
    pub trajectory_id: usize,
}

impl TrajectorySample {
    pub fn s(&self) -> usize {
        self.los_flags.len()
    }

    pub fn subcarriers(&self) -> usize {
        self.v_cfr.first().and_then(|v| v.first()).map_or(0, Vec::len)
    }

    pub fn centroid(&self) -> [f64; 2] {
        self.targets[self.s()]
    }
}

/// Concatenates the geometry scalars and stacks the CFR tensors of `fps`.
pub fn assemble_features(fps: &[&Fingerprint]) -> Result<(Vec<f64>, Vec<Vec<Vec<f64>>>)> {
    let first = fps
        .first()
        .ok_or_else(|| Error::Contract("cannot assemble an empty trajectory".into()))?;
    for fp in fps {
        if fp.subcarriers != first.subcarriers {
            return Err(Error::Shape(format!(
                "mixed subcarrier counts {} and {}",
                first.subcarriers, fp.subcarriers
            )));
        }
        if fp.band_id != first.band_id {
            return Err(Error::Contract(format!(
                "mixed bands {} and {} in one trajectory",
                first.band_id, fp.band_id
            )));
        }
    }
    let v_num = fps.iter().flat_map(|fp| fp.geom).collect();
    let v_cfr = fps
        .iter()
        .map(|fp| (0..3).map(|c| fp.channel(c).to_vec()).collect())
        .collect();
    Ok((v_num, v_cfr))
}

/// Builds a sample from the fingerprints of a trajectory's vertices.
pub fn render(traj: &Trajectory, fps: &[Fingerprint], trajectory_id: usize) -> Result<TrajectorySample> {
    let verts: Vec<&Fingerprint> = traj.vertices.iter().map(|&v| &fps[v]).collect();
    let (v_num, v_cfr) = assemble_features(&verts)?;
    let s = verts.len() as f64;
    let mut targets: Vec<[f64; 2]> = verts.iter().map(|f| [f.position.x, f.position.y]).collect();
    let cx = targets.iter().map(|t| t[0]).sum::<f64>() / s;
    let cy = targets.iter().map(|t| t[1]).sum::<f64>() / s;
    targets.push([cx, cy]);
    Ok(TrajectorySample {
        v_num,
        v_cfr,
        targets,
        band_id: verts[0].band_id,
        split: traj.split,
        los_flags: verts.iter().map(|f| f.los).collect(),
        unseen_flags: traj.unseen.clone(),
        contains_unseen: traj.contains_unseen(),
        cluster_id: traj.cluster,
        trajectory_id,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub bands: Vec<BandConfig>,
    pub s: usize,
    pub n_min: usize,
    pub radius_grid: Vec<f64>,
    pub locations: usize,
    pub hotspots: usize,
    /// Standard deviation of UE positions around a hotspot, meters.
    pub spread: f64,
    /// Train trajectories drawn per train point of a cluster.
    pub train_per_point: usize,
    /// Test trajectories drawn per test point of a cluster.
    pub test_per_point: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            bands: [2.6e9, 6e9, 28e9].into_iter().map(BandConfig::standard).collect(),
            s: 5,
            n_min: 8,
            radius_grid: default_radius_grid(),
            locations: 200,
            hotspots: 20,
            spread: 1.5,
            train_per_point: 4,
            test_per_point: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<TrajectorySample>,
    pub radius: f64,
    pub clusters: Vec<Cluster>,
    /// Covered UE positions, indexed by the clusters' member indices.
    pub positions: Vec<Point2>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &TrajectorySample> {
        self.samples.iter().filter(move |s| s.split == which)
    }
}

/// Places UEs, renders fingerprints in every band, clusters at the minimal
/// feasible radius and samples train/test trajectories per cluster. Every
/// trajectory is rendered once per band.
pub fn build_dataset(scene: &Scene, cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.bands.is_empty() {
        return Err(Error::Config("at least one band is required".into()));
    }
    for b in &cfg.bands {
        b.validate()?;
    }
    let candidates = scene.sample_locations(cfg.locations, cfg.hotspots, cfg.spread, cfg.seed);

    // per band, per covered position
    let mut fps: Vec<Vec<Fingerprint>> = vec![Vec::new(); cfg.bands.len()];
    let mut positions = Vec::new();
    for p in candidates {
        let mut rendered = Vec::with_capacity(cfg.bands.len());
        for (bi, band) in cfg.bands.iter().enumerate() {
            let paths = trace_paths(scene, p, 1, band.carrier_hz)?;
            match fingerprint(&paths, band, p, bi) {
                Ok(fp) => rendered.push(fp),
                Err(Error::NoCoverage { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        if rendered.len() == cfg.bands.len() {
            positions.push(p);
            for (bi, fp) in rendered.into_iter().enumerate() {
                fps[bi].push(fp);
            }
        }
    }
    if positions.is_empty() {
        return Err(Error::Config("no UE location has coverage".into()));
    }

    let radius = select_radius(&positions, &cfg.radius_grid, cfg.n_min)?;
    let clusters = cluster(&positions, radius)?;
    debug!(
        "{} covered positions, r* = {radius} m, {} clusters",
        positions.len(),
        clusters.len()
    );

    let mut trajectories = Vec::new();
    for c in &clusters {
        let split = match split_cluster(c, TRAIN_FRACTION, derive_seed(cfg.seed, 1_000 + c.id as u64)) {
            Ok(s) => s,
            Err(Error::SingletonCluster { .. }) => continue,
            Err(e) => return Err(e),
        };
        let n_train = cfg.train_per_point * split.train.len();
        let n_test = cfg.test_per_point * split.test.len();
        trajectories.extend(sample_trajectories(
            c,
            &split,
            cfg.s,
            n_train,
            Split::Train,
            derive_seed(cfg.seed, 2_000 + c.id as u64),
        )?);
        trajectories.extend(sample_trajectories(
            c,
            &split,
            cfg.s,
            n_test,
            Split::Test,
            derive_seed(cfg.seed, 3_000 + c.id as u64),
        )?);
    }

    let mut samples = Vec::with_capacity(trajectories.len() * cfg.bands.len());
    for band_fps in &fps {
        for (tid, t) in trajectories.iter().enumerate() {
            samples.push(render(t, band_fps, tid)?);
        }
    }
    Ok(Dataset {
        samples,
        radius,
        clusters,
        positions,
    })
}

pub fn write_jsonl(path: &Path, samples: &[TrajectorySample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrajectorySample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Preset;

    fn fp(geom: [f64; 4], n: usize, band: usize, pos: (f64, f64)) -> Fingerprint {
        Fingerprint {
            position: Point2::new(pos.0, pos.1),
            cfr: (0..3 * n).map(|i| i as f64 * 0.5 + geom[0]).collect(),
            subcarriers: n,
            geom,
            los: true,
            band_id: band,
        }
    }

    #[test]
    fn single_vertex_layout() {
        let a = fp([0.1, -0.2, 5.0, -3.0], 4, 0, (0.0, 0.0));
        let (num, cfr) = assemble_features(&[&a]).unwrap();
        assert_eq!(num, vec![0.1, -0.2, 5.0, -3.0]);
        assert_eq!(cfr.len(), 1);
        assert_eq!(cfr[0][2], a.channel(2).to_vec());
    }

    #[test]
    fn second_vertex_occupies_slots_four_to_eight() {
        let a = fp([0.1, -0.2, 5.0, -3.0], 4, 0, (0.0, 0.0));
        let b = fp([1.1, 1.2, 7.0, -9.0], 4, 0, (1.0, 0.0));
        let (num, _) = assemble_features(&[&a, &b]).unwrap();
        assert_eq!(num[4..8], b.geom);
    }

    #[test]
    fn mixed_subcarriers_rejected() {
        let a = fp([0.0; 4], 4, 0, (0.0, 0.0));
        let b = fp([0.0; 4], 8, 0, (0.0, 0.0));
        assert!(matches!(assemble_features(&[&a, &b]), Err(Error::Shape(_))));
    }

    #[test]
    fn small_dataset_invariants() {
        let scene = Scene::preset(Preset::Dense, 3);
        let cfg = DatasetConfig {
            locations: 80,
            hotspots: 8,
            train_per_point: 2,
            test_per_point: 2,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&scene, &cfg).unwrap();
        assert!(!ds.samples.is_empty());
        for s in &ds.samples {
            assert_eq!(s.v_num.len(), 4 * cfg.s);
            assert_eq!(s.targets.len(), cfg.s + 1);
            assert_eq!(s.subcarriers(), 64);
            if s.split == Split::Test {
                assert!(s.contains_unseen);
            }
        }
        let n_traj = ds.samples.len() / 3;
        for t in 0..n_traj {
            let a = &ds.samples[t];
            let b = &ds.samples[n_traj + t];
            assert_eq!(a.targets, b.targets);
            assert_eq!(a.trajectory_id, b.trajectory_id);
            assert_eq!((a.band_id, b.band_id), (0, 1));
        }
    }
}
