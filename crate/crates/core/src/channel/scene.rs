//! Synthetic 2-D scenes and UE placement.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::{Bounds, Point2, Wall};
use crate::error::{Error, Result};

/// Base station, reflecting walls and the area UEs may occupy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bs: Point2,
    pub walls: Vec<Wall>,
    pub bounds: Bounds,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Sparse blockers, mostly line of sight.
    Open,
    /// A street between two long building rows with gaps.
    Canyon,
    /// Randomly placed rectangular buildings.
    Dense,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(Preset::Open),
            "canyon" => Ok(Preset::Canyon),
            "dense" => Ok(Preset::Dense),
            other => Err(Error::Config(format!("unknown scene preset `{other}`"))),
        }
    }
}

const AREA: f64 = 60.0;

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(self.bounds.min.x < self.bounds.max.x && self.bounds.min.y < self.bounds.max.y) {
            return Err(Error::Config("scene bounds are empty".into()));
        }
        if !self.bounds.contains(self.bs) {
            return Err(Error::Config("base station lies outside the scene bounds".into()));
        }
        if let Some(i) = self.walls.iter().position(|w| w.length() <= 0.0) {
            return Err(Error::Config(format!("wall {i} has zero length")));
        }
        Ok(())
    }

    pub fn preset(preset: Preset, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = Bounds::from([0.0, 0.0, AREA, AREA]);
        let scene = match preset {
            Preset::Open => {
                let mut walls = Vec::new();
                for _ in 0..3 {
                    let c = Point2::new(rng.random_range(10.0..50.0), rng.random_range(10.0..50.0));
                    let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    let half = rng.random_range(2.0..5.0);
                    let d = Point2::new(ang.cos(), ang.sin()) * half;
                    walls.push(Wall::new(c - d, c + d));
                }
                Scene {
                    bs: Point2::new(30.0, 30.0),
                    walls,
                    bounds,
                    seed,
                }
            }
            Preset::Canyon => {
                let mut walls = Vec::new();
                for &y in &[22.0, 38.0] {
                    let mut x = 0.0;
                    while x < AREA {
                        let len = rng.random_range(8.0..16.0);
                        let end = (x + len).min(AREA);
                        walls.push(Wall::from([x, y, end, y]));
                        x = end + rng.random_range(2.0..5.0);
                    }
                }
                for _ in 0..2 {
                    let x = rng.random_range(20.0..55.0);
                    let y = rng.random_range(25.0..35.0);
                    walls.push(Wall::from([x, y - 1.5, x, y + 1.5]));
                }
                Scene {
                    bs: Point2::new(3.0, 30.0),
                    walls,
                    bounds,
                    seed,
                }
            }
            Preset::Dense => {
                let bs = Point2::new(30.0, 30.0);
                let mut boxes: Vec<[f64; 4]> = Vec::new();
                let mut attempts = 0;
                while boxes.len() < 9 && attempts < 500 {
                    attempts += 1;
                    let w = rng.random_range(5.0..11.0);
                    let h = rng.random_range(5.0..11.0);
                    let x0 = rng.random_range(2.0..AREA - 2.0 - w);
                    let y0 = rng.random_range(2.0..AREA - 2.0 - h);
                    let r = [x0, y0, x0 + w, y0 + h];
                    let clear_bs = bs.x < r[0] - 3.0 || bs.x > r[2] + 3.0 || bs.y < r[1] - 3.0 || bs.y > r[3] + 3.0;
                    let apart = boxes.iter().all(|b| {
                        r[0] > b[2] + 3.0 || r[2] < b[0] - 3.0 || r[1] > b[3] + 3.0 || r[3] < b[1] - 3.0
                    });
                    if clear_bs && apart {
                        boxes.push(r);
                    }
                }
                let walls = boxes
                    .iter()
                    .flat_map(|b| {
                        [
                            Wall::from([b[0], b[1], b[2], b[1]]),
                            Wall::from([b[2], b[1], b[2], b[3]]),
                            Wall::from([b[2], b[3], b[0], b[3]]),
                            Wall::from([b[0], b[3], b[0], b[1]]),
                        ]
                    })
                    .collect();
                Scene { bs, walls, bounds, seed }
            }
        };
        debug_assert!(scene.validate().is_ok());
        scene
    }

    pub fn load(path: &Path) -> Result<Self> {
        let scene: Scene = serde_json::from_str(&fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Draws UE positions around `hotspots` Gaussian centers (std `spread`
    /// meters). Positions outside the bounds or within 0.5 m of the base
    /// station are redrawn.
    pub fn sample_locations(&self, count: usize, hotspots: usize, spread: f64, seed: u64) -> Vec<Point2> {
        let hotspots = hotspots.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let margin = 2.0;
        let centers: Vec<Point2> = (0..hotspots)
            .map(|_| {
                Point2::new(
                    rng.random_range(self.bounds.min.x + margin..self.bounds.max.x - margin),
                    rng.random_range(self.bounds.min.y + margin..self.bounds.max.y - margin),
                )
            })
            .collect();
        let normal = Normal::new(0.0, spread.max(1e-9)).expect("positive spread");
        (0..count)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64 + 1));
                let c = centers[i % hotspots];
                loop {
                    let p = Point2::new(c.x + normal.sample(&mut r), c.y + normal.sample(&mut r));
                    if self.bounds.contains(p) && p.dist(self.bs) > 0.5 {
                        break p;
                    }
                }
            })
            .collect()
    }
}

/// Mixes a base seed with an index so per-item streams are independent of
/// evaluation order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_deterministic() {
        for p in [Preset::Open, Preset::Canyon, Preset::Dense] {
            let a = Scene::preset(p, 7);
            a.validate().unwrap();
            assert_eq!(a, Scene::preset(p, 7));
            assert!(!a.walls.is_empty());
        }
        assert_ne!(Scene::preset(Preset::Dense, 1), Scene::preset(Preset::Dense, 2));
    }

    #[test]
    fn json_layout_uses_tuples() {
        let s = Scene {
            bs: Point2::new(1.0, 2.0),
            walls: vec![Wall::from([0.0, 0.0, 1.0, 0.0])],
            bounds: Bounds::from([0.0, 0.0, 5.0, 5.0]),
            seed: 3,
        };
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["bs"], serde_json::json!([1.0, 2.0]));
        assert_eq!(v["walls"], serde_json::json!([[0.0, 0.0, 1.0, 0.0]]));
        assert_eq!(v["bounds"], serde_json::json!([0.0, 0.0, 5.0, 5.0]));
        let back: Scene = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn validation_rejects_bad_scenes() {
        let mut s = Scene::preset(Preset::Open, 0);
        s.bs = Point2::new(-1.0, 0.0);
        assert!(s.validate().is_err());
        let mut s = Scene::preset(Preset::Open, 0);
        s.walls.push(Wall::from([1.0, 1.0, 1.0, 1.0]));
        assert!(s.validate().is_err());
    }

    #[test]
    fn locations_stay_in_bounds() {
        let s = Scene::preset(Preset::Canyon, 4);
        let pts = s.sample_locations(100, 10, 1.5, 11);
        assert_eq!(pts.len(), 100);
        assert!(pts.iter().all(|p| s.bounds.contains(*p) && p.dist(s.bs) > 0.5));
        assert_eq!(pts, s.sample_locations(100, 10, 1.5, 11));
    }
}
