//! Channel frequency response and fingerprint extraction.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::geometry::Point2;
use super::trace::{Path, SPEED_OF_LIGHT};
use crate::error::{Error, Result};

/// OFDM band: carrier `f_c`, total bandwidth and subcarrier count. The
/// symbol-duration scale is `T_s = 1 / bandwidth`, so subcarrier `l` sits at
/// `f_c + l / (T_s N_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub subcarriers: usize,
}

impl BandConfig {
    pub fn new(carrier_hz: f64, bandwidth_hz: f64, subcarriers: usize) -> Result<Self> {
        let band = Self {
            carrier_hz,
            bandwidth_hz,
            subcarriers,
        };
        band.validate()?;
        Ok(band)
    }

    /// 50 MHz, 64 subcarriers at the given carrier.
    pub fn standard(carrier_hz: f64) -> Self {
        Self {
            carrier_hz,
            bandwidth_hz: 50e6,
            subcarriers: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subcarriers == 0 || !(self.bandwidth_hz > 0.0) || !(self.carrier_hz > 0.0) {
            return Err(Error::Config(format!("invalid band {self:?}")));
        }
        Ok(())
    }

    pub fn symbol_scale(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }

    pub fn frequency(&self, l: usize) -> f64 {
        self.carrier_hz + l as f64 / (self.symbol_scale() * self.subcarriers as f64)
    }
}

/// Coherent per-subcarrier sum `sum_i a_i e^{j phi_i} e^{-j 2 pi f_l tau_i}`.
pub fn cfr_from_paths(paths: &[Path], band: &BandConfig) -> Vec<Complex64> {
    (0..band.subcarriers)
        .map(|l| {
            let f = band.frequency(l);
            paths
                .iter()
                .map(|p| Complex64::from_polar(p.amplitude, p.phase - 2.0 * PI * f * p.delay))
                .sum()
        })
        .collect()
}

/// Multimodal fingerprint at one position for one band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub position: Point2,
    /// `3 x N_c` row-major: real part, imaginary part, magnitude.
    pub cfr: Vec<f64>,
    pub subcarriers: usize,
    /// Dominant AoD (rad), dominant AoA (rad), distance (m), gain (dB).
    pub geom: [f64; 4],
    pub los: bool,
    pub band_id: usize,
}

impl Fingerprint {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.cfr[c * self.subcarriers..(c + 1) * self.subcarriers]
    }
}

/// Index of the strongest path, ties broken by the shorter delay.
pub fn dominant_path(paths: &[Path]) -> Option<usize> {
    (0..paths.len()).min_by(|&i, &j| {
        paths[j]
            .amplitude
            .total_cmp(&paths[i].amplitude)
            .then(paths[i].delay.total_cmp(&paths[j].delay))
    })
}

pub fn fingerprint(paths: &[Path], band: &BandConfig, position: Point2, band_id: usize) -> Result<Fingerprint> {
    let dom = dominant_path(paths).ok_or(Error::NoCoverage {
        x: position.x,
        y: position.y,
    })?;
    let h = cfr_from_paths(paths, band);
    let n = band.subcarriers;
    let mut cfr = vec![0.0; 3 * n];
    for (l, z) in h.iter().enumerate() {
        cfr[l] = z.re;
        cfr[n + l] = z.im;
        cfr[2 * n + l] = z.norm();
    }
    let power: f64 = paths.iter().map(|p| p.amplitude * p.amplitude).sum();
    let d = &paths[dom];
    Ok(Fingerprint {
        position,
        cfr,
        subcarriers: n,
        geom: [d.aod, d.aoa, d.delay * SPEED_OF_LIGHT, 10.0 * power.log10()],
        los: paths.iter().any(|p| p.order == 0),
        band_id,
    })
}
