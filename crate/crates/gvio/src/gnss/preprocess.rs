//! Epoch preprocessing: satellite state and correction computation, quality
//! filtering, and receiver clock jump detection.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::constants::SPEED_OF_LIGHT;
use crate::frames::{ecef_to_geodetic, elevation_azimuth, sagnac_correction};
use crate::gnss::atmosphere::{iono_frequency_scale, klobuchar_delay, saastamoinen_delay};
use crate::gnss::ephemeris::{EphemerisStore, DEFAULT_VALIDITY};
use crate::gnss::measurement::{elevation_sigma, transmit_time};
use crate::gnss::types::{Constellation, EpochObservations, IonoParams};
use crate::gnss::GnssError;

/// Quality gates applied per observation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Elevation mask (rad).
    pub elevation_mask: f64,
    /// Minimum consecutive tracking epochs.
    pub min_lock_count: u32,
    /// Ephemeris validity horizon around toe (s).
    pub ephemeris_validity: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            elevation_mask: 10.0f64.to_radians(),
            min_lock_count: 10,
            ephemeris_validity: DEFAULT_VALIDITY,
        }
    }
}

/// One observation with everything the solvers need precomputed: satellite
/// state at transmit time, atmospheric corrections, and noise sigmas. The
/// geometry-dependent pieces are evaluated at the approximate receiver
/// position handed to [`preprocess_epoch`] and then held fixed.
#[derive(Debug, Clone)]
pub struct PreparedObservation {
    pub constellation: Constellation,
    pub sat_id: u32,
    /// Measured pseudorange (m), after any clock-jump repair.
    pub pseudorange: f64,
    /// Measured Doppler (Hz), when the channel provided one.
    pub doppler: Option<f64>,
    pub wavelength: f64,
    /// Satellite position in ECEF at transmit time (m).
    pub sat_pos: Vector3<f64>,
    /// Satellite velocity in ECEF at transmit time (m/s).
    pub sat_vel: Vector3<f64>,
    /// Satellite clock bias (s) and drift (s/s) at transmit time.
    pub sat_clock_bias: f64,
    pub sat_clock_drift: f64,
    /// Tropospheric and ionospheric delays (m) at the approximate position.
    pub tropo: f64,
    pub iono: f64,
    /// Sagnac correction (m) frozen at the approximate position, so factor
    /// Jacobians can treat it as a constant measurement correction.
    pub sagnac: f64,
    /// Unit line of sight receiver-to-satellite at the approximate position.
    pub unit_to_sat: Vector3<f64>,
    /// Elevation (rad) at the approximate position.
    pub elevation: f64,
    /// Pseudorange and Doppler standard deviations after elevation scaling.
    pub sigma_pr: f64,
    pub sigma_dp: f64,
}

/// Filters an epoch and computes per-observation satellite states and
/// corrections. `approx_rec_ecef` is a coarse receiver position (from SPP or
/// the last estimate); it only steers elevation, weights, and atmospheric
/// corrections. Output is sorted by (constellation, sat_id).
pub fn preprocess_epoch(
    epoch: &EpochObservations,
    store: &EphemerisStore,
    approx_rec_ecef: &Vector3<f64>,
    iono: &IonoParams,
    config: &PreprocessConfig,
) -> Vec<PreparedObservation> {
    let rec_geo = match ecef_to_geodetic(approx_rec_ecef) {
        Ok(g) => g,
        Err(_) => return Vec::new(),
    };
    let mut out: Vec<PreparedObservation> = Vec::with_capacity(epoch.observations.len());
    for obs in &epoch.observations {
        if !obs.healthy || obs.lock_count < config.min_lock_count {
            continue;
        }
        let Ok(eph) = store.lookup(obs.constellation, obs.sat_id, epoch.t) else {
            continue;
        };
        if eph.health != 0 {
            continue;
        }
        let Ok((_t_tx, sat)) = transmit_time(eph, epoch.t, obs.pseudorange, config.ephemeris_validity)
        else {
            continue;
        };
        let Ok((elevation, azimuth)) = elevation_azimuth(&sat.pos, approx_rec_ecef) else {
            continue;
        };
        if elevation < config.elevation_mask {
            continue;
        }
        let Ok(tropo) = saastamoinen_delay(&rec_geo, elevation) else { continue };
        let Ok(iono_l1) = klobuchar_delay(&rec_geo, elevation, azimuth, epoch.t, iono) else {
            continue;
        };
        let iono_m = iono_l1 * iono_frequency_scale(obs.wavelength);
        let Ok(sigma_pr) = elevation_sigma(obs.noise_sat, obs.noise_pr, elevation) else { continue };
        let Ok(sigma_dp) = elevation_sigma(obs.noise_sat, obs.noise_dp, elevation) else { continue };
        out.push(PreparedObservation {
            constellation: obs.constellation,
            sat_id: obs.sat_id,
            pseudorange: obs.pseudorange,
            doppler: obs.doppler,
            wavelength: obs.wavelength,
            sat_pos: sat.pos,
            sat_vel: sat.vel,
            sat_clock_bias: sat.clock_bias,
            sat_clock_drift: sat.clock_drift,
            tropo,
            iono: iono_m,
            sagnac: sagnac_correction(&sat.pos, approx_rec_ecef),
            unit_to_sat: (sat.pos - approx_rec_ecef).normalize(),
            elevation,
            sigma_pr,
            sigma_dp,
        });
    }
    out.sort_by(|a, b| (a.constellation, a.sat_id).cmp(&(b.constellation, b.sat_id)));
    out
}

/// Number of distinct constellations among prepared observations.
pub fn constellation_count(obs: &[PreparedObservation]) -> usize {
    let mut seen = [false; 4];
    for o in obs {
        seen[o.constellation.index()] = true;
    }
    seen.iter().filter(|s| **s).count()
}

/// Detects a receiver clock jump between two consecutive epochs from the
/// common-satellite pseudorange change: a jump is declared when the median
/// change exceeds `threshold` (m) while the spread (MAD) stays below
/// `max_mad` (m). Returns the jump in seconds.
pub fn detect_clock_jump(
    prev: &EpochObservations,
    cur: &EpochObservations,
    threshold: f64,
    max_mad: f64,
) -> Result<Option<f64>, GnssError> {
    let mut deltas: Vec<f64> = Vec::new();
    for o in &cur.observations {
        if let Some(p) = prev
            .observations
            .iter()
            .find(|p| p.constellation == o.constellation && p.sat_id == o.sat_id)
        {
            deltas.push(o.pseudorange - p.pseudorange);
        }
    }
    if deltas.len() < 4 {
        return Err(GnssError::InsufficientCommonSatellites { found: deltas.len(), need: 4 });
    }
    let med = median(&mut deltas.clone());
    let mut abs_dev: Vec<f64> = deltas.iter().map(|d| (d - med).abs()).collect();
    let mad = median(&mut abs_dev);
    if med.abs() > threshold && mad < max_mad {
        Ok(Some(med / SPEED_OF_LIGHT))
    } else {
        Ok(None)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Streaming clock-jump repair: watches consecutive epochs and subtracts the
/// accumulated jump from every subsequent pseudorange, so downstream
/// consumers see a continuous receiver clock.
#[derive(Debug, Default)]
pub struct ClockJumpMonitor {
    prev: Option<EpochObservations>,
    /// Accumulated jump (s).
    total_jump: f64,
    /// Jumps detected so far: (epoch time, jump seconds).
    pub detections: Vec<(f64, f64)>,
}

/// Median pseudorange step (m) that flags a clock jump.
pub const CLOCK_JUMP_THRESHOLD: f64 = 1e5;
/// Maximum spread (MAD, m) for a step to count as a common-mode jump.
pub const CLOCK_JUMP_MAX_MAD: f64 = 1e3;

impl ClockJumpMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulated repair applied to the stream so far (s).
    pub fn total_jump(&self) -> f64 {
        self.total_jump
    }

    /// Processes one epoch, returning it with repaired pseudoranges.
    pub fn process(&mut self, mut epoch: EpochObservations) -> EpochObservations {
        // Detection compares raw measurements, so check against the
        // unrepaired previous epoch before applying the running offset.
        if let Some(prev) = &self.prev {
            if let Ok(Some(jump)) =
                detect_clock_jump(prev, &epoch, CLOCK_JUMP_THRESHOLD, CLOCK_JUMP_MAX_MAD)
            {
                self.total_jump += jump;
                self.detections.push((epoch.t, jump));
            }
        }
        self.prev = Some(epoch.clone());
        let repair = self.total_jump * SPEED_OF_LIGHT;
        for o in &mut epoch.observations {
            o.pseudorange -= repair;
        }
        epoch
    }
}
