//! Deterministic dataset edits applied after synthesis: satellite keep-lists,
//! signal outages, channel drops, and receiver clock steps. Edits change the
//! measurement streams (and ground truth where the physics demands it, namely
//! a clock step) but never re-roll any noise.

use serde::{Deserialize, Serialize};

use crate::constants::SPEED_OF_LIGHT;
use crate::gnss::types::Constellation;
use crate::sim::synth::Dataset;

/// Identifies one satellite across the whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SatelliteKey {
    pub constellation: Constellation,
    pub sat_id: u32,
}

/// A step in the receiver clock, as produced by receiver-internal steering.
/// All four constellation biases jump together; the drift is unchanged, so
/// Doppler is unaffected.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClockJump {
    /// Relative time of the step (s).
    pub t: f64,
    /// Step magnitude (s).
    pub step_s: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// When set, only these satellites survive from `keep_from` onward. An
    /// empty list empties every affected epoch.
    pub keep_satellites: Option<Vec<SatelliteKey>>,
    /// Relative time from which the keep-list applies (s).
    pub keep_from: f64,
    /// Relative intervals `[start, end)` during which every epoch is emptied.
    pub outages: Vec<[f64; 2]>,
    /// Remove the Doppler channel from every observation.
    pub drop_doppler: bool,
    /// Pseudoranges stay in the data (satellite states are computed from
    /// them) but the estimator must not build pseudorange factors.
    pub drop_pseudorange: bool,
    pub clock_jump: Option<ClockJump>,
}

impl ScenarioConfig {
    pub fn is_noop(&self) -> bool {
        self.keep_satellites.is_none()
            && self.outages.is_empty()
            && !self.drop_doppler
            && !self.drop_pseudorange
            && self.clock_jump.is_none()
    }
}

/// Applies `scenario` to `dataset` in place and records it in the dataset.
pub fn apply_scenario(dataset: &mut Dataset, scenario: &ScenarioConfig) {
    let t0 = dataset.config.t0;
    for epoch in &mut dataset.gnss {
        let t_rel = epoch.t - t0;
        if scenario.outages.iter().any(|w| t_rel >= w[0] && t_rel < w[1]) {
            epoch.observations.clear();
            continue;
        }
        if let Some(keep) = &scenario.keep_satellites {
            if t_rel >= scenario.keep_from {
                epoch.observations.retain(|o| {
                    keep.contains(&SatelliteKey { constellation: o.constellation, sat_id: o.sat_id })
                });
            }
        }
        if scenario.drop_doppler {
            for o in &mut epoch.observations {
                o.doppler = None;
            }
        }
        if let Some(jump) = scenario.clock_jump {
            if t_rel >= jump.t {
                for o in &mut epoch.observations {
                    o.pseudorange += SPEED_OF_LIGHT * jump.step_s;
                }
            }
        }
    }
    if let Some(jump) = scenario.clock_jump {
        for rec in &mut dataset.truth {
            if rec.t >= jump.t {
                for b in &mut rec.clock_bias {
                    *b += jump.step_s;
                }
            }
        }
    }
    dataset.scenario = scenario.clone();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::synth::{synthesize, SimConfig};

    fn base() -> Dataset {
        let config = SimConfig { seed: 9, duration: 10.0, ..SimConfig::default() }.noiseless();
        synthesize(&config).unwrap()
    }

    #[test]
    fn empty_keep_list_empties_every_epoch() {
        let mut ds = base();
        apply_scenario(
            &mut ds,
            &ScenarioConfig { keep_satellites: Some(vec![]), ..Default::default() },
        );
        assert!(ds.gnss.iter().all(|e| e.observations.is_empty()));
        assert_eq!(ds.gnss.len(), base().gnss.len());
    }

    #[test]
    fn keep_list_filters_from_start_time() {
        let mut ds = base();
        let keys = vec![
            SatelliteKey { constellation: Constellation::Gps, sat_id: 1 },
            SatelliteKey { constellation: Constellation::Gps, sat_id: 2 },
            SatelliteKey { constellation: Constellation::Glonass, sat_id: 1 },
        ];
        apply_scenario(
            &mut ds,
            &ScenarioConfig {
                keep_satellites: Some(keys.clone()),
                keep_from: 5.0,
                ..Default::default()
            },
        );
        for epoch in &ds.gnss {
            let t_rel = epoch.t - ds.config.t0;
            if t_rel >= 5.0 {
                assert!(epoch.observations.len() <= keys.len());
                for o in &epoch.observations {
                    assert!(keys.contains(&SatelliteKey {
                        constellation: o.constellation,
                        sat_id: o.sat_id
                    }));
                }
            } else {
                assert!(epoch.observations.len() > keys.len());
            }
        }
    }

    #[test]
    fn outage_blanks_only_the_window() {
        let mut ds = base();
        apply_scenario(&mut ds, &ScenarioConfig { outages: vec![[3.0, 5.0]], ..Default::default() });
        let reference = base();
        for (edited, orig) in ds.gnss.iter().zip(&reference.gnss) {
            let t_rel = edited.t - ds.config.t0;
            if (3.0..5.0).contains(&t_rel) {
                assert!(edited.observations.is_empty());
            } else {
                assert_eq!(edited.observations.len(), orig.observations.len());
            }
        }
    }

    #[test]
    fn clock_jump_steps_pseudoranges_and_truth() {
        let mut ds = base();
        let step = 20e-3;
        apply_scenario(
            &mut ds,
            &ScenarioConfig {
                clock_jump: Some(ClockJump { t: 4.0, step_s: step }),
                ..Default::default()
            },
        );
        let reference = base();
        for (edited, orig) in ds.gnss.iter().zip(&reference.gnss) {
            let t_rel = edited.t - ds.config.t0;
            for (oe, oo) in edited.observations.iter().zip(&orig.observations) {
                let dpr = oe.pseudorange - oo.pseudorange;
                if t_rel >= 4.0 {
                    assert!((dpr - SPEED_OF_LIGHT * step).abs() < 1e-9);
                } else {
                    assert_eq!(dpr, 0.0);
                }
                assert_eq!(oe.doppler, oo.doppler);
            }
        }
        for (re, ro) in ds.truth.iter().zip(&reference.truth) {
            let expect = if re.t >= 4.0 { step } else { 0.0 };
            for i in 0..4 {
                assert!((re.clock_bias[i] - ro.clock_bias[i] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn doppler_drop_clears_channel_only() {
        let mut ds = base();
        apply_scenario(&mut ds, &ScenarioConfig { drop_doppler: true, ..Default::default() });
        let reference = base();
        for (edited, orig) in ds.gnss.iter().zip(&reference.gnss) {
            for (oe, oo) in edited.observations.iter().zip(&orig.observations) {
                assert!(oe.doppler.is_none());
                assert_eq!(oe.pseudorange, oo.pseudorange);
            }
        }
        assert!(!ds.scenario.is_noop());
    }
}
