//! Forward measurement synthesis. Turns the closed-form trajectory plus a
//! synthetic satellite sky into IMU, feature-track, and GNSS observation
//! streams with configurable noise. With all sigmas at zero the output is a
//! bit-reproducible noiseless dataset whose measurements satisfy the
//! estimator's models exactly.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::frames::{geodetic_to_ecef, FrameAlignment, FrameError, Geodetic};
use crate::gnss::ephemeris::EphemerisStore;
use crate::gnss::types::{
    BroadcastEphemeris, Constellation, EpochObservations, GnssObservation, IonoParams,
};
use crate::inertial::{ImuNoiseParams, ImuSample, MotionState};
use crate::sim::constellation::{default_sky, synthesize_constellation};
use crate::sim::forward::{forward_doppler, forward_pseudorange};
use crate::sim::scenario::ScenarioConfig;
use crate::sim::trajectory::{Trajectory, TrajectoryConfig};
use crate::sim::SimError;
use crate::vision::{CameraExtrinsics, CameraModel};

/// Satellites below this elevation are not generated at all; the receiver
/// acquisition floor sits under the estimator's own elevation mask.
const GENERATION_ELEVATION_MASK: f64 = 5.0 * std::f64::consts::PI / 180.0;
/// Landmarks are observable between these camera depths (m).
const VIS_MIN_DEPTH: f64 = 0.5;
const VIS_MAX_DEPTH: f64 = 60.0;
/// A feature must land this many pixels inside the image to be reported.
const PIXEL_MARGIN: f64 = 1.0;
/// Landmark field half-extents (m): horizontal square and vertical band
/// around the trajectory volume.
const LANDMARK_HALF_XY: f64 = 25.0;
const LANDMARK_HALF_Z: f64 = 12.0;
/// Every frame must see at least this many features or the dataset is
/// rejected as miscalibrated.
const MIN_FEATURES_PER_FRAME: usize = 8;

/// Decorrelated per-stream RNG seeds derived from the dataset seed.
const STREAM_LANDMARKS: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM_IMU: u64 = 0x2545_f491_4f6c_dd1d;
const STREAM_CAMERA: u64 = 0x6a09_e667_f3bc_c909;
const STREAM_GNSS: u64 = 0xbb67_ae85_84ca_a73b;

/// Receiver site in degrees for configuration friendliness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SiteConfig {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub height_m: f64,
}

impl Default for SiteConfig {
    fn default() -> Self {
        Self { lat_deg: 30.0, lon_deg: 120.0, height_m: 50.0 }
    }
}

impl SiteConfig {
    pub fn geodetic(&self) -> Geodetic {
        Geodetic {
            lat: self.lat_deg.to_radians(),
            lon: self.lon_deg.to_radians(),
            height: self.height_m,
        }
    }
}

/// True receiver clock: one initial bias per constellation slot plus a shared
/// linear drift. The inter-constellation offsets stay constant over a run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClockTruth {
    /// Initial receiver clock bias per constellation (s).
    pub initial_bias: [f64; 4],
    /// Shared clock drift (s/s).
    pub drift: f64,
}

impl Default for ClockTruth {
    fn default() -> Self {
        Self { initial_bias: [5.0e-5, 6.2e-5, 4.4e-5, 5.7e-5], drift: 1.0e-7 }
    }
}

impl ClockTruth {
    /// Clock bias for `c` at relative time `t_rel` (s).
    pub fn bias_at(&self, c: Constellation, t_rel: f64) -> f64 {
        self.initial_bias[c.index()] + self.drift * t_rel
    }
}

/// Full description of one synthetic dataset. Serializes to TOML so a run is
/// reproducible from its config file alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Run length (s).
    pub duration: f64,
    /// GNSS time of week at relative time zero (s).
    pub t0: f64,
    pub site: SiteConfig,
    /// True yaw offset between the local world frame and ENU (rad).
    pub yaw_offset: f64,
    pub trajectory: TrajectoryConfig,
    /// Stream rates (Hz).
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub gnss_rate: f64,
    /// GNSS epochs sit at `k / gnss_rate + gnss_time_offset` relative seconds,
    /// so a nonzero offset desynchronizes them from camera frames.
    pub gnss_time_offset: f64,
    pub imu_noise: ImuNoiseParams,
    /// True accelerometer and gyroscope biases at t = 0.
    pub initial_accel_bias: [f64; 3],
    pub initial_gyro_bias: [f64; 3],
    /// Measurement noise, one sigma; zero disables that channel's noise.
    pub pixel_sigma: f64,
    pub pr_sigma: f64,
    pub dp_sigma: f64,
    pub clock: ClockTruth,
    pub camera: CameraModel,
    pub extrinsics: CameraExtrinsics,
    /// Landmarks scattered in the fixed field box; the default is calibrated
    /// so roughly 100 are visible per frame.
    pub landmark_count: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration: 120.0,
            t0: 100_000.0,
            site: SiteConfig::default(),
            yaw_offset: 0.35,
            trajectory: TrajectoryConfig::default(),
            imu_rate: 200.0,
            cam_rate: 10.0,
            gnss_rate: 10.0,
            gnss_time_offset: 0.0,
            imu_noise: ImuNoiseParams::default(),
            initial_accel_bias: [0.02, -0.015, 0.01],
            initial_gyro_bias: [0.002, -0.001, 0.0015],
            pixel_sigma: 0.5,
            pr_sigma: 1.0,
            dp_sigma: 0.5,
            clock: ClockTruth::default(),
            camera: CameraModel::from_fov(640, 480, 75.0_f64.to_radians(), 55.0_f64.to_radians()),
            extrinsics: forward_camera_extrinsics(),
            landmark_count: 620,
        }
    }
}

impl SimConfig {
    /// Zeroes every injected noise channel (measurements, IMU white noise,
    /// and bias walks). True biases keep their initial values.
    pub fn noiseless(mut self) -> Self {
        self.pixel_sigma = 0.0;
        self.pr_sigma = 0.0;
        self.dp_sigma = 0.0;
        self.imu_noise.accel_noise_density = 0.0;
        self.imu_noise.gyro_noise_density = 0.0;
        self.imu_noise.accel_bias_walk = 0.0;
        self.imu_noise.gyro_bias_walk = 0.0;
        self
    }
}

/// Camera mounted looking along body +x: camera z is forward, camera x is
/// body -y (right), camera y is body -z (down), with a small lever arm.
pub fn forward_camera_extrinsics() -> CameraExtrinsics {
    let r = Matrix3::from_columns(&[
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(1.0, 0.0, 0.0),
    ]);
    CameraExtrinsics {
        r_bc: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
        p_bc: Vector3::new(0.1, 0.0, 0.05),
    }
}

/// Ground truth at one camera frame time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    /// Relative time (s).
    pub t: f64,
    pub state: MotionState,
    /// Receiver clock bias per constellation (s) and shared drift (s/s).
    pub clock_bias: [f64; 4],
    pub clock_drift: f64,
}

/// One tracked feature in one frame, in raw pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureObservation {
    /// Landmark identity; stable across all frames.
    pub id: u64,
    pub u: f64,
    pub v: f64,
}

/// All features seen by one camera frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub frame_id: u64,
    /// Relative time (s).
    pub t: f64,
    pub features: Vec<FeatureObservation>,
}

/// A complete synthetic dataset: configuration, ground truth, and the three
/// measurement streams the estimator consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub config: SimConfig,
    /// Deterministic edits applied after synthesis, if any.
    pub scenario: ScenarioConfig,
    /// ECEF position of the local frame anchor (the site).
    pub anchor_ecef: Vector3<f64>,
    pub truth: Vec<TruthRecord>,
    /// True landmark positions in the local world frame; index is feature id.
    pub landmarks: Vec<Vector3<f64>>,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FeatureFrame>,
    /// GNSS epochs stamped with absolute GNSS seconds (`t0` + relative).
    pub gnss: Vec<EpochObservations>,
    pub ephemerides: Vec<BroadcastEphemeris>,
    pub iono: IonoParams,
}

impl Dataset {
    /// True anchor/yaw alignment between the local world frame and ECEF.
    pub fn alignment(&self) -> Result<FrameAlignment, FrameError> {
        FrameAlignment::new(self.anchor_ecef, self.config.yaw_offset)
    }

    pub fn ephemeris_store(&self) -> EphemerisStore {
        EphemerisStore::new(self.ephemerides.iter().cloned())
    }
}

/// Generates a dataset from `config`. Deterministic for a fixed config: the
/// four RNG streams (landmarks, IMU, camera, GNSS) are seeded independently
/// from `config.seed` and consumed in a fixed order.
pub fn synthesize(config: &SimConfig) -> Result<Dataset, SimError> {
    let trajectory = Trajectory::new(config.trajectory.clone())?;
    let site = config.site.geodetic();
    let anchor_ecef = geodetic_to_ecef(&site);
    let alignment = FrameAlignment::new(anchor_ecef, config.yaw_offset)
        .map_err(|e| SimError::LandmarkCalibration(format!("site is degenerate: {e}")))?;

    let landmarks = generate_landmarks(config);
    let (imu, bias_track) = generate_imu(config, &trajectory);
    let frames = generate_frames(config, &trajectory, &landmarks)?;
    let ephemerides = synthesize_constellation(&site, config.t0 + 60.0, &default_sky());
    let store = EphemerisStore::new(ephemerides.iter().cloned());
    let iono = IonoParams::default();
    let gnss = generate_gnss(config, &trajectory, &alignment, &store, &iono);

    let truth = truth_records(config, &trajectory, &bias_track);

    Ok(Dataset {
        config: config.clone(),
        scenario: ScenarioConfig::default(),
        anchor_ecef,
        truth,
        landmarks,
        imu,
        frames,
        gnss,
        ephemerides,
        iono,
    })
}

fn generate_landmarks(config: &SimConfig) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_LANDMARKS);
    let mut out = Vec::with_capacity(config.landmark_count);
    for _ in 0..config.landmark_count {
        let x = rng.gen_range(-LANDMARK_HALF_XY..LANDMARK_HALF_XY);
        let y = rng.gen_range(-LANDMARK_HALF_XY..LANDMARK_HALF_XY);
        let z = rng.gen_range(-LANDMARK_HALF_Z..LANDMARK_HALF_Z);
        out.push(Vector3::new(x, y, z));
    }
    out
}

/// IMU stream plus the true bias values at every sample time.
fn generate_imu(
    config: &SimConfig,
    trajectory: &Trajectory,
) -> (Vec<ImuSample>, Vec<(Vector3<f64>, Vector3<f64>)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_IMU);
    let normal = StandardNormal;
    let draw = |scale: f64, r: &mut ChaCha8Rng| -> Vector3<f64> {
        let x: f64 = normal.sample(r);
        let y: f64 = normal.sample(r);
        let z: f64 = normal.sample(r);
        scale * Vector3::new(x, y, z)
    };

    let dt = 1.0 / config.imu_rate;
    let n = (config.duration * config.imu_rate).round() as usize + 1;
    let sigma_a = config.imu_noise.per_sample_accel_sigma(dt);
    let sigma_w = config.imu_noise.per_sample_gyro_sigma(dt);
    let walk_a = config.imu_noise.accel_bias_walk * dt.sqrt();
    let walk_w = config.imu_noise.gyro_bias_walk * dt.sqrt();

    let mut ba = Vector3::from_column_slice(&config.initial_accel_bias);
    let mut bw = Vector3::from_column_slice(&config.initial_gyro_bias);
    let mut samples = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let ideal = trajectory.imu_sample(t, &config.imu_noise.gravity);
        biases.push((ba, bw));
        samples.push(ImuSample {
            t,
            accel: ideal.accel + ba + draw(sigma_a, &mut rng),
            gyro: ideal.gyro + bw + draw(sigma_w, &mut rng),
        });
        ba += draw(walk_a, &mut rng);
        bw += draw(walk_w, &mut rng);
    }
    (samples, biases)
}

fn generate_frames(
    config: &SimConfig,
    trajectory: &Trajectory,
    landmarks: &[Vector3<f64>],
) -> Result<Vec<FeatureFrame>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_CAMERA);
    let normal = StandardNormal;
    let n = (config.duration * config.cam_rate).round() as usize + 1;
    let r_bc = config.extrinsics.r_bc;
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * (1.0 / config.cam_rate);
        let s = trajectory.sample(t);
        let q_wb = trajectory.attitude(t);
        let mut features = Vec::new();
        for (id, l) in landmarks.iter().enumerate() {
            let in_body = q_wb.inverse_transform_vector(&(l - s.p));
            let p_cam = r_bc.inverse_transform_vector(&(in_body - config.extrinsics.p_bc));
            if p_cam.z < VIS_MIN_DEPTH || p_cam.z > VIS_MAX_DEPTH {
                continue;
            }
            let Ok(px) = config.camera.project(&p_cam) else { continue };
            if !config.camera.in_view(&px, PIXEL_MARGIN) {
                continue;
            }
            let nu: f64 = normal.sample(&mut rng);
            let nv: f64 = normal.sample(&mut rng);
            let noisy = Vector2::new(px.x + config.pixel_sigma * nu, px.y + config.pixel_sigma * nv);
            if !config.camera.in_view(&noisy, 0.0) {
                continue;
            }
            features.push(FeatureObservation { id: id as u64, u: noisy.x, v: noisy.y });
        }
        if features.len() < MIN_FEATURES_PER_FRAME {
            return Err(SimError::LandmarkCalibration(format!(
                "frame {k} sees only {} features; raise landmark_count",
                features.len()
            )));
        }
        frames.push(FeatureFrame { frame_id: k as u64, t, features });
    }
    Ok(frames)
}

fn generate_gnss(
    config: &SimConfig,
    trajectory: &Trajectory,
    alignment: &FrameAlignment,
    store: &EphemerisStore,
    iono: &IonoParams,
) -> Vec<EpochObservations> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_GNSS);
    let normal = StandardNormal;
    // Noiseless datasets still need usable measurement weights downstream.
    let noise_pr = if config.pr_sigma > 0.0 { config.pr_sigma } else { 1.0 };
    let noise_dp = if config.dp_sigma > 0.0 { config.dp_sigma } else { 0.5 };

    let mut locks: BTreeMap<(Constellation, u32), u32> = BTreeMap::new();
    let mut epochs = Vec::new();
    let mut k = 0usize;
    loop {
        let t_rel = k as f64 * (1.0 / config.gnss_rate) + config.gnss_time_offset;
        if t_rel > config.duration {
            break;
        }
        k += 1;
        let t_abs = config.t0 + t_rel;
        let s = trajectory.sample(t_rel);
        let rec = alignment.local_to_ecef(&s.p);
        let vel = alignment.local_dir_to_ecef(&s.v);
        let drift = config.clock.drift;

        let mut seen: Vec<(Constellation, u32)> = Vec::new();
        let mut observations = Vec::new();
        for eph in store.iter() {
            let bias = config.clock.bias_at(eph.constellation, t_rel);
            let Some(fwd) = forward_pseudorange(eph, t_abs, &rec, bias, iono) else { continue };
            if fwd.elevation < GENERATION_ELEVATION_MASK {
                continue;
            }
            let wavelength = eph.constellation.carrier_wavelength();
            let doppler = forward_doppler(&fwd, &rec, &vel, drift, wavelength);
            let npr: f64 = normal.sample(&mut rng);
            let ndp: f64 = normal.sample(&mut rng);
            let key = (eph.constellation, eph.sat_id);
            let lock = locks.get(&key).copied().unwrap_or(0) + 1;
            seen.push(key);
            observations.push(GnssObservation {
                constellation: eph.constellation,
                sat_id: eph.sat_id,
                pseudorange: fwd.pseudorange + config.pr_sigma * npr,
                doppler: Some(doppler + config.dp_sigma * ndp),
                wavelength,
                noise_pr,
                noise_dp,
                noise_sat: 1.0,
                lock_count: lock,
                healthy: true,
            });
        }
        locks.retain(|key, _| seen.contains(key));
        for key in seen {
            *locks.entry(key).or_insert(0) += 1;
        }
        epochs.push(EpochObservations { t: t_abs, observations });
    }
    epochs
}

fn truth_records(
    config: &SimConfig,
    trajectory: &Trajectory,
    bias_track: &[(Vector3<f64>, Vector3<f64>)],
) -> Vec<TruthRecord> {
    let n = (config.duration * config.cam_rate).round() as usize + 1;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let t = j as f64 * (1.0 / config.cam_rate);
        let mut state = trajectory.state(t);
        let idx = ((t * config.imu_rate).round() as usize).min(bias_track.len() - 1);
        state.ba = bias_track[idx].0;
        state.bw = bias_track[idx].1;
        out.push(TruthRecord {
            t,
            state,
            clock_bias: [
                config.clock.bias_at(Constellation::Gps, t),
                config.clock.bias_at(Constellation::Glonass, t),
                config.clock.bias_at(Constellation::Galileo, t),
                config.clock.bias_at(Constellation::Beidou, t),
            ],
            clock_drift: config.clock.drift,
        });
    }
    out
}
