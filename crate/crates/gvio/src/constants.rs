//! Physical and geodetic constants shared across the crate.

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Earth rotation rate (rad/s), WGS-84 value.
pub const EARTH_ROTATION_RATE: f64 = 7.292_115_146_7e-5;

/// Earth gravitational constant GM (m^3/s^2), WGS-84 value.
pub const EARTH_GM: f64 = 3.986_005e14;

/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;

/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// WGS-84 semi-minor axis (m), derived as a*(1-f) so the eccentricities stay
/// self-consistent (equals 6356752.3142 rounded to 0.1 mm).
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);

/// WGS-84 first eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Default gravity magnitude (m/s^2) in the local world frame.
pub const GRAVITY_MAGNITUDE: f64 = 9.81;

/// GPS L1 carrier frequency (Hz).
pub const GPS_L1_FREQ: f64 = 1_575.42e6;

/// GPS L1 carrier wavelength (m).
pub const GPS_L1_WAVELENGTH: f64 = SPEED_OF_LIGHT / GPS_L1_FREQ;
