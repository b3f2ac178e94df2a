//! Atmospheric delay models: Saastamoinen troposphere and Klobuchar
//! ionosphere. Both appear identically in the simulator's forward model and
//! in measurement correction, so they cancel exactly on synthetic data.

use crate::constants::{GPS_L1_WAVELENGTH, SPEED_OF_LIGHT};
use crate::frames::Geodetic;
use crate::gnss::types::IonoParams;
use crate::gnss::GnssError;

/// Tropospheric delay (m) from the Saastamoinen model with a standard
/// atmosphere (15 C, 1013.25 hPa at sea level, 70% relative humidity) and a
/// 1/sin(el) mapping for both the hydrostatic and wet components.
pub fn saastamoinen_delay(rec: &Geodetic, elevation: f64) -> Result<f64, GnssError> {
    if elevation <= 0.0 {
        return Err(GnssError::BelowHorizon(elevation));
    }
    let h = rec.height.clamp(0.0, 11_000.0);
    let pressure = 1013.25 * (1.0 - 2.2557e-5 * h).powf(5.2568);
    let temp_k = 15.0 - 6.5e-3 * h + 273.16;
    let humidity = 0.7;
    let vapor = 6.108 * humidity * ((17.15 * temp_k - 4684.0) / (temp_k - 38.45)).exp();

    let cos_z = elevation.sin();
    let dry = 0.0022768 * pressure / (1.0 - 0.00266 * (2.0 * rec.lat).cos() - 0.00028 * h / 1e3);
    let wet = 0.002277 * (1255.0 / temp_k + 0.05) * vapor;
    Ok((dry + wet) / cos_z)
}

/// Ionospheric delay (m) at the GPS L1 frequency from the Klobuchar
/// broadcast model. `tow` is the GNSS time of week in seconds; azimuth and
/// elevation are radians. Scale by [`iono_frequency_scale`] for other
/// carriers.
pub fn klobuchar_delay(
    rec: &Geodetic,
    elevation: f64,
    azimuth: f64,
    tow: f64,
    iono: &IonoParams,
) -> Result<f64, GnssError> {
    if elevation <= 0.0 {
        return Err(GnssError::BelowHorizon(elevation));
    }
    let pi = std::f64::consts::PI;
    // The broadcast model works in semicircles.
    let el_sc = elevation / pi;
    let psi = 0.0137 / (el_sc + 0.11) - 0.022;
    let mut phi_i = rec.lat / pi + psi * azimuth.cos();
    phi_i = phi_i.clamp(-0.416, 0.416);
    let lambda_i = rec.lon / pi + psi * azimuth.sin() / (phi_i * pi).cos();
    let phi_m = phi_i + 0.064 * ((lambda_i - 1.617) * pi).cos();

    let mut t = 43_200.0 * lambda_i + tow;
    t = t.rem_euclid(86_400.0);

    let mut amp = 0.0;
    let mut per = 0.0;
    for n in 0..4 {
        amp += iono.alpha[n] * phi_m.powi(n as i32);
        per += iono.beta[n] * phi_m.powi(n as i32);
    }
    amp = amp.max(0.0);
    per = per.max(72_000.0);

    let f = 1.0 + 16.0 * (0.53 - el_sc).powi(3);
    let x = 2.0 * pi * (t - 50_400.0) / per;
    let delay_s = if x.abs() >= 1.57 {
        f * 5e-9
    } else {
        let x2 = x * x;
        f * (5e-9 + amp * (1.0 - x2 / 2.0 + x2 * x2 / 24.0))
    };
    Ok(SPEED_OF_LIGHT * delay_s)
}

/// Factor converting an L1 ionospheric delay to another carrier:
/// (f_L1 / f)^2 = (lambda / lambda_L1)^2.
pub fn iono_frequency_scale(wavelength: f64) -> f64 {
    let r = wavelength / GPS_L1_WAVELENGTH;
    r * r
}
