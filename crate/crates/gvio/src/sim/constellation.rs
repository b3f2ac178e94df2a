//! Synthetic multi-constellation almanac for the simulator.
//!
//! Twenty-four satellites, six per system, on circular GNSS-altitude shells.
//! Rather than sampling a Walker pattern and hoping, each satellite is
//! placed at a chosen elevation/azimuth in the sky of the default site and
//! its exact Keplerian elements are recovered from that geometry, so the
//! visible set (count and DOP) is deterministic: nine satellites sit well
//! above a 10 degree mask, the rest stay below the horizon for the whole
//! desk-scale run.

use nalgebra::Vector3;

use crate::constants::{EARTH_GM, EARTH_ROTATION_RATE};
use crate::frames::{enu_rotation, geodetic_to_ecef, Geodetic};
use crate::gnss::types::{BroadcastEphemeris, Constellation};

/// One satellite slot: where it should appear in the local sky at toe.
#[derive(Debug, Clone, Copy)]
pub struct SkySlot {
    pub constellation: Constellation,
    pub sat_id: u32,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

/// Sky layout seen from the reference site at toe. The first nine slots are
/// the visible set; slots below the horizon keep the constellation at a
/// realistic 24 satellites without crossing the mask during a short run.
pub fn default_sky() -> Vec<SkySlot> {
    use Constellation::*;
    let mut slots = vec![
        // Visible: three well-spread mid-elevation GPS (the satellite-subset
        // studies pick from these), one high GPS, and a mixed remainder.
        SkySlot { constellation: Gps, sat_id: 1, elevation_deg: 35.0, azimuth_deg: 30.0 },
        SkySlot { constellation: Gps, sat_id: 2, elevation_deg: 30.0, azimuth_deg: 150.0 },
        SkySlot { constellation: Gps, sat_id: 3, elevation_deg: 40.0, azimuth_deg: 270.0 },
        SkySlot { constellation: Gps, sat_id: 4, elevation_deg: 70.0, azimuth_deg: 200.0 },
        SkySlot { constellation: Glonass, sat_id: 1, elevation_deg: 25.0, azimuth_deg: 90.0 },
        SkySlot { constellation: Glonass, sat_id: 2, elevation_deg: 55.0, azimuth_deg: 330.0 },
        SkySlot { constellation: Galileo, sat_id: 1, elevation_deg: 20.0, azimuth_deg: 210.0 },
        SkySlot { constellation: Galileo, sat_id: 2, elevation_deg: 60.0, azimuth_deg: 120.0 },
        SkySlot { constellation: Beidou, sat_id: 1, elevation_deg: 45.0, azimuth_deg: 0.0 },
    ];
    // Hidden: below the horizon with margin against rising into track.
    let hidden = [
        (Gps, 5, -15.0, 60.0),
        (Gps, 6, -40.0, 180.0),
        (Glonass, 3, -20.0, 10.0),
        (Glonass, 4, -35.0, 120.0),
        (Glonass, 5, -55.0, 240.0),
        (Glonass, 6, -12.0, 300.0),
        (Galileo, 3, -25.0, 45.0),
        (Galileo, 4, -45.0, 150.0),
        (Galileo, 5, -60.0, 255.0),
        (Galileo, 6, -18.0, 345.0),
        (Beidou, 2, -22.0, 80.0),
        (Beidou, 3, -38.0, 160.0),
        (Beidou, 4, -52.0, 220.0),
        (Beidou, 5, -28.0, 290.0),
        (Beidou, 6, -65.0, 20.0),
    ];
    for (c, id, el, az) in hidden {
        slots.push(SkySlot { constellation: c, sat_id: id, elevation_deg: el, azimuth_deg: az });
    }
    slots
}

/// Orbital shell radius per system (m), roughly the real altitudes.
fn shell_radius(c: Constellation) -> f64 {
    match c {
        Constellation::Gps => 26_560e3,
        Constellation::Glonass => 25_508e3,
        Constellation::Galileo => 29_601e3,
        Constellation::Beidou => 27_906e3,
    }
}

/// Builds broadcast ephemerides realizing [`default_sky`] (or any slot list)
/// at reference time `toe`, seen from `site`.
pub fn synthesize_constellation(
    site: &Geodetic,
    toe: f64,
    slots: &[SkySlot],
) -> Vec<BroadcastEphemeris> {
    let rec = geodetic_to_ecef(site);
    let r_ne = enu_rotation(site.lat, site.lon);
    let mut ephs = Vec::with_capacity(slots.len());
    for (idx, slot) in slots.iter().enumerate() {
        let shell = shell_radius(slot.constellation);
        let el = slot.elevation_deg.to_radians();
        let az = slot.azimuth_deg.to_radians();
        let u_enu = Vector3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin());
        let u = r_ne * u_enu;
        // Line-of-sight distance to the shell: solve |rec + rho u| = shell.
        let ru = rec.dot(&u);
        let rho = -ru + (ru * ru + shell * shell - rec.norm_squared()).sqrt();
        let pos = rec + rho * u;

        // Pick a tangential flight direction; the golden-angle sweep keeps
        // the line-of-sight rates varied across the constellation.
        let chi = 2.399_963_229_728_653 * idx as f64;
        let radial = pos.normalize();
        let mut t1 = radial.cross(&Vector3::z());
        if t1.norm() < 1e-6 {
            t1 = radial.cross(&Vector3::x());
        }
        t1.normalize_mut();
        let t2 = radial.cross(&t1);
        let v_inertial = (EARTH_GM / shell).sqrt() * (chi.cos() * t1 + chi.sin() * t2);

        ephs.push(elements_from_state(slot, &pos, &v_inertial, toe, idx));
    }
    ephs
}

/// Exact circular-orbit Keplerian elements from an ECEF position at toe and
/// an inertial velocity (frames coincide at toe by absorbing the Earth
/// rotation angle into omega0).
fn elements_from_state(
    slot: &SkySlot,
    pos: &Vector3<f64>,
    v_inertial: &Vector3<f64>,
    toe: f64,
    idx: usize,
) -> BroadcastEphemeris {
    let h = pos.cross(v_inertial);
    let h_hat = h.normalize();
    let i0 = (h_hat.z).acos();
    let node = Vector3::new(-h.y, h.x, 0.0);
    let (omega_inertial, n_hat) = if node.norm() > 1e-9 {
        (h.x.atan2(-h.y), node.normalize())
    } else {
        (0.0, Vector3::x())
    };
    let m_hat = h_hat.cross(&n_hat);
    let u0 = pos.dot(&m_hat).atan2(pos.dot(&n_hat));

    // Distinct deterministic clock polynomials per satellite.
    let af0 = ((idx as f64 * 37.0) % 97.0 - 48.0) * 2e-6;
    let af1 = ((idx as f64 * 17.0) % 11.0 - 5.0) * 2e-12;

    BroadcastEphemeris {
        constellation: slot.constellation,
        sat_id: slot.sat_id,
        toe,
        toc: toe,
        sqrt_a: pos.norm().sqrt(),
        e: 0.0,
        i0,
        omega0: omega_inertial + EARTH_ROTATION_RATE * toe,
        omega: 0.0,
        m0: u0,
        delta_n: 0.0,
        i_dot: 0.0,
        omega_dot: 0.0,
        cuc: 0.0,
        cus: 0.0,
        crc: 0.0,
        crs: 0.0,
        cic: 0.0,
        cis: 0.0,
        af0,
        af1,
        af2: 0.0,
        health: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::elevation_azimuth;
    use crate::gnss::ephemeris::eval_ephemeris;

    fn site() -> Geodetic {
        Geodetic { lat: 30.0f64.to_radians(), lon: 120.0f64.to_radians(), height: 50.0 }
    }

    #[test]
    fn satellites_land_on_requested_sky_positions() {
        let toe = 100_060.0;
        let slots = default_sky();
        let ephs = synthesize_constellation(&site(), toe, &slots);
        let rec = geodetic_to_ecef(&site());
        for (slot, eph) in slots.iter().zip(&ephs) {
            let s = eval_ephemeris(eph, toe).unwrap();
            let (el, az) = elevation_azimuth(&s.pos, &rec).unwrap();
            assert!(
                (el.to_degrees() - slot.elevation_deg).abs() < 0.2,
                "{:?} {} elevation {} vs {}",
                slot.constellation,
                slot.sat_id,
                el.to_degrees(),
                slot.elevation_deg
            );
            let mut daz = (az.to_degrees() - slot.azimuth_deg).abs();
            if daz > 180.0 {
                daz = 360.0 - daz;
            }
            assert!(daz < 0.2, "azimuth {} vs {}", az.to_degrees(), slot.azimuth_deg);
        }
    }

    #[test]
    fn visible_count_stays_in_band_over_a_run() {
        let toe = 100_060.0;
        let ephs = synthesize_constellation(&site(), toe, &default_sky());
        let rec = geodetic_to_ecef(&site());
        let mask = 10.0f64.to_radians();
        for k in 0..=12 {
            let t = 100_000.0 + 10.0 * k as f64;
            let visible = ephs
                .iter()
                .filter(|e| {
                    let s = eval_ephemeris(e, t).unwrap();
                    elevation_azimuth(&s.pos, &rec).unwrap().0 > mask
                })
                .count();
            assert!((8..=14).contains(&visible), "visible {visible} at t={t}");
        }
    }

    #[test]
    fn orbits_are_circular_at_shell_radius() {
        let toe = 100_060.0;
        let ephs = synthesize_constellation(&site(), toe, &default_sky());
        for e in &ephs {
            assert_eq!(e.e, 0.0);
            for dt in [-600.0, 0.0, 600.0] {
                let s = eval_ephemeris(e, toe + dt).unwrap();
                let r = s.pos.norm();
                let shell = shell_radius(e.constellation);
                assert!((r - shell).abs() < 1.0, "radius {r} vs shell {shell}");
                // ECEF speed of a MEO satellite is a few km/s (inertial
                // speed plus or minus up to omega_e * r of frame rotation).
                let v = s.vel.norm();
                assert!((1500.0..6000.0).contains(&v), "speed {v}");
            }
        }
    }
}
