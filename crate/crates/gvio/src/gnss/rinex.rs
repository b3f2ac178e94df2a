//! Minimal RINEX 3.x navigation-message reader.
//!
//! Only GPS LNAV records are converted; records from other systems are
//! counted and skipped, since the simulator ships its own ephemerides and
//! this reader exists for feeding real GPS broadcast data in. Klobuchar
//! coefficients are picked up from the header when present.

use crate::gnss::types::{BroadcastEphemeris, Constellation, IonoParams};
use crate::gnss::GnssError;

/// Result of parsing a navigation file.
#[derive(Debug, Clone)]
pub struct RinexNav {
    pub ephemerides: Vec<BroadcastEphemeris>,
    /// Klobuchar parameters from GPSA/GPSB header lines, if both were found.
    pub iono: Option<IonoParams>,
    /// Number of non-GPS records skipped.
    pub skipped: usize,
}

/// Parses RINEX 3.x navigation content. GPS records become
/// [`BroadcastEphemeris`]; everything else is skipped and counted.
pub fn parse_rinex_nav(content: &str) -> Result<RinexNav, GnssError> {
    let lines: Vec<&str> = content.lines().collect();
    let mut i = 0;
    let mut alpha: Option<[f64; 4]> = None;
    let mut beta: Option<[f64; 4]> = None;

    // Header.
    let mut header_done = false;
    while i < lines.len() {
        let line = lines[i];
        i += 1;
        let label = if line.len() > 60 { &line[60..] } else { "" };
        if label.trim_start().starts_with("END OF HEADER") {
            header_done = true;
            break;
        }
        if label.trim_start().starts_with("IONOSPHERIC CORR") {
            let kind = line[..4].trim();
            let vals = parse_header_floats(&line[5..60.min(line.len())]);
            if vals.len() == 4 {
                let arr = [vals[0], vals[1], vals[2], vals[3]];
                match kind {
                    "GPSA" => alpha = Some(arr),
                    "GPSB" => beta = Some(arr),
                    _ => {}
                }
            }
        }
    }
    if !header_done {
        return Err(GnssError::RinexFormat { line: i, what: "missing END OF HEADER".into() });
    }

    let mut ephemerides = Vec::new();
    let mut skipped = 0usize;
    while i < lines.len() {
        let line = lines[i];
        let first = line.chars().next();
        match first {
            Some(c) if c.is_ascii_alphabetic() => {
                if c == 'G' {
                    if i + 7 >= lines.len() {
                        return Err(GnssError::RinexFormat {
                            line: i + 1,
                            what: "truncated GPS record".into(),
                        });
                    }
                    let eph = parse_gps_record(&lines[i..i + 8], i + 1)?;
                    ephemerides.push(eph);
                    i += 8;
                } else {
                    skipped += 1;
                    i += 1;
                    // Consume this record's continuation lines.
                    while i < lines.len()
                        && !lines[i].chars().next().map_or(true, |ch| ch.is_ascii_alphabetic())
                    {
                        i += 1;
                    }
                }
            }
            _ => i += 1,
        }
    }

    let iono = match (alpha, beta) {
        (Some(alpha), Some(beta)) => Some(IonoParams { alpha, beta }),
        _ => None,
    };
    Ok(RinexNav { ephemerides, iono, skipped })
}

fn parse_header_floats(s: &str) -> Vec<f64> {
    s.split_whitespace().filter_map(|t| parse_rinex_float(t).ok()).collect()
}

/// RINEX floats use D as the exponent marker about as often as E.
fn parse_rinex_float(s: &str) -> Result<f64, std::num::ParseFloatError> {
    s.trim().replace(['D', 'd'], "E").parse::<f64>()
}

fn field(line: &str, start: usize, lineno: usize) -> Result<f64, GnssError> {
    let end = (start + 19).min(line.len());
    if start >= line.len() {
        return Ok(0.0);
    }
    let raw = &line[start..end];
    if raw.trim().is_empty() {
        return Ok(0.0);
    }
    parse_rinex_float(raw).map_err(|_| GnssError::RinexFormat {
        line: lineno,
        what: format!("bad float field {raw:?}"),
    })
}

/// Days from civil date to GPS epoch (1980-01-06), then seconds of week.
fn civil_to_seconds_of_week(y: i64, m: i64, d: i64, h: i64, min: i64, s: f64) -> f64 {
    // Howard Hinnant's days-from-civil algorithm.
    let y_adj = if m <= 2 { y - 1 } else { y };
    let era = if y_adj >= 0 { y_adj } else { y_adj - 399 } / 400;
    let yoe = y_adj - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days_since_epoch = era * 146_097 + doe - 719_468; // days since 1970-01-01
    let gps_epoch_days = 3_657; // 1980-01-06
    let days = days_since_epoch - gps_epoch_days;
    let dow = days.rem_euclid(7);
    dow as f64 * 86_400.0 + h as f64 * 3_600.0 + min as f64 * 60.0 + s
}

fn parse_gps_record(rec: &[&str], lineno: usize) -> Result<BroadcastEphemeris, GnssError> {
    let head = rec[0];
    if head.len() < 23 {
        return Err(GnssError::RinexFormat { line: lineno, what: "short record header".into() });
    }
    let sat_id: u32 = head[1..3].trim().parse().map_err(|_| GnssError::RinexFormat {
        line: lineno,
        what: format!("bad PRN {:?}", &head[1..3]),
    })?;
    let mut epoch_parts = head[4..23].split_whitespace();
    let mut next_int = |what: &str| -> Result<i64, GnssError> {
        epoch_parts
            .next()
            .and_then(|t| t.parse::<i64>().ok())
            .ok_or_else(|| GnssError::RinexFormat { line: lineno, what: format!("bad epoch {what}") })
    };
    let (y, mo, d, h, mi, se) = (
        next_int("year")?,
        next_int("month")?,
        next_int("day")?,
        next_int("hour")?,
        next_int("minute")?,
        next_int("second")?,
    );
    let toc = civil_to_seconds_of_week(y, mo, d, h, mi, se as f64);

    let af0 = field(head, 23, lineno)?;
    let af1 = field(head, 42, lineno)?;
    let af2 = field(head, 61, lineno)?;

    let orbit = |l: usize, f: usize| field(rec[l], 4 + 19 * f, lineno + l);
    Ok(BroadcastEphemeris {
        constellation: Constellation::Gps,
        sat_id,
        toc,
        af0,
        af1,
        af2,
        crs: orbit(1, 1)?,
        delta_n: orbit(1, 2)?,
        m0: orbit(1, 3)?,
        cuc: orbit(2, 0)?,
        e: orbit(2, 1)?,
        cus: orbit(2, 2)?,
        sqrt_a: orbit(2, 3)?,
        toe: orbit(3, 0)?,
        cic: orbit(3, 1)?,
        omega0: orbit(3, 2)?,
        cis: orbit(3, 3)?,
        i0: orbit(4, 0)?,
        crc: orbit(4, 1)?,
        omega: orbit(4, 2)?,
        omega_dot: orbit(4, 3)?,
        i_dot: orbit(5, 0)?,
        health: orbit(6, 1)? as u32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const SAMPLE: &str = "\
     3.04           N: GNSS NAV DATA    M: MIXED            RINEX VERSION / TYPE
demo                demo                20220101 000000 UTC PGM / RUN BY / DATE
GPSA   1.1176D-08  7.4506D-09 -5.9605D-08 -5.9605D-08       IONOSPHERIC CORR
GPSB   9.0112D+04  0.0000D+00 -1.9661D+05 -6.5536D+04       IONOSPHERIC CORR
                                                            END OF HEADER
G01 2022 01 01 00 00 00-1.234567890123D-04-1.110000000000D-11 0.000000000000D+00
     1.000000000000D+02 5.000000000000D+01 4.500000000000D-09 2.100000000000D+00
     2.000000000000D-06 2.000000000000D-02 7.000000000000D-06 5.153800000000D+03
     4.320000000000D+05-1.000000000000D-07 1.300000000000D+00 1.200000000000D-07
     9.700000000000D-01 2.000000000000D+02-8.000000000000D-01-8.100000000000D-09
    -7.000000000000D-11 0.000000000000D+00 2.190000000000D+03 0.000000000000D+00
     2.000000000000D+00 0.000000000000D+00 1.000000000000D-09 1.000000000000D+02
     4.320000000000D+05 4.000000000000D+00
R05 2022 01 01 00 00 00 1.000000000000D-04 0.000000000000D+00 8.640000000000D+04
     1.000000000000D+04 1.000000000000D+00 0.000000000000D+00 0.000000000000D+00
     2.000000000000D+04 2.000000000000D+00 0.000000000000D+00 1.000000000000D+00
     1.500000000000D+04 3.000000000000D+00 0.000000000000D+00 0.000000000000D+00
E11 2022 01 01 00 00 00 1.0D-04 0.0D+00 0.0D+00
     1.000000000000D+02 5.000000000000D+01 4.500000000000D-09 2.100000000000D+00
     2.000000000000D-06 2.000000000000D-04 7.000000000000D-06 5.440600000000D+03
     4.320000000000D+05-1.000000000000D-07 1.300000000000D+00 1.200000000000D-07
     9.700000000000D-01 2.000000000000D+02-8.000000000000D-01-8.100000000000D-09
    -7.000000000000D-11 5.170000000000D+02 2.190000000000D+03 0.000000000000D+00
     3.120000000000D+00 0.000000000000D+00 0.000000000000D+00 0.000000000000D+00
     4.320000000000D+05
";

    #[test]
    fn parses_gps_and_skips_other_systems() {
        let nav = parse_rinex_nav(SAMPLE).unwrap();
        assert_eq!(nav.ephemerides.len(), 1);
        assert_eq!(nav.skipped, 2);
        let e = &nav.ephemerides[0];
        assert_eq!(e.sat_id, 1);
        assert_relative_eq!(e.af0, -1.234567890123e-4);
        assert_relative_eq!(e.af1, -1.11e-11);
        assert_relative_eq!(e.crs, 50.0);
        assert_relative_eq!(e.delta_n, 4.5e-9);
        assert_relative_eq!(e.m0, 2.1);
        assert_relative_eq!(e.e, 0.02);
        assert_relative_eq!(e.sqrt_a, 5153.8);
        assert_relative_eq!(e.toe, 432_000.0);
        assert_relative_eq!(e.omega0, 1.3);
        assert_relative_eq!(e.i0, 0.97);
        assert_relative_eq!(e.crc, 200.0);
        assert_relative_eq!(e.omega, -0.8);
        assert_relative_eq!(e.omega_dot, -8.1e-9);
        assert_relative_eq!(e.i_dot, -7.0e-11);
        assert_eq!(e.health, 0);
        // 2022-01-01 is a Saturday: day 6 of the GPS week.
        assert_relative_eq!(e.toc, 6.0 * 86_400.0);
    }

    #[test]
    fn header_iono_coefficients() {
        let nav = parse_rinex_nav(SAMPLE).unwrap();
        let iono = nav.iono.unwrap();
        assert_relative_eq!(iono.alpha[0], 1.1176e-8);
        assert_relative_eq!(iono.beta[2], -1.9661e5);
    }

    #[test]
    fn missing_header_is_an_error() {
        assert!(matches!(
            parse_rinex_nav("G01 2022 01 01 00 00 00 0.0 0.0 0.0\n"),
            Err(GnssError::RinexFormat { .. })
        ));
    }
}
