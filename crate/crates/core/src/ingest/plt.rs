//! GeoLife `.plt` records: six header lines, then
//! `lat,lon,0,alt_feet,serial_days,YYYY-MM-DD,HH:MM:SS` per fix.

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

const HEADER_LINES: usize = 6;
const FEET_TO_METERS: f64 = 0.3048;
/// GeoLife's marker for a missing altitude.
pub const INVALID_ALTITUDE_FEET: f64 = -777.0;

/// One GPS fix. `alt_valid` is false when the logger reported no altitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// UTC seconds since the Unix epoch.
    pub timestamp: i64,
    pub lon: f64,
    pub lat: f64,
    /// Meters.
    pub alt: f64,
    pub alt_valid: bool,
}

impl TrajectoryPoint {
    pub fn values(&self) -> [f64; 3] {
        [self.lon, self.lat, self.alt]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedPlt {
    pub points: Vec<TrajectoryPoint>,
    /// Records that could not be parsed.
    pub malformed: usize,
    /// Records dropped because their timestamp did not increase.
    pub out_of_order: usize,
}

fn parse_record(line: &str) -> Option<TrajectoryPoint> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 7 {
        return None;
    }
    let lat: f64 = fields[0].parse().ok()?;
    let lon: f64 = fields[1].parse().ok()?;
    let alt_feet: f64 = fields[3].parse().ok()?;
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) || !alt_feet.is_finite() {
        return None;
    }
    let date = NaiveDate::parse_from_str(fields[5], "%Y-%m-%d").ok()?;
    let time = NaiveTime::parse_from_str(fields[6], "%H:%M:%S").ok()?;
    let timestamp = NaiveDateTime::new(date, time).and_utc().timestamp();
    let alt_valid = alt_feet != INVALID_ALTITUDE_FEET;
    Some(TrajectoryPoint {
        timestamp,
        lon,
        lat,
        alt: if alt_valid { alt_feet * FEET_TO_METERS } else { 0.0 },
        alt_valid,
    })
}

/// Parses a PLT file. Malformed lines are counted and skipped; fixes whose
/// timestamp does not exceed the previous kept fix are dropped.
pub fn parse_plt(bytes: &[u8]) -> ParsedPlt {
    let text = String::from_utf8_lossy(bytes);
    let mut out = ParsedPlt::default();
    for line in text.lines().skip(HEADER_LINES) {
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line) {
            Some(p) => {
                if out.points.last().is_some_and(|last| p.timestamp <= last.timestamp) {
                    out.out_of_order += 1;
                } else {
                    out.points.push(p);
                }
            }
            None => out.malformed += 1,
        }
    }
    if out.malformed > 0 {
        log::warn!("skipped {} malformed PLT records", out.malformed);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Geolife trajectory\nWGS 84\nAltitude is in Feet\nReserved 3\n0,2,255,My Track,0,0,2,8421376\n0\n";

    fn file(body: &str) -> Vec<u8> {
        format!("{HEADER}{body}").into_bytes()
    }

    #[test]
    fn parses_geolife_record() {
        let parsed = parse_plt(&file("39.906631,116.385564,0,492,39925.4486111111,2009-04-24,10:46:00\n"));
        assert_eq!(parsed.points.len(), 1);
        let p = parsed.points[0];
        assert!((p.alt - 149.9616).abs() < 1e-9);
        assert_eq!(p.lat, 39.906631);
        assert_eq!(p.lon, 116.385564);
        // 2009-04-24T10:46:00Z
        assert_eq!(p.timestamp, 1_240_569_960);
        assert!(p.alt_valid);
    }

    #[test]
    fn sentinel_altitude_is_flagged() {
        let parsed = parse_plt(&file("39.9,116.3,0,-777,39925.4,2009-04-24,10:46:00\n"));
        assert!(!parsed.points[0].alt_valid);
    }

    #[test]
    fn header_only_and_empty_files() {
        assert!(parse_plt(HEADER.as_bytes()).points.is_empty());
        assert!(parse_plt(b"").points.is_empty());
    }

    #[test]
    fn malformed_and_out_of_order_records() {
        let parsed = parse_plt(&file(
            "39.9,116.3,0,100,0,2009-04-24,10:46:05\n\
             garbage\n\
             39.9,116.3,0,100,0,2009-04-24,10:46:00\n\
             39.9,116.3,0,100,0,2009-04-24,10:46:10\n\
             95.0,116.3,0,100,0,2009-04-24,10:46:15\n",
        ));
        assert_eq!(parsed.points.len(), 2);
        assert_eq!(parsed.malformed, 2);
        assert_eq!(parsed.out_of_order, 1);
    }
}
