//! Profiler track CSVs.
//!
//! Columns: `time_iso8601, lat, lon`, then repeated `base_km, top_km,
//! phase` triples (variable arity). A header row is skipped when the
//! first field does not parse as a timestamp.

use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};

use super::{io_err, IoError, Result};
use crate::colloc::{CloudLayer, ProfilerShot};

fn parse_time(field: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(field)
        .ok()
        .map(|t| t.with_timezone(&Utc).timestamp())
}

pub fn load_tracks(path: &Path) -> Result<Vec<ProfilerShot>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| IoError::Invalid {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    let invalid = |line: usize, detail: String| IoError::Invalid {
        path: path.display().to_string(),
        detail: format!("record {line}: {detail}"),
    };
    let mut shots = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| invalid(i + 1, e.to_string()))?;
        if record.is_empty() || record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let Some(time) = parse_time(record.get(0).unwrap_or_default()) else {
            if i == 0 {
                continue; // header row
            }
            return Err(invalid(i + 1, "first column is not an ISO-8601 time".into()));
        };
        if record.len() < 3 || (record.len() - 3) % 3 != 0 {
            return Err(invalid(
                i + 1,
                format!("expected 3 + 3k columns, got {}", record.len()),
            ));
        }
        let lat: f64 = record[1]
            .parse()
            .map_err(|_| invalid(i + 1, format!("bad latitude '{}'", &record[1])))?;
        let lon: f64 = record[2]
            .parse()
            .map_err(|_| invalid(i + 1, format!("bad longitude '{}'", &record[2])))?;
        let mut layers = Vec::new();
        for triple in record.iter().skip(3).collect::<Vec<_>>().chunks(3) {
            let base_km: f64 = triple[0]
                .parse()
                .map_err(|_| invalid(i + 1, format!("bad base '{}'", triple[0])))?;
            let top_km: f64 = triple[1]
                .parse()
                .map_err(|_| invalid(i + 1, format!("bad top '{}'", triple[1])))?;
            let phase: u8 = triple[2]
                .parse()
                .map_err(|_| invalid(i + 1, format!("bad phase '{}'", triple[2])))?;
            layers.push(CloudLayer {
                base_km,
                top_km,
                phase,
            });
        }
        let shot = ProfilerShot {
            time,
            lat,
            lon,
            layers,
        };
        shot.validate()
            .map_err(|e| invalid(i + 1, e.to_string()))?;
        shots.push(shot);
    }
    Ok(shots)
}

/// Writes shots back out (fixture generation and tests).
pub fn save_tracks(path: &Path, shots: &[ProfilerShot]) -> Result<()> {
    super::write_atomic(path, |w| {
        w.write_all(b"time_iso8601,lat,lon,base_km,top_km,phase\n")
            .map_err(|e| io_err(path, e))?;
        for shot in shots {
            let time = Utc
                .timestamp_opt(shot.time, 0)
                .single()
                .expect("valid unix timestamp")
                .to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
            let mut line = format!("{time},{},{}", shot.lat, shot.lon);
            for layer in &shot.layers {
                line.push_str(&format!(",{},{},{}", layer.base_km, layer.top_km, layer.phase));
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_variable_arity_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.csv");
        std::fs::write(
            &path,
            "time_iso8601,lat,lon,base_km,top_km,phase\n\
             2018-10-01T03:07:20Z,31.5,131.25\n\
             2018-10-01T03:07:21Z,31.52,131.27,1.2,2.9,3\n\
             2018-10-01T03:07:22Z,31.54,131.29,0.5,1.0,3,8.0,10.5,1\n",
        )
        .unwrap();
        let shots = load_tracks(&path).unwrap();
        assert_eq!(shots.len(), 3);
        assert_eq!(shots[0].layers.len(), 0);
        assert_eq!(shots[1].layers.len(), 1);
        assert_eq!(shots[2].layers.len(), 2);
        assert_eq!(shots[1].layers[0].phase, 3);
        assert_eq!(shots[0].time, 1538363240);
    }

    #[test]
    fn roundtrips_through_save() {
        let shots = vec![
            ProfilerShot {
                time: 1538363240,
                lat: 31.5,
                lon: 131.25,
                layers: vec![CloudLayer {
                    base_km: 1.25,
                    top_km: 2.875,
                    phase: 2,
                }],
            },
            ProfilerShot {
                time: 1538363241,
                lat: 31.52,
                lon: 131.27,
                layers: vec![],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        save_tracks(&path, &shots).unwrap();
        let loaded = load_tracks(&path).unwrap();
        assert_eq!(loaded, shots);
    }

    #[test]
    fn rejects_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "2018-10-01T00:00:00Z,1.0,2.0,0.5,1.0\n").unwrap();
        assert!(load_tracks(&path).is_err());
        std::fs::write(&path, "2018-10-01T00:00:00Z,1.0,2.0,2.0,1.0,3\n").unwrap();
        assert!(load_tracks(&path).is_err()); // base > top
        std::fs::write(&path, "not-a-time,1.0,2.0\nstill-not,1,2\n").unwrap();
        assert!(load_tracks(&path).is_err()); // bad time past the header slot
    }
}
