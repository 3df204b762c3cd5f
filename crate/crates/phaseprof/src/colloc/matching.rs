//! Temporal and spatial shot-to-pixel matching.

use super::ImagerScene;

/// Finds the scene minimizing |shot_time - scene_time| within the window
/// (seconds). Ties go to the earlier scene. `scene_times` must be sorted
/// ascending.
pub fn match_temporal(shot_time: i64, scene_times: &[i64], window_s: i64) -> Option<usize> {
    debug_assert!(scene_times.windows(2).all(|p| p[0] < p[1]));
    if scene_times.is_empty() {
        return None;
    }
    let i = scene_times.partition_point(|&t| t < shot_time);
    let mut best: Option<(usize, i64)> = None;
    for cand in [i.checked_sub(1), (i < scene_times.len()).then_some(i)]
        .into_iter()
        .flatten()
    {
        let dt = (shot_time - scene_times[cand]).abs();
        if dt <= window_s && best.map_or(true, |(_, b)| dt < b) {
            best = Some((cand, dt));
        }
    }
    best.map(|(idx, _)| idx)
}

/// Great-circle distance in metres (haversine, spherical Earth).
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const R: f64 = 6_371_000.0;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * R * a.sqrt().min(1.0).asin()
}

/// Indices bracketing `x` in a strictly monotone axis (either direction),
/// returned in ascending index order.
fn bracket(axis: &[f64], x: f64) -> (usize, usize) {
    let ascending = axis.len() < 2 || axis[0] < axis[axis.len() - 1];
    let i = if ascending {
        axis.partition_point(|&v| v < x)
    } else {
        axis.partition_point(|&v| v > x)
    };
    (i.saturating_sub(1), i.min(axis.len() - 1))
}

/// Nearest grid pixel by great-circle distance; ties broken by smallest
/// (row, col) lexicographically.
///
/// For fixed latitude the distance grows strictly with |delta lon| (as
/// long as no |delta lon| exceeds 180 degrees), so per row only the two
/// columns bracketing the shot longitude can attain the row minimum; the
/// search scans rows against those candidates. Grids that straddle more
/// than 180 degrees of longitude fall back to a full scan.
pub fn match_spatial(shot_lat: f64, shot_lon: f64, scene: &ImagerScene) -> (usize, usize) {
    let wrap_risk = scene
        .lon_axis
        .iter()
        .any(|&lon| (lon - shot_lon).abs() > 180.0);
    let cols: Vec<usize> = if wrap_risk {
        (0..scene.width()).collect()
    } else {
        let (lo, hi) = bracket(&scene.lon_axis, shot_lon);
        if lo == hi {
            vec![lo]
        } else {
            vec![lo, hi]
        }
    };
    let mut best = (0usize, 0usize);
    let mut best_d = f64::INFINITY;
    for (r, &lat) in scene.lat_axis.iter().enumerate() {
        for &c in &cols {
            let d = haversine_m(shot_lat, shot_lon, lat, scene.lon_axis[c]);
            if d < best_d {
                best_d = d;
                best = (r, c);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colloc::SPECTRAL_CHANNELS;

    fn grid_scene(lat0: f64, dlat: f64, h: usize, lon0: f64, dlon: f64, w: usize) -> ImagerScene {
        let scene = ImagerScene {
            timestamp: 0,
            lat_axis: (0..h).map(|r| lat0 + dlat * r as f64).collect(),
            lon_axis: (0..w).map(|c| lon0 + dlon * c as f64).collect(),
            channels: vec![0.0; SPECTRAL_CHANNELS * h * w],
            sat_zenith: vec![0.0; h * w],
            sol_zenith: vec![0.0; h * w],
            night: vec![false; h * w],
        };
        scene.validate().unwrap();
        scene
    }

    #[test]
    fn temporal_picks_nearest_scene_in_window() {
        // scenes every 10 minutes starting 03:00; shot at 03:07:20
        let times: Vec<i64> = (0..6).map(|i| 3 * 3600 + i * 600).collect();
        let shot = 3 * 3600 + 7 * 60 + 20;
        let idx = match_temporal(shot, &times, 300).unwrap();
        assert_eq!(times[idx], 3 * 3600 + 600); // 03:10, |dt| = 160 s
    }

    #[test]
    fn temporal_tie_goes_to_earlier_scene() {
        let times = vec![3 * 3600, 3 * 3600 + 600];
        let shot = 3 * 3600 + 300; // exactly between
        assert_eq!(match_temporal(shot, &times, 300), Some(0));
    }

    #[test]
    fn temporal_rejects_outside_window() {
        let times = vec![3 * 3600];
        let shot = 3 * 3600 + 901;
        assert_eq!(match_temporal(shot, &times, 300), None);
        assert_eq!(match_temporal(3 * 3600 + 300, &times, 300), Some(0));
        assert_eq!(match_temporal(3 * 3600 + 301, &times, 300), None);
        assert_eq!(match_temporal(0, &[], 300), None);
    }

    #[test]
    fn spatial_hits_exact_grid_node() {
        let scene = grid_scene(10.0, -0.25, 9, 120.0, 0.25, 9);
        assert_eq!(match_spatial(10.0 - 0.25 * 4.0, 120.0 + 0.25 * 6.0, &scene), (4, 6));
    }

    #[test]
    fn spatial_midpoint_tie_takes_lexicographically_smaller() {
        // shot exactly between cols 2 and 3 (and rows 2/3 equidistant too)
        let scene = grid_scene(4.0, -1.0, 6, 100.0, 1.0, 6);
        let pick = match_spatial(4.0 - 2.5, 100.0 + 2.5, &scene);
        assert_eq!(pick, (2, 2));
    }

    #[test]
    fn spatial_matches_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let scene = grid_scene(35.0, -0.02, 40, 131.0, 0.02, 55);
        for _ in 0..500 {
            let lat = rng.gen_range(34.0..35.5);
            let lon = rng.gen_range(130.5..132.5);
            let fast = match_spatial(lat, lon, &scene);
            let mut brute = (0usize, 0usize);
            let mut brute_d = f64::INFINITY;
            for r in 0..scene.height() {
                for c in 0..scene.width() {
                    let d = haversine_m(lat, lon, scene.lat_axis[r], scene.lon_axis[c]);
                    if d < brute_d {
                        brute_d = d;
                        brute = (r, c);
                    }
                }
            }
            assert_eq!(fast, brute, "shot ({lat},{lon})");
        }
    }

    #[test]
    fn haversine_known_distance() {
        // one degree of latitude is ~111.2 km on the sphere
        let d = haversine_m(0.0, 0.0, 1.0, 0.0);
        assert!((d - 111_195.0).abs() < 100.0, "{d}");
        assert_eq!(haversine_m(12.0, 34.0, 12.0, 34.0), 0.0);
    }
}
