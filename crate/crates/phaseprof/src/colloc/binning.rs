//! Vertical binning of layer triples and per-pixel vote aggregation.

use super::{CloudLayer, CollocError, LayerLabelVector, Result, LAYER_KM, NUM_LAYERS};

/// Millimetres per kilometre; binning runs on an integer-mm lattice so
/// equal overlaps compare exactly regardless of float rounding.
const MM_PER_KM: f64 = 1_000_000.0;
const BIN_MM: i64 = (LAYER_KM * 1_000_000.0) as i64;

/// Bins cloud layers onto the 38-layer grid.
///
/// Bin `k` spans `[0.5k, 0.5(k+1))` km and takes the phase of the layer
/// overlapping it the most (any positive overlap counts; ties go to the
/// lower phase code). Bins nothing overlaps stay 0. Geometry is
/// quantized to whole millimetres before comparison.
pub fn bin_profile(layers: &[CloudLayer]) -> Result<LayerLabelVector> {
    for layer in layers {
        layer.validate()?;
    }
    let mut sorted: Vec<&CloudLayer> = layers.iter().collect();
    sorted.sort_by(|a, b| a.base_km.total_cmp(&b.base_km));
    for pair in sorted.windows(2) {
        if pair[1].base_km < pair[0].top_km {
            return Err(CollocError::OverlappingLayers);
        }
    }
    let mm = |km: f64| (km * MM_PER_KM).round() as i64;
    let mut out = [0u8; NUM_LAYERS];
    for (k, slot) in out.iter_mut().enumerate() {
        let bin_lo = k as i64 * BIN_MM;
        let bin_hi = bin_lo + BIN_MM;
        let mut best: Option<(i64, u8)> = None;
        for layer in layers {
            let overlap = mm(layer.top_km).min(bin_hi) - mm(layer.base_km).max(bin_lo);
            if overlap <= 0 {
                continue;
            }
            let wins = match best {
                None => true,
                Some((bo, bp)) => overlap > bo || (overlap == bo && layer.phase < bp),
            };
            if wins {
                best = Some((overlap, layer.phase));
            }
        }
        *slot = best.map_or(0, |(_, phase)| phase);
    }
    Ok(LayerLabelVector(out))
}

/// Merges the binned vectors of all shots mapped to one pixel.
///
/// Per layer each shot casts one vote; the plurality wins. On a tied
/// count, cloud beats clear, and among cloud codes the lower one wins.
pub fn aggregate_shots(vectors: &[LayerLabelVector]) -> Result<LayerLabelVector> {
    if vectors.is_empty() {
        return Err(CollocError::EmptyShots);
    }
    let mut out = [0u8; NUM_LAYERS];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut counts = [0u32; 4];
        for v in vectors {
            counts[v.0[k] as usize] += 1;
        }
        let mut best = (counts[0], 0u8);
        for code in 1..4u8 {
            let cand = (counts[code as usize], code);
            if cand.0 == 0 {
                continue;
            }
            let better = if cand.0 != best.0 {
                cand.0 > best.0
            } else if (cand.1 > 0) != (best.1 > 0) {
                cand.1 > 0
            } else {
                cand.1 < best.1
            };
            if better {
                best = cand;
            }
        }
        *slot = best.1;
    }
    Ok(LayerLabelVector(out))
}

/// Continuous quantities collapse by arithmetic mean.
pub fn aggregate_continuous(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(base: f64, top: f64, phase: u8) -> CloudLayer {
        CloudLayer {
            base_km: base,
            top_km: top,
            phase,
        }
    }

    #[test]
    fn single_layer_labels_exactly_its_bins() {
        // [1.2, 2.9) overlaps bins 2..=5 ([1.0,1.5) .. [2.5,3.0))
        let v = bin_profile(&[layer(1.2, 2.9, 3)]).unwrap();
        for (k, &label) in v.0.iter().enumerate() {
            let expect = if (2..=5).contains(&k) { 3 } else { 0 };
            assert_eq!(label, expect, "bin {k}");
        }
    }

    #[test]
    fn empty_layer_list_is_all_clear() {
        assert_eq!(bin_profile(&[]).unwrap(), LayerLabelVector::clear());
    }

    #[test]
    fn greater_overlap_wins_shared_bin() {
        // bin 4 = [2.0, 2.5): ice covers 0.4, liquid 0.1 -> ice
        let v = bin_profile(&[layer(1.0, 2.4, 1), layer(2.4, 3.0, 3)]).unwrap();
        assert_eq!(v.0[4], 1);
        assert_eq!(v.0[5], 3);
    }

    #[test]
    fn equal_overlap_prefers_lower_phase_code() {
        // bin 4 = [2.0, 2.5): both layers cover 0.25
        let v = bin_profile(&[layer(1.0, 2.25, 3), layer(2.25, 3.5, 2)]).unwrap();
        assert_eq!(v.0[4], 2);
        let v = bin_profile(&[layer(1.0, 2.25, 2), layer(2.25, 3.5, 3)]).unwrap();
        assert_eq!(v.0[4], 2);
    }

    #[test]
    fn binning_rejects_degenerate_layers() {
        assert!(bin_profile(&[layer(2.0, 2.0, 1)]).is_err());
        assert!(bin_profile(&[layer(3.0, 2.0, 1)]).is_err());
        assert!(bin_profile(&[layer(1.0, 2.0, 5)]).is_err());
        assert!(bin_profile(&[layer(1.0, 2.5, 1), layer(2.0, 3.0, 2)]).is_err());
    }

    #[test]
    fn single_shot_aggregates_to_itself() {
        let v = bin_profile(&[layer(0.5, 4.0, 2)]).unwrap();
        assert_eq!(aggregate_shots(&[v]).unwrap(), v);
    }

    #[test]
    fn plurality_vote_wins() {
        let mut a = [0u8; NUM_LAYERS];
        a[0] = 1;
        let mut b = [0u8; NUM_LAYERS];
        b[0] = 1;
        let mut c = [0u8; NUM_LAYERS];
        c[0] = 3;
        let merged = aggregate_shots(&[
            LayerLabelVector(a),
            LayerLabelVector(b),
            LayerLabelVector(c),
        ])
        .unwrap();
        assert_eq!(merged.0[0], 1);
    }

    #[test]
    fn two_vote_combinations_follow_the_rule_table() {
        // (votes) -> expected: plurality, then cloud-over-clear, then lower code
        let table = [
            ((0u8, 0u8), 0u8),
            ((0, 1), 1),
            ((0, 2), 2),
            ((0, 3), 3),
            ((1, 1), 1),
            ((1, 2), 1),
            ((1, 3), 1),
            ((2, 2), 2),
            ((2, 3), 2),
            ((3, 3), 3),
        ];
        for ((va, vb), expect) in table {
            let mut a = [0u8; NUM_LAYERS];
            a[7] = va;
            let mut b = [0u8; NUM_LAYERS];
            b[7] = vb;
            let m1 = aggregate_shots(&[LayerLabelVector(a), LayerLabelVector(b)]).unwrap();
            let m2 = aggregate_shots(&[LayerLabelVector(b), LayerLabelVector(a)]).unwrap();
            assert_eq!(m1.0[7], expect, "votes ({va},{vb})");
            assert_eq!(m2.0[7], expect, "votes ({vb},{va}) swapped");
        }
    }

    #[test]
    fn aggregation_rejects_empty_input() {
        assert!(matches!(aggregate_shots(&[]), Err(CollocError::EmptyShots)));
    }

    #[test]
    fn continuous_aggregation_is_the_mean() {
        assert_eq!(aggregate_continuous(&[1.0, 2.0, 6.0]), Some(3.0));
        assert_eq!(aggregate_continuous(&[]), None);
    }
}
