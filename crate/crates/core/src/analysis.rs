//! Attention-locality analysis: how much attention mass lands at each
//! distance from the query, normalized by ring size so rings of
//! different cardinality are comparable.

use std::collections::HashMap;

use crate::grid::{GridPos, GridSpec};
use crate::model::AttentionRecord;

/// Per-distance attention profile averaged over recorded query rows.
///
/// For each row and squared distance `s²`, the contribution is
/// (attention mass on cells at distance s from the query) / (number of
/// grid cells at that distance), counting every ring member whether or
/// not it was visible. Condition-token mass is excluded from the rings
/// and reported separately.
#[derive(Debug, Clone)]
pub struct PTAProfile {
    /// Euclidean distances, ascending.
    pub distances: Vec<f64>,
    pub pta: Vec<f64>,
    /// Number of rows that had a non-empty ring at each distance.
    pub samples: Vec<usize>,
    /// Mean attention mass on the condition token, over all rows.
    pub condition_mass: f64,
}

/// Ring sizes |{c in grid : |c - center|² = s²}| for one center.
fn ring_sizes(center: GridPos, grid: GridSpec) -> HashMap<u64, usize> {
    let mut map = HashMap::new();
    for p in grid.positions() {
        *map.entry(center.dist2(&p)).or_insert(0) += 1;
    }
    map
}

/// Computes the profile from recorded attention. Rows with no
/// positioned column (first decoding step) still contribute to the
/// condition mass average.
pub fn pta_profile(record: &AttentionRecord, grid: GridSpec) -> PTAProfile {
    // sum / count of per-row normalized mass, keyed by squared distance.
    let mut acc: HashMap<u64, (f64, usize)> = HashMap::new();
    let mut rings_by_center: HashMap<GridPos, HashMap<u64, usize>> = HashMap::new();
    let mut cond_mass = 0.0;
    let mut rows = 0usize;

    for step in &record.steps {
        for row in &step.rows {
            rows += 1;
            let rings = rings_by_center
                .entry(row.query_pos)
                .or_insert_with(|| ring_sizes(row.query_pos, grid));
            // Mass observed in this row, per squared distance.
            let mut mass: HashMap<u64, f64> = HashMap::new();
            for (j, meta) in step.cols.iter().enumerate() {
                let w = row.weights[j];
                match meta.pos() {
                    Some(p) => *mass.entry(row.query_pos.dist2(&p)).or_insert(0.0) += w,
                    None => cond_mass += w,
                }
            }
            // Every ring of the grid counts for this row, visible or not.
            for (&s2, &count) in rings.iter() {
                let m = mass.get(&s2).copied().unwrap_or(0.0);
                let entry = acc.entry(s2).or_insert((0.0, 0));
                entry.0 += m / count as f64;
                entry.1 += 1;
            }
        }
    }

    let mut keys: Vec<u64> = acc.keys().copied().collect();
    keys.sort_unstable();
    PTAProfile {
        distances: keys.iter().map(|&s2| (s2 as f64).sqrt()).collect(),
        pta: keys.iter().map(|s2| acc[s2].0 / acc[s2].1 as f64).collect(),
        samples: keys.iter().map(|s2| acc[s2].1).collect(),
        condition_mass: if rows == 0 { 0.0 } else { cond_mass / rows as f64 },
    }
}

/// Total attention mass within distance `s_max` of the query, averaged
/// over rows. Condition mass is excluded.
pub fn near_mass(record: &AttentionRecord, s_max: f64) -> f64 {
    let cap = s_max * s_max * (1.0 + 1e-9);
    let mut total = 0.0;
    let mut rows = 0usize;
    for step in &record.steps {
        for row in &step.rows {
            rows += 1;
            for (j, meta) in step.cols.iter().enumerate() {
                if let Some(p) = meta.pos() {
                    if (row.query_pos.dist2(&p) as f64) <= cap {
                        total += row.weights[j];
                    }
                }
            }
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

pub fn pta_csv(profile: &PTAProfile) -> String {
    let mut out = String::from("distance,pta,samples\n");
    for i in 0..profile.distances.len() {
        out.push_str(&format!(
            "{:.6},{:.8},{}\n",
            profile.distances[i], profile.pta[i], profile.samples[i]
        ));
    }
    out.push_str(&format!("condition_mass,{:.8},\n", profile.condition_mass));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ColMeta, RecordedRow, StepAttention};

    fn record_for(
        grid: GridSpec,
        query: GridPos,
        cols: Vec<ColMeta>,
        weights: Vec<f64>,
    ) -> AttentionRecord {
        let _ = grid;
        AttentionRecord {
            steps: vec![StepAttention {
                step: 0,
                cols,
                rows: vec![RecordedRow { layer: 0, head: 0, query_pos: query, weights }],
            }],
        }
    }

    #[test]
    fn uniform_attention_gives_flat_profile() {
        let grid = GridSpec::new(4);
        let n = grid.token_count();
        let cols: Vec<ColMeta> = grid.positions().into_iter().map(ColMeta::Context).collect();
        let weights = vec![1.0 / n as f64; n];
        let rec = record_for(grid, GridPos::new(1, 2), cols, weights);
        let profile = pta_profile(&rec, grid);
        for &v in &profile.pta {
            assert!((v - 1.0 / n as f64).abs() < 1e-12, "profile not flat: {v}");
        }
        assert_eq!(profile.condition_mass, 0.0);
    }

    #[test]
    fn single_neighbor_mass_splits_over_ring() {
        let grid = GridSpec::new(5);
        let center = GridPos::new(2, 2);
        let neighbor = GridPos::new(2, 3);
        let cols = vec![ColMeta::Condition, ColMeta::Context(neighbor)];
        let rec = record_for(grid, center, cols, vec![0.2, 0.8]);
        let profile = pta_profile(&rec, grid);
        // Ring at distance 1 around the center of a 5x5 grid has 4 cells.
        let i = profile
            .distances
            .iter()
            .position(|&d| (d - 1.0).abs() < 1e-12)
            .unwrap();
        assert!((profile.pta[i] - 0.8 / 4.0).abs() < 1e-12);
        assert!((profile.condition_mass - 0.2).abs() < 1e-12);
        // Rings with no mass still appear, at zero.
        let far = profile.distances.iter().position(|&d| d > 2.0).unwrap();
        assert_eq!(profile.pta[far], 0.0);
    }

    #[test]
    fn near_mass_counts_weights_within_radius() {
        let grid = GridSpec::new(5);
        let center = GridPos::new(2, 2);
        let cols = vec![
            ColMeta::Condition,
            ColMeta::Context(GridPos::new(2, 3)),
            ColMeta::Context(GridPos::new(0, 0)),
        ];
        let rec = record_for(grid, center, cols, vec![0.1, 0.6, 0.3]);
        assert!((near_mass(&rec, 1.5) - 0.6).abs() < 1e-12);
        assert!((near_mass(&rec, 10.0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn csv_has_header_and_condition_row() {
        let grid = GridSpec::new(3);
        let cols = vec![ColMeta::Context(GridPos::new(0, 0))];
        let rec = record_for(grid, GridPos::new(1, 1), cols, vec![1.0]);
        let csv = pta_csv(&pta_profile(&rec, grid));
        assert!(csv.starts_with("distance,pta,samples\n"));
        assert!(csv.trim_end().ends_with(','));
    }
}
