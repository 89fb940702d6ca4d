//! Positions, distances, and exact-distance neighborhoods on the N×N token grid.
//!
//! Distance-equality tests compare squared distances as exact integers;
//! on an integer grid every realizable distance is the square root of an
//! integer, so no floating tolerance is involved.

use thiserror::Error;

/// A cell of the token grid, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

impl GridPos {
    pub fn new(row: usize, col: usize) -> Self {
        GridPos { row, col }
    }

    /// Squared Euclidean distance, exact.
    pub fn dist2(&self, other: &GridPos) -> u64 {
        let dr = self.row as i64 - other.row as i64;
        let dc = self.col as i64 - other.col as i64;
        (dr * dr + dc * dc) as u64
    }
}

impl std::fmt::Display for GridPos {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

/// Side length and derived token count of a square grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub side: usize,
}

impl GridSpec {
    pub fn new(side: usize) -> Self {
        assert!(side > 0, "grid side must be positive");
        GridSpec { side }
    }

    pub fn token_count(&self) -> usize {
        self.side * self.side
    }

    /// Row-major index of a position.
    pub fn index_of(&self, p: GridPos) -> usize {
        p.row * self.side + p.col
    }

    pub fn pos_of(&self, index: usize) -> GridPos {
        GridPos::new(index / self.side, index % self.side)
    }

    pub fn contains(&self, p: GridPos) -> bool {
        p.row < self.side && p.col < self.side
    }

    /// All positions in row-major order.
    pub fn positions(&self) -> Vec<GridPos> {
        (0..self.token_count()).map(|i| self.pos_of(i)).collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("empty reference set")]
    EmptyReferenceSet,
}

/// Euclidean distance between two grid cells.
pub fn euclidean_distance(a: GridPos, b: GridPos) -> f64 {
    (a.dist2(&b) as f64).sqrt()
}

/// All in-grid positions at exactly squared distance `s2` from `center`.
///
/// Exact integer comparison; callers with a real-valued distance `s`
/// should pass `round(s*s)` only when `s` is known to be the square
/// root of an integer.
pub fn exact_distance_ring_sq(center: GridPos, s2: u64, grid: GridSpec) -> Vec<GridPos> {
    grid.positions()
        .into_iter()
        .filter(|p| center.dist2(p) == s2)
        .collect()
}

/// All in-grid positions at exactly Euclidean distance `s` from `center`.
pub fn exact_distance_ring(center: GridPos, s: f64, grid: GridSpec) -> Vec<GridPos> {
    debug_assert!(s >= 0.0);
    let s2 = s * s;
    let rounded = s2.round();
    // Realizable distances are sqrt of integers; a non-integer squared
    // distance (beyond rounding noise) matches nothing.
    if (s2 - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Vec::new();
    }
    exact_distance_ring_sq(center, rounded as u64, grid)
}

/// Minimum distance from `p` to a nonempty set of positions.
pub fn min_distance_to_set(p: GridPos, set: &[GridPos]) -> Result<f64, GridError> {
    min_dist2_to_set(p, set).map(|d2| (d2 as f64).sqrt())
}

/// Squared-distance form of [`min_distance_to_set`], exact.
pub fn min_dist2_to_set(p: GridPos, set: &[GridPos]) -> Result<u64, GridError> {
    set.iter()
        .map(|q| p.dist2(q))
        .min()
        .ok_or(GridError::EmptyReferenceSet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean_distance(GridPos::new(0, 0), GridPos::new(3, 4)), 5.0);
        assert_eq!(euclidean_distance(GridPos::new(2, 2), GridPos::new(2, 2)), 0.0);
        let d = euclidean_distance(GridPos::new(0, 0), GridPos::new(1, 1));
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn ring_examples() {
        let g = GridSpec::new(5);
        let mut r = exact_distance_ring(GridPos::new(2, 2), 1.0, g);
        r.sort();
        assert_eq!(
            r,
            vec![
                GridPos::new(1, 2),
                GridPos::new(2, 1),
                GridPos::new(2, 3),
                GridPos::new(3, 2)
            ]
        );

        let mut r = exact_distance_ring(GridPos::new(0, 0), 1.0, g);
        r.sort();
        assert_eq!(r, vec![GridPos::new(0, 1), GridPos::new(1, 0)]);
    }

    #[test]
    fn ring_sqrt2_matches_enumeration() {
        // Oracle: enumerate all 25 cells, keep squared distance = 2.
        let g = GridSpec::new(5);
        let center = GridPos::new(2, 2);
        let mut expected: Vec<GridPos> = g
            .positions()
            .into_iter()
            .filter(|p| center.dist2(p) == 2)
            .collect();
        expected.sort();
        let mut r = exact_distance_ring(center, std::f64::consts::SQRT_2, g);
        r.sort();
        assert_eq!(r, expected);
        assert_eq!(r.len(), 4);
    }

    #[test]
    fn rings_partition_grid() {
        let g = GridSpec::new(6);
        let center = GridPos::new(1, 4);
        let mut seen = std::collections::HashSet::new();
        let d2s: std::collections::BTreeSet<u64> = g
            .positions()
            .iter()
            .map(|p| center.dist2(p))
            .filter(|&d| d > 0)
            .collect();
        for d2 in d2s {
            for p in exact_distance_ring_sq(center, d2, g) {
                assert!(seen.insert(p), "rings overlap at {p}");
            }
        }
        assert_eq!(seen.len(), g.token_count() - 1);
    }

    #[test]
    fn min_distance_examples() {
        let s = vec![GridPos::new(0, 3), GridPos::new(4, 0)];
        assert_eq!(min_distance_to_set(GridPos::new(0, 0), &s).unwrap(), 3.0);
        let s2 = vec![GridPos::new(1, 1)];
        assert_eq!(min_distance_to_set(GridPos::new(1, 1), &s2).unwrap(), 0.0);
        let s3 = vec![GridPos::new(0, 0), GridPos::new(3, 3)];
        let d = min_distance_to_set(GridPos::new(1, 1), &s3).unwrap();
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn min_distance_empty_set_errors() {
        assert_eq!(
            min_distance_to_set(GridPos::new(0, 0), &[]),
            Err(GridError::EmptyReferenceSet)
        );
    }

    #[test]
    fn member_distance_is_zero() {
        let mut s = vec![GridPos::new(3, 1), GridPos::new(0, 2)];
        let p = GridPos::new(2, 2);
        s.push(p);
        assert_eq!(min_distance_to_set(p, &s).unwrap(), 0.0);
    }
}
