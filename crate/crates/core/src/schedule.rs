//! Generation-order schedules: cosine group-size apportionment and the
//! raster, random, Halton, and locality-aware order builders, plus
//! schedule validation and the text interchange format.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{euclidean_distance, min_dist2_to_set, GridPos, GridSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("more steps than tokens ({steps} > {total})")]
    TooManySteps { steps: usize, total: usize },
    #[error("steps must be at least 1")]
    ZeroSteps,
    #[error("group sizes cover {sizes_total} tokens but grid has {grid_total}")]
    SizeMismatch { sizes_total: usize, grid_total: usize },
    #[error("farthest point sampling asked for {m} of {available} candidates")]
    NotEnoughCandidates { m: usize, available: usize },
    #[error("schedule parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Number of tokens decoded at each of K steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSizes {
    pub total: usize,
    pub sizes: Vec<usize>,
}

impl GroupSizes {
    pub fn steps(&self) -> usize {
        self.sizes.len()
    }
}

/// Cosine apportionment of `total` tokens over `steps` groups.
///
/// Raw share of step k is total·(cos((k−1)π/2K) − cos(kπ/2K)); integerized
/// by largest-remainder, then any zero entry is repaired to 1 by
/// decrementing a maximal entry. The result is non-decreasing and sums
/// to `total`.
pub fn cosine_group_sizes(total: usize, steps: usize) -> Result<GroupSizes, ScheduleError> {
    if steps == 0 {
        return Err(ScheduleError::ZeroSteps);
    }
    if steps > total {
        return Err(ScheduleError::TooManySteps { steps, total });
    }
    let k_f = steps as f64;
    let raw: Vec<f64> = (1..=steps)
        .map(|k| {
            let a = ((k - 1) as f64 * PI / (2.0 * k_f)).cos();
            let b = (k as f64 * PI / (2.0 * k_f)).cos();
            total as f64 * (a - b)
        })
        .collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..steps).collect();
    // Largest fractional part first; ties toward smaller k.
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        sizes[i] += 1;
    }
    // Repair zeros by taking a unit from a maximal entry (earliest maximal
    // index, which keeps the sequence non-decreasing).
    for i in 0..steps {
        if sizes[i] == 0 {
            let max = *sizes.iter().max().unwrap();
            let j = sizes.iter().position(|&s| s == max).unwrap();
            sizes[j] -= 1;
            sizes[i] += 1;
        }
    }
    Ok(GroupSizes { total, sizes })
}

/// An ordered partition of grid positions into decoding groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderSchedule {
    pub grid: GridSpec,
    pub groups: Vec<Vec<GridPos>>,
}

impl OrderSchedule {
    pub fn steps(&self) -> usize {
        self.groups.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.len()).collect()
    }

    /// All positions in schedule order.
    pub fn flat(&self) -> Vec<GridPos> {
        self.groups.iter().flatten().copied().collect()
    }
}

/// Locality-aware scheduler parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    /// Distance form of the proximity threshold τ: a candidate is
    /// high-proximity iff its min distance to the selected set is below
    /// this cutoff.
    pub near_cutoff: f64,
    /// Repulsion threshold ρ: candidates closer than this to a token
    /// just picked in the current step are deferred.
    pub repulsion: f64,
    pub first_token: FirstTokenPolicy,
    pub seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            near_cutoff: 2.0,
            repulsion: 2.0,
            first_token: FirstTokenPolicy::Center,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstTokenPolicy {
    Center,
    Random,
}

impl std::fmt::Display for FirstTokenPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FirstTokenPolicy::Center => write!(f, "center"),
            FirstTokenPolicy::Random => write!(f, "random"),
        }
    }
}

fn check_sizes(grid: GridSpec, sizes: &GroupSizes) -> Result<(), ScheduleError> {
    let sum: usize = sizes.sizes.iter().sum();
    if sum != grid.token_count() || sizes.total != grid.token_count() {
        return Err(ScheduleError::SizeMismatch {
            sizes_total: sum,
            grid_total: grid.token_count(),
        });
    }
    Ok(())
}

fn chunk(grid: GridSpec, order: Vec<GridPos>, sizes: &GroupSizes) -> OrderSchedule {
    let mut groups = Vec::with_capacity(sizes.sizes.len());
    let mut it = order.into_iter();
    for &s in &sizes.sizes {
        groups.push(it.by_ref().take(s).collect());
    }
    OrderSchedule { grid, groups }
}

/// Row-major order chunked by the given sizes.
pub fn raster_order(grid: GridSpec, sizes: &GroupSizes) -> Result<OrderSchedule, ScheduleError> {
    check_sizes(grid, sizes)?;
    Ok(chunk(grid, grid.positions(), sizes))
}

/// A seeded uniform permutation chunked by the given sizes.
pub fn random_order(
    grid: GridSpec,
    sizes: &GroupSizes,
    seed: u64,
) -> Result<OrderSchedule, ScheduleError> {
    check_sizes(grid, sizes)?;
    let mut positions = grid.positions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positions.shuffle(&mut rng);
    Ok(chunk(grid, positions, sizes))
}

/// Radical-inverse of `index` in the given base.
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut denom = 1.0;
    while index > 0 {
        denom *= base as f64;
        result += (index % base) as f64 / denom;
        index /= base;
    }
    result
}

/// Halton low-discrepancy order: base 2 drives the column, base 3 the
/// row, starting at sequence index 1; cells already emitted are skipped.
pub fn halton_order(grid: GridSpec, sizes: &GroupSizes) -> Result<OrderSchedule, ScheduleError> {
    check_sizes(grid, sizes)?;
    let n = grid.token_count();
    let side = grid.side;
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut index = 1u64;
    while order.len() < n {
        let x = radical_inverse(index, 2);
        let y = radical_inverse(index, 3);
        index += 1;
        let col = ((x * side as f64).floor() as usize).min(side - 1);
        let row = ((y * side as f64).floor() as usize).min(side - 1);
        let p = GridPos::new(row, col);
        let i = grid.index_of(p);
        if !seen[i] {
            seen[i] = true;
            order.push(p);
        }
    }
    Ok(chunk(grid, order, sizes))
}

/// Greedy farthest point sampling: pick `m` candidates maximizing the
/// minimum distance to `seeds` plus already-picked points; ties broken
/// by row-major order. With empty seeds the first pick is the candidate
/// farthest from the remaining candidates' centroid.
pub fn farthest_point_sampling(
    candidates: &[GridPos],
    seeds: &[GridPos],
    m: usize,
) -> Result<Vec<GridPos>, ScheduleError> {
    if m > candidates.len() {
        return Err(ScheduleError::NotEnoughCandidates {
            m,
            available: candidates.len(),
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut remaining: Vec<GridPos> = candidates.to_vec();
    let mut picked: Vec<GridPos> = Vec::with_capacity(m);
    let mut anchors: Vec<GridPos> = seeds.to_vec();

    if anchors.is_empty() {
        let cr = remaining.iter().map(|p| p.row as f64).sum::<f64>() / remaining.len() as f64;
        let cc = remaining.iter().map(|p| p.col as f64).sum::<f64>() / remaining.len() as f64;
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in remaining.iter().enumerate() {
            let d = ((p.row as f64 - cr).powi(2) + (p.col as f64 - cc).powi(2)).sqrt();
            if d > best_d + 1e-12 || ((d - best_d).abs() <= 1e-12 && *p < remaining[best]) {
                best = i;
                best_d = d;
            }
        }
        let p = remaining.swap_remove(best);
        picked.push(p);
        anchors.push(p);
    }

    while picked.len() < m {
        let mut best = 0usize;
        let mut best_d2 = 0u64;
        let mut best_pos = GridPos::new(usize::MAX, usize::MAX);
        for (i, p) in remaining.iter().enumerate() {
            let d2 = min_dist2_to_set(*p, &anchors).expect("anchors nonempty");
            if d2 > best_d2 || (d2 == best_d2 && *p < best_pos) {
                best = i;
                best_d2 = d2;
                best_pos = *p;
            }
        }
        let p = remaining.swap_remove(best);
        picked.push(p);
        anchors.push(p);
    }
    Ok(picked)
}

/// Locality-aware order: per step, candidates sorted by proximity to the
/// already-selected set are split at the cutoff into a high-proximity
/// queue and a remainder; the step drains the high-proximity queue head
/// first, deferring anything within the repulsion radius of a fresh
/// pick, and fills any deficit by farthest point sampling over the
/// remainder.
pub fn locality_aware_order(
    grid: GridSpec,
    sizes: &GroupSizes,
    cfg: &SchedulerConfig,
) -> Result<OrderSchedule, ScheduleError> {
    check_sizes(grid, sizes)?;
    let near2 = cfg.near_cutoff * cfg.near_cutoff;
    let rep2 = cfg.repulsion * cfg.repulsion;

    let mut selected: Vec<GridPos> = Vec::with_capacity(grid.token_count());
    let mut selected_set: HashSet<GridPos> = HashSet::new();
    let mut groups: Vec<Vec<GridPos>> = Vec::with_capacity(sizes.sizes.len());

    for (k, &o_k) in sizes.sizes.iter().enumerate() {
        let mut step: Vec<GridPos> = Vec::with_capacity(o_k);

        if k == 0 {
            let first = match cfg.first_token {
                FirstTokenPolicy::Center => GridPos::new(grid.side / 2, grid.side / 2),
                FirstTokenPolicy::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    let all = grid.positions();
                    *all.choose(&mut rng).unwrap()
                }
            };
            step.push(first);
        }

        if step.len() < o_k {
            // Proximity is measured against the selected set at the start
            // of the step; for the first step that set is the policy token.
            let reference: Vec<GridPos> = if selected.is_empty() {
                step.clone()
            } else {
                selected.clone()
            };
            let mut candidates: Vec<(GridPos, u64)> = grid
                .positions()
                .into_iter()
                .filter(|p| !selected_set.contains(p) && !step.contains(p))
                .map(|p| (p, min_dist2_to_set(p, &reference).unwrap()))
                .collect();
            // Descending proximity = ascending distance; ties row-major.
            candidates.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));

            let mut c1: std::collections::VecDeque<(GridPos, u64)> = std::collections::VecDeque::new();
            let mut c2: std::collections::VecDeque<GridPos> = std::collections::VecDeque::new();
            for (p, d2) in candidates {
                if (d2 as f64) < near2 {
                    c1.push_back((p, d2));
                } else {
                    c2.push_back(p);
                }
            }

            while step.len() < o_k && !c1.is_empty() {
                let (p, _) = c1.pop_front().unwrap();
                step.push(p);
                // Defer remaining high-proximity candidates that sit inside
                // the repulsion radius of the fresh pick, preserving order.
                let mut kept = std::collections::VecDeque::with_capacity(c1.len());
                for (q, d2) in c1 {
                    if (q.dist2(&p) as f64) < rep2 {
                        c2.push_back(q);
                    } else {
                        kept.push_back((q, d2));
                    }
                }
                c1 = kept;
            }

            if step.len() < o_k {
                let deficit = o_k - step.len();
                let pool: Vec<GridPos> = c2.into_iter().collect();
                let extra = farthest_point_sampling(&pool, &step, deficit)?;
                step.extend(extra);
            }
        }

        for p in &step {
            selected_set.insert(*p);
        }
        selected.extend(step.iter().copied());
        groups.push(step);
    }
    Ok(OrderSchedule { grid, groups })
}

/// Findings of [`validate_schedule`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleReport {
    pub valid: bool,
    pub duplicates: Vec<GridPos>,
    pub missing: Vec<GridPos>,
    pub out_of_grid: Vec<GridPos>,
    pub empty_groups: Vec<usize>,
    pub step_stats: Vec<StepStats>,
}

/// Per-step locality statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub size: usize,
    /// Mean over the step's tokens of min distance to all prior context;
    /// None for the first step.
    pub mean_dist_to_context: Option<f64>,
    /// Min pairwise distance inside the step; None for singleton steps.
    pub min_intra_step_dist: Option<f64>,
}

/// Checks partition integrity and reports per-step locality statistics.
pub fn validate_schedule(s: &OrderSchedule) -> ScheduleReport {
    let mut seen: HashSet<GridPos> = HashSet::new();
    let mut duplicates = Vec::new();
    let mut out_of_grid = Vec::new();
    let mut empty_groups = Vec::new();
    for (g, group) in s.groups.iter().enumerate() {
        if group.is_empty() {
            empty_groups.push(g);
        }
        for &p in group {
            if !s.grid.contains(p) {
                out_of_grid.push(p);
            }
            if !seen.insert(p) {
                duplicates.push(p);
            }
        }
    }
    let missing: Vec<GridPos> = s
        .grid
        .positions()
        .into_iter()
        .filter(|p| !seen.contains(p))
        .collect();

    let mut step_stats = Vec::with_capacity(s.groups.len());
    let mut context: Vec<GridPos> = Vec::new();
    for (g, group) in s.groups.iter().enumerate() {
        let mean_dist_to_context = if context.is_empty() || group.is_empty() {
            None
        } else {
            let total: f64 = group
                .iter()
                .map(|&p| (min_dist2_to_set(p, &context).unwrap() as f64).sqrt())
                .sum();
            Some(total / group.len() as f64)
        };
        let min_intra_step_dist = if group.len() < 2 {
            None
        } else {
            let mut best = f64::INFINITY;
            for i in 0..group.len() {
                for j in i + 1..group.len() {
                    best = best.min(euclidean_distance(group[i], group[j]));
                }
            }
            Some(best)
        };
        step_stats.push(StepStats {
            step: g,
            size: group.len(),
            mean_dist_to_context,
            min_intra_step_dist,
        });
        context.extend(group.iter().copied());
    }

    ScheduleReport {
        valid: duplicates.is_empty()
            && missing.is_empty()
            && out_of_grid.is_empty()
            && empty_groups.is_empty(),
        duplicates,
        missing,
        out_of_grid,
        empty_groups,
        step_stats,
    }
}

/// Header metadata carried by a schedule file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleMeta {
    pub scheduler: String,
    pub seed: Option<u64>,
    pub near_cutoff: Option<f64>,
    pub repulsion: Option<f64>,
    pub first_token: Option<String>,
}

impl ScheduleMeta {
    pub fn named(scheduler: &str) -> Self {
        ScheduleMeta {
            scheduler: scheduler.to_string(),
            seed: None,
            near_cutoff: None,
            repulsion: None,
            first_token: None,
        }
    }
}

/// Serializes a schedule to the text interchange format:
/// `key=value` header lines, then one `row,col row,col ...` line per step.
pub fn write_schedule_text(s: &OrderSchedule, meta: &ScheduleMeta) -> String {
    let mut out = String::new();
    out.push_str("# lpd schedule v1\n");
    let _ = writeln!(out, "side={}", s.grid.side);
    let _ = writeln!(out, "steps={}", s.groups.len());
    let sizes: Vec<String> = s.groups.iter().map(|g| g.len().to_string()).collect();
    let _ = writeln!(out, "sizes={}", sizes.join(","));
    let _ = writeln!(out, "scheduler={}", meta.scheduler);
    if let Some(seed) = meta.seed {
        let _ = writeln!(out, "seed={seed}");
    }
    if let Some(v) = meta.near_cutoff {
        let _ = writeln!(out, "near_cutoff={v}");
    }
    if let Some(v) = meta.repulsion {
        let _ = writeln!(out, "repulsion={v}");
    }
    if let Some(v) = &meta.first_token {
        let _ = writeln!(out, "first_token={v}");
    }
    for group in &s.groups {
        let cells: Vec<String> = group.iter().map(|p| p.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

/// Parses the text interchange format produced by [`write_schedule_text`].
pub fn read_schedule_text(text: &str) -> Result<(OrderSchedule, ScheduleMeta), ScheduleError> {
    let mut side: Option<usize> = None;
    let mut steps: Option<usize> = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut meta = ScheduleMeta::named("unknown");
    let mut groups: Vec<Vec<GridPos>> = Vec::new();

    let parse_err = |line: usize, msg: &str| ScheduleError::Parse {
        line,
        msg: msg.to_string(),
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let no = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            match key.trim() {
                "side" => {
                    side = Some(value.trim().parse().map_err(|_| parse_err(no, "bad side"))?)
                }
                "steps" => {
                    steps = Some(value.trim().parse().map_err(|_| parse_err(no, "bad steps"))?)
                }
                "sizes" => {
                    let parsed: Result<Vec<usize>, _> =
                        value.split(',').map(|v| v.trim().parse()).collect();
                    sizes = Some(parsed.map_err(|_| parse_err(no, "bad sizes"))?);
                }
                "scheduler" => meta.scheduler = value.trim().to_string(),
                "seed" => {
                    meta.seed =
                        Some(value.trim().parse().map_err(|_| parse_err(no, "bad seed"))?)
                }
                "near_cutoff" => {
                    meta.near_cutoff = Some(
                        value
                            .trim()
                            .parse()
                            .map_err(|_| parse_err(no, "bad near_cutoff"))?,
                    )
                }
                "repulsion" => {
                    meta.repulsion = Some(
                        value
                            .trim()
                            .parse()
                            .map_err(|_| parse_err(no, "bad repulsion"))?,
                    )
                }
                "first_token" => meta.first_token = Some(value.trim().to_string()),
                other => {
                    return Err(parse_err(no, &format!("unknown header key '{other}'")));
                }
            }
        } else {
            let mut group = Vec::new();
            for cell in line.split_whitespace() {
                let (r, c) = cell
                    .split_once(',')
                    .ok_or_else(|| parse_err(no, "cell must be row,col"))?;
                let row = r.parse().map_err(|_| parse_err(no, "bad row"))?;
                let col = c.parse().map_err(|_| parse_err(no, "bad col"))?;
                group.push(GridPos::new(row, col));
            }
            groups.push(group);
        }
    }

    let side = side.ok_or(parse_err(0, "missing side header"))?;
    if groups.is_empty() {
        return Err(parse_err(0, "no step lines"));
    }
    let grid = GridSpec::new(side);
    if let Some(steps) = steps {
        if steps != groups.len() {
            return Err(parse_err(
                0,
                &format!("header says {} steps but file has {}", steps, groups.len()),
            ));
        }
    }
    if let Some(sizes) = &sizes {
        if sizes.len() != groups.len()
            || sizes.iter().zip(&groups).any(|(s, g)| *s != g.len())
        {
            return Err(parse_err(0, "sizes header disagrees with step lines"));
        }
    }
    Ok((OrderSchedule { grid, groups }, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_sizes_paper_list() {
        let s = cosine_group_sizes(256, 20).unwrap();
        assert_eq!(
            s.sizes,
            vec![1, 2, 4, 5, 7, 8, 10, 11, 12, 14, 15, 16, 17, 18, 18, 19, 19, 20, 20, 20]
        );
    }

    #[test]
    fn cosine_sizes_edge_cases() {
        assert_eq!(cosine_group_sizes(16, 16).unwrap().sizes, vec![1; 16]);
        assert_eq!(cosine_group_sizes(4, 1).unwrap().sizes, vec![4]);
        assert_eq!(
            cosine_group_sizes(4, 5),
            Err(ScheduleError::TooManySteps { steps: 5, total: 4 })
        );
    }

    #[test]
    fn cosine_sizes_nondecreasing_and_sum() {
        for total in 1..=128 {
            for steps in 1..=total {
                let s = cosine_group_sizes(total, steps).unwrap();
                assert_eq!(s.sizes.iter().sum::<usize>(), total, "({total},{steps})");
                assert!(s.sizes.iter().all(|&x| x >= 1), "({total},{steps})");
                assert!(
                    s.sizes.windows(2).all(|w| w[0] <= w[1]),
                    "not non-decreasing for ({total},{steps}): {:?}",
                    s.sizes
                );
            }
        }
    }

    #[test]
    fn raster_examples() {
        let g = GridSpec::new(2);
        let s = raster_order(
            g,
            &GroupSizes { total: 4, sizes: vec![1, 1, 1, 1] },
        )
        .unwrap();
        assert_eq!(
            s.groups,
            vec![
                vec![GridPos::new(0, 0)],
                vec![GridPos::new(0, 1)],
                vec![GridPos::new(1, 0)],
                vec![GridPos::new(1, 1)],
            ]
        );
        let s = raster_order(g, &GroupSizes { total: 4, sizes: vec![2, 2] }).unwrap();
        assert_eq!(s.groups[0], vec![GridPos::new(0, 0), GridPos::new(0, 1)]);
        assert_eq!(s.groups[1], vec![GridPos::new(1, 0), GridPos::new(1, 1)]);

        let g4 = GridSpec::new(4);
        let s = raster_order(g4, &GroupSizes { total: 16, sizes: vec![16] }).unwrap();
        assert_eq!(s.groups.len(), 1);
        assert_eq!(s.groups[0], g4.positions());
    }

    #[test]
    fn raster_size_mismatch() {
        let g = GridSpec::new(2);
        assert!(raster_order(g, &GroupSizes { total: 4, sizes: vec![3] }).is_err());
    }

    #[test]
    fn random_order_deterministic() {
        let g = GridSpec::new(4);
        let sizes = cosine_group_sizes(16, 4).unwrap();
        let a = random_order(g, &sizes, 42).unwrap();
        let b = random_order(g, &sizes, 42).unwrap();
        assert_eq!(a, b);
        let c = random_order(g, &sizes, 43).unwrap();
        assert_ne!(a, c);

        let g1 = GridSpec::new(1);
        let s = random_order(g1, &GroupSizes { total: 1, sizes: vec![1] }, 7).unwrap();
        assert_eq!(s.groups, vec![vec![GridPos::new(0, 0)]]);
    }

    #[test]
    fn random_order_first_position_uniform() {
        // χ² goodness-of-fit on the first emitted position over 10⁴ seeds.
        let g = GridSpec::new(16);
        let sizes = GroupSizes { total: 256, sizes: vec![256] };
        let trials = 10_000usize;
        let mut counts = vec![0usize; 256];
        for seed in 0..trials as u64 {
            let s = random_order(g, &sizes, seed).unwrap();
            counts[g.index_of(s.groups[0][0])] += 1;
        }
        let expected = trials as f64 / 256.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // df = 255; critical value at significance 0.001 is ~330.5.
        assert!(chi2 < 330.5, "chi2 = {chi2}");
    }

    #[test]
    fn halton_first_cell() {
        // Oracle: first Halton pair is (1/2, 1/3).
        let g = GridSpec::new(4);
        let sizes = GroupSizes { total: 16, sizes: vec![1; 16] };
        let s = halton_order(g, &sizes).unwrap();
        assert_eq!(s.groups[0][0], GridPos::new(1, 2));
    }

    #[test]
    fn halton_covers_grid() {
        for side in [1usize, 2, 3, 5] {
            let g = GridSpec::new(side);
            let n = g.token_count();
            let sizes = GroupSizes { total: n, sizes: vec![n] };
            let s = halton_order(g, &sizes).unwrap();
            assert!(validate_schedule(&s).valid, "side {side}");
        }
    }

    #[test]
    fn fps_examples() {
        let corners = vec![
            GridPos::new(0, 0),
            GridPos::new(0, 4),
            GridPos::new(4, 0),
            GridPos::new(4, 4),
        ];
        let seeds = vec![GridPos::new(0, 0)];
        let picked = farthest_point_sampling(&corners, &seeds, 1).unwrap();
        assert_eq!(picked, vec![GridPos::new(4, 4)]);

        // Second pick: (0,4) and (4,0) tie at min distance 4; row-major wins.
        let picked = farthest_point_sampling(&corners, &seeds, 2).unwrap();
        assert_eq!(picked, vec![GridPos::new(4, 4), GridPos::new(0, 4)]);

        assert_eq!(farthest_point_sampling(&corners, &seeds, 0).unwrap(), vec![]);
        assert!(farthest_point_sampling(&corners, &seeds, 5).is_err());
    }

    #[test]
    fn lpd_first_token_center() {
        let g = GridSpec::new(4);
        let sizes = GroupSizes { total: 16, sizes: vec![1; 16] };
        let cfg = SchedulerConfig::default();
        let s = locality_aware_order(g, &sizes, &cfg).unwrap();
        assert_eq!(s.groups[0], vec![GridPos::new(2, 2)]);
        assert!(validate_schedule(&s).valid);
    }

    #[test]
    fn lpd_degenerates_to_greedy_tour() {
        // All-singleton sizes with an infinite cutoff: every step picks the
        // global proximity argmax (nearest unselected token to the context).
        let g = GridSpec::new(5);
        let sizes = GroupSizes { total: 25, sizes: vec![1; 25] };
        let cfg = SchedulerConfig {
            near_cutoff: f64::INFINITY,
            ..SchedulerConfig::default()
        };
        let s = locality_aware_order(g, &sizes, &cfg).unwrap();
        assert!(validate_schedule(&s).valid);
        let mut context = vec![s.groups[0][0]];
        for group in s.groups.iter().skip(1) {
            let picked = group[0];
            let d_picked = min_dist2_to_set(picked, &context).unwrap();
            for p in g.positions() {
                if !context.contains(&p) && p != picked {
                    let d = min_dist2_to_set(p, &context).unwrap();
                    assert!(
                        d > d_picked || (d == d_picked && picked < p),
                        "step picked {picked} but {p} is closer"
                    );
                }
            }
            context.push(picked);
        }
    }

    #[test]
    fn validate_detects_duplicates() {
        let g = GridSpec::new(2);
        let s = OrderSchedule {
            grid: g,
            groups: vec![
                vec![GridPos::new(0, 0), GridPos::new(0, 1)],
                vec![GridPos::new(0, 0), GridPos::new(1, 1)],
            ],
        };
        let report = validate_schedule(&s);
        assert!(!report.valid);
        assert_eq!(report.duplicates, vec![GridPos::new(0, 0)]);
        assert_eq!(report.missing, vec![GridPos::new(1, 0)]);
    }

    #[test]
    fn validate_raster_intra_step_distance() {
        let g = GridSpec::new(4);
        let sizes = GroupSizes { total: 16, sizes: vec![4; 4] };
        let s = raster_order(g, &sizes).unwrap();
        let report = validate_schedule(&s);
        assert!(report.valid);
        for st in &report.step_stats {
            assert_eq!(st.min_intra_step_dist, Some(1.0));
        }
    }

    #[test]
    fn schedule_text_round_trip() {
        let g = GridSpec::new(4);
        let sizes = cosine_group_sizes(16, 5).unwrap();
        let cfg = SchedulerConfig::default();
        let s = locality_aware_order(g, &sizes, &cfg).unwrap();
        let meta = ScheduleMeta {
            scheduler: "lpd".into(),
            seed: Some(cfg.seed),
            near_cutoff: Some(cfg.near_cutoff),
            repulsion: Some(cfg.repulsion),
            first_token: Some(cfg.first_token.to_string()),
        };
        let text = write_schedule_text(&s, &meta);
        let (s2, meta2) = read_schedule_text(&text).unwrap();
        assert_eq!(s, s2);
        assert_eq!(meta, meta2);
        // Byte-identical re-serialization.
        assert_eq!(text, write_schedule_text(&s2, &meta2));
    }

    #[test]
    fn schedule_text_rejects_corruption() {
        let g = GridSpec::new(2);
        let s = raster_order(g, &GroupSizes { total: 4, sizes: vec![2, 2] }).unwrap();
        let text = write_schedule_text(&s, &ScheduleMeta::named("raster"));
        let corrupted = text.replace("1,0 1,1", "1,0 zebra");
        assert!(matches!(
            read_schedule_text(&corrupted),
            Err(ScheduleError::Parse { .. })
        ));
    }
}
