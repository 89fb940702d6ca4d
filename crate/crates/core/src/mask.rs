//! Interleaved sequence layout and the training / fused-inference
//! attention masks.
//!
//! The training sequence is [condition] then, per decoding step, that
//! step's position query tokens followed by the same step's ground-truth
//! context tokens. Query tokens of one step are mutually visible but
//! invisible to every other entry; context tokens are visible causally.

use thiserror::Error;

use crate::grid::GridPos;
use crate::schedule::OrderSchedule;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("layout malformed: {0}")]
    Malformed(String),
    #[error("mask parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Condition,
    Context,
    Query,
}

/// One entry of the interleaved training sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqEntry {
    pub kind: TokenKind,
    /// Decoding step index; -1 for condition entries.
    pub step: isize,
    pub pos: Option<GridPos>,
}

/// The interleaved condition/query/context sequence for one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub entries: Vec<SeqEntry>,
    pub cond_len: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices of query entries in sequence order.
    pub fn query_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == TokenKind::Query)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Builds the training layout: condition slots, then per step the query
/// block followed by the context block, both in schedule order.
pub fn build_training_layout(schedule: &OrderSchedule, cond_len: usize) -> SequenceLayout {
    assert!(cond_len >= 1, "cond_len must be at least 1");
    let mut entries = Vec::with_capacity(cond_len + 2 * schedule.grid.token_count());
    for _ in 0..cond_len {
        entries.push(SeqEntry { kind: TokenKind::Condition, step: -1, pos: None });
    }
    for (g, group) in schedule.groups.iter().enumerate() {
        for &p in group {
            entries.push(SeqEntry { kind: TokenKind::Query, step: g as isize, pos: Some(p) });
        }
        for &p in group {
            entries.push(SeqEntry { kind: TokenKind::Context, step: g as isize, pos: Some(p) });
        }
    }
    SequenceLayout { entries, cond_len }
}

/// Row-addressable boolean visibility matrix. Rows are the entries being
/// computed; columns may include a cached prefix, so `cols >= rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        AttentionMask { rows, cols, allowed: vec![false; rows * cols] }
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.allowed[row * self.cols + col] = value;
    }
}

fn check_layout(layout: &SequenceLayout) -> Result<(), MaskError> {
    if layout.cond_len == 0 {
        return Err(MaskError::Malformed("cond_len must be at least 1".into()));
    }
    let mut last_step = -1isize;
    for (i, e) in layout.entries.iter().enumerate() {
        match e.kind {
            TokenKind::Condition => {
                if i >= layout.cond_len {
                    return Err(MaskError::Malformed(format!(
                        "condition entry at index {i} after the condition prefix"
                    )));
                }
                if e.pos.is_some() {
                    return Err(MaskError::Malformed("condition entry carries a pos".into()));
                }
            }
            TokenKind::Context | TokenKind::Query => {
                if i < layout.cond_len {
                    return Err(MaskError::Malformed(format!(
                        "non-condition entry at index {i} inside the condition prefix"
                    )));
                }
                if e.pos.is_none() {
                    return Err(MaskError::Malformed(format!("entry {i} missing a pos")));
                }
                if e.step < 0 {
                    return Err(MaskError::Malformed(format!("entry {i} has negative step")));
                }
                last_step = last_step.max(e.step);
            }
        }
    }
    let _ = last_step;
    Ok(())
}

/// Builds the training attention mask over a layout.
///
/// Row i may attend to column j iff one of:
/// (a) j is condition and j ≤ i (a condition row sees only itself);
/// (b) j is context and j < i;
/// (c) i and j are queries of the same step, when `mutual_visibility`;
/// (d) i = j.
pub fn build_training_mask(
    layout: &SequenceLayout,
    mutual_visibility: bool,
) -> Result<AttentionMask, MaskError> {
    check_layout(layout)?;
    let n = layout.len();
    let mut mask = AttentionMask::new(n, n);
    for i in 0..n {
        let ei = &layout.entries[i];
        for j in 0..n {
            let ej = &layout.entries[j];
            let ok = match (ei.kind, ej.kind) {
                (TokenKind::Condition, _) => i == j,
                (_, TokenKind::Condition) => j < i,
                (_, TokenKind::Context) => j < i || i == j,
                (TokenKind::Query, TokenKind::Query) => {
                    (mutual_visibility && ei.step == ej.step) || i == j
                }
                (TokenKind::Context, TokenKind::Query) => false,
            };
            mask.set(i, j, ok);
        }
    }
    Ok(mask)
}

/// Builds the fused inference mask for one decoding step.
///
/// Rows are `new_context + new_queries` fresh entries; columns are the
/// cache, then the fresh entries in that order. Context rows attend to
/// the whole cache and causally within the context block; query rows
/// attend to the cache, all new context, and (under mutual visibility)
/// all query columns, otherwise only themselves.
pub fn build_fused_inference_mask(
    cache_len: usize,
    new_context: usize,
    new_queries: usize,
    mutual_visibility: bool,
) -> AttentionMask {
    let rows = new_context + new_queries;
    let cols = cache_len + rows;
    let mut mask = AttentionMask::new(rows, cols);
    for i in 0..rows {
        for j in 0..cache_len {
            mask.set(i, j, true);
        }
        if i < new_context {
            // Causal within the freshly encoded block.
            for j in 0..=i {
                mask.set(i, cache_len + j, true);
            }
        } else {
            for j in 0..new_context {
                mask.set(i, cache_len + j, true);
            }
            if mutual_visibility {
                for j in new_context..rows {
                    mask.set(i, cache_len + j, true);
                }
            } else {
                mask.set(i, cache_len + i, true);
            }
        }
    }
    mask
}

/// Serializes a mask with its per-entry role header; one bit-row per line.
pub fn write_mask_text(mask: &AttentionMask, roles: &[String]) -> String {
    let mut out = String::new();
    out.push_str("# lpd mask v1\n");
    out.push_str(&format!("rows={}\ncols={}\n", mask.rows, mask.cols));
    out.push_str(&format!("roles={}\n", roles.join(" ")));
    for i in 0..mask.rows {
        for j in 0..mask.cols {
            out.push(if mask.allowed(i, j) { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

/// Parses the format written by [`write_mask_text`].
pub fn read_mask_text(text: &str) -> Result<(AttentionMask, Vec<String>), MaskError> {
    let mut rows: Option<usize> = None;
    let mut cols: Option<usize> = None;
    let mut roles: Vec<String> = Vec::new();
    let mut bits: Vec<Vec<bool>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let no = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            match k {
                "rows" => {
                    rows = Some(v.parse().map_err(|_| MaskError::Parse {
                        line: no,
                        msg: "bad rows".into(),
                    })?)
                }
                "cols" => {
                    cols = Some(v.parse().map_err(|_| MaskError::Parse {
                        line: no,
                        msg: "bad cols".into(),
                    })?)
                }
                "roles" => roles = v.split_whitespace().map(|s| s.to_string()).collect(),
                other => {
                    return Err(MaskError::Parse {
                        line: no,
                        msg: format!("unknown header key '{other}'"),
                    })
                }
            }
        } else {
            let row: Result<Vec<bool>, MaskError> = line
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(MaskError::Parse { line: no, msg: format!("bad bit '{c}'") }),
                })
                .collect();
            bits.push(row?);
        }
    }
    let rows = rows.ok_or(MaskError::Parse { line: 0, msg: "missing rows header".into() })?;
    let cols = cols.ok_or(MaskError::Parse { line: 0, msg: "missing cols header".into() })?;
    if bits.len() != rows || bits.iter().any(|r| r.len() != cols) {
        return Err(MaskError::Parse { line: 0, msg: "bit rows disagree with header".into() });
    }
    let mut mask = AttentionMask::new(rows, cols);
    for (i, row) in bits.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            mask.set(i, j, b);
        }
    }
    Ok((mask, roles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::schedule::OrderSchedule;

    // The Fig. 4 arrangement: step 0 = {pos 4}, step 1 = {pos 3, pos 5} on a
    // nominal grid, expressed here on a 2x3 grid with cells 0..5 row-major.
    fn fig4_schedule() -> OrderSchedule {
        let grid = GridSpec::new(3);
        OrderSchedule {
            grid,
            groups: vec![
                vec![grid.pos_of(4)],
                vec![grid.pos_of(3), grid.pos_of(5)],
                vec![
                    grid.pos_of(0),
                    grid.pos_of(1),
                    grid.pos_of(2),
                    grid.pos_of(6),
                    grid.pos_of(7),
                    grid.pos_of(8),
                ],
            ],
        }
    }

    #[test]
    fn layout_single_cell() {
        let grid = GridSpec::new(1);
        let s = OrderSchedule { grid, groups: vec![vec![grid.pos_of(0)]] };
        let layout = build_training_layout(&s, 1);
        assert_eq!(layout.len(), 3);
        assert_eq!(layout.entries[0].kind, TokenKind::Condition);
        assert_eq!(layout.entries[1].kind, TokenKind::Query);
        assert_eq!(layout.entries[2].kind, TokenKind::Context);
    }

    #[test]
    fn layout_matches_fig4_prefix() {
        // [Cond, P4, x4, P3, P5, x3, x5, ...]
        let layout = build_training_layout(&fig4_schedule(), 1);
        let grid = GridSpec::new(3);
        let kinds: Vec<(TokenKind, Option<usize>)> = layout
            .entries
            .iter()
            .take(7)
            .map(|e| (e.kind, e.pos.map(|p| grid.index_of(p))))
            .collect();
        assert_eq!(
            kinds,
            vec![
                (TokenKind::Condition, None),
                (TokenKind::Query, Some(4)),
                (TokenKind::Context, Some(4)),
                (TokenKind::Query, Some(3)),
                (TokenKind::Query, Some(5)),
                (TokenKind::Context, Some(3)),
                (TokenKind::Context, Some(5)),
            ]
        );
    }

    #[test]
    fn layout_length_formula() {
        let grid = GridSpec::new(2);
        let s = OrderSchedule {
            grid,
            groups: vec![
                vec![grid.pos_of(0), grid.pos_of(3)],
                vec![grid.pos_of(1), grid.pos_of(2)],
            ],
        };
        assert_eq!(build_training_layout(&s, 1).len(), 1 + 8);
    }

    fn visible(mask: &AttentionMask, row: usize) -> Vec<usize> {
        (0..mask.cols).filter(|&j| mask.allowed(row, j)).collect()
    }

    #[test]
    fn training_mask_fig4_rows() {
        let layout = build_training_layout(&fig4_schedule(), 1);
        let mask = build_training_mask(&layout, true).unwrap();
        // Indices: 0=Cond, 1=P4, 2=x4, 3=P3, 4=P5, 5=x3, 6=x5.
        assert_eq!(visible(&mask, 3), vec![0, 2, 3, 4]); // P3: Cond, x4, P3, P5
        assert_eq!(visible(&mask, 4), vec![0, 2, 3, 4]); // P5: Cond, x4, P3, P5
        assert_eq!(visible(&mask, 5), vec![0, 2, 5]); // x3: Cond, x4, x3
        // No row sees P4 (col 1) except P4 itself.
        for i in 0..mask.rows {
            if i != 1 {
                assert!(!mask.allowed(i, 1), "row {i} sees P4");
            }
        }
        assert!(mask.allowed(1, 1));
    }

    #[test]
    fn training_mask_single_cell() {
        let grid = GridSpec::new(1);
        let s = OrderSchedule { grid, groups: vec![vec![grid.pos_of(0)]] };
        let layout = build_training_layout(&s, 1);
        let mask = build_training_mask(&layout, true).unwrap();
        assert_eq!(visible(&mask, 1), vec![0, 1]); // query: cond + self
        assert_eq!(visible(&mask, 2), vec![0, 2]); // context: cond + self
        assert_eq!(visible(&mask, 0), vec![0]); // condition: self only
    }

    #[test]
    fn training_mask_without_mutual_visibility() {
        let layout = build_training_layout(&fig4_schedule(), 1);
        let mask = build_training_mask(&layout, false).unwrap();
        // P3 sees Cond, x4 and itself only.
        assert_eq!(visible(&mask, 3), vec![0, 2, 3]);
        assert_eq!(visible(&mask, 4), vec![0, 2, 4]);
    }

    #[test]
    fn training_mask_rejects_malformed_layout() {
        let layout = SequenceLayout {
            entries: vec![SeqEntry { kind: TokenKind::Query, step: 0, pos: None }],
            cond_len: 1,
        };
        assert!(build_training_mask(&layout, true).is_err());
    }

    #[test]
    fn fused_mask_first_step() {
        let mask = build_fused_inference_mask(0, 0, 1, true);
        assert_eq!(mask.rows, 1);
        assert_eq!(mask.cols, 1);
        assert!(mask.allowed(0, 0));
    }

    #[test]
    fn fused_mask_fig5_step2() {
        // Cache = cond + step-1 token (len 2); encode {x3, x5}; decode
        // {P1, P2, P6}.
        let mask = build_fused_inference_mask(2, 2, 3, true);
        assert_eq!(mask.rows, 5);
        assert_eq!(mask.cols, 7);
        // x5 row (context index 1) sees cache + x3 + x5.
        assert_eq!(visible(&mask, 1), vec![0, 1, 2, 3]);
        // Each query row sees cache + both contexts + all three queries.
        for q in 2..5 {
            assert_eq!(visible(&mask, q), vec![0, 1, 2, 3, 4, 5, 6]);
        }
    }

    #[test]
    fn fused_mask_final_flush_is_causal() {
        let m = 4;
        let cache = 3;
        let mask = build_fused_inference_mask(cache, m, 0, true);
        for i in 0..m {
            for j in 0..mask.cols {
                let expected = j < cache || j - cache <= i;
                assert_eq!(mask.allowed(i, j), expected, "({i},{j})");
            }
        }
    }

    #[test]
    fn fused_mask_independent_queries() {
        let mask = build_fused_inference_mask(2, 1, 3, false);
        // Query rows see cache + context + self only.
        for q in 1..4 {
            let mut expected: Vec<usize> = vec![0, 1, 2];
            expected.push(2 + q);
            expected.sort();
            expected.dedup();
            assert_eq!(visible(&mask, q), expected);
        }
    }

    #[test]
    fn singleton_context_rows_follow_causal_mask() {
        // With all group sizes 1 and mutual visibility on, the mask
        // restricted to context rows is the standard causal mask over
        // [condition + contexts].
        let grid = GridSpec::new(2);
        let s = OrderSchedule {
            grid,
            groups: (0..4).map(|i| vec![grid.pos_of(i)]).collect(),
        };
        let layout = build_training_layout(&s, 1);
        let mask = build_training_mask(&layout, true).unwrap();
        let non_query: Vec<usize> = layout
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind != TokenKind::Query)
            .map(|(i, _)| i)
            .collect();
        for (a, &i) in non_query.iter().enumerate() {
            for (b, &j) in non_query.iter().enumerate() {
                // Condition row sees only itself; context rows are causal.
                let expected = if a == 0 { b == 0 } else { b <= a };
                assert_eq!(mask.allowed(i, j), expected, "({i},{j})");
            }
        }
    }

    #[test]
    fn mask_text_round_trip() {
        let layout = build_training_layout(&fig4_schedule(), 1);
        let mask = build_training_mask(&layout, true).unwrap();
        let roles: Vec<String> = layout
            .entries
            .iter()
            .map(|e| match e.kind {
                TokenKind::Condition => "cond".to_string(),
                TokenKind::Context => format!("ctx:{}", e.pos.unwrap()),
                TokenKind::Query => format!("qry:{}", e.pos.unwrap()),
            })
            .collect();
        let text = write_mask_text(&mask, &roles);
        let (mask2, roles2) = read_mask_text(&text).unwrap();
        assert_eq!(mask, mask2);
        assert_eq!(roles, roles2);
    }
}
