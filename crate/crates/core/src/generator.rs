//! Fused-step parallel decoding with KV cache, classifier-free guidance,
//! and zero-shot editing via cache prefill.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::TokenGrid;
use crate::grid::GridPos;
use crate::mask::build_fused_inference_mask;
use crate::model::{
    cfg_combine, forward_step, sample_token, AttentionRecord, KVCache, ModelState, StepAttention,
    TokenInput,
};
use crate::schedule::{cosine_group_sizes, random_order, raster_order, GroupSizes, OrderSchedule};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("schedule grid side {schedule} does not match model side {model}")]
    GridMismatch { schedule: usize, model: usize },
    #[error("class id {class} out of range (num_classes {num_classes})")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("known-cell mask length {len} does not match grid size {expected}")]
    BadKnownMask { len: usize, expected: usize },
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
}

#[derive(Debug, Clone, Copy)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: usize,
    /// 1.0 disables guidance (single branch).
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { temperature: 1.0, top_k: usize::MAX, cfg_scale: 1.0, seed: 0 }
    }
}

/// Bookkeeping for one generation run. Forward passes count every model
/// run (two per step under guidance); decoding steps count the schedule
/// groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GenStats {
    pub decoding_steps: usize,
    pub forward_passes: usize,
    pub per_step_tokens: Vec<usize>,
    pub wall_ms: f64,
}

struct Branch {
    cache: KVCache,
    class: usize,
}

/// Internal engine shared by [`generate`] and [`prefill_and_generate`].
struct DecodeRun<'a> {
    state: &'a ModelState,
    cond: Branch,
    uncond: Option<Branch>,
    stats: GenStats,
    record: Option<AttentionRecord>,
    mutual_visibility: bool,
    /// Sampled-but-not-yet-encoded context from the previous step.
    pending: Vec<(usize, GridPos)>,
    cond_pending: bool,
}

impl<'a> DecodeRun<'a> {
    fn new(
        state: &'a ModelState,
        class: usize,
        sampling: &SamplingParams,
        mutual_visibility: bool,
        record: bool,
    ) -> Self {
        let cfg = &state.config;
        let cond = Branch { cache: KVCache::new(cfg.layers, cfg.embed_dim), class };
        let uncond = (sampling.cfg_scale != 1.0).then(|| Branch {
            cache: KVCache::new(cfg.layers, cfg.embed_dim),
            class: cfg.null_class(),
        });
        DecodeRun {
            state,
            cond,
            uncond,
            stats: GenStats {
                decoding_steps: 0,
                forward_passes: 0,
                per_step_tokens: Vec::new(),
                wall_ms: 0.0,
            },
            record: record.then(AttentionRecord::default),
            mutual_visibility,
            pending: Vec::new(),
            cond_pending: true,
        }
    }

    fn branch_inputs(branch: &Branch, cond_pending: bool, pending: &[(usize, GridPos)], queries: &[GridPos]) -> Vec<TokenInput> {
        let mut inputs = Vec::with_capacity(pending.len() + queries.len() + 1);
        if cond_pending {
            inputs.push(TokenInput::Condition { class: branch.class });
        }
        for &(token, pos) in pending {
            inputs.push(TokenInput::Context { token, pos });
        }
        for &pos in queries {
            inputs.push(TokenInput::Query { pos });
        }
        inputs
    }

    /// Runs one fused step: encodes pending context (and, on the first
    /// step, the condition) and decodes logits for `queries`.
    fn step(&mut self, queries: &[GridPos], sampling: &SamplingParams, rng: &mut ChaCha8Rng, grid: &mut TokenGrid) {
        let n_ctx = self.pending.len() + usize::from(self.cond_pending);
        let mask = build_fused_inference_mask(
            self.cond.cache.len(),
            n_ctx,
            queries.len(),
            self.mutual_visibility,
        );
        let step_index = self.stats.decoding_steps;
        let inputs = Self::branch_inputs(&self.cond, self.cond_pending, &self.pending, queries);
        let mut step_rec = self.record.as_ref().map(|_| StepAttention {
            step: step_index,
            cols: Vec::new(),
            rows: Vec::new(),
        });
        let cond_logits = forward_step(
            self.state,
            &inputs,
            &mask,
            &mut self.cond.cache,
            step_rec.as_mut(),
        );
        self.stats.forward_passes += 1;
        if let (Some(rec), Some(step)) = (self.record.as_mut(), step_rec) {
            rec.steps.push(step);
        }

        let logits_rows: Vec<Vec<f64>> = if let Some(uncond) = self.uncond.as_mut() {
            let u_inputs = Self::branch_inputs(uncond, self.cond_pending, &self.pending, queries);
            let u_logits = forward_step(self.state, &u_inputs, &mask, &mut uncond.cache, None);
            self.stats.forward_passes += 1;
            (0..queries.len())
                .map(|i| {
                    cfg_combine(
                        cond_logits.row(i).as_slice().unwrap(),
                        u_logits.row(i).as_slice().unwrap(),
                        sampling.cfg_scale,
                    )
                })
                .collect()
        } else {
            (0..queries.len()).map(|i| cond_logits.row(i).to_vec()).collect()
        };

        self.pending.clear();
        self.cond_pending = false;
        let top_k = sampling.top_k.min(self.state.config.vocab_size);
        for (row, &pos) in logits_rows.iter().zip(queries) {
            let token = sample_token(row, sampling.temperature, top_k, rng);
            grid.set(pos, token);
            self.pending.push((token, pos));
        }
        self.stats.decoding_steps += 1;
        self.stats.per_step_tokens.push(queries.len());
    }

    /// Encodes any remaining sampled tokens (and the condition, if no
    /// step ran) into the cache. After this, cache length is
    /// 1 + generated-token count.
    fn flush(&mut self) {
        let n_ctx = self.pending.len() + usize::from(self.cond_pending);
        if n_ctx == 0 {
            return;
        }
        let mask = build_fused_inference_mask(self.cond.cache.len(), n_ctx, 0, self.mutual_visibility);
        let inputs = Self::branch_inputs(&self.cond, self.cond_pending, &self.pending, &[]);
        forward_step(self.state, &inputs, &mask, &mut self.cond.cache, None);
        if let Some(uncond) = self.uncond.as_mut() {
            let u_inputs = Self::branch_inputs(uncond, self.cond_pending, &self.pending, &[]);
            forward_step(self.state, &u_inputs, &mask, &mut uncond.cache, None);
        }
        self.pending.clear();
        self.cond_pending = false;
    }
}

fn check_class(state: &ModelState, class: usize) -> Result<(), GenerateError> {
    if class >= state.config.num_classes {
        return Err(GenerateError::ClassOutOfRange {
            class,
            num_classes: state.config.num_classes,
        });
    }
    Ok(())
}

/// Output of a generation run, including the cache for invariant checks.
pub struct GenerateOutcome {
    pub grid: TokenGrid,
    pub stats: GenStats,
    pub record: Option<AttentionRecord>,
    pub cache: KVCache,
}

/// Decodes a full grid along `schedule`: one fused forward pass per step
/// and per guidance branch.
pub fn generate(
    state: &ModelState,
    schedule: &OrderSchedule,
    class_id: usize,
    sampling: &SamplingParams,
    mutual_visibility: bool,
    record_attention: bool,
    flush_at_end: bool,
) -> Result<GenerateOutcome, GenerateError> {
    if schedule.grid.side != state.config.side {
        return Err(GenerateError::GridMismatch {
            schedule: schedule.grid.side,
            model: state.config.side,
        });
    }
    check_class(state, class_id)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut grid = TokenGrid {
        side: state.config.side,
        tokens: vec![0; state.config.side * state.config.side],
        class_id: class_id as u32,
    };
    let mut run = DecodeRun::new(state, class_id, sampling, mutual_visibility, record_attention);
    for group in &schedule.groups {
        run.step(group, sampling, &mut rng, &mut grid);
    }
    if flush_at_end {
        run.flush();
    }
    run.stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(GenerateOutcome { grid, stats: run.stats, record: run.record, cache: run.cond.cache })
}

/// Order policy for the unknown region of an edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOrder {
    Random { steps: usize, seed: u64 },
    Raster { steps: usize },
}

/// Zero-shot editing: the known cells (and the class token) are encoded
/// into the cache in row-major order in one pass, then the unknown cells
/// are generated group by group. Known cells pass through unchanged.
pub fn prefill_and_generate(
    state: &ModelState,
    known: &TokenGrid,
    known_mask: &[bool],
    class_id: usize,
    order: EditOrder,
    sampling: &SamplingParams,
) -> Result<(TokenGrid, GenStats), GenerateError> {
    if known.side != state.config.side {
        return Err(GenerateError::GridMismatch { schedule: known.side, model: state.config.side });
    }
    check_class(state, class_id)?;
    let side = state.config.side;
    let n = side * side;
    if known_mask.len() != n {
        return Err(GenerateError::BadKnownMask { len: known_mask.len(), expected: n });
    }
    let unknown: Vec<GridPos> = (0..n)
        .filter(|&i| !known_mask[i])
        .map(|i| GridPos::new(i / side, i % side))
        .collect();

    let start = Instant::now();
    let mut grid = known.clone();
    grid.class_id = class_id as u32;
    let mut run = DecodeRun::new(state, class_id, sampling, true, false);

    // Prefill pass: class token plus known cells, row-major.
    for i in 0..n {
        if known_mask[i] {
            let pos = GridPos::new(i / side, i % side);
            run.pending.push((known.get(pos), pos));
        }
    }
    run.flush();

    if unknown.is_empty() {
        let mut stats = run.stats;
        stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok((grid, stats));
    }

    // Schedule restricted to the unknown cells.
    let steps_wanted = match order {
        EditOrder::Random { steps, .. } | EditOrder::Raster { steps } => steps,
    };
    let steps = steps_wanted.clamp(1, unknown.len());
    let sizes = cosine_group_sizes(unknown.len(), steps)?;
    let ordered: Vec<GridPos> = match order {
        EditOrder::Raster { .. } => unknown.clone(),
        EditOrder::Random { seed, .. } => {
            // Reuse the full-grid shuffle restricted to unknown cells so the
            // draw is a uniform permutation of them.
            let sizes_full =
                GroupSizes { total: n, sizes: vec![n] };
            let full = random_order(crate::grid::GridSpec::new(side), &sizes_full, seed)?;
            full.flat().into_iter().filter(|p| unknown.contains(p)).collect()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut offset = 0;
    for &sz in &sizes.sizes {
        let group: Vec<GridPos> = ordered[offset..offset + sz].to_vec();
        offset += sz;
        run.step(&group, sampling, &mut rng, &mut grid);
    }
    let mut stats = run.stats;
    stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((grid, stats))
}

/// Convenience: decode with an all-singleton raster schedule.
pub fn sequential_schedule(side: usize) -> OrderSchedule {
    let grid = crate::grid::GridSpec::new(side);
    let n = grid.token_count();
    raster_order(grid, &GroupSizes { total: n, sizes: vec![1; n] }).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::model::{init, test_config};
    use crate::schedule::cosine_group_sizes;

    fn small_state() -> ModelState {
        init(&test_config(), 17).unwrap()
    }

    #[test]
    fn step_count_law() {
        let state = small_state();
        let grid = GridSpec::new(4);
        let sizes = cosine_group_sizes(16, 5).unwrap();
        let schedule = raster_order(grid, &sizes).unwrap();
        let out = generate(&state, &schedule, 0, &SamplingParams::default(), true, false, false).unwrap();
        assert_eq!(out.stats.decoding_steps, 5);
        assert_eq!(out.stats.forward_passes, 5);
        assert_eq!(out.stats.per_step_tokens, sizes.sizes);
    }

    #[test]
    fn cfg_doubles_forward_passes() {
        let state = small_state();
        let schedule = sequential_schedule(4);
        let sampling = SamplingParams { cfg_scale: 2.0, ..SamplingParams::default() };
        let out = generate(&state, &schedule, 1, &sampling, true, false, false).unwrap();
        assert_eq!(out.stats.decoding_steps, 16);
        assert_eq!(out.stats.forward_passes, 32);
    }

    #[test]
    fn cache_length_law_after_flush() {
        let state = small_state();
        let grid = GridSpec::new(4);
        let sizes = cosine_group_sizes(16, 4).unwrap();
        let schedule = raster_order(grid, &sizes).unwrap();
        let out = generate(&state, &schedule, 0, &SamplingParams::default(), true, false, true).unwrap();
        assert_eq!(out.cache.len(), 1 + 16);
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let state = small_state();
        let grid = GridSpec::new(4);
        let sizes = cosine_group_sizes(16, 6).unwrap();
        let schedule = raster_order(grid, &sizes).unwrap();
        let sampling = SamplingParams { top_k: 1, seed: 3, ..SamplingParams::default() };
        let a = generate(&state, &schedule, 0, &sampling, true, false, false).unwrap();
        let b = generate(&state, &schedule, 0, &sampling, true, false, false).unwrap();
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn schedule_model_mismatch_errors() {
        let state = small_state();
        let schedule = sequential_schedule(5);
        assert!(matches!(
            generate(&state, &schedule, 0, &SamplingParams::default(), true, false, false),
            Err(GenerateError::GridMismatch { .. })
        ));
    }

    #[test]
    fn prefill_zero_known_matches_generate_cell_count() {
        let state = small_state();
        let known = TokenGrid { side: 4, tokens: vec![0; 16], class_id: 0 };
        let mask = vec![false; 16];
        let order = EditOrder::Random { steps: 4, seed: 1 };
        let (out, stats) = prefill_and_generate(&state, &known, &mask, 0, order, &SamplingParams::default()).unwrap();
        assert_eq!(out.tokens.len(), 16);
        assert_eq!(stats.per_step_tokens.iter().sum::<usize>(), 16);
    }

    #[test]
    fn prefill_all_but_one_runs_one_step() {
        let state = small_state();
        let known = TokenGrid { side: 4, tokens: vec![1; 16], class_id: 0 };
        let mut mask = vec![true; 16];
        mask[5] = false;
        let order = EditOrder::Random { steps: 8, seed: 1 };
        let (out, stats) = prefill_and_generate(&state, &known, &mask, 0, order, &SamplingParams::default()).unwrap();
        assert_eq!(stats.decoding_steps, 1);
        assert_eq!(stats.per_step_tokens, vec![1]);
        for i in 0..16 {
            if i != 5 {
                assert_eq!(out.tokens[i], 1, "known cell {i} changed");
            }
        }
    }

    #[test]
    fn prefill_all_known_returns_input() {
        let state = small_state();
        let known = TokenGrid { side: 4, tokens: (0..16).map(|i| (i % 8) as u16).collect(), class_id: 1 };
        let mask = vec![true; 16];
        let order = EditOrder::Raster { steps: 1 };
        let (out, stats) = prefill_and_generate(&state, &known, &mask, 1, order, &SamplingParams::default()).unwrap();
        assert_eq!(out.tokens, known.tokens);
        assert_eq!(stats.decoding_steps, 0);
    }

    #[test]
    fn class_edit_changes_only_unknown_region() {
        let state = small_state();
        let base = TokenGrid { side: 4, tokens: (0..16).map(|i| (i % 8) as u16).collect(), class_id: 0 };
        let known_mask: Vec<bool> = (0..16).map(|i| i < 8).collect();
        let order = EditOrder::Random { steps: 3, seed: 2 };
        let (out, _) = prefill_and_generate(&state, &base, &known_mask, 1, order, &SamplingParams::default()).unwrap();
        for i in 0..8 {
            assert_eq!(out.tokens[i], base.tokens[i], "known cell {i} changed");
        }
        assert_eq!(out.class_id, 1);
    }
}
