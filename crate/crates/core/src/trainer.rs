//! Training loop: per-sample random orders with step counts drawn from a
//! menu, condition dropout, AdamW, and a warmup/cosine learning-rate
//! schedule.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::TokenGrid;
use crate::model::{adam_step, loss_and_grads, AdamParams, AdamState, ModelState, TrainItem};
use crate::schedule::{cosine_group_sizes, random_order, ScheduleError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptySet,
    #[error("empty step-count menu")]
    EmptyMenu,
    #[error("sample grid side {sample} does not match model side {model}")]
    GridMismatch { sample: usize, model: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Step counts sampled uniformly per training sequence.
    pub step_count_menu: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Fraction of total optimizer steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub cond_dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_count_menu: vec![4, 8, 12, 16, 20, 32, 64, 256],
            epochs: 50,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_frac: 1.0 / 9.0,
            weight_decay: 0.01,
            cond_dropout_rate: 0.1,
            seed: 0,
        }
    }
}

/// Learning rate at optimizer step `step` of `total`: linear warmup to
/// `base`, then half-cosine decay down to `base / 8`.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let warmup = ((total as f64) * warmup_frac).round() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let floor = base / 8.0;
    let span = (total - warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One row of the training metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub bits_per_token: f64,
    pub lr: f64,
    pub wall_s: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,split,bits_per_token,lr,wall_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.8},{:.3}\n",
            r.epoch, r.split, r.bits_per_token, r.lr, r.wall_s
        ));
    }
    out
}

fn draw_item(
    grid: &TokenGrid,
    menu: &[usize],
    cond_dropout_rate: f64,
    null_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainItem, TrainError> {
    let n = grid.side * grid.side;
    let steps = menu[rng.gen_range(0..menu.len())].min(n);
    let sizes = cosine_group_sizes(n, steps)?;
    let schedule = random_order(crate::grid::GridSpec::new(grid.side), &sizes, rng.gen())?;
    let class = if rng.gen::<f64>() < cond_dropout_rate {
        null_class
    } else {
        grid.class_id as usize
    };
    Ok(TrainItem { grid: grid.clone(), class, schedule })
}

/// Mean validation loss in bits per token, with orders drawn from a
/// fixed seed so the number is comparable across epochs.
pub fn eval_bits_per_token(
    state: &ModelState,
    set: &[TokenGrid],
    menu: &[usize],
    seed: u64,
) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<TrainItem> = set
        .iter()
        .map(|g| draw_item(g, menu, 0.0, state.config.null_class(), &mut rng))
        .collect::<Result<_, _>>()?;
    let (loss, _) = loss_and_grads(state, &items);
    Ok(loss / std::f64::consts::LN_2)
}

/// Trains `state` in place and returns the per-epoch metrics log.
/// Deterministic for a fixed config and initial state.
pub fn train(
    state: &mut ModelState,
    train_set: &[TokenGrid],
    val_set: &[TokenGrid],
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptySet);
    }
    if cfg.step_count_menu.is_empty() {
        return Err(TrainError::EmptyMenu);
    }
    for g in train_set.iter().chain(val_set) {
        if g.side != state.config.side {
            return Err(TrainError::GridMismatch { sample: g.side, model: state.config.side });
        }
    }
    let null_class = state.config.null_class();
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let hp_base = AdamParams { lr: cfg.base_lr, weight_decay: cfg.weight_decay, ..AdamParams::default() };
    let mut opt = AdamState::new(&state.config);
    let mut rows = Vec::new();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut indices: Vec<usize> = (0..train_set.len()).collect();
        use rand::seq::SliceRandom;
        indices.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_queries = 0usize;
        let mut last_lr = 0.0;
        for (b, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let items: Vec<TrainItem> = chunk
                .iter()
                .map(|&i| draw_item(&train_set[i], &cfg.step_count_menu, cfg.cond_dropout_rate, null_class, &mut rng))
                .collect::<Result<_, _>>()?;
            let (loss, mut grads) = loss_and_grads(state, &items);
            let step = epoch * batches_per_epoch + b;
            let lr = lr_at(step, total_steps, cfg.base_lr, cfg.warmup_frac);
            last_lr = lr;
            let hp = AdamParams { lr, ..hp_base };
            adam_step(state, &mut grads, &mut opt, &hp);
            state.train_step += 1;
            let q: usize = items.iter().map(|it| it.grid.tokens.len()).sum();
            epoch_loss += loss * q as f64;
            epoch_queries += q;
        }

        let wall_s = start.elapsed().as_secs_f64();
        rows.push(MetricsRow {
            epoch,
            split: "train".into(),
            bits_per_token: epoch_loss / epoch_queries as f64 / std::f64::consts::LN_2,
            lr: last_lr,
            wall_s,
        });
        if !val_set.is_empty() {
            let bpt = eval_bits_per_token(state, val_set, &cfg.step_count_menu, cfg.seed ^ 0x5eed)?;
            rows.push(MetricsRow {
                epoch,
                split: "val".into(),
                bits_per_token: bpt,
                lr: last_lr,
                wall_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}
