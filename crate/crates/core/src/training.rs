//! Losses, AdamW with warmup, global-norm clipping and the training loop.
//!
//! The host model and the refiner image encoder are frozen: their outputs for
//! every sample are computed once up front and never enter a tape as
//! trainable leaves.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::build_attention_stack;
use crate::datasets::GroundingSample;
use crate::decoder::{binarize, MaskLogits};
use crate::error::{ensure, Error, Result};
use crate::heads::Heads;
use crate::host::{HostModel, Role};
use crate::image::{downsample_mask_area, resize_mask_nearest, PixelBox};
use crate::nn::{Bound, ParamStore, Tape, Var};
use crate::refiner::{bbox_from_mask, span_layer_embeddings, EMBED_GRID, REFINED_SIZE};
use crate::selector::{selector_loss_var, KeywordSelector, SelectorConfig};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Decoder, refiner, text prompt weights and selector together.
    #[default]
    Joint,
    /// Mask decoder only.
    DecoderOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub dice_smooth: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub mode: TrainMode,
    pub freeze_decoder: bool,
    /// Caps the total step count below `epochs · ⌈n / batch⌉`.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            warmup_ratio: 0.03,
            epochs: 8,
            batch_size: 8,
            grad_clip_norm: 1.0,
            w_bce: 1.0,
            w_dice: 1.0,
            dice_smooth: 1.0,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            mode: TrainMode::Joint,
            freeze_decoder: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("betas.0", self.betas.0),
            ("betas.1", self.betas.1),
            ("adam_eps", self.adam_eps),
            ("warmup_ratio", self.warmup_ratio),
            ("grad_clip_norm", self.grad_clip_norm),
            ("w_bce", self.w_bce),
            ("w_dice", self.w_dice),
            ("dice_smooth", self.dice_smooth),
        ];
        for (name, v) in positive {
            ensure!(v > 0.0 && v.is_finite(), InvalidArgument, "{name} must be positive, got {v}");
        }
        ensure!(self.weight_decay >= 0.0, InvalidArgument, "weight_decay must be non-negative");
        ensure!(self.warmup_ratio < 1.0, InvalidArgument, "warmup_ratio must be below 1");
        ensure!(
            self.betas.0 < 1.0 && self.betas.1 < 1.0,
            InvalidArgument,
            "betas must lie in (0, 1)"
        );
        ensure!(
            self.epochs > 0 && self.batch_size > 0 && self.max_steps != Some(0),
            InvalidArgument,
            "epochs, batch_size and max_steps must be positive"
        );
        ensure!(
            !(self.mode == TrainMode::DecoderOnly && self.freeze_decoder),
            InvalidArgument,
            "decoder-only training with a frozen decoder trains nothing"
        );
        Ok(())
    }

    /// Parses flat `key = value` text (TOML syntax). Missing keys keep defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn total_steps(&self, num_samples: usize) -> usize {
        let full = self.epochs * num_samples.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Linear warmup over `⌈ratio · T⌉` steps, then constant or cosine.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub kind: LrSchedule,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_ratio: f64, kind: LrSchedule) -> Self {
        let warmup_steps = ((warmup_ratio * total_steps as f64).ceil() as usize).clamp(1, total_steps.max(1));
        Self {
            base_lr,
            total_steps,
            warmup_steps,
            kind,
        }
    }

    /// Learning rate at 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.base_lr * (step as f64 / self.warmup_steps as f64);
        }
        match self.kind {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Cosine => {
                let span = (self.total_steps - self.warmup_steps).max(1) as f64;
                let t = (step - self.warmup_steps) as f64 / span;
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam over a list of parameter groups.
#[derive(Clone, Debug)]
pub struct AdamW {
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<ParamStore>,
    v: Vec<ParamStore>,
}

impl AdamW {
    pub fn new(groups: &[&ParamStore], betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            betas,
            eps,
            weight_decay,
            t: 0,
            m: groups.iter().map(|g| g.zeros_like()).collect(),
            v: groups.iter().map(|g| g.zeros_like()).collect(),
        }
    }

    pub fn step(&mut self, groups: &mut [&mut ParamStore], grads: &[ParamStore], lr: f64) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (gi, store) in groups.iter_mut().enumerate() {
            for (name, p) in store.iter_mut() {
                let g = grads[gi].get(name).expect("gradient for every parameter");
                let m = self.m[gi].get_mut(name).unwrap().data_mut();
                let v = self.v[gi].get_mut(name).unwrap().data_mut();
                for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mv = b1 * *mv + (1.0 - b1) * gv;
                    *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                    *pv *= 1.0 - lr * self.weight_decay;
                    *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

pub fn global_norm(grads: &[ParamStore]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter().map(|(_, t)| t.sq_norm()))
        .sum::<f64>()
        .sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [ParamStore], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for (_, t) in g.iter_mut() {
                t.scale_assign(s);
            }
        }
    }
    norm
}

/// Mean per-pixel BCE with logits.
pub fn bce_mask_loss(logits: &Tensor, gt: &Tensor) -> Result<f64> {
    ensure!(logits.shape() == gt.shape(), Contract, "bce shapes {:?} vs {:?}", logits.shape(), gt.shape());
    let total: f64 = logits
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&x, &t)| crate::nn::tape::bce_logit_term(x, t))
        .sum();
    Ok(total / logits.len() as f64)
}

/// `1 − (2·Σ σ(x)·t + s) / (Σ σ(x) + Σ t + s)`.
pub fn dice_loss(logits: &Tensor, gt: &Tensor, smooth: f64) -> Result<f64> {
    ensure!(logits.shape() == gt.shape(), Contract, "dice shapes {:?} vs {:?}", logits.shape(), gt.shape());
    let mut inter = 0.0;
    let mut psum = 0.0;
    for (&x, &t) in logits.data().iter().zip(gt.data()) {
        let p = tensor::sigmoid(x);
        inter += p * t;
        psum += p;
    }
    Ok(1.0 - (2.0 * inter + smooth) / (psum + gt.sum() + smooth))
}

/// Soft DICE coefficient without smoothing.
pub fn soft_dice(logits: &Tensor, gt: &Tensor) -> Result<f64> {
    ensure!(logits.shape() == gt.shape(), Contract, "dice shapes differ");
    let mut inter = 0.0;
    let mut psum = 0.0;
    for (&x, &t) in logits.data().iter().zip(gt.data()) {
        let p = tensor::sigmoid(x);
        inter += p * t;
        psum += p;
    }
    let denom = psum + gt.sum();
    Ok(if denom == 0.0 { 1.0 } else { 2.0 * inter / denom })
}

/// One grounded span with its fixed inputs and targets.
#[derive(Clone, Debug)]
pub struct PreparedSpan {
    pub tokens: std::ops::Range<usize>,
    /// `[C, h', w']`.
    pub stack: Tensor,
    /// `[M, d]`, the span mean of every layer's hidden state.
    pub text_embeds: Tensor,
    /// Ground truth at the stack size and at the refiner size.
    pub gt_stack: Tensor,
    pub gt_refined: Tensor,
}

/// Frozen-model outputs and targets for one sample.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub spans: Vec<PreparedSpan>,
    pub final_hidden: Tensor,
    pub roles: Vec<Role>,
    pub keyword_labels: Vec<bool>,
    /// `[C, 64, 64]`, present when the refiner is in use.
    pub image_embedding: Option<Tensor>,
}

fn mask_tensor(mask: &[bool], (h, w): (usize, usize)) -> Tensor {
    Tensor::from_parts(&[h, w], mask.iter().map(|&b| b as u8 as f64).collect())
}

/// Runs the frozen host (and image encoder, if `with_image`) over one sample.
pub fn prepare_sample(
    host: &dyn HostModel,
    heads: &Heads,
    sample: &GroundingSample,
    base_dir: Option<&Path>,
    with_image: bool,
) -> Result<PreparedSample> {
    let image = sample.image.load(base_dir)?;
    let conv = host.build_conversation(sample.user_text()?, sample.answer()?)?;
    let rec = host.forward_capture(&conv, &image)?;
    let grid = host.spec().grid;
    let target = heads.cfg.stack.target;
    let mut keyword_labels = vec![false; conv.len()];
    let mut spans = Vec::with_capacity(sample.spans.len());
    for s in &sample.spans {
        let tokens = conv.char_span_to_tokens(s.char_start, s.char_end).ok_or_else(|| {
            Error::InvalidArgument(format!("span [{}, {}) of `{}` covers no tokens", s.char_start, s.char_end, sample.id))
        })?;
        for l in &mut keyword_labels[tokens.clone()] {
            *l = true;
        }
        let stack = build_attention_stack(&rec, tokens.clone(), &conv.image_span, grid, &heads.cfg.stack)?;
        let gt = sample.mask(&s.segment_id)?;
        let size = (gt.height, gt.width);
        spans.push(PreparedSpan {
            text_embeds: span_layer_embeddings(&rec, &tokens)?,
            tokens,
            stack: stack.maps,
            gt_stack: mask_tensor(&downsample_mask_area(&gt.data, size, target), target),
            gt_refined: mask_tensor(
                &resize_mask_nearest(&gt.data, size, (REFINED_SIZE, REFINED_SIZE)),
                (REFINED_SIZE, REFINED_SIZE),
            ),
        });
    }
    let image_embedding = if with_image {
        Some(heads.image_encoder.embed(&image, Some(&sample.id))?)
    } else {
        None
    };
    Ok(PreparedSample {
        spans,
        final_hidden: rec.final_hidden,
        roles: conv.roles,
        keyword_labels,
        image_embedding,
    })
}

/// Decoder logits brought to the 64×64 prompt grid.
pub fn prompt_grid_logits(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    if s == [EMBED_GRID, EMBED_GRID] {
        return logits.clone();
    }
    let data = tensor::resize_bilinear(logits.data(), 1, (s[0], s[1]), (EMBED_GRID, EMBED_GRID));
    Tensor::from_parts(&[EMBED_GRID, EMBED_GRID], data)
}

/// Box prompt from decoder logits on the prompt grid, falling back to the whole grid.
pub fn prompt_box(prompt_logits: &Tensor) -> PixelBox {
    let mask = binarize(&MaskLogits {
        grid: prompt_logits.clone(),
        source_span: 0..0,
    });
    bbox_from_mask(&mask).unwrap_or(PixelBox::new(0, 0, EMBED_GRID, EMBED_GRID))
}

/// Which heads receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Active {
    pub decoder: bool,
    pub refiner: bool,
    pub selector: bool,
}

impl Active {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.mode {
            TrainMode::DecoderOnly => Self {
                decoder: true,
                refiner: false,
                selector: false,
            },
            TrainMode::Joint => Self {
                decoder: !cfg.freeze_decoder,
                refiner: true,
                selector: true,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub bce: f64,
    pub dice: f64,
    pub selector_bce: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.bce += o.bce;
        self.dice += o.dice;
        self.selector_bce += o.selector_bce;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        self.bce *= s;
        self.dice *= s;
        self.selector_bce *= s;
        self.total *= s;
    }
}

/// Gradient groups in a fixed order: decoder, refiner, text prompt, selector.
fn group_stores(heads: &Heads) -> [&ParamStore; 4] {
    [heads.decoder.params(), heads.refiner.params(), heads.text.params(), heads.selector.params()]
}

fn active_mask(active: Active) -> [bool; 4] {
    [active.decoder, active.refiner, active.refiner, active.selector]
}

/// Loss and gradients of one sample. Inactive groups get no gradient entry.
pub fn sample_loss_and_grads(
    heads: &Heads,
    prep: &PreparedSample,
    cfg: &TrainConfig,
    active: Active,
) -> Result<(LossParts, Vec<Option<ParamStore>>)> {
    let mut tape = Tape::new();
    let on = active_mask(active);
    let stores = group_stores(heads);
    let bound: Vec<Bound> = stores.iter().zip(on).map(|(s, t)| s.bind(&mut tape, t)).collect();
    let (pd, pr, pt, ps) = (&bound[0], &bound[1], &bound[2], &bound[3]);

    let mut parts = LossParts::default();
    let mut terms: Vec<Var> = Vec::new();
    let n_spans = prep.spans.len().max(1) as f64;
    let train_dec_loss = active.decoder;
    let train_ref = active.refiner;

    let image = match (&prep.image_embedding, train_ref) {
        (Some(e), true) => Some(tape.constant(e.clone())),
        (None, true) => return Err(Error::InvalidArgument("refiner training needs image embeddings".into())),
        _ => None,
    };

    for span in &prep.spans {
        let x = tape.constant(span.stack.clone());
        let out = heads.decoder.forward(&mut tape, pd, x)?;
        let (h, w) = (span.gt_stack.shape()[0], span.gt_stack.shape()[1]);
        let logits = tape.reshape(out, &[h, w]);
        if train_dec_loss {
            let b = tape.bce_with_logits(logits, &span.gt_stack);
            let d = tape.dice_loss(logits, &span.gt_stack, cfg.dice_smooth);
            parts.bce += tape.value(b).item() / n_spans;
            parts.dice += tape.value(d).item() / n_spans;
            let b = tape.scale(b, cfg.w_bce / n_spans);
            let d = tape.scale(d, cfg.w_dice / n_spans);
            terms.push(b);
            terms.push(d);
        }
        if let Some(image) = image {
            // Decoder logits are detached: the refiner sees them as a fixed prompt.
            let grid_logits = prompt_grid_logits(tape.value(logits));
            let pbox = prompt_box(&grid_logits);
            let l = tape.constant(grid_logits);
            let dense = heads.refiner.dense_prompt(&mut tape, pr, l)?;
            let boxes = if heads.cfg.prompts.uses_box() {
                Some(heads.refiner.box_tokens(&mut tape, pr, pbox, (EMBED_GRID, EMBED_GRID))?)
            } else {
                None
            };
            let text = if heads.cfg.prompts.uses_text() {
                let e = tape.constant(span.text_embeds.clone());
                Some(heads.text.token(&mut tape, pt, e)?)
            } else {
                None
            };
            let sparse = heads.refiner.sparse_tokens(&mut tape, pr, boxes, text);
            let refined = heads.refiner.forward(&mut tape, pr, image, dense, sparse)?;
            let b = tape.bce_with_logits(refined, &span.gt_refined);
            let d = tape.dice_loss(refined, &span.gt_refined, cfg.dice_smooth);
            parts.bce += tape.value(b).item() / n_spans;
            parts.dice += tape.value(d).item() / n_spans;
            let b = tape.scale(b, cfg.w_bce / n_spans);
            let d = tape.scale(d, cfg.w_dice / n_spans);
            terms.push(b);
            terms.push(d);
        }
    }
    if active.selector {
        let h = tape.constant(prep.final_hidden.clone());
        let logits = heads.selector.logits(&mut tape, ps, h)?;
        let l = selector_loss_var(&mut tape, logits, &prep.keyword_labels, &prep.roles, &heads.cfg.selector)?;
        parts.selector_bce = tape.value(l).item();
        terms.push(l);
    }
    ensure!(!terms.is_empty(), InvalidArgument, "nothing to train on this sample");
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    parts.total = tape.value(total).item();
    let grads = tape.backward(total);
    let out = bound
        .iter()
        .zip(stores)
        .zip(on)
        .map(|((b, s), t)| t.then(|| b.collect_grads(s, &grads)))
        .collect();
    Ok((parts, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub bce: f64,
    pub dice: f64,
    pub selector_bce: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub logs: Vec<StepLog>,
}

/// Writes `step, lr, bce, dice, selector_bce, total` rows.
pub fn write_csv_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record(["step", "lr", "bce", "dice", "selector_bce", "total"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for l in logs {
        w.write_record([
            l.step.to_string(),
            format!("{:e}", l.lr),
            l.bce.to_string(),
            l.dice.to_string(),
            l.selector_bce.to_string(),
            l.total.to_string(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains `heads` in place on prepared samples.
pub fn fit_prepared(
    heads: &mut Heads,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(!data.is_empty(), InvalidArgument, "training set is empty");
    let active = Active::from_config(cfg);
    let on = active_mask(active);
    let total_steps = cfg.total_steps(data.len());
    let schedule = Schedule::new(cfg.lr, total_steps, cfg.warmup_ratio, cfg.lr_schedule);
    let active_stores: Vec<&ParamStore> = group_stores(heads).into_iter().zip(on).filter(|(_, t)| *t).map(|(s, _)| s).collect();
    let mut opt = AdamW::new(&active_stores, cfg.betas, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(total_steps);
    let mut step = 0;

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step == total_steps {
                break 'epochs;
            }
            step += 1;
            let snapshot: &Heads = heads;
            let results = batch
                .par_iter()
                .map(|&i| sample_loss_and_grads(snapshot, &data[i], cfg, active))
                .collect::<Vec<_>>();
            let mut parts = LossParts::default();
            let mut sums: Vec<ParamStore> = active_stores_of(heads, on).iter().map(|s| s.zeros_like()).collect();
            for r in results {
                let (p, grads) = r?;
                parts.add(&p);
                for (acc, g) in sums.iter_mut().zip(grads.into_iter().flatten()) {
                    for (name, t) in acc.iter_mut() {
                        t.add_assign(g.get(name).unwrap());
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            parts.scale(inv);
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            for g in &mut sums {
                for (_, t) in g.iter_mut() {
                    t.scale_assign(inv);
                }
            }
            let grad_norm = clip_grad_norm(&mut sums, cfg.grad_clip_norm);
            let clipped_norm = global_norm(&sums);
            ensure!(grad_norm.is_finite(), Format, "non-finite gradient at step {step}");
            let lr = schedule.lr(step);
            let mut stores = active_stores_mut(heads, on);
            opt.step(&mut stores, &sums, lr);
            let log = StepLog {
                step,
                lr,
                bce: parts.bce,
                dice: parts.dice,
                selector_bce: parts.selector_bce,
                total: parts.total,
                grad_norm,
                clipped_norm,
            };
            on_step(&log);
            logs.push(log);
        }
    }
    Ok(TrainReport {
        total_steps,
        warmup_steps: schedule.warmup_steps,
        logs,
    })
}

fn active_stores_of(heads: &Heads, on: [bool; 4]) -> Vec<&ParamStore> {
    group_stores(heads).into_iter().zip(on).filter(|(_, t)| *t).map(|(s, _)| s).collect()
}

fn active_stores_mut(heads: &mut Heads, on: [bool; 4]) -> Vec<&mut ParamStore> {
    let Heads {
        decoder,
        refiner,
        text,
        selector,
        ..
    } = heads;
    [decoder.params_mut(), refiner.params_mut(), text.params_mut(), selector.params_mut()]
        .into_iter()
        .zip(on)
        .filter(|(_, t)| *t)
        .map(|(s, _)| s)
        .collect()
}

/// Prepares every sample (in parallel) and trains.
pub fn fit(
    host: &dyn HostModel,
    heads: &mut Heads,
    samples: &[GroundingSample],
    cfg: &TrainConfig,
    base_dir: Option<&Path>,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(!samples.is_empty(), InvalidArgument, "training set is empty");
    let with_image = Active::from_config(cfg).refiner;
    let frozen: &Heads = heads;
    let data = samples
        .par_iter()
        .map(|s| prepare_sample(host, frozen, s, base_dir, with_image))
        .collect::<Result<Vec<_>>>()?;
    fit_prepared(heads, &data, cfg, on_step)
}

/// Mean soft DICE of the decoder over every prepared span.
pub fn decoder_soft_dice(heads: &Heads, data: &[PreparedSample]) -> Result<f64> {
    let scores = data
        .par_iter()
        .flat_map_iter(|p| p.spans.iter())
        .map(|s| {
            let mut tape = Tape::new();
            let b = heads.decoder.params().bind(&mut tape, false);
            let x = tape.constant(s.stack.clone());
            let out = heads.decoder.forward(&mut tape, &b, x)?;
            let logits = tape.value(out).clone().reshape(s.gt_stack.shape())?;
            soft_dice(&logits, &s.gt_stack)
        })
        .collect::<Result<Vec<_>>>()?;
    ensure!(!scores.is_empty(), InvalidArgument, "no spans to score");
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Hidden states with per-token keyword labels, for selector-only training.
#[derive(Clone, Debug)]
pub struct SelectorExample {
    /// `[S, d]`.
    pub hidden: Tensor,
    pub labels: Vec<bool>,
    pub roles: Vec<Role>,
}

/// Full-batch AdamW on the selector alone; returns the loss before each step.
pub fn fit_selector(
    selector: &mut KeywordSelector,
    cfg: &SelectorConfig,
    data: &[SelectorExample],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    ensure!(!data.is_empty(), InvalidArgument, "selector training set is empty");
    let mut opt = AdamW::new(&[selector.params()], (0.9, 0.999), 1e-8, 0.0);
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let mut tape = Tape::new();
        let p = selector.params().bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for ex in data {
            let h = tape.constant(ex.hidden.clone());
            let logits = selector.logits(&mut tape, &p, h)?;
            let l = selector_loss_var(&mut tape, logits, &ex.labels, &ex.roles, cfg)?;
            total = Some(match total {
                Some(t) => tape.add(t, l),
                None => l,
            });
        }
        let total = tape.scale(total.expect("non-empty data"), 1.0 / data.len() as f64);
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(loss);
        let grads = p.collect_grads(selector.params(), &tape.backward(total));
        opt.step(&mut [selector.params_mut()], &[grads], lr);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_values() {
        let ones = Tensor::full(&[8, 8], 1.0);
        assert!(dice_loss(&Tensor::full(&[8, 8], 30.0), &ones, 1.0).unwrap() < 1e-6);
        let d = dice_loss(&Tensor::full(&[8, 8], -30.0), &ones, 1.0).unwrap();
        assert!((d - (1.0 - 1.0 / 65.0)).abs() < 1e-6);
        let zeros = Tensor::zeros(&[8, 8]);
        assert!(dice_loss(&Tensor::full(&[8, 8], -30.0), &zeros, 1.0).unwrap() < 1e-6);
        assert!(dice_loss(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[4]), 1.0).is_err());
    }

    #[test]
    fn bce_values() {
        let gt = Tensor::from_parts(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let b = bce_mask_loss(&Tensor::zeros(&[2, 2]), &gt).unwrap();
        assert!((b - std::f64::consts::LN_2).abs() < 1e-9);
        let perfect = Tensor::from_parts(&[2, 2], vec![30.0, -30.0, 30.0, -30.0]);
        assert!(bce_mask_loss(&perfect, &gt).unwrap() < 1e-6);

        // Direct evaluation of −[t ln σ(x) + (1 − t) ln(1 − σ(x))].
        let x = [0.3, -1.2, 2.5, -0.7, 0.0, 4.0, -3.3, 1.1, 0.9, -0.1, 2.2, -2.2, 0.5, -0.5, 1.7, -4.1];
        let t = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let direct: f64 = x
            .iter()
            .zip(&t)
            .map(|(&x, &t): (&f64, &f64)| {
                let s = 1.0 / (1.0 + (-x).exp());
                -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 16.0;
        let got = bce_mask_loss(&Tensor::from_parts(&[4, 4], x.to_vec()), &Tensor::from_parts(&[4, 4], t.to_vec())).unwrap();
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn tape_losses_match_eager() {
        let x = Tensor::from_parts(&[2, 3], vec![0.2, -1.0, 3.0, 0.0, 0.5, -2.0]);
        let t = Tensor::from_parts(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let b = tape.bce_with_logits(v, &t);
        let d = tape.dice_loss(v, &t, 1.0);
        assert!((tape.value(b).item() - bce_mask_loss(&x, &t).unwrap()).abs() < 1e-15);
        assert!((tape.value(d).item() - dice_loss(&x, &t, 1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn warmup_schedule() {
        let total = 1000;
        let s = Schedule::new(1e-4, total, 0.03, LrSchedule::Constant);
        assert_eq!(s.warmup_steps, 30);
        assert_eq!(s.lr(30), 1e-4);
        assert!((s.lr(1) - 1e-4 / 30.0).abs() < 1e-20);
        assert_eq!(s.lr(500), 1e-4);
        let c = Schedule::new(1e-4, total, 0.03, LrSchedule::Cosine);
        assert_eq!(c.lr(30), 1e-4);
        assert!(c.lr(1000).abs() < 1e-12);
        assert!(c.lr(600) < c.lr(400));
        // ⌈0.03 · 50⌉ = 2.
        assert_eq!(Schedule::new(1e-4, 50, 0.03, LrSchedule::Constant).warmup_steps, 2);
    }

    #[test]
    fn clipping_to_unit_norm() {
        let mut g = ParamStore::new();
        g.insert("a", Tensor::from_parts(&[2], vec![6.0, 0.0]));
        g.insert("b", Tensor::from_parts(&[1], vec![8.0]));
        let mut grads = vec![g];
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 10.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-7);
        let mut small = vec![grads[0].clone()];
        small[0].get_mut("a").unwrap().scale_assign(0.1);
        let before = global_norm(&small);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(global_norm(&small), before);
    }

    #[test]
    fn adamw_first_step() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_parts(&[2], vec![1.0, -2.0]));
        let mut g = ParamStore::new();
        g.insert("w", Tensor::from_parts(&[2], vec![0.5, -0.25]));
        let mut opt = AdamW::new(&[&p], (0.9, 0.999), 1e-8, 0.01);
        opt.step(&mut [&mut p], &[g], 0.1);
        // First step: m̂ = g, v̂ = g², so the update is lr·sign(g) up to eps, after decay.
        let w = p.get("w").unwrap().data();
        let expect0 = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        let expect1 = -2.0 * (1.0 - 0.1 * 0.01) + 0.1 * 0.25 / (0.25 + 1e-8);
        assert!((w[0] - expect0).abs() < 1e-15);
        assert!((w[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::from_toml_str("lr = 0.001\nbatch_size = 4\nbetas = [0.8, 0.99]\nlr_schedule = \"cosine\"\n").unwrap();
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.betas, (0.8, 0.99));
        assert_eq!(cfg.lr_schedule, LrSchedule::Cosine);
        assert_eq!(cfg.weight_decay, 0.01);
        assert!(TrainConfig::from_toml_str("lr = 0.001\nunknown = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("warmup_ratio = 1.5\n").is_err());
        let d = TrainConfig::default();
        assert_eq!(
            (d.lr, d.weight_decay, d.betas, d.warmup_ratio, d.epochs, d.batch_size, d.grad_clip_norm),
            (1e-4, 0.01, (0.9, 0.999), 0.03, 8, 8, 1.0)
        );
    }
}
