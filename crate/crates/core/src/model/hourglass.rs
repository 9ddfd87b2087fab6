use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, stack_backward,
    stack_forward, BlockCache, BlockSlots, Dropout, LnCache,
};
use super::params::{
    init_params, mat, mat_mut, vector, vector_mut, Init, LayoutBuilder, ParamEntry, Slot,
};
use super::pooling::{
    pool_weighted, pool_weighted_backward, pooling_weights, segment_ranges, upsample,
    upsample_backward,
};
use crate::boundary::{self, BoundaryMask, BoundaryProbs, BoundarySlots, MlpCache, SampleMode};
use crate::bytes_data::{TaskKind, TokenId, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::parallel::stream_seed;

fn default_vocab() -> usize {
    VOCAB_SIZE
}

fn default_temperature() -> f64 {
    1.0
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HourglassConfig {
    /// Byte-level encoder layers.
    pub n_tok: usize,
    /// Layers over pooled segments.
    pub n_lm: usize,
    /// Byte-level layers after upsampling.
    pub n_up: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_temperature")]
    pub boundary_temperature: f64,
    /// Initial bias of the boundary logit.
    #[serde(default)]
    pub boundary_bias_init: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl HourglassConfig {
    /// Small configuration: `d_ff = 4 d`, 16-wide heads.
    pub fn desk(d_model: usize, layers: (usize, usize, usize), max_len: usize) -> Self {
        Self {
            n_tok: layers.0,
            n_lm: layers.1,
            n_up: layers.2,
            d_model,
            d_ff: 4 * d_model,
            n_heads: (d_model / 16).max(1),
            vocab: VOCAB_SIZE,
            max_len,
            dropout: 0.0,
            boundary_temperature: 1.0,
            boundary_bias_init: 0.0,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_tok == 0 || self.n_lm == 0 || self.n_up == 0 {
            return err(format!(
                "layer counts must be >= 1, got ({}, {}, {})",
                self.n_tok, self.n_lm, self.n_up
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab != VOCAB_SIZE {
            return err(format!("vocab must be {VOCAB_SIZE}, got {}", self.vocab));
        }
        if self.max_len == 0 || self.d_ff == 0 {
            return err("max_len and d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.boundary_temperature.is_nan() || self.boundary_temperature <= 0.0 {
            return err(format!(
                "boundary temperature {} must be positive",
                self.boundary_temperature
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPooling {
    #[default]
    MeanOverBytes,
    MeanOverSegments,
}

/// Task head stacked on the final byte states (or on middle-block segment
/// outputs for `MeanOverSegments` classification).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: TaskKind,
    pub n_classes: usize,
    #[serde(default)]
    pub pooling: HeadPooling,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "task head needs >= 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.kind == TaskKind::ByteTagging && self.pooling != HeadPooling::MeanOverBytes {
            return Err(Error::Config("byte tagging does not pool".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BoundaryPath {
    /// Forward uses hard 0/1 boundaries; backward is straight-through.
    #[default]
    Hard,
    /// Forward uses the soft relaxation wherever a boundary value enters the
    /// computation (pooling weights and `k`); segment structure stays hard.
    Soft,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: SampleMode,
    pub path: BoundaryPath,
    pub seed: u64,
    /// Enables dropout.
    pub train: bool,
    /// Replaces sampled decisions (the final boundary is still forced).
    pub mask_override: Option<&'a [bool]>,
}

impl ForwardOptions<'static> {
    pub fn deterministic() -> Self {
        Self {
            mode: SampleMode::Deterministic,
            path: BoundaryPath::Hard,
            seed: 0,
            train: false,
            mask_override: None,
        }
    }

    pub fn stochastic(seed: u64) -> Self {
        Self {
            mode: SampleMode::Stochastic,
            seed,
            ..Self::deterministic()
        }
    }
}

impl<'a> ForwardOptions<'a> {
    pub fn soft_path(mut self) -> Self {
        self.path = BoundaryPath::Soft;
        self
    }

    pub fn training(mut self) -> Self {
        self.train = true;
        self
    }

    pub fn with_mask<'b>(self, mask: &'b [bool]) -> ForwardOptions<'b> {
        ForwardOptions {
            mask_override: Some(mask),
            mode: self.mode,
            path: self.path,
            seed: self.seed,
            train: self.train,
        }
    }
}

#[derive(Clone, Debug)]
struct ModelSlots {
    tok_emb: Slot,
    pos_emb: Slot,
    enc: Vec<BlockSlots>,
    boundary: BoundarySlots,
    mid: Vec<BlockSlots>,
    null: Slot,
    up: Vec<BlockSlots>,
    lnf_g: Slot,
    lnf_b: Slot,
    unembed_w: Slot,
    unembed_b: Slot,
    head: Option<(Slot, Slot)>,
}

impl ModelSlots {
    fn build(cfg: &HourglassConfig, head: Option<&HeadConfig>) -> (Self, Vec<ParamEntry>) {
        let (d, ff, std) = (cfg.d_model, cfg.d_ff, cfg.init_std);
        let mut b = LayoutBuilder::default();
        let tok_emb = b.matrix("tok_emb", cfg.vocab, d, Init::Normal(std));
        let pos_emb = b.matrix("pos_emb", cfg.max_len, d, Init::Normal(std));
        let enc = (0..cfg.n_tok)
            .map(|i| BlockSlots::register(&mut b, &format!("enc.{i}"), d, ff, std))
            .collect();
        let boundary = BoundarySlots::register(&mut b, d, std, cfg.boundary_bias_init);
        let mid = (0..cfg.n_lm)
            .map(|i| BlockSlots::register(&mut b, &format!("mid.{i}"), d, ff, std))
            .collect();
        let null = b.vector("null_segment", d, Init::Zeros);
        let up = (0..cfg.n_up)
            .map(|i| BlockSlots::register(&mut b, &format!("up.{i}"), d, ff, std))
            .collect();
        let lnf_g = b.vector("ln_f.g", d, Init::Ones);
        let lnf_b = b.vector("ln_f.b", d, Init::Zeros);
        let unembed_w = b.matrix("unembed.w", d, cfg.vocab, Init::Normal(std));
        let unembed_b = b.vector("unembed.b", cfg.vocab, Init::Zeros);
        let head = head.map(|h| {
            (
                b.matrix("head.w", d, h.n_classes, Init::Normal(std)),
                b.vector("head.b", h.n_classes, Init::Zeros),
            )
        });
        let slots = Self {
            tok_emb,
            pos_emb,
            enc,
            boundary,
            mid,
            null,
            up,
            lnf_g,
            lnf_b,
            unembed_w,
            unembed_b,
            head,
        };
        (slots, b.finish())
    }
}

/// Everything a forward pass produced, including the caches the backward
/// pass reads.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub ids: Vec<TokenId>,
    /// `[n x vocab]`; row `t` scores token `t + 1`.
    pub logits: Array2<f64>,
    pub mask: BoundaryMask,
    pub byte_hidden: Array2<f64>,
    /// Pooled segment vectors fed to the middle block.
    pub segment_hidden: Array2<f64>,
    pub segment_out: Array2<f64>,
    /// Final byte-level states after the output layer norm.
    pub final_states: Array2<f64>,
    pub segments: Vec<Range<usize>>,
    pub boundary_logits: Vec<f64>,
    path: BoundaryPath,
    enc_caches: Vec<BlockCache>,
    bp_cache: MlpCache,
    weights: Vec<f64>,
    mid_caches: Vec<BlockCache>,
    up_caches: Vec<BlockCache>,
    lnf_cache: LnCache,
}

impl ForwardOutput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `k` as it enters the boundary loss for this forward path.
    pub fn k_value(&self) -> f64 {
        match self.path {
            BoundaryPath::Hard => self.mask.k() as f64,
            BoundaryPath::Soft => self.mask.k_soft(),
        }
    }

    pub fn path(&self) -> BoundaryPath {
        self.path
    }
}

/// Upstream gradients for [`Hourglass::backward`].
#[derive(Clone, Debug, Default)]
pub struct BackwardSeeds {
    pub d_logits: Option<Array2<f64>>,
    pub d_states: Option<Array2<f64>>,
    pub d_segment_out: Option<Array2<f64>>,
    /// `dL/dk` of the boundary loss.
    pub d_k: f64,
}

#[derive(Clone, Debug)]
pub struct Hourglass {
    cfg: HourglassConfig,
    head: Option<HeadConfig>,
    slots: ModelSlots,
    entries: Vec<ParamEntry>,
    params: Vec<f64>,
}

impl Hourglass {
    pub fn new(cfg: HourglassConfig, head: Option<HeadConfig>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if let Some(h) = &head {
            h.validate()?;
        }
        let (slots, entries) = ModelSlots::build(&cfg, head.as_ref());
        let params = init_params(&entries, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            cfg,
            head,
            slots,
            entries,
            params,
        })
    }

    pub fn from_params(
        cfg: HourglassConfig,
        head: Option<HeadConfig>,
        params: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(h) = &head {
            h.validate()?;
        }
        let (slots, entries) = ModelSlots::build(&cfg, head.as_ref());
        let expected = entries.iter().map(|e| e.slot.len()).sum::<usize>();
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameters for a layout of {expected}",
                params.len()
            )));
        }
        Ok(Self {
            cfg,
            head,
            slots,
            entries,
            params,
        })
    }

    /// Same backbone weights with a freshly initialized task head.
    pub fn with_head(&self, head: HeadConfig, seed: u64) -> Result<Self> {
        let mut fresh = Self::new(self.cfg.clone(), Some(head), seed)?;
        let backbone = self.slots.unembed_b.range().end;
        fresh.params[..backbone].copy_from_slice(&self.params[..backbone]);
        Ok(fresh)
    }

    /// Drops the task head, keeping the backbone.
    pub fn backbone(&self) -> Self {
        let end = self.slots.unembed_b.range().end;
        Self::from_params(self.cfg.clone(), None, self.params[..end].to_vec())
            .expect("backbone layout")
    }

    /// Rebuilds the model with another `max_len` and head. Parameters are
    /// copied by name over the overlapping rows; anything new (extra position
    /// rows, a different head) is freshly initialized from `seed`.
    pub fn resized(&self, max_len: usize, head: Option<HeadConfig>, seed: u64) -> Result<Self> {
        let cfg = HourglassConfig {
            max_len,
            ..self.cfg.clone()
        };
        let mut fresh = Self::new(cfg, head, seed)?;
        for new in &fresh.entries.clone() {
            let Some(old) = self.entries.iter().find(|e| e.name == new.name) else {
                continue;
            };
            let head_changed = new.name.starts_with("head.") && self.head != fresh.head;
            if head_changed || old.slot.cols != new.slot.cols {
                continue;
            }
            let rows = old.slot.rows.min(new.slot.rows);
            let n = rows * new.slot.cols;
            fresh.params[new.slot.offset..new.slot.offset + n]
                .copy_from_slice(&self.params[old.slot.offset..old.slot.offset + n]);
        }
        Ok(fresh)
    }

    pub fn config(&self) -> &HourglassConfig {
        &self.cfg
    }

    pub fn head(&self) -> Option<&HeadConfig> {
        self.head.as_ref()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of the boundary predictor's parameters.
    pub fn boundary_param_range(&self) -> Range<usize> {
        self.slots.boundary.w1.offset..self.slots.boundary.b2.range().end
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("forward over an empty chunk"));
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence of {} exceeds max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId]) -> Array2<f64> {
        let tok = mat(&self.params, self.slots.tok_emb);
        let pos = mat(&self.params, self.slots.pos_emb);
        let mut x = Array2::zeros((ids.len(), self.cfg.d_model));
        for (t, (mut row, &id)) in x.rows_mut().into_iter().zip(ids).enumerate() {
            row.assign(&tok.row(id as usize));
            row += &pos.row(t);
        }
        x
    }

    /// Embeds `ids` and applies the causal byte-level encoder.
    pub fn encode_stage(&self, ids: &[TokenId]) -> Result<Array2<f64>> {
        self.check_ids(ids)?;
        let (h, _) = stack_forward::<ChaCha8Rng>(
            self.embed(ids),
            &self.params,
            &self.slots.enc,
            self.cfg.n_heads,
            None,
        );
        Ok(h)
    }

    pub fn predict_probs(&self, hidden: ArrayView2<f64>) -> Result<BoundaryProbs> {
        boundary::predict_probs(hidden, &self.params, &self.slots.boundary)
    }

    /// Causal transformer over pooled segment vectors.
    pub fn middle_forward(&self, segments: ArrayView2<f64>) -> Result<Array2<f64>> {
        if segments.nrows() == 0 {
            return Err(Error::Empty("middle block needs at least one segment"));
        }
        if segments.ncols() != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "segment width {} != d_model {}",
                segments.ncols(),
                self.cfg.d_model
            )));
        }
        let (y, _) = stack_forward::<ChaCha8Rng>(
            segments.to_owned(),
            &self.params,
            &self.slots.mid,
            self.cfg.n_heads,
            None,
        );
        Ok(y)
    }

    /// Shift-by-one duplication of segment outputs plus the byte skip path.
    pub fn upsample(
        &self,
        segment_out: ArrayView2<f64>,
        mask: &BoundaryMask,
        byte_hidden: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let segments = segment_ranges(&mask.hard[..mask.valid_len])?;
        if segments.len() != segment_out.nrows() || byte_hidden.nrows() != mask.valid_len {
            return Err(Error::Shape(
                "upsample inputs disagree on segment or position counts".into(),
            ));
        }
        Ok(upsample(
            segment_out,
            vector(&self.params, self.slots.null),
            &segments,
            byte_hidden,
        ))
    }

    pub fn forward(&self, ids: &[TokenId], opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        self.check_ids(ids)?;
        let n = ids.len();
        let heads = self.cfg.n_heads;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(stream_seed(opts.seed, 1));
        let mut dropout = Dropout {
            p: self.cfg.dropout,
            rng: &mut drop_rng,
        };
        let use_dropout = opts.train && self.cfg.dropout > 0.0;
        macro_rules! drop_opt {
            () => {
                if use_dropout {
                    Some(&mut dropout)
                } else {
                    None
                }
            };
        }

        let (byte_hidden, enc_caches) = stack_forward(
            self.embed(ids),
            &self.params,
            &self.slots.enc,
            heads,
            drop_opt!(),
        );
        let (boundary_logits, bp_cache) =
            boundary::boundary_logits(byte_hidden.view(), &self.params, &self.slots.boundary)?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut mask = boundary::sample_from_logits(
            &boundary_logits,
            n,
            self.cfg.boundary_temperature,
            opts.mode,
            &mut noise_rng,
        );
        if let Some(forced) = opts.mask_override {
            if forced.len() != n {
                return Err(Error::Shape(format!(
                    "mask override of {} for {n} positions",
                    forced.len()
                )));
            }
            mask.hard.copy_from_slice(forced);
        }
        mask.force_final();

        let segments = segment_ranges(&mask.hard)?;
        let soft = opts.path == BoundaryPath::Soft;
        let values: Vec<f64> = (0..n).map(|t| mask.value(t, soft)).collect();
        let weights = pooling_weights(&values, &segments);
        let segment_hidden = pool_weighted(byte_hidden.view(), &segments, &weights);
        let (segment_out, mid_caches) = stack_forward(
            segment_hidden.clone(),
            &self.params,
            &self.slots.mid,
            heads,
            drop_opt!(),
        );
        let up_input = upsample(
            segment_out.view(),
            vector(&self.params, self.slots.null),
            &segments,
            byte_hidden.view(),
        );
        let (z, up_caches) =
            stack_forward(up_input, &self.params, &self.slots.up, heads, drop_opt!());
        let (final_states, lnf_cache) = layer_norm_forward(
            z.view(),
            vector(&self.params, self.slots.lnf_g),
            vector(&self.params, self.slots.lnf_b),
        );
        let logits = linear_forward(
            final_states.view(),
            mat(&self.params, self.slots.unembed_w),
            vector(&self.params, self.slots.unembed_b),
        );
        Ok(ForwardOutput {
            ids: ids.to_vec(),
            logits,
            mask,
            byte_hidden,
            segment_hidden,
            segment_out,
            final_states,
            segments,
            boundary_logits,
            path: opts.path,
            enc_caches,
            bp_cache,
            weights,
            mid_caches,
            up_caches,
            lnf_cache,
        })
    }

    /// Accumulates parameter gradients of the seeded loss into `grads`.
    pub fn backward(&self, out: &ForwardOutput, seeds: &BackwardSeeds, grads: &mut [f64]) {
        let p = &self.params;
        let s = &self.slots;
        let heads = self.cfg.n_heads;
        let n = out.len();
        let d = self.cfg.d_model;

        let mut d_states = seeds
            .d_states
            .clone()
            .unwrap_or_else(|| Array2::zeros((n, d)));
        if let Some(dl) = &seeds.d_logits {
            d_states += &linear_backward(
                out.final_states.view(),
                p,
                s.unembed_w,
                s.unembed_b,
                dl.view(),
                grads,
            );
        }
        let dz = layer_norm_backward(d_states.view(), &out.lnf_cache, p, s.lnf_g, s.lnf_b, grads);
        let du = stack_backward(dz, &out.up_caches, p, &s.up, heads, grads);

        let (mut d_seg_out, d_null) = upsample_backward(du.view(), &out.segments);
        vector_mut(grads, s.null).scaled_add(1.0, &d_null);
        if let Some(extra) = &seeds.d_segment_out {
            d_seg_out += extra;
        }
        let d_seg_in = stack_backward(d_seg_out, &out.mid_caches, p, &s.mid, heads, grads);

        let (d_pool_h, d_values) = pool_weighted_backward(
            d_seg_in.view(),
            out.byte_hidden.view(),
            out.segment_hidden.view(),
            &out.segments,
            &out.weights,
        );
        let d_b: Vec<f64> = d_values.iter().map(|v| v + seeds.d_k).collect();
        let mut dh = du;
        dh += &d_pool_h;
        let d_logit = out.mask.backward(&d_b);
        dh += &boundary::boundary_backward(
            out.byte_hidden.view(),
            &out.bp_cache,
            &d_logit,
            p,
            &s.boundary,
            grads,
        );

        let dx = stack_backward(dh, &out.enc_caches, p, &s.enc, heads, grads);
        {
            let mut tok = mat_mut(grads, s.tok_emb);
            for (row, &id) in dx.rows().into_iter().zip(&out.ids) {
                tok.row_mut(id as usize).scaled_add(1.0, &row);
            }
        }
        let mut pos = mat_mut(grads, s.pos_emb);
        pos.slice_mut(ndarray::s![..n, ..]).scaled_add(1.0, &dx);
    }

    /// Task-head logits: `[1 x C]` for classification, `[n x C]` for tagging.
    pub fn head_logits(&self, out: &ForwardOutput) -> Result<Array2<f64>> {
        let (head, (w, b)) = self.head_parts()?;
        let input = self.head_input(head, out);
        Ok(linear_forward(
            input.view(),
            mat(&self.params, w),
            vector(&self.params, b),
        ))
    }

    fn head_parts(&self) -> Result<(&HeadConfig, (Slot, Slot))> {
        match (&self.head, self.slots.head) {
            (Some(h), Some(slots)) => Ok((h, slots)),
            _ => Err(Error::Config("model has no task head".into())),
        }
    }

    fn head_input(&self, head: &HeadConfig, out: &ForwardOutput) -> Array2<f64> {
        match (head.kind, head.pooling) {
            (TaskKind::ByteTagging, _) => out.final_states.clone(),
            (TaskKind::SequenceClassification, HeadPooling::MeanOverBytes) => out
                .final_states
                .mean_axis(Axis(0))
                .expect("non-empty")
                .insert_axis(Axis(0)),
            (TaskKind::SequenceClassification, HeadPooling::MeanOverSegments) => out
                .segment_out
                .mean_axis(Axis(0))
                .expect("non-empty")
                .insert_axis(Axis(0)),
        }
    }

    /// Backpropagates `d_head_logits` through the head, accumulating head
    /// gradients, and returns the seeds for [`Hourglass::backward`].
    pub fn head_backward(
        &self,
        out: &ForwardOutput,
        d_head_logits: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Result<BackwardSeeds> {
        let (head, (w, b)) = self.head_parts()?;
        let input = self.head_input(head, out);
        let d_in = linear_backward(input.view(), &self.params, w, b, d_head_logits, grads);
        let mut seeds = BackwardSeeds::default();
        match (head.kind, head.pooling) {
            (TaskKind::ByteTagging, _) => seeds.d_states = Some(d_in),
            (TaskKind::SequenceClassification, HeadPooling::MeanOverBytes) => {
                let row: Array1<f64> = d_in.row(0).to_owned() / out.len() as f64;
                seeds.d_states = Some(
                    row.broadcast((out.len(), self.cfg.d_model))
                        .expect("broadcast")
                        .to_owned(),
                );
            }
            (TaskKind::SequenceClassification, HeadPooling::MeanOverSegments) => {
                let m = out.segments.len();
                let row: Array1<f64> = d_in.row(0).to_owned() / m as f64;
                seeds.d_segment_out = Some(
                    row.broadcast((m, self.cfg.d_model))
                        .expect("broadcast")
                        .to_owned(),
                );
            }
        }
        Ok(seeds)
    }
}
