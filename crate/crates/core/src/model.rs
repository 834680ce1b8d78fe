//! Toy mixed-modality decoder.
//!
//! Each layer is a pre-norm residual block: multi-head attention followed by
//! an FFN. Visual tokens come first in the sequence, text tokens after. The
//! pruning knobs in [`PruneConfig`] change what each layer computes:
//!
//! * visual queries attend only to visual keys inside the neighbor window;
//! * text queries attend to every visual key and to text keys (causally
//!   among text when `causal_text` is set);
//! * heads outside a layer's kept set produce zero for visual query rows;
//! * visual rows use only the kept FFN neurons;
//! * in text-only layers visual rows pass through untouched and text rows
//!   attend to text keys/values only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::CALIBRATION_TEXT_TOKENS;
use crate::layout::TokenLayout;
use crate::pruning::PruneConfig;
use crate::tensor::{masked_softmax, matmul, rms_normalize, silu, AdditiveMask, Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `act(act(x W1) W2)`, or `act(x W1) W2` without the outer activation.
    #[default]
    Plain,
    /// `(act(x Wg) * (x W1)) W2`, the LLaMA-family layout with three matrices.
    Gated,
}

impl FfnKind {
    /// Number of `d x d'` sized projections.
    pub fn n_projections(self) -> u64 {
        match self {
            FfnKind::Plain => 2,
            FfnKind::Gated => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub layout: TokenLayout,
    /// Causal masking among text keys for text queries.
    pub causal_text: bool,
    /// Intersect the visual window with a causal mask.
    pub causal_visual: bool,
    pub ffn_kind: FfnKind,
    /// Apply the activation after `W2` as well (plain FFN only).
    pub outer_activation: bool,
}

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, d_ffn: usize, layout: TokenLayout) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ffn,
            layout,
            causal_text: true,
            causal_visual: false,
            ffn_kind: FfnKind::Plain,
            outer_activation: true,
        }
    }

    /// LLaVA-1.5-7B language backbone (Vicuna-7B) with a 24x24 visual grid.
    pub fn llava_7b() -> Self {
        Self::llama_like(32, 4096, 32, 11008)
    }

    /// LLaVA-1.5-13B language backbone (Vicuna-13B) with a 24x24 visual grid.
    pub fn llava_13b() -> Self {
        Self::llama_like(40, 5120, 40, 13824)
    }

    fn llama_like(n_layers: usize, d_model: usize, n_heads: usize, d_ffn: usize) -> Self {
        let layout = TokenLayout {
            grid_width: 24,
            grid_height: 24,
            n_text: CALIBRATION_TEXT_TOKENS,
        };
        Self {
            ffn_kind: FfnKind::Gated,
            outer_activation: false,
            ..Self::new(n_layers, d_model, n_heads, d_ffn, layout)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(Error::InvalidModelConfig(
                "n_layers, d_model, n_heads and d_ffn must all be >= 1".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidModelConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        self.layout.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_tokens(&self) -> usize {
        self.layout.n_tokens()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = f64> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub w1: Matrix<T>,
    /// Present only for [`FfnKind::Gated`].
    pub w_gate: Option<Matrix<T>>,
    pub w2: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T = f64> {
    pub layers: Vec<LayerWeights<T>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w1: l.w1.cast(),
                    w_gate: l.w_gate.as_ref().map(Matrix::cast),
                    w2: l.w2.cast(),
                })
                .collect(),
        }
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        let f = config.d_ffn;
        let bad = || Error::InvalidModelConfig("weights do not match model config".into());
        if self.layers.len() != config.n_layers {
            return Err(bad());
        }
        for l in &self.layers {
            let square = [&l.wq, &l.wk, &l.wv, &l.wo].iter().all(|m| m.shape() == (d, d));
            let gate_ok = match config.ffn_kind {
                FfnKind::Plain => l.w_gate.is_none(),
                FfnKind::Gated => l.w_gate.as_ref().is_some_and(|g| g.shape() == (d, f)),
            };
            if !(square && gate_ok && l.w1.shape() == (d, f) && l.w2.shape() == (f, d)) {
                return Err(bad());
            }
        }
        Ok(())
    }
}

/// Seeded weights, each entry uniform in `[-sqrt(3), sqrt(3)] / sqrt(d_model)`
/// (unit variance before scaling).
pub fn init_weights<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 3f64.sqrt();
    let scale = 1.0 / (config.d_model as f64).sqrt();
    let mut draw = |rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(-bound..=bound) * scale))
    };
    let (d, f) = (config.d_model, config.d_ffn);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            wq: draw(d, d),
            wk: draw(d, d),
            wv: draw(d, d),
            wo: draw(d, d),
            w1: draw(d, f),
            w_gate: (config.ffn_kind == FfnKind::Gated).then(|| draw(d, f)),
            w2: draw(f, d),
        })
        .collect();
    Ok(ModelWeights { layers })
}

/// Attention captured for one head of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    /// `(query token) x (key token)` weights over the whole sequence.
    /// Blocked keys, and rows that were not computed, hold exactly 0.
    pub weights: Matrix<f64>,
    /// Per-token head output before the output projection, `n_tokens x head_dim`.
    pub outputs: Matrix<f64>,
    /// Which query rows were computed by this head in this layer.
    pub active_rows: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub heads: Vec<HeadRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T = f64> {
    pub hidden: Matrix<T>,
    pub attention_records: Option<Vec<AttentionRecord>>,
}

struct LayerPlan {
    visual_active: bool,
    kept_heads: Vec<bool>,
    kept_neurons: Vec<usize>,
}

/// Run the pruned forward pass on `input` (`n_tokens x d_model`).
pub fn forward<T: Real>(
    config: &ModelConfig,
    weights: &ModelWeights<T>,
    input: &Matrix<T>,
    prune: &PruneConfig,
    capture: bool,
) -> Result<ForwardOutput<T>> {
    config.validate()?;
    weights.check(config)?;
    prune.validate(config)?;
    let n = config.n_tokens();
    if input.shape() != (n, config.d_model) {
        return Err(Error::DimensionMismatch {
            op: "forward",
            left: input.shape(),
            right: (n, config.d_model),
        });
    }

    let layout = &config.layout;
    let nv = layout.n_visual();
    let visual_mask = if nv > 0 {
        Some(AdditiveMask::from_fn(nv, nv, |i, j| {
            layout.distance_unchecked(prune.metric, i, j) <= prune.radius
                && (!config.causal_visual || j <= i)
        })?)
    } else {
        None
    };
    let text_mask_full = text_mask(config, true)?;
    let text_mask_only = text_mask(config, false)?;

    let mut x = input.clone();
    let mut records = capture.then(Vec::new);
    for (layer, w) in weights.layers.iter().enumerate() {
        let plan = LayerPlan {
            visual_active: prune.visual_active(layer),
            kept_heads: (0..config.n_heads).map(|h| prune.is_head_kept(layer, h)).collect(),
            kept_neurons: prune.kept_neurons(layer, config.d_ffn),
        };
        let (next, heads) = if plan.visual_active {
            visual_layer(config, w, &x, &plan, visual_mask.as_ref(), &text_mask_full, capture)?
        } else {
            text_only_layer(config, w, &x, &text_mask_only, capture)?
        };
        x = next;
        if let Some(recs) = records.as_mut() {
            recs.push(AttentionRecord { layer, heads });
        }
    }
    Ok(ForwardOutput {
        hidden: x,
        attention_records: records,
    })
}

/// Mask for text queries: all visual keys (when `with_visual`) then text keys.
fn text_mask(config: &ModelConfig, with_visual: bool) -> Result<AdditiveMask> {
    let nv = if with_visual { config.layout.n_visual() } else { 0 };
    let nt = config.layout.n_text;
    AdditiveMask::from_fn(nt, nv + nt, |i, j| j < nv || !config.causal_text || j - nv <= i)
}

struct Projected<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
}

fn project<T: Real>(w: &LayerWeights<T>, normed: &Matrix<T>) -> Result<Projected<T>> {
    Ok(Projected {
        q: matmul(normed, &w.wq)?,
        k: matmul(normed, &w.wk)?,
        v: matmul(normed, &w.wv)?,
    })
}

/// `softmax(q k^T * scale + mask) v`, returning weights and outputs.
fn attend<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, mask: &AdditiveMask) -> Result<(Matrix<T>, Matrix<T>)> {
    let scale = T::one() / T::from_f64(q.cols() as f64).sqrt();
    let scores = matmul(q, &k.transpose())?.scale(scale);
    let weights = masked_softmax(&scores, mask)?;
    let out = matmul(&weights, v)?;
    Ok((weights, out))
}

fn write_block<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>, row0: usize, col0: usize) {
    for i in 0..src.rows() {
        for j in 0..src.cols() {
            dst.set(row0 + i, col0 + j, src.get(i, j));
        }
    }
}

fn write_block_f64<T: Real>(dst: &mut Matrix<f64>, src: &Matrix<T>, row0: usize, col0: usize) {
    for i in 0..src.rows() {
        for j in 0..src.cols() {
            dst.set(row0 + i, col0 + j, src.get(i, j).to_f64());
        }
    }
}

fn visual_layer<T: Real>(
    config: &ModelConfig,
    w: &LayerWeights<T>,
    x: &Matrix<T>,
    plan: &LayerPlan,
    visual_mask: Option<&AdditiveMask>,
    text_mask: &AdditiveMask,
    capture: bool,
) -> Result<(Matrix<T>, Vec<HeadRecord>)> {
    let n = x.rows();
    let nv = config.layout.n_visual();
    let dh = config.head_dim();
    let p = project(w, &rms_normalize(x))?;

    let mut concat = Matrix::zeros(n, config.d_model);
    let mut heads = Vec::new();
    for h in 0..config.n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = (p.q.slice_cols(c0, c1), p.k.slice_cols(c0, c1), p.v.slice_cols(c0, c1));
        let mut rec = capture.then(|| HeadRecord {
            weights: Matrix::zeros(n, n),
            outputs: Matrix::zeros(n, dh),
            active_rows: vec![false; n],
        });

        if let (true, Some(vmask)) = (plan.kept_heads[h], visual_mask) {
            let (wts, out) = attend(
                &qh.slice_rows(0, nv),
                &kh.slice_rows(0, nv),
                &vh.slice_rows(0, nv),
                vmask,
            )?;
            write_block(&mut concat, &out, 0, c0);
            if let Some(r) = rec.as_mut() {
                write_block_f64(&mut r.weights, &wts, 0, 0);
                write_block_f64(&mut r.outputs, &out, 0, 0);
                r.active_rows[..nv].fill(true);
            }
        }

        let (wts, out) = attend(&qh.slice_rows(nv, n), &kh, &vh, text_mask)?;
        write_block(&mut concat, &out, nv, c0);
        if let Some(mut r) = rec {
            write_block_f64(&mut r.weights, &wts, nv, 0);
            write_block_f64(&mut r.outputs, &out, nv, 0);
            r.active_rows[nv..].fill(true);
            heads.push(r);
        }
    }

    let x = x.add(&matmul(&concat, &w.wo)?)?;
    let normed = rms_normalize(&x);
    let ffn_visual = if nv > 0 {
        let wv = FfnWeights::subset(config, w, &plan.kept_neurons);
        ffn(config, &wv, &normed.slice_rows(0, nv))?
    } else {
        Matrix::zeros(0, config.d_model)
    };
    let ffn_text = ffn(config, &FfnWeights::full(w), &normed.slice_rows(nv, n))?;
    let out = x.add(&ffn_visual.vstack(&ffn_text)?)?;
    Ok((out, heads))
}

fn text_only_layer<T: Real>(
    config: &ModelConfig,
    w: &LayerWeights<T>,
    x: &Matrix<T>,
    text_mask: &AdditiveMask,
    capture: bool,
) -> Result<(Matrix<T>, Vec<HeadRecord>)> {
    let n = x.rows();
    let nv = config.layout.n_visual();
    let dh = config.head_dim();
    let xt = x.slice_rows(nv, n);
    let p = project(w, &rms_normalize(&xt))?;

    let mut concat = Matrix::zeros(xt.rows(), config.d_model);
    let mut heads = Vec::new();
    for h in 0..config.n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let (wts, out) = attend(&p.q.slice_cols(c0, c1), &p.k.slice_cols(c0, c1), &p.v.slice_cols(c0, c1), text_mask)?;
        write_block(&mut concat, &out, 0, c0);
        if capture {
            let mut r = HeadRecord {
                weights: Matrix::zeros(n, n),
                outputs: Matrix::zeros(n, dh),
                active_rows: vec![false; n],
            };
            write_block_f64(&mut r.weights, &wts, nv, nv);
            write_block_f64(&mut r.outputs, &out, nv, 0);
            r.active_rows[nv..].fill(true);
            heads.push(r);
        }
    }
    let xt = xt.add(&matmul(&concat, &w.wo)?)?;
    let xt = xt.add(&ffn(config, &FfnWeights::full(w), &rms_normalize(&xt))?)?;
    Ok((x.slice_rows(0, nv).vstack(&xt)?, heads))
}

enum Owned<'a, T> {
    Borrowed(&'a Matrix<T>),
    Owned(Matrix<T>),
}

impl<T> std::ops::Deref for Owned<'_, T> {
    type Target = Matrix<T>;
    fn deref(&self) -> &Matrix<T> {
        match self {
            Owned::Borrowed(m) => m,
            Owned::Owned(m) => m,
        }
    }
}

struct FfnWeights<'a, T> {
    w1: Owned<'a, T>,
    w_gate: Option<Owned<'a, T>>,
    w2: Owned<'a, T>,
}

impl<'a, T: Real> FfnWeights<'a, T> {
    fn full(w: &'a LayerWeights<T>) -> Self {
        Self {
            w1: Owned::Borrowed(&w.w1),
            w_gate: w.w_gate.as_ref().map(Owned::Borrowed),
            w2: Owned::Borrowed(&w.w2),
        }
    }

    fn subset(config: &ModelConfig, w: &'a LayerWeights<T>, neurons: &[usize]) -> Self {
        if neurons.len() == config.d_ffn {
            return Self::full(w);
        }
        Self {
            w1: Owned::Owned(w.w1.select_cols(neurons)),
            w_gate: w.w_gate.as_ref().map(|g| Owned::Owned(g.select_cols(neurons))),
            w2: Owned::Owned(w.w2.select_rows(neurons)),
        }
    }
}

fn ffn<T: Real>(config: &ModelConfig, w: &FfnWeights<'_, T>, h: &Matrix<T>) -> Result<Matrix<T>> {
    match config.ffn_kind {
        FfnKind::Plain => {
            let hidden = matmul(h, &w.w1)?.map(silu);
            let out = matmul(&hidden, &w.w2)?;
            Ok(if config.outer_activation { out.map(silu) } else { out })
        }
        FfnKind::Gated => {
            let gate = w
                .w_gate
                .as_ref()
                .ok_or_else(|| Error::InvalidModelConfig("gated FFN without gate weights".into()))?;
            let g = matmul(h, gate)?.map(silu);
            let up = matmul(h, &w.w1)?;
            let hidden = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * up.get(i, j));
            matmul(&hidden, &w.w2)
        }
    }
}

/// Unpruned baseline: one full `n_tokens x n_tokens` masked softmax per head,
/// where visual rows see all visual keys and text rows see everything before
/// them.
pub fn dense_forward<T: Real>(config: &ModelConfig, weights: &ModelWeights<T>, input: &Matrix<T>) -> Result<Matrix<T>> {
    config.validate()?;
    weights.check(config)?;
    let n = config.n_tokens();
    if input.shape() != (n, config.d_model) {
        return Err(Error::DimensionMismatch {
            op: "dense_forward",
            left: input.shape(),
            right: (n, config.d_model),
        });
    }
    let nv = config.layout.n_visual();
    let mask = AdditiveMask::from_fn(n, n, |i, j| {
        if i < nv {
            j < nv && (!config.causal_visual || j <= i)
        } else {
            j < nv || !config.causal_text || j <= i
        }
    })?;
    let dh = config.head_dim();
    let mut x = input.clone();
    for w in &weights.layers {
        let p = project(w, &rms_normalize(&x))?;
        let mut concat = Matrix::zeros(n, config.d_model);
        for h in 0..config.n_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let (_, out) = attend(&p.q.slice_cols(c0, c1), &p.k.slice_cols(c0, c1), &p.v.slice_cols(c0, c1), &mask)?;
            write_block(&mut concat, &out, 0, c0);
        }
        x = x.add(&matmul(&concat, &w.wo)?)?;
        x = x.add(&ffn(config, &FfnWeights::full(w), &rms_normalize(&x))?)?;
    }
    Ok(x)
}

/// Seeded input rows, uniform in `[-1, 1]`.
pub fn random_input<T: Real>(config: &ModelConfig, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(config.n_tokens(), config.d_model, |_, _| T::from_f64(rng.gen_range(-1.0..=1.0)))
}
