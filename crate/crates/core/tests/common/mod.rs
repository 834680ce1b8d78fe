//! Independent reference implementations and random instance generators
//! shared by the integration suites.
//!
//! The oracles work on plain `Vec<Vec<f64>>` and realize every pruning knob
//! with full-size `N x N` masks and explicit zeroing, so they share no code
//! path with the engine beyond the weights and the kept-neuron subsets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visprune_core::model::{init_weights, random_input, AttentionRecord, FfnKind, ModelConfig, ModelWeights};
use visprune_core::pruning::{no_prune, PruneConfig};
use visprune_core::{DistanceMetric, Matrix, TokenLayout};

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &Matrix<f64>) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn max_abs(a: &Rows, b: &Rows) -> f64 {
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

fn mm(a: &Rows, b: &Matrix<f64>) -> Rows {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn rms(x: &Rows) -> Rows {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let s = (ms + 1e-6).sqrt();
            row.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn act(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn grid_distance(layout: &TokenLayout, metric: DistanceMetric, i: usize, j: usize) -> f64 {
    match metric {
        DistanceMetric::Euclidean2d => {
            let w = layout.grid_width as f64;
            let (xi, yi) = ((i as f64) % w, (i as f64 / w).floor());
            let (xj, yj) = ((j as f64) % w, (j as f64 / w).floor());
            ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt()
        }
        DistanceMetric::Sequence1d => (i as f64 - j as f64).abs(),
    }
}

/// Whether query `i` may attend key `j` in a layer with visual computation.
fn allowed(cfg: &ModelConfig, prune: &PruneConfig, i: usize, j: usize) -> bool {
    let nv = cfg.layout.n_visual();
    if i < nv {
        j < nv && grid_distance(&cfg.layout, prune.metric, i, j) <= prune.radius && (!cfg.causal_visual || j <= i)
    } else {
        j < nv || !cfg.causal_text || j <= i
    }
}

/// Mask for a text-only layer; visual rows only see themselves and are discarded.
fn allowed_text_only(cfg: &ModelConfig, i: usize, j: usize) -> bool {
    let nv = cfg.layout.n_visual();
    if i < nv {
        i == j
    } else {
        j >= nv && (!cfg.causal_text || j <= i)
    }
}

fn oracle_layer(
    cfg: &ModelConfig,
    w: &visprune_core::model::LayerWeights<f64>,
    prune: &PruneConfig,
    layer: usize,
    x: &Rows,
) -> Rows {
    let n = x.len();
    let nv = cfg.layout.n_visual();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let visual = prune.visual_active(layer);

    let xn = rms(x);
    let (q, k, v) = (mm(&xn, &w.wq), mm(&xn, &w.wk), mm(&xn, &w.wv));
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..cfg.n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let ok = |j: usize| {
                if visual {
                    allowed(cfg, prune, i, j)
                } else {
                    allowed_text_only(cfg, i, j)
                }
            };
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    if ok(j) {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let zero_head = visual && i < nv && !prune.kept_heads[layer].contains(&h);
            for c in cols.clone() {
                concat[i][c] = if zero_head {
                    0.0
                } else {
                    (0..n).map(|j| e[j] / z * v[j][c]).sum()
                };
            }
        }
    }
    let attn = mm(&concat, &w.wo);
    let mut x1: Rows = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();

    let hn = rms(&x1);
    let kept = prune.kept_neurons(layer, cfg.d_ffn);
    let mut hidden = match cfg.ffn_kind {
        FfnKind::Plain => mm(&hn, &w.w1).into_iter().map(|r| r.into_iter().map(act).collect()).collect::<Rows>(),
        FfnKind::Gated => {
            let g = mm(&hn, w.w_gate.as_ref().unwrap());
            let u = mm(&hn, &w.w1);
            g.iter().zip(&u).map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| act(*a) * b).collect()).collect()
        }
    };
    if visual {
        for row in hidden.iter_mut().take(nv) {
            for (j, val) in row.iter_mut().enumerate() {
                if !kept.contains(&j) {
                    *val = 0.0;
                }
            }
        }
    }
    let mut out = mm(&hidden, &w.w2);
    if cfg.ffn_kind == FfnKind::Plain && cfg.outer_activation {
        out = out.into_iter().map(|r| r.into_iter().map(act).collect()).collect();
    }
    for (r, o) in x1.iter_mut().zip(&out) {
        for (a, b) in r.iter_mut().zip(o) {
            *a += b;
        }
    }
    if !visual {
        x1[..nv].clone_from_slice(&x[..nv]);
    }
    x1
}

/// Brute-force pruned forward using explicit full-size masks.
pub fn oracle_forward(cfg: &ModelConfig, weights: &ModelWeights<f64>, input: &Matrix<f64>, prune: &PruneConfig) -> Rows {
    let mut x = to_rows(input);
    for (layer, w) in weights.layers.iter().enumerate() {
        x = oracle_layer(cfg, w, prune, layer, &x);
    }
    x
}

pub struct Instance {
    pub cfg: ModelConfig,
    pub weights: ModelWeights<f64>,
    pub input: Matrix<f64>,
    pub prune: PruneConfig,
}

pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let (w, h) = if rng.gen_bool(0.05) {
        (0, 0)
    } else {
        (rng.gen_range(1..=4), rng.gen_range(1..=4))
    };
    let n_heads = rng.gen_range(1..=4);
    let mut cfg = ModelConfig::new(
        rng.gen_range(1..=3),
        n_heads * rng.gen_range(2..=4),
        n_heads,
        rng.gen_range(3..=10),
        TokenLayout::new(w, h, rng.gen_range(1..=8)).unwrap(),
    );
    cfg.causal_text = rng.gen_bool(0.5);
    cfg.causal_visual = rng.gen_bool(0.25);
    cfg.ffn_kind = if rng.gen_bool(0.5) { FfnKind::Plain } else { FfnKind::Gated };
    cfg.outer_activation = rng.gen_bool(0.5);
    cfg
}

pub fn random_prune(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> PruneConfig {
    let metric = if rng.gen_bool(0.7) {
        DistanceMetric::Euclidean2d
    } else {
        DistanceMetric::Sequence1d
    };
    let max = cfg.layout.max_distance(metric);
    let radius = if rng.gen_bool(0.3) {
        rng.gen_range(0..=(max.ceil() as usize + 1)) as f64
    } else {
        rng.gen_range(0.0..=max + 1.0)
    };
    let kept: Vec<Vec<usize>> = (0..cfg.n_layers)
        .map(|_| {
            let mut heads: Vec<usize> = (0..cfg.n_heads).filter(|_| rng.gen_bool(0.6)).collect();
            if heads.is_empty() {
                heads.push(rng.gen_range(0..cfg.n_heads));
            }
            heads
        })
        .collect();
    let mut p = no_prune(cfg)
        .with_window(metric, radius)
        .with_kept_heads(kept)
        .with_ffn_keep(rng.gen_range(0.05..=1.0), rng.gen());
    p.last_visual_layer = rng.gen_range(0..=cfg.n_layers);
    if rng.gen_bool(0.4) {
        let s = rng.gen_range(0..cfg.n_layers);
        p.dropped_block = Some((s, rng.gen_range(s + 1..=cfg.n_layers)));
    }
    p
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_config(&mut rng);
    let prune = random_prune(&cfg, &mut rng);
    let weights = init_weights(&cfg, rng.gen()).unwrap();
    let input = random_input(&cfg, rng.gen());
    Instance { cfg, weights, input, prune }
}

/// Largest deviation from 1 of any computed attention row's sum.
pub fn worst_row_sum_error(records: &[AttentionRecord]) -> f64 {
    let mut worst = 0.0f64;
    for r in records {
        for h in &r.heads {
            for i in 0..h.weights.rows() {
                if h.active_rows[i] {
                    let s: f64 = h.weights.row(i).iter().sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Analysis oracles: plain enumeration over tokens.

/// `(layer, query, [(bin_center, mean)])` with empty bins omitted.
pub type ProfileRows = Vec<(usize, usize, Vec<(f64, f64)>)>;

pub fn oracle_distance_profile(
    records: &[AttentionRecord],
    layout: &TokenLayout,
    queries: &[usize],
    n_bins: usize,
) -> ProfileRows {
    let nv = layout.n_visual();
    let diag = if nv > 0 {
        (((layout.grid_width - 1).pow(2) + (layout.grid_height - 1).pow(2)) as f64).sqrt()
    } else {
        0.0
    };
    let width = diag / n_bins as f64;
    let mut out = Vec::new();
    for rec in records {
        for &q in queries {
            let heads: Vec<_> = rec.heads.iter().filter(|h| h.active_rows[q]).collect();
            if heads.is_empty() {
                continue;
            }
            let mut bins = Vec::new();
            for b in 0..n_bins {
                let members: Vec<usize> = (0..nv)
                    .filter(|&k| {
                        let dist = grid_distance(layout, DistanceMetric::Euclidean2d, q, k);
                        let idx = if width > 0.0 { ((dist / width) as usize).min(n_bins - 1) } else { 0 };
                        idx == b
                    })
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mut total = 0.0;
                for &k in &members {
                    let mut s = 0.0;
                    for h in &heads {
                        s += h.weights.get(q, k);
                    }
                    total += s / heads.len() as f64;
                }
                bins.push(((b as f64 + 0.5) * width, total / members.len() as f64));
            }
            out.push((rec.layer, q, bins));
        }
    }
    out
}

pub fn oracle_cross_modal(records: &[AttentionRecord], layout: &TokenLayout) -> Rows {
    let nv = layout.n_visual();
    let n = layout.n_tokens();
    records
        .iter()
        .map(|rec| {
            (nv..n)
                .map(|t| {
                    if nv == 0 {
                        return 0.0;
                    }
                    let per_head: Vec<f64> = rec
                        .heads
                        .iter()
                        .map(|h| (0..nv).map(|k| h.weights.get(t, k)).sum::<f64>() / nv as f64)
                        .collect();
                    per_head.iter().sum::<f64>() / per_head.len() as f64
                })
                .collect()
        })
        .collect()
}

/// rho via two explicit means; `weight_mass` selects the received-attention statistic.
pub fn oracle_rho(records: &[AttentionRecord], layout: &TokenLayout, weight_mass: bool) -> Rows {
    let nv = layout.n_visual();
    let n = layout.n_tokens();
    records
        .iter()
        .map(|rec| {
            rec.heads
                .iter()
                .map(|h| {
                    let stat = |t: usize| -> f64 {
                        if weight_mass {
                            let mut s = 0.0;
                            let mut c = 0usize;
                            for i in 0..n {
                                if h.active_rows[i] {
                                    s += h.weights.get(i, t);
                                    c += 1;
                                }
                            }
                            if c == 0 {
                                0.0
                            } else {
                                s / c as f64
                            }
                        } else {
                            h.outputs.row(t).iter().map(|x| x * x).sum::<f64>().sqrt()
                        }
                    };
                    let mut vis = 0.0;
                    for t in 0..nv {
                        vis += stat(t);
                    }
                    let vis = if nv == 0 { 0.0 } else { vis / nv as f64 };
                    let mut txt = 0.0;
                    for t in nv..n {
                        txt += stat(t);
                    }
                    vis / (txt / (n - nv) as f64)
                })
                .collect()
        })
        .collect()
}
