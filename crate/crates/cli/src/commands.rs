//! The five subcommands. Each one computes every artifact in memory first and
//! only then hands them to [`crate::output::write_all`].

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};

use visprune_core::analysis::{
    cross_modal_profile, distance_profile, head_activity, select_query_tokens, ActivityMode, DistanceProfile,
};
use visprune_core::flops::{flops_pruned_with, scaling_sweep, FlopsReport, TermFlops};
use visprune_core::model::{forward, init_weights, random_input};
use visprune_core::pruning::{
    block_drop, heads_by_count, heads_by_threshold, no_prune, solve_budget, suffix_drop, HeadActivity, SearchSpace,
};
use visprune_core::{AttentionRecord, ModelConfig, Precision, PruneConfig, Real};

use crate::config::LoadedConfig;
use crate::output::{csv_bytes, Artifact};

/// Files to write plus what to print on success.
pub struct CommandOutput {
    pub artifacts: Vec<Artifact>,
    pub stdout: String,
}

struct Run {
    hidden: Vec<Vec<f64>>,
    records: Option<Vec<AttentionRecord>>,
}

fn run_model<T: Real>(cfg: &ModelConfig, prune: &PruneConfig, seed: u64, capture: bool) -> Result<Run> {
    let weights = init_weights::<T>(cfg, seed)?;
    let input = random_input::<T>(cfg, seed.wrapping_add(1));
    let out = forward(cfg, &weights, &input, prune, capture)?;
    let hidden = (0..out.hidden.rows())
        .map(|i| out.hidden.row(i).iter().map(|x| Real::to_f64(*x)).collect())
        .collect();
    Ok(Run {
        hidden,
        records: out.attention_records,
    })
}

fn run_at(precision: Precision, cfg: &ModelConfig, prune: &PruneConfig, seed: u64, capture: bool) -> Result<Run> {
    match precision {
        Precision::Single => run_model::<f32>(cfg, prune, seed, capture),
        Precision::Double => run_model::<f64>(cfg, prune, seed, capture),
    }
}

/// Head activity of the unpruned model on the seeded sample.
fn measure_activity(c: &LoadedConfig, mode: ActivityMode) -> Result<HeadActivity> {
    let cfg = &c.model;
    let run = run_at(c.run.precision, cfg, &no_prune(cfg), c.run.seed, true)?;
    Ok(head_activity(run.records.as_deref().unwrap_or_default(), &cfg.layout, mode)?)
}

/// The `[prune]` section as a validated [`PruneConfig`], plus notes for stdout.
pub fn build_prune(c: &LoadedConfig) -> Result<(PruneConfig, Vec<String>)> {
    let cfg = &c.model;
    let p = &c.run.prune;
    let mut notes = Vec::new();
    let mut prune = no_prune(cfg);
    prune.metric = p.metric;
    prune.radius = p.radius.unwrap_or_else(|| cfg.layout.max_distance(p.metric));

    if let Some(kept) = &p.kept_heads {
        prune.kept_heads = kept.clone();
    } else if let Some(k) = p.heads_per_layer {
        prune.kept_heads = match p.rank_heads_by {
            Some(mode) => heads_by_count(&measure_activity(c, mode)?, k)?,
            None => vec![(0..k).collect(); cfg.n_layers],
        };
    } else if let Some(alpha) = p.head_threshold {
        let mode = p.rank_heads_by.unwrap_or(ActivityMode::WeightMass);
        let sel = heads_by_threshold(&measure_activity(c, mode)?, alpha)?;
        if !sel.flagged_layers.is_empty() {
            notes.push(format!(
                "head_threshold {alpha}: no head passed in layers {:?}; kept the strongest head there",
                sel.flagged_layers
            ));
        }
        prune.kept_heads = sel.kept;
    }

    prune = prune.with_ffn_keep(p.ffn_keep_ratio.unwrap_or(1.0), p.ffn_neuron_seed);
    prune = prune.with_schedule(suffix_drop(cfg, p.drop_last_layers)?);
    if let Some([start, end]) = p.drop_block {
        prune = prune.with_schedule(block_drop(cfg, start, end)?);
    }
    prune.validate(cfg).with_context(|| c.locate("prune"))?;
    Ok((prune, notes))
}

fn query_tokens(c: &LoadedConfig) -> Result<Vec<usize>> {
    let nv = c.model.layout.n_visual();
    let count = c.run.analysis.query_tokens;
    if count > nv {
        bail!(
            "{}: `query_tokens` = {count} exceeds the {nv} visual tokens",
            c.locate("analysis")
        );
    }
    Ok(select_query_tokens(&c.model.layout, count, c.run.seed)?)
}

fn profile_csv(profile: &DistanceProfile) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for e in &profile.entries {
        for b in &e.bins {
            rows.push(vec![
                e.layer.to_string(),
                e.query_token.to_string(),
                b.bin_center.to_string(),
                b.mean_weight.to_string(),
            ]);
        }
    }
    csv_bytes(&["layer", "query_token", "bin_center", "mean_weight"], rows)
}

pub fn forward_cmd(c: &LoadedConfig) -> Result<CommandOutput> {
    let (prune, notes) = build_prune(c)?;
    let capture = c.run.analysis.capture;
    let queries = if capture { Some(query_tokens(c)?) } else { None };
    let run = run_at(c.run.precision, &c.model, &prune, c.run.seed, capture)?;
    let nv = c.model.layout.n_visual();

    let hidden_rows = run
        .hidden
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            vec![
                i.to_string(),
                if i < nv { "visual" } else { "text" }.to_string(),
                norm.to_string(),
                mean.to_string(),
            ]
        })
        .collect();
    let mut artifacts = vec![Artifact::new(
        "hidden.csv",
        csv_bytes(&["token", "modality", "l2_norm", "mean"], hidden_rows)?,
    )];

    if let (Some(records), Some(queries)) = (&run.records, &queries) {
        let mut rows = Vec::new();
        for rec in records {
            for (h, head) in rec.heads.iter().enumerate() {
                for q in (0..head.weights.rows()).filter(|&q| head.active_rows[q]) {
                    for (k, w) in head.weights.row(q).iter().enumerate().filter(|(_, w)| **w != 0.0) {
                        rows.push(vec![
                            rec.layer.to_string(),
                            h.to_string(),
                            q.to_string(),
                            k.to_string(),
                            w.to_string(),
                        ]);
                    }
                }
            }
        }
        artifacts.push(Artifact::new(
            "attention.csv",
            csv_bytes(&["layer", "head", "query_token", "key_token", "weight"], rows)?,
        ));
        let profile = distance_profile(records, &c.model.layout, queries, c.run.analysis.n_bins)?;
        artifacts.push(Artifact::new("distance_profile.csv", profile_csv(&profile)?));
    }

    let mut stdout = String::new();
    for n in notes {
        let _ = writeln!(stdout, "note: {n}");
    }
    let _ = writeln!(
        stdout,
        "forward: {} tokens ({} visual), {} layers, precision {:?}",
        c.model.n_tokens(),
        nv,
        c.model.n_layers,
        c.run.precision
    );
    Ok(CommandOutput { artifacts, stdout })
}

pub fn analyze_cmd(c: &LoadedConfig) -> Result<CommandOutput> {
    let (prune, notes) = build_prune(c)?;
    let queries = query_tokens(c)?;
    let layout = &c.model.layout;
    let run = run_at(c.run.precision, &c.model, &prune, c.run.seed, true)?;
    let records = run.records.ok_or_else(|| anyhow!("forward pass returned no attention records"))?;

    let profile = distance_profile(&records, layout, &queries, c.run.analysis.n_bins)?;
    let mut artifacts = vec![Artifact::new("distance_profile.csv", profile_csv(&profile)?)];

    let cm = cross_modal_profile(&records, layout)?;
    let mut rows = Vec::new();
    for (layer, values) in cm.layers.iter().zip(&cm.values) {
        for (t, v) in values.iter().enumerate() {
            rows.push(vec![layer.to_string(), (layout.n_visual() + t).to_string(), v.to_string()]);
        }
    }
    artifacts.push(Artifact::new(
        "cross_modal.csv",
        csv_bytes(&["layer", "text_token", "mean_weight"], rows)?,
    ));

    let mut modes = c.run.analysis.modes.clone();
    modes.dedup();
    for mode in modes {
        let activity = head_activity(&records, layout, mode)?;
        let mut rows = Vec::new();
        for (layer, rho) in activity.rho.iter().enumerate() {
            for (h, r) in rho.iter().enumerate() {
                rows.push(vec![layer.to_string(), h.to_string(), r.to_string(), mode.as_str().to_string()]);
            }
        }
        artifacts.push(Artifact::new(
            format!("head_activity_{}.csv", mode.as_str()),
            csv_bytes(&["layer", "head", "rho", "mode"], rows)?,
        ));
    }

    let mut stdout = String::new();
    for n in notes {
        let _ = writeln!(stdout, "note: {n}");
    }
    let _ = writeln!(
        stdout,
        "analyze: {} query tokens, {} profile groups, {} layers",
        queries.len(),
        profile.entries.len(),
        records.len()
    );
    Ok(CommandOutput { artifacts, stdout })
}

fn flops_csv(report: &FlopsReport) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for l in &report.layers {
        for (name, v) in TermFlops::NAMES.iter().zip(l.terms.values()) {
            rows.push(vec![l.layer.to_string(), name.to_string(), v.to_string()]);
        }
    }
    for (name, v) in TermFlops::NAMES.iter().zip(report.totals.values()) {
        rows.push(vec!["total".into(), name.to_string(), v.to_string()]);
    }
    rows.push(vec!["total".into(), "all".into(), report.grand_total.to_string()]);
    csv_bytes(&["layer", "term", "count"], rows)
}

pub fn flops_cmd(c: &LoadedConfig) -> Result<CommandOutput> {
    let (prune, notes) = build_prune(c)?;
    let n_visual = match c.run.sweep.n_visual.as_slice() {
        [] => c.model.layout.n_visual(),
        [nv] => *nv,
        more => bail!("flops takes a single visual-token count, got {}", more.len()),
    };
    let report = flops_pruned_with(&c.model, &prune, n_visual, c.model.layout.n_text, c.run.flops.accounting)?;
    let table = report.render_table();
    let mut stdout = String::new();
    for n in notes {
        let _ = writeln!(stdout, "note: {n}");
    }
    stdout.push_str(&table);
    Ok(CommandOutput {
        artifacts: vec![
            Artifact::new("flops.csv", flops_csv(&report)?),
            Artifact::new("flops.txt", table.into_bytes()),
        ],
        stdout,
    })
}

pub fn sweep_cmd(c: &LoadedConfig) -> Result<CommandOutput> {
    let (prune, notes) = build_prune(c)?;
    let nvs = if c.run.sweep.n_visual.is_empty() {
        vec![c.model.layout.n_visual()]
    } else {
        c.run.sweep.n_visual.clone()
    };
    let rows = scaling_sweep(&c.model, &prune, &nvs, c.model.layout.n_text)?;
    let mut stdout = String::new();
    for n in notes {
        let _ = writeln!(stdout, "note: {n}");
    }
    let _ = writeln!(stdout, "{:>10} {:>20} {:>20}", "n_visual", "dense", "pruned");
    for r in &rows {
        let _ = writeln!(stdout, "{:>10} {:>20} {:>20}", r.n_visual, r.dense, r.pruned);
    }
    let csv = csv_bytes(
        &["n_visual", "dense", "pruned"],
        rows.iter()
            .map(|r| vec![r.n_visual.to_string(), r.dense.to_string(), r.pruned.to_string()])
            .collect(),
    )?;
    Ok(CommandOutput {
        artifacts: vec![Artifact::new("sweep.csv", csv)],
        stdout,
    })
}

fn default_head_counts(n_heads: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=4).map(|q| (n_heads * q / 4).max(1)).collect();
    v.dedup();
    v
}

pub fn solve_cmd(c: &LoadedConfig) -> Result<CommandOutput> {
    let cfg = &c.model;
    let s = &c.run.solve;
    let target = s
        .target_flops
        .ok_or_else(|| anyhow!("{}: `target_flops` is required (or pass --target-flops)", c.locate("solve")))?;
    let metric = c.run.prune.metric;
    let activity = match c.run.prune.rank_heads_by {
        Some(mode) => Some(measure_activity(c, mode)?),
        None => None,
    };
    let space = SearchSpace {
        metric,
        radii: s.radii.clone().unwrap_or_else(|| {
            let mut r: Vec<f64> = (1..=8).map(f64::from).collect();
            r.push(cfg.layout.max_distance(metric));
            r
        }),
        head_counts: s.head_counts.clone().unwrap_or_else(|| default_head_counts(cfg.n_heads)),
        suffix_drops: s
            .suffix_drops
            .clone()
            .unwrap_or_else(|| (0..4).map(|q| cfg.n_layers * q / 4).collect()),
        keep_ratios: s.keep_ratios.clone().unwrap_or_else(|| vec![0.25, 0.5, 0.75, 1.0]),
        ffn_neuron_seed: c.run.prune.ffn_neuron_seed,
        activity,
    };
    let found = solve_budget(cfg, target, &space).with_context(|| c.locate("solve"))?;

    let mut stdout = String::new();
    if found.is_empty() {
        let _ = writeln!(stdout, "no feasible configuration");
    } else {
        let _ = writeln!(
            stdout,
            "{:>5} {:>8} {:>6} {:>12} {:>10} {:>20}",
            "rank", "radius", "heads", "suffix_drop", "keep_ratio", "flops"
        );
    }
    let mut rows = Vec::new();
    for (i, cand) in found.iter().enumerate() {
        let k = &cand.knobs;
        let _ = writeln!(
            stdout,
            "{:>5} {:>8} {:>6} {:>12} {:>10} {:>20}",
            i + 1,
            k.radius,
            k.heads,
            k.suffix_drop,
            k.keep_ratio,
            cand.flops
        );
        rows.push(vec![
            (i + 1).to_string(),
            k.radius.to_string(),
            k.heads.to_string(),
            k.suffix_drop.to_string(),
            k.keep_ratio.to_string(),
            cand.flops.to_string(),
        ]);
    }
    let csv = csv_bytes(&["rank", "radius", "heads", "suffix_drop", "keep_ratio", "flops"], rows)?;
    Ok(CommandOutput {
        artifacts: vec![Artifact::new("solve.csv", csv)],
        stdout,
    })
}
