use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TOY: &str = r#"
seed = 7

[model]
n_layers = 2
d_model = 8
n_heads = 2
d_ffn = 12
grid_width = 3
grid_height = 3
n_text = 4
"#;

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn visprune(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visprune"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn forward_is_byte_identical_across_runs() {
    let (dir, cfg) = setup(&format!("{TOY}\n[analysis]\ncapture = true\nquery_tokens = 3\n"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&visprune(&["forward"], &cfg, &a));
    ok(&visprune(&["forward"], &cfg, &b));
    for f in ["hidden.csv", "attention.csv", "distance_profile.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn radius_zero_profile_mass_sits_at_distance_zero() {
    let cfg_text = format!("{TOY}\n[prune]\nradius = 0.0\n\n[analysis]\ncapture = true\nquery_tokens = 9\nn_bins = 4\n");
    let (dir, cfg) = setup(&cfg_text);
    let out = dir.path().join("out");
    ok(&visprune(&["forward"], &cfg, &out));
    let rows = read_csv(&out.join("distance_profile.csv"));
    assert!(!rows.is_empty());
    // The 3x3 diagonal is 2.83, so with 4 bins only bin 0 holds distance 0.
    let width = 8f64.sqrt() / 4.0;
    for r in &rows {
        let center: f64 = r[2].parse().unwrap();
        let mean: f64 = r[3].parse().unwrap();
        if center > width {
            assert_eq!(mean, 0.0, "{r:?}");
        } else {
            assert!(mean > 0.0);
        }
    }
}

#[test]
fn malformed_key_fails_without_writing() {
    let (dir, cfg) = setup(&format!("{TOY}\n[prune]\nradiuss = 2.0\n"));
    let out = dir.path().join("out");
    for cmd in ["forward", "analyze", "flops", "sweep", "solve"] {
        let o = visprune(&[cmd], &cfg, &out);
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("radiuss"), "{err}");
        assert!(err.contains("line"), "{err}");
        assert!(!out.exists());
    }
}

#[test]
fn invalid_values_fail_without_writing() {
    for extra in [
        "\n[prune]\ndrop_block = [1, 1]\n",
        "\n[prune]\nkept_heads = [[0], [2]]\n",
        "\n[prune]\nffn_keep_ratio = 0.0\n",
        "\n[analysis]\nquery_tokens = 10\n",
    ] {
        let (dir, cfg) = setup(&format!("{TOY}{extra}"));
        let out = dir.path().join("out");
        let o = visprune(&["analyze"], &cfg, &out);
        assert!(!o.status.success(), "{extra}");
        assert!(!out.exists(), "{extra}");
    }
}

#[test]
fn analyze_selects_ten_queries_on_a_24x24_grid() {
    let cfg_text = TOY.replace("grid_width = 3", "grid_width = 24").replace("grid_height = 3", "grid_height = 24");
    let (dir, cfg) = setup(&cfg_text);
    let out = dir.path().join("out");
    ok(&visprune(&["analyze"], &cfg, &out));
    let rows = read_csv(&out.join("distance_profile.csv"));
    for layer in ["0", "1"] {
        let mut queries: Vec<&str> = rows.iter().filter(|r| r[0] == layer).map(|r| r[1].as_str()).collect();
        queries.dedup();
        assert_eq!(queries.len(), 10);
    }
}

#[test]
fn analyze_full_selection_and_both_activity_files() {
    let (dir, cfg) = setup(&format!("{TOY}\n[analysis]\nquery_tokens = 9\n"));
    let out = dir.path().join("out");
    ok(&visprune(&["analyze"], &cfg, &out));
    let rows = read_csv(&out.join("distance_profile.csv"));
    let mut queries: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    queries.sort_unstable();
    queries.dedup();
    assert_eq!(queries, (0..9).collect::<Vec<_>>());

    let wm = read_csv(&out.join("head_activity_weight_mass.csv"));
    let on = read_csv(&out.join("head_activity_output_norm.csv"));
    assert_eq!(wm.len(), 4);
    assert_eq!(on.len(), 4);
    assert!(wm.iter().all(|r| r[3] == "weight_mass"));
    assert!(on.iter().all(|r| r[3] == "output_norm"));
    assert_ne!(wm, on);

    let cm = read_csv(&out.join("cross_modal.csv"));
    assert_eq!(cm.len(), 2 * 4);
    assert_eq!(cm[0][1], "9");
}

#[test]
fn flops_on_the_7b_preset() {
    let (dir, cfg) = setup("[model]\npreset = \"llava-7b\"\n");
    let out = dir.path().join("out");
    let stdout = ok(&visprune(&["flops"], &cfg, &out));
    assert!(stdout.contains("grand total"));
    let rows = read_csv(&out.join("flops.csv"));
    assert_eq!(rows.len(), 32 * 5 + 5 + 1);
    let last = rows.last().unwrap();
    assert_eq!((last[0].as_str(), last[1].as_str()), ("total", "all"));
    let total: f64 = last[2].parse().unwrap();
    assert!((total - 7.63e12).abs() / 7.63e12 < 0.10, "{total}");
    assert!(out.join("flops.txt").exists());
}

#[test]
fn sweep_single_count_gives_one_row() {
    let (dir, cfg) = setup("[model]\npreset = \"llava-7b\"\n\n[prune]\nradius = 5.0\ndrop_last_layers = 16\n");
    let out = dir.path().join("out");
    ok(&visprune(&["sweep", "--nv", "576"], &cfg, &out));
    let rows = read_csv(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "576");
    let (dense, pruned): (u64, u64) = (rows[0][1].parse().unwrap(), rows[0][2].parse().unwrap());
    assert!(pruned < dense);

    ok(&visprune(&["sweep", "--nv", "144,576,2304", "--workers", "2"], &cfg, &out));
    assert_eq!(read_csv(&out.join("sweep.csv")).len(), 3);
}

#[test]
fn solve_with_zero_budget_reports_nothing_feasible() {
    let (dir, cfg) = setup(TOY);
    let out = dir.path().join("out");
    let stdout = ok(&visprune(&["solve", "--target-flops", "0"], &cfg, &out));
    assert!(stdout.contains("no feasible configuration"));
    assert!(read_csv(&out.join("solve.csv")).is_empty());
}

#[test]
fn solve_output_is_sorted_and_within_budget() {
    let (dir, cfg) = setup("[model]\npreset = \"llava-13b\"\n\n[solve]\ntarget_flops = 8e12\nradii = [3.0, 5.0]\n");
    let out = dir.path().join("out");
    ok(&visprune(&["solve"], &cfg, &out));
    let rows = read_csv(&out.join("solve.csv"));
    assert!(!rows.is_empty());
    let flops: Vec<u64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(flops.windows(2).all(|w| w[0] <= w[1]));
    assert!(flops.iter().all(|&f| f as f64 <= 8e12));
}

#[test]
fn single_precision_and_ranked_heads_run() {
    let (dir, cfg) = setup(&format!(
        "{TOY}\n[prune]\nheads_per_layer = 1\nrank_heads_by = \"output_norm\"\nffn_keep_ratio = 0.5\n"
    ));
    let out = dir.path().join("out");
    ok(&visprune(&["forward", "--precision", "single"], &cfg, &out));
    assert_eq!(read_csv(&out.join("hidden.csv")).len(), 13);
}
