use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn nearfar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nearfar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Asserts a failed run with the given exit code and a single `nearfar: <kind>:` line.
fn assert_fails(o: &Output, code: i32, kind: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with(&format!("nearfar: {kind}: ")), "{err}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_pretrain(dir: &Path, seed: u64, frames: usize) -> String {
    let out = dir.join(format!("seq{seed}"));
    let o = nearfar(&[
        "synth-gen",
        "--benchmark",
        "pretrain",
        "--seed",
        &seed.to_string(),
        "--frames",
        &frames.to_string(),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.to_str().unwrap().to_string()
}

fn digest_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .find(|l| l.starts_with("digest "))
        .expect("digest printed")
        .to_string()
}

#[test]
fn shift_benchmark_writes_200_frames() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("shift");
    let o = nearfar(&["synth-gen", "--benchmark", "shift", "--seed", "7", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("frames 200"));
    for sub in ["rgb", "depth", "gt"] {
        assert_eq!(fs::read_dir(out.join(sub)).unwrap().count(), 200, "{sub}");
    }
    assert!(out.join("poses.txt").is_file());
    assert!(out.join("intrinsics.txt").is_file());
}

#[test]
fn same_seed_gives_same_digest() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str, seed: &str| {
        nearfar(&[
            "synth-gen",
            "--benchmark",
            "pretrain",
            "--seed",
            seed,
            "--frames",
            "2",
            "--out",
            p(&tmp.path().join(name)),
        ])
    };
    let (a, b, c) = (run("a", "3"), run("b", "3"), run("c", "4"));
    assert_eq!(digest_line(&a), digest_line(&b));
    assert_ne!(digest_line(&a), digest_line(&c));
}

#[test]
fn missing_output_parent_is_a_clean_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("no").join("such").join("dir");
    let o = nearfar(&["synth-gen", "--benchmark", "shift", "--out", p(&out)]);
    assert_fails(&o, 2, "io");
    assert!(!out.exists());
}

#[test]
fn bad_scene_file_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene.toml");
    fs::write(&scene, "rng_seed = \"seven\"\n").unwrap();
    let o = nearfar(&["synth-gen", "--scene", p(&scene), "--out", p(&tmp.path().join("out"))]);
    assert_fails(&o, 1, "config");
}

#[test]
fn usage_errors_exit_with_one() {
    let o = nearfar(&["synth-gen", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    let o = nearfar(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_is_repeatable() {
    let a = nearfar(&["gradcheck", "--seed", "3"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).trim_end().ends_with("PASS"));
    assert_eq!(stdout(&a).matches(" ok").count(), 12);
    let b = nearfar(&["gradcheck", "--seed", "3"]);
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn corrupted_gradient_is_reported() {
    let o = nearfar(&["gradcheck", "--corrupt-gradient"]);
    assert_fails(&o, 3, "check-failed");
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn dump_config_lists_defaults_and_applies_overrides() {
    let o = nearfar(&["replay", "--dump-config", "--mode", "frozen", "--infer-every-k", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in [
        "mode = \"frozen\"",
        "infer_every_k = 3",
        "steps_per_frame = 5",
        "lr = 0.02",
        "window = 10",
        "[ransac]",
        "[labeling]",
        "[loss]",
    ] {
        assert!(text.contains(key), "missing {key} in\n{text}");
    }
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "mdoe = \"online\"\n").unwrap();
    let o = nearfar(&["replay", "--config", p(&cfg)]);
    assert_fails(&o, 1, "config");
}

#[test]
fn pretrain_refuses_overlapping_seeds() {
    let tmp = TempDir::new().unwrap();
    let seq = gen_pretrain(tmp.path(), 21, 2);
    let params = tmp.path().join("p.bin");
    let o = nearfar(&[
        "pretrain",
        "--train",
        &seq,
        "--epochs",
        "0",
        "--test-seed",
        "21",
        "--out",
        p(&params),
    ]);
    assert_fails(&o, 2, "seed-overlap");
    assert!(!params.exists());
}

#[test]
fn unreadable_training_sequence_is_a_clean_error() {
    let tmp = TempDir::new().unwrap();
    let o = nearfar(&[
        "pretrain",
        "--train",
        p(&tmp.path().join("missing")),
        "--out",
        p(&tmp.path().join("p.bin")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("nearfar: "));
}

#[test]
fn pretrain_replay_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let train = gen_pretrain(tmp.path(), 31, 3);
    let test = gen_pretrain(tmp.path(), 32, 4);
    let params = tmp.path().join("p.bin");
    let o = nearfar(&[
        "pretrain",
        "--train",
        &train,
        "--epochs",
        "1",
        "--test-seed",
        "32",
        "--out",
        p(&params),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final loss"));

    let run_dir = |name: &str| tmp.path().join(name);
    for (name, mode) in [("frozen", "frozen"), ("online", "online")] {
        let o = nearfar(&[
            "replay",
            "--sequence",
            &test,
            "--params",
            p(&params),
            "--output",
            p(&run_dir(name)),
            "--mode",
            mode,
            "--steps-per-frame",
            "1",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(fs::read_dir(run_dir(name).join("overlays")).unwrap().count(), 8);
        assert!(run_dir(name).join("metrics_far_field.csv").is_file());
    }

    let o = nearfar(&[
        "eval",
        "--compare",
        p(&run_dir("online")),
        p(&run_dir("online")),
        "--out",
        p(&run_dir("cmp")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = fs::read_to_string(run_dir("cmp").join("comparison_all.csv")).unwrap();
    for line in cmp.lines().skip(1) {
        for (i, cell) in line.split(',').enumerate().skip(1) {
            if i % 3 == 0 && !cell.is_empty() {
                assert_eq!(cell.parse::<f64>().unwrap(), 0.0, "{line}");
            }
        }
    }

    let o = nearfar(&[
        "eval",
        "--compare",
        p(&run_dir("frozen")),
        p(&run_dir("online")),
        "--out",
        p(&run_dir("cmp2")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run_dir("cmp2").join("comparison_far_field.csv").is_file());

    let gt = Path::new(&test).join("gt");
    let o = nearfar(&[
        "eval",
        "--pred",
        p(&gt),
        "--gt",
        &test,
        "--region",
        "all",
        "--out",
        p(&run_dir("gt_eval")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row = stdout(&o).lines().find(|l| l.starts_with("all")).unwrap().to_string();
    let cells: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cells[1], "1.0000");
    assert_eq!(cells[3], "1.0000");
}

#[test]
fn eval_lists_missing_frames() {
    let tmp = TempDir::new().unwrap();
    let seq = gen_pretrain(tmp.path(), 41, 3);
    let pred = tmp.path().join("pred");
    fs::create_dir(&pred).unwrap();
    fs::copy(Path::new(&seq).join("gt/0000.png"), pred.join("0000.png")).unwrap();
    fs::copy(Path::new(&seq).join("gt/0002.png"), pred.join("0002.png")).unwrap();
    let o = nearfar(&["eval", "--pred", p(&pred), "--gt", &seq]);
    assert_fails(&o, 2, "invalid-input");
    assert!(stderr(&o).contains("missing predictions: [1]"), "{}", stderr(&o));
}
