use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spikequant::model::load_bundle;
use spikequant::{PrecisionPlan, SiteId, SiteKind, SpikeReport};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikequant")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

const SMALL: [&str; 10] = ["--layers", "3", "--d-model", "16", "--heads", "2", "--d-ff", "24", "--vocab", "64"];

fn synth_small(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["synth"];
    args.extend(SMALL);
    args.extend(extra);
    args.extend(["--out", out]);
    ok(dir, &args);
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic_and_complete() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--seed", "4", "--out", "a.saqt"]);
    ok(d.path(), &["synth", "--seed", "4", "--out", "b.saqt"]);
    ok(d.path(), &["synth", "--seed", "5", "--out", "c.saqt"]);
    let a = fs::read(d.path().join("a.saqt")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b.saqt")).unwrap());
    assert_ne!(a, fs::read(d.path().join("c.saqt")).unwrap());
    let m = load_bundle(&d.path().join("a.saqt")).unwrap();
    assert_eq!(m.layers.len(), 8);
    assert_eq!(m.model_id, "synth-s4");
    let side = json(&d.path().join("a.saqt.manifest.json"));
    assert_eq!(side["command"], "synth");
    assert_eq!(side["seed"], 4);
    assert!(side["duration_ms"].is_number());
    ok(d.path(), &["profile", "--model", "a.saqt", "--corpus", "--len", "300", "--out", "r.json"]);
    let report = SpikeReport::from_json(&fs::read_to_string(d.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report.sites[0].tokens, 300);
}

#[test]
fn injected_spike_is_flagged_and_planned() {
    let d = tempfile::tempdir().unwrap();
    synth_small(d.path(), "m.saqt", &["--inject", "layer=2,kind=down,channel=3,scale=400", "--seed", "2"]);
    let stdout = ok(d.path(), &["profile", "--model", "m.saqt", "--seed-stream", "1", "--len", "48", "--out", "r.json", "--curves", "curves"]);
    assert!(stdout.contains("down@2:output"), "{stdout}");
    let report = SpikeReport::from_json(&fs::read_to_string(d.path().join("r.json")).unwrap()).unwrap();
    assert!(report.detections.threshold.contains(&SiteId::output(2, SiteKind::Down)));
    let curve = fs::read_to_string(d.path().join("curves/down.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "layer,input_max_abs,output_max_abs");
    assert_eq!(curve.lines().count(), 4);
    assert_eq!(fs::read_dir(d.path().join("curves")).unwrap().count(), 9);

    ok(d.path(), &["plan", "--report", "r.json", "--out", "mix.json"]);
    let plan = PrecisionPlan::from_json(&fs::read_to_string(d.path().join("mix.json")).unwrap()).unwrap();
    assert!(plan.high_precision_sites().contains(&(2, SiteKind::Down)));
    assert_eq!(plan.model_id, "synth-s2");
}

#[test]
fn eval_and_compare() {
    let d = tempfile::tempdir().unwrap();
    synth_small(d.path(), "m.saqt", &["--inject", "layer=1,kind=out,channel=0,scale=200"]);
    ok(d.path(), &["profile", "--model", "m.saqt", "--seed-stream", "7", "--len", "40", "--out", "r.json"]);
    for (name, extra) in [
        ("full", vec!["--full"]),
        ("naive", vec!["--uniform", "--name", "naive"]),
        ("mix", vec![]),
        ("tok", vec!["--uniform", "--granularity", "per-token", "--name", "tok"]),
    ] {
        let out = format!("{name}.json");
        let mut args = vec!["plan", "--report", "r.json", "--out", out.as_str()];
        args.extend(extra);
        ok(d.path(), &args);
        let metrics = format!("{name}.metrics.json");
        ok(d.path(), &["eval", "--model", "m.saqt", "--plan", &out, "--seed-stream", "7", "--len", "40", "--out", &metrics]);
    }
    let full = json(&d.path().join("full.metrics.json"));
    assert_eq!(full["logit_mse"], 0.0);
    assert_eq!(full["ppl_delta"], 0.0);
    assert_eq!(full["schema_version"], 1);
    assert_eq!(full["manifest"]["command"], "eval");
    assert_eq!(full["manifest"]["inputs"]["tokens"], "seed-stream:7:40");
    assert_eq!(full["manifest"]["plan"], "full.json");
    assert!(full["manifest"].get("duration_ms").is_none());
    assert!(json(&d.path().join("naive.metrics.json"))["logit_mse"].as_f64().unwrap() > 0.0);

    let one = ok(d.path(), &["compare", "--metrics", "naive.metrics.json", "--out", "one.csv"]);
    assert_eq!(one.lines().count(), 2);
    ok(d.path(), &[
        "compare", "--metrics", "full.metrics.json", "naive.metrics.json", "mix.metrics.json", "tok.metrics.json", "--out", "t.csv",
    ]);
    let table = fs::read_to_string(d.path().join("t.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "plan,model_id,stream_id,tokens,ppl_full,ppl,ppl_delta,logit_mse,logit_max_abs_err");
    let plans: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(plans, ["full", "naive", "mix", "tok"]);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 9));
    // the same metrics file twice is a duplicate plan
    assert_eq!(code(d.path(), &["compare", "--metrics", "mix.metrics.json", "mix.metrics.json", "--out", "x.csv"]), 3);
}

#[test]
fn static_calibration_round_trip() {
    let d = tempfile::tempdir().unwrap();
    synth_small(d.path(), "m.saqt", &[]);
    ok(d.path(), &["calibrate", "--model", "m.saqt", "--seed-stream", "3", "--len", "32", "--out", "s.saqt"]);
    let m = load_bundle(&d.path().join("s.saqt")).unwrap();
    assert_eq!(m.static_scales.as_ref().unwrap().len(), 3 * 7);
    ok(d.path(), &["profile", "--model", "s.saqt", "--seed-stream", "3", "--len", "32", "--out", "r.json"]);
    ok(d.path(), &["plan", "--report", "r.json", "--uniform", "--scale", "static", "--out", "p.json"]);
    ok(d.path(), &["eval", "--model", "s.saqt", "--plan", "p.json", "--seed-stream", "3", "--len", "32", "--out", "e.json"]);
    // the uncalibrated model has no scales to offer
    assert_eq!(code(d.path(), &["eval", "--model", "m.saqt", "--plan", "p.json", "--seed-stream", "3", "--out", "e2.json"]), 3);
}

#[test]
fn token_file_input() {
    let d = tempfile::tempdir().unwrap();
    synth_small(d.path(), "m.saqt", &[]);
    fs::write(d.path().join("t.txt"), "0 5 9\n12 63 1\n").unwrap();
    ok(d.path(), &["profile", "--model", "m.saqt", "--tokens", "t.txt", "--out", "r.json"]);
    assert_eq!(json(&d.path().join("r.json.manifest.json"))["inputs"]["tokens"], "t.txt");
    fs::write(d.path().join("bad.txt"), "0 64").unwrap();
    assert_eq!(code(d.path(), &["profile", "--model", "m.saqt", "--tokens", "bad.txt", "--out", "r2.json"]), 3);
}

#[test]
fn failures_map_to_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth_small(p, "m.saqt", &[]);
    ok(p, &["profile", "--model", "m.saqt", "--seed-stream", "1", "--len", "16", "--out", "r.json"]);
    ok(p, &["plan", "--report", "r.json", "--out", "mix.json"]);

    // usage
    assert_eq!(code(p, &["plan", "--report", "r.json", "--random", "--out", "x.json"]), 2);
    assert_eq!(code(p, &["plan", "--report", "r.json", "--uniform", "--full", "--out", "x.json"]), 2);
    assert_eq!(code(p, &["profile", "--model", "m.saqt", "--out", "x.json"]), 2);
    assert_eq!(code(p, &["profile", "--model", "m.saqt", "--corpus", "--seed-stream", "1", "--out", "x.json"]), 2);
    assert_eq!(code(p, &["synth", "--inject", "layer=9,kind=down,channel=0,scale=3", "--out", "x.saqt"]), 2);
    assert_eq!(code(p, &["synth", "--inject", "layer=1,kind=down", "--out", "x.saqt"]), 2);
    assert_eq!(code(p, &["frobnicate"]), 2);

    // data errors
    fs::write(p.join("bad.txt"), "0 64").unwrap();
    assert_eq!(code(p, &["eval", "--model", "m.saqt", "--plan", "mix.json", "--tokens", "bad.txt", "--out", "x.json"]), 3);
    fs::write(p.join("junk.saqt"), b"not a container").unwrap();
    assert_eq!(code(p, &["eval", "--model", "junk.saqt", "--plan", "mix.json", "--seed-stream", "1", "--out", "x.json"]), 3);
    assert_eq!(code(p, &["eval", "--model", "missing.saqt", "--plan", "mix.json", "--seed-stream", "1", "--out", "x.json"]), 3);
    // a plan with layer-3 sites does not fit a 1-layer model
    synth_small(p, "deep.saqt", &["--inject", "layer=3,kind=down,channel=1,scale=400"]);
    ok(p, &["profile", "--model", "deep.saqt", "--seed-stream", "1", "--len", "16", "--out", "deep.json"]);
    ok(p, &["plan", "--report", "deep.json", "--out", "deep.plan.json"]);
    let mut args = vec!["synth", "--layers", "1"];
    args.extend(&SMALL[2..]);
    args.extend(["--out", "one.saqt"]);
    ok(p, &args);
    assert_eq!(code(p, &["eval", "--model", "one.saqt", "--plan", "deep.plan.json", "--seed-stream", "1", "--out", "x.json"]), 3);
    assert!(!p.join("x.json").exists());
}

#[test]
fn fp16_overflow_is_an_invariant_violation() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    // the up spike passes unnormalized into the down projection input
    synth_small(p, "m.saqt", &["--inject", "layer=1,kind=up,channel=2,scale=1000000"]);
    ok(p, &["profile", "--model", "m.saqt", "--seed-stream", "1", "--len", "16", "--out", "r.json"]);
    ok(p, &["plan", "--report", "r.json", "--out", "mix.json"]);
    let plan = PrecisionPlan::from_json(&fs::read_to_string(p.join("mix.json")).unwrap()).unwrap();
    assert!(plan.high_precision_sites().contains(&(1, SiteKind::Down)));
    let out = run(p, &["eval", "--model", "m.saqt", "--plan", "mix.json", "--seed-stream", "1", "--len", "16", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!p.join("x.json").exists());
}
