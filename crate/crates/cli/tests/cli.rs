use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[model]
blocks = 1
[pretrain]
steps = 2
batch_size = 2
[train]
steps = 2
batch_size = 2
[adapt]
steps = 2
batch_size = 2
[sample]
steps = 3
"#;

fn refvfx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refvfx"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = refvfx(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = refvfx(&["infer", "--data", "x", "--out", "y"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
    let out = refvfx(&["train", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope");
    let out = refvfx(&["infer", "--checkpoint", p(&missing), "--data", p(&missing), "--out", p(&d.path().join("o"))]);
    assert!(!out.status.success());
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "[train]\nsteps = \"many\"\n").unwrap();
    assert!(!refvfx(&["--config", p(&bad), "generate-data", "--out", p(&d.path().join("g"))]).status.success());
}

#[test]
fn oracle_scores_ground_truth_at_one() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    ok(&["generate-data", "--out", p(&data), "--pairs", "10", "--families", "dissolve,explode,melt,freeze,sparkle", "--seed", "4"]);
    let text = ok(&["evaluate", "--judge", "oracle", "--data", p(&data), "--out", p(&d.path().join("eval"))]);
    assert!(text.contains("vfx_cons = 1.0000"), "{text}");
    let csv = fs::read_to_string(d.path().join("eval/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let saved = fs::read_to_string(d.path().join("eval/report.toml")).unwrap();
    assert!(saved.contains("[run"));
}

#[test]
fn export_png_and_gif() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    ok(&["generate-data", "--out", p(&data), "--pairs", "1"]);
    let pngs = d.path().join("png");
    ok(&["export", "--input", p(&data), "--format", "png-strip", "--out", p(&pngs)]);
    let files = read_dir_bytes(&pngs);
    assert_eq!(files.len(), 16);

    // decode one frame and compare against the source video
    let decoder = png::Decoder::new(std::io::Cursor::new(files[0].1.clone()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (16, 16));
    let (_, pairs) = refvfx::data::load_dataset(&data).unwrap();
    let v = &pairs[0].reference.video;
    for (i, &b) in buf[..info.buffer_size()].iter().enumerate() {
        let (y, x, c) = (i / 48, (i / 3) % 16, i % 3);
        let src = (v.get(0, y, x, c).clamp(-1.0, 1.0) + 1.0) * 0.5;
        assert!((b as f64 / 255.0 - src).abs() <= 1.0 / 255.0 + 1e-12);
    }

    let gifs = d.path().join("gif");
    ok(&["export", "--input", p(&data), "--format", "gif", "--out", p(&gifs), "--scale", "4"]);
    assert_eq!(read_dir_bytes(&gifs).len(), 2);
    let again = d.path().join("gif2");
    ok(&["export", "--input", p(&data), "--format", "gif", "--out", p(&again), "--scale", "4"]);
    assert_eq!(read_dir_bytes(&gifs), read_dir_bytes(&again));

    let empty = d.path().join("empty");
    ok(&["generate-data", "--out", p(&empty), "--pairs", "0"]);
    let none = d.path().join("none");
    ok(&["export", "--input", p(&empty), "--format", "gif", "--out", p(&none)]);
    assert!(!none.exists());
}

#[test]
fn pipeline_is_byte_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let c = p(&cfg);
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let root = d.path().join(run);
        let data = root.join("data");
        let ckpt = root.join("ckpt");
        let ce = root.join("ce");
        let samples = root.join("samples");
        ok(&["--config", c, "generate-data", "--out", p(&data), "--pairs", "4", "--families", "sparkle,melt"]);
        ok(&["--config", c, "train", "--data", p(&data), "--out", p(&ckpt)]);
        ok(&["--config", c, "adapt", "--checkpoint", p(&ckpt), "--data", p(&data), "--index", "0", "--out", p(&ce)]);
        let effect = fs::read_dir(&ce).unwrap().next().unwrap().unwrap().path();
        ok(&["--config", c, "infer", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&samples), "--count", "2", "--with-ce", p(&effect)]);
        let eval = root.join("eval");
        ok(&["--config", c, "evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--clips", "2", "--out", p(&eval)]);
        runs.push([read_dir_bytes(&data), read_dir_bytes(&ckpt), read_dir_bytes(&effect), read_dir_bytes(&samples), read_dir_bytes(&eval)]);
    }
    assert_eq!(runs[0], runs[1]);
    let manifest = String::from_utf8(runs[0][1].iter().find(|f| f.0 == "checkpoint.toml").unwrap().1.clone()).unwrap();
    assert!(manifest.contains("[run"), "resolved config embedded");
}

#[test]
fn flags_override_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let data = d.path().join("data");
    ok(&["--config", p(&cfg), "generate-data", "--out", p(&data), "--pairs", "2"]);
    let ckpt = d.path().join("ckpt");
    ok(&["--config", p(&cfg), "--no-attn-mask", "--steps", "1", "--seed", "11", "train", "--data", p(&data), "--out", p(&ckpt)]);
    let m = fs::read_to_string(ckpt.join("checkpoint.toml")).unwrap();
    let m: toml::Table = toml::from_str(&m).unwrap();
    let run = m["run"].as_table().unwrap();
    assert_eq!(run["seed"].as_integer(), Some(11));
    assert_eq!(run["train"]["steps"].as_integer(), Some(1));
    assert_eq!(run["train"]["mask_mode"].as_str(), Some("none"));
    let loss = fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 2 + 1);
}

#[test]
fn bench_attention_reports_exact_ratio() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("bench.toml");
    let text = ok(&["bench-attention", "--layout", "2,2,3,3", "--repeats", "1", "--head-dim", "4", "--heads", "1", "--out", p(&out)]);
    let t: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(t["macs_full"].as_integer(), Some(400));
    assert_eq!(t["macs_decomposed"].as_integer(), Some(276));
    assert_eq!(fs::read_to_string(out).unwrap(), text);
}
