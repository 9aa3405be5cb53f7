use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hdrfuse_cli::commands;
use hdrfuse_cli::config::RunConfig;
use hdrfuse_core::dataset::list_samples;
use hdrfuse_core::imgio::{write_pfm, HdrImage};
use hdrfuse_core::scenes::{generate_scene_set, SceneConfig};
use serde_json::Value;

fn hdrfuse(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdrfuse"))
        .args(args)
        .env("HDRFUSE_DATA_ROOT", root)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("error JSON on stderr");
    serde_json::from_str(line).expect("valid JSON")
}

fn write_hdr_folder(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    let scenes = generate_scene_set(n, &SceneConfig { size: 32, dr_stops: [9.0, 12.0], max_lights: 2 }, 5).unwrap();
    for (i, s) in scenes.iter().enumerate() {
        write_pfm(s, dir.join(format!("hdr_{i:02}.pfm"))).unwrap();
    }
}

fn config(root: &Path, k: usize) -> RunConfig {
    let sets = vec![format!("k={k}"), format!("data_root={}", serde_json::to_string(root.to_str().unwrap()).unwrap())];
    RunConfig::load(None, &sets, Some(3)).unwrap()
}

#[test]
fn synth_counts_and_reproducible_meta() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("hdr_in");
    write_hdr_folder(&input, 10);
    for k in [3, 5] {
        let cfg = config(tmp.path(), k);
        let out = tmp.path().join(format!("k{k}"));
        commands::cmd_synth(&cfg, Some(&input), Some(&out)).unwrap();
        let samples = list_samples(&out).unwrap();
        assert_eq!(samples.len(), 10);
        for s in &samples {
            let ppms = fs::read_dir(s).unwrap().flatten().filter(|e| e.path().extension().is_some_and(|x| x == "ppm")).count();
            assert_eq!(ppms, k);
        }
        let first: Vec<Vec<u8>> = samples.iter().map(|s| fs::read(s.join("meta.json")).unwrap()).collect();
        commands::cmd_synth(&cfg, Some(&input), Some(&out)).unwrap();
        let second: Vec<Vec<u8>> = samples.iter().map(|s| fs::read(s.join("meta.json")).unwrap()).collect();
        assert_eq!(first, second);
    }
}

#[test]
fn synth_rejects_an_empty_folder() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = hdrfuse(&["synth", "--input", empty.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "invalid_argument");
}

#[test]
fn missing_prerequisites_name_the_command_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, needs) in [
        (vec!["finetune-decoder"], "pretrain-vae"),
        (vec!["train-denoiser", "--direction", "highlight"], "pretrain-vae"),
        (vec!["infer"], "pretrain-vae"),
    ] {
        let out = hdrfuse(&cmd, tmp.path());
        assert_eq!(out.status.code(), Some(1), "{cmd:?}");
        let err = error_json(&out);
        assert_eq!(err["error"]["kind"], "missing_checkpoint");
        assert!(err["error"]["message"].as_str().unwrap().contains(needs), "{err}");
    }
}

#[test]
fn bad_overrides_are_reported_as_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hdrfuse(&["gen-scenes", "--set", "scenes.colour=1"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn gen_scenes_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["gen-scenes", "--set", "scenes.train=3", "--set", "scenes.test=2", "--set", "scenes.size=32", "--seed", "4"];
    let read_all = || {
        let mut files: Vec<_> = ["train", "test"]
            .iter()
            .flat_map(|s| fs::read_dir(tmp.path().join("scenes").join(s)).unwrap().flatten().map(|e| e.path()))
            .collect();
        files.sort();
        files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    assert!(hdrfuse(&args, tmp.path()).status.success());
    let first = read_all();
    assert_eq!(first.len(), 5);
    assert!(hdrfuse(&args, tmp.path()).status.success());
    assert_eq!(read_all(), first);
}

#[test]
fn scanline_csv_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let img = HdrImage::from_fn(6, 3, |x, y| [x as f32 + y as f32, 1.0, 0.5]).unwrap();
    let path = tmp.path().join("img.pfm");
    write_pfm(&img, &path).unwrap();
    let plot = tmp.path().join("plots/row.ppm");
    let out = hdrfuse(&["scanline", "--image", path.to_str().unwrap(), "--row", "1", "--plot", plot.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["width"], 6);
    let csv = fs::read_to_string(tmp.path().join("img.row1.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row,x,luminance");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("1,0,"));
    assert!(plot.is_file());
    let out = hdrfuse(&["scanline", "--image", path.to_str().unwrap(), "--row", "3"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_table_reports_mean_and_sd() {
    let summary = serde_json::json!({
        "log_rmse": { "mean": 1.5, "sd": 0.25, "n": 2 },
        "clipped_log_rmse": Value::Null,
    });
    let table = commands::format_eval_table(&summary);
    assert!(table.contains("log_rmse             1.500 ± 0.250"));
    assert!(table.contains("clipped_log_rmse     undefined"));
}
