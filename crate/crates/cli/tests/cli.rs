mod common;

use dim_gesture::config::{Config, Preset};
use dim_gesture::data::read_manifest;
use dim_gesture::formats::{read_gesture, write_features, FrameSequence};
use ndarray::Array2;

use common::{bin, run_ok, stderr, synthetic_bvh, write_raw_corpus, JOINTS};

#[test]
fn prepare_cuts_paired_takes_into_clips() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    write_raw_corpus(&raw, 2, 25.0);
    // an unpaired file is skipped with a warning
    std::fs::write(raw.join("bvh/lonely.bvh"), synthetic_bvh(5.0, 60.0, 9.0)).unwrap();
    let out = dir.path().join("data");
    let res = run_ok(
        bin().env("RUST_LOG", "warn").args(["prepare", "--clip-s", "10"]).arg("--bvh-dir").arg(raw.join("bvh"))
            .arg("--wav-dir").arg(raw.join("wav")).arg("--out").arg(&out),
    );
    assert!(stderr(&res).contains("lonely"), "{}", stderr(&res));
    let rows = read_manifest(out.join("manifest.csv")).unwrap();
    // 25 s takes give two whole 10 s clips each
    assert_eq!(rows.len(), 4);
    let ids: Vec<&str> = rows.iter().map(|r| r.clip_id.as_str()).collect();
    assert_eq!(ids, ["take0_000", "take0_001", "take1_000", "take1_001"]);
    for r in &rows {
        let g = read_gesture(out.join(&r.gesture_path)).unwrap();
        assert_eq!(g.frames(), 200);
        assert_eq!(g.dims(), 3 * (JOINTS.len() + 1) + 6);
        assert_eq!(g.rate_hz, 20.0);
        let (wave, rate) = dim_gesture::audio::read_wav(out.join(&r.audio_path)).unwrap();
        assert_eq!((wave.len(), rate), (160_000, 16_000));
    }
    assert!(out.join("skeleton.bvh").exists());
}

#[test]
fn prepare_on_empty_dirs_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (b, w) = (dir.path().join("b"), dir.path().join("w"));
    std::fs::create_dir_all(&b).unwrap();
    std::fs::create_dir_all(&w).unwrap();
    let out = dir.path().join("out");
    run_ok(bin().arg("prepare").arg("--bvh-dir").arg(&b).arg("--wav-dir").arg(&w).arg("--out").arg(&out));
    assert!(read_manifest(out.join("manifest.csv")).unwrap().is_empty());
}

#[test]
fn corrupt_bvh_fails_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    write_raw_corpus(&raw, 1, 3.0);
    std::fs::write(raw.join("bvh/take0.bvh"), "HIERARCHY\nROOT Hips\n{\n\tOFFSET 0 zero 0\n").unwrap();
    let out = bin()
        .arg("prepare")
        .arg("--bvh-dir")
        .arg(raw.join("bvh"))
        .arg("--wav-dir")
        .arg(raw.join("wav"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("take0.bvh"), "{err}");
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error: parse: "), "{last}");
}

#[test]
fn init_config_writes_a_loadable_preset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    run_ok(bin().args(["init-config", "--preset", "tiny", "--manifest", "m.csv"]).arg("--out").arg(&path));
    let cfg = Config::load(&path).unwrap();
    let mut expected = Config::preset(Preset::Tiny);
    // relative manifest paths resolve against the config file
    expected.data.manifest = dir.path().join("m.csv");
    assert_eq!(cfg, expected);
}

#[test]
fn config_missing_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let json = Config::preset(Preset::Tiny).to_json().replace("\"d_state\"", "\"d_statez\"");
    std::fs::write(&path, json).unwrap();
    let out = bin().arg("train").arg("--config").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("d_state"), "{err}");
    assert_eq!(err.lines().filter(|l| l.starts_with("error:")).count(), 1);
}

#[test]
fn check_accepts_and_rejects_feature_files() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.dimf");
    write_features(&good, &FrameSequence::new(Array2::from_elem((50, 16), 0.5), 50.0)).unwrap();
    let out = run_ok(bin().args(["export-features", "--check", "--dims", "16"]).arg(&good));
    assert!(String::from_utf8_lossy(&out.stdout).contains("50x16"));

    let wrong = bin().args(["export-features", "--check", "--dims", "1024"]).arg(&good).output().unwrap();
    assert!(!wrong.status.success());
    assert!(stderr(&wrong).contains("1024"));

    let bad = dir.path().join("bad.dimf");
    std::fs::write(&bad, b"DIMX\x01\0\0\0").unwrap();
    let out = bin().args(["export-features", "--check"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bad.dimf"), "{}", stderr(&out));
}

#[test]
fn thread_variable_must_be_positive() {
    let out = bin().env("DIM_GESTURE_THREADS", "zero").args(["export-features", "--check", "x"]).output().unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("DIM_GESTURE_THREADS"));
}

fn eval_fixture(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let raw = dir.join("raw");
    write_raw_corpus(&raw, 2, 20.0);
    let data = dir.join("data");
    run_ok(bin().args(["prepare", "--clip-s", "10"]).arg("--bvh-dir").arg(raw.join("bvh"))
        .arg("--wav-dir").arg(raw.join("wav")).arg("--out").arg(&data));
    let mut cfg = Config::preset(Preset::Tiny);
    cfg.metrics.encoder_steps = 20;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    (data, path)
}

#[test]
fn eval_reports_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = eval_fixture(dir.path());
    let csv_path = dir.path().join("eval.csv");
    let out = run_ok(
        bin().arg("eval").arg("--real-dir").arg(data.join("gestures")).arg("--gen-dir").arg(data.join("gestures"))
            .arg("--wav-dir").arg(data.join("audio")).arg("--config").arg(&config).arg("--out").arg(&csv_path),
    );
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv, String::from_utf8_lossy(&out.stdout));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,value,n_real,n_gen,config_hash"));
    let hash = Config::load(&config).unwrap().hash();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["fgd_raw", "fgd_feature", "beat_align", "beat_align_real"]);
    for r in &rows {
        assert_eq!(&r[2..], ["4", "4", hash.as_str()]);
    }
    let value = |i: usize| rows[i][1].parse::<f64>().unwrap();
    // generated == real
    assert!(value(0).abs() <= 1e-6 && value(1).abs() <= 1e-6);
    assert_eq!(value(2), value(3));
    assert!((0.0..=1.0).contains(&value(2)));
}

#[test]
fn eval_with_empty_generated_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = eval_fixture(dir.path());
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = bin().arg("eval").arg("--real-dir").arg(data.join("gestures")).arg("--gen-dir").arg(&empty)
        .arg("--wav-dir").arg(data.join("audio")).arg("--config").arg(&config).output().unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error: empty: "), "{}", stderr(&out));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, Config::preset(Preset::Tiny).to_json()).unwrap();
    let csv_path = dir.path().join("bench.csv");
    run_ok(
        bin().arg("bench").arg("--config").arg(&cfg_path)
            .args(["--variant", "convse", "--lengths", "40,80", "--reps", "2", "--sampling-steps", "3", "--channels", "9"])
            .arg("--out").arg(&csv_path),
    );
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("variant,length,"));
    for (line, len) in lines[1..].iter().zip(["40", "80"]) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!((f[0], f[1]), ("convse", len));
        assert!(f[2..].iter().all(|v| v.parse::<f64>().is_ok()), "{line}");
    }
}
