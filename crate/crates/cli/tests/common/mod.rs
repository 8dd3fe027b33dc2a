#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

pub const JOINTS: [&str; 4] = ["Spine", "Neck", "LeftArm", "RightArm"];

/// A five-joint skeleton (root plus `JOINTS` chained off it) swaying with sines.
pub fn synthetic_bvh(seconds: f64, fps: f64, seed: f64) -> String {
    let mut s = String::from("HIERARCHY\nROOT Hips\n{\n\tOFFSET 0 0 0\n");
    s.push_str("\tCHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation\n");
    for (i, j) in JOINTS.iter().enumerate() {
        let _ = writeln!(s, "\tJOINT {j}\n\t{{\n\t\tOFFSET 0 {} 0", 10 + i);
        s.push_str("\t\tCHANNELS 3 Zrotation Xrotation Yrotation\n");
        s.push_str("\t\tEnd Site\n\t\t{\n\t\t\tOFFSET 0 5 0\n\t\t}\n\t}\n");
    }
    s.push_str("}\nMOTION\n");
    let frames = (seconds * fps).round() as usize;
    let _ = writeln!(s, "Frames: {frames}\nFrame Time: {}", 1.0 / fps);
    for f in 0..frames {
        let t = f as f64 / fps;
        let mut row = vec![0.3 * t, 90.0 + (t + seed).sin(), 0.1 * t, 5.0 * (0.5 * t).sin(), 2.0, 10.0 * t];
        for k in 0..JOINTS.len() {
            let w = 1.0 + 0.4 * k as f64 + 0.1 * seed;
            row.extend([20.0 * (w * t).sin(), 15.0 * (w * t + 1.0).cos(), 5.0 * (2.0 * w * t).sin()]);
        }
        let line: Vec<String> = row.iter().map(|v| format!("{v:.5}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Click train at `interval` seconds over a quiet tone.
pub fn click_wave(seconds: f64, rate: u32, interval: f64) -> Vec<f32> {
    let n = (seconds * rate as f64) as usize;
    let mut w: Vec<f32> = (0..n)
        .map(|i| 0.01 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / rate as f64).sin() as f32)
        .collect();
    let mut t = 0.25;
    while t < seconds {
        let i = (t * rate as f64) as usize;
        for j in 0..(rate as usize / 400) {
            if i + j < n {
                w[i + j] = if j % 2 == 0 { 0.8 } else { -0.8 };
            }
        }
        t += interval;
    }
    w
}

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dim-gesture"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{:?} failed\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// `raw/bvh/take{k}.bvh` and `raw/wav/take{k}.wav` for `k < takes`.
pub fn write_raw_corpus(root: &Path, takes: usize, seconds: f64) {
    let (bvh_dir, wav_dir) = (root.join("bvh"), root.join("wav"));
    std::fs::create_dir_all(&bvh_dir).unwrap();
    std::fs::create_dir_all(&wav_dir).unwrap();
    for k in 0..takes {
        std::fs::write(bvh_dir.join(format!("take{k}.bvh")), synthetic_bvh(seconds, 60.0, k as f64)).unwrap();
        let wave = click_wave(seconds, 44_100, 0.4 + 0.1 * k as f64);
        dim_gesture::audio::write_wav(wav_dir.join(format!("take{k}.wav")), &wave, 44_100).unwrap();
    }
}
