use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "scene": {"height": 16, "width": 16, "min_size": 4, "max_size": 8},
  "net": {"width": 4, "depth": 1, "feature_dim": 4, "time_dim": 8},
  "train": {"steps": 4, "batch_size": 2, "checkpoint_every": 0},
  "sampler": {"steps": 3},
  "data": {"train_size": 12, "val_size": 4, "train_videos": 2, "val_videos": 2},
  "video": {
    "frames": 3,
    "train": {"steps": 2, "batch_size": 2, "checkpoint_every": 0},
    "sampler": {"steps_first": 3, "steps_rest": 2}
  }
}"#;

fn pandiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pandiff"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pandiff(dir, args);
    assert!(
        out.status.success(),
        "pandiff {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn log_without_timing(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn gendata_is_reproducible_and_sized() {
    let dir = setup();
    let d = dir.path();
    ok(
        d,
        &[
            "gendata",
            "--config",
            "tiny.json",
            "--out",
            "a",
            "--split",
            "val",
            "--size",
            "5",
        ],
    );
    ok(
        d,
        &[
            "gendata",
            "--config",
            "tiny.json",
            "--out",
            "b",
            "--split",
            "val",
            "--size",
            "5",
        ],
    );
    assert_eq!(files(&d.join("a")), files(&d.join("b")));
    let manifest = fs::read_to_string(d.join("a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    assert!(manifest.starts_with("index,video,frame,image,mask\n"));
    let effective = fs::read_to_string(d.join("a/effective_config.json")).unwrap();
    assert!(
        effective.contains("\"pixel_noise\""),
        "defaults are spelled out"
    );
}

#[test]
fn bad_configs_fail_with_a_message() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"net": {"widht": 4}}"#).unwrap();
    let out = pandiff(d, &["gendata", "--config", "bad.json", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
    let out = pandiff(
        d,
        &[
            "train",
            "--config",
            "tiny.json",
            "--data",
            "missing",
            "--out",
            "r",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.csv"));
}

#[test]
fn image_pipeline_end_to_end() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gendata", "--config", "tiny.json", "--out", "train"]);
    ok(
        d,
        &[
            "gendata",
            "--config",
            "tiny.json",
            "--out",
            "val",
            "--split",
            "val",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--config",
            "tiny.json",
            "--data",
            "train",
            "--out",
            "run",
            "--loss",
            "l2",
            "--input-scale",
            "0.3",
        ],
    );
    assert_eq!(
        fs::read_to_string(d.join("run/train_log.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    let effective = fs::read_to_string(d.join("run/effective_config.json")).unwrap();
    assert!(effective.contains("\"l2\"") && effective.contains("0.3"));

    let sample = |out: &str| {
        ok(
            d,
            &[
                "sample",
                "--config",
                "tiny.json",
                "--checkpoint",
                "run/last.bpck",
                "--input",
                "val",
                "--out",
                out,
                "--seed",
                "5",
                "--dump-trajectory",
                "0,2",
            ],
        )
    };
    sample("p1");
    sample("p2");
    let masks = |p: &str| files(&d.join(p).join("masks"));
    assert_eq!(masks("p1").len(), 4);
    assert_eq!(masks("p1"), masks("p2"), "same seed, same bytes");
    assert_eq!(files(&d.join("p1/overlays")).len(), 4);
    let traj = files(&d.join("p1/trajectory"));
    assert_eq!(
        traj.len(),
        4 * 2 * 2,
        "mask and png for two steps of four images"
    );
    assert!(traj.iter().any(|(n, _)| n.ends_with("_step002.png")));

    let table = ok(
        d,
        &[
            "eval",
            "--config",
            "tiny.json",
            "--pred",
            "val",
            "--gt",
            "val",
            "--out",
            "self",
        ],
    );
    assert!(table.contains("100.0"), "{table}");
    let csv = fs::read_to_string(d.join("self/report_pq.csv")).unwrap();
    assert!(csv.starts_with("label,pq,pq_thing,pq_stuff\n"));
    ok(
        d,
        &[
            "eval",
            "--config",
            "tiny.json",
            "--pred",
            "p1",
            "--gt",
            "val",
        ],
    );
    assert!(d.join("p1/report_pq.txt").exists());

    fs::remove_file(d.join("p2/masks/00000.panm")).unwrap();
    let out = pandiff(
        d,
        &[
            "eval",
            "--config",
            "tiny.json",
            "--pred",
            "p2",
            "--gt",
            "val",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing prediction"));
}

#[test]
fn resumed_training_reproduces_the_log() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gendata", "--config", "tiny.json", "--out", "train"]);
    let train = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--config",
            "tiny.json",
            "--data",
            "train",
            "--out",
            out,
            "--steps",
            "6",
            "--checkpoint-every",
            "3",
        ];
        args.extend_from_slice(extra);
        ok(d, &args)
    };
    train("full", &[]);
    train("cut", &[]);
    // Pretend the second run died after its step-3 checkpoint.
    let resumed = d.join("cut/ckpt_000003.bpck");
    fs::copy(&resumed, d.join("resume_from.bpck")).unwrap();
    train("cut", &["--resume", "resume_from.bpck"]);
    assert_eq!(
        log_without_timing(&d.join("full/train_log.csv")),
        log_without_timing(&d.join("cut/train_log.csv"))
    );
    assert_eq!(
        fs::read(d.join("full/last.bpck")).unwrap(),
        fs::read(d.join("cut/last.bpck")).unwrap()
    );

    let out = pandiff(
        d,
        &[
            "train",
            "--config",
            "tiny.json",
            "--data",
            "train",
            "--out",
            "cut",
            "--steps",
            "6",
            "--lr",
            "0.5",
            "--resume",
            "resume_from.bpck",
        ],
    );
    assert!(
        !out.status.success(),
        "changed settings are a resume mismatch"
    );
}

#[test]
fn video_pipeline_end_to_end() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gendata", "--config", "tiny.json", "--out", "train"]);
    ok(
        d,
        &[
            "gendata",
            "--config",
            "tiny.json",
            "--out",
            "vtrain",
            "--video",
        ],
    );
    ok(
        d,
        &[
            "gendata",
            "--config",
            "tiny.json",
            "--out",
            "vval",
            "--video",
            "--split",
            "val",
        ],
    );
    assert_eq!(
        fs::read_to_string(d.join("vval/manifest.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 2 * 3
    );
    ok(
        d,
        &[
            "train",
            "--config",
            "tiny.json",
            "--data",
            "train",
            "--out",
            "img",
        ],
    );
    let out = pandiff(
        d,
        &[
            "train",
            "--config",
            "tiny.json",
            "--data",
            "vtrain",
            "--out",
            "vid",
            "--video",
        ],
    );
    assert!(!out.status.success(), "video training needs --init");
    ok(
        d,
        &[
            "train",
            "--config",
            "tiny.json",
            "--data",
            "vtrain",
            "--out",
            "vid",
            "--video",
            "--init",
            "img/last.bpck",
        ],
    );
    let sample = |out: &str| {
        ok(
            d,
            &[
                "sample",
                "--config",
                "tiny.json",
                "--checkpoint",
                "vid/last.bpck",
                "--input",
                "vval",
                "--out",
                out,
                "--video",
                "--steps-first",
                "4",
                "--steps-rest",
                "2",
            ],
        )
    };
    sample("vp1");
    sample("vp2");
    assert_eq!(files(&d.join("vp1/masks")), files(&d.join("vp2/masks")));
    let jf = ok(
        d,
        &[
            "eval",
            "--config",
            "tiny.json",
            "--pred",
            "vp1",
            "--gt",
            "vval",
            "--mode",
            "jf",
        ],
    );
    assert!(jf.contains("J&F") && !jf.contains("Track"));
    let track = ok(
        d,
        &[
            "eval",
            "--config",
            "tiny.json",
            "--pred",
            "vval",
            "--gt",
            "vval",
            "--mode",
            "track",
        ],
    );
    assert!(track.contains("Track"), "{track}");
    assert!(track.lines().nth(1).unwrap().contains("100.0"));
    let csv = fs::read_to_string(d.join("vval/report_track.csv")).unwrap();
    assert!(csv
        .lines()
        .next()
        .unwrap()
        .ends_with("track_consistency,transitions,consistent"));
}

#[test]
fn ablation_grid_writes_one_row_per_cell() {
    let dir = setup();
    let d = dir.path();
    let stdout = ok(
        d,
        &[
            "ablate",
            "--config",
            "tiny.json",
            "--out",
            "abl",
            "--scales",
            "0.1,0.3",
            "--losses",
            "ce,l2",
            "--weight-powers",
            "0.2",
            "--steps",
            "1,2",
            "--train-steps",
            "2",
            "--train-size",
            "6",
            "--val-size",
            "2",
        ],
    );
    let csv = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 2 + 1 + 2);
    for table in ["input_scale", "loss", "loss_weight_p", "sampling_steps"] {
        assert!(
            stdout.contains("trend: PQ") && stdout.contains(table),
            "{table}"
        );
    }
    assert!(
        csv.contains(",true"),
        "repeated settings reuse a trained model"
    );
    assert!(d.join("abl/grid.json").exists());
}
