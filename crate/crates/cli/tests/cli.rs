use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selseg_core::image::{encode_pgm, load_image};
use selseg_core::metrics::dice;
use selseg_core::nets::{train, Checkpoint, Method};
use selseg_core::pipeline::MethodConfig;
use selseg_core::{FieldKind, MarkerSet, ScalarField};
use tempfile::TempDir;

fn selseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selseg")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn synth(dir: &Path, kind: &str, size: usize, noise: f64, seed: u64, count: u64) {
    assert_ok(&selseg(&[
        "synth",
        "--kind",
        kind,
        "--size",
        &size.to_string(),
        "--noise",
        &noise.to_string(),
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
        "--out",
        p(dir),
    ]));
}

fn mask(path: &Path) -> ScalarField {
    let img = load_image(path).unwrap();
    let (h, w) = img.dims();
    ScalarField::new(h, w, img.data().iter().map(|v| (*v > 0.5) as u8 as f64).collect(), FieldKind::Mask).unwrap()
}

fn write_mask(path: &Path, h: usize, w: usize, on: &[usize]) {
    let mut v = vec![0.0; h * w];
    for &i in on {
        v[i] = 1.0;
    }
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, encode_pgm(h, w, &v)).unwrap();
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 4] = [
        ("segment", &["--image", "--markers", "--method", "--weights", "--config", "--gt", "--seed", "--out"]),
        ("train", &["--method", "--data", "--config", "--seed", "--out"]),
        ("synth", &["--kind", "--size", "--noise", "--seed", "--count", "--out"]),
        ("eval", &["--pred", "--gt", "--out", "--label"]),
    ];
    for (cmd, flags) in cases {
        let o = selseg(&[cmd, "--help"]);
        assert_ok(&o);
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    assert_ok(&selseg(&["--help"]));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(selseg(&[]).status.code(), Some(2));
    assert_eq!(selseg(&["segment", "--image", "x.pgm"]).status.code(), Some(2));
    assert_eq!(selseg(&["synth", "--kind", "square", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn shipped_example_config_is_the_default() {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.cfg")).unwrap();
    assert_eq!(MethodConfig::parse_kv(&text).unwrap(), MethodConfig::default());
}

#[test]
fn synth_noiseless_disc_truth_is_thresholded_image() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "disc", 32, 0.0, 5, 1);
    let img = load_image(&dir.path().join("disc-5.pgm")).unwrap();
    let gt = mask(&dir.path().join("gt/disc-5.pgm"));
    for (v, t) in img.data().iter().zip(gt.data()) {
        assert_eq!((*v > 0.5) as u8 as f64, *t);
    }
    let m = std::fs::read_to_string(dir.path().join("disc-5.json")).unwrap();
    assert!(MarkerSet::from_json(&m, 32, 32).is_ok());
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    synth(a.path(), "two-object", 32, 0.1, 9, 2);
    synth(b.path(), "two-object", 32, 0.1, 9, 2);
    for name in ["two-object-9.pgm", "two-object-10.json", "gt/two-object-10.pgm"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn synth_residual_std_matches_noise() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "disc", 64, 0.1, 1, 1);
    let img = load_image(&dir.path().join("disc-1.pgm")).unwrap();
    let gt = mask(&dir.path().join("gt/disc-1.pgm"));
    let res: Vec<f64> = img.data().iter().zip(gt.data()).map(|(v, t)| v - if *t > 0.5 { 0.75 } else { 0.25 }).collect();
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / res.len() as f64).sqrt();
    // 8-bit quantisation adds about 0.001 of spread
    assert!((0.08..=0.12).contains(&std), "std {std}");
}

#[test]
fn synth_rejects_sizes_off_the_grid() {
    let dir = TempDir::new().unwrap();
    let o = selseg(&["synth", "--kind", "disc", "--size", "60", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("multiple of 8"));
}

#[test]
fn segment_tv_on_disc_fixture() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    synth(&data, "disc", 64, 0.1, 3, 1);
    let out = dir.path().join("out");
    let o = selseg(&[
        "segment",
        "--image",
        p(&data.join("disc-3.pgm")),
        "--markers",
        p(&data.join("disc-3.json")),
        "--method",
        "tv",
        "--gt",
        p(&data.join("gt/disc-3.pgm")),
        "--out",
        p(&out),
    ]);
    assert_ok(&o);
    let pred = mask(&out.join("masks/disc-3.pgm"));
    let d = dice(&pred, &mask(&data.join("gt/disc-3.pgm"))).unwrap();
    assert!(d >= 0.99, "dice {d}");
    assert!(out.join("u/disc-3.pgm").is_file());
    let trace = std::fs::read_to_string(out.join("disc-3_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,energy\n1,"));
    let metrics = std::fs::read_to_string(out.join("disc-3_metrics.csv")).unwrap();
    assert!(metrics.starts_with("image,method,dice,jaccard\ndisc-3,tv,"));

    // a rerun overwrites in place and leaves no temporaries behind
    assert_ok(&selseg(&[
        "segment",
        "--image",
        p(&data.join("disc-3.pgm")),
        "--markers",
        p(&data.join("disc-3.json")),
        "--method",
        "tv",
        "--out",
        p(&out),
    ]));
    let mut names: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["disc-3_metrics.csv", "disc-3_trace.csv", "masks", "u"]);
    assert_eq!(mask(&out.join("masks/disc-3.pgm")), pred);
}

#[test]
fn segment_missing_markers_names_the_path() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "disc", 32, 0.1, 0, 1);
    let missing = dir.path().join("nope.json");
    let o = selseg(&[
        "segment",
        "--image",
        p(&dir.path().join("disc-0.pgm")),
        "--markers",
        p(&missing),
        "--method",
        "tv",
        "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
}

#[test]
fn segment_network_methods_require_weights() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "disc", 32, 0.1, 0, 1);
    let (img, mk, out) = (dir.path().join("disc-0.pgm"), dir.path().join("disc-0.json"), dir.path().join("out"));
    let base = ["segment", "--image", p(&img), "--markers", p(&mk), "--out", p(&out)];
    let o = selseg(&[&base[..], &["--method", "m3"]].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--weights"));
    let o = selseg(&[&base[..], &["--method", "m9"]].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn segment_rejects_bad_config_keys() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "disc", 32, 0.1, 0, 1);
    let cfg = write_config(dir.path(), "lambda = 1\nmomentum = 0.9\n");
    let o = selseg(&[
        "segment",
        "--image",
        p(&dir.path().join("disc-0.pgm")),
        "--markers",
        p(&dir.path().join("disc-0.json")),
        "--method",
        "tv",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("momentum"));
}

#[test]
fn train_writes_checkpoint_and_finite_loss_then_segments() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    synth(&data, "two-object", 32, 0.1, 0, 2);
    let cfg = write_config(dir.path(), "epochs = 4\n");
    let ckpt = dir.path().join("m4.ckpt");
    assert_ok(&selseg(&["train", "--method", "m4", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt)]));
    let loaded = Checkpoint::from_bytes(&std::fs::read(&ckpt).unwrap()).unwrap();
    assert_eq!(loaded.method, Method::M4);
    let loss = std::fs::read_to_string(dir.path().join("m4.loss.csv")).unwrap();
    let rows: Vec<&str> = loss.lines().collect();
    assert_eq!(rows[0], "epoch,loss,similarity");
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        for v in row.split(',') {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
    }

    let out = dir.path().join("out");
    let seg = |method: &str| {
        selseg(&[
            "segment",
            "--image",
            p(&data.join("two-object-0.pgm")),
            "--markers",
            p(&data.join("two-object-0.json")),
            "--method",
            method,
            "--weights",
            p(&ckpt),
            "--out",
            p(&out),
        ])
    };
    assert_ok(&seg("m4"));
    assert!(out.join("masks/two-object-0.pgm").is_file());
    // weights trained for m4 cannot stand in for m3
    assert_eq!(seg("m3").status.code(), Some(2));
}

#[test]
fn zero_epoch_training_saves_the_seeded_initialisation() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    synth(&data, "disc", 16, 0.1, 0, 2);
    let cfg = write_config(dir.path(), "epochs = 0\n");
    let ckpt = dir.path().join("init.ckpt");
    assert_ok(&selseg(&[
        "train", "--method", "m1", "--data", p(&data), "--config", p(&cfg), "--seed", "11", "--out", p(&ckpt),
    ]));
    let f = load_image(&data.join("disc-0.pgm")).unwrap();
    let m = MarkerSet::load(&data.join("disc-0.json"), 16, 16).unwrap();
    let tc = MethodConfig { epochs: 0, seed: 11, ..Default::default() }.train();
    let expected = train(&[(f, m)], Method::M1, &tc).unwrap().checkpoint().unwrap();
    assert_eq!(Checkpoint::from_bytes(&std::fs::read(&ckpt).unwrap()).unwrap(), expected);
}

#[test]
fn train_rejects_incomplete_or_empty_datasets() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    synth(&data, "disc", 16, 0.1, 0, 2);
    std::fs::remove_file(data.join("disc-1.json")).unwrap();
    let ckpt = dir.path().join("x.ckpt");
    let o = selseg(&["train", "--method", "m2", "--data", p(&data), "--out", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("disc-1"));
    assert!(!ckpt.exists());

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = selseg(&["train", "--method", "m2", "--data", p(&empty), "--out", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));

    let o = selseg(&["train", "--method", "tv", "--data", p(&data), "--out", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
}

fn eval(pred: &Path, gt: &Path, out: &Path) -> Output {
    selseg(&["eval", "--pred", p(pred), "--gt", p(gt), "--out", p(out), "--label", "tv"])
}

fn report_row(report: &Path, image: &str) -> (f64, f64) {
    let text = std::fs::read_to_string(report).unwrap();
    let row = text.lines().find(|l| l.starts_with(&format!("{image},"))).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    (cols[2].parse().unwrap(), cols[3].parse().unwrap())
}

#[test]
fn eval_identical_directories_score_one() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "disc", 32, 0.1, 0, 3);
    let gt = dir.path().join("gt");
    let out = dir.path().join("report.csv");
    assert_ok(&eval(&gt, &gt, &out));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("image,method,dice,jaccard"));
    assert_eq!(text.lines().count(), 1 + 3 + 2);
    for image in ["disc-0", "disc-1", "disc-2", "mean"] {
        assert_eq!(report_row(&out, image), (1.0, 1.0));
    }
    assert_eq!(report_row(&out, "std"), (0.0, 0.0));
}

#[test]
fn eval_known_and_disjoint_pairs() {
    let dir = TempDir::new().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    // two pixels each, one shared
    write_mask(&pred.join("a.pgm"), 4, 4, &[0, 1]);
    write_mask(&gt.join("a.pgm"), 4, 4, &[1, 2]);
    // inverted masks
    let half: Vec<usize> = (0..8).collect();
    let other: Vec<usize> = (8..16).collect();
    write_mask(&pred.join("b.pgm"), 4, 4, &half);
    write_mask(&gt.join("b.pgm"), 4, 4, &other);
    let out = dir.path().join("report.csv");
    assert_ok(&eval(&pred, &gt, &out));
    assert_eq!(report_row(&out, "a"), (0.5, 1.0 / 3.0));
    assert_eq!(report_row(&out, "b"), (0.0, 0.0));
}

#[test]
fn eval_rejects_unmatched_names() {
    let dir = TempDir::new().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    write_mask(&pred.join("a.pgm"), 4, 4, &[0]);
    write_mask(&gt.join("a.pgm"), 4, 4, &[0]);
    write_mask(&gt.join("c.pgm"), 4, 4, &[0]);
    let out = dir.path().join("report.csv");
    let o = eval(&pred, &gt, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.pgm"));
    assert!(!out.exists());
}
