use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dimlight::metrics::MetricReport;
use image::{Rgb, RgbImage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dimlight"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pattern(w: u32, h: u32, seed: u32, gain: f32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let v = |c: u32| {
            let t = ((x * 7 + y * 3 + c * 11 + seed * 5) % 23) as f32 / 22.0;
            ((0.2 + 0.6 * t) * gain * 255.0).round() as u8
        };
        Rgb([v(0), v(1), v(2)])
    })
}

/// Two 24x20 pairs in the flat layout: one trains, one is held out.
fn make_dataset(root: &Path) {
    for (i, stem) in ["a", "b"].iter().enumerate() {
        for (dir, gain) in [("low", 0.25), ("high", 1.0)] {
            fs::create_dir_all(root.join(dir)).unwrap();
            pattern(24, 20, i as u32, gain).save(root.join(dir).join(format!("{stem}.png"))).unwrap();
        }
    }
}

fn write_config(dir: &Path, data: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    let text = format!(
        "seed = 3\n\n[dataset]\nname = \"custom\"\nroot = \"{}\"\ntrain_size = 32\n\n\
         [model]\nbase_width = 8\nbottleneck_width = 16\nse_reduction = 4\ndenoiser_depth = 2\n\n\
         [schedule]\nlr_max = 1e-3\nwarmup_epochs = 1\nhold_until = 1\ntotal_epochs = 20\n\n\
         [loss]\nmode = \"charbonnier_only\"\n\n[train]\ncheckpoint_every = 1\n",
        data.display()
    );
    fs::write(&p, text).unwrap();
    p
}

struct Trained {
    _dir: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    out: PathBuf,
}

/// One short training run shared by the tests that need a checkpoint.
fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        make_dataset(&data);
        let config = write_config(dir.path(), &data);
        let out = dir.path().join("run");
        let o = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--override",
            "schedule.total_epochs=2",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Trained { _dir: dir, data, config, out }
    })
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["train", "enhance", "eval", "ablate", "info"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_smoke_run_writes_log_and_checkpoints() {
    let t = trained();
    let log = fs::read_to_string(t.out.join("loss.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split(' ').collect();
        assert_eq!(f.len(), 4, "{l}");
        assert_eq!(f[0], format!("step={}", i + 1));
        assert_eq!(f[1], format!("epoch={i}"));
        assert!(f[2].strip_prefix("lr=").unwrap().parse::<f64>().is_ok());
        assert!(f[3].strip_prefix("loss=").unwrap().parse::<f64>().unwrap().is_finite());
    }
    for f in ["last.ckpt", "epoch-0001.ckpt", "epoch-0002.ckpt", "best.ckpt", "summary.txt", "config.toml", "report.txt"] {
        assert!(t.out.join(f).exists(), "{f}");
    }
    let summary = fs::read_to_string(t.out.join("summary.txt")).unwrap();
    assert!(summary.contains("steps=2") && summary.contains("epochs=2"), "{summary}");
}

#[test]
fn identical_invocations_give_identical_artifacts() {
    let t = trained();
    let out2 = t._dir.path().join("run2");
    let o = run(&[
        "train",
        "--config",
        t.config.to_str().unwrap(),
        "--override",
        "schedule.total_epochs=2",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["loss.log", "last.ckpt", "best.ckpt", "report.txt"] {
        assert_eq!(fs::read(t.out.join(f)).unwrap(), fs::read(out2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("no-such-dataset");
    let o = run(&["train", "--override", &format!("dataset.root={}", absent.display()), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-dataset"), "{}", stderr(&o));
}

#[test]
fn unknown_key_lists_valid_keys() {
    let o = run(&["info", "--override", "schedule.epochs=3"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    for k in ["schedule.total_epochs", "model.use_seblock", "loss.mode", "dataset.root", "train.batch_size", "seed"] {
        assert!(e.contains(k), "{e}");
    }
}

#[test]
fn enhance_single_image_with_intermediates() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    pattern(224, 224, 1, 0.3).save(&input).unwrap();
    let out = dir.path().join("out");
    let ckpt = t.out.join("last.ckpt");
    let o = run(&["enhance", input.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = image::open(out.join("in.png")).unwrap();
    assert_eq!((img.width(), img.height()), (224, 224));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 1);

    let out2 = dir.path().join("out2");
    let o = run(&[
        "enhance",
        input.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--dump-intermediates",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> =
        fs::read_dir(&out2).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["in.png", "in_I.png", "in_I_bar.png", "in_I_hat.png", "in_R.png"]);
    assert_eq!(image::open(out2.join("in_I.png")).unwrap().color(), image::ColorType::L8);
    assert_eq!(image::open(out2.join("in_R.png")).unwrap().color(), image::ColorType::Rgb8);
    assert_eq!(fs::read(out.join("in.png")).unwrap(), fs::read(out2.join("in.png")).unwrap());
}

#[test]
fn enhance_directory_matches_single_runs() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("inputs");
    fs::create_dir_all(&inputs).unwrap();
    for (i, (w, h)) in [(30, 22), (16, 16), (41, 9)].iter().enumerate() {
        pattern(*w, *h, i as u32, 0.3).save(inputs.join(format!("img{i}.png"))).unwrap();
    }
    let ckpt = t.out.join("last.ckpt");
    let all = dir.path().join("all");
    let o = run(&["enhance", inputs.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--out", all.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&all).unwrap().count(), 3);
    for i in [2, 0] {
        let one = dir.path().join(format!("one{i}"));
        let file = inputs.join(format!("img{i}.png"));
        let o = run(&["enhance", file.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--out", one.to_str().unwrap()]);
        assert!(o.status.success());
        let name = format!("img{i}.png");
        assert_eq!(fs::read(all.join(&name)).unwrap(), fs::read(one.join(&name)).unwrap());
        let src = image::open(&file).unwrap();
        let got = image::open(all.join(&name)).unwrap();
        assert_eq!((got.width(), got.height()), (src.width(), src.height()));
    }
}

#[test]
fn enhance_rejects_mismatched_configuration() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    pattern(16, 16, 0, 0.3).save(&input).unwrap();
    let o = run(&[
        "enhance",
        input.to_str().unwrap(),
        "--ckpt",
        t.out.join("last.ckpt").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--config",
        t.config.to_str().unwrap(),
        "--override",
        "model.use_seblock=false",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("use_seblock"), "{}", stderr(&o));
}

#[test]
fn eval_identity_and_report_round_trip() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "eval",
        "--identity",
        "--override",
        &format!("dataset.root={}", t.data.display()),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = MetricReport::load(&dir.path().join("report.txt")).unwrap();
    assert_eq!(r.per_image.len(), 1);
    assert_eq!(r.ssim, 1.0);
    assert_eq!(r.psnr_db, f64::INFINITY);
    assert!(stdout(&o).contains("psnr_db=inf ssim=1"));

    let o = run(&[
        "eval",
        "--config",
        t.config.to_str().unwrap(),
        "--ckpt",
        t.out.join("last.ckpt").to_str().unwrap(),
        "--out",
        dir.path().join("m").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("m/report.txt")).unwrap();
    let r = MetricReport::from_kv(&text).unwrap();
    assert_eq!(r.to_kv(), text);
    assert_eq!(r, MetricReport::load(&t.out.join("report.txt")).unwrap());
}

fn info_totals(text: &str) -> (Vec<(u64, u64)>, u64, u64) {
    let mut rows = Vec::new();
    let mut total = (0, 0);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            continue;
        }
        let (p, fl) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        if f[0] == "total" {
            total = (p, fl);
        } else {
            rows.push((p, fl));
        }
    }
    (rows, total.0, total.1)
}

#[test]
fn info_reports_budget_and_scaling() {
    let o = run(&["info"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (rows, params, flops) = info_totals(&stdout(&o));
    assert!((300_000..=500_000).contains(&params), "{params}");
    assert_eq!(rows.iter().map(|r| r.0).sum::<u64>(), params);
    assert_eq!(rows.iter().map(|r| r.1).sum::<u64>(), flops);

    let o = run(&["info", "--resolution", "448x448"]);
    let (_, params2, flops2) = info_totals(&stdout(&o));
    assert_eq!(params2, params);
    let ratio = flops2 as f64 / flops as f64;
    assert!((ratio - 4.0).abs() < 4e-3, "{ratio}");

    assert_eq!(run(&["info", "--resolution", "224"]).status.code(), Some(2));
}

#[test]
fn info_reads_checkpoint_configuration() {
    let t = trained();
    let o = run(&["info", "--ckpt", t.out.join("last.ckpt").to_str().unwrap(), "--resolution", "32x32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, params, _) = info_totals(&stdout(&o));
    assert!(params < 300_000);
}

#[test]
fn ablate_rejects_unknown_variant() {
    let o = run(&["ablate", "--variants", "baseline,no-such"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such"));
}
