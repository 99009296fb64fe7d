use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hrseg::data::{load_dataset, read_label, write_image, Target};
use hrseg::tensor::Tensor;

const TINY: &str = "\
# tiny network on 64x64 crops
model.channels = 4,6,8,10,12,14
model.blocks = 1,1,1,1,1,1
model.num_classes = 3
model.head_blocks = 1
train.batch_size = 4
train.epochs = 2
augment.crop = 64
";

fn hrseg(args: &[&str]) -> Output {
    hrseg_env(args, &[])
}

fn hrseg_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hrseg"));
    cmd.args(args).env_remove("HRSEG_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn hrseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(f.path("tiny.cfg"), TINY).unwrap();
        let o = hrseg(&["synth", "--seed", "1", "--n", "8", "--size", "64", "--classes", "3", "--out", s(&f.path("data"))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, data, out) = (self.path("tiny.cfg"), self.path("data"), self.path(out));
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        hrseg(&args)
    }

    fn trained(&self) -> PathBuf {
        let o = self.train("run", &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        self.path("run/model.ckpt")
    }
}

fn losses(path: &Path) -> Vec<(usize, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn help_lists_reference_defaults() {
    for cmd in ["synth", "train", "pseudo-label", "eval", "infer", "grad-check"] {
        let o = hrseg(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        assert!(stdout(&o).contains("--"), "{cmd}");
    }
    let train = stdout(&hrseg(&["train", "--help"]));
    for needle in ["[default: 768]", "[default: 0.5]", "[default: 2.0]", "[default: 0.01", "[default: 0.9]", "[default: 0.0001]"] {
        assert!(train.contains(needle), "train --help lacks {needle}:\n{train}");
    }
    let pseudo = stdout(&hrseg(&["pseudo-label", "--help"]));
    assert!(pseudo.contains("[default: 0.9]"), "{pseudo}");
    assert!(!stdout(&hrseg(&["grad-check", "--help"])).contains("--fault"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&hrseg(&[])), 2);
    assert_eq!(code(&hrseg(&["segment"])), 2);
    assert_eq!(code(&hrseg(&["synth", "--n", "x", "--out", "o"])), 2);
}

#[test]
fn synth_is_deterministic_and_validates_first() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, bad) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("bad"));
    for out in [&a, &b] {
        let o = hrseg(&["synth", "--seed", "1", "--n", "16", "--size", "64", "--classes", "4", "--out", s(out)]);
        assert_eq!(code(&o), 0);
    }
    let ds = load_dataset(&a, 4).unwrap();
    assert_eq!(ds.len(), 16);
    for sub in ["images", "labels"] {
        for i in 0..16 {
            let name = format!("{sub}/{i:05}.png");
            assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name}");
        }
    }
    let o = hrseg(&["synth", "--size", "50", "--out", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("divisible by 32"), "{}", stderr(&o));
    assert!(!bad.exists());

    let cls = dir.path().join("cls");
    assert_eq!(code(&hrseg(&["synth", "--kind", "cls", "--n", "6", "--classes", "3", "--out", s(&cls)])), 0);
    assert!(load_dataset(&cls, 3).unwrap().iter().all(|s| matches!(s.target, Target::Class(_))));
}

#[test]
fn train_writes_checkpoint_loss_curve_and_config() {
    let f = Fixture::new();
    f.trained();
    let curve = losses(&f.path("run/loss.csv"));
    assert_eq!(curve.len(), 4);
    assert!(curve.iter().all(|(_, l)| l.is_finite()));
    assert!(std::fs::read_to_string(f.path("run/loss.csv")).unwrap().starts_with("iter,lr,loss\n"));
    let effective = hrseg::config::RunConfig::load(&f.path("run/config.txt")).unwrap();
    assert_eq!(effective.spec.channels(), [4, 6, 8, 10, 12, 14]);
    assert_eq!(effective.train.augment.crop, 64);
}

#[test]
fn train_validates_before_writing() {
    let f = Fixture::new();
    let cfg = f.path("tiny.cfg");
    let missing = f.path("nowhere");
    let o = hrseg(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&f.path("r1"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!f.path("r1").exists());

    let o = hrseg(&["train", "--config", s(&cfg), "--out", s(&f.path("r2"))]);
    assert_eq!(code(&o), 2);
    assert!(!f.path("r2").exists());

    std::fs::write(f.path("bad.cfg"), "train.lr0 = fast\n").unwrap();
    let o = hrseg(&["train", "--config", s(&f.path("bad.cfg")), "--data", s(&f.path("data")), "--out", s(&f.path("r3"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
    assert!(!f.path("r3").exists());

    let o = f.train("r4", &["--crop", "50"]);
    assert_eq!(code(&o), 2);
    assert!(!f.path("r4").exists());

    let o = f.train("r5", &["--mode", "cls"]);
    assert_eq!(code(&o), 2, "segmentation data in classification mode");
    assert!(!f.path("r5").exists());
}

#[test]
fn resumed_training_continues_the_uninterrupted_curve() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("straight", &["--epochs", "4"])), 0);
    assert_eq!(code(&f.train("split", &["--epochs", "4", "--until-epoch", "2"])), 0);
    let first_half = losses(&f.path("split/loss.csv"));
    let ckpt = f.path("split/model.ckpt");
    let o = f.train("split", &["--epochs", "4", "--resume", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let straight = losses(&f.path("straight/loss.csv"));
    let resumed = losses(&f.path("split/loss.csv"));
    assert_eq!(resumed.len(), straight.len());
    let first_resumed = resumed[first_half.len()];
    let reference = straight[first_half.len()];
    assert_eq!(first_resumed.0, reference.0);
    assert!((first_resumed.1 - reference.1).abs() <= 1e-6);
    assert_eq!(std::fs::read(f.path("split/model.ckpt")).unwrap(), std::fs::read(f.path("straight/model.ckpt")).unwrap());

    let o = f.train("split", &["--epochs", "4", "--until-epoch", "4", "--resume", s(&ckpt)]);
    assert_eq!(code(&o), 2, "checkpoint already at epoch 4");
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let f = Fixture::new();
    let run = |out: &str, env: &[(&str, &str)], extra: &[&str]| {
        let (cfg, data, out) = (f.path("tiny.cfg"), f.path("data"), f.path(out));
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        assert_eq!(code(&hrseg_env(&args, env)), 0);
        std::fs::read(f.path(&format!("{}/loss.csv", out.file_name().unwrap().to_str().unwrap()))).unwrap()
    };
    let by_env = run("env5", &[("HRSEG_SEED", "5")], &[]);
    let by_flag = run("flag5", &[], &["--seed", "5"]);
    let default = run("default", &[], &[]);
    let flag_wins = run("flag_wins", &[("HRSEG_SEED", "9")], &["--seed", "5"]);
    assert_eq!(by_env, by_flag);
    assert_eq!(flag_wins, by_flag);
    assert_ne!(by_env, default);
    let o = hrseg_env(&["train", "--config", s(&f.path("tiny.cfg")), "--data", s(&f.path("data"))], &[("HRSEG_SEED", "abc")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pseudo_label_defaults_to_0_9_and_writes_coverage() {
    let f = Fixture::new();
    let teacher = f.trained();
    let (images, out) = (f.path("data/images"), f.path("pseudo"));
    let o = hrseg(&["pseudo-label", "--teacher", s(&teacher), "--images", s(&images), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("threshold 0.9"), "{}", stdout(&o));
    let coverage = std::fs::read_to_string(out.join("coverage.csv")).unwrap();
    assert!(coverage.starts_with("id,coverage\n"));
    assert_eq!(coverage.lines().count(), 8 + 2);
    assert_eq!(load_dataset(&out, 3).unwrap().len(), 8);

    let bad = f.path("bad");
    let o = hrseg(&["pseudo-label", "--teacher", s(&teacher), "--images", s(&images), "--threshold", "1.5", "--out", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(!bad.exists());
    let o = hrseg(&["pseudo-label", "--teacher", s(&f.path("none.ckpt")), "--images", s(&images), "--out", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(!bad.exists());
}

#[test]
fn eval_against_own_predictions_is_perfect() {
    let f = Fixture::new();
    let model = f.trained();
    let data = load_dataset(&f.path("data"), 3).unwrap();
    let own = f.path("own");
    std::fs::create_dir_all(own.join("images")).unwrap();
    std::fs::create_dir_all(own.join("labels")).unwrap();
    for sample in data.iter() {
        let image = f.path(&format!("data/images/{}.png", sample.id));
        let label = own.join(format!("labels/{}.png", sample.id));
        let o = hrseg(&["infer", "--model", s(&model), "--image", s(&image), "--out", s(&label)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::copy(&image, own.join(format!("images/{}.png", sample.id))).unwrap();
    }
    let csv_path = f.path("metrics/eval.csv");
    let o = hrseg(&["eval", "--model", s(&model), "--data", s(&own), "--out", s(&csv_path)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), csv);
    let rows: Vec<(&str, f64)> =
        csv.lines().skip(1).map(|l| l.split_once(',').map(|(k, v)| (k, v.parse().unwrap())).unwrap()).collect();
    assert_eq!(csv.lines().next(), Some("metric,value"));
    let keys: Vec<&str> = rows.iter().map(|r| r.0).collect();
    assert_eq!(keys, ["class_0", "class_1", "class_2", "miou", "pixel_accuracy"]);
    let get = |k: &str| rows.iter().find(|r| r.0 == k).unwrap().1;
    assert_eq!(get("miou"), 1.0);
    assert_eq!(get("pixel_accuracy"), 1.0);

    let empty = f.path("empty");
    std::fs::create_dir_all(empty.join("images")).unwrap();
    std::fs::create_dir_all(empty.join("labels")).unwrap();
    assert_eq!(code(&hrseg(&["eval", "--model", s(&model), "--data", s(&empty)])), 2);
}

#[test]
fn eval_reports_classification_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("cls"), dir.path().join("run"));
    assert_eq!(code(&hrseg(&["synth", "--kind", "cls", "--n", "6", "--classes", "3", "--out", s(&data)])), 0);
    let cfg = dir.path().join("cls.cfg");
    let text = "model.channels = 4,6,8,10,12,14\nmodel.blocks = 1,1,1,1,1,1\nmodel.num_classes = 3\n\
                train.batch_size = 3\ntrain.epochs = 2\naugment.cls_crop = 64\naugment.cls_resize_min = 64\naugment.cls_resize_max = 72\n";
    std::fs::write(&cfg, text).unwrap();
    let o = hrseg(&["train", "--mode", "cls", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = hrseg(&["eval", "--model", s(&run.join("model.ckpt")), "--data", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("pixel_accuracy,"));
    let o = hrseg(&["infer", "--model", s(&run.join("model.ckpt")), "--image", s(&data.join("images/00000.png")), "--out", s(&dir.path().join("x.png"))]);
    assert_eq!(code(&o), 2, "classification checkpoint cannot segment");
}

#[test]
fn infer_preserves_size_and_is_repeatable() {
    let f = Fixture::new();
    let model = f.trained();
    let wide = f.path("wide.png");
    write_image(&wide, &Tensor::new(&[3, 64, 96], hrseg::tensor::Fill::Uniform { lo: 0.0, hi: 1.0 }, 3).unwrap()).unwrap();
    let (a, b, color) = (f.path("out/a.png"), f.path("out/b.png"), f.path("out/color.png"));
    for out in [&a, &b] {
        let o = hrseg(&["infer", "--model", s(&model), "--image", s(&wide), "--out", s(out), "--color", s(&color)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let label = read_label(&a).unwrap();
    assert_eq!((label.height(), label.width()), (64, 96));
    assert!(label.data().iter().all(|&c| c < 3));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let rgb = image::open(&color).unwrap().to_rgb8();
    assert_eq!(rgb.dimensions(), (96, 64));

    let odd = f.path("odd.png");
    write_image(&odd, &Tensor::zeros(&[3, 50, 64])).unwrap();
    let missing = f.path("out/odd-label.png");
    let o = hrseg(&["infer", "--model", s(&model), "--image", s(&odd), "--out", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("divisible by 32"), "{}", stderr(&o));
    assert!(!missing.exists());
}

#[test]
fn grad_check_reports_each_layer_once_and_catches_faults() {
    let o = hrseg(&["grad-check", "--spec", "tiny"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report = stdout(&o);
    for layer in hrseg::verify::grad_check_suite(&hrseg::backbone::NetworkSpec::tiny(3), None, 1).unwrap().layers {
        let hits = report.lines().filter(|l| l.split_whitespace().next() == Some(layer.name.as_str())).count();
        assert_eq!(hits, 1, "{}", layer.name);
    }
    assert!(report.contains("PASS"));
    let o = hrseg(&["grad-check", "--fault", "conv2d"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&hrseg(&["grad-check", "--fault", "nonsense"])), 2);
}

#[test]
fn checkpoint_from_a_different_tool_is_rejected() {
    let f = Fixture::new();
    let junk = f.path("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = hrseg(&["eval", "--model", s(&junk), "--data", s(&f.path("data"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}
