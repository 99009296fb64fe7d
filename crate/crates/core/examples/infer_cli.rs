//! Drives the command-line front end in-process: synth, train, infer.

fn main() {
    let dir = std::env::temp_dir().join("hrseg-cli-example");
    let d = |p: &str| dir.join(p).display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--n".into(), "8".into(), "--classes".into(), "3".into(), "--out".into(), d("data")],
        vec![
            "train".into(), "--data".into(), d("data"), "--out".into(), d("run"), "--epochs".into(), "3".into(),
            "--batch-size".into(), "4".into(), "--crop".into(), "64".into(),
        ],
        vec!["infer".into(), "--model".into(), d("run/model.ckpt"), "--image".into(), d("data/images/00000.png"),
            "--out".into(), d("pred/label.png"), "--color".into(), d("pred/color.png")],
    ];
    let config = dir.join("tiny.cfg");
    std::fs::create_dir_all(&dir).expect("temp dir");
    std::fs::write(&config, "model.channels = 4,6,8,10,12,14\nmodel.blocks = 1,1,1,1,1,1\nmodel.num_classes = 3\n")
        .expect("config");
    for mut args in steps {
        if args[0] == "train" {
            args.extend(["--config".into(), config.display().to_string()]);
        }
        let code = hrseg::cli::run(std::iter::once("hrseg".to_string()).chain(args.clone()));
        println!("hrseg {} -> {code:?}", args[0]);
    }
}
