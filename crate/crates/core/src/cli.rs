//! Command-line front end: `synth`, `train`, `pseudo-label`, `eval`, `infer`, `grad-check`.
//!
//! Exit codes: 0 success, 1 internal or check failure, 2 usage or validation error.
//! Every command validates its inputs before writing anything.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbImage;

use crate::backbone::{validate_input, Classifier, NetworkSpec};
use crate::config::RunConfig;
use crate::data::{class_color, load_dataset, load_images, read_image, synth_classification, synth_generate, write_label, Dataset, LabelMap, Target, IGNORE};
use crate::error::{invalid, Error, Result};
use crate::eval::{batch_of_one, evaluate, ConfusionMatrix};
use crate::noisy_student::{generate_pseudo_set, PseudoLabelConfig};
use crate::seg_head::SegNet;
use crate::train::{load_checkpoint, load_model, save_checkpoint, train_with, Checkpoint, LrPolicy, ModelKind, NetModel, TrainState};
use crate::verify::{backward_op, grad_check_suite};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "HRSEG_SEED";

#[derive(Debug, Parser)]
#[command(name = "hrseg", version, about = "High-resolution semantic segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of PNG images and labels.
    Synth(SynthArgs),
    /// Train a segmentation network or a classification backbone.
    Train(TrainArgs),
    /// Label unlabeled images with a teacher checkpoint.
    PseudoLabel(PseudoArgs),
    /// Per-class IoU, mIoU and pixel accuracy of a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Predict the label map of one image.
    Infer(InferArgs),
    /// Finite-difference check of every layer and of a whole network.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    /// Per-pixel labels under labels/.
    Seg,
    /// One class per image in classes.csv.
    Cls,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of images.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Image height and width, a multiple of 32.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Number of classes, at least 2.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = DataKind::Seg)]
    pub kind: DataKind,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DataKind::Seg)]
    pub mode: DataKind,
    /// Continue from a checkpoint written by an earlier run, including optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Training dataset directory (config `data.train`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: runs].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for initialization and sampling [default: 0; env HRSEG_SEED].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs [default: 300].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this epoch without shortening the schedule; resume later with --resume.
    #[arg(long)]
    pub until_epoch: Option<usize>,
    /// Batch size [default: 10].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 0.01; cls 0.1].
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Poly schedule exponent; selects the poly schedule [default: 0.9].
    #[arg(long)]
    pub poly_power: Option<f64>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay [default: 0.0001].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Square training crop [default: 768].
    #[arg(long)]
    pub crop: Option<usize>,
    /// Smallest random rescale factor [default: 0.5].
    #[arg(long)]
    pub scale_min: Option<f64>,
    /// Largest random rescale factor [default: 2.0].
    #[arg(long)]
    pub scale_max: Option<f64>,
    /// Horizontal flip probability [default: 0.5].
    #[arg(long)]
    pub hflip_prob: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PseudoArgs {
    /// Segmentation checkpoint of the teacher.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Directory of unlabeled PNG images, or a dataset root with images/.
    #[arg(long)]
    pub images: PathBuf,
    /// Minimum top-class probability for a pixel to keep its label.
    #[arg(long, default_value_t = crate::noisy_student::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Output dataset directory; receives images/, labels/ and coverage.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the metrics CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Segmentation checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Input RGB PNG with sides divisible by 32.
    #[arg(long)]
    pub image: PathBuf,
    /// Output 8-bit label PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional color-coded visualization PNG.
    #[arg(long)]
    pub color: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpecName {
    /// Widths 4..14, one block per scale.
    Tiny,
    /// Widths 8..48.
    Desk,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, value_enum, default_value_t = SpecName::Tiny)]
    pub spec: SpecName,
    /// Number of classes of the checked network.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Coordinates sampled per whole-network check.
    #[arg(long, default_value_t = 48)]
    pub samples: usize,
    /// Corrupt the backward pass of this operation.
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::PseudoLabel(a) => cmd_pseudo_label(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::GradCheck(a) => cmd_grad_check(&a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e {
        CmdError::Failed => Ok(ExitCode::from(1)),
        CmdError::Lib(e) => Err(e),
    })
}

enum CmdError {
    /// The command ran but its check did not pass; the report is already printed.
    Failed,
    Lib(Error),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Lib(e)
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Lib(e.into())
    }
}

fn require(flag: &str, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(invalid!("{flag}: {} does not exist", path.display()));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| invalid!("cannot create {}: {e}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| invalid!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(invalid!("{SEED_ENV}: {e}")),
    }
}

fn cmd_synth(a: &SynthArgs) -> std::result::Result<(), CmdError> {
    let ds = match a.kind {
        DataKind::Seg => synth_generate(a.seed, a.n, a.size, a.size, a.classes)?,
        DataKind::Cls => synth_classification(a.seed, a.n, a.size, a.classes)?,
    };
    create_dir(&a.out)?;
    ds.save(&a.out)?;
    println!("wrote {} samples with {} classes to {}", ds.len(), ds.num_classes, a.out.display());
    Ok(())
}

/// Effective configuration of a `train` invocation: defaults, then the file, then
/// `HRSEG_SEED`, then flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let base = match a.mode {
        DataKind::Seg => RunConfig::default(),
        DataKind::Cls => RunConfig::classification(),
    };
    let mut c = match &a.config {
        Some(p) => {
            require("--config", p)?;
            base.overlay_file(p)?
        }
        None => base,
    };
    if let Some(s) = seed_from_env()? {
        c.seed = s;
    }
    let t = &mut c.train;
    let over = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = &a.data {
        c.train_data = Some(v.clone());
    }
    if let Some(v) = &a.out {
        c.output_dir = v.clone();
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.crop {
        t.augment.crop = v;
    }
    if let Some(v) = a.poly_power {
        t.lr_policy = LrPolicy::Poly { power: v };
    }
    over(&mut t.lr0, a.lr0);
    over(&mut t.momentum, a.momentum);
    over(&mut t.weight_decay, a.weight_decay);
    over(&mut t.augment.scale_range.0, a.scale_min);
    over(&mut t.augment.scale_range.1, a.scale_max);
    over(&mut t.augment.hflip_prob, a.hflip_prob);
    t.seed = c.seed;
    Ok(c)
}

fn cmd_train(a: &TrainArgs) -> std::result::Result<(), CmdError> {
    let mut cfg = resolve_train_config(a)?;
    if let Some(r) = &a.resume {
        require("--resume", r)?;
        let ck = Checkpoint::read(r)?;
        let want = match a.mode {
            DataKind::Seg => ModelKind::Segmentation,
            DataKind::Cls => ModelKind::Classification,
        };
        if ck.kind()? != want {
            return Err(invalid!("--resume: {} holds a {:?} model, --mode asks for {want:?}", r.display(), ck.kind()?).into());
        }
        cfg.spec = ck.spec()?;
    }
    match a.mode {
        DataKind::Seg => run_train::<SegNet<f32>>(&cfg, a.resume.as_deref(), a.until_epoch),
        DataKind::Cls => run_train::<Classifier<f32>>(&cfg, a.resume.as_deref(), a.until_epoch),
    }
}

fn run_train<M: NetModel>(cfg: &RunConfig, resume: Option<&Path>, until: Option<usize>) -> std::result::Result<(), CmdError> {
    cfg.validate()?;
    let data = cfg.train_data.as_ref().ok_or_else(|| invalid!("no training data: pass --data or set data.train"))?;
    let ds = load_dataset(data, cfg.spec.num_classes)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!("{} contains no samples", data.display())).into());
    }
    let mut state = match resume {
        Some(p) => load_checkpoint::<M>(p, cfg.train.momentum, cfg.train.weight_decay)?,
        None => TrainState::from_config(M::build(&cfg.spec, cfg.seed)?, &cfg.train),
    };
    state.model.check_dataset(&ds, &cfg.train)?;
    if let Some(u) = until {
        if u <= state.epoch || u > cfg.train.epochs {
            return Err(invalid!("--until-epoch {u} must lie in {}..={}", state.epoch + 1, cfg.train.epochs).into());
        }
    }

    let out = &cfg.output_dir;
    create_dir(out)?;
    fs::write(out.join("config.txt"), cfg.serialize())?;
    let ckpt = out.join("model.ckpt");
    let epochs = cfg.train.epochs;
    let start_iter = state.iteration;
    let stop = until.unwrap_or(epochs);
    let report = train_with(&mut state, &ds, &cfg.train, |st, rep| {
        save_checkpoint(&ckpt, st)?;
        if let Some(last) = rep.losses.last() {
            eprintln!("epoch {}/{epochs} iter {} lr {:.6} loss {:.5}", st.epoch, last.iter, last.lr, last.loss);
        }
        Ok(st.epoch < stop)
    })?;
    save_checkpoint(&ckpt, &state)?;
    let csv = out.join("loss.csv");
    let earlier = if resume.is_some() { earlier_losses(&csv, start_iter) } else { String::new() };
    report.write_csv(&csv)?;
    if !earlier.is_empty() {
        let fresh = fs::read_to_string(&csv)?;
        let (header, rows) = fresh.split_once('\n').unwrap_or((&fresh, ""));
        fs::write(&csv, format!("{header}\n{earlier}{rows}"))?;
    }
    println!(
        "trained to epoch {} ({} steps, {} skipped); wrote {} and {}",
        state.epoch,
        report.steps,
        report.skipped,
        ckpt.display(),
        out.join("loss.csv").display()
    );
    Ok(())
}

/// Rows of an existing loss CSV logged before iteration `before`.
fn earlier_losses(path: &Path, before: usize) -> String {
    let Ok(text) = fs::read_to_string(path) else { return String::new() };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i < before))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn seg_model(flag: &str, path: &Path) -> Result<SegNet<f32>> {
    require(flag, path)?;
    let ck = Checkpoint::read(path)?;
    if ck.kind()? != ModelKind::Segmentation {
        return Err(invalid!("{flag}: {} is not a segmentation checkpoint", path.display()));
    }
    load_model(path)
}

fn cmd_pseudo_label(a: &PseudoArgs) -> std::result::Result<(), CmdError> {
    let mut cfg = PseudoLabelConfig { threshold: a.threshold, output_dir: None };
    cfg.validate()?;
    require("--images", &a.images)?;
    let teacher = seg_model("--teacher", &a.teacher)?;
    let images = load_images(&a.images, teacher.spec.num_classes)?;
    if images.is_empty() {
        return Err(Error::Dataset(format!("{} contains no PNG images", a.images.display())).into());
    }
    for s in images.iter() {
        validate_input(&[1, 3, s.height(), s.width()]).map_err(|e| invalid!("image {}: {e}", s.id))?;
    }
    cfg.output_dir = Some(a.out.clone());
    let set = generate_pseudo_set(&teacher, &images, &cfg)?;
    println!(
        "labeled {} images at threshold {}: coverage {:.4}; wrote {}",
        set.dataset.len(),
        cfg.threshold,
        set.overall_coverage,
        a.out.join("coverage.csv").display()
    );
    Ok(())
}

fn classification_matrix(model: &Classifier<f32>, ds: &Dataset) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(ds.num_classes);
    for s in ds.iter() {
        let Target::Class(gt) = s.target else {
            return Err(Error::Dataset(format!("sample {} has no class target", s.id)));
        };
        let pred = model.predict(&batch_of_one(&s.image)?)?[0] as u8;
        cm.accumulate(&LabelMap::filled(1, 1, pred), &LabelMap::filled(1, 1, gt))?;
    }
    Ok(cm)
}

fn cmd_eval(a: &EvalArgs) -> std::result::Result<(), CmdError> {
    require("--model", &a.model)?;
    require("--data", &a.data)?;
    let ck = Checkpoint::read(&a.model)?;
    let spec = ck.spec()?;
    let ds = load_dataset(&a.data, spec.num_classes)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!("{} contains no samples", a.data.display())).into());
    }
    let cm = match ck.kind()? {
        ModelKind::Segmentation => evaluate(&load_model::<SegNet<f32>>(&a.model)?, &ds)?,
        ModelKind::Classification => classification_matrix(&load_model::<Classifier<f32>>(&a.model)?, &ds)?,
    };
    let csv = cm.to_csv()?;
    if let Some(out) = &a.out {
        create_parent(out)?;
        fs::write(out, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

/// RGB rendering of a label map; ignored pixels are black.
pub fn colorize(label: &LabelMap, num_classes: usize) -> RgbImage {
    RgbImage::from_fn(label.width() as u32, label.height() as u32, |x, y| {
        match label.get(y as usize, x as usize) {
            IGNORE => image::Rgb([0, 0, 0]),
            c => image::Rgb(class_color(c, num_classes)),
        }
    })
}

fn cmd_infer(a: &InferArgs) -> std::result::Result<(), CmdError> {
    require("--image", &a.image)?;
    let model = seg_model("--model", &a.model)?;
    let image = read_image(&a.image)?;
    let batch = batch_of_one(&image)?;
    validate_input(batch.shape())?;
    let label = model.predict(&batch)?.remove(0);
    create_parent(&a.out)?;
    write_label(&a.out, &label)?;
    if let Some(color) = &a.color {
        create_parent(color)?;
        colorize(&label, model.spec.num_classes).save(color).map_err(Error::from)?;
    }
    println!("wrote {}x{} label map to {}", label.width(), label.height(), a.out.display());
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs) -> std::result::Result<(), CmdError> {
    let fault = match &a.fault {
        Some(name) => Some(backward_op(name).ok_or_else(|| invalid!("--fault: unknown operation {name:?}"))?),
        None => None,
    };
    let spec = match a.spec {
        SpecName::Tiny => NetworkSpec::tiny(a.classes),
        SpecName::Desk => NetworkSpec::desk(a.classes),
    };
    spec.validate()?;
    if a.samples == 0 {
        return Err(invalid!("--samples must be positive").into());
    }
    let report = grad_check_suite(&spec, fault, a.samples)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CmdError::Failed)
    }
}

