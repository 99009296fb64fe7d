//! Acceptance criteria 1 to 9, one test each. Every test prints a single
//! `criterion N (...): PASS|FAIL ...` line before asserting.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hrseg::backbone::NetworkSpec;
use hrseg::cli::{Cli, Command};
use hrseg::data::{synth_generate, AugmentConfig, Dataset, LabelMap, IGNORE};
use hrseg::eval::{batch_of_one, evaluate, ConfusionMatrix};
use hrseg::nn::{bilinear_resize, Ctx};
use hrseg::noisy_student::{
    generate_pseudo_set, noisy_student_train, pseudo_label, NoisyStudentConfig, PseudoLabelConfig, DEFAULT_THRESHOLD,
};
use hrseg::seg_head::SegNet;
use hrseg::tensor::{Fill, Tape, Tensor};
use hrseg::train::{load_checkpoint, poly_lr, save_checkpoint, step_lr, train, TrainConfig, TrainState};
use hrseg::verify::grad_check_suite;

use clap::Parser;

fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    println!("criterion {n} ({name}): {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn identity_config(epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig { batch_size, epochs, seed, augment: AugmentConfig::identity(64), ..TrainConfig::default() }
}

#[test]
fn criterion_1_gradient_correctness() {
    let spec = NetworkSpec::tiny(3);
    assert_eq!(spec.channels(), [4, 6, 8, 10, 12, 14]);
    let start = Instant::now();
    let report = grad_check_suite(&spec, None, 48).unwrap();
    let elapsed = start.elapsed();
    let layers: BTreeSet<&str> = report.layers.iter().map(|e| e.name.as_str()).collect();
    let all_checked = report.layers.iter().chain(&report.network).all(|e| e.report.checked > 0);
    let broken = grad_check_suite(&spec, Some("conv2d"), 16).unwrap();
    let pass = report.passed()
        && report.max_layer_error() <= 3e-3
        && report.max_network_error() <= 3e-3
        && layers.len() == report.layers.len()
        && all_checked
        && !broken.passed()
        && elapsed < Duration::from_secs(300);
    verdict(
        1,
        "gradient correctness",
        pass,
        format!(
            "max layer error {:.2e}, max end-to-end error {:.2e}, {} layer types, fault detected {}, {:.1}s",
            report.max_layer_error(),
            report.max_network_error(),
            layers.len(),
            !broken.passed(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_shape_law() {
    let spec = NetworkSpec::tiny(3);
    let net = SegNet::<f32>::build(&spec, 0).unwrap();
    let sizes = [32, 64, 96, 128];
    let mut mismatches = Vec::new();
    for h in sizes {
        for w in sizes {
            let mut tape = Tape::new();
            let x = tape.constant(&Tensor::new(&[1, 3, h, w], Fill::Uniform { lo: 0.0, hi: 1.0 }, 1).unwrap());
            let pyramid = net.backbone.forward(&mut Ctx::eval(&mut tape, &net.store), x).unwrap();
            for (s, &m) in pyramid.maps.iter().enumerate() {
                let want = [1, spec.channels()[s], h >> s, w >> s];
                if tape.shape(m) != want {
                    mismatches.push(format!("{h}x{w} scale {}: {:?} != {want:?}", s + 1, tape.shape(m)));
                }
            }
            let out = net.forward_eval(&mut tape, x).unwrap();
            if tape.shape(out.final_logits) != [1, 3, h, w] {
                mismatches.push(format!("{h}x{w} logits {:?}", tape.shape(out.final_logits)));
            }
        }
    }
    let rejected = net.logits(&Tensor::zeros(&[1, 3, 50, 64])).is_err();
    verdict(
        2,
        "shape law",
        mismatches.is_empty() && rejected,
        format!("16 input sizes, mismatches {mismatches:?}, 50x64 rejected {rejected}"),
    );
}

fn resize(input: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let y = bilinear_resize(&mut tape, x, out_h, out_w).unwrap();
    tape.tensor(y)
}

/// Source coordinate of output index `i` under the half-pixel convention, if unclamped.
fn interior(i: usize, n_in: usize, n_out: usize) -> Option<f64> {
    let s = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    (s >= 0.0 && s <= (n_in - 1) as f64).then_some(s)
}

/// Largest deviation from `a*y + b*x + k` over output pixels whose source coordinates are unclamped.
fn ramp_error(h: usize, w: usize, oh: usize, ow: usize) -> (f64, usize) {
    let (a, b, k) = (0.5, -2.0, 3.0);
    let ramp: Vec<f64> = (0..h * w).map(|i| a * (i / w) as f64 + b * (i % w) as f64 + k).collect();
    let out = resize(&Tensor::from_vec(&[1, 1, h, w], ramp).unwrap(), oh, ow);
    let (mut worst, mut count): (f64, usize) = (0.0, 0);
    for i in 0..oh {
        for j in 0..ow {
            if let (Some(y), Some(x)) = (interior(i, h, oh), interior(j, w, ow)) {
                count += 1;
                worst = worst.max((out.data()[i * ow + j] - (a * y + b * x + k)).abs());
            }
        }
    }
    (worst, count)
}

#[test]
fn criterion_3_bilinear_contract() {
    let dyadic = [(2, 2, 4, 4), (4, 4, 8, 8), (2, 3, 16, 24), (8, 8, 4, 4), (5, 5, 5, 5), (4, 6, 8, 3)];
    let other = [(3, 5, 7, 2), (8, 6, 3, 9), (5, 3, 11, 13)];
    let mut worst_const: f64 = 0.0;
    for &(h, w, oh, ow) in dyadic.iter().chain(&other) {
        let c = Tensor::<f64>::from_vec(&[1, 2, h, w], vec![-1.75; 2 * h * w]).unwrap();
        worst_const = resize(&c, oh, ow).data().iter().map(|v| (v + 1.75).abs()).fold(worst_const, f64::max);
    }
    let fold = |cases: &[(usize, usize, usize, usize)]| {
        cases.iter().map(|&(h, w, oh, ow)| ramp_error(h, w, oh, ow)).fold((0.0f64, 0), |(e, n), (e2, n2)| (e.max(e2), n + n2))
    };
    let (exact_err, exact_n) = fold(&dyadic);
    let (other_err, other_n) = fold(&other);
    let small = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let want = [0.0, 0.25, 0.75, 1.0, 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2.0, 2.25, 2.75, 3.0];
    let example = resize(&small, 4, 4).data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        3,
        "bilinear contract",
        worst_const == 0.0 && exact_err == 0.0 && exact_n > 0 && other_err <= 1e-13 && other_n > 0 && example <= 1e-6,
        format!(
            "constant error {worst_const:e}; ramp error {exact_err:e} over {exact_n} interior pixels at power-of-two factors, \
             {other_err:.1e} over {other_n} at other factors; 2x2->4x4 error {example:e}"
        ),
    );
}

/// mIoU from pixel sets, independent of the confusion matrix.
fn set_miou(pred: &[u8], gt: &[u8], classes: u8) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes {
        let p: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] != IGNORE && pred[i] == c).collect();
        let g: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[test]
fn criterion_4_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    while pairs < 1000 {
        let classes = rng.random_range(2..=6u8);
        let ignore_rate = rng.random_range(0.0..0.3);
        let gt: Vec<u8> = (0..256)
            .map(|_| if rng.random_bool(ignore_rate) { IGNORE } else { rng.random_range(0..classes) })
            .collect();
        let pred: Vec<u8> = (0..256).map(|_| rng.random_range(0..classes)).collect();
        if gt.iter().all(|&g| g == IGNORE) {
            continue;
        }
        let mut cm = ConfusionMatrix::new(classes as usize);
        cm.accumulate(&LabelMap::from_vec(16, 16, pred.clone()).unwrap(), &LabelMap::from_vec(16, 16, gt.clone()).unwrap())
            .unwrap();
        worst = worst.max((cm.miou().unwrap() - set_miou(&pred, &gt, classes)).abs());
        pairs += 1;
    }
    verdict(4, "metric oracle", worst <= 1e-12, format!("{pairs} random 16x16 pairs, max difference {worst:e}"));
}

/// Per-pixel thresholded arg-max computed directly from the teacher's logits.
fn brute_force_pseudo(logits: &Tensor<f32>, threshold: f64) -> Vec<u8> {
    let (c, h, w) = (logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let at = |k: usize, p: usize| logits.data()[k * h * w + p] as f64;
    (0..h * w)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if at(k, p) > at(best, p) {
                    best = k;
                }
            }
            let denom: f64 = (0..c).map(|k| (at(k, p) - at(best, p)).exp()).sum();
            if 1.0 / denom >= threshold {
                best as u8
            } else {
                IGNORE
            }
        })
        .collect()
}

#[test]
fn criterion_6_pseudo_label_semantics() {
    let labeled = synth_generate(6, 8, 64, 64, 3).unwrap();
    let mut teacher = TrainState::from_config(SegNet::build(&NetworkSpec::tiny(3), 6).unwrap(), &identity_config(15, 4, 6));
    train(&mut teacher, &labeled, &identity_config(15, 4, 6)).unwrap();

    let probes = synth_generate(7, 6, 32, 32, 3).unwrap();
    let thresholds = [0.0, 0.5, 0.9, 0.99];
    let mut mismatched = 0;
    let mut compared = 0;
    for s in probes.iter() {
        let image = batch_of_one(&s.image).unwrap();
        let logits = teacher.model.logits(&image).unwrap();
        for &t in &thresholds {
            let got = pseudo_label(&teacher.model, &image, t).unwrap();
            let want = brute_force_pseudo(&logits, t);
            mismatched += got.data().iter().zip(&want).filter(|(a, b)| a != b).count();
            compared += want.len();
        }
    }
    let unlabeled = synth_generate(8, 8, 64, 64, 3).unwrap();
    let coverage: Vec<f64> = thresholds
        .iter()
        .map(|&threshold| {
            generate_pseudo_set(&teacher.model, &unlabeled, &PseudoLabelConfig { threshold, output_dir: None })
                .unwrap()
                .overall_coverage
        })
        .collect();
    let monotone = coverage.windows(2).all(|w| w[0] >= w[1]);
    let cli = Cli::try_parse_from(["hrseg", "pseudo-label", "--teacher", "t", "--images", "i", "--out", "o"]).unwrap();
    let cli_default = match cli.command {
        Command::PseudoLabel(a) => a.threshold,
        _ => unreachable!(),
    };
    let defaults = DEFAULT_THRESHOLD == 0.9 && PseudoLabelConfig::default().threshold == 0.9 && cli_default == 0.9;
    verdict(
        6,
        "pseudo-label semantics",
        mismatched == 0 && coverage[0] == 1.0 && monotone && defaults,
        format!("{mismatched} of {compared} pixels differ from brute force, coverage at 0/0.5/0.9/0.99 = {coverage:.4?}, default 0.9 {defaults}"),
    );
}

#[test]
fn criterion_5_overfit() {
    let ds = synth_generate(0, 16, 64, 64, 4).unwrap();
    let spec = NetworkSpec::desk(4);
    assert_eq!(spec.channels(), [8, 12, 16, 24, 32, 48]);
    assert_eq!(spec.head_blocks_per_scale, 1);
    let cfg = identity_config(300, 4, 0);
    assert_eq!((cfg.lr0, cfg.lr_policy.clone()), (0.01, hrseg::train::LrPolicy::Poly { power: 0.9 }));
    let start = Instant::now();
    let mut state = TrainState::from_config(SegNet::build(&spec, 0).unwrap(), &cfg);
    let report = train(&mut state, &ds, &cfg).unwrap();
    let miou = evaluate(&state.model, &ds).unwrap().miou().unwrap();
    let elapsed = start.elapsed();
    verdict(
        5,
        "overfit",
        miou >= 0.95 && elapsed <= Duration::from_secs(15 * 60),
        format!("train mIoU {miou:.4} after {} steps in {:.0}s", report.steps, elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_7_noisy_student() {
    let mut rows = Vec::new();
    let mut artifacts = true;
    for seed in 0..3u64 {
        let labeled = synth_generate(100 + seed, 16, 64, 64, 3).unwrap();
        let unlabeled = synth_generate(200 + seed, 64, 64, 64, 3).unwrap();
        let held_out = synth_generate(300 + seed, 16, 64, 64, 3).unwrap();
        let augment = AugmentConfig { crop: 64, scale_range: (0.75, 1.5), ..AugmentConfig::default() };
        let teacher = TrainConfig { batch_size: 4, epochs: 40, seed, augment, ..TrainConfig::default() };
        let student = TrainConfig { seed: seed + 1000, ..teacher.clone() };
        let cfg = NoisyStudentConfig { spec: NetworkSpec::tiny(3), teacher, student, pseudo: PseudoLabelConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let outcome = noisy_student_train(&labeled, &unlabeled, &cfg, Some(dir.path())).unwrap();
        let coverage = std::fs::read_to_string(dir.path().join("pseudo/coverage.csv")).unwrap_or_default();
        artifacts &= dir.path().join("teacher.ckpt").is_file()
            && dir.path().join("student.ckpt").is_file()
            && coverage.lines().count() == 64 + 2
            && coverage.lines().last().is_some_and(|l| l.starts_with("overall,"));
        let base = evaluate(&outcome.teacher, &held_out).unwrap().miou().unwrap();
        let stud = evaluate(&outcome.student, &held_out).unwrap().miou().unwrap();
        rows.push((seed, base, stud, outcome.pseudo.overall_coverage));
    }
    let mean = |f: fn(&(u64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (base, stud) = (mean(|r| r.1), mean(|r| r.2));
    let per_seed: Vec<String> =
        rows.iter().map(|r| format!("seed {}: baseline {:.4} student {:.4} coverage {:.3}", r.0, r.1, r.2, r.3)).collect();
    verdict(
        7,
        "noisy student",
        artifacts && stud >= base - 0.02,
        format!("mean baseline {base:.4}, mean student {stud:.4}, artifacts {artifacts}; {}", per_seed.join("; ")),
    );
}

fn loss_curve(ds: &Dataset, seed: u64) -> (Vec<f64>, TrainState<SegNet<f32>>) {
    let augment = AugmentConfig { crop: 64, ..AugmentConfig::default() };
    let cfg = TrainConfig { batch_size: 2, epochs: 3, seed, augment, ..TrainConfig::default() };
    let mut state = TrainState::from_config(SegNet::build(&NetworkSpec::tiny(3), seed).unwrap(), &cfg);
    let report = train(&mut state, ds, &cfg).unwrap();
    (report.losses.iter().map(|r| r.loss).collect(), state)
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let ds = synth_generate(8, 6, 64, 64, 3).unwrap();
    let (a, state) = loss_curve(&ds, 11);
    let (b, _) = loss_curve(&ds, 11);
    let (c, _) = loss_curve(&ds, 12);
    let curves_identical = a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()));

    let dir = tempfile::tempdir().unwrap();
    let (first, second) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&first, &state).unwrap();
    let loaded: TrainState<SegNet<f32>> = load_checkpoint(&first, 0.9, 1e-4).unwrap();
    save_checkpoint(&second, &loaded).unwrap();
    let bytes_identical = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();
    let image = Tensor::new(&[2, 3, 64, 96], Fill::Uniform { lo: 0.0, hi: 1.0 }, 3).unwrap();
    let (la, lb) = (state.model.logits(&image).unwrap(), loaded.model.logits(&image).unwrap());
    let predictions_identical = la.data().iter().map(|v| v.to_bits()).eq(lb.data().iter().map(|v| v.to_bits()));
    verdict(
        8,
        "determinism and persistence",
        curves_identical && a != c && predictions_identical && bytes_identical,
        format!(
            "{} losses bit-identical {curves_identical}, other seed differs {}, logits bit-identical {predictions_identical}, save-load-save byte-identical {bytes_identical}",
            a.len(),
            a != c
        ),
    );
}

#[test]
fn criterion_9_lr_schedules() {
    let total = 1000;
    let start = poly_lr(0, total, 0.01, 0.9).unwrap();
    let end = poly_lr(total, total, 0.01, 0.9).unwrap();
    let mid = poly_lr(total / 2, total, 0.01, 0.9).unwrap();
    let poly_ok = (start - 0.01).abs() <= 1e-7 && end.abs() <= 1e-7 && (mid - 0.0053589).abs() <= 1e-7;
    let expected = |epoch: usize| match epoch {
        0..=29 => 0.1,
        30..=59 => 0.01,
        60..=89 => 0.001,
        _ => 0.0001,
    };
    let step_ok = (0..120).all(|e| {
        let lr = step_lr(e, 0.1, &[30, 60, 90], 0.1);
        (lr - expected(e)).abs() <= 1e-12 * expected(e)
    });
    let drops: Vec<usize> =
        (1..120).filter(|&e| step_lr(e, 0.1, &[30, 60, 90], 0.1) < step_lr(e - 1, 0.1, &[30, 60, 90], 0.1)).collect();
    verdict(
        9,
        "lr schedules",
        poly_ok && step_ok && drops == [30, 60, 90],
        format!("poly start {start}, midpoint {mid:.7}, end {end}; step drops at epochs {drops:?}"),
    );
}
