use std::collections::BTreeSet;

use proptest::prelude::*;

use hrseg::backbone::NetworkSpec;
use hrseg::data::{load_dataset, synth_generate, AugmentConfig, LabelMap, IGNORE};
use hrseg::eval::{evaluate, ConfusionMatrix};
use hrseg::noisy_student::{combine, generate_pseudo_set, threshold_logits, PseudoLabelConfig};
use hrseg::seg_head::SegNet;
use hrseg::tensor::Tensor;
use hrseg::train::{save_checkpoint, train, Checkpoint, TrainConfig, TrainState};

fn logits_strategy() -> impl Strategy<Value = Tensor<f32>> {
    (1usize..4, 2usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, c, h, w)| {
        proptest::collection::vec(-8.0f32..8.0, n * c * h * w)
            .prop_map(move |data| Tensor::from_vec(&[n, c, h, w], data).unwrap())
    })
}

fn naive_labels(logits: &Tensor<f32>, threshold: f64) -> Vec<u8> {
    let s = logits.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let v: Vec<f64> = (0..c).map(|k| logits.data()[(b * c + k) * hw + p] as f64).collect();
            let best = (0..c).fold(0, |a, k| if v[k] > v[a] { k } else { a });
            let sum: f64 = v.iter().map(|x| (x - v[best]).exp()).sum();
            out.push(if 1.0 / sum >= threshold { best as u8 } else { IGNORE });
        }
    }
    out
}

proptest! {
    #[test]
    fn thresholding_matches_per_pixel_definition(logits in logits_strategy(), threshold in 0.0f64..=1.0) {
        let maps = threshold_logits(&logits, threshold).unwrap();
        let got: Vec<u8> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
        prop_assert_eq!(got, naive_labels(&logits, threshold));
    }

    #[test]
    fn coverage_never_grows_with_the_threshold(logits in logits_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let kept = |t| threshold_logits(&logits, t).unwrap().iter().map(|m| m.data().len() - m.ignored_count()).sum::<usize>();
        prop_assert!(kept(lo) >= kept(hi));
        let total: usize = logits.numel() / logits.shape()[1];
        prop_assert_eq!(kept(0.0), total);
    }

    #[test]
    fn miou_agrees_with_pixel_sets(
        classes in 2u8..8,
        pairs in proptest::collection::vec((0u8..8, 0u8..9), 1..200),
    ) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0 % classes).collect();
        let gt: Vec<u8> = pairs.iter().map(|p| if p.1 == 8 { IGNORE } else { p.1 % classes }).collect();
        prop_assume!(gt.iter().any(|&g| g != IGNORE));
        let mut cm = ConfusionMatrix::new(classes as usize);
        let n = pred.len();
        cm.accumulate(&LabelMap::from_vec(1, n, pred.clone()).unwrap(), &LabelMap::from_vec(1, n, gt.clone()).unwrap()).unwrap();
        let mut ious = Vec::new();
        for c in 0..classes {
            let p: BTreeSet<usize> = (0..n).filter(|&i| gt[i] != IGNORE && pred[i] == c).collect();
            let g: BTreeSet<usize> = (0..n).filter(|&i| gt[i] == c).collect();
            let union = p.union(&g).count();
            if union > 0 {
                ious.push(p.intersection(&g).count() as f64 / union as f64);
            }
        }
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        prop_assert!((cm.miou().unwrap() - want).abs() <= 1e-12);
    }
}

#[test]
fn truncated_checkpoints_are_rejected_without_panicking() {
    let net = SegNet::<f32>::build(&NetworkSpec::tiny(3), 0).unwrap();
    let state = TrainState::new(net, 0.9, 1e-4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &state).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes).is_ok());
    for cut in [0, 3, 6, 10, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "prefix of {cut} bytes");
    }
    let mut flipped = bytes.clone();
    flipped[6] ^= 0xff;
    assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("version"));
}

#[test]
fn disk_backed_self_training_round() {
    let dir = tempfile::tempdir().unwrap();
    let (labeled_dir, unlabeled_dir, pseudo_dir) = (dir.path().join("l"), dir.path().join("u"), dir.path().join("p"));
    synth_generate(20, 8, 64, 64, 3).unwrap().save(&labeled_dir).unwrap();
    synth_generate(21, 4, 64, 64, 3).unwrap().save(&unlabeled_dir).unwrap();
    let labeled = load_dataset(&labeled_dir, 3).unwrap();
    let unlabeled = hrseg::data::load_images(&unlabeled_dir, 3).unwrap();
    assert!(unlabeled.iter().all(|s| s.label().is_none()));

    let cfg = TrainConfig { batch_size: 4, epochs: 10, augment: AugmentConfig::identity(64), ..TrainConfig::default() };
    let mut teacher = TrainState::from_config(SegNet::build(&NetworkSpec::tiny(3), 0).unwrap(), &cfg);
    train(&mut teacher, &labeled, &cfg).unwrap();

    let pcfg = PseudoLabelConfig { threshold: 0.5, output_dir: Some(pseudo_dir.clone()) };
    let pseudo = generate_pseudo_set(&teacher.model, &unlabeled, &pcfg).unwrap();
    let reloaded = load_dataset(&pseudo_dir, 3).unwrap();
    assert_eq!(reloaded, pseudo.dataset);
    let coverage = std::fs::read_to_string(pseudo_dir.join("coverage.csv")).unwrap();
    assert_eq!(coverage.lines().count(), 4 + 2);

    let combined = combine(&labeled, &reloaded).unwrap();
    assert_eq!(combined.len(), 12);
    let mut student = TrainState::from_config(SegNet::build(&NetworkSpec::tiny(3), 1).unwrap(), &cfg);
    let report = train(&mut student, &combined, &TrainConfig { epochs: 2, ..cfg }).unwrap();
    assert_eq!(report.steps + report.skipped, 6);
    let miou = evaluate(&student.model, &labeled).unwrap().miou().unwrap();
    assert!((0.0..=1.0).contains(&miou));
}
