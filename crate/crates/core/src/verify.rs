//! Finite-difference verification of every layer type and of the whole network.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::NetworkSpec;
use crate::error::Result;
use crate::nn::{
    batch_norm_eval, batch_norm_train, bilinear_resize, concat_channels, conv2d, cross_entropy_ignore,
    global_avg_pool, linear, softmax_channels, Ctx, ResidualBlock,
};
use crate::seg_head::{MergeModule, SegNet};
use crate::tensor::{grad_check, ops, CheckReport, Fill, GradCheckOptions, ParamStore, Tape, Tensor, Var};

/// Tolerance applied to every entry of the suite.
pub const SUITE_TOLERANCE: f64 = 3e-3;

/// Names of every differentiable operation, as accepted by fault injection.
pub const BACKWARD_OPS: &[&str] = &[
    "abs",
    "add",
    "batch_norm_eval",
    "batch_norm_train",
    "bilinear_resize",
    "concat_channels",
    "conv2d",
    "cross_entropy_ignore",
    "global_avg_pool",
    "linear",
    "mean",
    "mul",
    "relu",
    "scale",
    "softmax_channels",
    "sub",
    "sum",
];

/// The static name of a backward operation, if `name` is one.
pub fn backward_op(name: &str) -> Option<&'static str> {
    BACKWARD_OPS.iter().copied().find(|&op| op == name)
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: CheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed && self.report.checked > 0
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    /// One entry per layer type.
    pub layers: Vec<SuiteEntry>,
    /// Whole-network checks: the input and each parameter group.
    pub network: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().chain(&self.network).all(SuiteEntry::passed)
    }

    pub fn max_layer_error(&self) -> f64 {
        self.layers.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_network_error(&self) -> f64 {
        self.network.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = |title: &str, entries: &[SuiteEntry]| {
            writeln!(out, "{title}").unwrap();
            for e in entries {
                writeln!(
                    out,
                    "  {:<28} max_rel_error={:.3e} checked={:<4} excluded={:<4} {}",
                    e.name,
                    e.report.max_rel_error,
                    e.report.checked,
                    e.report.excluded,
                    if e.passed() { "ok" } else { "FAIL" }
                )
                .unwrap();
            }
        };
        section("layers", &self.layers);
        section("network", &self.network);
        writeln!(out, "tolerance {SUITE_TOLERANCE:e}, {:.1}s, {}", self.seconds, if self.passed() { "PASS" } else { "FAIL" })
            .unwrap();
        out
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::new(shape, Fill::Uniform { lo: 0.1, hi: 1.0 }, seed).expect("suite shape")
}

fn sum_of_squares(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let sq = ops::mul(t, y, y)?;
    Ok(ops::sum(t, sq))
}

/// Weighted sum with fixed pseudo-random weights, so every output element matters differently.
fn projected(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::new(t.shape(y), Fill::Uniform { lo: -1.0, hi: 1.0 }, seed)?;
    let w = t.constant(&w);
    let m = ops::mul(t, y, w)?;
    Ok(ops::sum(t, m))
}

struct Runner {
    opts: GradCheckOptions,
    fault: Option<&'static str>,
    entries: Vec<SuiteEntry>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, input: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let fault = self.fault;
        let report = grad_check(
            |t, v| {
                t.set_fault(fault);
                f(t, v)
            },
            input,
            &self.opts,
        )?;
        self.entries.push(SuiteEntry { name: name.to_string(), report });
        Ok(())
    }
}

fn layer_checks(r: &mut Runner) -> Result<()> {
    let x = uniform(&[2, 3, 6, 6], 1);
    let w = Tensor::<f64>::new(&[4, 3, 3, 3], Fill::Normal { mean: 0.0, std: 0.3 }, 2)?;
    let b = uniform(&[4], 3);
    r.check("conv2d", &x, |t, v| {
        let (wv, bv) = (t.constant(&w), t.constant(&b));
        let y = conv2d(t, v, wv, Some(bv), 2, 1)?;
        sum_of_squares(t, y)
    })?;

    let gamma = uniform(&[3], 4);
    let beta = uniform(&[3], 5);
    r.check("batch_norm_train", &x, |t, v| {
        let (g, bt) = (t.constant(&gamma), t.constant(&beta));
        let (y, _) = batch_norm_train(t, v, g, bt, 1e-5)?;
        projected(t, y, 6)
    })?;
    r.check("batch_norm_eval", &x, |t, v| {
        let (g, bt) = (t.constant(&gamma), t.constant(&beta));
        let y = batch_norm_eval(t, v, g, bt, &[0.3, 0.5, 0.7], &[0.8, 1.2, 1.5], 1e-5)?;
        sum_of_squares(t, y)
    })?;

    let centred = Tensor::<f64>::new(&[2, 3, 4, 4], Fill::Uniform { lo: -1.0, hi: 1.0 }, 7)?;
    r.check("relu", &centred, |t, v| {
        let y = ops::relu(t, v);
        sum_of_squares(t, y)
    })?;

    let per_channel = uniform(&[3], 8);
    r.check("elementwise", &x, |t, v| {
        let c = t.constant(&per_channel);
        let y = ops::mul(t, v, c)?;
        let y = ops::add(t, y, c)?;
        let y = ops::sub(t, y, v)?;
        let y = ops::mul(t, y, v)?;
        projected(t, y, 25)
    })?;

    r.check("bilinear_resize", &uniform(&[1, 2, 3, 4], 9), |t, v| {
        let y = bilinear_resize(t, v, 7, 5)?;
        projected(t, y, 10)
    })?;

    let other = uniform(&[2, 2, 6, 6], 11);
    r.check("concat_channels", &x, |t, v| {
        let o = t.constant(&other);
        let y = concat_channels(t, o, v)?;
        projected(t, y, 12)
    })?;

    let mut store = ParamStore::<f64>::new();
    let block = ResidualBlock::new(&mut store, "block", 3, 4, 2, 13);
    r.check("residual_block", &x, |t, v| {
        let mut s = store.clone();
        let y = block.forward(&mut Ctx::train(t, &mut s), v)?;
        projected(t, y, 14)
    })?;

    r.check("global_avg_pool", &x, |t, v| {
        let y = global_avg_pool(t, v)?;
        sum_of_squares(t, y)
    })?;

    let lw = Tensor::<f64>::new(&[5, 3], Fill::Normal { mean: 0.0, std: 0.5 }, 15)?;
    let lb = uniform(&[5], 16);
    r.check("linear", &uniform(&[4, 3], 17), |t, v| {
        let (wv, bv) = (t.constant(&lw), t.constant(&lb));
        let y = linear(t, v, wv, bv)?;
        sum_of_squares(t, y)
    })?;

    r.check("softmax_channels", &x, |t, v| {
        let y = softmax_channels(t, v)?;
        projected(t, y, 18)
    })?;

    let labels: Vec<u8> = (0..2 * 36).map(|i| if i % 7 == 3 { 255 } else { (i % 3) as u8 }).collect();
    r.check("cross_entropy_ignore", &x, |t, v| cross_entropy_ignore(t, v, &labels, 255))?;

    let mut store = ParamStore::<f64>::new();
    let feat = MergeModule::features(&mut store, "m1", 2, 3, 3, 3, 19);
    let logit = MergeModule::logits(&mut store, "m2", 3, 3, 20);
    let low = uniform(&[2, 2, 3, 3], 21);
    r.check("merge_features", &x, |t, v| {
        let mut s = store.clone();
        let l = t.constant(&low);
        let y = feat.forward(&mut Ctx::train(t, &mut s), l, v)?;
        projected(t, y, 22)
    })?;
    let low3 = uniform(&[2, 3, 3, 3], 23);
    r.check("merge_logits", &x, |t, v| {
        let l = t.constant(&low3);
        let y = logit.forward(&mut Ctx::eval(t, &store), l, v)?;
        projected(t, y, 24)
    })?;
    Ok(())
}

/// Perturbs gammas, betas, biases and running statistics away from their initial
/// values so eval-mode normalisation is not an identity and no bias sits on zero.
fn randomize_state(net: &mut SegNet<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = net.store.iter().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in ids {
        let range = if name.ends_with(".gamma") || name.ends_with(".running_var") {
            0.5..1.5
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") || name.ends_with(".bias") {
            -0.2..0.2
        } else {
            continue;
        };
        net.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(range.clone()));
    }
}

fn network_checks(r: &mut Runner, spec: &NetworkSpec, samples: usize) -> Result<()> {
    let mut net = SegNet::<f64>::build(spec, 31)?;
    randomize_state(&mut net, 32);
    let x = Tensor::<f64>::new(&[1, 3, 32, 32], Fill::Uniform { lo: 0.0, hi: 1.0 }, 33)?;
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let labels: Vec<u8> = (0..32 * 32).map(|_| rng.random_range(0..spec.num_classes as u8)).collect();
    let loss = |t: &mut Tape<f64>, net: &SegNet<f64>, input: Var| -> Result<Var> {
        let out = net.forward_eval(t, input)?;
        cross_entropy_ignore(t, out.final_logits, &labels, 255)
    };

    r.opts.max_elements = Some(samples);
    r.check("end_to_end(input)", &x, |t, v| loss(t, &net, v))?;

    let groups = [
        "backbone.stem.weight",
        "backbone.s3.b1.conv2.weight",
        "backbone.s6.b0.proj.weight",
        "head.merge1.s1.conv.weight",
        "head.refine.s4.b0.conv1.weight",
        "head.refine.s6.cls.bias",
        "head.merge2.s2.conv.weight",
        "head.merge2.s1.conv.bias",
    ];
    for name in groups {
        let id = net.store.find(name).expect("parameter group exists");
        let value = net.store.get(id).clone();
        r.check(&format!("end_to_end({name})"), &value, |t, v| {
            t.bind_param(id, v)?;
            let input = t.constant(&x);
            loss(t, &net, input)
        })?;
    }
    Ok(())
}

/// Runs all layer checks and the whole-network checks of `spec` at `SUITE_TOLERANCE`.
///
/// `fault` names an operation whose backward pass is deliberately corrupted, as a
/// negative control. `samples` bounds the coordinates checked per network entry.
pub fn grad_check_suite(spec: &NetworkSpec, fault: Option<&'static str>, samples: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let opts = GradCheckOptions { tol: SUITE_TOLERANCE, ..GradCheckOptions::default() };
    let mut r = Runner { opts, fault, entries: Vec::new() };
    layer_checks(&mut r)?;
    let layers = std::mem::take(&mut r.entries);
    network_checks(&mut r, spec, samples)?;
    Ok(SuiteReport { layers, network: r.entries, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_type_appears_once() {
        let mut r = Runner { opts: GradCheckOptions::default(), fault: None, entries: Vec::new() };
        layer_checks(&mut r).unwrap();
        let mut names: Vec<&str> = r.entries.iter().map(|e| e.name.as_str()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(r.entries.iter().all(SuiteEntry::passed), "{:?}", r.entries);
    }

    #[test]
    fn injected_fault_is_caught() {
        let mut r = Runner { opts: GradCheckOptions::default(), fault: Some("conv2d"), entries: Vec::new() };
        layer_checks(&mut r).unwrap();
        let conv = r.entries.iter().find(|e| e.name == "conv2d").unwrap();
        assert!(!conv.passed());
    }
}

