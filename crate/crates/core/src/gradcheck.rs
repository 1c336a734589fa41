//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BilinearTap, Padding, PairNorm, Tape, Var};
use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::head::{classify, co_attention, self_attention, AttentionParams, Classifier, ClassifierVars};
use crate::model::Model;
use crate::regions::Box;
use crate::roi::roi_pool;
use crate::se::{se_forward, SEParams};
use crate::tensor::Tensor;

/// Step used by the operation suite and the model check.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Floor on the denominator of the relative error.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the tape gradient of a scalar function of `theta` against central
/// differences `(f(θ+εe_i) − f(θ−εe_i)) / 2ε` on every coordinate and returns
/// the largest relative error.
///
/// `build` receives a fresh tape and the handle of `theta` (recorded as a
/// trainable leaf) and must return a scalar output.
pub fn finite_diff_check<F>(build: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..theta.numel()).collect();
    finite_diff_check_at(build, theta, eps, &coords)
}

/// [`finite_diff_check`] restricted to the given coordinates.
pub fn finite_diff_check_at<F>(mut build: F, theta: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let var = tape.param(theta.clone());
    let out = build(&mut tape, var)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(var);

    let mut eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t);
        let out = build(&mut tape, v)?;
        let value = tape.value(out).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        Ok(value)
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let base = theta.data()[i];
        let plus = eval(theta.with_value(i, base + eps)?)?;
        let minus = eval(theta.with_value(i, base - eps)?)?;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Largest relative error between the model's parameter gradients and central
/// differences of the single-sample loss, over every parameter coordinate.
pub fn check_model(model: &Model, image: &Tensor, label: usize, eps: f64) -> Result<f64> {
    let analytic = model.sample_gradients(image, label)?.grads;
    let loss = |m: &Model| -> Result<f64> {
        let p = m.forward(image)?.probs;
        Ok(-p.data()[label].max(1e-12).ln())
    };
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (name, grad) in names.iter().zip(&analytic) {
        let original = model.params().get(name)?.clone();
        for (i, &g) in grad.iter().enumerate() {
            let base = original.data()[i];
            probe.params_mut().set(name, original.with_value(i, base + eps)?)?;
            let plus = loss(&probe)?;
            probe.params_mut().set(name, original.with_value(i, base - eps)?)?;
            let minus = loss(&probe)?;
            worst = worst.max(relative_error(g, (plus - minus) / (2.0 * eps)));
        }
        probe.params_mut().set(name, original)?;
    }
    Ok(worst)
}

/// The small model used for end-to-end checks: 24×24 input, widths 4/8/8.
pub fn desk_config(seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: 24,
        backbone_widths: vec![4, 8, 8],
        seed,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Contracts `out` with a fixed random tensor so every output coordinate
/// contributes to the scalar.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random(&mut rng, tape.shape(out), 1.0)?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type Builder = std::boxed::Box<dyn FnMut(&mut Tape, Var) -> Result<Var>>;

/// Runs the finite-difference check on every tape operation and layer, plus
/// the full model, returning `(name, max relative error)` pairs.
pub fn operation_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&str, Tensor, Builder)> = Vec::new();

    let w = random(&mut rng, &[4, 3], 1.0)?;
    let b = random(&mut rng, &[3], 1.0)?;
    cases.push(("affine", random(&mut rng, &[5, 4], 1.0)?, std::boxed::Box::new(move |t, x| {
        let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
        let y = t.affine(x, w, b)?;
        project(t, y, seed)
    })));
    let m = random(&mut rng, &[3, 4], 1.0)?;
    cases.push(("matmul", random(&mut rng, &[2, 3], 1.0)?, std::boxed::Box::new(move |t, x| {
        let m = t.constant(m.clone());
        let y = t.matmul(x, m)?;
        project(t, y, seed)
    })));
    for (name, op) in [("tanh", 0), ("sigmoid", 1), ("relu", 2)] {
        // Keep relu inputs away from the kink.
        let mut x = random(&mut rng, &[3, 4], 2.0)?;
        if op == 2 {
            x = x.map(|v| if v.abs() < 0.1 { v + 0.2f64.copysign(v) } else { v })?;
        }
        cases.push((name, x, std::boxed::Box::new(move |t, x| {
            let y = match op {
                0 => t.tanh(x)?,
                1 => t.sigmoid(x)?,
                _ => t.relu(x)?,
            };
            project(t, y, seed)
        })));
    }
    let other = random(&mut rng, &[3, 4], 1.0)?;
    cases.push(("add_mul_scale", random(&mut rng, &[3, 4], 1.0)?, std::boxed::Box::new(move |t, x| {
        let o = t.constant(other.clone());
        let a = t.add(x, o)?;
        let m = t.mul(a, x)?;
        let y = t.scale(m, -0.7)?;
        project(t, y, seed)
    })));
    cases.push(("softmax", random(&mut rng, &[3, 5], 2.0)?, std::boxed::Box::new(move |t, x| {
        let y = t.softmax(x)?;
        project(t, y, seed)
    })));
    cases.push(("global_average_pool", random(&mut rng, &[3, 4, 2], 1.0)?, std::boxed::Box::new(move |t, x| {
        let y = t.global_average_pool(x)?;
        project(t, y, seed)
    })));
    let k = random(&mut rng, &[3, 3, 2, 3], 0.5)?;
    let kb = random(&mut rng, &[3], 0.5)?;
    cases.push(("conv2d", random(&mut rng, &[6, 5, 2], 1.0)?, std::boxed::Box::new(move |t, x| {
        let (k, b) = (t.constant(k.clone()), t.constant(kb.clone()));
        let same = t.conv2d(x, k, b, 1, Padding::Same)?;
        let valid = t.conv2d(x, k, b, 2, Padding::Valid)?;
        let a = project(t, same, seed)?;
        let c = project(t, valid, seed + 1)?;
        t.add(a, c)
    })));
    let k2 = random(&mut rng, &[3, 3, 2, 2], 0.5)?;
    let input = random(&mut rng, &[5, 5, 2], 1.0)?;
    cases.push(("conv2d_kernel", k2, std::boxed::Box::new(move |t, k| {
        let x = t.constant(input.clone());
        let b = t.constant(Tensor::zeros(&[2])?);
        let y = t.conv2d(x, k, b, 1, Padding::Same)?;
        project(t, y, seed)
    })));
    // Distinct values keep every pooling window free of ties.
    let mut vals: Vec<f64> = (0..4 * 6 * 2).map(|i| i as f64 * 0.1).collect();
    vals.shuffle(&mut rng);
    cases.push(("maxpool2d", Tensor::new(vec![4, 6, 2], vals)?, std::boxed::Box::new(move |t, x| {
        let y = t.maxpool2d(x, 2)?;
        project(t, y, seed)
    })));
    cases.push(("bilinear_upsample", random(&mut rng, &[3, 4, 2], 1.0)?, std::boxed::Box::new(move |t, x| {
        let y = t.bilinear_upsample(x, 2)?;
        project(t, y, seed)
    })));
    let taps: Vec<BilinearTap> = (0..6)
        .map(|_| BilinearTap::at(rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), 4, 4))
        .collect();
    cases.push(("resample", random(&mut rng, &[4, 4, 2], 1.0)?, std::boxed::Box::new(move |t, x| {
        let y = t.resample(x, taps.clone(), 2, 3)?;
        project(t, y, seed)
    })));
    cases.push(("roi_pool", random(&mut rng, &[8, 8, 3], 1.0)?, std::boxed::Box::new(move |t, x| {
        let b = Box { x0: 0.7, y0: 1.3, x1: 6.1, y1: 7.4 };
        let y = roi_pool(t, x, &b, 3)?;
        project(t, y, seed)
    })));
    let gate = random(&mut rng, &[3], 1.0)?.map(|v| v.abs())?;
    cases.push(("channel_scale", random(&mut rng, &[2, 2, 3], 1.0)?, std::boxed::Box::new(move |t, x| {
        let g = t.constant(gate.clone());
        let y = t.channel_scale(x, g, true)?;
        project(t, y, seed)
    })));
    let v = random(&mut rng, &[3, 2], 1.0)?;
    cases.push(("pairwise_add", random(&mut rng, &[3, 2], 1.0)?, std::boxed::Box::new(move |t, x| {
        let v = t.constant(v.clone());
        let y = t.pairwise_add(x, v)?;
        project(t, y, seed)
    })));
    for (name, norm) in [
        ("pair_softmax_global", PairNorm::Global),
        ("pair_softmax_with_diagonal", PairNorm::GlobalWithDiagonal),
        ("pair_softmax_per_row", PairNorm::PerRow),
    ] {
        cases.push((name, random(&mut rng, &[16, 1], 2.0)?, std::boxed::Box::new(move |t, x| {
            let y = t.pair_softmax(x, norm)?;
            project(t, y, seed)
        })));
    }
    cases.push(("stack_reshape", random(&mut rng, &[6], 1.0)?, std::boxed::Box::new(move |t, x| {
        let s = t.stack(&[x, x])?;
        let r = t.reshape(s, vec![3, 4])?;
        project(t, r, seed)
    })));
    let labels = [2usize, 0, 1];
    cases.push(("nll", random(&mut rng, &[3, 4], 2.0)?, std::boxed::Box::new(move |t, x| {
        let p = t.softmax(x)?;
        t.nll(p, &labels)
    })));

    let se = SEParams::init(4, 2, &mut rng)?;
    cases.push(("se_forward", random(&mut rng, &[3, 3, 4], 1.0)?, std::boxed::Box::new(move |t, x| {
        let vars = se.bind(t);
        let y = se_forward(t, x, &vars, true)?;
        project(t, y, seed)
    })));
    let att = AttentionParams::init(3, 4, &mut rng)?;
    let cls = Classifier::init(3, 4, &mut rng)?;
    cases.push(("attention_head", random(&mut rng, &[5, 3], 1.0)?, std::boxed::Box::new(move |t, x| {
        let vars = att.bind(t);
        let bank = split_rows(t, x, 5, 3)?;
        let (_, l) = self_attention(t, &bank, &vars, PairNorm::Global)?;
        let (_, ca) = co_attention(t, l, &vars)?;
        let weight = t.param(cls.weight.clone());
        let bias = t.param(cls.bias.clone());
        let probs = classify(t, ca, &ClassifierVars { weight, bias })?;
        t.nll(probs, &[1])
    })));

    let mut report = Vec::with_capacity(cases.len() + 2);
    for (name, theta, build) in cases {
        report.push((name.to_string(), finite_diff_check(build, &theta, DEFAULT_EPS)?));
    }

    let cfg = desk_config(seed);
    let size = cfg.image_size;
    let image = random(&mut rng, &[size, size, 3], 1.0)?.map(|v| v.abs())?;
    let backbone_model = Model::init(cfg.clone())?;
    report.push((
        "backbone".to_string(),
        finite_diff_check(
            |t, x| {
                let bound = backbone_model.params().bind(t);
                let feat = backbone_model.backbone(t, &bound, x)?;
                project(t, feat, seed)
            },
            &image,
            DEFAULT_EPS,
        )?,
    ));
    let label = rng.gen_range(0..cfg.num_classes);
    for ablation in [Ablation::Full, Ablation::Base] {
        let model = Model::init(ModelConfig { ablation, ..cfg.clone() })?;
        report.push((format!("model[{}]", ablation.label()), check_model(&model, &image, label, DEFAULT_EPS)?));
    }
    Ok(report)
}

/// Splits an `n × d` variable into `n` row vectors on the tape.
fn split_rows(tape: &mut Tape, x: Var, n: usize, d: usize) -> Result<Vec<Var>> {
    (0..n)
        .map(|r| {
            let sel = Tensor::new(vec![1, n], (0..n).map(|i| if i == r { 1.0 } else { 0.0 }).collect())?;
            let sel = tape.constant(sel);
            let row = tape.matmul(sel, x)?;
            tape.reshape(row, vec![d])
        })
        .collect()
}
