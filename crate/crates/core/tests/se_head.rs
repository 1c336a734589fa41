mod common;

use common::{assert_close, random_tensor, rng};
use proptest::prelude::*;
use ran::gradcheck::finite_diff_check;
use ran::head::{batch_loss, classify, co_attention, self_attention, AttentionParams, AttentionVars, ClassifierVars};
use ran::params::glorot_limit;
use ran::se::{bottleneck_width, se_forward, SEParams};
use ran::{PairNorm, Tape, Tensor, Var};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

// Straight-line SE gate: channel means -> FC -> relu -> FC -> sigmoid.
fn reference_gate(x: &Tensor, p: &SEParams) -> Vec<f64> {
    let c = x.shape()[2];
    let hw = x.shape()[0] * x.shape()[1];
    let b = p.b1.numel();
    let mut z = vec![0.0; c];
    for (i, v) in x.data().iter().enumerate() {
        z[i % c] += v / hw as f64;
    }
    let mut hidden = vec![0.0; b];
    for j in 0..b {
        let mut acc = p.b1.data()[j];
        for k in 0..c {
            acc += z[k] * p.w1.data()[k * b + j];
        }
        hidden[j] = acc.max(0.0);
    }
    (0..c)
        .map(|j| {
            let mut acc = p.b2.data()[j];
            for k in 0..b {
                acc += hidden[k] * p.w2.data()[k * c + j];
            }
            sigmoid(acc)
        })
        .collect()
}

fn run_se(x: &Tensor, p: &SEParams, skip: bool) -> Tensor {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let vars = p.bind(&mut t);
    let y = se_forward(&mut t, xv, &vars, skip).unwrap();
    t.value(y).clone()
}

#[test]
fn se_init_is_deterministic_and_bounded() {
    let a = SEParams::init(8, 16, &mut rng(3)).unwrap();
    let b = SEParams::init(8, 16, &mut rng(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(bottleneck_width(8, 16), 4);
    assert_eq!(a.w1.shape(), &[8, 4]);
    assert_eq!(bottleneck_width(64, 16), 4);
    assert_eq!(bottleneck_width(128, 16), 8);
    let limit = glorot_limit(8, 4);
    assert!(a.w1.data().iter().chain(a.w2.data()).all(|v| v.abs() <= limit));
    assert!(a.b1.data().iter().chain(a.b2.data()).all(|&v| v == 0.0));
}

#[test]
fn se_zero_params_gain_is_one_and_a_half() {
    let x = random_tensor(&mut rng(4), &[3, 3, 6], 2.0);
    let out = run_se(&x, &SEParams::zeros(6, 16).unwrap(), true);
    for (o, v) in out.data().iter().zip(x.data()) {
        assert!((o - 1.5 * v).abs() <= 1e-12);
    }
    let p = SEParams::init(6, 2, &mut rng(5)).unwrap();
    let zero = Tensor::zeros(&[3, 3, 6]).unwrap();
    assert!(run_se(&zero, &p, true).data().iter().all(|&v| v == 0.0));
}

#[test]
fn se_matches_straight_line_evaluation() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[3, 3, 8], 1.0);
    let mut p = SEParams::init(8, 2, &mut r).unwrap();
    p.b1 = random_tensor(&mut r, &[4], 0.5);
    p.b2 = random_tensor(&mut r, &[8], 0.5);
    let s = reference_gate(&x, &p);
    let expected_skip: Vec<f64> = x.data().iter().enumerate().map(|(i, v)| v * (1.0 + s[i % 8])).collect();
    let expected_plain: Vec<f64> = x.data().iter().enumerate().map(|(i, v)| v * s[i % 8]).collect();
    assert_close(run_se(&x, &p, true).data(), &expected_skip, 1e-14);
    assert_close(run_se(&x, &p, false).data(), &expected_plain, 1e-14);
}

#[test]
fn se_gradients() {
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[3, 3, 8], 1.0);
    let mut p = SEParams::init(8, 2, &mut r).unwrap();
    p.b1 = random_tensor(&mut r, &[4], 0.5);
    let proj = random_tensor(&mut r, &[3, 3, 8], 1.0);

    let objective = |t: &mut Tape, xv: Var, vars: &ran::se::SEVars| -> ran::Result<Var> {
        let y = se_forward(t, xv, vars, true)?;
        let w = t.constant(proj.clone());
        let prod = t.mul(y, w)?;
        t.sum(prod)
    };
    let ex = finite_diff_check(
        |t, xv| {
            let vars = p.bind(t);
            objective(t, xv, &vars)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(ex < 1e-6, "x {ex}");
    for which in 0..4 {
        let theta = [&p.w1, &p.b1, &p.w2, &p.b2][which].clone();
        let err = finite_diff_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let mut vars = p.bind(t);
                match which {
                    0 => vars.w1 = v,
                    1 => vars.b1 = v,
                    2 => vars.w2 = v,
                    _ => vars.b2 = v,
                }
                objective(t, xv, &vars)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "param {which}: {err}");
    }
}

proptest! {
    #[test]
    fn se_gain_strictly_between_one_and_two(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 2, 5], 3.0);
        let p = SEParams::init(5, 1, &mut r).unwrap();
        let out = run_se(&x, &p, true);
        for (o, v) in out.data().iter().zip(x.data()) {
            if *v != 0.0 {
                let gain = o / v;
                prop_assert!(gain > 1.0 && gain < 2.0, "gain {}", gain);
            }
        }
    }

    #[test]
    fn se_commutes_with_spatial_permutation(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 3, 4], 1.0);
        let p = SEParams::init(4, 1, &mut r).unwrap();
        // Reverse the order of the six spatial positions.
        let permute = |t: &Tensor| {
            let mut data = Vec::new();
            for px in t.data().chunks(4).rev() {
                data.extend_from_slice(px);
            }
            Tensor::new(vec![2, 3, 4], data).unwrap()
        };
        let lhs = run_se(&permute(&x), &p, true);
        let rhs = permute(&run_se(&x, &p, true));
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-14);
        }
    }
}

fn bank(t: &mut Tape, rows: &[Vec<f64>]) -> Vec<Var> {
    rows.iter()
        .map(|r| t.constant(Tensor::vector(r.clone()).unwrap()))
        .collect()
}

fn random_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let t = random_tensor(&mut rng(seed), &[n, d], 1.0);
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// Straight-line evaluation of the pairwise attention and co-attention.
fn reference_attention(f: &[Vec<f64>], p: &AttentionParams) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = f.len();
    let d = f[0].len();
    let h = p.bh.numel();
    let dot_col = |v: &[f64], w: &Tensor, col: usize, cols: usize| -> f64 {
        v.iter().enumerate().map(|(k, x)| x * w.data()[k * cols + col]).sum()
    };
    let mut g = vec![0.0; n * n];
    for r in 0..n {
        for r2 in 0..n {
            let mut score = p.bg.data()[0];
            for j in 0..h {
                let pre = dot_col(&f[r], &p.wh, j, h) + dot_col(&f[r2], &p.wh2, j, h) + p.bh.data()[j];
                score += pre.tanh() * p.wg.data()[j];
            }
            g[r * n + r2] = score;
        }
    }
    let z: f64 = (0..n * n).filter(|i| i / n != i % n).map(|i| g[i].exp()).sum();
    let alpha: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 0.0 } else { g[i].exp() / z })
        .collect();
    let l: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            (0..d)
                .map(|k| (0..n).filter(|&r2| r2 != r).map(|r2| alpha[r * n + r2] * f[r2][k]).sum())
                .collect()
        })
        .collect();
    let c: Vec<f64> = l.iter().map(|lr| dot_col(lr, &p.wc, 0, 1) + p.bc.data()[0]).collect();
    let cz: f64 = c.iter().map(|v| v.exp()).sum();
    let a: Vec<f64> = c.iter().map(|v| v.exp() / cz).collect();
    let ca: Vec<f64> = (0..d).map(|k| (0..n).map(|r| a[r] * l[r][k]).sum()).collect();
    (alpha, l, a, ca)
}

#[test]
fn uniform_scores_give_uniform_pair_weights() {
    let rows = random_rows(8, 4, 3);
    let mut t = Tape::new();
    let b = bank(&mut t, &rows);
    let p = AttentionParams::zeros(3, 3).unwrap().bind(&mut t);
    let (alpha, _) = self_attention(&mut t, &b, &p, PairNorm::Global).unwrap();
    for (i, &w) in t.value(alpha).data().iter().enumerate() {
        let expected = if i / 4 == i % 4 { 0.0 } else { 1.0 / 12.0 };
        assert!((w - expected).abs() < 1e-15);
    }

    let rows = vec![vec![1.0, -2.0], vec![3.0, 0.5]];
    let mut t = Tape::new();
    let b = bank(&mut t, &rows);
    let p = AttentionParams::zeros(2, 2).unwrap().bind(&mut t);
    let (_, l) = self_attention(&mut t, &b, &p, PairNorm::Global).unwrap();
    assert_close(t.value(l).data(), &[1.5, 0.25, 0.5, -1.0], 1e-15);
}

#[test]
fn identical_features_give_identical_attended_rows() {
    let rows = vec![vec![0.3, -0.7, 1.1]; 5];
    let mut t = Tape::new();
    let b = bank(&mut t, &rows);
    let p = AttentionParams::init(3, 4, &mut rng(9)).unwrap().bind(&mut t);
    let (_, l) = self_attention(&mut t, &b, &p, PairNorm::Global).unwrap();
    let data = t.value(l).data();
    for row in data.chunks(3) {
        assert_close(row, &data[..3], 1e-15);
    }
}

#[test]
fn fewer_than_two_items_is_an_error() {
    let mut t = Tape::new();
    let b = bank(&mut t, &[vec![1.0, 2.0]]);
    let p = AttentionParams::zeros(2, 2).unwrap().bind(&mut t);
    assert!(self_attention(&mut t, &b, &p, PairNorm::Global).is_err());
}

fn random_attention(seed: u64, d: usize, h: usize) -> AttentionParams {
    let mut r = rng(seed);
    let mut p = AttentionParams::init(d, h, &mut r).unwrap();
    p.bh = random_tensor(&mut r, &[h], 0.3);
    p.bg = random_tensor(&mut r, &[1], 0.3);
    p.bc = random_tensor(&mut r, &[1], 0.3);
    p
}

#[test]
fn three_item_bank_matches_reference() {
    let rows = random_rows(10, 3, 4);
    let params = random_attention(11, 4, 5);
    let (alpha_ref, l_ref, a_ref, ca_ref) = reference_attention(&rows, &params);
    let mut t = Tape::new();
    let b = bank(&mut t, &rows);
    let p = params.bind(&mut t);
    let (alpha, l) = self_attention(&mut t, &b, &p, PairNorm::Global).unwrap();
    let (a, ca) = co_attention(&mut t, l, &p).unwrap();
    assert_close(t.value(alpha).data(), &alpha_ref, 1e-14);
    assert_close(t.value(l).data(), &l_ref.concat(), 1e-14);
    assert_close(t.value(a).data(), &a_ref, 1e-14);
    assert_close(t.value(ca).data(), &ca_ref, 1e-14);
}

#[test]
fn attention_gradients() {
    let rows = random_rows(12, 3, 4);
    let params = random_attention(13, 4, 5);
    let classes = random_tensor(&mut rng(14), &[4, 3], 1.0);
    let names = ["wh", "wh2", "bh", "wg", "bg", "wc", "bc", "features"];
    for (which, name) in names.iter().enumerate() {
        let theta = match which {
            0 => params.wh.clone(),
            1 => params.wh2.clone(),
            2 => params.bh.clone(),
            3 => params.wg.clone(),
            4 => params.bg.clone(),
            5 => params.wc.clone(),
            6 => params.bc.clone(),
            _ => Tensor::new(vec![3, 4], rows.concat()).unwrap(),
        };
        let err = finite_diff_check(
            |t, v| {
                let mut p = params.bind(t);
                let feats = if which == 7 {
                    (0..3)
                        .map(|r| {
                            let m = t.constant(Tensor::new(vec![1, 3], (0..3).map(|k| f64::from(k == r)).collect())?);
                            let row = t.matmul(m, v)?;
                            t.reshape(row, vec![4])
                        })
                        .collect::<ran::Result<Vec<_>>>()?
                } else {
                    bank(t, &rows)
                };
                match which {
                    0 => p.wh = v,
                    1 => p.wh2 = v,
                    2 => p.bh = v,
                    3 => p.wg = v,
                    4 => p.bg = v,
                    5 => p.wc = v,
                    6 => p.bc = v,
                    _ => {}
                }
                let (_, l) = self_attention(t, &feats, &p, PairNorm::Global)?;
                let (_, ca) = co_attention(t, l, &p)?;
                let w = t.constant(classes.clone());
                let bias = t.constant(Tensor::zeros(&[3])?);
                let probs = classify(t, ca, &ClassifierVars { weight: w, bias })?;
                batch_loss(t, probs, &[2])
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

fn run_co(rows: &[Vec<f64>], p: &AttentionParams) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let mut t = Tape::new();
    let l = t.constant(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap());
    let vars = p.bind(&mut t);
    let (a, ca) = co_attention(&mut t, l, &vars).unwrap();
    (t.value(a).data().to_vec(), t.value(ca).data().to_vec())
}

#[test]
fn co_attention_examples() {
    let rows = random_rows(15, 4, 3);
    let (a, ca) = run_co(&rows, &AttentionParams::zeros(3, 3).unwrap());
    assert_close(&a, &[0.25; 4], 1e-15);
    let mean: Vec<f64> = (0..3).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / 4.0).collect();
    assert_close(&ca, &mean, 1e-15);

    let mut p = AttentionParams::zeros(3, 3).unwrap();
    p.wc = Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap();
    let rows = vec![vec![1000.0, 2.0, -1.0], vec![0.0, 5.0, 5.0], vec![0.0, -3.0, 1.0]];
    let (a, ca) = run_co(&rows, &p);
    assert!((a[0] - 1.0).abs() < 1e-6);
    assert_close(&ca, &rows[0], 1e-6);
}

#[test]
fn co_attention_random_matches_reference() {
    let rows = random_rows(16, 5, 3);
    let p = random_attention(17, 3, 3);
    let c: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(p.wc.data()).map(|(x, w)| x * w).sum::<f64>() + p.bc.data()[0])
        .collect();
    let z: f64 = c.iter().map(|v| v.exp()).sum();
    let ca: Vec<f64> = (0..3).map(|k| rows.iter().zip(&c).map(|(r, cv)| cv.exp() / z * r[k]).sum()).collect();
    assert_close(&run_co(&rows, &p).1, &ca, 1e-14);
}

fn run_classify(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let xv = t.constant(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap());
    let vars = ClassifierVars {
        weight: t.constant(w.clone()),
        bias: t.constant(b.clone()),
    };
    let p = classify(&mut t, xv, &vars).unwrap();
    t.value(p).data().to_vec()
}

#[test]
fn classify_examples() {
    let w = Tensor::zeros(&[3, 4]).unwrap();
    let b = Tensor::zeros(&[4]).unwrap();
    assert_close(&run_classify(&[1.0, 2.0, 3.0], &w, &b), &[0.25; 4], 1e-15);

    // Logits (z, z + ln 3) through the bias alone.
    let z = 0.7;
    let w = Tensor::zeros(&[1, 2]).unwrap();
    let b = Tensor::vector(vec![z, z + 3f64.ln()]).unwrap();
    assert_close(&run_classify(&[0.0], &w, &b), &[0.25, 0.75], 1e-15);

    let mut r = rng(18);
    for _ in 0..100 {
        let w = random_tensor(&mut r, &[6, 5], 3.0);
        let b = random_tensor(&mut r, &[5], 3.0);
        let x = random_tensor(&mut r, &[6], 3.0);
        let p = run_classify(x.data(), &w, &b);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

fn run_loss(probs: &[f64], m: usize, labels: &[usize]) -> ran::Result<f64> {
    let mut t = Tape::new();
    let p = t.constant(Tensor::new(vec![m, probs.len() / m], probs.to_vec()).unwrap());
    let l = batch_loss(&mut t, p, labels)?;
    Ok(t.value(l).data()[0])
}

#[test]
fn batch_loss_examples() {
    let loss = run_loss(&[0.2; 10], 2, &[0, 4]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
    assert!((loss - 1.6094).abs() < 1e-4);

    let onehot = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    assert!(run_loss(&onehot, 2, &[0, 1]).unwrap() <= 1e-10);

    let probs = random_tensor(&mut rng(19), &[4, 3], 1.0).map(|v| v.abs() + 0.01).unwrap();
    let labels = [2, 0, 1, 1];
    let direct: f64 = -labels.iter().enumerate().map(|(i, &y)| probs.data()[i * 3 + y].ln()).sum::<f64>() / 4.0;
    assert!((run_loss(probs.data(), 4, &labels).unwrap() - direct).abs() < 1e-14);

    assert!(run_loss(&[0.5, 0.5], 1, &[2]).is_err());
}

fn attention_outputs(rows: &[Vec<f64>], p: &AttentionParams) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let b = bank(&mut t, rows);
    let vars = p.bind(&mut t);
    let (alpha, l) = self_attention(&mut t, &b, &vars, PairNorm::Global).unwrap();
    let (a, ca) = co_attention(&mut t, l, &vars).unwrap();
    (
        t.value(alpha).data().to_vec(),
        t.value(l).data().to_vec(),
        t.value(a).data().to_vec(),
        t.value(ca).data().to_vec(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_normalization_and_norm_bound(seed in any::<u64>(), n in 2usize..8) {
        let rows = random_rows(seed, n, 3);
        let p = random_attention(seed ^ 1, 3, 4);
        let (alpha, l, a, _) = attention_outputs(&rows, &p);
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(alpha.iter().all(|&w| w >= 0.0));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for r in 0..n {
            prop_assert_eq!(alpha[r * n + r], 0.0);
            let mass: f64 = alpha[r * n..(r + 1) * n].iter().sum();
            let max_norm = (0..n).filter(|&o| o != r)
                .map(|o| rows[o].iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            let lr_norm = l[r * 3..(r + 1) * 3].iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(lr_norm <= mass * max_norm + 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..7, shift in 1usize..6) {
        let rows = random_rows(seed, n, 3);
        let p = random_attention(seed ^ 2, 3, 4);
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let (alpha, l, a, ca) = attention_outputs(&rows, &p);
        let (alpha_p, l_p, a_p, ca_p) = attention_outputs(&permuted, &p);
        for i in 0..n {
            prop_assert!((a_p[i] - a[perm[i]]).abs() < 1e-12);
            for k in 0..3 {
                prop_assert!((l_p[i * 3 + k] - l[perm[i] * 3 + k]).abs() < 1e-12);
            }
            for j in 0..n {
                prop_assert!((alpha_p[i * n + j] - alpha[perm[i] * n + perm[j]]).abs() < 1e-12);
            }
        }
        for k in 0..3 {
            prop_assert!((ca_p[k] - ca[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_survives_logit_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let w = random_tensor(&mut r, &[4, 5], 2.0);
        let b = random_tensor(&mut r, &[5], 2.0);
        let x = random_tensor(&mut r, &[4], 2.0);
        let shifted = b.map(|v| v + shift).unwrap();
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
        prop_assert_eq!(argmax(&run_classify(x.data(), &w, &b)), argmax(&run_classify(x.data(), &w, &shifted)));
    }
}

#[test]
fn per_row_normalization_flag() {
    let rows = random_rows(20, 4, 3);
    let params = random_attention(21, 3, 3);
    let mut t = Tape::new();
    let b = bank(&mut t, &rows);
    let p: AttentionVars = params.bind(&mut t);
    let (alpha, _) = self_attention(&mut t, &b, &p, PairNorm::PerRow).unwrap();
    for row in t.value(alpha).data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
