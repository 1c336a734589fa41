mod common;

use common::{random_tensor, rng};
use ran::config::{Ablation, ModelConfig};
use ran::gradcheck::{check_model, desk_config, finite_diff_check, DEFAULT_EPS};
use ran::model::Model;
use ran::{Tape, Tensor};

fn image(seed: u64, size: usize) -> Tensor {
    random_tensor(&mut rng(seed), &[size, size, 3], 1.0).map(f64::abs).unwrap()
}

#[test]
fn zero_image_gives_zero_features() {
    let model = Model::init(ModelConfig::default()).unwrap();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[48, 48, 3]).unwrap());
    let feat = model.backbone(&mut tape, &bound, x).unwrap();
    assert!(tape.value(feat).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backbone_output_shape() {
    let model = Model::init(ModelConfig::default()).unwrap();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let x = tape.constant(image(1, 48));
    let feat = model.backbone(&mut tape, &bound, x).unwrap();
    assert_eq!(tape.shape(feat), &[6, 6, 32]);
}

#[test]
fn backbone_gradient_check() {
    let model = Model::init(desk_config(3)).unwrap();
    let img = image(3, 24);
    let err = finite_diff_check(
        |t, x| {
            let bound = model.params().bind(t);
            let f = model.backbone(t, &bound, x)?;
            let w = t.constant(random_tensor(&mut rng(9), &[3, 3, 8], 1.0));
            let p = t.mul(f, w)?;
            t.sum(p)
        },
        &img,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn model_gradient_check_all_parameters() {
    for ablation in Ablation::ALL {
        let cfg = ModelConfig {
            ablation,
            ..desk_config(11)
        };
        let model = Model::init(cfg).unwrap();
        let err = check_model(&model, &image(11, 24), 2, DEFAULT_EPS).unwrap();
        assert!(err < 1e-4, "{ablation}: {err}");
    }
}

#[test]
fn feature_bank_has_regions_plus_image() {
    let model = Model::init(ModelConfig::default()).unwrap();
    assert_eq!(model.bank_len(), 36);
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let (_, out) = model.forward_tape(&mut tape, &bound, &image(2, 48)).unwrap();
    assert_eq!(out.bank.len(), 36);
    let (alpha, l, a, ca) = out.attention.unwrap();
    assert_eq!(tape.shape(alpha), &[36, 36]);
    assert_eq!(tape.shape(l), &[36, 32]);
    assert_eq!(tape.shape(a), &[36]);
    assert_eq!(tape.shape(ca), &[1, 32]);

    let base = Model::init(ModelConfig {
        ablation: Ablation::Base,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_eq!(base.bank_len(), 1);
}

fn single_cell_indices(model: &Model) -> Vec<usize> {
    model
        .regions()
        .regions()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.rows() == 1 && r.cols() == 1)
        .map(|(i, _)| i)
        .collect()
}

fn check_symmetric_cells(tape: &Tape, model: &Model, bank: &[ran::Var], alpha: ran::Var) {
    let cells = single_cell_indices(model);
    assert_eq!(cells.len(), 9);
    let first = tape.value(bank[cells[0]]).data().to_vec();
    for &c in &cells {
        let f = tape.value(bank[c]).data();
        for (x, y) in f.iter().zip(&first) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
    let n = bank.len();
    let alpha = tape.value(alpha).data();
    let reference = alpha[cells[0] * n + cells[1]];
    for &r in &cells {
        for &s in &cells {
            if r != s {
                assert!((alpha[r * n + s] - reference).abs() <= 1e-9);
            }
        }
        for s in (0..n).filter(|s| !cells.contains(s)) {
            assert!((alpha[r * n + s] - alpha[cells[0] * n + s]).abs() <= 1e-9);
        }
    }
}

#[test]
fn constant_image_gives_equal_cell_features_and_alpha_rows() {
    // A constant image still produces border effects through zero padding, so
    // the zero image is the constant input that keeps the map constant.
    let model = Model::init(ModelConfig::default()).unwrap();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let (_, out) = model
        .forward_tape(&mut tape, &bound, &Tensor::zeros(&[48, 48, 3]).unwrap())
        .unwrap();
    check_symmetric_cells(&tape, &model, &out.bank, out.attention.unwrap().0);
}

#[test]
fn constant_feature_map_gives_equal_cell_features_and_alpha_rows() {
    let cfg = ModelConfig {
        ablation: Ablation::AttentionNoSe,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg).unwrap();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let feat = Tensor::new(
        vec![6, 6, 32],
        (0..6 * 6 * 32).map(|i| 0.1 + (i % 32) as f64 * 0.05).collect(),
    )
    .unwrap();
    let f = tape.constant(feat);
    let out = model.head(&mut tape, &bound, f).unwrap();
    check_symmetric_cells(&tape, &model, &out.bank, out.attention.unwrap().0);
}

#[test]
fn probabilities_sum_to_one_for_every_ablation() {
    for ablation in Ablation::ALL {
        let model = Model::init(ModelConfig {
            ablation,
            ..desk_config(5)
        })
        .unwrap();
        for s in 0..50 {
            let p = model.forward(&image(100 + s, 24)).unwrap().probs;
            let total: f64 = p.data().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12, "{ablation}: {total}");
        }
    }
}

#[test]
fn ablation_wiring_by_parameter_names() {
    let names = |a: Ablation| -> Vec<String> {
        let m = Model::init(ModelConfig {
            ablation: a,
            ..ModelConfig::default()
        })
        .unwrap();
        m.params().names().map(str::to_string).collect()
    };
    let has = |ns: &[String], prefix: &str| ns.iter().any(|n| n.starts_with(prefix));

    let base = names(Ablation::Base);
    assert!(!has(&base, "se.") && !has(&base, "attention."));
    assert!(has(&base, "backbone.") && has(&base, "classifier."));

    let attn = names(Ablation::AttentionNoSe);
    assert!(has(&attn, "attention.") && !has(&attn, "se."));

    let se_only = names(Ablation::SeNoAttention);
    assert!(!has(&se_only, "attention.") && has(&se_only, "se.region") && has(&se_only, "se.image"));

    let roi = names(Ablation::RoiSe);
    assert!(has(&roi, "se.region") && !has(&roi, "se.image"));

    let image_only = names(Ablation::ImageSe);
    assert!(!has(&image_only, "se.region") && has(&image_only, "se.image"));

    let full = names(Ablation::Full);
    let region_blocks = full.iter().filter(|n| n.starts_with("se.region") && n.ends_with(".w1")).count();
    assert_eq!(region_blocks, 35);
}

#[test]
fn shared_se_uses_one_region_block() {
    let m = Model::init(ModelConfig {
        share_se: true,
        ..ModelConfig::default()
    })
    .unwrap();
    let blocks: Vec<&str> = m.params().names().filter(|n| n.ends_with(".w1")).collect();
    assert_eq!(blocks, ["se.image.w1", "se.regions.w1"]);
}

#[test]
fn initialization_is_deterministic_per_seed() {
    let a = Model::init(ModelConfig::default()).unwrap();
    let b = Model::init(ModelConfig::default()).unwrap();
    let c = Model::init(ModelConfig {
        seed: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert_ne!(a.params().checksum(), c.params().checksum());
}

#[test]
fn from_params_rejects_layout_mismatch() {
    let full = Model::init(ModelConfig::default()).unwrap();
    let base_cfg = ModelConfig {
        ablation: Ablation::Base,
        ..ModelConfig::default()
    };
    assert!(Model::from_params(base_cfg, full.params().clone()).is_err());
    assert!(Model::from_params(ModelConfig::default(), full.params().clone()).is_ok());
}

#[test]
fn wrong_image_geometry_is_rejected() {
    let model = Model::init(ModelConfig::default()).unwrap();
    assert!(model.forward(&image(1, 24)).is_err());
    assert!(model.sample_gradients(&image(1, 48), 9).is_err());
}

#[test]
fn parallel_batch_matches_serial_bitwise() {
    let model = Model::init(desk_config(4)).unwrap();
    let imgs: Vec<Tensor> = (0..6).map(|s| image(40 + s, 24)).collect();
    let batch: Vec<(&Tensor, usize)> = imgs.iter().enumerate().map(|(i, x)| (x, i % 5)).collect();
    let serial = model.batch_gradients(&batch, None).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let parallel = model.batch_gradients(&batch, Some(&pool)).unwrap();
    assert_eq!(serial.loss.to_bits(), parallel.loss.to_bits());
    for (a, b) in serial.grads.iter().zip(&parallel.grads) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(serial.predictions, parallel.predictions);
}

#[test]
fn batch_gradient_is_mean_of_samples() {
    let model = Model::init(desk_config(6)).unwrap();
    let (x0, x1) = (image(60, 24), image(61, 24));
    let g0 = model.sample_gradients(&x0, 0).unwrap();
    let g1 = model.sample_gradients(&x1, 3).unwrap();
    let batch = model.batch_gradients(&[(&x0, 0), (&x1, 3)], None).unwrap();
    assert!((batch.loss - (g0.loss + g1.loss) / 2.0).abs() < 1e-15);
    for ((b, a), c) in batch.grads.iter().zip(&g0.grads).zip(&g1.grads) {
        for i in 0..b.len() {
            assert!((b[i] - (a[i] + c[i]) / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn trace_matches_forward() {
    let model = Model::init(ModelConfig::default()).unwrap();
    let pred = model.forward(&image(8, 48)).unwrap();
    let trace = pred.trace.clone().unwrap();
    assert_eq!(trace.alpha.shape(), &[36, 36]);
    let off_diag: f64 = (0..36)
        .flat_map(|r| (0..36).filter(move |&c| c != r).map(move |c| (r, c)))
        .map(|(r, c)| trace.alpha.data()[r * 36 + c])
        .sum();
    assert!((off_diag - 1.0).abs() <= 1e-9);
    let a_sum: f64 = trace.a.data().iter().sum();
    assert!((a_sum - 1.0).abs() <= 1e-12);

    let base = Model::init(ModelConfig {
        ablation: Ablation::Base,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(base.forward(&image(8, 48)).unwrap().trace.is_none());
}
