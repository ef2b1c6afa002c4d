mod common;

use mcqtok::data::{gen_shapes, gen_vectors, ImageTensor, MixtureSpec, Split};
use mcqtok::eval::{
    compare_quantizers, fit_and_measure, measure, psnr, psnr_from_mse, zero_shot_accuracy,
    EvalReport, PSNR_CAP_DB,
};
use mcqtok::model::TokenizerModel;
use mcqtok::par::Execution;
use mcqtok::quantize::{QuantizerSpec, Scheme};
use mcqtok::train::{TrainConfig, Trainer};
use proptest::prelude::*;

#[test]
fn psnr_reference_values() {
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    assert!((psnr_from_mse(0.0025) - 26.0206).abs() < 1e-4);
    assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
    let a = ImageTensor::filled(4, 4, [0.2, 0.4, 0.6]).unwrap();
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    let b = ImageTensor::filled(4, 4, [0.3, 0.5, 0.7]).unwrap();
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    assert!(psnr(&a, &ImageTensor::filled(2, 2, [0.0; 3]).unwrap()).is_err());
}

proptest! {
    #[test]
    fn psnr_matches_mse(mse in 1e-9f64..1.0) {
        let want = (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB);
        prop_assert!((psnr_from_mse(mse) - want).abs() < 1e-9);
    }
}

#[test]
fn untrained_tower_is_at_chance() {
    let ds = gen_shapes(11, 20_000, 8).unwrap();
    let held = ds.indices(Split::HeldOut);
    assert!(held.len() >= 2000);
    let cfg = TrainConfig::default();
    let mut accs = Vec::new();
    for seed in 0..3 {
        let model = TokenizerModel::new(cfg.model.clone(), cfg.quantizer.clone(), 8, seed).unwrap();
        accs.push(zero_shot_accuracy(&model, &ds, &held[..2000], Execution::Parallel).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / 3.0;
    assert!((mean - 0.125).abs() <= 0.05, "{accs:?}");
}

#[test]
fn reports_are_reproducible_and_consistent() {
    let ds = gen_shapes(2, 300, 8).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.optim.steps = 3;
    cfg.optim.batch_size = 16;
    let mut t = Trainer::new(cfg.clone(), 8).unwrap();
    t.run(&ds).unwrap();
    let held = ds.indices(Split::HeldOut);
    let a = measure(t.model(), &ds, &held, true, Execution::Parallel).unwrap();
    let b = measure(t.model(), &ds, &held, true, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    let mse = a.mse.unwrap();
    assert!((a.psnr.unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    assert_eq!(a.codebooks.len(), 4);
    let tokens = held.len() as u64 * cfg.model.tokens_per_image() as u64;
    assert!(a
        .codebooks
        .iter()
        .all(|s| s.histogram.iter().sum::<u64>() == tokens));
    let r = EvalReport::new(a, false, cfg.fingerprint(), 0, t.step_count());
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["config_fingerprint"], cfg.fingerprint());
    assert_eq!(json["step"], 3);
}

#[test]
fn single_config_compare_equals_direct_call() {
    let v = gen_vectors(1, 3000, 16, MixtureSpec::Isotropic);
    let train = v.select(|i| !mcqtok::data::is_held_out(i));
    let test = v.select(mcqtok::data::is_held_out);
    let spec = QuantizerSpec::new(Scheme::Rq, 2, 16);
    let rows = compare_quantizers(Execution::Parallel, &train, &test, &[spec], &[4]).unwrap();
    let direct = fit_and_measure(Execution::Sequential, &train, &test, &spec, 4).unwrap();
    assert_eq!(rows, vec![direct]);
}

#[test]
fn single_codebook_mcq_equals_vq() {
    let v = gen_vectors(2, 2000, 8, MixtureSpec::Isotropic);
    let train = v.select(|i| !mcqtok::data::is_held_out(i));
    let test = v.select(mcqtok::data::is_held_out);
    let vq = fit_and_measure(
        Execution::Parallel,
        &train,
        &test,
        &QuantizerSpec::new(Scheme::Vq, 1, 32),
        0,
    )
    .unwrap();
    let mcq = fit_and_measure(
        Execution::Parallel,
        &train,
        &test,
        &QuantizerSpec::new(Scheme::Mcq, 1, 32),
        0,
    )
    .unwrap();
    assert!((vq.error_mean - mcq.error_mean).abs() <= 1e-6 * vq.error_mean);
}

#[test]
fn incompatible_dims_are_rejected() {
    let v = gen_vectors(2, 500, 10, MixtureSpec::Isotropic);
    let spec = QuantizerSpec::new(Scheme::Mcq, 4, 8);
    assert!(compare_quantizers(Execution::Parallel, &v, &v, &[spec], &[0]).is_err());
}
