mod common;

use mcqtok::autodiff::{Tape, Tensor};
use mcqtok::data::gen_shapes;
use mcqtok::losses::recon_loss;
use mcqtok::model::{
    gradients, Batch, CodebookUpdate, Factorization, QuantizerKind, TokenizerModel,
    MAX_TEMPERATURE, MIN_TEMPERATURE,
};
use mcqtok::par::Execution;
use mcqtok::train::{batch_indices, clip_factor, Optimizer, Trainer};

use common::{normals, small_train_config};

#[test]
fn every_stage_combination_trains_one_step() {
    let ds = gen_shapes(3, 80, 4).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    for fact in [
        Factorization::None,
        Factorization::Linear,
        Factorization::Attention,
    ] {
        for kind in [
            QuantizerKind::None,
            QuantizerKind::Vq,
            QuantizerKind::Mcq,
            QuantizerKind::Rq,
        ] {
            for update in [CodebookUpdate::Ema, CodebookUpdate::Gradient] {
                if kind == QuantizerKind::None && update == CodebookUpdate::Gradient {
                    continue;
                }
                let mut cfg = small_train_config(1);
                cfg.model.factorization = fact;
                cfg.quantizer.scheme = kind;
                cfg.quantizer.sub_codebooks = if kind == QuantizerKind::Vq { 1 } else { 2 };
                cfg.quantizer.update = update;
                let label = format!("{fact:?}/{kind:?}/{update:?}");
                let mut t = Trainer::new(cfg.clone(), 4).unwrap();

                let batch = Batch::from_dataset(&ds, &idx, cfg.model.patch_size).unwrap();
                let mut tape = Tape::<f32>::new();
                let pass = t
                    .model()
                    .forward(
                        t.model().params(),
                        &mut tape,
                        &batch,
                        &cfg.loss,
                        Execution::Sequential,
                    )
                    .unwrap();
                tape.backward(pass.loss).unwrap();
                for (name, g) in gradients(&tape, &pass.bound) {
                    assert!(g.all_finite(), "{label}: gradient of {name}");
                }

                let report = t.train_step(&ds, &idx).unwrap();
                assert!(report.total.is_finite() && report.total > 0.0, "{label}");
                for p in t.model().params().iter() {
                    assert!(p.1.all_finite(), "{label}: {}", p.0);
                }
            }
        }
    }
}

#[test]
fn gradient_mode_moves_codebooks() {
    let ds = gen_shapes(3, 80, 4).unwrap();
    let mut cfg = small_train_config(2);
    cfg.quantizer.update = CodebookUpdate::Gradient;
    cfg.quantizer.kmeans_init = false;
    let mut t = Trainer::new(cfg, 4).unwrap();
    let before = t.model().quantizer().unwrap().clone();
    t.train_step(&ds, &(0..16).collect::<Vec<_>>()).unwrap();
    let after = t.model().quantizer().unwrap();
    assert_ne!(
        before.codebooks()[0].entries(),
        after.codebooks()[0].entries()
    );
}

/// A plain autoencoder trained by its own loop, without the quantizer or
/// tower, must follow the same trajectory as the trainer with the
/// quantizer disabled.
#[test]
fn disabled_quantizer_matches_plain_autoencoder() {
    let ds = gen_shapes(1, 120, 4).unwrap();
    for fact in [Factorization::None, Factorization::Linear] {
        let mut cfg = small_train_config(4);
        cfg.model.factorization = fact;
        cfg.quantizer.scheme = QuantizerKind::None;
        cfg.loss.lambda_contra = 0.0;
        let mut trainer = Trainer::new(cfg.clone(), 4).unwrap();
        trainer.run(&ds).unwrap();

        let mut model =
            TokenizerModel::new(cfg.model.clone(), cfg.quantizer.clone(), 4, cfg.optim.seed)
                .unwrap();
        let mut opt = Optimizer::new(cfg.optim.optimizer);
        let train = Trainer::train_indices(&ds);
        for step in 0..cfg.optim.steps {
            let idx = batch_indices(cfg.optim.seed, step, cfg.optim.batch_size, &train);
            let batch = Batch::from_dataset(&ds, &idx, cfg.model.patch_size).unwrap();
            let mut tape = Tape::<f32>::new();
            let b = model.params().bind(&mut tape);
            let x = tape.constant(batch.patches().clone());
            let h = model.encoder(&mut tape, &b, x, batch.len()).unwrap();
            let f = model.factorize(&mut tape, &b, h).unwrap();
            let e = model.expand(&mut tape, &b, f).unwrap();
            let out = model.decoder(&mut tape, &b, e, batch.len()).unwrap();
            let loss = recon_loss(&mut tape, x, out).unwrap();
            tape.backward(loss).unwrap();
            let grads = gradients(&tape, &b);
            let (_, factor) = clip_factor(grads.values().map(|g| g.data()), cfg.optim.grad_clip);
            opt.begin_step();
            for (name, g) in &grads {
                let scaled: Vec<f32> = g.data().iter().map(|&v| v * factor).collect();
                let p = model.params_mut().get_mut(name).unwrap();
                opt.apply(&cfg.optim, name, p.data_mut(), &scaled);
            }
        }
        assert_eq!(trainer.model().params(), model.params(), "{fact:?}");
    }
}

/// With the contrastive weight at zero the tower is inert: the initial
/// temperature has no effect on anything else and the tower never moves.
#[test]
fn zero_contrastive_weight_is_a_vq_autoencoder() {
    let ds = gen_shapes(2, 120, 4).unwrap();
    let run = |temperature: f64| {
        let mut cfg = small_train_config(4);
        cfg.loss.lambda_contra = 0.0;
        cfg.model.temperature = temperature;
        let mut t = Trainer::new(cfg, 4).unwrap();
        let init = t.model().params().clone();
        t.run(&ds).unwrap();
        (init, t)
    };
    let (init_a, a) = run(0.1);
    let (_, b) = run(1.0);
    for (name, p) in a.model().params().iter() {
        if name.starts_with("tower.") {
            assert_eq!(p, init_a.get(name).unwrap(), "{name}");
        } else {
            assert_eq!(p, b.model().params().get(name).unwrap(), "{name}");
        }
    }
    assert_eq!(a.model().quantizer(), b.model().quantizer());
    assert!(a
        .history()
        .iter()
        .all(|r| r.contrastive == 0.0 && r.zs_acc.is_none()));
}

#[test]
fn contrastive_logits_are_scaled_cosines() {
    let cfg = small_train_config(1);
    let model = TokenizerModel::new(cfg.model.clone(), cfg.quantizer.clone(), 4, 9).unwrap();
    let (batch, width) = (3, cfg.model.width);
    let emb = normals(4, batch * width);
    let logits = model.class_logits(&emb, batch).unwrap();
    let classes = model.params().get("tower.classes").unwrap();
    let tau = model.temperature();
    assert!((tau - cfg.model.temperature).abs() < 1e-6);
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    for i in 0..batch {
        let e = &emb[i * width..(i + 1) * width];
        for k in 0..4 {
            let c = &classes.data()[k * width..(k + 1) * width];
            let dot: f64 = e.iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum();
            let want = dot / (norm(e) * norm(c)) / tau;
            let got = logits.data()[i * 4 + k] as f64;
            assert!(
                (got - want).abs() < 1e-4 * want.abs().max(1.0),
                "{got} vs {want}"
            );
        }
    }
}

#[test]
fn temperature_is_clamped() {
    let cfg = small_train_config(1);
    let mut model = TokenizerModel::new(cfg.model.clone(), cfg.quantizer.clone(), 4, 0).unwrap();
    for (scale, want) in [(50.0f32, MIN_TEMPERATURE), (-50.0, MAX_TEMPERATURE)] {
        model
            .params_mut()
            .get_mut("tower.logit_scale")
            .unwrap()
            .data_mut()[0] = scale;
        model.clamp_temperature();
        assert!(
            (model.temperature() - want).abs() < 1e-4 * want,
            "{}",
            model.temperature()
        );
    }
}

#[test]
fn logits_stay_finite_under_an_aggressive_learning_rate() {
    let ds = gen_shapes(5, 120, 4).unwrap();
    let mut cfg = small_train_config(20);
    cfg.optim.learning_rate = 0.5;
    cfg.optim.grad_clip = 0.0;
    let mut t = Trainer::new(cfg.clone(), 4).unwrap();
    match t.run(&ds) {
        Ok(()) => {}
        Err(mcqtok::Error::Divergence { .. }) => return,
        Err(e) => panic!("{e}"),
    }
    let tau = t.model().temperature();
    assert!((MIN_TEMPERATURE * 0.999..=MAX_TEMPERATURE * 1.001).contains(&tau));
    let batch =
        Batch::from_dataset(&ds, &(0..8).collect::<Vec<_>>(), cfg.model.patch_size).unwrap();
    let inf = t
        .model()
        .infer(&batch, false, true, Execution::Sequential)
        .unwrap();
    let logits = t.model().class_logits(&inf.embedding.unwrap(), 8).unwrap();
    assert!(logits.all_finite());
}

#[test]
fn encode_decode_shapes() {
    let cfg = small_train_config(1);
    let model = TokenizerModel::new(cfg.model.clone(), cfg.quantizer.clone(), 4, 0).unwrap();
    let ds = gen_shapes(0, 4, 4).unwrap();
    let (latents, emb) = model.encode(&ds.images()[0]).unwrap();
    assert_eq!(
        latents.shape(),
        [cfg.model.tokens_per_image(), cfg.model.code_dim()]
    );
    assert_eq!(emb.len(), cfg.model.width);
    let img = model.decode(&latents).unwrap();
    assert_eq!((img.height(), img.width()), (32, 32));
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(model.decode(&Tensor::zeros(&[3, 3])).is_err());
}
