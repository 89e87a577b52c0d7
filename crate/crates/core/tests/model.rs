use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revdeblur::autodiff::{Tape, TapeMode};
use revdeblur::checkpoint;
use revdeblur::config::ModelConfig;
use revdeblur::model::{ExitMode, Network};
use revdeblur::params::ParamStore;
use revdeblur::train::{decoder_loss, AdamW};
use revdeblur::{Error, Tensor};

fn tiny(columns: usize) -> ModelConfig {
    ModelConfig {
        channels: 4,
        levels: 3,
        enc_blocks: vec![1; 3],
        columns,
        ..ModelConfig::default()
    }
}

fn randomize_tails(store: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with("tail")).collect();
    for id in ids {
        let shape = store.value(id).shape();
        *store.value_mut(id) = Tensor::randn(shape, 0.05, &mut rng);
    }
}

fn image(seed: u64, b: usize, s: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform([b, 3, s, s], 0.0, 1.0, &mut rng)
}

#[test]
fn parameter_names_follow_the_checkpoint_scheme() {
    let (_, store) = Network::new::<f32>(&tiny(2), 0).unwrap();
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for prefix in ["head.", "enc.level1.", "enc.down1.", "tail1.", "tail2.", "dec1.level1.fuse.", "dec2.level2.fourier.", "alpha.1.1", "cls."] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "missing {prefix}");
    }
    assert!(names.iter().any(|n| n.contains(".fourier.fft.")));
    assert!(names.iter().any(|n| n.contains(".fourier.naf.")));
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
}

#[test]
fn zero_tails_return_the_blur_input() {
    let (net, store) = Network::new::<f32>(&tiny(3), 1).unwrap();
    let blur = image(2, 2, 16);
    let preds = net.predict_all(&store, &blur, 3).unwrap();
    assert_eq!(preds.len(), 3);
    for p in preds {
        assert_eq!(p, blur);
    }
}

#[test]
fn prediction_is_blur_plus_residual() {
    let (net, mut store) = Network::new::<f32>(&tiny(2), 3).unwrap();
    randomize_tails(&mut store, 4);
    let blur = image(5, 1, 8);
    let mut tape = Tape::no_grad(&store);
    let fv = net.forward(&mut tape, blur.clone(), 2, 0.0).unwrap();
    let d1 = fv.states[2][0];
    let r = net.backbone.residual(&mut tape, 2, d1).unwrap();
    let r = tape.value(r).unwrap().clone();
    let s = tape.value(fv.preds[1]).unwrap();
    let sum = blur.zip_map(&r, |a, b| a + b).unwrap();
    assert_eq!(*s, sum);
    assert!(r.max_abs() > 0.0);
}

#[test]
fn input_size_must_match_the_level_count() {
    let (net, store) = Network::new::<f32>(&tiny(1), 0).unwrap();
    assert!(net.predict_all(&store, &image(0, 1, 10), 1).is_err());
    assert!(net.predict_all(&store, &Tensor::zeros([1, 2, 8, 8]), 1).is_err());
}

#[test]
fn tail_gradient_comes_only_from_its_own_loss_term() {
    let (net, mut store) = Network::new::<f64>(&tiny(3), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with("tail")).collect();
    for id in ids {
        let shape = store.value(id).shape();
        *store.value_mut(id) = Tensor::randn(shape, 0.1, &mut rng);
    }
    let blur = Tensor::<f64>::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let sharp = Tensor::<f64>::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let mut tape = Tape::new(&store, TapeMode::reversible());
    let fv = net.forward(&mut tape, blur, 3, 1e-3).unwrap();
    let s = tape.input(sharp);
    let loss = tape.l1_loss(fv.preds[1], s).unwrap();
    let g = tape.backward_scalar(loss).unwrap();
    let norm = |name: &str| g.param(store.id(name).unwrap()).map_or(0.0, |t| t.max_abs());
    assert_eq!(norm("tail1.weight"), 0.0);
    assert_eq!(norm("tail3.weight"), 0.0);
    assert!(norm("tail2.weight") > 0.0);
}

#[test]
fn frozen_encoder_is_unchanged_by_optimizer_steps() {
    let (net, mut store) = Network::new::<f32>(&tiny(2), 8).unwrap();
    randomize_tails(&mut store, 9);
    Network::set_encoder_frozen(&mut store, true);
    let before = store.clone();
    let mut opt = AdamW::new(&store, 0.9, 0.9, 1e-8, 1e-3);
    for step in 0..100 {
        let blur = image(10 + step, 2, 8);
        let sharp = image(200 + step, 2, 8);
        let grads = {
            let mut tape = Network::tape(&store, true);
            let fv = net.forward(&mut tape, blur, 2, 1e-3).unwrap();
            let s = tape.input(sharp);
            let loss = decoder_loss(&mut tape, &fv.preds, s, 0.01).unwrap();
            tape.backward_scalar(loss).unwrap()
        };
        store.zero_grad();
        grads.accumulate_into(&mut store).unwrap();
        opt.step(&mut store, 1e-3);
    }
    let mut changed_decoder = false;
    for (id, p) in store.iter() {
        let old = before.value(id);
        if p.name.starts_with("head.") || p.name.starts_with("enc.") {
            assert_eq!(&p.value, old, "{} moved", p.name);
        }
        if p.name.starts_with("dec") && &p.value != old {
            changed_decoder = true;
        }
    }
    assert!(changed_decoder);
}

#[test]
fn classifier_only_mode_freezes_everything_else() {
    let (_, mut store) = Network::new::<f32>(&tiny(1), 0).unwrap();
    Network::set_classifier_only(&mut store, true);
    for (_, p) in store.iter() {
        assert_eq!(p.frozen, !p.name.starts_with("cls."));
    }
    Network::set_classifier_only(&mut store, false);
    assert!(store.iter().all(|(_, p)| !p.frozen));
}

#[test]
fn classify_returns_one_based_classes() {
    let (net, store) = Network::new::<f32>(&tiny(1), 0).unwrap();
    let (logits, classes) = net.classify(&store, &image(1, 3, 16)).unwrap();
    assert_eq!(logits.shape(), [3, 6, 1, 1]);
    assert!(classes.iter().all(|c| (1..=6).contains(c)));
}

#[test]
fn restore_honours_fixed_and_adaptive_exits() {
    let (net, mut store) = Network::new::<f32>(&tiny(3), 11).unwrap();
    randomize_tails(&mut store, 12);
    let blur = image(13, 1, 16);
    let all = net.predict_all(&store, &blur, 3).unwrap();
    for j in 1..=3 {
        let (s, e) = net.restore(&store, &blur, &ExitMode::Fixed(j)).unwrap();
        assert_eq!(e, j);
        assert_eq!(s, all[j - 1]);
    }
    let policy = revdeblur::exit::ExitPolicy::full(6, 3);
    let (s, e) = net.restore(&store, &blur, &ExitMode::Adaptive(&policy)).unwrap();
    assert_eq!((s, e), (all[2].clone(), 3));
    assert!(net.restore(&store, &blur, &ExitMode::Fixed(4)).is_err());
    assert!(net.restore(&store, &image(1, 2, 16), &ExitMode::Fixed(1)).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (net, mut store) = Network::new::<f32>(&tiny(2), 14).unwrap();
    randomize_tails(&mut store, 15);
    let dir = tempfile::tempdir().unwrap();
    net.save_dir(&store, dir.path()).unwrap();
    let (net2, store2) = Network::load_dir(dir.path()).unwrap();
    assert_eq!(net2.cfg, net.cfg);
    for (id, p) in store.iter() {
        assert_eq!(&p.value, store2.value(id));
        assert_eq!(p.name, store2.get(id).name);
    }
    let bytes = checkpoint::encode(&store);
    assert_eq!(checkpoint::encode(&store2), bytes);
}

#[test]
fn checkpoint_rejects_corruption_and_mismatch() {
    let (_, store) = Network::new::<f32>(&tiny(2), 0).unwrap();
    let bytes = checkpoint::encode(&store);
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
    let entries = checkpoint::decode(&bytes).unwrap();
    let (_, mut other) = Network::new::<f32>(&tiny(3), 0).unwrap();
    assert!(checkpoint::restore(&mut other, &entries).is_err());
    let (_, mut wider) = Network::new::<f32>(&ModelConfig { channels: 6, ..tiny(2) }, 0).unwrap();
    assert!(checkpoint::restore(&mut wider, &entries).is_err());
    let (_, mut same) = Network::new::<f32>(&tiny(2), 99).unwrap();
    checkpoint::restore(&mut same, &entries).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        checkpoint::load(&mut same, &dir.path().join("none.ckpt")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn checkpoint_stores_f64_and_casts_on_restore() {
    let (_, store) = Network::new::<f64>(&tiny(1), 3).unwrap();
    let entries = checkpoint::decode(&checkpoint::encode(&store)).unwrap();
    let (_, mut f32_store) = Network::new::<f32>(&tiny(1), 0).unwrap();
    checkpoint::restore(&mut f32_store, &entries).unwrap();
    for (id, p) in store.iter() {
        let a: Tensor<f32> = p.value.cast();
        assert_eq!(&a, f32_store.value(id));
    }
}

#[test]
fn model_config_text_round_trip() {
    let cfg = tiny(3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.cfg");
    cfg.write(&p).unwrap();
    assert_eq!(ModelConfig::read(&p).unwrap(), cfg);
    std::fs::write(&p, "channels = 4\nbogus = 1\n").unwrap();
    assert!(ModelConfig::read(&p).is_err());
    std::fs::write(&p, "channels = 3\n").unwrap();
    assert!(ModelConfig::read(&p).is_err());
}
