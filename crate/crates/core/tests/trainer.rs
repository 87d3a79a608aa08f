use lcdnet::data::{make_batch, synthetic_pair, AugmentConfig, SamplePair, SyntheticConfig};
use lcdnet::params::{ParamKind, ParamStore};
use lcdnet::tensor::{Shape, Tensor};
use lcdnet::trainer::{fit, train_step, AdamW, TrainConfig, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
use lcdnet::{Error, LcdNet, ModelConfig};

fn pairs(n: usize, size: usize, offset: u64) -> Vec<SamplePair> {
    let cfg = SyntheticConfig { size, density: 0.2, seed: 1 };
    (0..n as u64).map(|i| synthetic_pair(&cfg, offset + i)).collect()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr: 2e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn decay_alone_shrinks_geometrically() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::from_f64s(Shape::channels(3), &[1.0, -2.0, 0.5]).unwrap(), ParamKind::Weight).unwrap();
    store.insert("bn", Tensor::from_f64s(Shape::channels(1), &[3.0]).unwrap(), ParamKind::NoDecay).unwrap();
    let (lr, wd) = (0.01, 0.5);
    let mut opt = AdamW::new(lr, wd);
    for _ in 0..5 {
        for (_, p) in store.iter_mut() {
            let n = p.tensor.numel();
            p.tensor.set_grad(Some(vec![0.0; n])).unwrap();
        }
        opt.step(&mut store).unwrap();
    }
    let f = (1.0 - lr * wd).powi(5);
    let w = store.get("w").unwrap().tensor.data();
    for (got, init) in w.iter().zip([1.0, -2.0, 0.5]) {
        assert!((got - init * f).abs() < 1e-12);
    }
    assert_eq!(store.get("bn").unwrap().tensor.data(), &[3.0]);
    assert_eq!(opt.steps(), 5);
}

#[test]
fn adam_first_step_has_magnitude_lr() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::from_f64s(Shape::channels(3), &[0.0; 3]).unwrap(), ParamKind::Weight).unwrap();
    store.get_mut("w").unwrap().tensor.set_grad(Some(vec![3.0, -0.25, 1e-3])).unwrap();
    let mut opt = AdamW::new(1e-3, 0.0);
    opt.step(&mut store).unwrap();
    let w = store.get("w").unwrap().tensor.data();
    assert!((w[0] + 1e-3).abs() < 1e-9);
    assert!((w[1] - 1e-3).abs() < 1e-9);
    assert!((w[2] + 1e-3).abs() < 1e-7);
}

fn train_steps(n: usize) -> Vec<Vec<f32>> {
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let data = pairs(4, 32, 0);
    let refs: Vec<&SamplePair> = data.iter().collect();
    let b = make_batch::<f32>(&refs).unwrap();
    let mut opt = AdamW::new(1e-3, 1e-2);
    for _ in 0..n {
        train_step(&mut model, &mut opt, &b.t1, &b.t2, &b.label).unwrap();
    }
    model.params.iter().map(|(_, p)| p.tensor.data().to_vec()).collect()
}

#[test]
fn seeded_training_is_bit_identical() {
    assert_eq!(train_steps(3), train_steps(3));
}

#[test]
fn tiny_model_loss_drops_on_a_fixed_batch() {
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let data = pairs(8, 32, 0);
    let refs: Vec<&SamplePair> = data.iter().collect();
    let b = make_batch::<f32>(&refs).unwrap();
    let mut opt = AdamW::new(5e-3, 0.0);
    let first = train_step(&mut model, &mut opt, &b.t1, &b.t2, &b.label).unwrap();
    let mut last = first;
    for _ in 0..60 {
        last = train_step(&mut model, &mut opt, &b.t1, &b.t2, &b.label).unwrap();
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn zero_epochs_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let report = fit(&mut model, &pairs(2, 32, 0), &pairs(2, 32, 10), &quick_config(0), Some(dir.path())).unwrap();
    assert!(report.epochs.is_empty());
    assert!(report.best_checkpoint.is_none());
    assert!(!dir.path().join(BEST_CHECKPOINT).exists());
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap_or_default();
    assert!(log.lines().count() <= 1, "{log}");
}

#[test]
fn best_checkpoint_follows_strictly_greater_iou() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let val = pairs(4, 32, 100);
    let report = fit(&mut model, &pairs(8, 32, 0), &val, &quick_config(3), Some(dir.path())).unwrap();
    assert_eq!(report.epochs.len(), 3);
    let ious: Vec<f64> = report.epochs.iter().map(|e| e.iou.unwrap_or(0.0)).collect();
    let best = ious.iter().cloned().fold(f64::MIN, f64::max);
    let first_best = ious.iter().position(|&v| v == best).unwrap() + 1;
    if report.epochs.iter().any(|e| e.iou.is_some()) {
        assert_eq!(report.best_epoch, Some(first_best));
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
    }
    assert!(dir.path().join(LAST_CHECKPOINT).exists());
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,train_loss,pc,rc,f1,oa,kappa,iou,seconds"));

    let mut again = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let second = fit(&mut again, &pairs(8, 32, 0), &val, &quick_config(3), None).unwrap();
    let losses = |r: &lcdnet::trainer::TrainReport| r.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>();
    assert_eq!(losses(&report), losses(&second));
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    model.params.get_mut("decoder.head0.bias").unwrap().tensor.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig { augment: AugmentConfig::none(), ..quick_config(2) };
    match fit(&mut model, &pairs(4, 32, 0), &[], &cfg, None) {
        Err(Error::NonFiniteLoss { epoch, batch, loss }) => {
            assert_eq!((epoch, batch), (1, 0));
            assert!(loss.is_nan());
        }
        other => panic!("expected non-finite loss, got {other:?}"),
    }
}

#[test]
fn invalid_train_configs() {
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let train = pairs(2, 32, 0);
    for cfg in [
        TrainConfig { batch_size: 0, ..quick_config(1) },
        TrainConfig { lr: -1.0, ..quick_config(1) },
        TrainConfig { threshold: 2.0, ..quick_config(1) },
    ] {
        assert!(fit(&mut model, &train, &[], &cfg, None).is_err());
    }
    assert!(fit(&mut model, &[], &[], &quick_config(1), None).is_err());
}
