use lcdnet::backbone::{build_encoder, EncoderConfig};
use lcdnet::model::threshold_logits;
use lcdnet::params::{ParamKind, ParamStore, Session, SessionMode};
use lcdnet::profiler::{ComplexityReport, FlopConvention, REFERENCE_GFLOPS, REFERENCE_PARAMS};
use lcdnet::tensor::archive::Archive;
use lcdnet::tensor::{Shape, Tensor};
use lcdnet::{Error, LcdNet, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(n: usize, hw: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(Shape::new(n, 3, hw, hw), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn encoder_stage_sizes() {
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.stage_channels(), vec![16, 24, 32, 96, 320]);
    for hw in [256usize, 64] {
        let mut store = ParamStore::<f32>::new();
        let enc = build_encoder(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut s = Session::new(&mut store, SessionMode::EVAL);
        let x = s.input(image(1, hw, 1));
        let p = enc.encode(&mut s, x).unwrap();
        for (k, &v) in p.levels.iter().enumerate() {
            let side = hw >> (k + 1);
            assert_eq!(s.graph.shape(v), Shape::new(1, cfg.stage_channels()[k], side, side));
        }
    }
}

#[test]
fn encoder_rejects_indivisible_input() {
    assert!(lcdnet::backbone::Encoder::check_input(Shape::new(1, 3, 100, 96)).is_err());
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    assert!(model.forward(&image(1, 48, 0), &image(1, 48, 1)).is_err());
    assert!(model.forward(&image(1, 64, 0), &image(1, 32, 1)).is_err());
}

#[test]
fn kaiming_variance_of_conv_weights() {
    let mut store = ParamStore::<f64>::new();
    let spec = lcdnet::tensor::ConvSpec::new(64, 128, 3);
    let fan_in = 64.0 * 9.0;
    for seed in 0..10 {
        store.add_conv(&format!("c{seed}"), &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let w = store.get(&format!("c{seed}.weight")).unwrap().tensor.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let target = 2.0 / fan_in;
        assert!((var / target - 1.0).abs() < 0.2, "seed {seed}: {var} vs {target}");
    }
}

fn encoder_archive(model: &LcdNet<f32>) -> Archive {
    let mut a = Archive::new();
    for (name, p) in model.params.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        a.insert(name, &p.tensor);
    }
    a
}

#[test]
fn pretrained_encoder_round_trip() {
    let source = LcdNet::<f32>::new(&ModelConfig { init_seed: 1, ..ModelConfig::tiny() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.lcdn");
    encoder_archive(&source).save(&path).unwrap();

    let mut target = LcdNet::<f32>::new(&ModelConfig { init_seed: 2, ..ModelConfig::tiny() }).unwrap();
    let missing = target.load_pretrained(&path).unwrap();
    assert!(!missing.is_empty());
    assert!(missing.iter().all(|n| !n.starts_with("encoder.")));
    for (name, p) in source.params.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        assert_eq!(target.params.get(name).unwrap().tensor.data(), p.tensor.data(), "{name}");
    }
}

#[test]
fn pretrained_shape_mismatch_names_the_tensor() {
    let source = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let mut a = encoder_archive(&source);
    let bad = "encoder.s0.stem.conv.weight";
    a.insert(bad, &Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1)));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.lcdn");
    a.save(&path).unwrap();
    let mut target = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let before = target.params.get(bad).unwrap().tensor.data().to_vec();
    match target.load_pretrained(&path) {
        Err(e @ Error::ParamShape { .. }) => assert!(e.to_string().contains(bad)),
        other => panic!("expected shape error, got {other:?}"),
    }
    assert_eq!(target.params.get(bad).unwrap().tensor.data(), &before[..]);
}

fn encoder_grad(model: &mut LcdNet<f64>, inputs: &[&Tensor<f64>], name: &str) -> Vec<f64> {
    model.params.zero_grads();
    let mut s = Session::new(&mut model.params, SessionMode::TRAIN);
    let mut total = None;
    for x in inputs {
        let v = s.input((*x).clone());
        let p = model.net.encoder.encode(&mut s, v).unwrap();
        let l = s.graph.sum(p.levels[4]).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => s.graph.add(t, l).unwrap(),
        });
    }
    s.backward(total.unwrap()).unwrap();
    model.params.get(name).unwrap().tensor.grad().unwrap().to_vec()
}

#[test]
fn shared_encoder_gradient_is_sum_of_streams() {
    let mut model = LcdNet::<f64>::new(&ModelConfig::tiny()).unwrap();
    let x1 = Tensor::uniform(Shape::new(2, 3, 32, 32), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let x2 = Tensor::uniform(Shape::new(2, 3, 32, 32), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let name = "encoder.s0.stem.conv.weight";
    let g1 = encoder_grad(&mut model, &[&x1], name);
    let g2 = encoder_grad(&mut model, &[&x2], name);
    let both = encoder_grad(&mut model, &[&x1, &x2], name);
    for i in 0..both.len() {
        assert!((both[i] - g1[i] - g2[i]).abs() <= 1e-9 * (1.0 + both[i].abs()));
    }
}

#[test]
fn equal_inputs_give_equal_streams() {
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let x = image(2, 64, 3);
    let mut s = Session::new(&mut model.params, SessionMode::EVAL);
    let (a, b) = (s.input(x.clone()), s.input(x));
    let (p1, p2) = model.net.encode_pair(&mut s, a, b).unwrap();
    for k in 0..5 {
        assert_eq!(s.graph.value(p1[k]).data(), s.graph.value(p2[k]).data());
    }
}

#[test]
fn full_model_logit_shapes() {
    let mut model = LcdNet::<f32>::new(&ModelConfig::default()).unwrap();
    let (a, b) = model.forward(&image(2, 256, 0), &image(2, 256, 1)).unwrap();
    assert_eq!(a.shape(), Shape::new(2, 1, 256, 256));
    assert_eq!(b.shape(), Shape::new(2, 1, 256, 256));
}

fn sample(t: &Tensor<f32>, i: usize) -> Vec<f32> {
    let per = t.numel() / t.shape().n;
    t.data()[i * per..(i + 1) * per].to_vec()
}

fn stack(parts: &[Vec<f32>], like: Shape) -> Tensor<f32> {
    Tensor::from_vec(Shape::new(parts.len(), like.c, like.h, like.w), parts.concat()).unwrap()
}

#[test]
fn batch_permutation_permutes_outputs() {
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let (t1, t2) = (image(3, 32, 5), image(3, 32, 6));
    let perm = [2usize, 0, 1];
    let p1 = stack(&perm.map(|i| sample(&t1, i)), t1.shape());
    let p2 = stack(&perm.map(|i| sample(&t2, i)), t2.shape());
    for mode in [SessionMode::EVAL, SessionMode::TRAIN] {
        let (a, _) = model.clone().forward_mode(&t1, &t2, mode).unwrap();
        let (b, _) = model.clone().forward_mode(&p1, &p2, mode).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            let (x, y) = (sample(&a, i), sample(&b, j));
            for k in 0..x.len() {
                assert!((x[k] - y[k]).abs() <= 1e-5 * (1.0 + x[k].abs()), "{mode:?}");
            }
        }
    }
    let _ = model.forward(&t1, &t2).unwrap();
}

#[test]
fn encoder_weight_change_reaches_both_streams() {
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let (x1, x2) = (image(1, 32, 1), image(1, 32, 2));
    let levels = |m: &mut LcdNet<f32>| {
        let mut s = Session::new(&mut m.params, SessionMode::EVAL);
        let (a, b) = (s.input(x1.clone()), s.input(x2.clone()));
        let (p1, p2) = m.net.encode_pair(&mut s, a, b).unwrap();
        (s.graph.value(p1[1]).data().to_vec(), s.graph.value(p2[1]).data().to_vec())
    };
    let before = levels(&mut model);
    model.params.get_mut("encoder.s0.stem.conv.weight").unwrap().tensor.data_mut()[0] += 0.5;
    let after = levels(&mut model);
    assert_ne!(before.0, after.0);
    assert_ne!(before.1, after.1);
}

fn zero_heads(model: &mut LcdNet<f32>) {
    for name in ["decoder.head0.weight", "decoder.head0.bias", "decoder.head1.weight", "decoder.head1.bias"] {
        let p = model.params.get_mut(name).unwrap();
        p.tensor = Tensor::zeros(p.tensor.shape());
    }
}

#[test]
fn predict_tie_and_boundary_rules() {
    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    zero_heads(&mut model);
    let (t1, t2) = (image(1, 32, 1), image(1, 32, 2));
    assert!(model.predict(&t1, &t2, 0.5).unwrap().iter().all(|&v| v == 0));
    assert!(model.predict(&t1, &t2, 0.0).unwrap().iter().all(|&v| v == 1));
    assert!(model.predict(&t1, &t2, 1.0).unwrap().iter().all(|&v| v == 0));
    assert!(model.predict(&t1, &t2, 1.5).is_err());

    let mut model = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap();
    let mask = model.predict(&t1, &t2, 0.5).unwrap();
    assert_eq!(mask.len(), 32 * 32);
    assert!(mask.iter().all(|&v| v <= 1));
    let logits = Tensor::<f32>::from_f64s(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 1.0]).unwrap();
    assert_eq!(threshold_logits(&logits, 0.5), vec![0, 0, 1]);
}

#[test]
fn both_heads_reach_deep_encoder_weights() {
    let mut model = LcdNet::<f64>::new(&ModelConfig::tiny()).unwrap();
    let x1 = Tensor::uniform(Shape::new(2, 3, 32, 32), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let x2 = Tensor::uniform(Shape::new(2, 3, 32, 32), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let label = Tensor::from_vec(
        Shape::new(2, 1, 32, 32),
        (0..2048).map(|i| ((i / 7) % 2) as f64).collect(),
    )
    .unwrap();
    let deep = model
        .params
        .iter()
        .filter(|(n, p)| n.starts_with("encoder.s4") && n.ends_with("conv.weight") && p.kind == ParamKind::Weight)
        .map(|(n, _)| n.to_string())
        .last()
        .unwrap();
    for head in 0..2 {
        model.params.zero_grads();
        let mut s = Session::new(&mut model.params, SessionMode::TRAIN);
        let (a, b) = (s.input(x1.clone()), s.input(x2.clone()));
        let (l0, l1) = model.net.forward(&mut s, a, b).unwrap();
        let l = s.graph.bce_with_logits(if head == 0 { l0 } else { l1 }, &label).unwrap();
        s.backward(l).unwrap();
        let g = model.params.get(&deep).unwrap().tensor.grad().unwrap();
        assert!(g.iter().any(|v| v.abs() > 0.0), "head {head}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut model = LcdNet::<f32>::new(&ModelConfig { init_seed: 4, ..ModelConfig::tiny() }).unwrap();
    let (t1, t2) = (image(2, 32, 1), image(2, 32, 2));
    let _ = model.forward_mode(&t1, &t2, SessionMode::TRAIN).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lcdn");
    model.save_checkpoint(&path, 3, Some(0.25)).unwrap();
    let mut back = LcdNet::<f32>::load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), model.config());
    let (a, b) = model.forward(&t1, &t2).unwrap();
    let (c, d) = back.forward(&t1, &t2).unwrap();
    assert_eq!(a.data(), c.data());
    assert_eq!(b.data(), d.data());
    let meta = Archive::load(&path).unwrap().metadata;
    assert_eq!(meta["epoch"], "3");
}

#[test]
fn tif_off_changes_nothing_structural() {
    let with = LcdNet::<f32>::new(&ModelConfig::default()).unwrap();
    let without = LcdNet::<f32>::new(&ModelConfig { tif: false, ..ModelConfig::default() }).unwrap();
    assert_eq!(with.params.num_trainable(), without.params.num_trainable());
    let (a, b) = (with.profile((256, 256)).unwrap(), without.profile((256, 256)).unwrap());
    assert_eq!(a.total_params(), b.total_params());
    assert_eq!(a.total_macs(), b.total_macs());
    assert!(a.rows.iter().filter(|r| r.layer.starts_with("tif.")).all(|r| r.params == 0 && r.macs == 0));
}

#[test]
fn profile_matches_enumeration_and_reference_band() {
    let model = LcdNet::<f32>::new(&ModelConfig::default()).unwrap();
    let r = model.profile((256, 256)).unwrap();
    assert_eq!(r.total_params(), model.params.num_trainable() as u64);
    assert_eq!(r.total_params(), 2_551_482);
    assert!((r.total_params() as f64 / REFERENCE_PARAMS - 1.0).abs() <= 0.05);
    let conv = r.closer_convention(REFERENCE_GFLOPS);
    assert_eq!(conv, FlopConvention::Double);
    let g = r.flops(conv) as f64 / 1e9;
    assert!((g / REFERENCE_GFLOPS - 1.0).abs() <= 0.10, "{g}");
}

fn is_conv(layer: &str) -> bool {
    layer.ends_with(".conv") || layer.contains(".conv1") || layer.contains(".conv2") || layer.contains("head")
}

#[test]
fn halving_resolution_quarters_conv_macs() {
    let model = LcdNet::<f32>::new(&ModelConfig::default()).unwrap();
    let (a, b) = (model.profile((256, 256)).unwrap(), model.profile((128, 128)).unwrap());
    let conv_macs = |r: &ComplexityReport| r.rows.iter().filter(|x| is_conv(&x.layer)).map(|x| x.macs).sum::<u64>();
    assert_eq!(conv_macs(&a), 4 * conv_macs(&b));
    assert!(a.rows.iter().filter(|x| is_conv(&x.layer)).count() > 50);
}

#[test]
fn wider_model_costs_more() {
    let base = LcdNet::<f32>::new(&ModelConfig::default()).unwrap().profile((256, 256)).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.decoder_widths.0[2] += 8;
    let wide = LcdNet::<f32>::new(&cfg).unwrap().profile((256, 256)).unwrap();
    assert!(wide.total_params() > base.total_params());
    assert!(wide.total_macs() > base.total_macs());
}

#[test]
fn profile_csv_and_text_agree_with_totals() {
    let r = LcdNet::<f32>::new(&ModelConfig::tiny()).unwrap().profile((64, 64)).unwrap();
    let back = ComplexityReport::from_csv(&r.to_csv().unwrap(), (64, 64)).unwrap();
    assert_eq!(back.total_params(), r.total_params());
    assert_eq!(back.total_macs(), r.total_macs());
    let text = r.to_text();
    let (mut p, mut m) = (0u64, 0u64);
    let mut total = None;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.first() == Some(&"TOTAL") {
            total = Some((cols[1].parse::<u64>().unwrap(), cols[2].parse::<u64>().unwrap()));
            break;
        }
        let n = cols.len();
        p += cols[n - 2].parse::<u64>().unwrap();
        m += cols[n - 1].parse::<u64>().unwrap();
    }
    assert_eq!(total, Some((p, m)));
    assert_eq!(p, r.total_params());

    let empty = ComplexityReport::new((64, 64)).to_csv().unwrap();
    assert_eq!(empty.trim(), "layer,out_n,out_c,out_h,out_w,params,macs");
}
