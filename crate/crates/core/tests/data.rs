use lcdnet::data::{
    augment, generate_synthetic, load_dataset, make_batch, read_mask, read_rgb, rotate, salt_pepper, save_dataset,
    synthetic_pair, tile, write_mask, write_rgb, AugmentConfig, Mask, RgbImage, SamplePair, SyntheticConfig,
};
use lcdnet::tensor::Shape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;

fn coded_pair(h: usize, w: usize) -> SamplePair {
    let mut t1 = RgbImage::new(w, h);
    let mut t2 = RgbImage::new(w, h);
    let mut label = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            t1.set(x, y, [x as u8, y as u8, 7]);
            t2.set(x, y, [y as u8, x as u8, 9]);
            label.data[y * w + x] = u8::from((x * 3 + y) % 5 == 0);
        }
    }
    SamplePair { id: "p".into(), t1, t2, label }
}

#[test]
fn png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = coded_pair(5, 7);
    write_rgb(&dir.path().join("a.png"), &p.t1).unwrap();
    write_mask(&dir.path().join("m.png"), &p.label).unwrap();
    assert_eq!(read_rgb(&dir.path().join("a.png")).unwrap(), p.t1);
    assert_eq!(read_mask(&dir.path().join("m.png")).unwrap(), p.label);
    // an RGB file is not a valid label
    assert!(read_mask(&dir.path().join("a.png")).is_err());
}

#[test]
fn dataset_loads_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let pairs: Vec<SamplePair> = ["c", "a", "b"]
        .iter()
        .map(|id| SamplePair { id: id.to_string(), ..coded_pair(4, 4) })
        .collect();
    save_dataset(dir.path(), "train", &pairs).unwrap();
    let back = load_dataset(dir.path(), "train").unwrap();
    let ids: Vec<&str> = back.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, vec!["a", "b", "c"]);
    assert_eq!(back[0].t1, pairs[0].t1);
    assert_eq!(back[0].label, pairs[0].label);
}

#[test]
fn dataset_errors_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), "test", &[coded_pair(4, 4)]).unwrap();
    write_rgb(&dir.path().join("test/A/orphan.png"), &coded_pair(4, 4).t1).unwrap();
    let err = load_dataset(dir.path(), "test").unwrap_err().to_string();
    assert!(err.contains("orphan"), "{err}");

    fs::remove_file(dir.path().join("test/A/orphan.png")).unwrap();
    write_rgb(&dir.path().join("test/label/p.png"), &coded_pair(4, 4).t1).unwrap();
    assert!(load_dataset(dir.path(), "test").is_err());

    write_mask(&dir.path().join("test/label/p.png"), &Mask::new(3, 4)).unwrap();
    assert!(load_dataset(dir.path(), "test").is_err());
    assert!(load_dataset(dir.path(), "nope").is_err());
}

#[test]
fn tiling_rules() {
    let big = SamplePair { id: "x".into(), ..synthetic_pair(&SyntheticConfig { size: 1024, ..Default::default() }, 0) };
    let t = tile(&big, 256, 0).unwrap();
    assert_eq!(t.tiles.len(), 16);
    assert_eq!(t.remainder, (0, 0));
    let (h, w) = (256, 256);
    let second = &t.tiles[1];
    assert_eq!(second.size(), (h, w));
    assert_eq!(second.t1.pixel(0, 0), big.t1.pixel(256, 0));
    assert_eq!(second.label.data[5 * 256 + 3], big.label.data[5 * 1024 + 259]);

    let one = coded_pair(256, 256);
    let t = tile(&one, 256, 0).unwrap();
    assert_eq!(t.tiles.len(), 1);
    assert_eq!(t.tiles[0].t1, one.t1);

    let odd = SamplePair { id: "o".into(), ..synthetic_pair(&SyntheticConfig { size: 320, ..Default::default() }, 0) };
    let cropped = lcdnet::data::tile(&odd, 300, 0).unwrap();
    assert_eq!(cropped.tiles.len(), 1);
    let t = tile(&odd, 256, 0).unwrap();
    assert_eq!(t.tiles.len(), 1);
    assert_eq!(t.remainder, (64, 64));
    assert!(tile(&odd, 16, 16).is_err());
}

#[test]
fn disabled_augmentation_is_identity() {
    let p = coded_pair(16, 16);
    let out = augment(&p, &AugmentConfig::none(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.t1, p.t1);
    assert_eq!(out.t2, p.t2);
    assert_eq!(out.label, p.label);
}

#[test]
fn rotation_keeps_label_aligned() {
    let p = coded_pair(12, 12);
    for deg in [90.0, 180.0, 270.0] {
        let r = rotate(&p, deg);
        for y in 0..12 {
            for x in 0..12 {
                // every rotated pixel carries its source coordinates in t1
                let [sx, sy, _] = r.t1.pixel(x, y);
                let [ty, tx, _] = r.t2.pixel(x, y);
                assert_eq!((sx, sy), (tx, ty));
                assert_eq!(r.label.data[y * 12 + x], p.label.data[sy as usize * 12 + sx as usize]);
            }
        }
    }
    let r = rotate(&rotate(&p, 90.0), 270.0);
    assert_eq!(r.t1, p.t1);
}

#[test]
fn augmentation_never_touches_labels_photometrically() {
    let p = coded_pair(16, 16);
    let cfg = AugmentConfig {
        rotate_p: 0.0,
        gaussian_sigma: Some((0.1, 0.2)),
        salt_pepper_p: 0.2,
        ..AugmentConfig::default()
    };
    let a = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a.label, p.label);
    assert_ne!(a.t1, p.t1);
    assert_eq!(a.t1, b.t1);
    assert_eq!(a.t2, b.t2);
}

#[test]
fn salt_and_pepper_rate() {
    let mut img = RgbImage::new(1000, 1000);
    img.data.fill(128);
    let hit = salt_pepper(&mut img, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
    let frac = hit as f64 / 1e6;
    assert!((frac - 0.1).abs() <= 0.003, "{frac}");
    let changed = img.data.chunks(3).filter(|p| p[0] != 128).count();
    assert_eq!(changed, hit);
}

#[test]
fn invalid_augmentation_configs() {
    assert!(AugmentConfig { rotate_p: 1.5, ..AugmentConfig::default() }.validate().is_err());
    assert!(AugmentConfig { angles: vec![45.0], ..AugmentConfig::default() }.validate().is_err());
    assert!(AugmentConfig { angles: vec![45.0], arbitrary_rotation: true, ..AugmentConfig::default() }
        .validate()
        .is_ok());
}

#[test]
fn synthetic_density_and_determinism() {
    let cfg = SyntheticConfig::default();
    let mean = (0..1000).map(|i| synthetic_pair(&cfg, i).label.changed_fraction()).sum::<f64>() / 1000.0;
    assert!((mean - 0.10).abs() <= 0.02, "{mean}");
    assert_eq!(synthetic_pair(&cfg, 5), synthetic_pair(&cfg, 5));
    assert_ne!(synthetic_pair(&cfg, 5).t1, synthetic_pair(&cfg, 6).t1);
}

fn tree(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "test"] {
        for sub in ["A", "B", "label"] {
            let dir = root.join(split).join(sub);
            let mut names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for n in names {
                out.push((n.strip_prefix(root).unwrap().display().to_string(), fs::read(&n).unwrap()));
            }
        }
    }
    out
}

#[test]
fn synthetic_generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SyntheticConfig { size: 32, density: 0.2, seed: 3 };
    let s = generate_synthetic(a.path(), &cfg, 10, 0.2, 0.0).unwrap();
    generate_synthetic(b.path(), &cfg, 10, 0.2, 0.0).unwrap();
    assert_eq!(s, vec![("train".to_string(), 8), ("test".to_string(), 2)]);
    assert_eq!(tree(a.path()), tree(b.path()));
    assert!(generate_synthetic(a.path(), &SyntheticConfig { size: 40, ..cfg.clone() }, 2, 0.5, 0.0).is_err());
    assert!(generate_synthetic(a.path(), &SyntheticConfig { density: 0.0, ..cfg.clone() }, 2, 0.5, 0.0).is_err());
    assert!(generate_synthetic(a.path(), &SyntheticConfig { density: 0.6, ..cfg }, 2, 0.5, 0.0).is_err());
}

#[test]
fn batch_tensor_layout() {
    let pairs = [coded_pair(8, 8), coded_pair(8, 8)];
    let b = make_batch::<f32>(&[&pairs[0], &pairs[1]]).unwrap();
    assert_eq!(b.t1.shape(), Shape::new(2, 3, 8, 8));
    assert_eq!(b.label.shape(), Shape::new(2, 1, 8, 8));
    // red channel of pixel (x=2, y=0) is 2 -> (2/255 - 0.5) / 0.5
    let v = b.t1.data()[2];
    assert!((v - (2.0 / 255.0 - 0.5) / 0.5).abs() < 1e-6);
    assert!(b.label.data().iter().all(|&v| v == 0.0 || v == 1.0));
}
