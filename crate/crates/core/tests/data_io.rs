use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revdeblur::data::{
    axis_positions, convolve, extract_patches, generate_corpus, load_png, manifest_from_tsv, manifest_to_tsv,
    procedural_image, quantize, read_manifest, save_png, synthesize_pair, BlurSpec, GenConfig, Kernel, KernelFamily,
    PatchSet,
};
use revdeblur::exit::{psnr_class, Bins};
use revdeblur::Tensor;

fn no_variation(length: (f64, f64)) -> BlurSpec {
    BlurSpec {
        length,
        grid: (1, 1),
        noise_sigma: 0.0,
        ..BlurSpec::default()
    }
}

#[test]
fn identity_kernel_without_noise_keeps_the_image() {
    let sharp = procedural_image(24, 20, 3);
    let (blur, s) = synthesize_pair(&sharp, &no_variation((1.0, 1.0)), 9).unwrap();
    assert_eq!(blur, sharp);
    assert_eq!(s, sharp);
}

#[test]
fn horizontal_box_spreads_an_impulse() {
    let mut img = Tensor::<f32>::zeros([1, 1, 9, 15]);
    img.set(0, 0, 4, 7, 1.0);
    for len in [3usize, 5, 4] {
        let k = Kernel::horizontal_box(len);
        let out = convolve(&img, &k).unwrap();
        let nonzero: Vec<(usize, f32)> = (0..15).map(|x| (x, out.at(0, 0, 4, x))).filter(|(_, v)| *v != 0.0).collect();
        assert_eq!(nonzero.len(), len);
        for (_, v) in &nonzero {
            assert!((v - 1.0 / len as f32).abs() < 1e-7);
        }
        assert!((out.sum() - 1.0).abs() < 1e-6);
        for y in [3, 5] {
            assert!((0..15).all(|x| out.at(0, 0, y, x) == 0.0));
        }
    }
}

#[test]
fn kernels_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for len in [1.0, 2.5, 7.0, 13.0] {
        for k in [Kernel::linear(len, 0.7), Kernel::random_walk(len, &mut rng)] {
            assert_eq!(k.data.len(), k.size * k.size);
            assert_eq!(k.size % 2, 1);
            assert!((k.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(k.data.iter().all(|v| *v >= 0.0));
        }
    }
    assert_eq!(Kernel::linear(1.0, 0.3), Kernel::identity());
}

#[test]
fn horizontal_linear_kernel_extent() {
    let k = Kernel::linear(5.0, 0.0);
    let mid = k.size / 2;
    let row: f64 = (0..k.size).map(|x| k.data[mid * k.size + x]).sum();
    assert!((row - 1.0).abs() < 1e-12);
    assert_eq!(k.size, 5);
}

#[test]
fn kernel_larger_than_image_is_rejected() {
    let img = Tensor::<f32>::zeros([1, 3, 4, 4]);
    assert!(convolve(&img, &Kernel::horizontal_box(7)).is_err());
    assert!(synthesize_pair(&img, &no_variation((9.0, 9.0)), 0).is_err());
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let sharp = procedural_image(32, 32, 5);
    let spec = BlurSpec::default();
    let a = synthesize_pair(&sharp, &spec, 11).unwrap().0;
    let b = synthesize_pair(&sharp, &spec, 11).unwrap().0;
    let c = synthesize_pair(&sharp, &spec, 12).unwrap().0;
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let walk = BlurSpec {
        family: KernelFamily::RandomWalk,
        ..spec
    };
    let d = synthesize_pair(&sharp, &walk, 11).unwrap().0;
    assert_eq!(d.data(), synthesize_pair(&sharp, &walk, 11).unwrap().0.data());
}

#[test]
fn procedural_images_are_in_range_and_seeded() {
    let a = procedural_image(20, 30, 1);
    assert_eq!(a.shape(), [1, 3, 20, 30]);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a, procedural_image(20, 30, 1));
    assert_ne!(a, procedural_image(20, 30, 2));
}

#[test]
fn axis_positions_snap_the_last_window() {
    assert_eq!(axis_positions(384, 384, 352), vec![0]);
    assert_eq!(axis_positions(736, 384, 352), vec![0, 352]);
    assert_eq!(axis_positions(800, 384, 352), vec![0, 352, 416]);
    assert_eq!(axis_positions(100, 384, 352), vec![0]);
    assert_eq!(axis_positions(128, 32, 32), vec![0, 32, 64, 96]);
}

#[test]
fn patch_grid_covers_every_pixel() {
    for (len, size, stride) in [(100usize, 32usize, 24usize), (128, 32, 32), (97, 40, 40), (736, 384, 352)] {
        let pos = axis_positions(len, size, stride);
        let mut covered = vec![false; len];
        for p in pos {
            assert!(p + size <= len);
            covered[p..p + size].iter_mut().for_each(|c| *c = true);
        }
        assert!(covered.iter().all(|c| *c));
    }
}

#[test]
fn one_record_when_patch_equals_image() {
    let sharp = quantize(&procedural_image(32, 32, 2));
    let (blur, _) = synthesize_pair(&sharp, &BlurSpec::default(), 4).unwrap();
    let recs = extract_patches(&blur, &sharp, 32, 16, &Bins::standard(), "b", "s").unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!((recs[0].x, recs[0].y), (0, 0));
    assert!(extract_patches(&blur, &sharp, 33, 16, &Bins::standard(), "b", "s").is_err());
}

#[test]
fn record_classes_match_the_binning_op() {
    let sharp = quantize(&procedural_image(64, 48, 7));
    let (blur, _) = synthesize_pair(&sharp, &BlurSpec::default(), 8).unwrap();
    let bins = Bins::standard();
    let recs = extract_patches(&blur, &sharp, 16, 16, &bins, "b", "s").unwrap();
    assert_eq!(recs.len(), 12);
    for r in &recs {
        let bp = blur.crop(r.y, r.x, 16, 16).unwrap();
        let sp = sharp.crop(r.y, r.x, 16, 16).unwrap();
        assert_eq!(r.class, psnr_class(&bp, &sp, &bins).unwrap());
        assert_eq!(r.class, bins.class_of(r.psnr));
    }
}

#[test]
fn manifest_round_trip() {
    let sharp = quantize(&procedural_image(32, 32, 1));
    let (blur, _) = synthesize_pair(&sharp, &BlurSpec::default(), 2).unwrap();
    let recs = extract_patches(&blur, &sharp, 16, 16, &Bins::standard(), "blur/0000.png", "sharp/0000.png").unwrap();
    let text = manifest_to_tsv(&recs);
    assert!(text.starts_with("blur\tsharp\tx\ty\tsize\tpsnr\tclass\n"));
    assert_eq!(manifest_from_tsv(&text, "mem").unwrap(), recs);
    assert!(manifest_from_tsv("nope\n", "mem").is_err());
    assert!(manifest_from_tsv("blur\tsharp\tx\ty\tsize\tpsnr\tclass\na\tb\t1\n", "mem").is_err());
}

#[test]
fn png_round_trip_is_exact_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let img = quantize(&procedural_image(13, 17, 4));
    let p = dir.path().join("x.png");
    save_png(&img, &p).unwrap();
    assert_eq!(load_png(&p).unwrap(), img);
    assert!(load_png(&dir.path().join("missing.png")).is_err());
    assert!(save_png(&Tensor::<f32>::zeros([1, 1, 4, 4]), &p).is_err());
}

#[test]
fn corpus_manifest_matches_loaded_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 2,
        height: 48,
        width: 40,
        patch: 16,
        stride: 16,
        seed: 3,
        ..GenConfig::default()
    };
    let recs = generate_corpus(dir.path(), &cfg).unwrap();
    assert_eq!(recs.len(), 2 * 3 * 3);
    assert_eq!(read_manifest(dir.path()).unwrap(), recs);
    let set = PatchSet::load(dir.path()).unwrap();
    assert_eq!(set.len(), recs.len());
    for (i, r) in recs.iter().enumerate() {
        let p = revdeblur::metrics::psnr(&set.blur[i], &set.sharp[i]).unwrap();
        assert_eq!(p, r.psnr);
        assert_eq!(set.classes[i], r.class);
    }
    assert!(dir.path().join("blur/0001.png").exists());
    assert!(dir.path().join("sharp/0000.png").exists());
}

#[test]
fn corpus_generation_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 2,
        height: 32,
        width: 32,
        patch: 16,
        stride: 16,
        seed: 9,
        ..GenConfig::default()
    };
    generate_corpus(a.path(), &cfg).unwrap();
    generate_corpus(b.path(), &cfg).unwrap();
    for f in ["manifest.tsv", "blur/0000.png", "sharp/0001.png"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn batches_stack_and_flip_pairs_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 1,
        height: 32,
        width: 32,
        patch: 16,
        stride: 16,
        ..GenConfig::default()
    };
    generate_corpus(dir.path(), &cfg).unwrap();
    let set = PatchSet::load(dir.path()).unwrap();
    let (b, s) = set.batch(&[0, 3], None).unwrap();
    assert_eq!(b.shape(), [2, 3, 16, 16]);
    assert_eq!(b.batch_slice(1, 1), set.blur[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..8 {
        let (bf, sf) = set.batch(&[1], Some(&mut rng)).unwrap();
        let ok = [(false, false), (true, false), (false, true), (true, true)]
            .iter()
            .any(|&(h, v)| set.blur[1].flip(h, v) == bf && set.sharp[1].flip(h, v) == sf);
        assert!(ok);
    }
    assert_eq!(s.shape(), b.shape());
}
