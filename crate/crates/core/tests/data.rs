mod common;

use std::fs;
use std::path::Path;

use common::{assert_bit_equal, rng};
use image::{GrayImage, Luma, Rgb, RgbImage};
use refcod_core::config::{FolderLayout, ObjectCount, SynthConfig};
use refcod_core::data::{
    inject_label_noise, load_folder, masked_average_pool, reference_descriptor, swap_references,
    synth_generate, write_folder, DataError, Reference, ReferenceEncoder, Sample,
};
use refcod_tensor::nn::{ParamStore, Session};
use refcod_tensor::{Tensor, Var};

fn small() -> SynthConfig {
    SynthConfig {
        image_size: 32,
        num_scenes: 4,
        min_radius: 5.0,
        max_radius: 7.0,
        ..SynthConfig::default()
    }
}

#[test]
fn generator_is_bit_deterministic() {
    let a = synth_generate(&small(), 42).unwrap();
    let b = synth_generate(&small(), 42).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.id, y.id);
        assert_bit_equal(&x.query, &y.query);
        assert_bit_equal(&x.gt, &y.gt);
        for (r, s) in x.references.iter().zip(&y.references) {
            assert_bit_equal(&r.image, &s.image);
            assert_bit_equal(&r.mask, &s.mask);
        }
    }
    let c = synth_generate(&small(), 43).unwrap();
    assert_ne!(a[0].query, c[0].query);
}

#[test]
fn generated_samples_are_well_formed() {
    let cfg = small();
    let samples = synth_generate(&cfg, 1).unwrap();
    // paired scenes emit one sample per class present
    assert_eq!(samples.len(), cfg.num_scenes * (cfg.distractors + 1));
    for s in &samples {
        assert_eq!(s.query.shape(), &[3, 32, 32]);
        assert_eq!(s.gt.shape(), &[32, 32]);
        assert!(s.gt.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(s.gt.sum() > 0.0);
        assert!(s.query.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.references.len(), cfg.refs_per_sample);
        for r in &s.references {
            assert!(r.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(r.mask.sum() > 0.0);
        }
        assert_eq!(s.object_count(), 1);
    }
}

#[test]
fn multiple_object_scenes_have_several_components() {
    let cfg = SynthConfig {
        objects: ObjectCount::Multiple,
        paired: false,
        image_size: 64,
        ..small()
    };
    for s in synth_generate(&cfg, 5).unwrap() {
        assert!(s.object_count() >= 2, "{}", s.id);
    }
}

/// Mean absolute colour difference between object and background pixels.
fn contrast(samples: &[Sample]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let plane = s.gt.numel();
        for c in 0..3 {
            let ch = &s.query.data()[c * plane..(c + 1) * plane];
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for (v, g) in ch.iter().zip(s.gt.data()) {
                if *g > 0.5 {
                    fg += v;
                    nf += 1.0;
                } else {
                    bg += v;
                    nb += 1.0;
                }
            }
            total += (fg / nf - bg / nb).abs();
        }
    }
    total / samples.len() as f64
}

#[test]
fn similarity_level_shrinks_colour_contrast() {
    let level = |similarity| {
        let cfg = SynthConfig {
            similarity,
            num_scenes: 12,
            ..small()
        };
        contrast(&synth_generate(&cfg, 9).unwrap())
    };
    let (easy, mid, hard) = (level(0.0), level(0.5), level(1.0));
    assert!(easy > mid && mid > hard, "{easy} {mid} {hard}");
    // what remains at level 1 is the local mean of the shared noise field
    assert!(hard < easy / 4.0, "{easy} {mid} {hard}");
}

#[test]
fn impossible_geometry_is_rejected() {
    let too_big = SynthConfig {
        max_radius: 20.0,
        ..small()
    };
    assert!(matches!(
        synth_generate(&too_big, 0),
        Err(DataError::Geometry(_))
    ));
    let bad_similarity = SynthConfig {
        similarity: 1.5,
        ..small()
    };
    assert!(matches!(
        synth_generate(&bad_similarity, 0),
        Err(DataError::Geometry(_))
    ));
    let bad_classes = SynthConfig {
        distractors: 3,
        ..small()
    };
    assert!(matches!(
        synth_generate(&bad_classes, 0),
        Err(DataError::Geometry(_))
    ));
}

fn references(seed: u64, n: usize) -> Vec<Reference> {
    let mut g = rng(seed);
    (0..n)
        .map(|i| {
            let mut mask = Tensor::zeros(&[8, 8]);
            for p in 0..64 {
                if (p + i) % 3 == 0 {
                    mask.data_mut()[p] = 1.0;
                }
            }
            Reference {
                image: Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut g),
                mask,
            }
        })
        .collect()
}

fn encoder() -> (ParamStore, ReferenceEncoder) {
    let mut store = ParamStore::new();
    let enc = ReferenceEncoder::new(&mut store, 4, &mut rng(2));
    (store, enc)
}

#[test]
fn descriptor_ignores_order_and_duplication() {
    let (store, enc) = encoder();
    let s = Session::new(&store, false);
    let refs = references(1, 3);
    let base = enc.describe(&s, &refs).unwrap();
    assert_eq!(base.shape(), &[1, 4, 1, 1]);
    let mut reversed = refs.clone();
    reversed.reverse();
    let r = enc.describe(&s, &reversed).unwrap();
    let doubled: Vec<Reference> = refs.iter().chain(&refs).cloned().collect();
    let d = enc.describe(&s, &doubled).unwrap();
    for (a, (b, c)) in base
        .value()
        .data()
        .iter()
        .zip(r.value().data().iter().zip(d.value().data()))
    {
        assert!((a - b).abs() < 1e-14 && (a - c).abs() < 1e-14);
    }
    let single = enc.describe(&s, &refs[..1]).unwrap();
    let twice = enc
        .describe(&s, &[refs[0].clone(), refs[0].clone()])
        .unwrap();
    common::assert_close(single.value(), twice.value(), 1e-15);
}

#[test]
fn full_mask_descriptor_is_global_average_pooling() {
    let refs = vec![Reference {
        image: Tensor::uniform(&[3, 6, 6], 0.0, 1.0, &mut rng(3)),
        mask: Tensor::ones(&[6, 6]),
    }];
    let identity = |x: &Var| x.clone();
    let got = reference_descriptor(&refs, identity).unwrap();
    let img = refs[0].image.data();
    for (c, a) in got.value().data().iter().enumerate() {
        let want = img[c * 36..(c + 1) * 36].iter().sum::<f64>() / 36.0;
        assert!((a - want).abs() < 1e-15);
    }
}

#[test]
fn masked_pooling_averages_only_the_foreground() {
    let features = Var::constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 10.0]));
    let mask = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
    assert_eq!(masked_average_pool(&features, &mask).value().data(), &[2.0]);
}

#[test]
fn empty_reference_masks_are_skipped_or_rejected() {
    let (store, enc) = encoder();
    let s = Session::new(&store, false);
    let mut refs = references(4, 2);
    let kept = enc.describe(&s, &refs[..1]).unwrap();
    refs[1].mask = Tensor::zeros(&[8, 8]);
    let with_empty = enc.describe(&s, &refs).unwrap();
    assert_bit_equal(kept.value(), with_empty.value());
    refs[0].mask = Tensor::zeros(&[8, 8]);
    assert!(matches!(
        enc.describe(&s, &refs),
        Err(DataError::EmptyReferences)
    ));
    assert!(matches!(
        enc.describe(&s, &[]),
        Err(DataError::NoReferences)
    ));
}

#[test]
fn label_noise_flips_about_the_requested_share() {
    let gt = Tensor::zeros(&[100, 100]);
    let noisy = inject_label_noise(&gt, 0.05, &mut rng(0));
    let flipped = noisy.sum() / 10_000.0;
    assert!((flipped - 0.05).abs() < 0.01, "{flipped}");
    assert_eq!(inject_label_noise(&gt, 0.0, &mut rng(0)), gt);
}

#[test]
fn swapped_references_come_from_another_category() {
    let samples = synth_generate(&small(), 2).unwrap();
    let swapped = swap_references(&samples);
    for (a, b) in samples.iter().zip(&swapped) {
        assert_eq!(a.gt, b.gt);
        let donor = samples
            .iter()
            .find(|s| s.references == b.references)
            .unwrap();
        assert_ne!(donor.category, a.category);
    }
}

#[test]
fn empty_directory_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_folder(dir.path(), "train", &FolderLayout::default()).unwrap();
    assert!(ds.is_empty());
    assert!(ds.warnings.is_empty());
    assert!(load_folder(
        &dir.path().join("missing"),
        "train",
        &FolderLayout::default()
    )
    .is_err());
}

#[test]
fn folder_round_trip_enumerates_categories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_scenes: 6,
        paired: false,
        ..small()
    };
    let mut samples = synth_generate(&cfg, 7).unwrap();
    // three categories with two images each
    for (i, s) in samples.iter_mut().enumerate() {
        s.category = format!("cat{}", i / 2);
    }
    let layout = FolderLayout::default();
    write_folder(&samples, dir.path(), "test", &layout).unwrap();
    let ds = load_folder(dir.path(), "test", &layout).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.references.len(), 3);
    for item in ds.iter() {
        let item = item.unwrap();
        let original = samples
            .iter()
            .find(|s| item.id == format!("{}/{}", s.category, s.id))
            .unwrap();
        assert_eq!(item.category, original.category);
        assert_eq!(item.gt, original.gt);
        // 8-bit quantization
        common::assert_close(&item.query, &original.query, 0.5 / 255.0 + 1e-12);
        let first = samples
            .iter()
            .find(|s| s.category == item.category)
            .unwrap();
        assert_eq!(item.references.len(), first.references.len());
        for (r, o) in item.references.iter().zip(&first.references) {
            assert_eq!(r.mask, o.mask);
        }
    }
}

fn write_png(path: &Path, size: u32, value: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(size, size, Rgb([value; 3]))
        .save(path)
        .unwrap();
}

fn write_mask(path: &Path, size: u32, value: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_pixel(size, size, Luma([value]))
        .save(path)
        .unwrap();
}

#[test]
fn images_without_masks_are_skipped_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let camo = dir.path().join("train/cat/camo");
    write_png(&camo.join("images/a.png"), 4, 10);
    write_mask(&camo.join("masks/a.png"), 4, 200);
    write_png(&camo.join("images/b.png"), 4, 10);
    let ds = load_folder(dir.path(), "train", &FolderLayout::default()).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.warnings.len(), 1);
    assert!(ds.warnings[0].contains("b.png"));
    let sample = ds.get(0).unwrap();
    assert_eq!(sample.gt, Tensor::ones(&[4, 4]));
    assert!(sample.references.is_empty());
}

#[test]
fn masks_binarize_at_half_intensity() {
    let dir = tempfile::tempdir().unwrap();
    let camo = dir.path().join("train/cat/camo");
    write_png(&camo.join("images/low.png"), 2, 0);
    write_mask(&camo.join("masks/low.png"), 2, 127);
    write_png(&camo.join("images/high.png"), 2, 0);
    write_mask(&camo.join("masks/high.png"), 2, 128);
    let ds = load_folder(dir.path(), "train", &FolderLayout::default()).unwrap();
    let by_id = |id: &str| ds.iter().map(Result::unwrap).find(|s| s.id == id).unwrap();
    assert_eq!(by_id("cat/low").gt.sum(), 0.0);
    assert_eq!(by_id("cat/high").gt.sum(), 4.0);
}

#[test]
fn unreadable_files_fail_only_their_item() {
    let dir = tempfile::tempdir().unwrap();
    let camo = dir.path().join("train/cat/camo");
    write_png(&camo.join("images/good.png"), 3, 50);
    write_mask(&camo.join("masks/good.png"), 3, 255);
    fs::create_dir_all(camo.join("images")).unwrap();
    fs::write(camo.join("images/broken.png"), b"not a png").unwrap();
    write_mask(&camo.join("masks/broken.png"), 3, 255);
    let ds = load_folder(dir.path(), "train", &FolderLayout::default()).unwrap();
    let results: Vec<_> = ds.iter().collect();
    assert_eq!(results.len(), 2);
    assert!(matches!(results[0], Err(DataError::Image { .. })));
    assert!(results[1].is_ok());
}

#[test]
fn layout_names_are_configurable() {
    let dir = tempfile::tempdir().unwrap();
    let layout = FolderLayout {
        query_dir: "Camo".into(),
        reference_dir: "Ref".into(),
        images: "Imgs".into(),
        masks: "GT".into(),
    };
    let base = dir.path().join("val/fish");
    write_png(&base.join("Camo/Imgs/q.png"), 2, 1);
    write_mask(&base.join("Camo/GT/q.png"), 2, 255);
    write_png(&base.join("Ref/Imgs/r.png"), 2, 1);
    write_mask(&base.join("Ref/GT/r.png"), 2, 255);
    let ds = load_folder(dir.path(), "val", &layout).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.get(0).unwrap().references.len(), 1);
}
