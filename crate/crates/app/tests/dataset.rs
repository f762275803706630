use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat};
use promise_core::data::{generate, Domain};
use promise_seg::dataset::{decode_mask, decode_rgb, encode_mask_png, encode_rgb_png, gen_synthetic, load_dataset, read_meta};
use promise_seg::AppError;

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
        }
    }
    out.push(("meta.json".into(), fs::read(dir.join("meta.json")).unwrap()));
    out
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_synthetic(a.path(), Domain::TargetA, 12, 3, 32).unwrap();
    gen_synthetic(b.path(), Domain::TargetA, 12, 3, 32).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 25);
    assert_eq!(ta, tb);
    assert!(ta.iter().any(|(n, _)| n == "images/00011.png"));
}

#[test]
fn load_recovers_the_generated_samples() {
    let dir = tempfile::tempdir().unwrap();
    let meta = gen_synthetic(dir.path(), Domain::TargetB, 6, 9, 16).unwrap();
    assert_eq!(read_meta(dir.path()).unwrap(), meta);
    assert_eq!((meta.domain, meta.seed, meta.count), (Domain::TargetB, 9, 6));
    let loaded = load_dataset(dir.path()).unwrap();
    let want = generate(Domain::TargetB, 6, 16, 9);
    assert_eq!(loaded.len(), 6);
    for (l, w) in loaded.iter().zip(&want) {
        assert_eq!(l.id, w.id);
        assert_eq!(l.pixels, w.pixels);
        assert_eq!(l.mask, w.mask);
    }
}

#[test]
fn mask_png_is_single_channel_zero_or_255() {
    let png = encode_mask_png(3, 2, &[0, 1, 0, 1, 1, 0]).unwrap();
    let img = image::load_from_memory_with_format(&png, ImageFormat::Png).unwrap();
    assert_eq!(img.color(), image::ColorType::L8);
    assert_eq!(img.to_luma8().into_raw(), vec![0, 255, 0, 255, 255, 0]);
    assert_eq!(decode_mask(&png).unwrap(), (3, 2, vec![0, 1, 0, 1, 1, 0]));
}

#[test]
fn grayscale_images_are_widened_to_rgb() {
    let g = GrayImage::from_raw(2, 2, vec![0, 50, 100, 200]).unwrap();
    let mut png = std::io::Cursor::new(Vec::new());
    g.write_to(&mut png, ImageFormat::Png).unwrap();
    let (w, h, px) = decode_rgb(png.get_ref()).unwrap();
    assert_eq!((w, h), (2, 2));
    assert_eq!(px, vec![0, 0, 0, 50, 50, 50, 100, 100, 100, 200, 200, 200]);
    let rgb = encode_rgb_png(2, &px).unwrap();
    assert_eq!(decode_rgb(&rgb).unwrap().2, px);
}

#[test]
fn broken_datasets_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(AppError::Io { .. })));
    gen_synthetic(dir.path(), Domain::Source, 2, 0, 16).unwrap();
    fs::remove_file(dir.path().join("masks/00001.png")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(AppError::Dataset(_))));
    for f in ["images/00000.png", "images/00001.png"] {
        fs::remove_file(dir.path().join(f)).unwrap();
    }
    assert!(matches!(load_dataset(dir.path()), Err(AppError::Dataset(_))));
    assert!(matches!(gen_synthetic(dir.path(), Domain::Source, 0, 0, 16), Err(AppError::Dataset(_))));
    assert!(matches!(decode_rgb(b"not a png"), Err(AppError::Image(_))));
}
