use std::fs;
use std::path::Path;

use cxr_sslx::data::{load_image, scan_dataset, split, CxrClass, Split};
use cxr_sslx::ErrorKind;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

fn gray(path: &Path, size: u32, value: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_pixel(size, size, Luma([value])).save(path).unwrap();
}

#[test]
fn eight_bit_png_loads_as_channels_by_height_by_width() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    let img = GrayImage::from_fn(299, 299, |x, y| Luma([((x + 2 * y) % 256) as u8]));
    img.save(&p).unwrap();
    let a = load_image(&p, 3).unwrap();
    assert_eq!(a.dim(), (3, 299, 299));
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a[[0, 1, 0]], 2.0 / 255.0);
    assert_eq!(a.index_axis(ndarray::Axis(0), 0), a.index_axis(ndarray::Axis(0), 2));
}

#[test]
fn black_and_white_images_map_to_zero_and_one() {
    let dir = tempfile::tempdir().unwrap();
    let (b, w) = (dir.path().join("b.png"), dir.path().join("w.png"));
    gray(&b, 16, 0);
    gray(&w, 16, 255);
    assert!(load_image(&b, 1).unwrap().iter().all(|&v| v == 0.0));
    assert!(load_image(&w, 1).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn rgb_input_is_reduced_to_luma() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.png");
    RgbImage::from_pixel(4, 4, Rgb([90, 90, 90])).save(&p).unwrap();
    let a = load_image(&p, 1).unwrap();
    assert!(a.iter().all(|&v| (v - 90.0 / 255.0).abs() < 1e-6));
}

#[test]
fn sixteen_bit_png_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("deep.png");
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_pixel(8, 8, Luma([40000]));
    img.save(&p).unwrap();
    let err = load_image(&p, 1).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(err.to_string().contains("8 bits"), "{err}");
}

#[test]
fn scan_finds_two_classes_of_three_images() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["COVID", "Normal"] {
        for i in 0..3 {
            gray(&dir.path().join(class).join(format!("{i}.png")), 8, 100);
        }
    }
    let report = scan_dataset(dir.path()).unwrap();
    assert_eq!(report.manifest.len(), 6);
    assert!(report.manifest.records.iter().all(|r| r.split == Split::Unassigned));
    let counts = report.manifest.class_counts(Split::Unassigned);
    assert_eq!(counts[CxrClass::Covid.index()], 3);
    assert_eq!(counts[CxrClass::Normal.index()], 3);
    assert!(report.skipped.is_empty());
}

#[test]
fn scan_accepts_nested_images_directories_and_reports_skips() {
    let dir = tempfile::tempdir().unwrap();
    gray(&dir.path().join("Lung_Opacity/images/a.png"), 8, 1);
    gray(&dir.path().join("Viral Pneumonia/images/b.png"), 8, 1);
    fs::write(dir.path().join("Viral Pneumonia/images/notes.txt"), "x").unwrap();
    fs::write(dir.path().join("Viral Pneumonia/images/broken.png"), "not a png").unwrap();
    gray(&dir.path().join("Tuberculosis/c.png"), 8, 1);
    fs::create_dir_all(dir.path().join("COVID")).unwrap();

    let report = scan_dataset(dir.path()).unwrap();
    let classes: Vec<CxrClass> = report.manifest.records.iter().map(|r| r.class_label).collect();
    assert_eq!(classes, vec![CxrClass::LungOpacity, CxrClass::ViralPneumonia]);
    assert_eq!(report.skipped.len(), 2);
    assert!(report.warnings.iter().any(|w| w.contains("Tuberculosis")));
    assert!(report.warnings.iter().any(|w| w.contains("COVID")));
}

#[test]
fn empty_root_warns_and_missing_root_fails() {
    let dir = tempfile::tempdir().unwrap();
    let report = scan_dataset(dir.path()).unwrap();
    assert!(report.manifest.is_empty());
    assert!(report.warnings.iter().any(|w| w.contains("no images")));
    let missing = dir.path().join("nope");
    let err = scan_dataset(&missing).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(err.to_string().contains("nope"));
}

#[test]
fn manifest_survives_a_tsv_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["COVID", "Normal", "Lung_Opacity"] {
        for i in 0..5 {
            gray(&dir.path().join(class).join(format!("{i}.png")), 8, 7);
        }
    }
    let m = split(&scan_dataset(dir.path()).unwrap().manifest, 0.8, 9).unwrap();
    let path = dir.path().join("manifest.tsv");
    m.save(&path).unwrap();
    let back = cxr_sslx::data::DatasetManifest::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.count(Split::Train), 12);
    assert_eq!(back.count(Split::Test), 3);
}
