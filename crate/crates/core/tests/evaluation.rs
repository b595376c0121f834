mod common;

use common::{palette, small_config, toy_image, toy_samples, write_toy_set};
use proptest::prelude::*;
use ucapsnet::colourspace::{rgb_to_lab, split_lab, AbChannels, RgbImage};
use ucapsnet::evaluation::{
    colourise, compose_gallery, evaluate, evaluate_samples, gray_baseline, psnr_ab, EvalReport, EvalRow,
    GalleryEntry, GALLERY_GUTTER, PSNR_CAP_DB,
};
use ucapsnet::gamut::DecodeMethod;
use ucapsnet::training::{DatasetManifest, FitOptions, Trainer};

// scikit-image Lab of the pinned image below, scored with the same
// normalisation by a separate script
const GRAY_PSNR_ORACLE: f64 = 16.850258602665786;
const OFFSET_PSNR_ORACLE: f64 = 16.314773438854722;
const ORACLE_TOL_DB: f64 = 2e-3;

fn pinned() -> RgbImage {
    RgbImage::from_fn(8, 8, |x, y| [(x * 30) as u8, (y * 30) as u8, ((x * y * 7) % 256) as u8])
}

#[test]
fn psnr_matches_oracle() {
    let (_, gt) = split_lab(&rgb_to_lab(&pinned()));
    let gray = psnr_ab(&AbChannels::zeros(8, 8), &gt).unwrap();
    assert!((gray - GRAY_PSNR_ORACLE).abs() < ORACLE_TOL_DB, "{gray}");
    let mut offset = AbChannels::zeros(8, 8);
    offset.0.index_axis_mut(ndarray::Axis(0), 0).fill(10.0);
    offset.0.index_axis_mut(ndarray::Axis(0), 1).fill(-5.0);
    let p = psnr_ab(&offset, &gt).unwrap();
    assert!((p - OFFSET_PSNR_ORACLE).abs() < ORACLE_TOL_DB, "{p}");

    // scalar loop over the same definition
    let mut se = 0.0f64;
    for k in 0..2 {
        for y in 0..8 {
            for x in 0..8 {
                se += (gt.0[[k, y, x]] as f64 / 256.0).powi(2);
            }
        }
    }
    assert!((gray - 10.0 * (128.0 / se).log10()).abs() < 1e-9);
    assert_eq!(psnr_ab(&gt, &gt).unwrap(), PSNR_CAP_DB);
    assert!(psnr_ab(&AbChannels::zeros(4, 4), &gt).is_err());
}

#[test]
fn gray_baseline_matches_psnr_of_zeros() {
    let samples = toy_samples(3, 32);
    let report = gray_baseline(&samples).unwrap();
    for (row, s) in report.rows.iter().zip(&samples) {
        let want = psnr_ab(&AbChannels::zeros(s.ab.height(), s.ab.width()), &s.ab).unwrap();
        assert_eq!(row.psnr_db, want);
    }
}

#[test]
fn evaluate_from_checkpoint_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = write_toy_set(dir.path(), 3, 40);
    std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    let mut listing = std::fs::read_to_string(&manifest_path).unwrap();
    listing.push_str("broken.png\n");
    std::fs::write(&manifest_path, listing).unwrap();

    let mut t = Trainer::new(small_config(""), palette()).unwrap();
    let manifest = DatasetManifest::load(&manifest_path).unwrap();
    let (samples, skipped) = manifest.load_samples(32);
    assert_eq!((samples.len(), skipped.len()), (3, 1));
    t.fit(&samples, &FitOptions { max_steps: Some(1), ..FitOptions::default() }).unwrap();

    let report = evaluate(&t.to_checkpoint(), &manifest, None).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.psnr_db.is_finite()));
    assert!(report.config.iter().any(|(k, v)| k == "input_side" && v == "32"));
    let direct = evaluate_samples(&mut t.generator, &t.palette, DecodeMethod::Mode, &samples).unwrap();
    assert_eq!(direct.rows, report.rows);
}

#[test]
fn colourise_keeps_input_dimensions() {
    let mut t = Trainer::new(small_config(""), palette()).unwrap();
    let img = toy_image(5, 50);
    let img = RgbImage::from_fn(50, 37, |x, y| img.pixel(x, y));
    for method in [DecodeMethod::Mode, DecodeMethod::AnnealedMean { temperature: 0.38 }] {
        let out = colourise(&mut t.generator, &t.palette, method, &img).unwrap();
        assert_eq!((out.width(), out.height()), (50, 37));
    }
}

#[test]
fn gallery_layout() {
    let entries: Vec<GalleryEntry> = (0..3)
        .map(|i| GalleryEntry {
            original: toy_image(i, 20),
            predicted_ab: AbChannels::zeros(5, 5),
        })
        .collect();
    let tile = 16;
    let g = GALLERY_GUTTER;
    let img = compose_gallery(&entries, tile).unwrap();
    assert_eq!(img.width(), 3 * tile + 4 * g);
    assert_eq!(img.height(), 3 * tile + 4 * g);
    for y in 0..img.height() {
        assert_eq!(img.pixel(0, y), [255, 255, 255]);
        assert_eq!(img.pixel(g + tile, y), [255, 255, 255]);
    }
    // with zero predicted chroma the first two columns agree
    for y in 0..tile {
        for x in 0..tile {
            assert_eq!(img.pixel(g + x, g + y), img.pixel(2 * g + tile + x, g + y));
        }
    }
    assert!(compose_gallery(&[], tile).is_err());
}

#[test]
fn empty_report_round_trips() {
    let mut buf = Vec::new();
    EvalReport::default().write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.contains("# mean=undefined"));
    assert_eq!(EvalReport::read_csv(buf.as_slice()).unwrap(), EvalReport::default());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn report_round_trips(
        rows in prop::collection::vec(("[^\u{0}]{0,12}", -50.0f64..150.0), 0..6),
        config in prop::collection::vec(("[a-z_]{1,8}", "[a-z0-9.]{0,6}"), 0..3),
    ) {
        let report = EvalReport {
            rows: rows.into_iter().map(|(path, psnr_db)| EvalRow { path, psnr_db }).collect(),
            config,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        prop_assert_eq!(EvalReport::read_csv(buf.as_slice()).unwrap(), report);
    }
}
