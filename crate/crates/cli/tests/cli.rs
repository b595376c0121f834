use std::path::Path;
use std::process::{Command, Output};

use ucapsnet::colourspace::RgbImage;

fn ucapsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucapsnet"))
        .args(args)
        .env("UCAPS_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn image(seed: usize, w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let inside = (x as i64 - 12).pow(2) + (y as i64 - 10).pow(2) < 64;
        if inside {
            [200, (seed * 40 % 256) as u8, 30]
        } else {
            [20, 90, (seed * 70 % 256) as u8]
        }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn palette_export_has_313_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("palette.csv");
    let o = ucapsnet(&["palette", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("index,a_center,b_center"));
    assert_eq!(text.lines().count(), 314);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(ucapsnet(&["colourise", "--in", "x.png"]).status.code(), Some(1));
    assert_eq!(ucapsnet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ucapsnet(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "sede=3\n").unwrap();
    let o = ucapsnet(&["--config", s(&cfg), "palette", "--out", s(&dir.path().join("p.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("valid keys"));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("missing.ucap");
    let o = ucapsnet(&["inspect", "--ckpt", s(&bogus)]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&bogus, b"UCAPjunk").unwrap();
    assert_eq!(ucapsnet(&["inspect", "--ckpt", s(&bogus)]).status.code(), Some(2));
}

#[test]
fn train_then_use_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut listing = String::new();
    for i in 0..3 {
        let name = format!("img{i}.png");
        image(i, 40, 40).save(&root.join(&name)).unwrap();
        listing.push_str(&name);
        listing.push('\n');
    }
    let manifest = root.join("train.txt");
    std::fs::write(&manifest, listing).unwrap();
    let cfg = root.join("small.cfg");
    std::fs::write(&cfg, "# tiny model\ninput_side=32\nbase_channels=2\nd_widths=2,4,6,8\n").unwrap();

    let run = root.join("run");
    let o = ucapsnet(&[
        "--config", s(&cfg), "--variant", "q", "--seed", "7", "--batch", "2", "--deterministic",
        "train", "--manifest", s(&manifest), "--out", s(&run), "--max-steps", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed=7"));
    let ckpt = run.join("final.ucap");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let o = ucapsnet(&["train", "--manifest", s(&manifest), "--out", s(&run), "--ckpt", s(&ckpt), "--max-steps", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 4);

    let photo = root.join("photo.png");
    image(9, 50, 37).save(&photo).unwrap();
    let coloured = root.join("coloured.png");
    let o = ucapsnet(&["colourise", "--ckpt", s(&ckpt), "--in", s(&photo), "--out", s(&coloured)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = RgbImage::load(&coloured).unwrap();
    assert_eq!((out.width(), out.height()), (50, 37));

    let folder_out = root.join("batch");
    let o = ucapsnet(&[
        "colourise", "--ckpt", s(&ckpt), "--in", s(root), "--out", s(&folder_out), "--decode", "annealed_mean",
        "--temperature", "0.38",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&folder_out).unwrap().count(), 5);

    let report = root.join("report.csv");
    let o = ucapsnet(&["evaluate", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().next(), Some("path,psnr_db"));
    assert!(text.contains("# count=3"));
    assert!(text.contains("# config seed=7"));

    let gallery = root.join("gallery.png");
    let o = ucapsnet(&["gallery", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out", s(&gallery), "--limit", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let g = RgbImage::load(&gallery).unwrap();
    assert_eq!((g.width(), g.height()), (3 * 32 + 16, 2 * 32 + 12));

    let o = ucapsnet(&["inspect", "--ckpt", s(&ckpt)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("state.step=3"));
    assert!(text.contains("palette.centers"));
    assert!(text.contains("caps_down"));
}
