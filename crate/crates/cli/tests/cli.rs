use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layoutcrop::heatmaps::{save_heatmap, write_annotations};
use layoutcrop::{AnnotationRecord, CropBox, Dims, Heatmap};
use serde_json::Value;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layoutcrop")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 64x48 heatmap with a bright blob on the left.
fn blob_heatmap(dir: &Path, name: &str) -> PathBuf {
    let h = Heatmap::from_fn(Dims::new(64, 48).unwrap(), |x, y| {
        if (4..24).contains(&x) && (8..32).contains(&y) { 0.9 } else { 0.1 }
    })
    .unwrap();
    let path = dir.join(name);
    save_heatmap(&h, &path).unwrap();
    path
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn crop_args<'a>(heatmap: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["crop", "--heatmap", heatmap, "--aspect", "4:3", "--layout", "44,30,14,10", "--iterations", "300", "--step-granularity", "1"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn crop_covers_layout_far_from_heat() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["h.csv", "h.png"] {
        let hm = blob_heatmap(dir.path(), name);
        let r = json(&cli(&crop_args(s(&hm), &[])));
        assert_eq!(r["recall"], 1.0);
        assert_eq!(r["satisfies_aspect"], true);
        assert_eq!(r["evaluated"], 300);
        let b: CropBox = serde_json::from_value(r["box"].clone()).unwrap();
        assert!(b.fits(Dims::new(64, 48).unwrap()));
    }
}

#[test]
fn proposal_method_and_output_files() {
    let dir = tempfile::tempdir().unwrap();
    let hm = blob_heatmap(dir.path(), "h.csv");
    let out = dir.path().join("resp.json");
    let overlay = dir.path().join("o.png");
    let trace = dir.path().join("t.jsonl");
    let args = ["crop", "--heatmap", s(&hm), "--width", "640", "--height", "480", "--aspect", "1", "--method", "proposal",
        "--out", s(&out), "--overlay", s(&overlay)];
    assert!(cli(&args).status.success());
    let r: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(r["method"], "proposal");
    assert!(r["evaluated"].as_u64().unwrap() > 0);
    let img = image::open(&overlay).unwrap();
    assert_eq!((img.width(), img.height()), (640, 480));

    assert!(cli(&crop_args(s(&hm), &["--trace", s(&trace)])).status.success());
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 300);
}

#[test]
fn crop_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let hm = blob_heatmap(dir.path(), "h.csv");
    let run = || {
        let mut r = json(&cli(&crop_args(s(&hm), &["--seed", "9", "--strategy", "tpe-lite"])));
        r.as_object_mut().unwrap().remove("elapsed_s");
        r
    };
    assert_eq!(run(), run());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let hm = blob_heatmap(dir.path(), "h.csv");
    let code = |args: &[&str]| cli(args).status.code();
    // no k-scaled window fits a 64x48 frame
    assert_eq!(code(&["crop", "--heatmap", s(&hm), "--aspect", "1", "--method", "proposal"]), Some(3));
    assert_eq!(code(&["crop", "--heatmap", s(&hm), "--aspect", "wide"]), Some(2));
    assert_eq!(code(&["crop", "--heatmap", s(&hm), "--aspect", "1", "--layout", "60,40,10,10"]), Some(2));
    assert_eq!(code(&["crop", "--heatmap", s(&hm), "--aspect", "1", "--iterations", "0"]), Some(2));
    assert_eq!(code(&["crop", "--aspect", "1"]), Some(2));
    assert_eq!(code(&["crop", "--heatmap", s(&dir.path().join("missing.png")), "--aspect", "1"]), Some(4));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "not a heatmap").unwrap();
    assert_eq!(code(&["crop", "--heatmap", s(&bad), "--aspect", "1"]), Some(2));
}

#[test]
fn dataset_bench_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<AnnotationRecord> = (0..4)
        .map(|i| AnnotationRecord {
            image_id: format!("im{i}"),
            width: 80 + 10 * i,
            height: 60,
            gt_boxes: vec![CropBox::new(0, 0, 40 + 5 * i, 60).unwrap(), CropBox::new(10, 0, 60, 30).unwrap()],
        })
        .collect();
    let ann = dir.path().join("ann.jsonl");
    write_annotations(&records, std::fs::File::create(&ann).unwrap()).unwrap();
    let bench = dir.path().join("bench.jsonl");
    let out = cli(&["dataset", "--annotations", s(&ann), "--out", s(&bench)]);
    assert!(out.status.success());
    let tuples = std::fs::read_to_string(&bench).unwrap().lines().count();
    assert!(tuples > 0);

    let csv = dir.path().join("oracle.csv");
    let out = cli(&["bench", "--benchmark", s(&bench), "--method", "oracle", "--out", s(&csv)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean_iou=1"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("id,iou,recall,elapsed_s"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), tuples + 1);

    let sweep = dir.path().join("sweep.csv");
    let out = cli(&[
        "sweep", "--benchmark", s(&bench), "--method", "heatmap", "--annotations", s(&ann), "--param", "iterations",
        "--values", "10,100,500", "--out", s(&sweep),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<String> = std::fs::read_to_string(&sweep).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("iterations,"));
    assert!(rows[3].starts_with("500,"));
    assert_eq!(cli(&["sweep", "--benchmark", s(&bench), "--method", "heatmap", "--param", "iterations", "--values", "10"]).status.code(), Some(2));
}

#[test]
fn heatmap_command() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::RgbImage::from_fn(80, 60, |x, y| {
        if (30..50).contains(&x) && (20..40).contains(&y) { image::Rgb([250, 250, 250]) } else { image::Rgb([90, 90, 90]) }
    });
    let path = dir.path().join("img.png");
    img.save(&path).unwrap();
    let out = dir.path().join("sal.png");
    assert!(cli(&["heatmap", "--image", s(&path), "--max-side", "32", "--out", s(&out)]).status.success());
    let sal = image::open(&out).unwrap().to_luma8();
    assert_eq!(sal.width(), 32);
    assert!(sal.height() <= 32);
    // the bright patch stands out from the flat background
    let patch: u32 = (11..21).flat_map(|x| (7..17).map(move |y| (x, y))).map(|(x, y)| sal.get_pixel(x, y)[0] as u32).sum();
    assert!(patch / 100 > sal.get_pixel(1, 1)[0] as u32);
    assert_eq!(sal.get_pixel(1, 1)[0], 0);

    let ann = dir.path().join("ann.jsonl");
    let rec = AnnotationRecord { image_id: "a".into(), width: 40, height: 30, gt_boxes: vec![CropBox::new(5, 5, 20, 10).unwrap()] };
    write_annotations(&[rec], std::fs::File::create(&ann).unwrap()).unwrap();
    let pseudo = dir.path().join("p.csv");
    let args = ["heatmap", "--annotations", s(&ann), "--id", "a", "--pseudo-res", "native", "--out", s(&pseudo)];
    assert!(cli(&args).status.success());
    assert!(std::fs::read_to_string(&pseudo).unwrap().starts_with("30 40"));
    assert_eq!(cli(&["heatmap", "--annotations", s(&ann), "--id", "zzz", "--out", s(&pseudo)]).status.code(), Some(2));
}
