//! Heatmap sources: files, annotation averages, a luminance saliency
//! heuristic and seeded synthetic fixtures.

use std::fs;
use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{scale_box, CropBox, Dims};
use crate::scoring::{resample_area, Heatmap, IntegralImage, ScoringError};

/// Default grid for pseudo-heatmaps.
pub const DEFAULT_HEATMAP_DIMS: Dims = Dims { width: 64, height: 64 };

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("unsupported heatmap format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt heatmap file: {0}")]
    CorruptFile(String),
    #[error("invalid annotation: {0}")]
    BadAnnotation(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Expert crop boxes for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub gt_boxes: Vec<CropBox>,
}

impl AnnotationRecord {
    pub fn dims(&self) -> Dims {
        Dims { width: self.width, height: self.height }
    }

    pub fn validate(&self) -> Result<(), HeatmapError> {
        let dims = Dims::new(self.width, self.height)
            .map_err(|e| HeatmapError::BadAnnotation(format!("{}: {e}", self.image_id)))?;
        if self.gt_boxes.is_empty() {
            return Err(HeatmapError::BadAnnotation(format!("{}: no boxes", self.image_id)));
        }
        if let Some(b) = self.gt_boxes.iter().find(|b| !b.fits(dims)) {
            return Err(HeatmapError::BadAnnotation(format!("{}: box {b} outside {dims}", self.image_id)));
        }
        Ok(())
    }
}

/// Reads annotation JSONL, validating every record. Blank lines are skipped.
pub fn read_annotations<R: Read>(input: R) -> Result<Vec<AnnotationRecord>, HeatmapError> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| HeatmapError::BadAnnotation(format!("line {}: {e}", n + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_annotations<W: Write>(records: &[AnnotationRecord], mut out: W) -> Result<(), HeatmapError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// 8-bit image, grayscale or RGB, row-major interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub dims: Dims,
    pub channels: u8,
    pub values: Vec<u8>,
}

impl PixelImage {
    pub fn new(dims: Dims, channels: u8, values: Vec<u8>) -> Result<Self, HeatmapError> {
        if channels != 1 && channels != 3 {
            return Err(HeatmapError::CorruptFile(format!("unsupported channel count {channels}")));
        }
        if values.len() != dims.area() as usize * channels as usize {
            return Err(HeatmapError::CorruptFile(format!(
                "{} bytes for a {dims}x{channels} image",
                values.len()
            )));
        }
        Ok(Self { dims, channels, values })
    }

    pub fn from_dynamic(img: DynamicImage) -> Self {
        let dims = Dims { width: img.width().max(1), height: img.height().max(1) };
        match img {
            DynamicImage::ImageLuma8(g) => Self { dims, channels: 1, values: g.into_raw() },
            other => Self { dims, channels: 3, values: other.to_rgb8().into_raw() },
        }
    }

    pub fn open(path: &Path) -> Result<Self, HeatmapError> {
        let img = image::open(path).map_err(|e| image_error(path.display().to_string(), e))?;
        Ok(Self::from_dynamic(img))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, HeatmapError> {
        let img = image::load_from_memory(bytes).map_err(|e| image_error("<memory>".into(), e))?;
        Ok(Self::from_dynamic(img))
    }

    /// Rec. 601 luma in `[0, 1]`.
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            1 => self.values.iter().map(|&v| v as f64 / 255.0).collect(),
            _ => self
                .values
                .chunks_exact(3)
                .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
                .collect(),
        }
    }
}

fn image_error(what: String, e: image::ImageError) -> HeatmapError {
    match e {
        image::ImageError::Unsupported(u) => HeatmapError::UnsupportedFormat(format!("{what}: {u}")),
        image::ImageError::IoError(io) => HeatmapError::Io(io),
        other => HeatmapError::CorruptFile(format!("{what}: {other}")),
    }
}

fn gray_to_heatmap(g: &GrayImage) -> Result<Heatmap, HeatmapError> {
    let dims = Dims::new(g.width(), g.height()).map_err(|e| HeatmapError::CorruptFile(e.to_string()))?;
    Ok(Heatmap::new(dims, g.as_raw().iter().map(|&v| v as f64 / 255.0).collect())?)
}

/// Decodes an 8-bit PNG or PNM heatmap from memory (`v / 255`).
pub fn decode_heatmap_image(bytes: &[u8]) -> Result<Heatmap, HeatmapError> {
    let img = image::load_from_memory(bytes).map_err(|e| image_error("<memory>".into(), e))?;
    gray_to_heatmap(&img.to_luma8())
}

/// Parses the text grid format: a `H W` header line followed by `H` rows of
/// `W` comma-separated reals.
pub fn parse_heatmap_csv(text: &str) -> Result<Heatmap, HeatmapError> {
    let corrupt = |m: String| HeatmapError::CorruptFile(m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| corrupt("empty file".into()))?;
    let mut parts = header.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
    let mut dim = || -> Result<u32, HeatmapError> {
        parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(format!("bad header {header:?}")))
    };
    let (h, w) = (dim()?, dim()?);
    let dims = Dims::new(w, h).map_err(|e| corrupt(e.to_string()))?;
    let mut values = Vec::with_capacity(dims.area() as usize);
    for (row, line) in lines.enumerate() {
        let before = values.len();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| corrupt(format!("row {row}: bad value {cell:?}")))?;
            values.push(v);
        }
        if values.len() - before != w as usize {
            return Err(corrupt(format!("row {row} has {} values, expected {w}", values.len() - before)));
        }
    }
    if values.len() != dims.area() as usize {
        return Err(corrupt(format!("expected {h} rows")));
    }
    Heatmap::new(dims, values).map_err(|e| corrupt(e.to_string()))
}

pub fn format_heatmap_csv(h: &Heatmap) -> String {
    let Dims { width, height } = h.dims();
    let mut s = format!("{height} {width}\n");
    for row in h.values().chunks(width as usize) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Loads a heatmap from `.png`, `.pgm`/`.pnm` or `.csv`/`.txt`.
pub fn load_heatmap(path: &Path) -> Result<Heatmap, HeatmapError> {
    match extension(path).as_str() {
        "csv" | "txt" => parse_heatmap_csv(&fs::read_to_string(path)?),
        "png" | "pgm" | "pnm" => {
            let bytes = fs::read(path)?;
            decode_heatmap_image(&bytes)
        }
        other => Err(HeatmapError::UnsupportedFormat(format!("{}: extension {other:?}", path.display()))),
    }
}

pub fn heatmap_to_gray(h: &Heatmap) -> GrayImage {
    let Dims { width, height } = h.dims();
    GrayImage::from_fn(width, height, |x, y| Luma([(h.get(x, y) * 255.0).round().clamp(0.0, 255.0) as u8]))
}

pub fn encode_heatmap_png(h: &Heatmap) -> Result<Vec<u8>, HeatmapError> {
    let mut buf = Cursor::new(Vec::new());
    heatmap_to_gray(h)
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| image_error("png".into(), e))?;
    Ok(buf.into_inner())
}

/// Writes a heatmap in the format implied by the extension.
pub fn save_heatmap(h: &Heatmap, path: &Path) -> Result<(), HeatmapError> {
    match extension(path).as_str() {
        "csv" | "txt" => fs::write(path, format_heatmap_csv(h))?,
        "png" => fs::write(path, encode_heatmap_png(h)?)?,
        "pgm" | "pnm" => heatmap_to_gray(h)
            .save_with_format(path, ImageFormat::Pnm)
            .map_err(|e| image_error(path.display().to_string(), e))?,
        other => return Err(HeatmapError::UnsupportedFormat(format!("{}: extension {other:?}", path.display()))),
    }
    Ok(())
}

/// Averages the indicator masks of the annotated boxes on `out_dims`.
pub fn pseudo_heatmap(record: &AnnotationRecord, out_dims: Dims) -> Result<Heatmap, HeatmapError> {
    record.validate()?;
    let n = record.gt_boxes.len();
    let mut counts = vec![0u32; out_dims.area() as usize];
    let w = out_dims.width as usize;
    for b in &record.gt_boxes {
        let s = scale_box(b, record.dims(), out_dims);
        for y in s.y as usize..s.bottom() as usize {
            for c in &mut counts[y * w + s.x as usize..y * w + s.right() as usize] {
                *c += 1;
            }
        }
    }
    Ok(Heatmap::new(out_dims, counts.into_iter().map(|c| c as f64 / n as f64).collect())?)
}

fn box_blur(ii: &IntegralImage, radius: u32) -> Vec<f64> {
    let Dims { width, height } = ii.dims();
    let mut out = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        for x in 0..width {
            let x0 = x.saturating_sub(radius);
            let y0 = y.saturating_sub(radius);
            let x1 = (x + radius + 1).min(width);
            let y1 = (y + radius + 1).min(height);
            let b = CropBox { x: x0, y: y0, width: x1 - x0, height: y1 - y0 };
            let s = ii.region_sum(&b).expect("window clamped to grid");
            out.push(s / b.area() as f64);
        }
    }
    out
}

/// Center-surround luminance contrast.
///
/// The luminance is area-resampled to `out_dims`, box-filtered at a small
/// and a large radius, and the absolute difference is normalized to a
/// maximum of 1. Constant images give an all-zero map.
pub fn heuristic_saliency(img: &PixelImage, out_dims: Dims) -> Heatmap {
    let lum = resample_area(&img.luminance(), img.dims, out_dims);
    let ii = IntegralImage::from_grid(out_dims, &lum);
    let short = out_dims.width.min(out_dims.height);
    let center = box_blur(&ii, (short / 32).max(1));
    let surround = box_blur(&ii, (short / 8).max(2));
    let diff: Vec<f64> = center.iter().zip(&surround).map(|(c, s)| (c - s).abs()).collect();
    let max = diff.iter().cloned().fold(0.0, f64::max);
    let values = if max <= 1e-12 {
        vec![0.0; diff.len()]
    } else {
        diff.into_iter().map(|v| (v / max).clamp(0.0, 1.0)).collect()
    };
    Heatmap::new(out_dims, values).expect("normalized values")
}

/// Indicator of `planted` with bounded uniform noise: cells inside draw from
/// `[1 - noise_amp, 1]`, cells outside from `[0, noise_amp]`.
pub fn synth_planted(dims: Dims, planted: CropBox, noise_amp: f64, seed: u64) -> Result<Heatmap, HeatmapError> {
    if !planted.fits(dims) {
        return Err(HeatmapError::BadAnnotation(format!("planted box {planted} outside {dims}")));
    }
    if !(0.0..=0.5).contains(&noise_amp) {
        return Err(HeatmapError::BadAnnotation(format!("noise amplitude {noise_amp} outside [0, 0.5]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heatmap = Heatmap::from_fn(dims, |x, y| {
        let inside = x >= planted.x && (x as u64) < planted.right() && y >= planted.y && (y as u64) < planted.bottom();
        let noise = if noise_amp > 0.0 { rng.random::<f64>() * noise_amp } else { 0.0 };
        if inside { 1.0 - noise } else { noise }
    })?;
    Ok(heatmap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(w: u32, h: u32) -> Dims {
        Dims::new(w, h).unwrap()
    }

    fn b(x: u32, y: u32, w: u32, h: u32) -> CropBox {
        CropBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn csv_round_trip_and_example() {
        let h = parse_heatmap_csv("2 2\n0.5,0.25\n0.0,1.0\n").unwrap();
        assert_eq!(h.values(), &[0.5, 0.25, 0.0, 1.0]);
        let back = parse_heatmap_csv(&format_heatmap_csv(&h)).unwrap();
        assert_eq!(back, h);
        assert!(parse_heatmap_csv("2 2\n0.5,0.25\n").is_err());
        assert!(parse_heatmap_csv("1 2\n0.5,1.5\n").is_err());
        assert!(parse_heatmap_csv("x y\n").is_err());
        assert!(parse_heatmap_csv("").is_err());
    }

    #[test]
    fn image_files() {
        let dir = tempfile::tempdir().unwrap();
        let ones = Heatmap::filled(d(5, 3), 1.0).unwrap();
        let p = dir.path().join("ones.pgm");
        save_heatmap(&ones, &p).unwrap();
        assert_eq!(load_heatmap(&p).unwrap(), ones);

        let mid = GrayImage::from_pixel(2, 2, Luma([128]));
        let p = dir.path().join("mid.png");
        mid.save(&p).unwrap();
        let h = load_heatmap(&p).unwrap();
        assert!((h.get(1, 1) - 128.0 / 255.0).abs() < 1e-12);

        let p = dir.path().join("h.bmp");
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(load_heatmap(&p), Err(HeatmapError::UnsupportedFormat(_))));
        let p = dir.path().join("bad.png");
        fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_heatmap(&p), Err(HeatmapError::CorruptFile(_) | HeatmapError::UnsupportedFormat(_))));
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let h = Heatmap::from_fn(d(9, 7), |x, y| ((x * 7 + y * 3) % 10) as f64 / 9.0).unwrap();
        for ext in ["png", "pgm", "csv"] {
            let p = dir.path().join(format!("h.{ext}"));
            save_heatmap(&h, &p).unwrap();
            let back = load_heatmap(&p).unwrap();
            let tol = if ext == "csv" { 0.0 } else { 1.0 / 255.0 };
            for (a, b) in h.values().iter().zip(back.values()) {
                assert!((a - b).abs() <= tol, "{ext}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pseudo_heatmap_counts() {
        let rec = AnnotationRecord { image_id: "a".into(), width: 4, height: 4, gt_boxes: vec![b(0, 0, 2, 2), b(1, 1, 2, 2)] };
        let h = pseudo_heatmap(&rec, d(4, 4)).unwrap();
        assert_eq!(h.get(1, 1), 1.0);
        assert_eq!(h.get(0, 0), 0.5);
        assert_eq!(h.get(2, 2), 0.5);
        assert_eq!(h.get(3, 3), 0.0);
        let one = AnnotationRecord { gt_boxes: vec![b(1, 0, 2, 3)], ..rec.clone() };
        let h = pseudo_heatmap(&one, d(4, 4)).unwrap();
        let same = AnnotationRecord { gt_boxes: vec![b(1, 0, 2, 3); 5], ..rec };
        assert_eq!(pseudo_heatmap(&same, d(4, 4)).unwrap(), h);
        assert_eq!(h.values().iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn saliency_properties() {
        let flat = PixelImage::new(d(40, 30), 3, vec![90; 40 * 30 * 3]).unwrap();
        let s = heuristic_saliency(&flat, d(16, 16));
        assert_eq!(s.dims(), d(16, 16));
        assert!(s.values().iter().all(|&v| v == 0.0));

        let mut px = vec![0u8; 64 * 64];
        for y in 27..37 {
            for x in 27..37 {
                px[y * 64 + x] = 255;
            }
        }
        let img = PixelImage::new(d(64, 64), 1, px).unwrap();
        let s = heuristic_saliency(&img, d(64, 64));
        let max = s.values().iter().cloned().fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        let inside = (27..37).flat_map(|y| (27..37).map(move |x| (x, y))).map(|(x, y)| s.get(x, y)).sum::<f64>() / 100.0;
        let corner = s.get(2, 2);
        assert!(inside > corner, "{inside} vs {corner}");
        assert_eq!(heuristic_saliency(&img, d(64, 64)), s);
    }

    #[test]
    fn planted_fixture() {
        let dims = d(20, 10);
        let p = b(3, 2, 8, 5);
        let exact = synth_planted(dims, p, 0.0, 1).unwrap();
        assert_eq!(exact.values().iter().sum::<f64>(), 40.0);
        let a = synth_planted(dims, p, 0.1, 1).unwrap();
        let c = synth_planted(dims, p, 0.1, 2).unwrap();
        assert_ne!(a, c);
        assert_eq!(a, synth_planted(dims, p, 0.1, 1).unwrap());
        for (i, (va, vc)) in a.values().iter().zip(c.values()).enumerate() {
            assert_eq!(*va >= 0.5, *vc >= 0.5, "cell {i}");
        }
        assert!(synth_planted(dims, p, 0.6, 1).is_err());
        assert!(synth_planted(dims, b(15, 0, 8, 5), 0.1, 1).is_err());
    }

    #[test]
    fn annotation_jsonl() {
        let text = r#"{"image_id":"img1","width":100,"height":80,"gt_boxes":[{"x":0,"y":0,"w":50,"h":40}]}

{"image_id":"img2","width":10,"height":10,"gt_boxes":[{"x":1,"y":1,"w":2,"h":2},{"x":0,"y":0,"w":10,"h":10}]}
"#;
        let recs = read_annotations(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        let mut out = Vec::new();
        write_annotations(&recs, &mut out).unwrap();
        assert_eq!(read_annotations(out.as_slice()).unwrap(), recs);
        let bad = r#"{"image_id":"x","width":10,"height":10,"gt_boxes":[{"x":5,"y":5,"w":10,"h":2}]}"#;
        assert!(read_annotations(bad.as_bytes()).is_err());
        let empty = r#"{"image_id":"x","width":10,"height":10,"gt_boxes":[]}"#;
        assert!(read_annotations(empty.as_bytes()).is_err());
    }
}
