//! Annotation files, image I/O and the synthetic toy dataset.
//!
//! Annotations are JSON lines, one image per line:
//!
//! ```text
//! {"image": "img_000.png", "boxes": [[12.0, 8.0, 40.0, 88.0]]}
//! ```
//!
//! Image paths are resolved relative to the annotation file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::Scene;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: PathBuf,
    pub boxes: Vec<[f64; 4]>,
}

impl AnnotationRecord {
    pub fn bboxes(&self) -> Result<Vec<BBox>> {
        self.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect()
    }
}

/// An annotated image together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub scene: Scene,
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::data(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Loads every record, checking that images exist and boxes are valid and
/// inside their image. All offending records are reported together.
pub fn load_dataset(annotations: &Path) -> Result<Vec<Sample>> {
    let records = read_annotations(annotations)?;
    if records.is_empty() {
        return Err(Error::data(format!("{} lists no images", annotations.display())));
    }
    let root = annotations.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(records.len());
    let mut problems = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let path = root.join(&rec.image);
        let loaded = load_image(&path).and_then(|image| {
            let boxes = rec.bboxes()?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            if let Some(b) = boxes.iter().find(|b| !b.inside(w, h)) {
                return Err(Error::invalid(format!("box {b:?} outside {w}x{h} image")));
            }
            Ok(Scene { image, boxes })
        });
        match loaded {
            Ok(scene) => samples.push(Sample { path, scene }),
            Err(e) => problems.push(format!("record {} ({}): {e}", i + 1, rec.image.display())),
        }
    }
    if !problems.is_empty() {
        return Err(Error::data(problems.join("; ")));
    }
    Ok(samples)
}

/// Reads an image as `(3, H, W)` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("rgb shape")
}

/// Quantizes a `(3, H, W)` tensor to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::shape(format!("image must be (3, H, W), got {:?}", t.shape())));
    };
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    }))
}

/// Writes a lossless PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Converts INRIA-style PASCAL annotation files into records.
///
/// Each `.txt` file names its image on an `Image filename : "..."` line and
/// lists boxes as `... (Xmin, Ymin) - (Xmax, Ymax) : (x1, y1) - (x2, y2)`.
/// Image paths are kept as written, relative to the dataset root.
pub fn import_inria(annotation_dir: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut files: Vec<PathBuf> = fs::read_dir(annotation_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file)?;
        out.push(parse_inria(&text).map_err(|e| Error::data(format!("{}: {e}", file.display())))?);
    }
    Ok(out)
}

pub fn parse_inria(text: &str) -> Result<AnnotationRecord> {
    let mut image = None;
    let mut boxes = Vec::new();
    for line in text.lines() {
        if line.starts_with("Image filename") {
            let name = line.split('"').nth(1).ok_or_else(|| Error::data("unquoted image filename"))?;
            image = Some(PathBuf::from(name));
        } else if line.starts_with("Bounding box for object") {
            let coords = line.rsplit(':').next().unwrap_or("");
            let nums: Vec<f64> = coords
                .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
                .filter(|s| !s.is_empty() && *s != "-")
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::data(format!("bad box line `{line}`")))?;
            let [x1, y1, x2, y2] = nums[..] else {
                return Err(Error::data(format!("bad box line `{line}`")));
            };
            BBox::new(x1, y1, x2, y2)?;
            boxes.push([x1, y1, x2, y2]);
        }
    }
    let image = image.ok_or_else(|| Error::data("missing `Image filename` line"))?;
    Ok(AnnotationRecord { image, boxes })
}

/// Clothing colour of the synthetic pedestrians; the default analytic
/// detector is tuned to it.
pub const TOY_SHIRT: [f64; 3] = [0.06, 0.06, 0.06];

/// Deterministic synthetic street scenes with one or two pedestrians each.
pub fn toy_scenes(count: usize, size: usize, seed: u64) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| toy_scene(&mut rng, size, 1 + i % 2)).collect()
}

fn toy_scene(rng: &mut ChaCha8Rng, size: usize, people: usize) -> Scene {
    let hw = size * size;
    let mut data = vec![0.0; 3 * hw];
    let sky = [rng.random_range(0.5..0.8), rng.random_range(0.6..0.85), rng.random_range(0.7..0.95)];
    let ground = [rng.random_range(0.3..0.5), rng.random_range(0.45..0.65), rng.random_range(0.25..0.4)];
    let horizon = size as f64 * rng.random_range(0.35..0.5);
    for y in 0..size {
        for x in 0..size {
            let base = if (y as f64) < horizon { sky } else { ground };
            for c in 0..3 {
                let jitter: f64 = rng.random_range(-0.03..0.03);
                data[c * hw + y * size + x] = (base[c] + jitter + 0.1 * (x as f64 / size as f64 - 0.5)).clamp(0.0, 1.0);
            }
        }
    }
    let mut boxes = Vec::new();
    let slot = size / people;
    for p in 0..people {
        let bh = (size as f64 * rng.random_range(0.6..0.75)).round();
        let bw = (bh * rng.random_range(0.38..0.45)).round();
        let lo = (p * slot) as f64 + 2.0;
        let hi = ((p + 1) * slot) as f64 - bw - 2.0;
        let x1 = if hi > lo { rng.random_range(lo..hi).round() } else { lo };
        let y1 = (size as f64 - bh - rng.random_range(2.0..8.0)).round().max(0.0);
        let b = BBox::new(x1, y1, x1 + bw, y1 + bh).expect("toy box");
        draw_person(&mut data, size, &b, rng);
        boxes.push(b);
    }
    Scene {
        image: Tensor::new(vec![3, size, size], data).expect("toy image"),
        boxes,
    }
}

fn draw_person(data: &mut [f64], size: usize, b: &BBox, rng: &mut ChaCha8Rng) {
    let hw = size * size;
    let (cx, _) = b.center();
    let skin = [0.85, 0.65, 0.5];
    let trousers = [0.2, 0.25, 0.45];
    let head_r = b.height() * 0.09;
    let head_c = b.y1 + head_r;
    let torso = (b.y1 + 2.0 * head_r, b.y1 + b.height() * 0.62);
    for y in b.y1 as usize..b.y2 as usize {
        for x in b.x1 as usize..b.x2 as usize {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let colour = if (fx - cx).powi(2) + (fy - head_c).powi(2) <= head_r * head_r {
                Some(skin)
            } else if fy >= torso.0 && fy < torso.1 {
                Some(TOY_SHIRT)
            } else if fy >= torso.1 && (fx - cx).abs() > b.width() * 0.06 && (fx - cx).abs() < b.width() * 0.36 {
                Some(trousers)
            } else {
                None
            };
            if let Some(col) = colour {
                for c in 0..3 {
                    let jitter: f64 = rng.random_range(-0.02..0.02);
                    data[c * hw + y * size + x] = (col[c] + jitter).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Writes toy scenes as PNGs plus `annotations.jsonl` into `dir`, returning
/// the annotation path.
pub fn write_toy_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for (i, scene) in toy_scenes(count, size, seed).iter().enumerate() {
        let name = format!("img_{i:03}.png");
        save_image(&scene.image, &dir.join(&name))?;
        records.push(AnnotationRecord {
            image: name.into(),
            boxes: scene.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
        });
    }
    let path = dir.join("annotations.jsonl");
    write_annotations(&path, &records)?;
    Ok(path)
}
