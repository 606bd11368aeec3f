//! Detector abstraction and the bundled deterministic detectors.

use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{covered_pixels, BBox};
use crate::sparse::{bilinear_taps, im2col_3x3, SparseMap};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

pub const PERSON_CLASS: usize = 0;

/// One detection whose score lives on a graph.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub bbox: BBox,
    pub label: usize,
    /// Scalar in `[0, 1]`.
    pub score: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub label: usize,
    pub score: f64,
}

/// Detector output for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    detections: Vec<ScoredBox>,
}

impl DetectionSet {
    pub fn new(detections: Vec<ScoredBox>) -> Result<Self> {
        for d in &detections {
            d.bbox.validate()?;
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::invalid(format!("detection score {} outside [0, 1]", d.score)));
            }
        }
        Ok(Self { detections })
    }

    pub fn detections(&self) -> &[ScoredBox] {
        &self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Highest score among `class` detections, 0 if there are none.
    pub fn max_score(&self, class: usize) -> f64 {
        self.detections
            .iter()
            .filter(|d| d.label == class)
            .map(|d| d.score)
            .fold(0.0, f64::max)
    }
}

/// An object detector over `(3, H, W)` images in `[0, 1]`.
///
/// `proposals` are the annotated person regions; region scorers emit one
/// detection per proposal, free-form detectors may ignore them.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    fn person_class(&self) -> usize {
        PERSON_CLASS
    }

    /// Whether scores carry gradients back to the image.
    fn differentiable(&self) -> bool {
        true
    }

    fn detect_graph(&self, g: &mut Graph, image: Var, proposals: &[BBox]) -> Result<Vec<Detection>>;

    fn detect(&self, image: &Tensor, proposals: &[BBox]) -> Result<DetectionSet> {
        let mut g = Graph::new();
        let v = g.constant(image.clone());
        let dets = self.detect_graph(&mut g, v, proposals)?;
        DetectionSet::new(
            dets.into_iter()
                .map(|d| ScoredBox {
                    bbox: d.bbox,
                    label: d.label,
                    score: g.value(d.score).item(),
                })
                .collect(),
        )
    }
}

fn image_dims(g: &Graph, image: Var) -> Result<(usize, usize)> {
    match g.shape(image) {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::shape(format!("image must be (3, H, W), got {s:?}"))),
    }
}

/// Scores each proposal as `1 − mean((pixel − target)²)` over a centred
/// square window of side `window · box height`.
///
/// Clothing in the target colour scores near 1, which gives end-to-end tests
/// a known optimum to move away from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticDetector {
    pub target: [f64; 3],
    pub window: f64,
}

impl Default for AnalyticDetector {
    fn default() -> Self {
        Self {
            target: [0.0, 0.0, 0.0],
            window: 0.3,
        }
    }
}

impl AnalyticDetector {
    pub fn new(target: [f64; 3], window: f64) -> Result<Self> {
        if !(window > 0.0 && window <= 1.0) || target.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config("analytic detector needs window in (0, 1] and target in [0, 1]"));
        }
        Ok(Self { target, window })
    }

    /// Gathers the window pixels as rows of `(pixels, 3)`.
    fn window_map(&self, bbox: &BBox, h: usize, w: usize) -> Option<(SparseMap, usize)> {
        let side = self.window * bbox.height();
        let (x0, y0, x1, y1) = bbox.centered_square(side, 0.0, 0.0);
        let (mut xs, mut ys, _) = covered_pixels(x0, y0, x1, y1, w, h);
        if xs.is_empty() || ys.is_empty() {
            // sub-pixel window: fall back to the whole box
            (xs, ys, _) = covered_pixels(bbox.x1, bbox.y1, bbox.x2, bbox.y2, w, h);
        }
        let n = xs.len() * ys.len();
        if n == 0 {
            return None;
        }
        let mut b = SparseMap::builder(3 * h * w);
        for y in ys {
            for x in xs.clone() {
                for c in 0..3 {
                    b.push(c * h * w + y * w + x, 1.0);
                    b.end_row();
                }
            }
        }
        Some((b.build(), n))
    }
}

impl Detector for AnalyticDetector {
    fn name(&self) -> &str {
        "analytic"
    }

    fn detect_graph(&self, g: &mut Graph, image: Var, proposals: &[BBox]) -> Result<Vec<Detection>> {
        let (h, w) = image_dims(g, image)?;
        let mut out = Vec::with_capacity(proposals.len());
        for bbox in proposals {
            bbox.validate()?;
            let Some((map, n)) = self.window_map(bbox, h, w) else {
                continue;
            };
            let pixels = g.linear(image, &Arc::new(map), vec![n, 3]);
            let target = Tensor::new(vec![n, 3], self.target.iter().copied().cycle().take(3 * n).map(|t| -t).collect())?;
            let diff = g.offset(pixels, &target);
            let sq = g.square(diff);
            let msd = g.mean(sq);
            let neg = g.scale(msd, -1.0);
            let score = g.add_scalar(neg, 1.0);
            out.push(Detection {
                bbox: *bbox,
                label: PERSON_CLASS,
                score,
            });
        }
        Ok(out)
    }
}

/// Fixed-seed convolutional scorer: the box is resampled to a small grid,
/// passed through one 3×3 conv with tanh, mean-pooled and squashed by a
/// sigmoid.
#[derive(Debug, Clone)]
pub struct ConvDetector {
    grid: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    bias: f64,
    im2col: Arc<SparseMap>,
}

impl ConvDetector {
    pub const DEFAULT_SEED: u64 = 0x00c0_ffee;

    pub fn new(seed: u64) -> Self {
        let (grid, channels) = (16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, s: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    s * v
                })
                .collect()
        };
        let w1 = Tensor::new(vec![27, channels], normal(27 * channels, 1.0 / 27f64.sqrt())).unwrap();
        let b1 = Tensor::new(vec![channels], normal(channels, 0.1)).unwrap();
        let w2 = Tensor::new(vec![channels, 1], normal(channels, 2.0)).unwrap();
        Self {
            grid,
            w1,
            b1,
            w2,
            bias: 1.0,
            im2col: Arc::new(im2col_3x3(grid, grid, 3)),
        }
    }

    /// Box crop resampled into `(grid², 3)` layout.
    fn crop_map(&self, bbox: &BBox, h: usize, w: usize) -> SparseMap {
        let n = self.grid;
        let mut b = SparseMap::builder(3 * h * w);
        for oy in 0..n {
            let y = bbox.y1 + (oy as f64 + 0.5) * bbox.height() / n as f64 - 0.5;
            for ox in 0..n {
                let x = bbox.x1 + (ox as f64 + 0.5) * bbox.width() / n as f64 - 0.5;
                let taps: Vec<_> = bilinear_taps(x, y, w, h, false).collect();
                for c in 0..3 {
                    for &(p, wt) in &taps {
                        b.push(c * h * w + p, wt);
                    }
                    b.end_row();
                }
            }
        }
        b.build()
    }
}

impl Default for ConvDetector {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl Detector for ConvDetector {
    fn name(&self) -> &str {
        "conv"
    }

    fn detect_graph(&self, g: &mut Graph, image: Var, proposals: &[BBox]) -> Result<Vec<Detection>> {
        let (h, w) = image_dims(g, image)?;
        let n = self.grid * self.grid;
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let pool = g.constant(Tensor::filled(vec![1, n], 1.0 / n as f64));
        let mut out = Vec::with_capacity(proposals.len());
        for bbox in proposals {
            bbox.validate()?;
            let crop = g.linear(image, &Arc::new(self.crop_map(bbox, h, w)), vec![n, 3]);
            let cols = g.linear(crop, &self.im2col, vec![n, 27]);
            let feat = g.matmul(cols, w1);
            let feat = g.add_row(feat, b1);
            let feat = g.tanh(feat);
            let pooled = g.matmul(pool, feat);
            let logit = g.matmul(pooled, w2);
            let logit = g.add_scalar(logit, self.bias);
            let s = g.sigmoid(logit);
            let score = g.reshape(s, vec![1]);
            out.push(Detection {
                bbox: *bbox,
                label: PERSON_CLASS,
                score,
            });
        }
        Ok(out)
    }
}

/// Subprocess adapter. The command receives a PNG path as its last argument
/// and prints one `class score x1 y1 x2 y2` line per detection. Scores enter
/// the graph as constants, so this detector is evaluation-only.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalDetector {
    program: String,
    args: Vec<String>,
}

impl ExternalDetector {
    pub fn new(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| Error::config("external detector command is empty"))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }

    fn scratch_path() -> PathBuf {
        use std::sync::atomic::{AtomicU64, Ordering};
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        std::env::temp_dir().join(format!("envpatch-{}-{n}.png", std::process::id()))
    }

    fn run(&self, image: &Tensor) -> Result<Vec<ScoredBox>> {
        let path = Self::scratch_path();
        crate::dataset::save_image(image, &path)?;
        let output = Command::new(&self.program).args(&self.args).arg(&path).output();
        let _ = std::fs::remove_file(&path);
        let output = output.map_err(|e| Error::External(format!("{}: {e}", self.program)))?;
        if !output.status.success() {
            return Err(Error::External(format!(
                "{} exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        parse_detections(&String::from_utf8_lossy(&output.stdout))
    }
}

/// Parses `class score x1 y1 x2 y2` lines; blank lines and `#` comments are
/// skipped, commas count as separators.
pub fn parse_detections(text: &str) -> Result<Vec<ScoredBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        let bad = |why: &str| Error::External(format!("line {}: {why}: `{line}`", i + 1));
        if fields.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let label: usize = fields[0].parse().map_err(|_| bad("bad class id"))?;
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad number"))?;
        let score = nums[0];
        if !(0.0..=1.0).contains(&score) {
            return Err(bad("score outside [0, 1]"));
        }
        let bbox = BBox::new(nums[1], nums[2], nums[3], nums[4]).map_err(|_| bad("degenerate box"))?;
        out.push(ScoredBox { bbox, label, score });
    }
    Ok(out)
}

impl Detector for ExternalDetector {
    fn name(&self) -> &str {
        "external"
    }

    fn differentiable(&self) -> bool {
        false
    }

    fn detect_graph(&self, g: &mut Graph, image: Var, _proposals: &[BBox]) -> Result<Vec<Detection>> {
        image_dims(g, image)?;
        let found = self.run(g.value(image))?;
        Ok(found
            .into_iter()
            .map(|d| Detection {
                bbox: d.bbox,
                label: d.label,
                score: g.constant(Tensor::scalar(d.score)),
            })
            .collect())
    }
}
