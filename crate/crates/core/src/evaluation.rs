//! IoU, mAP@50, frame-based attack success rate and Likert summaries.

use crate::attack::{attack_batch, AttackSetup, DetectionSet, Detector, EotConfig, Scene, ScoredBox};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tape::Graph;
use crate::tensor::Tensor;

/// Score at or above which a detection counts as reported.
pub const SCORE_THRESHOLD: f64 = 0.5;
pub const IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b);
    Ok(inter / (a.area() + b.area() - inter))
}

/// Person-class average precision at IoU ≥ 0.5.
///
/// Detections of `class` from all images are ranked by score (ties keep
/// image order); each is greedily matched to the unmatched ground-truth box
/// of highest IoU in its image. Precision is made monotone from the right
/// and integrated over every recall step.
pub fn map50(predictions: &[DetectionSet], ground_truth: &[Vec<BBox>], class: usize) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} prediction sets for {} images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::invalid("mAP is undefined without ground-truth boxes"));
    }
    let mut ranked: Vec<(usize, &ScoredBox)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(i, set)| set.detections().iter().filter(|d| d.label == class).map(move |d| (i, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for (img, det) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in ground_truth[img].iter().enumerate() {
            if matched[img][j] {
                continue;
            }
            let o = iou(&det.bbox, gt)?;
            if o >= IOU_THRESHOLD && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            matched[img][j] = true;
        }
        hits.push(best.is_some());
    }
    Ok(average_precision(&hits, total_gt))
}

/// All-points interpolated AP from a ranked hit list.
fn average_precision(hits: &[bool], total_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Drops detections below `threshold`.
pub fn threshold_detections(sets: &[DetectionSet], threshold: f64) -> Result<Vec<DetectionSet>> {
    sets.iter()
        .map(|s| DetectionSet::new(s.detections().iter().copied().filter(|d| d.score >= threshold).collect()))
        .collect()
}

/// Percentage of evaded frames.
pub fn asr(evaded: &[bool]) -> Result<f64> {
    if evaded.is_empty() {
        return Err(Error::invalid("ASR needs at least one frame"));
    }
    Ok(100.0 * evaded.iter().filter(|&&e| e).count() as f64 / evaded.len() as f64)
}

pub fn mean_asr(per_posture: &[f64]) -> Result<f64> {
    if per_posture.is_empty() {
        return Err(Error::invalid("mean ASR needs at least one posture"));
    }
    Ok(per_posture.iter().sum::<f64>() / per_posture.len() as f64)
}

/// A frame is evaded when no `class` detection scoring at least
/// [`SCORE_THRESHOLD`] overlaps the subject box.
pub fn frame_evaded(detections: &DetectionSet, subject: &BBox, class: usize) -> bool {
    !detections
        .detections()
        .iter()
        .any(|d| d.label == class && d.score >= SCORE_THRESHOLD && d.bbox.intersection(subject) > 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikertSummary {
    pub mean: f64,
    /// Sample (n − 1) standard deviation.
    pub std: f64,
}

pub fn likert_summary(scores: &[u8]) -> Result<LikertSummary> {
    if let Some(s) = scores.iter().find(|s| !(1..=7).contains(*s)) {
        return Err(Error::invalid(format!("Likert score {s} outside 1..=7")));
    }
    if scores.len() < 2 {
        return Err(Error::invalid("Likert summary needs at least two scores"));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var = scores.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(LikertSummary { mean, std: var.sqrt() })
}

/// Detections on every scene with `patch` placed on each person box (or on
/// the clean images when `patch` is `None`). One set per image and EOT sample.
pub fn patched_detections(
    patch: Option<&Tensor>,
    scenes: &[Scene],
    detector: &dyn Detector,
    eot: &EotConfig,
    scale: f64,
    seed: u64,
) -> Result<Vec<DetectionSet>> {
    let Some(patch) = patch else {
        return scenes.iter().map(|s| detector.detect(&s.image, &s.boxes)).collect();
    };
    let mut g = Graph::new();
    let p = g.constant(patch.clone());
    let setup = AttackSetup {
        detector,
        eot,
        scale,
        seed,
    };
    let batch = attack_batch(&mut g, p, scenes, &setup)?;
    batch
        .detections
        .iter()
        .map(|dets| {
            DetectionSet::new(
                dets.iter()
                    .map(|d| ScoredBox {
                        bbox: d.bbox,
                        label: d.label,
                        score: g.value(d.score).item(),
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Digital metrics for one placement condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalMetrics {
    pub map50: f64,
    /// Mean over evaluated images of the maximum person score.
    pub mean_max_confidence: f64,
    /// Maximum person score per evaluated image (image-major, then EOT sample).
    pub per_image: Vec<f64>,
}

/// mAP@50 (after dropping detections below [`SCORE_THRESHOLD`]) and
/// confidence statistics with an optional patch on every person box.
pub fn evaluate_digital(
    patch: Option<&Tensor>,
    scenes: &[Scene],
    detector: &dyn Detector,
    eot: &EotConfig,
    scale: f64,
    seed: u64,
) -> Result<DigitalMetrics> {
    if scenes.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let sets = patched_detections(patch, scenes, detector, eot, scale, seed)?;
    let repeats = sets.len() / scenes.len();
    let gt: Vec<Vec<BBox>> = scenes
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.boxes.clone(), repeats))
        .collect();
    let class = detector.person_class();
    let per_image: Vec<f64> = sets.iter().map(|s| s.max_score(class)).collect();
    let kept = threshold_detections(&sets, SCORE_THRESHOLD)?;
    Ok(DigitalMetrics {
        map50: map50(&kept, &gt, class)?,
        mean_max_confidence: per_image.iter().sum::<f64>() / per_image.len() as f64,
        per_image,
    })
}
