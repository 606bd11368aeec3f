//! EOT sampling, patch placement, detectors and the attack objective.

pub mod detector;
pub mod eot;
pub mod placement;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use detector::{
    parse_detections, AnalyticDetector, ConvDetector, Detection, DetectionSet, Detector, ExternalDetector, ScoredBox,
    PERSON_CLASS,
};
pub use eot::{apply_transform, sample_transform, transform_patch, EotConfig, Range, TransformParams, TransformedPatch};
pub use placement::{place_patch, Placed, PlacementRegion};

use crate::alignment::LossWeights;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::seed::derive_seed;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMetadata {
    pub prompt: String,
    pub seed: u64,
    pub weights: LossWeights,
    pub epoch: usize,
}

/// A decoded patch, `(3, H_p, W_p)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPatch {
    pixels: Tensor,
    pub metadata: PatchMetadata,
}

impl AdversarialPatch {
    pub fn new(pixels: Tensor, metadata: PatchMetadata) -> Result<Self> {
        if !matches!(pixels.shape(), [3, h, w] if *h > 0 && *w > 0) {
            return Err(Error::shape(format!("patch must be (3, H, W), got {:?}", pixels.shape())));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("patch pixels must lie in [0, 1]"));
        }
        Ok(Self { pixels, metadata })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Mean over images of the per-image maximum person score; an image with no
/// person detections contributes 0. Returns `None` for an empty batch.
pub fn attack_loss_graph(g: &mut Graph, per_image: &[Vec<Detection>], person_class: usize) -> Option<Var> {
    if per_image.is_empty() {
        return None;
    }
    let mut maxima = Vec::with_capacity(per_image.len());
    for dets in per_image {
        let scores: Vec<Var> = dets.iter().filter(|d| d.label == person_class).map(|d| d.score).collect();
        let m = if scores.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let all = g.concat(&scores);
            g.max(all)
        };
        maxima.push(m);
    }
    let all = g.concat(&maxima);
    Some(g.mean(all))
}

/// Value form of [`attack_loss_graph`]; 0 for an empty batch.
pub fn attack_loss(detections: &[DetectionSet], person_class: usize) -> f64 {
    if detections.is_empty() {
        return 0.0;
    }
    detections.iter().map(|d| d.max_score(person_class)).sum::<f64>() / detections.len() as f64
}

/// One annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

/// Everything needed to score a patch on a batch of scenes.
pub struct AttackSetup<'a> {
    pub detector: &'a dyn Detector,
    pub eot: &'a EotConfig,
    pub scale: f64,
    /// Root of the per-image, per-sample transform streams.
    pub seed: u64,
}

/// Output of [`attack_batch`]: the scalar loss and the patched images.
pub struct AttackBatch {
    pub loss: Var,
    pub images: Vec<Var>,
    pub detections: Vec<Vec<Detection>>,
}

/// Places EOT-transformed copies of `patch` on every person box of every
/// scene (`samples_per_image` times), runs the detector and averages the
/// per-image maximum person score.
///
/// Each (image, sample) pair draws from its own seed stream, so the result
/// does not depend on evaluation order.
pub fn attack_batch(g: &mut Graph, patch: Var, scenes: &[Scene], setup: &AttackSetup<'_>) -> Result<AttackBatch> {
    if scenes.is_empty() {
        return Err(Error::invalid("attack batch has no images"));
    }
    let &[3, ph, pw] = g.shape(patch) else {
        return Err(Error::shape(format!("patch must be (3, H, W), got {:?}", g.shape(patch))));
    };
    let mut images = Vec::new();
    let mut detections = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        for s in 0..setup.eot.samples_per_image {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed, &[i as u64, s as u64]));
            let mut img = g.constant(scene.image.clone());
            for bbox in &scene.boxes {
                let params = sample_transform(&mut rng, setup.eot, ph, pw);
                let t = apply_transform(g, patch, &params)?;
                img = place_patch(g, img, &t, bbox, setup.scale)?.image;
            }
            detections.push(setup.detector.detect_graph(g, img, &scene.boxes)?);
            images.push(img);
        }
    }
    let loss = attack_loss_graph(g, &detections, setup.detector.person_class()).expect("non-empty batch");
    Ok(AttackBatch {
        loss,
        images,
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(g: &mut Graph, label: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            label,
            score: g.constant(Tensor::scalar(score)),
        }
    }

    #[test]
    fn loss_aggregation_examples() {
        let mut g = Graph::new();
        let none = vec![vec![det(&mut g, 3, 0.8)], vec![]];
        let l = attack_loss_graph(&mut g, &none, PERSON_CLASS).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let one = vec![vec![det(&mut g, 0, 0.9), det(&mut g, 0, 0.2)]];
        let l = attack_loss_graph(&mut g, &one, PERSON_CLASS).unwrap();
        assert_eq!(g.value(l).item(), 0.9);

        let two = vec![vec![det(&mut g, 0, 0.9)], vec![det(&mut g, 0, 0.5), det(&mut g, 1, 0.99)]];
        let l = attack_loss_graph(&mut g, &two, PERSON_CLASS).unwrap();
        assert!((g.value(l).item() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn value_loss_matches() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let sets = vec![
            DetectionSet::new(vec![ScoredBox { bbox: b, label: 0, score: 0.9 }]).unwrap(),
            DetectionSet::new(vec![ScoredBox { bbox: b, label: 0, score: 0.5 }]).unwrap(),
        ];
        assert!((attack_loss(&sets, 0) - 0.7).abs() < 1e-15);
        assert_eq!(attack_loss(&[], 0), 0.0);
    }

    #[test]
    fn patch_range_enforced() {
        let meta = PatchMetadata {
            prompt: "x".into(),
            seed: 0,
            weights: LossWeights::default(),
            epoch: 0,
        };
        assert!(AdversarialPatch::new(Tensor::filled(vec![3, 2, 2], 1.5), meta.clone()).is_err());
        assert!(AdversarialPatch::new(Tensor::filled(vec![2, 2], 0.5), meta.clone()).is_err());
        assert!(AdversarialPatch::new(Tensor::filled(vec![3, 2, 2], 0.5), meta).is_ok());
    }
}
