//! Patch-level attack behaviour without the diffusion model.

use envpatch::attack::{attack_batch, AnalyticDetector, AttackSetup, ConvDetector, Detector, EotConfig, Scene};
use envpatch::dataset::toy_scenes;
use envpatch::gradcheck::{check_gradient, pick_coordinates, Tolerance};
use envpatch::optimizer::{adam_step, AdamMoments, OptimizerConfig};
use envpatch::{Graph, Tensor};

fn loss_and_grad(patch: &Tensor, scenes: &[Scene], setup: &AttackSetup<'_>) -> (f64, Tensor) {
    let mut g = Graph::new();
    let p = g.param(patch.clone());
    let batch = attack_batch(&mut g, p, scenes, setup).unwrap();
    (g.value(batch.loss).item(), g.backward(batch.loss).wrt(p))
}

#[test]
fn pixel_descent_defeats_the_analytic_detector() {
    let scenes = toy_scenes(4, 64, 1);
    let detector = AnalyticDetector::default();
    let eot = EotConfig::identity();
    let setup = AttackSetup {
        detector: &detector,
        eot: &eot,
        scale: 0.4,
        seed: 0,
    };
    let mut patch = Tensor::filled(vec![3, 16, 16], 0.5);
    let mut moments = AdamMoments::zeros(&[3, 16, 16]);
    let opt = OptimizerConfig {
        learning_rate: 0.05,
        ..OptimizerConfig::default()
    };
    let (initial, _) = loss_and_grad(&patch, &scenes, &setup);
    let mut last = initial;
    for _ in 0..200 {
        let (l, grad) = loss_and_grad(&patch, &scenes, &setup);
        last = l;
        adam_step(&mut patch, &grad, &mut moments, &opt).unwrap();
        patch = patch.map(|v| v.clamp(0.0, 1.0));
    }
    assert!(last < 0.1 * initial, "{last} vs initial {initial}");
}

#[test]
fn attack_loss_gradient_matches_finite_differences() {
    let scenes = toy_scenes(2, 64, 9);
    let eot = EotConfig::default();
    let detectors: [Box<dyn Detector>; 2] = [Box::new(AnalyticDetector::default()), Box::new(ConvDetector::default())];
    let data: Vec<f64> = (0..3 * 16 * 16).map(|i| 0.2 + 0.6 * ((i * 31 % 97) as f64 / 96.0)).collect();
    let patch = Tensor::new(vec![3, 16, 16], data).unwrap();
    for d in &detectors {
        let setup = AttackSetup {
            detector: d.as_ref(),
            eot: &eot,
            scale: 0.4,
            seed: 17,
        };
        let (_, grad) = loss_and_grad(&patch, &scenes, &setup);
        let f = |p: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(p.clone());
            let loss = attack_batch(&mut g, v, &scenes, &setup)?.loss;
            Ok(g.value(loss).item())
        };
        let coords = pick_coordinates(patch.len(), 40, 5);
        let res = check_gradient(f, &patch, &grad, &coords, 1e-6, Tolerance::default()).unwrap();
        let bad: Vec<_> = res.iter().filter(|c| !c.ok).collect();
        assert!(bad.is_empty(), "{}: {bad:?}", d.name());
        assert!(res.iter().filter(|c| c.analytic != 0.0).count() >= 10);
    }
}

#[test]
fn bright_patch_lowers_map_against_gray() {
    use envpatch::evaluation::evaluate_digital;
    let scenes = toy_scenes(6, 64, 2);
    let detector = AnalyticDetector::default();
    let eot = EotConfig::default();
    let clean = evaluate_digital(None, &scenes, &detector, &eot, 0.4, 1).unwrap();
    let gray = Tensor::filled(vec![3, 16, 16], 0.5);
    let gray = evaluate_digital(Some(&gray), &scenes, &detector, &eot, 0.4, 1).unwrap();
    let white = Tensor::filled(vec![3, 16, 16], 1.0);
    let white = evaluate_digital(Some(&white), &scenes, &detector, &eot, 0.4, 1).unwrap();
    assert_eq!(clean.map50, 1.0);
    assert!(white.map50 < gray.map50, "{} vs {}", white.map50, gray.map50);
    assert!(white.mean_max_confidence < gray.mean_max_confidence);
    assert_eq!(white.per_image.len(), 6);
}
