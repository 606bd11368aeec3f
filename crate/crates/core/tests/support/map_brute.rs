//! Random small detection instances and a brute-force AP reference.

use envpatch::attack::{DetectionSet, ScoredBox};
use envpatch::evaluation::iou;
use envpatch::geometry::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub predictions: Vec<DetectionSet>,
    pub gt: Vec<Vec<BBox>>,
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.random_range(0.0..80.0);
    let y1 = rng.random_range(0.0..80.0);
    BBox::new(x1, y1, x1 + rng.random_range(5.0..30.0), y1 + rng.random_range(5.0..30.0)).unwrap()
}

pub fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let s = rng.random_range(0.0..6.0);
    let mut d = || rng.random_range(-s..s);
    let (x1, y1) = (b.x1 + d(), b.y1 + d());
    BBox::new(x1, y1, (b.x2 + d()).max(x1 + 1.0), (b.y2 + d()).max(y1 + 1.0)).unwrap()
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut predictions = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..10 {
        let boxes: Vec<BBox> = (0..rng.random_range(0..=5)).map(|_| random_box(&mut rng)).collect();
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(0..=5) {
            let bbox = if !boxes.is_empty() && rng.random_bool(0.7) {
                let target = boxes[rng.random_range(0..boxes.len())];
                jitter(&mut rng, &target)
            } else {
                random_box(&mut rng)
            };
            // coarse scores force ties across images
            let score = (rng.random_range(0..20) as f64) / 19.0;
            let label = if rng.random_bool(0.9) { 0 } else { 1 };
            dets.push(ScoredBox { bbox, label, score });
        }
        predictions.push(DetectionSet::new(dets).unwrap());
        gt.push(boxes);
    }
    if gt.iter().all(Vec::is_empty) {
        gt[0].push(random_box(&mut rng));
    }
    Instance { predictions, gt }
}

/// Ranks detections, and for every cutoff `k` replays the greedy assignment
/// from scratch over the first `k` detections to get precision and recall.
/// AP sums recall increments weighted by the best precision at any later
/// cutoff.
pub fn brute_force_ap(inst: &Instance) -> f64 {
    let mut ranked: Vec<(usize, ScoredBox)> = Vec::new();
    for (i, set) in inst.predictions.iter().enumerate() {
        for d in set.detections() {
            if d.label == 0 {
                ranked.push((i, *d));
            }
        }
    }
    // stable insertion sort by descending score
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 && ranked[j - 1].1.score < ranked[j].1.score {
            ranked.swap(j - 1, j);
            j -= 1;
        }
    }
    let total: usize = inst.gt.iter().map(Vec::len).sum();
    let tp_at = |k: usize| -> usize {
        let mut used: Vec<Vec<bool>> = inst.gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (img, det) in &ranked[..k] {
            let candidates: Vec<(usize, f64)> = inst.gt[*img]
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*img][*j])
                .map(|(j, g)| (j, iou(&det.bbox, g).unwrap()))
                .filter(|&(_, o)| o >= 0.5)
                .collect();
            if let Some(&(j, _)) = candidates.iter().fold(None::<&(usize, f64)>, |best, c| match best {
                Some(b) if b.1 >= c.1 => Some(b),
                _ => Some(c),
            }) {
                used[*img][j] = true;
                tp += 1;
            }
        }
        tp
    };
    let n = ranked.len();
    let prec: Vec<f64> = (1..=n).map(|k| tp_at(k) as f64 / k as f64).collect();
    let rec: Vec<f64> = (0..=n).map(|k| tp_at(k) as f64 / total as f64).collect();
    let mut ap = 0.0;
    for k in 1..=n {
        let best_later = prec[k - 1..].iter().copied().fold(0.0, f64::max);
        ap += (rec[k] - rec[k - 1]) * best_later;
    }
    ap
}
