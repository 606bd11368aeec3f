//! Prompt alignment, latent alignment and the weighted total objective.
//!
//! Each loss has a plain form over values and a tape form used during
//! optimization. Both compute cosine similarity as `a·b / sqrt(|a|²|b|²)`,
//! so a record compared with a bit-identical copy of itself scores exactly 0.

use serde::{Deserialize, Serialize};

use crate::diffusion::{AttentionRecord, LatentState};
use crate::error::{Error, Result};
use crate::tape::{cosine_parts, Graph, Var};
use crate::tensor::Tensor;

/// Weights of the attack, prompt-alignment and latent-alignment terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5.0,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::config("loss weights must not all be zero"));
        }
        Ok(())
    }
}

/// Reference attention maps and final latent from the unoptimized seed.
///
/// Built once per run; there is no way to mutate it afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct RunAnchors {
    attention_initial: AttentionRecord,
    z0_initial: LatentState,
}

impl RunAnchors {
    pub fn new(attention_initial: AttentionRecord, z0_initial: LatentState) -> Result<Self> {
        if z0_initial.timestep() != 0 {
            return Err(Error::invalid("anchor latent must be final (timestep 0)"));
        }
        Ok(Self {
            attention_initial,
            z0_initial,
        })
    }

    pub fn attention(&self) -> &AttentionRecord {
        &self.attention_initial
    }

    pub fn z0(&self) -> &LatentState {
        &self.z0_initial
    }
}

fn check_grid(current: &AttentionRecord, initial: &AttentionRecord) -> Result<()> {
    if current.steps() != initial.steps() || current.layers() != initial.layers() {
        return Err(Error::shape(format!(
            "attention grids differ: {}x{} vs {}x{}",
            current.steps(),
            current.layers(),
            initial.steps(),
            initial.layers()
        )));
    }
    Ok(())
}

fn check_nonzero(t: &Tensor, k: usize) -> Result<()> {
    if t.data().iter().all(|&x| x == 0.0) {
        return Err(Error::invalid(format!(
            "attention map {k} has zero norm; cosine similarity undefined"
        )));
    }
    Ok(())
}

/// `1 − mean over (step, layer) of cos(A_ij, A_ij^initial)` on flattened maps.
pub fn prompt_alignment_loss(current: &AttentionRecord, initial: &AttentionRecord) -> Result<f64> {
    check_grid(current, initial)?;
    let mut total = 0.0;
    for (k, (a, b)) in current.maps().iter().zip(initial.maps()).enumerate() {
        a.ensure_same_shape(b, "attention map")?;
        check_nonzero(a, k)?;
        check_nonzero(b, k)?;
        let (dot, na2, nb2) = cosine_parts(a.data(), b.data());
        total += dot / (na2 * nb2).sqrt();
    }
    Ok(1.0 - total / current.len() as f64)
}

/// Tape form of [`prompt_alignment_loss`]; `current` holds the step-major map variables.
pub fn prompt_alignment_loss_graph(
    g: &mut Graph,
    current: &[Var],
    initial: &AttentionRecord,
) -> Result<Var> {
    if current.len() != initial.len() {
        return Err(Error::shape(format!(
            "{} current maps vs {} anchor maps",
            current.len(),
            initial.len()
        )));
    }
    let mut sims = Vec::with_capacity(current.len());
    for (k, (&a, b)) in current.iter().zip(initial.maps()).enumerate() {
        g.value(a).ensure_same_shape(b, "attention map")?;
        check_nonzero(g.value(a), k)?;
        check_nonzero(b, k)?;
        let anchor = g.constant(b.clone());
        sims.push(g.cosine(a, anchor));
    }
    let all = g.concat(&sims);
    let mean = g.mean(all);
    let neg = g.scale(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// `mean(1 − exp(−(z0 − z0_initial)²))`.
pub fn latent_alignment_loss(z0: &LatentState, z0_initial: &LatentState) -> Result<f64> {
    check_latents(z0, z0_initial)?;
    let a = z0.values().data();
    let b = z0_initial.values().data();
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            1.0 - (-d * d).exp()
        })
        .sum();
    Ok(s / a.len() as f64)
}

fn check_latents(z0: &LatentState, z0_initial: &LatentState) -> Result<()> {
    z0.values().ensure_same_shape(z0_initial.values(), "latent alignment")?;
    if z0.timestep() != 0 || z0_initial.timestep() != 0 {
        return Err(Error::invalid("latent alignment compares final latents (timestep 0)"));
    }
    Ok(())
}

/// Tape form of [`latent_alignment_loss`].
pub fn latent_alignment_loss_graph(g: &mut Graph, z0: Var, z0_initial: &LatentState) -> Result<Var> {
    g.value(z0)
        .ensure_same_shape(z0_initial.values(), "latent alignment")?;
    let neg_anchor = z0_initial.values().map(|x| -x);
    let diff = g.offset(z0, &neg_anchor);
    let sq = g.square(diff);
    let neg = g.scale(sq, -1.0);
    let e = g.exp(neg);
    let m = g.mean(e);
    let neg_m = g.scale(m, -1.0);
    Ok(g.add_scalar(neg_m, 1.0))
}

/// `α·attack + β·prompt + γ·latent`.
pub fn total_loss(l_attack: f64, l_prompt: f64, l_latent: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("attack", l_attack), ("prompt", l_prompt), ("latent", l_latent)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} loss is not finite: {v}")));
        }
    }
    Ok(w.alpha * l_attack + w.beta * l_prompt + w.gamma * l_latent)
}

pub fn total_loss_graph(g: &mut Graph, l_attack: Var, l_prompt: Var, l_latent: Var, w: &LossWeights) -> Var {
    let a = g.scale(l_attack, w.alpha);
    let p = g.scale(l_prompt, w.beta);
    let l = g.scale(l_latent, w.gamma);
    let ap = g.add(a, p);
    g.add(ap, l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(maps: &[&[f64]]) -> AttentionRecord {
        let maps: Vec<Tensor> = maps
            .iter()
            .map(|m| Tensor::new(vec![1, m.len()], m.to_vec()).unwrap())
            .collect();
        let n = maps.len();
        AttentionRecord::new(1, n, maps).unwrap()
    }

    fn latent(v: &[f64]) -> LatentState {
        LatentState::new(Tensor::new(vec![v.len()], v.to_vec()).unwrap(), 0).unwrap()
    }

    #[test]
    fn identical_records_have_zero_loss() {
        let a = record(&[&[0.3, 0.7], &[0.123456789, 0.876543211]]);
        assert_eq!(prompt_alignment_loss(&a, &a.clone()).unwrap(), 0.0);
    }

    #[test]
    fn hand_cosine_example() {
        let a = record(&[&[0.5, 0.5]]);
        let b = record(&[&[1.0, 0.0]]);
        let l = prompt_alignment_loss(&a, &b).unwrap();
        assert!((l - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert!((l - 0.2929).abs() < 1e-4);
    }

    #[test]
    fn disjoint_support_gives_one() {
        let a = record(&[&[1.0, 0.0]]);
        let b = record(&[&[0.0, 1.0]]);
        assert_eq!(prompt_alignment_loss(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = record(&[&[1.0, 0.0]]);
        let b = record(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(prompt_alignment_loss(&a, &b), Err(Error::Shape(_))));
        let c = record(&[&[0.2, 0.3, 0.5]]);
        assert!(matches!(prompt_alignment_loss(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn latent_loss_examples() {
        let z = latent(&[0.3, -1.2]);
        assert_eq!(latent_alignment_loss(&z, &z.clone()).unwrap(), 0.0);
        let one = latent_alignment_loss(&latent(&[1.0]), &latent(&[0.0])).unwrap();
        assert!((one - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((one - 0.6321206).abs() < 1e-7);
        let ten = latent_alignment_loss(&latent(&[10.0]), &latent(&[0.0])).unwrap();
        assert!(ten > one && ten < 1.0 + 1e-15);
    }

    #[test]
    fn latent_loss_errors() {
        assert!(latent_alignment_loss(&latent(&[1.0]), &latent(&[1.0, 2.0])).is_err());
        let pending = LatentState::new(Tensor::scalar(0.0), 3).unwrap();
        assert!(latent_alignment_loss(&pending, &latent(&[0.0])).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma), (1.0, 5.0, 0.1));
        let t = total_loss(0.8, 0.1, 0.2, &w).unwrap();
        assert!((t - 1.32).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn graph_forms_match_plain_forms() {
        let cur = record(&[&[0.2, 0.8], &[0.6, 0.4]]);
        let init = record(&[&[0.5, 0.5], &[0.9, 0.1]]);
        let mut g = Graph::new();
        let vars: Vec<Var> = cur.maps().iter().map(|m| g.param(m.clone())).collect();
        let l = prompt_alignment_loss_graph(&mut g, &vars, &init).unwrap();
        assert!((g.value(l).item() - prompt_alignment_loss(&cur, &init).unwrap()).abs() < 1e-15);

        let a = latent(&[0.1, 0.9, -0.4]);
        let b = latent(&[0.0, 1.5, 0.2]);
        let z = g.param(a.values().clone());
        let ll = latent_alignment_loss_graph(&mut g, z, &b).unwrap();
        assert!((g.value(ll).item() - latent_alignment_loss(&a, &b).unwrap()).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
            let h = 1e-6;
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        }

        proptest! {
            #[test]
            fn latent_loss_permutation_invariant(
                a in proptest::collection::vec(-3.0f64..3.0, 1..40),
                shift in -2.0f64..2.0,
                rot in 0usize..40,
            ) {
                let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + shift * (i as f64).sin()).collect();
                let r = rot % a.len();
                let mut pa = a.clone();
                let mut pb = b.clone();
                pa.rotate_left(r);
                pb.rotate_left(r);
                let l1 = latent_alignment_loss(&latent(&a), &latent(&b)).unwrap();
                let l2 = latent_alignment_loss(&latent(&pa), &latent(&pb)).unwrap();
                prop_assert!((l1 - l2).abs() < 1e-12);
                prop_assert!((0.0..1.0).contains(&l1));
            }

            #[test]
            fn total_loss_is_linear(
                la in 0.0f64..2.0, lp in 0.0f64..2.0, ll in 0.0f64..1.0, d in -1.0f64..1.0,
            ) {
                let w = LossWeights::default();
                let base = total_loss(la, lp, ll, &w).unwrap();
                prop_assert!((total_loss(la + d, lp, ll, &w).unwrap() - base - w.alpha * d).abs() < 1e-12);
                prop_assert!((total_loss(la, lp + d, ll, &w).unwrap() - base - w.beta * d).abs() < 1e-12);
                prop_assert!((total_loss(la, lp, ll + d, &w).unwrap() - base - w.gamma * d).abs() < 1e-12);
            }

            #[test]
            fn prompt_loss_positive_when_direction_differs(
                raw in proptest::collection::vec(0.01f64..1.0, 8),
                k in 0usize..4,
            ) {
                let rows: Vec<Vec<f64>> = raw.chunks(4).map(|c| {
                    let s: f64 = c.iter().sum();
                    c.iter().map(|x| x / s).collect()
                }).collect();
                let a = record(&[&rows[0], &rows[1]]);
                let mut other = rows[1].clone();
                other.rotate_left(k % 4 + 1);
                prop_assume!(other != rows[1]);
                let b = record(&[&rows[0], &other]);
                let same_dir = rows[1].iter().zip(&other).all(|(x, y)| (x - y).abs() < 1e-12);
                prop_assume!(!same_dir);
                prop_assert!(prompt_alignment_loss(&a, &b).unwrap() > 0.0);
                prop_assert_eq!(prompt_alignment_loss(&a, &a).unwrap(), 0.0);
            }

            #[test]
            fn gradients_match_central_differences(
                cur in proptest::collection::vec(0.05f64..1.0, 16),
                init in proptest::collection::vec(0.05f64..1.0, 16),
                z in proptest::collection::vec(-2.0f64..2.0, 16),
                z0 in proptest::collection::vec(-2.0f64..2.0, 16),
            ) {
                let anchor = AttentionRecord::new(1, 2, vec![
                    Tensor::new(vec![2, 4], normalize_rows(&init[..8])).unwrap(),
                    Tensor::new(vec![2, 4], normalize_rows(&init[8..])).unwrap(),
                ]).unwrap();
                let prompt = |x: &[f64]| -> (f64, Vec<f64>) {
                    let mut g = Graph::new();
                    let v = g.param(Tensor::new(vec![16], x.to_vec()).unwrap());
                    let a = g.slice(v, 0, vec![2, 4]);
                    let b = g.slice(v, 8, vec![2, 4]);
                    let l = prompt_alignment_loss_graph(&mut g, &[a, b], &anchor).unwrap();
                    (g.value(l).item(), g.backward(l).wrt(v).into_data())
                };
                let (_, grad) = prompt(&cur);
                for (i, &an) in grad.iter().enumerate() {
                    let fd = central_diff(&|x| prompt(x).0, &cur, i);
                    prop_assert!((an - fd).abs() <= 1e-2 * an.abs().max(fd.abs()) + 1e-8);
                }

                let anchor_z = latent(&z0);
                let lat = |x: &[f64]| -> (f64, Vec<f64>) {
                    let mut g = Graph::new();
                    let v = g.param(Tensor::new(vec![16], x.to_vec()).unwrap());
                    let l = latent_alignment_loss_graph(&mut g, v, &anchor_z).unwrap();
                    (g.value(l).item(), g.backward(l).wrt(v).into_data())
                };
                let (_, grad) = lat(&z);
                for (i, &an) in grad.iter().enumerate() {
                    let fd = central_diff(&|x| lat(x).0, &z, i);
                    prop_assert!((an - fd).abs() <= 1e-2 * an.abs().max(fd.abs()) + 1e-8);
                }
            }
        }

        fn normalize_rows(x: &[f64]) -> Vec<f64> {
            x.chunks(4)
                .flat_map(|c| {
                    let s: f64 = c.iter().sum();
                    c.iter().map(move |v| v / s).collect::<Vec<_>>()
                })
                .collect()
        }
    }
}
