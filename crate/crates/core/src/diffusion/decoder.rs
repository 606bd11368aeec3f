use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LatentState;
use crate::error::{Error, Result};
use crate::sparse::{im2col_3x3, interleave_2x2, resize_bilinear, SparseMap};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Maps a final latent to an RGB image in `[0, 1]`, shape `(3, H, W)`.
pub trait Decoder: Send + Sync {
    fn latent_shape(&self) -> [usize; 3];
    fn image_shape(&self) -> [usize; 3];
    fn decode_graph(&self, g: &mut Graph, z0: Var) -> Result<Var>;
}

/// Decodes a final (`timestep == 0`) latent.
pub fn decode(decoder: &dyn Decoder, z0: &LatentState) -> Result<Tensor> {
    if z0.timestep() != 0 {
        return Err(Error::invalid(format!(
            "decode needs a final latent, got timestep {}",
            z0.timestep()
        )));
    }
    let mut g = Graph::new();
    let z = g.constant(z0.values().clone());
    let img = decoder.decode_graph(&mut g, z)?;
    Ok(g.value(img).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Number of 2× upsampling stages; 3 takes 8×8 to 64×64.
    pub stages: usize,
    /// Pre-sigmoid gain.
    pub gain: f64,
    /// Weight of the transposed-convolution detail path.
    pub detail: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            stages: 3,
            gain: 6.0,
            detail: 0.25,
        }
    }
}

/// Linear latent-to-RGB factors for 4-channel latents, in the style of the
/// preview approximations used for latent diffusion decoders. Rows are latent
/// channels, columns R, G, B.
const PREVIEW_FACTORS: [[f64; 3]; 4] = [
    [0.3512, 0.2297, 0.3227],
    [0.3250, 0.4974, 0.2350],
    [-0.2829, 0.1762, 0.2721],
    [-0.2120, -0.2616, -0.7177],
];

/// Separable `[1, 2, 1] / 4` smoothing taps in im2col order.
const TENT: [f64; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

#[derive(Debug, Clone)]
struct UpStage {
    planes: [Tensor; 4],
    bias: Tensor,
    interleave: Arc<SparseMap>,
}

/// Colour path plus detail path, squashed by a sigmoid.
///
/// The colour path smooths the latent with a 3×3 tent, projects channels to
/// RGB and upsamples bilinearly. The detail path is a stack of 2×2 stride-2
/// transposed convolutions with tanh between stages.
#[derive(Debug, Clone)]
pub struct ReferenceDecoder {
    cfg: DecoderConfig,
    latent: [usize; 3],
    stages: Vec<UpStage>,
    colour: Tensor,
    colour_cols: Arc<SparseMap>,
    colour_resize: Arc<SparseMap>,
}

impl ReferenceDecoder {
    pub fn new(cfg: DecoderConfig, latent: [usize; 3], seed: u64) -> Result<Self> {
        if cfg.stages == 0 || cfg.hidden == 0 || latent.contains(&0) {
            return Err(Error::config("decoder needs >= 1 stage and non-empty dimensions"));
        }
        if !(cfg.gain > 0.0 && cfg.gain.is_finite() && cfg.detail.is_finite()) {
            return Err(Error::config("decoder gain must be positive and detail finite"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_636f_6465_7200);
        let mut mat = |rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    scale * n
                })
                .collect();
            Tensor::new(vec![rows, cols], data).unwrap()
        };
        let [c, h, w] = latent;
        let mut stages = Vec::with_capacity(cfg.stages);
        let (mut cin, mut sh, mut sw) = (c, h, w);
        for s in 0..cfg.stages {
            let cout = if s + 1 == cfg.stages { 3 } else { cfg.hidden };
            let scale = 1.0 / (cin as f64).sqrt();
            let planes = [mat(cin, cout, scale), mat(cin, cout, scale), mat(cin, cout, scale), mat(cin, cout, scale)];
            let bias = mat(1, cout, 0.05).reshaped(vec![cout])?;
            stages.push(UpStage {
                planes,
                bias,
                interleave: Arc::new(interleave_2x2(sh, sw, cout)),
            });
            cin = cout;
            sh *= 2;
            sw *= 2;
        }
        let factors = if c == PREVIEW_FACTORS.len() {
            Tensor::new(vec![c, 3], PREVIEW_FACTORS.concat())?
        } else {
            mat(c, 3, 1.0 / (c as f64).sqrt())
        };
        // column k·c + ch of the im2col layout pairs tap k with channel ch
        let mut colour = Vec::with_capacity(9 * c * 3);
        for tap in TENT {
            for ch in 0..c {
                colour.extend(factors.data()[ch * 3..ch * 3 + 3].iter().map(|f| tap * f));
            }
        }
        Ok(Self {
            colour: Tensor::new(vec![9 * c, 3], colour)?,
            colour_cols: Arc::new(im2col_3x3(h, w, c)),
            colour_resize: Arc::new(resize_bilinear(h, w, 3, sh, sw)),
            cfg,
            latent,
            stages,
        })
    }
}

impl Decoder for ReferenceDecoder {
    fn latent_shape(&self) -> [usize; 3] {
        self.latent
    }

    fn image_shape(&self) -> [usize; 3] {
        let f = 1 << self.cfg.stages;
        [3, self.latent[1] * f, self.latent[2] * f]
    }

    fn decode_graph(&self, g: &mut Graph, z0: Var) -> Result<Var> {
        if g.shape(z0) != self.latent {
            return Err(Error::shape(format!(
                "decoder expects latent {:?}, got {:?}",
                self.latent,
                g.shape(z0)
            )));
        }
        let [c, h, w] = self.latent;
        let [_, oh, ow] = self.image_shape();
        let flat = g.reshape(z0, vec![c, h * w]);
        let tokens = g.transpose(flat);

        let mut x = tokens;
        let mut positions = h * w;
        for (s, stage) in self.stages.iter().enumerate() {
            let cout = stage.bias.len();
            let planes: Vec<Var> = stage
                .planes
                .iter()
                .map(|p| {
                    let w = g.constant(p.clone());
                    g.matmul(x, w)
                })
                .collect();
            let cat = g.concat(&planes);
            positions *= 4;
            let up = g.linear(cat, &stage.interleave, vec![positions, cout]);
            let b = g.constant(stage.bias.clone());
            x = g.add_row(up, b);
            if s + 1 < self.stages.len() {
                x = g.tanh(x);
            }
        }
        let detail = g.scale(x, self.cfg.detail);

        let cols = g.linear(tokens, &self.colour_cols, vec![h * w, 9 * c]);
        let colour_w = g.constant(self.colour.clone());
        let colour = g.matmul(cols, colour_w);
        let colour = g.linear(colour, &self.colour_resize, vec![oh * ow, 3]);
        let pre = g.add(detail, colour);
        let pre = g.scale(pre, self.cfg.gain);
        let rgb = g.sigmoid(pre);
        let chw = g.transpose(rgb);
        let img = g.reshape(chw, vec![3, oh, ow]);
        Ok(g.clamp(img, 0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decoder() -> ReferenceDecoder {
        ReferenceDecoder::new(DecoderConfig::default(), [4, 8, 8], 1).unwrap()
    }

    #[test]
    fn range_shape_and_determinism() {
        let d = decoder();
        let z = LatentState::gaussian(&[4, 8, 8], 0, 5);
        let a = decode(&d, &z).unwrap();
        let b = decode(&d, &z).unwrap();
        assert_eq!(a.shape(), &[3, 64, 64]);
        assert!(a.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_final_latent() {
        let z = LatentState::gaussian(&[4, 8, 8], 3, 5);
        assert!(decode(&decoder(), &z).is_err());
    }

    #[test]
    fn pixel_gradient_matches_central_difference() {
        let d = decoder();
        let z = LatentState::gaussian(&[4, 8, 8], 0, 11);
        let pixel = |zv: &Tensor| {
            let mut g = Graph::new();
            let v = g.param(zv.clone());
            let img = d.decode_graph(&mut g, v).unwrap();
            let p = g.slice(img, 4096 + 37 * 64 + 21, vec![1]);
            (g.value(p).item(), g.backward(p).wrt(v))
        };
        let (_, grad) = pixel(z.values());
        let h = 1e-5;
        for idx in [0usize, 37, 100, 200, 255] {
            let mut zp = z.values().clone();
            let mut zm = z.values().clone();
            zp.data_mut()[idx] += h;
            zm.data_mut()[idx] -= h;
            let fd = (pixel(&zp).0 - pixel(&zm).0) / (2.0 * h);
            let an = grad.data()[idx];
            assert!((an - fd).abs() <= 1e-2 * an.abs().max(fd.abs()) + 1e-10, "{idx}: {an} vs {fd}");
        }
    }
}
