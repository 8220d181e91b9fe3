//! Fixed, seeded random-weight convolutional feature extractor.
//!
//! Four stages of 3x3 convolution and ReLU with 2x2 average pooling between
//! them. Weights are He-normal draws from a ChaCha8 stream, so the
//! extractor is a pure function of its seed. Its distances are not
//! comparable to those of pretrained perceptual networks.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsfr_core::metrics::FeatureExtractor;

use crate::graph::{Act, Graph, Var};
use crate::layers::im2col;
use crate::tensor::Tensor;

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed;
pub const DEFAULT_STAGE_CHANNELS: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    pub seed: u64,
    pub channels: Vec<usize>,
    /// `(9 * c_in, c_out)` kernels and `(1, c_out)` biases per stage
    weights: Vec<(Tensor, Tensor)>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Self {
        Self::with_channels(seed, &DEFAULT_STAGE_CHANNELS)
    }

    pub fn with_channels(seed: u64, channels: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 1;
        let mut weights = Vec::with_capacity(channels.len());
        for &c_out in channels {
            let fan_in = 9 * c_in;
            let k = Tensor::normal(fan_in, c_out, (2.0 / fan_in as f64).sqrt(), &mut rng);
            let b = Tensor::normal(1, c_out, 0.01, &mut rng);
            weights.push((k, b));
            c_in = c_out;
        }
        Self {
            seed,
            channels: channels.to_vec(),
            weights,
        }
    }

    /// Per-stage activations of an `(h*w, 1)` image inside `g`.
    pub fn features_var(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Vec<Var> {
        let (mut f, mut hh, mut ww) = (x, h, w);
        let mut out = Vec::with_capacity(self.weights.len());
        for (stage, (k, b)) in self.weights.iter().enumerate() {
            if stage > 0 {
                f = g.avg_pool(f, hh, ww, 2);
                hh /= 2;
                ww /= 2;
            }
            let cols = im2col(g, f, hh, ww);
            let kv = g.constant(k.clone());
            let bv = g.constant(b.clone());
            let y = g.linear(cols, kv, Some(bv));
            f = g.act(y, Act::Relu);
            out.push(f);
        }
        out
    }

    /// Sum over stages of the mean absolute activation difference.
    pub fn l1_distance_var(&self, g: &mut Graph, a: Var, b: Var, h: usize, w: usize) -> Var {
        let fa = self.features_var(g, a, h, w);
        let fb = self.features_var(g, b, h, w);
        let terms: Vec<(Var, f64)> = fa.iter().zip(&fb).map(|(x, y)| (g.l1_mean(*x, *y), 1.0)).collect();
        g.weighted_sum(&terms)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, image: &Array2<f64>) -> Vec<Array3<f64>> {
        let (h, w) = image.dim();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(h * w, 1, image.iter().copied().collect()));
        let feats = self.features_var(&mut g, x, h, w);
        let (mut hh, mut ww) = (h, w);
        feats
            .iter()
            .enumerate()
            .map(|(stage, f)| {
                if stage > 0 {
                    hh /= 2;
                    ww /= 2;
                }
                let t = g.value(*f);
                Array3::from_shape_vec((hh, ww, t.cols), t.data.clone()).expect("stage shape")
            })
            .collect()
    }
}
