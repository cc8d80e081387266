use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ImageTensor, Tape, Tensor, Var};
use crate::error::{Error, Result};

const STAGE_CHANNELS: [usize; 3] = [6, 8, 8];
const LEAK: f64 = 0.2;
const NORM_EPS: f64 = 1e-3;

/// Frozen random convolutional pyramid used as the perceptual metric.
///
/// Each stage is a 3×3 convolution, a leaky nonlinearity and a 2× average
/// pool; the pooled output of every stage is normalized across channels and
/// compared.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    seed: u64,
    weights: Vec<Tensor>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let weights = STAGE_CHANNELS
            .iter()
            .map(|&cout| {
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let w = Tensor::randn(&[cout, cin, 3, 3], std, &mut rng);
                cin = cout;
                w
            })
            .collect();
        FeatureExtractor { seed, weights }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-stage normalized features of a 3-channel image.
    pub fn features(&self, tape: &mut Tape, img: Var) -> Result<Vec<Var>> {
        let (c, h, w) = tape.value(img).chw()?;
        if c != 3 {
            return Err(Error::shape(
                "perceptual features",
                format!("expected 3 color channels, got {c}"),
            ));
        }
        if h < 8 || w < 8 {
            return Err(Error::shape(
                "perceptual features",
                format!("{h}×{w} is too small for three pooling stages"),
            ));
        }
        let mut x = img;
        let mut out = Vec::with_capacity(self.weights.len());
        for wt in &self.weights {
            let k = tape.constant(wt.clone());
            let y = tape.conv3x3(x, k)?;
            let y = tape.smooth_leaky(y, LEAK);
            let (_, h, w) = tape.value(y).chw()?;
            x = if h % 2 == 0 && w % 2 == 0 {
                tape.box_downsample(y, 2)?
            } else {
                tape.resize_bilinear(y, h.div_ceil(2), w.div_ceil(2))?
            };
            out.push(tape.channel_rms_norm(x, NORM_EPS)?);
        }
        Ok(out)
    }
}

/// Sum over stages of the mean squared feature difference.
pub fn perceptual_distance_var(
    tape: &mut Tape,
    a: Var,
    b: Var,
    fx: &FeatureExtractor,
) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "perceptual_distance",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    let fa = fx.features(tape, a)?;
    let fb = fx.features(tape, b)?;
    let mut total: Option<Var> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let d = tape.sub(x, y)?;
        let d = tape.square(d);
        let m = tape.mean(d);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(total.expect("at least one stage"))
}

pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, fx: &FeatureExtractor) -> Result<f64> {
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let d = perceptual_distance_var(&mut tape, av, bv, fx)?;
    Ok(tape.value(d).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(seed: u64) -> Tensor {
        Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_and_symmetry() {
        let fx = FeatureExtractor::new(5);
        let (a, b) = (noise(1), noise(2));
        assert_eq!(perceptual_distance(&a, &a, &fx).unwrap(), 0.0);
        let ab = perceptual_distance(&a, &b, &fx).unwrap();
        let ba = perceptual_distance(&b, &a, &fx).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-15);
        assert!(perceptual_distance(&a, &Tensor::zeros(&[3, 16, 16]), &fx).is_err());
    }

    #[test]
    fn grows_with_noise_level() {
        let fx = FeatureExtractor::new(5);
        for seed in 0..5 {
            let a = noise(10 + seed);
            let n = Tensor::uniform(&[3, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let dists: Vec<f64> = [0.01, 0.05, 0.1]
                .iter()
                .map(|&eps| {
                    let b = a.zip_map(&n, |x, y| x + eps * y).unwrap();
                    perceptual_distance(&a, &b, &fx).unwrap()
                })
                .collect();
            assert!(dists[0] < dists[1] && dists[1] < dists[2], "{dists:?}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, b) = (noise(3), noise(4));
        let d1 = perceptual_distance(&a, &b, &FeatureExtractor::new(9)).unwrap();
        let d2 = perceptual_distance(&a, &b, &FeatureExtractor::new(9)).unwrap();
        assert_eq!(d1.to_bits(), d2.to_bits());
    }
}
