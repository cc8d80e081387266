use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::latent::{AverageLatent, LayeredLatent};
use super::spec::GeneratorSpec;
use crate::diffcore::{kernels, resize_bilinear, Tape, Tensor, Var};
use crate::error::{Error, Result};

const LEAK: f64 = 0.2;
const NORM_EPS: f64 = 1e-4;
/// Modulation strength of layer 0; layer `i` uses `MOD_SCALE · MOD_DECAY^i`.
const MOD_SCALE: f64 = 0.6;
const MOD_DECAY: f64 = 0.88;
const SHIFT_SCALE: f64 = 0.8;
const FIELD_SCALE: f64 = 0.5;
const FIELD_GRID: usize = 8;
/// Strength of the latent-driven spatial shifts, relative to the channel shifts.
const SPATIAL_SCALE: f64 = 3.0;
/// Layers up to this resolution get latent-driven spatial shifts.
const SPATIAL_MAX_RES: usize = 64;
const OUT_GAIN: f64 = 0.6;
const RGB_DECAY: f64 = 0.8;
const MARKER_KAPPA: f64 = 12.0;
/// Relative spread of the marker radius across latents.
const RADIUS_MOTION: f64 = 0.15;
const REFERENCE_SAMPLES: usize = 1024;

/// How an optimization latent is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitMode {
    Average,
    TruncatedRandom { alpha: f64 },
}

#[derive(Clone, Debug)]
struct Layer {
    res: usize,
    cin: usize,
    cout: usize,
    upsample: bool,
    /// `[latent_dim, cin]`, pre-scaled by the layer strength.
    scale_w: Tensor,
    /// `[latent_dim, cout]`, pre-scaled.
    shift_w: Tensor,
    /// `[cout, cin]`
    mix: Arc<Tensor>,
    /// `[cout, res, res]`
    field: Tensor,
    /// `[latent_dim, cout·res·res]` spatial shift basis on low-resolution layers.
    spatial: Option<Tensor>,
    /// `[3, cout]` when this layer feeds the color output.
    to_rgb: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct Marker {
    /// `[latent_dim, 3]`
    motion: Tensor,
    /// `[3]` center row, center col, radius in pixels.
    origin: Tensor,
    aspect: f64,
}

/// A frozen generator instantiated from its [`GeneratorSpec`].
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    map_w1: Vec<f64>,
    map_b1: Vec<f64>,
    map_w2: Vec<f64>,
    map_b2: Vec<f64>,
    constant: Tensor,
    layers: Vec<Layer>,
    rgb_bias: Tensor,
    markers: Vec<Marker>,
    /// Mean mapped latent the marker motion is measured from.
    marker_ref: Tensor,
    /// `[n_layers, n_layers + 1]` expansion from (base, offsets) to per-layer codes.
    expand: Tensor,
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn unsquash(y: f64) -> f64 {
    let u = (2.0 * y - 1.0).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
    u / (1.0 - u * u).sqrt()
}

/// Smooth random field: coarse noise, upsampled.
fn smooth_field(c: usize, res: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let coarse = res.min(FIELD_GRID);
    let noise = randn(&[c, coarse, coarse], std, rng);
    resize_bilinear(&noise, res, res).expect("field dimensions are positive")
}

impl Generator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.latent_dim;
        let n = spec.n_layers;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let scale = spec.latent_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

        let map_w1 = randn(&[d, d], inv_sqrt_d, &mut rng).into_data();
        let map_b1 = randn(&[d], 0.1, &mut rng).into_data();
        let map_w2 = randn(&[d, d], scale * inv_sqrt_d, &mut rng).into_data();
        let map_b2 = randn(&[d], scale * 0.1, &mut rng).into_data();

        let c0 = spec.layer_channels(0);
        let b = spec.base_resolution;
        let constant = randn(&[c0, b, b], 1.0, &mut rng);

        let mut srng = seed_stream(spec.seed, 3);
        let mut layers = Vec::with_capacity(n);
        let mut cin = c0;
        let mut prev_res = b;
        for i in 0..n {
            let res = spec.layer_resolution(i);
            let cout = spec.layer_channels(i);
            let strength = MOD_SCALE * MOD_DECAY.powi(i as i32) / scale;
            let scale_w = randn(&[d, cin], strength * inv_sqrt_d, &mut rng);
            let shift_w = randn(&[d, cout], SHIFT_SCALE * strength * inv_sqrt_d, &mut rng);
            let mix = Arc::new(randn(&[cout, cin], 1.0 / (cin as f64).sqrt(), &mut rng));
            let field = smooth_field(cout, res, FIELD_SCALE, &mut rng);
            let spatial = (res <= SPATIAL_MAX_RES).then(|| {
                let std = SPATIAL_SCALE * strength * inv_sqrt_d;
                smooth_field(d * cout, res, std, &mut srng)
                    .reshape(&[d, cout * res * res])
                    .expect("field has d·cout planes")
            });
            let feeds_rgb = i % 2 == 1 || i + 1 == n;
            let to_rgb = feeds_rgb.then(|| {
                let gain = RGB_DECAY.powi((i / 2) as i32) / (cout as f64).sqrt();
                randn(&[3, cout], gain, &mut rng)
            });
            layers.push(Layer {
                res,
                cin,
                cout,
                upsample: res != prev_res,
                scale_w,
                shift_w,
                mix,
                field,
                spatial,
                to_rgb,
            });
            cin = cout;
            prev_res = res;
        }
        let mut gen = Generator {
            spec: spec.clone(),
            map_w1,
            map_b1,
            map_w2,
            map_b2,
            constant,
            layers,
            rgb_bias: Tensor::zeros(&[3]),
            markers: Vec::new(),
            marker_ref: Tensor::zeros(&[1, d]),
            expand: expansion(n),
        };

        let reference = gen.average_latent_seeded(REFERENCE_SAMPLES, seed_stream(spec.seed, 2));
        // Center each color channel at the reference latent so that
        // generators with different seeds share a neutral palette.
        let img = gen.generate(&LayeredLatent::flat(&reference.w_avg, n))?;
        let plane = spec.out_resolution * spec.out_resolution;
        let bias: Vec<f64> = img
            .data()
            .chunks(plane)
            .map(|ch| -ch.iter().map(|&y| unsquash(y)).sum::<f64>() / plane as f64)
            .collect();
        gen.rgb_bias = Tensor::vector(bias);
        gen.marker_ref = Tensor::from_parts(vec![1, d], reference.w_avg);

        if !spec.markers.is_empty() {
            let mut mrng = seed_stream(spec.seed, 1);
            let side = spec.out_resolution as f64;
            for m in &spec.markers {
                let mut motion = randn(&[d, 3], inv_sqrt_d / scale, &mut mrng);
                for row in motion.data_mut().chunks_mut(3) {
                    row[0] *= m.motion * side;
                    row[1] *= m.motion * side;
                    row[2] *= RADIUS_MOTION * m.radius * side;
                }
                gen.markers.push(Marker {
                    motion,
                    origin: Tensor::vector(vec![m.row * side, m.col * side, m.radius * side]),
                    aspect: m.aspect,
                });
            }
        }
        Ok(gen)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Fixed two-layer map from `z` to `w`.
    pub fn map_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.spec.latent_dim;
        if z.len() != d {
            return Err(Error::shape(
                "map_latent",
                format!("z has {} entries, latent_dim is {d}", z.len()),
            ));
        }
        let affine = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|r| b[r] + w[r * d..(r + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                .collect()
        };
        let h: Vec<f64> = affine(&self.map_w1, &self.map_b1, z)
            .into_iter()
            .map(|v| kernels::smooth_leaky(v, LEAK))
            .collect();
        Ok(affine(&self.map_w2, &self.map_b2, &h))
    }

    pub fn sample_z(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.spec.latent_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect()
    }

    /// Mean of `map_latent` over `n_samples` standard-normal draws.
    pub fn average_latent(&self, n_samples: usize, seed: u64) -> Result<AverageLatent> {
        if n_samples == 0 {
            return Err(Error::invalid("n_samples", "must be at least 1"));
        }
        Ok(self.average_latent_seeded(n_samples, ChaCha8Rng::seed_from_u64(seed)))
    }

    fn average_latent_seeded(&self, n_samples: usize, mut rng: ChaCha8Rng) -> AverageLatent {
        let d = self.spec.latent_dim;
        let mut acc = vec![0.0; d];
        for _ in 0..n_samples {
            let z = self.sample_z(&mut rng);
            let w = self.map_latent(&z).expect("sampled z has latent_dim entries");
            acc.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= n_samples as f64);
        AverageLatent {
            w_avg: acc,
            sample_count: n_samples,
        }
    }

    /// Starting point for optimization; offsets are always zero.
    pub fn init_latent(&self, mode: InitMode, w_avg: &[f64], seed: u64) -> Result<LayeredLatent> {
        if w_avg.len() != self.spec.latent_dim {
            return Err(Error::shape(
                "init_latent",
                format!("w_avg has {} entries", w_avg.len()),
            ));
        }
        let base = match mode {
            InitMode::Average => w_avg.to_vec(),
            InitMode::TruncatedRandom { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::invalid("alpha", format!("{alpha} is outside [0, 1]")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let z = self.sample_z(&mut rng);
                let w_rand = self.map_latent(&z)?;
                w_rand
                    .iter()
                    .zip(w_avg)
                    .map(|(r, a)| r * (1.0 - alpha) + a * alpha)
                    .collect()
            }
        };
        Ok(LayeredLatent::flat(&base, self.spec.n_layers))
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        let want = [self.spec.n_layers + 1, self.spec.latent_dim];
        if shape != want {
            return Err(Error::shape(
                "generate",
                format!("latent {shape:?}, generator expects {want:?}"),
            ));
        }
        Ok(())
    }

    /// Record the synthesis network on `tape`. `latent` is the
    /// `[n_layers + 1, latent_dim]` tensor of a [`LayeredLatent`].
    pub fn synthesize(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        self.check_latent(tape.shape(latent))?;
        let expand = tape.constant(self.expand.clone());
        let codes = tape.matmul(expand, latent)?;

        let mut x = tape.constant(self.constant.clone());
        let mut rgb: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.upsample {
                x = tape.resize_bilinear(x, layer.res, layer.res)?;
            }
            let code = tape.narrow(codes, i, 1)?;
            let sw = tape.constant(layer.scale_w.clone());
            let s = tape.matmul(code, sw)?;
            let s = tape.offset(s, 1.0);
            let s = tape.reshape(s, &[layer.cin])?;
            let tw = tape.constant(layer.shift_w.clone());
            let t = tape.matmul(code, tw)?;
            let t = tape.reshape(t, &[layer.cout])?;
            x = tape.style_layer(x, s, t, &layer.mix, &layer.field, LEAK, NORM_EPS)?;
            if let Some(b) = &layer.spatial {
                let b = tape.constant(b.clone());
                let f = tape.matmul(code, b)?;
                let f = tape.reshape(f, &[layer.cout, layer.res, layer.res])?;
                x = tape.add(x, f)?;
            }
            let plane = layer.res * layer.res;

            if let Some(p) = &layer.to_rgb {
                let p = tape.constant(p.clone());
                let flat = tape.reshape(x, &[layer.cout, plane])?;
                let c = tape.matmul(p, flat)?;
                let c = tape.reshape(c, &[3, layer.res, layer.res])?;
                rgb = Some(match rgb {
                    None => c,
                    Some(prev) => {
                        let prev = if tape.shape(prev)[1] != layer.res {
                            tape.resize_bilinear(prev, layer.res, layer.res)?
                        } else {
                            prev
                        };
                        tape.add(prev, c)?
                    }
                });
            }
        }
        let rgb = rgb.expect("the last layer always feeds the color output");
        let bias = tape.constant(self.rgb_bias.clone());
        let rgb = tape.scale(rgb, OUT_GAIN);
        let rgb = tape.channel_add(rgb, bias)?;
        let color = tape.squash(rgb);
        if self.markers.is_empty() {
            return Ok(color);
        }

        let mut parts = vec![color];
        let centered = self.marker_code(tape, codes)?;
        let side = self.spec.out_resolution;
        for m in &self.markers {
            let mw = tape.constant(m.motion.clone());
            let p = tape.matmul(centered, mw)?;
            let p = tape.reshape(p, &[3])?;
            let origin = tape.constant(m.origin.clone());
            let p = tape.add(p, origin)?;
            parts.push(tape.blob(p, side, side, m.aspect, MARKER_KAPPA)?);
        }
        tape.concat(&parts)
    }

    /// Mean of the first four layer codes, minus the reference latent.
    fn marker_code(&self, tape: &mut Tape, codes: Var) -> Result<Var> {
        let n = self.spec.n_layers;
        let k = n.min(4);
        let mut pick = vec![0.0; n];
        pick[..k].iter_mut().for_each(|v| *v = 1.0 / k as f64);
        let pick = tape.constant(Tensor::from_parts(vec![1, n], pick));
        let mean = tape.matmul(pick, codes)?;
        let reference = tape.constant(self.marker_ref.clone());
        tape.sub(mean, reference)
    }

    /// Deterministic synthesis without gradients.
    pub fn generate(&self, latent: &LayeredLatent) -> Result<Tensor> {
        let mut tape = Tape::new();
        let l = tape.constant(latent.as_tensor().clone());
        let out = self.synthesize(&mut tape, l)?;
        Ok(tape.value(out).clone())
    }

    /// Analytic `[center_row, center_col, radius]` of each marker blob, in pixels.
    pub fn marker_params(&self, latent: &LayeredLatent) -> Result<Vec<[f64; 3]>> {
        self.check_latent(latent.as_tensor().shape())?;
        let n = self.spec.n_layers;
        let k = n.min(4);
        let d = self.spec.latent_dim;
        let mut c = vec![0.0; d];
        for i in 0..k {
            for (a, v) in c.iter_mut().zip(latent.code(i)) {
                *a += v / k as f64;
            }
        }
        c.iter_mut()
            .zip(self.marker_ref.data())
            .for_each(|(a, r)| *a -= r);
        Ok(self
            .markers
            .iter()
            .map(|m| {
                let mut p = [0.0; 3];
                for (j, out) in p.iter_mut().enumerate() {
                    *out = m.origin.data()[j]
                        + (0..d).map(|q| c[q] * m.motion.data()[q * 3 + j]).sum::<f64>();
                }
                p
            })
            .collect())
    }
}

fn seed_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn expansion(n: usize) -> Tensor {
    let mut e = vec![0.0; n * (n + 1)];
    for i in 0..n {
        e[i * (n + 1)] = 1.0;
        e[i * (n + 1) + i + 1] = 1.0;
    }
    Tensor::from_parts(vec![n, n + 1], e)
}
