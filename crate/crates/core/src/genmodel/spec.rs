use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A detection marker drawn into its own output channel.
///
/// Positions and radius are fractions of the output height/width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSpec {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    /// Horizontal over vertical semi-axis.
    #[serde(default = "default_aspect")]
    pub aspect: f64,
    /// Standard deviation of the latent-driven center offset, as a fraction
    /// of the side length.
    #[serde(default = "default_motion")]
    pub motion: f64,
}

fn default_aspect() -> f64 {
    0.85
}

fn default_motion() -> f64 {
    0.03
}

impl MarkerSpec {
    pub fn new(row: f64, col: f64, radius: f64) -> Self {
        MarkerSpec {
            row,
            col,
            radius,
            aspect: default_aspect(),
            motion: default_motion(),
        }
    }
}

/// Shape and seed of a frozen generator. Weights are derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub out_resolution: usize,
    #[serde(default = "default_base_resolution")]
    pub base_resolution: usize,
    /// Feature channels at resolutions up to 64.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Feature channels above 64.
    #[serde(default = "default_hires_channels")]
    pub hires_channels: usize,
    /// Spread of mapped latents. Synthesis weights are divided by it, so it
    /// changes how far a fixed optimizer step moves the image, not the
    /// images themselves.
    #[serde(default = "default_latent_scale")]
    pub latent_scale: f64,
    #[serde(default)]
    pub markers: Vec<MarkerSpec>,
}

fn default_layers() -> usize {
    18
}
fn default_latent_dim() -> usize {
    32
}
fn default_base_resolution() -> usize {
    4
}
fn default_channels() -> usize {
    8
}
fn default_hires_channels() -> usize {
    4
}
fn default_latent_scale() -> f64 {
    1.0
}

impl GeneratorSpec {
    /// 256×256 body-style generator with one marker.
    pub fn canvas(seed: u64) -> Self {
        GeneratorSpec {
            seed,
            n_layers: default_layers(),
            latent_dim: default_latent_dim(),
            out_resolution: 256,
            base_resolution: default_base_resolution(),
            channels: default_channels(),
            hires_channels: default_hires_channels(),
            latent_scale: default_latent_scale(),
            markers: vec![MarkerSpec::new(0.25, 0.5, 0.07)],
        }
    }

    /// 64×64 part generator without markers.
    pub fn inset(seed: u64) -> Self {
        GeneratorSpec {
            out_resolution: 64,
            latent_scale: 0.25,
            markers: Vec::new(),
            ..Self::canvas(seed)
        }
    }

    pub fn out_channels(&self) -> usize {
        3 + self.markers.len()
    }

    /// Spatial size of layer `i`.
    pub fn layer_resolution(&self, i: usize) -> usize {
        let shift = (i / 2).min(31);
        (self.base_resolution << shift).min(self.out_resolution)
    }

    pub fn layer_channels(&self, i: usize) -> usize {
        if self.layer_resolution(i) > 64 {
            self.hires_channels
        } else {
            self.channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, detail: String| Err(Error::invalid(name, detail));
        if self.n_layers == 0 {
            return bad("n_layers", "must be positive".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be positive".into());
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return bad("latent_scale", format!("{} must be positive", self.latent_scale));
        }
        if self.channels == 0 || self.hires_channels == 0 {
            return bad("channels", "must be positive".into());
        }
        let (b, o) = (self.base_resolution, self.out_resolution);
        if b == 0 || o < b || o % b != 0 || !(o / b).is_power_of_two() {
            return bad(
                "out_resolution",
                format!("{o} is not a power-of-two multiple of base {b}"),
            );
        }
        if self.layer_resolution(self.n_layers - 1) != o {
            return bad(
                "n_layers",
                format!("{} layers never reach resolution {o}", self.n_layers),
            );
        }
        for m in &self.markers {
            if !(m.radius > 0.0 && m.aspect > 0.0 && m.motion >= 0.0) {
                return bad("markers", format!("{m:?} needs positive radius and aspect"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GeneratorSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_ladder() {
        let s = GeneratorSpec::canvas(0);
        let ladder: Vec<usize> = (0..18).map(|i| s.layer_resolution(i)).collect();
        assert_eq!(
            ladder,
            [4, 4, 8, 8, 16, 16, 32, 32, 64, 64, 128, 128, 256, 256, 256, 256, 256, 256]
        );
        let s = GeneratorSpec::inset(0);
        assert_eq!(s.layer_resolution(17), 64);
        assert_eq!(s.out_channels(), 3);
        assert_eq!(GeneratorSpec::canvas(0).out_channels(), 4);
    }

    #[test]
    fn toml_round_trip() {
        let s = GeneratorSpec::canvas(42);
        let text = s.to_toml().unwrap();
        assert_eq!(GeneratorSpec::from_toml(&text).unwrap(), s);
        let minimal = GeneratorSpec::from_toml("seed = 3\nout_resolution = 64\n").unwrap();
        let expect = GeneratorSpec {
            latent_scale: 1.0,
            ..GeneratorSpec::inset(3)
        };
        assert_eq!(minimal, expect);
        let inset = GeneratorSpec::inset(3);
        assert_eq!(GeneratorSpec::from_toml(&inset.to_toml().unwrap()).unwrap(), inset);
        assert!(GeneratorSpec::from_toml("seed = 3\nout_resolution = 64\nbogus = 1\n").is_err());
        assert!(GeneratorSpec::from_toml("seed = 3\nout_resolution = 48\n").is_err());
    }
}
