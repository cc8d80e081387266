use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use inset_core::diffcore::Tensor;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Command, JobConfig};
use crate::CliError;

/// 8-bit channel value of a float pixel.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Interleaved RGB bytes of the first three channels of a `[c, h, w]` image.
pub fn rgb_bytes(img: &Tensor) -> Result<(Vec<u8>, usize, usize), CliError> {
    let (c, h, w) = img.chw().map_err(CliError::core)?;
    if c < 3 {
        return Err(CliError::Validation(format!(
            "image has {c} channels, need 3"
        )));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + p]));
        }
    }
    Ok((out, h, w))
}

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Writes artifacts under one directory and remembers their hashes.
pub struct OutDir {
    root: PathBuf,
    raw: bool,
    artifacts: Mutex<Vec<Artifact>>,
}

impl OutDir {
    pub fn create(root: &Path, raw: bool) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            raw,
            artifacts: Mutex::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.artifacts
            .lock()
            .expect("artifact list")
            .push(Artifact {
                path: name.to_string(),
                sha256: hex::encode(Sha256::digest(bytes)),
            });
        Ok(())
    }

    /// `name.png`, plus `name.f64` when raw dumps are on.
    pub fn write_image(&self, name: &str, img: &Tensor) -> Result<(), CliError> {
        let (rgb, h, w) = rgb_bytes(img)?;
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut buf), w as u32, h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut wr = enc
                .write_header()
                .map_err(|e| CliError::Validation(format!("png {name}: {e}")))?;
            wr.write_image_data(&rgb)
                .map_err(|e| CliError::Validation(format!("png {name}: {e}")))?;
        }
        self.write_bytes(&format!("{name}.png"), &buf)?;
        if self.raw {
            self.write_bytes(&format!("{name}.f64"), &raw_bytes(img))?;
        }
        Ok(())
    }

    pub fn finish(
        self,
        command: Command,
        cfg: &JobConfig,
        status: &str,
    ) -> Result<Vec<Artifact>, CliError> {
        let mut artifacts = self.artifacts.into_inner().expect("artifact list");
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: command.name(),
            status,
            config_hash: cfg.hash(),
            seeds: &cfg.seeds,
            artifacts: &artifacts,
            config: cfg,
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| CliError::Validation(format!("manifest: {e}")))?;
        let path = self.root.join("manifest.toml");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(artifacts)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    status: &'a str,
    config_hash: String,
    seeds: &'a [u64],
    artifacts: &'a [Artifact],
    config: &'a JobConfig,
}

/// Shape as three little-endian `u64`, then the samples as little-endian `f64`.
pub fn raw_bytes(img: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * img.data().len());
    let mut shape = img.shape().to_vec();
    shape.resize(3, 1);
    for s in shape {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_and_clamps() {
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.4 / 255.0), 0);
        assert_eq!(quantize(100.0 / 255.0), 100);
    }

    #[test]
    fn png_holds_the_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path(), true).unwrap();
        let data: Vec<f64> = (0..4 * 2 * 3).map(|i| i as f64 / 23.0).collect();
        let img = Tensor::new(vec![4, 2, 3], data.clone()).unwrap();
        out.write_image("x", &img).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(
            fs::File::open(dir.path().join("x.png")).unwrap(),
        ));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (3, 2));
        for p in 0..6 {
            for ch in 0..3 {
                assert_eq!(buf[3 * p + ch], quantize(data[ch * 6 + p]));
            }
        }
        let raw = fs::read(dir.path().join("x.f64")).unwrap();
        assert_eq!(raw.len(), 24 + 8 * 24);
        assert_eq!(u64::from_le_bytes(raw[0..8].try_into().unwrap()), 4);
        let artifacts = out
            .finish(Command::Sample, &JobConfig::default(), "ok")
            .unwrap();
        assert_eq!(artifacts.len(), 2);
        assert!(dir.path().join("manifest.toml").exists());
    }
}
