//! Synthetic thin-smear cell crops.
//!
//! Both classes are a pink elliptical cell on a black background with jittered
//! geometry, tint and sensor noise. Parasitized crops add 1-3 small purple
//! stained inclusions inside the cell. The class signal is therefore carried
//! mostly by colour, not by shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Label, SeededPrng};
use crate::imaging::{encode_png, PixelImage};

pub const GENERATOR_VERSION: &str = "cellgrade-synth/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub parasitized_fraction: f64,
    pub side: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 200, parasitized_fraction: 0.5, side: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator_version: String,
    pub seed: u64,
    pub n: usize,
    pub fraction: f64,
    pub side: usize,
    pub parasitized: usize,
    pub uninfected: usize,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        (u * u + v * v).sqrt()
    }
}

/// Renders one crop. Identical `(rng state, label, side)` gives an identical
/// image.
pub fn render_cell(rng: &mut SeededPrng, label: Label, side: usize) -> PixelImage {
    let s = side as f64;

    let cell = Ellipse {
        cx: s * rng.uniform(0.36, 0.64),
        cy: s * rng.uniform(0.36, 0.64),
        a: s * rng.uniform(0.28, 0.34),
        b: s * rng.uniform(0.26, 0.32),
        cos: 0.0,
        sin: 0.0,
    };
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let cell = Ellipse { cos: theta.cos(), sin: theta.sin(), ..cell };
    let pink = [rng.uniform(0.84, 0.90), rng.uniform(0.48, 0.56), rng.uniform(0.58, 0.64)];
    let shade = rng.uniform(0.10, 0.15);

    let mut blobs = Vec::new();
    if label == Label::Parasitized {
        let count = 1 + rng.below(3);
        for _ in 0..count {
            let r = rng.uniform(0.0, 0.55);
            let phi = rng.uniform(0.0, std::f64::consts::TAU);
            let (u, v) = (r * phi.cos() * cell.a, r * phi.sin() * cell.b);
            let cx = cell.cx + u * cell.cos - v * cell.sin;
            let cy = cell.cy + u * cell.sin + v * cell.cos;
            let radius = s * rng.uniform(0.08, 0.13);
            let color = [rng.uniform(0.38, 0.52), rng.uniform(0.12, 0.26), rng.uniform(0.50, 0.66)];
            blobs.push((cx, cy, radius, color));
        }
    }

    let noise_amp = rng.uniform(0.01, 0.04);
    let mut noise = Vec::with_capacity(side * side * 3);
    for _ in 0..side * side * 3 {
        noise.push(rng.uniform(-noise_amp, noise_amp));
    }

    PixelImage::from_fn(side, side, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let r = cell.radius(px, py);
        if r >= 1.0 {
            return [0.0; 3];
        }
        let f = 1.0 - shade * r * r;
        let mut rgb = [pink[0] * f, pink[1] * f, pink[2] * f];
        for &(bx, by, br, color) in &blobs {
            if (px - bx).powi(2) + (py - by).powi(2) < br * br {
                rgb = color;
            }
        }
        let base = (y * side + x) * 3;
        [rgb[0] + noise[base], rgb[1] + noise[base + 1], rgb[2] + noise[base + 2]]
    })
}

/// Writes `n` crops under `out/Parasitized` and `out/Uninfected` plus a
/// `manifest.json`.
pub fn synth_generate(out: &Path, config: &SynthConfig) -> Result<SynthManifest, DataError> {
    if config.n < 2 {
        return Err(DataError::Config(format!("need n >= 2, got {}", config.n)));
    }
    if !(config.parasitized_fraction > 0.0 && config.parasitized_fraction < 1.0) {
        return Err(DataError::Config(format!(
            "parasitized fraction must be in (0, 1), got {}",
            config.parasitized_fraction
        )));
    }
    if config.side < 8 {
        return Err(DataError::Config(format!("side must be >= 8, got {}", config.side)));
    }
    let parasitized = ((config.n as f64 * config.parasitized_fraction).round() as usize).clamp(1, config.n - 1);
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| DataError::Io { path, source }
    };
    for label in Label::ALL {
        let dir = out.join(label.dir_name());
        fs::create_dir_all(&dir).map_err(io(&dir))?;
    }
    for i in 0..config.n {
        let label = if i < parasitized { Label::Parasitized } else { Label::Uninfected };
        let mut rng = SeededPrng::derive(config.seed, i as u64);
        let img = render_cell(&mut rng, label, config.side);
        let bytes = encode_png(&img).map_err(|source| DataError::Image { path: out.to_owned(), source })?;
        let path = out.join(label.dir_name()).join(format!("cell_{i:05}.png"));
        fs::write(&path, bytes).map_err(io(&path))?;
    }
    let manifest = SynthManifest {
        generator_version: GENERATOR_VERSION.into(),
        seed: config.seed,
        n: config.n,
        fraction: config.parasitized_fraction,
        side: config.side,
        parasitized,
        uninfected: config.n - parasitized,
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use crate::imaging::extract_histogram_features;

    #[test]
    fn counts_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n: 100, parasitized_fraction: 0.5, side: 24, seed: 5 };
        let m = synth_generate(dir.path(), &cfg).unwrap();
        assert_eq!((m.parasitized, m.uninfected), (50, 50));
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.class_counts(), [50, 50]);
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let back: SynthManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn byte_identical_across_runs() {
        let cfg = SynthConfig { n: 6, parasitized_fraction: 0.5, side: 16, seed: 11 };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(a.path(), &cfg).unwrap();
        synth_generate(b.path(), &cfg).unwrap();
        for i in 0..6 {
            let dir = if i < 3 { "Parasitized" } else { "Uninfected" };
            let name = format!("{dir}/cell_{i:05}.png");
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
    }

    #[test]
    fn rejects_bad_config() {
        let dir = tempfile::tempdir().unwrap();
        let bad = SynthConfig { n: 1, ..SynthConfig::default() };
        assert!(synth_generate(dir.path(), &bad).is_err());
        let bad = SynthConfig { parasitized_fraction: 1.0, ..SynthConfig::default() };
        assert!(synth_generate(dir.path(), &bad).is_err());
    }

    #[test]
    fn purple_mass_separates_classes() {
        // Histogram mass in the violet hue band (h in [0.625, 0.875)) with
        // saturation above one half, averaged per class.
        let bins = 8;
        let mut mass = [0.0f64; 2];
        let per_class = 40;
        for label in Label::ALL {
            for i in 0..per_class {
                let mut rng = SeededPrng::derive(99, (label.index() * 1000 + i) as u64);
                let img = render_cell(&mut rng, label, 48);
                let f = extract_histogram_features(&img, bins);
                for h in 5..7 {
                    for s in 4..8 {
                        for v in 0..8 {
                            mass[label.index()] += f.values[(h * bins + s) * bins + v];
                        }
                    }
                }
            }
        }
        let (healthy, infected) = (mass[0] / per_class as f64, mass[1] / per_class as f64);
        assert!(infected - healthy > 0.0, "healthy {healthy} infected {infected}");
    }
}
