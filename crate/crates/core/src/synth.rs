//! Synthetic benchmark data: parametric grayscale image classes with
//! controllable intra-class jitter, plus a downstream task whose answer
//! depends on both the image class and a context vector.
//!
//! Half the classes are oriented gratings with random phase, the rest are
//! rings of blobs at a random global rotation. Randomized phase/rotation
//! keeps the class means featureless, so a linear model on raw pixels has
//! nothing to latch onto while the conv trunk separates the classes easily.

use crate::error::{Error, Result};
use crate::extractor::FeatureNet;
use crate::fs_util::{artifact_header, atomic_write};
use crate::pool::{pgm_bytes, pgm_parse, quantize_image, DataPool, Sample};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f32::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub samples_per_class: usize,
    /// Scales every intra-class perturbation; 0 renders each class's
    /// samples identical.
    pub jitter: f32,
    /// Fraction of each class assigned to the meta split M.
    pub meta_fraction: f64,
    /// Fraction of M labels flipped at generation time.
    pub label_noise: f64,
    pub downstream_train_per_class: usize,
    pub downstream_test_per_class: usize,
    /// Width of the one-hot context vector attached to downstream samples.
    pub context_dim: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_classes: 9,
            image_size: 84,
            samples_per_class: 60,
            jitter: 1.0,
            meta_fraction: 0.5,
            label_noise: 0.2,
            downstream_train_per_class: 40,
            downstream_test_per_class: 20,
            context_dim: 8,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(
                "generator needs at least two classes".into(),
            ));
        }
        FeatureNet::spatial_trace(self.image_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(0.0 < self.meta_fraction && self.meta_fraction < 1.0) {
            return Err(Error::Config(format!(
                "meta fraction {} outside (0, 1)",
                self.meta_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label noise {} outside [0, 1)",
                self.label_noise
            )));
        }
        if !(0.0..=1.0).contains(&f64::from(self.jitter)) {
            return Err(Error::Config(format!("jitter {} outside [0, 1]", self.jitter)));
        }
        if self.context_dim == 0 {
            return Err(Error::Config("context_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn num_answers(&self) -> usize {
        2 * self.num_classes
    }

    /// Downstream ground truth: the class picks the answer within a bank,
    /// the context's parity picks the bank. Both inputs are required, yet
    /// a linear readout over (class indicator, context one-hot) can
    /// represent the rule.
    pub fn downstream_answer(&self, true_class: usize, context: usize) -> usize {
        true_class + self.num_classes * (context % 2)
    }
}

/// One downstream example: image plus a context index standing in for a
/// question type.
#[derive(Debug, Clone)]
pub struct DownstreamSample {
    pub id: String,
    pub image: Tensor,
    pub context: usize,
    pub answer: usize,
}

#[derive(Debug, Clone)]
pub struct DownstreamSet {
    pub samples: Vec<DownstreamSample>,
    pub context_dim: usize,
    pub num_answers: usize,
}

fn gaussian(rng: &mut impl Rng) -> f32 {
    // Box-Muller; the tiny chance of ln(0) is dodged by the lower bound.
    let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Render one image of `class`. Classes [0, gratings) are oriented
/// gratings; the rest are blob rings with 2, 3, ... blobs.
fn render(spec: &GeneratorSpec, class: usize, rng: &mut impl Rng) -> Tensor {
    let s = spec.image_size;
    let jitter = spec.jitter;
    let gratings = spec.num_classes.div_ceil(2);
    let mut data = vec![0.0f32; s * s];

    if class < gratings {
        let orientation = PI * class as f32 / gratings as f32
            + jitter * rng.gen_range(-1.0f32..1.0) * 0.05 * PI / gratings as f32;
        let wavelength = s as f32 / 4.0 * (1.0 + 0.15 * jitter * rng.gen_range(-1.0f32..1.0));
        let phase = 2.0 * PI * jitter * rng.gen_range(0.0f32..1.0);
        let amplitude = 0.38 * (1.0 + 0.2 * jitter * rng.gen_range(-1.0f32..1.0));
        let (dx, dy) = (orientation.cos(), orientation.sin());
        for i in 0..s {
            for j in 0..s {
                let proj = dx * j as f32 + dy * i as f32;
                data[i * s + j] = 0.5 + amplitude * (2.0 * PI * proj / wavelength + phase).sin();
            }
        }
    } else {
        let blobs = class - gratings + 2;
        let rotation = 2.0 * PI * jitter * rng.gen_range(0.0f32..1.0);
        let ring = 0.30 * s as f32;
        let sigma = 0.085 * s as f32 * (1.0 + 0.2 * jitter * rng.gen_range(-1.0f32..1.0));
        let amplitude = 0.62 * (2.0 / blobs as f32).sqrt();
        let center = (s as f32 - 1.0) / 2.0;
        let mut centers = Vec::with_capacity(blobs);
        for b in 0..blobs {
            let angle = rotation + 2.0 * PI * b as f32 / blobs as f32
                + jitter * rng.gen_range(-1.0f32..1.0) * 0.25 / blobs as f32;
            let radial = ring * (1.0 + 0.08 * jitter * rng.gen_range(-1.0f32..1.0));
            centers.push((center + radial * angle.cos(), center + radial * angle.sin()));
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        for i in 0..s {
            for j in 0..s {
                let mut v = 0.18;
                for &(cx, cy) in &centers {
                    let d2 = (j as f32 - cx).powi(2) + (i as f32 - cy).powi(2);
                    v += amplitude * (-d2 * inv).exp();
                }
                data[i * s + j] = v;
            }
        }
    }

    let noise_sigma = 0.035 * jitter;
    for v in data.iter_mut() {
        if noise_sigma > 0.0 {
            *v += noise_sigma * gaussian(rng);
        }
        *v = v.clamp(0.0, 1.0);
    }
    let mut image = Tensor::from_vec(vec![1, s, s], data).expect("render shape");
    quantize_image(&mut image);
    image
}

/// Generate the data pool (with the configured label noise already
/// injected) and the downstream train/test sets.
pub fn generate(
    spec: &GeneratorSpec,
    root_seed: u64,
) -> Result<(DataPool, DownstreamSet, DownstreamSet)> {
    spec.validate()?;
    let mut data_rng = crate::rng::stream(root_seed, "data", &[]);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let meta_per_class = ((spec.samples_per_class as f64) * spec.meta_fraction).round() as usize;
    let mut counter = 0usize;
    for class in 0..spec.num_classes {
        for k in 0..spec.samples_per_class {
            let image = render(spec, class, &mut data_rng);
            samples.push(Sample {
                id: format!("s{:05}", counter),
                image,
                meta_label: (k < meta_per_class).then_some(class),
                true_label: class,
                noisy: false,
            });
            counter += 1;
        }
    }
    let pool = DataPool::new(samples, spec.num_classes)?;
    let mut noise_rng = crate::rng::stream(root_seed, "noise", &[]);
    let pool = crate::pool::inject_noise(&pool, spec.label_noise, &mut noise_rng)?;

    let make_set = |prefix: &str, per_class: usize, stream_idx: u64| -> DownstreamSet {
        let mut rng = crate::rng::stream(root_seed, "downstream-data", &[stream_idx]);
        let mut samples = Vec::with_capacity(spec.num_classes * per_class);
        let mut counter = 0usize;
        for class in 0..spec.num_classes {
            for _ in 0..per_class {
                let image = render(spec, class, &mut rng);
                let context = rng.gen_range(0..spec.context_dim);
                samples.push(DownstreamSample {
                    id: format!("{}{:05}", prefix, counter),
                    image,
                    context,
                    answer: spec.downstream_answer(class, context),
                });
                counter += 1;
            }
        }
        DownstreamSet {
            samples,
            context_dim: spec.context_dim,
            num_answers: spec.num_answers(),
        }
    };
    let train = make_set("dtr", spec.downstream_train_per_class, 0);
    let test = make_set("dte", spec.downstream_test_per_class, 1);
    Ok((pool, train, test))
}

// ── Serialization ────────────────────────────────────────────────────

/// Write `<name>.tsv` plus graymaps under `images/` in `dir`.
pub fn save_downstream(
    dir: &Path,
    name: &str,
    set: &DownstreamSet,
    config_hash: &str,
) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    let mut manifest = artifact_header(
        "mmq-downstream",
        config_hash,
        &[
            ("context_dim", set.context_dim.to_string()),
            ("num_answers", set.num_answers.to_string()),
        ],
    );
    for s in &set.samples {
        let rel = format!("images/{}.pgm", s.id);
        atomic_write(&dir.join(&rel), &pgm_bytes(&s.image)?)?;
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, s.context, s.answer, rel));
    }
    atomic_write(&dir.join(format!("{}.tsv", name)), manifest.as_bytes())
}

pub fn load_downstream(dir: &Path, name: &str) -> Result<(DownstreamSet, String)> {
    let path = dir.join(format!("{}.tsv", name));
    let text = crate::fs_util::read_to_string(&path)?;
    let mut lines = crate::fs_util::lines_of(&text);
    let (hash, attrs) = crate::fs_util::parse_artifact_header(&mut lines, "mmq-downstream")?;
    let get = |key: &str| -> Result<usize> {
        attrs
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("downstream manifest missing {}", key),
            })
    };
    let context_dim = get("context_dim")?;
    let num_answers = get("num_answers")?;
    let mut samples = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse = |v: &str, what: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad {} {:?}", what, v),
            })
        };
        let context = parse(fields[1], "context")?;
        let answer = parse(fields[2], "answer")?;
        let image_path = dir.join(fields[3]);
        let bytes = std::fs::read(&image_path)
            .map_err(|e| Error::io(image_path.display().to_string(), e))?;
        samples.push(DownstreamSample {
            id: fields[0].to_string(),
            image: pgm_parse(&bytes, fields[3])?,
            context,
            answer,
        });
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((
        DownstreamSet {
            samples,
            context_dim,
            num_answers,
        },
        hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> GeneratorSpec {
        GeneratorSpec {
            num_classes: 4,
            image_size: 32,
            samples_per_class: 6,
            jitter: 1.0,
            meta_fraction: 0.5,
            label_noise: 0.0,
            downstream_train_per_class: 3,
            downstream_test_per_class: 2,
            context_dim: 8,
        }
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let spec = tiny_spec();
        let (p1, tr1, te1) = generate(&spec, 42).unwrap();
        let (p2, tr2, te2) = generate(&spec, 42).unwrap();
        for (a, b) in p1.samples.iter().zip(&p2.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.meta_label, b.meta_label);
            let ab: Vec<u32> = a.image.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.image.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        for (a, b) in tr1.samples.iter().zip(&tr2.samples) {
            assert_eq!(a.context, b.context);
            assert_eq!(a.answer, b.answer);
        }
        assert_eq!(te1.samples.len(), te2.samples.len());
    }

    #[test]
    fn zero_jitter_makes_classes_degenerate() {
        let mut spec = tiny_spec();
        spec.jitter = 0.0;
        let (pool, _, _) = generate(&spec, 7).unwrap();
        for class in 0..spec.num_classes {
            let images: Vec<&Tensor> = pool
                .samples
                .iter()
                .filter(|s| s.true_label == class)
                .map(|s| &s.image)
                .collect();
            for img in &images[1..] {
                assert_eq!(img.data, images[0].data);
            }
        }
    }

    #[test]
    fn pool_is_class_balanced_with_pixels_in_range() {
        let spec = tiny_spec();
        let (pool, _, _) = generate(&spec, 3).unwrap();
        assert_eq!(pool.len(), 24);
        for class in 0..4 {
            let count = pool.samples.iter().filter(|s| s.true_label == class).count();
            assert_eq!(count, 6);
        }
        for s in &pool.samples {
            assert!(s.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(pool.m_len(), 12);
    }

    #[test]
    fn configured_label_noise_is_applied() {
        let mut spec = tiny_spec();
        spec.label_noise = 0.25;
        let (pool, _, _) = generate(&spec, 5).unwrap();
        assert_eq!(pool.mislabeled_in_m(), 3); // round(0.25 * 12)
    }

    #[test]
    fn downstream_answer_is_total_and_deterministic() {
        let spec = tiny_spec();
        for class in 0..spec.num_classes {
            for ctx in 0..spec.context_dim {
                let a = spec.downstream_answer(class, ctx);
                assert!(a < spec.num_answers());
                assert_eq!(a, spec.downstream_answer(class, ctx));
            }
        }
    }

    #[test]
    fn downstream_round_trips_through_manifest() {
        let spec = tiny_spec();
        let (_, train, _) = generate(&spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_downstream(dir.path(), "train", &train, "h123").unwrap();
        let (back, hash) = load_downstream(dir.path(), "train").unwrap();
        assert_eq!(hash, "h123");
        assert_eq!(back.samples.len(), train.samples.len());
        for (a, b) in train.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.context, b.context);
            assert_eq!(a.answer, b.answer);
            assert_eq!(a.image.data, b.image.data);
        }
    }
}
