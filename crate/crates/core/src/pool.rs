//! The data pool: a meta split M of trusted-label samples and an unlabeled
//! split U, with hidden true labels kept only for evaluation. Episodic task
//! sampling draws from M; refinement moves samples between the splits.

use crate::error::{Error, Result};
use crate::fs_util::atomic_write;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// One pooled image. Membership in M is equivalent to `meta_label` being
/// present; `true_label` is never consulted by training code.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub meta_label: Option<usize>,
    pub true_label: usize,
    /// Whether the meta label was deliberately corrupted at injection time.
    pub noisy: bool,
}

#[derive(Debug, Clone)]
pub struct DataPool {
    /// Sorted by id; refinement preserves the full sample set.
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

/// Episode protocol: x tasks, y classes per task, k images per class with
/// the first `update_per_class` of them forming the update half.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub images_per_class: usize,
    pub update_per_class: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec::radiology_protocol()
    }
}

impl EpisodeSpec {
    /// 5 tasks of 3 classes, 6 images each split 3/3.
    pub fn radiology_protocol() -> Self {
        EpisodeSpec {
            tasks: 5,
            classes_per_task: 3,
            images_per_class: 6,
            update_per_class: 3,
        }
    }

    /// 4 tasks of 5 classes, 20 images each split 5/15.
    pub fn pathology_protocol() -> Self {
        EpisodeSpec {
            tasks: 4,
            classes_per_task: 5,
            images_per_class: 20,
            update_per_class: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0
            || self.classes_per_task == 0
            || self.update_per_class == 0
            || self.update_per_class >= self.images_per_class
        {
            return Err(Error::Config(format!(
                "episode protocol {:?} needs tasks > 0, classes > 0 and 0 < update < images",
                self
            )));
        }
        Ok(())
    }
}

/// One task inside an episode: an ordered class list (position = local
/// label) and disjoint update/validation sample sets drawn from M.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub classes: Vec<usize>,
    /// (pool index, local label)
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
}

impl TaskSet {
    /// Map a local head label back to the pool class it stands for.
    pub fn pool_class(&self, local: usize) -> usize {
        self.classes[local]
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub tasks: Vec<TaskSet>,
}

impl DataPool {
    pub fn new(mut samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in samples.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Contract(format!("duplicate sample id {}", pair[0].id)));
            }
        }
        for s in &samples {
            if s.true_label >= num_classes {
                return Err(Error::Label {
                    label: s.true_label,
                    num_classes,
                });
            }
            if let Some(m) = s.meta_label {
                if m >= num_classes {
                    return Err(Error::Label {
                        label: m,
                        num_classes,
                    });
                }
            }
        }
        Ok(DataPool {
            samples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn m_len(&self) -> usize {
        self.samples.iter().filter(|s| s.meta_label.is_some()).count()
    }

    pub fn u_len(&self) -> usize {
        self.len() - self.m_len()
    }

    /// Count of M samples whose current meta label disagrees with the
    /// hidden truth.
    pub fn mislabeled_in_m(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.meta_label.map(|m| m != s.true_label).unwrap_or(false))
            .count()
    }

    /// Pool indices of M members per class, in id order.
    pub fn m_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(label) = s.meta_label {
                map.entry(label).or_default().push(i);
            }
        }
        map
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
    }
}

/// Draw x tasks of y classes with k images each from M, without
/// replacement within a task. Deterministic given the rng state.
pub fn sample_episode(pool: &DataPool, spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    spec.validate()?;
    let by_class = pool.m_by_class();
    let eligible: Vec<usize> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= spec.images_per_class)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < spec.classes_per_task {
        // Name the class closest to having enough samples.
        let deficient = by_class
            .iter()
            .filter(|(_, v)| v.len() < spec.images_per_class)
            .max_by_key(|(_, v)| v.len());
        let detail = match deficient {
            Some((&c, v)) => format!(
                "episode needs {} classes with {} meta samples each; class {} has only {}",
                spec.classes_per_task,
                spec.images_per_class,
                c,
                v.len()
            ),
            None => format!(
                "episode needs {} classes but the meta split covers only {}",
                spec.classes_per_task,
                eligible.len()
            ),
        };
        return Err(Error::capacity(detail));
    }

    let mut tasks = Vec::with_capacity(spec.tasks);
    for _ in 0..spec.tasks {
        let mut classes = eligible.clone();
        classes.shuffle(rng);
        classes.truncate(spec.classes_per_task);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (local, &class) in classes.iter().enumerate() {
            let mut members = by_class[&class].clone();
            members.shuffle(rng);
            members.truncate(spec.images_per_class);
            for (j, &idx) in members.iter().enumerate() {
                if j < spec.update_per_class {
                    train.push((idx, local));
                } else {
                    val.push((idx, local));
                }
            }
        }
        tasks.push(TaskSet {
            classes,
            train,
            val,
        });
    }
    Ok(Episode { tasks })
}

/// Flip exactly round(rate * |M|) meta labels to uniformly random
/// different classes, marking the victims as noisy.
pub fn inject_noise(pool: &DataPool, noise_rate: f64, rng: &mut impl Rng) -> Result<DataPool> {
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(Error::Config(format!(
            "noise rate {} outside [0, 1)",
            noise_rate
        )));
    }
    let mut out = pool.clone();
    let m_indices: Vec<usize> = out
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.meta_label.is_some())
        .map(|(i, _)| i)
        .collect();
    let count = (noise_rate * m_indices.len() as f64).round() as usize;
    if count == 0 {
        return Ok(out);
    }
    if pool.num_classes < 2 {
        return Err(Error::Config(
            "label noise needs at least two classes".into(),
        ));
    }
    let mut victims = m_indices;
    victims.shuffle(rng);
    victims.truncate(count);
    for idx in victims {
        let sample = &mut out.samples[idx];
        let current = sample.meta_label.unwrap();
        let mut flipped = rng.gen_range(0..pool.num_classes - 1);
        if flipped >= current {
            flipped += 1;
        }
        sample.meta_label = Some(flipped);
        sample.noisy = sample.meta_label != Some(sample.true_label);
    }
    Ok(out)
}

// ── Serialization ────────────────────────────────────────────────────

/// Binary PGM bytes for a single-channel image with values in [0,1].
pub(crate) fn pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    if image.shape.len() != 3 || image.shape[0] != 1 {
        return Err(Error::Config(format!(
            "graymap serialization needs a [1,H,W] image, got {:?}",
            image.shape
        )));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(
        image
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(bytes)
}

pub(crate) fn pgm_parse(bytes: &[u8], path: &str) -> Result<Tensor> {
    let err = |msg: &str| Error::Parse {
        line: 0,
        msg: format!("{}: {}", path, msg),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 4 || fields[0] != b"P5" {
        return Err(err("not a binary graymap"));
    }
    let parse_dim = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad header field"))
    };
    let w = parse_dim(fields[1])?;
    let h = parse_dim(fields[2])?;
    if fields[3] != b"255" {
        return Err(err("expected maxval 255"));
    }
    pos += 1; // single whitespace after maxval
    let expected = h * w;
    if bytes.len() < pos + expected {
        return Err(err("truncated pixel data"));
    }
    let data = bytes[pos..pos + expected]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Tensor::from_vec(vec![1, h, w], data)
}

/// Quantize pixels to the 8-bit grid the graymap files use, so the
/// in-memory pool and a reloaded pool are bit-identical.
pub(crate) fn quantize_image(image: &mut Tensor) {
    for v in image.data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Write `manifest.tsv` plus one graymap per sample under `images/`.
pub fn save_pool(dir: &Path, pool: &DataPool, config_hash: &str) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    let mut manifest = crate::fs_util::artifact_header(
        "mmq-pool",
        config_hash,
        &[("num_classes", pool.num_classes.to_string())],
    );
    for s in &pool.samples {
        let rel = format!("images/{}.pgm", s.id);
        atomic_write(&dir.join(&rel), &pgm_bytes(&s.image)?)?;
        let meta = s
            .meta_label
            .map(|m| m.to_string())
            .unwrap_or_else(|| "-".into());
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            s.id,
            if s.meta_label.is_some() { "M" } else { "U" },
            meta,
            if s.noisy { 1 } else { 0 },
            rel,
            s.true_label
        ));
    }
    atomic_write(&dir.join("manifest.tsv"), manifest.as_bytes())
}

/// Load a pool saved by [`save_pool`], returning the recorded config hash.
pub fn load_pool(dir: &Path) -> Result<(DataPool, String)> {
    let manifest_path = dir.join("manifest.tsv");
    let text = crate::fs_util::read_to_string(&manifest_path)?;
    let mut lines = crate::fs_util::lines_of(&text);
    let (hash, attrs) = crate::fs_util::parse_artifact_header(&mut lines, "mmq-pool")?;
    let num_classes: usize = attrs
        .get("num_classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "manifest header missing num_classes".into(),
        })?;
    let mut samples = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 6 tab-separated fields, got {}", fields.len()),
            });
        }
        let meta_label = match fields[2] {
            "-" => None,
            v => Some(v.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad meta label {:?}", v),
            })?),
        };
        let split_says_m = match fields[1] {
            "M" => true,
            "U" => false,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown split {:?}", other),
                })
            }
        };
        if split_says_m != meta_label.is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: "split column disagrees with meta label presence".into(),
            });
        }
        let noisy = fields[3] == "1";
        let image_path = dir.join(fields[4]);
        let bytes = std::fs::read(&image_path)
            .map_err(|e| Error::io(image_path.display().to_string(), e))?;
        let image = pgm_parse(&bytes, fields[4])?;
        let true_label = fields[5].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad true label {:?}", fields[5]),
        })?;
        samples.push(Sample {
            id: fields[0].to_string(),
            image,
            meta_label,
            true_label,
            noisy,
        });
    }
    Ok((DataPool::new(samples, num_classes)?, hash))
}
