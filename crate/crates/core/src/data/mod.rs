//! Datasets, corruptions, long-tail subsampling and test-stream assembly.
//!
//! On disk a dataset is a directory holding `images.f32` (little-endian
//! `n x H x W x C` floats in `[0, 1]`), `labels.i64` (little-endian) and
//! `manifest.json` describing shapes and class names. Pre-corrupted
//! archives use the same layout under `<root>/<kind>/<severity>/`.

mod corrupt;
mod longtail;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Batch, Segment};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use corrupt::{corrupt, severity_parameter, CorruptionKind, CorruptionSpec, ParamTable};
pub use longtail::{longtail_counts, longtail_subsample, LongTailProfile, LongTailSpec};

const MANIFEST_FORMAT: &str = "fret-dataset";

/// Labeled images held as `f32` in NHWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    /// `[n, H, W, C]`.
    shape: [usize; 4],
    class_names: Vec<String>,
    images: String,
    labels: String,
}

impl Dataset {
    pub fn new(
        [height, width, channels]: [usize; 3],
        images: Vec<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::ShapeMismatch(format!(
                "{} floats for {} images of {height}x{width}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} but only {} classes",
                class_names.len()
            )));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.image_len();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// The listed samples, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            images: Vec::new(),
            labels: Vec::new(),
            class_names: self.class_names.clone(),
        }
    }

    /// Model input for the listed samples: an `n x C x H x W` tensor.
    pub fn to_nchw(&self, idx: &[usize]) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; idx.len() * c * h * w];
        for (b, &i) in idx.iter().enumerate() {
            let img = self.image(i);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[((b * c + ch) * h + y) * w + x] = img[(y * w + x) * c + ch] as f64;
                    }
                }
            }
        }
        Tensor::new(vec![idx.len(), c, h, w], out).expect("consistent NCHW shape")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            shape: [self.len(), self.height, self.width, self.channels],
            class_names: self.class_names.clone(),
            images: "images.f32".into(),
            labels: "labels.i64".into(),
        };
        let bytes: Vec<u8> = self.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        write(&dir.join("images.f32"), &bytes)?;
        let bytes: Vec<u8> = self
            .labels
            .iter()
            .flat_map(|&l| (l as i64).to_le_bytes())
            .collect();
        write(&dir.join("labels.i64"), &bytes)?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write(&dir.join("manifest.json"), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if m.format != MANIFEST_FORMAT || m.version != 1 {
            return Err(Error::format(
                &mpath,
                format!("unsupported format {} v{}", m.format, m.version),
            ));
        }
        let [n, h, w, c] = m.shape;
        let ipath = dir.join(&m.images);
        let raw = read(&ipath)?;
        if raw.len() != n * h * w * c * 4 {
            return Err(Error::format(&ipath, format!("expected {} bytes", n * h * w * c * 4)));
        }
        let images = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let lpath = dir.join(&m.labels);
        let raw = read(&lpath)?;
        if raw.len() != n * 8 {
            return Err(Error::format(&lpath, format!("expected {} bytes", n * 8)));
        }
        let labels = raw
            .chunks_exact(8)
            .map(|b| {
                let v = i64::from_le_bytes(b.try_into().expect("8-byte chunk"));
                usize::try_from(v).map_err(|_| Error::format(&lpath, format!("negative label {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new([h, w, c], images, labels, m.class_names).map_err(|e| Error::format(dir, e.to_string()))
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// A ChaCha generator for `(seed, purpose, index)`, so independent pieces of
/// the pipeline never share random streams.
pub(crate) fn rng_for(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose << 32 | index);
    rng
}

const PURPOSE_LONGTAIL: u64 = 1;
const PURPOSE_CORRUPT: u64 = 2;
const PURPOSE_SHUFFLE: u64 = 3;

/// Recipe for an ordered test stream: one segment per corruption spec.
#[derive(Clone, Debug)]
pub struct StreamSpec {
    pub corruptions: Vec<CorruptionSpec>,
    pub batch_size: usize,
    pub longtail: Option<LongTailSpec>,
    pub table: ParamTable,
    pub seed: u64,
    /// Where pre-corrupted archives live, for kinds without a native
    /// implementation.
    pub archive_root: Option<PathBuf>,
}

/// Lazily yields the segments of `spec` over `base`: the base set is
/// (optionally) long-tail subsampled once, then every segment corrupts it,
/// shuffles it and cuts it into batches. Labels ride along for scoring.
pub fn build_stream<'a>(
    base: &'a Dataset,
    spec: &'a StreamSpec,
) -> Result<impl Iterator<Item = Result<Segment>> + 'a> {
    if spec.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let subset = match &spec.longtail {
        Some(lt) => Some(longtail::longtail_indices(base, lt, spec.seed)?),
        None => None,
    };
    Ok(spec
        .corruptions
        .iter()
        .enumerate()
        .map(move |(idx, c)| build_segment(base, spec, subset.as_deref(), idx, c)))
}

fn build_segment(
    base: &Dataset,
    spec: &StreamSpec,
    subset: Option<&[usize]>,
    idx: usize,
    c: &CorruptionSpec,
) -> Result<Segment> {
    let source = if c.kind.is_native() {
        let clean = match subset {
            Some(s) => base.subset(s),
            None => base.clone(),
        };
        corrupt(&clean, c, spec.table, spec.seed_for(PURPOSE_CORRUPT, idx))?
    } else {
        let Some(root) = &spec.archive_root else {
            return Err(Error::UnsupportedCorruption(c.kind.name().into()));
        };
        let archive = Dataset::load(&root.join(c.kind.name()).join(c.severity.to_string()))?;
        match &spec.longtail {
            Some(lt) => {
                let s = longtail::longtail_indices(&archive, lt, spec.seed)?;
                archive.subset(&s)
            }
            None => archive,
        }
    };
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng_for(spec.seed, PURPOSE_SHUFFLE, idx as u64));
    let batches = order
        .chunks(spec.batch_size)
        .map(|chunk| Batch {
            images: source.to_nchw(chunk),
            labels: Some(chunk.iter().map(|&i| source.labels[i]).collect()),
        })
        .collect();
    Ok(Segment {
        name: c.to_string(),
        batches,
    })
}

impl StreamSpec {
    fn seed_for(&self, purpose: u64, idx: usize) -> u64 {
        let mut rng = rng_for(self.seed, purpose, idx as u64);
        rand::Rng::random(&mut rng)
    }
}

/// Collects every segment of the stream.
pub fn collect_stream(base: &Dataset, spec: &StreamSpec) -> Result<Vec<Segment>> {
    build_stream(base, spec)?.collect()
}
