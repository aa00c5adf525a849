//! Parametric image corruptions at severities 1-5.
//!
//! Five kinds are implemented natively with the published severity tables
//! of the common corruption benchmarks; the other ten must be supplied as
//! pre-corrupted archives.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{rng_for, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Elastic,
    Pixelate,
    Jpeg,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GlassBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Snow,
        CorruptionKind::Frost,
        CorruptionKind::Fog,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Elastic,
        CorruptionKind::Pixelate,
        CorruptionKind::Jpeg,
    ];

    pub const NATIVE: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Elastic => "elastic",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Jpeg => "jpeg",
        }
    }

    pub fn is_native(self) -> bool {
        Self::NATIVE.contains(&self)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption `{s}`")))
    }
}

/// Severity parameter tables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTable {
    /// Small-image (32 px) benchmark parameters.
    #[default]
    Cifar,
    /// Large-image benchmark parameters: harsher noise and contrast.
    Imagenet,
}

impl FromStr for ParamTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar" => Ok(ParamTable::Cifar),
            "imagenet" => Ok(ParamTable::Imagenet),
            other => Err(Error::InvalidArgument(format!("unknown parameter table `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!(
                "severity must be in 1..=5, got {severity}"
            )));
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.kind, self.severity)
    }
}

/// Parses `kind-severity`, e.g. `gaussian_noise-5`.
impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, sev) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::InvalidArgument(format!("expected kind-severity, got `{s}`")))?;
        let sev = sev
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad severity in `{s}`")))?;
        CorruptionSpec::new(kind.parse()?, sev)
    }
}

/// The severity parameter of a native kind.
pub fn severity_parameter(kind: CorruptionKind, severity: u8, table: ParamTable) -> Result<f64> {
    let row: [f64; 5] = match (table, kind) {
        (ParamTable::Cifar, CorruptionKind::GaussianNoise) => [0.04, 0.06, 0.08, 0.09, 0.10],
        (ParamTable::Cifar, CorruptionKind::ShotNoise) => [500.0, 250.0, 100.0, 75.0, 50.0],
        (ParamTable::Cifar, CorruptionKind::ImpulseNoise) => [0.01, 0.02, 0.03, 0.05, 0.07],
        (ParamTable::Cifar, CorruptionKind::Contrast) => [0.75, 0.5, 0.4, 0.3, 0.15],
        (ParamTable::Cifar, CorruptionKind::Brightness) => [0.05, 0.1, 0.15, 0.2, 0.3],
        (ParamTable::Imagenet, CorruptionKind::GaussianNoise) => [0.08, 0.12, 0.18, 0.26, 0.38],
        (ParamTable::Imagenet, CorruptionKind::ShotNoise) => [60.0, 25.0, 12.0, 5.0, 3.0],
        (ParamTable::Imagenet, CorruptionKind::ImpulseNoise) => [0.03, 0.06, 0.09, 0.17, 0.27],
        (ParamTable::Imagenet, CorruptionKind::Contrast) => [0.4, 0.3, 0.2, 0.1, 0.05],
        (ParamTable::Imagenet, CorruptionKind::Brightness) => [0.1, 0.2, 0.3, 0.4, 0.5],
        (_, k) => return Err(Error::UnsupportedCorruption(k.name().into())),
    };
    if !(1..=5).contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity must be in 1..=5, got {severity}")));
    }
    Ok(row[severity as usize - 1])
}

/// Corrupts every image of `ds`; output values are clipped to `[0, 1]`.
pub fn corrupt(ds: &Dataset, spec: &CorruptionSpec, table: ParamTable, seed: u64) -> Result<Dataset> {
    let c = severity_parameter(spec.kind, spec.severity, table)?;
    let mut out = ds.clone();
    let mut rng = rng_for(seed, 0, spec.kind as u64 * 8 + spec.severity as u64);
    let clip = |v: f64| v.clamp(0.0, 1.0) as f32;
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0, c).expect("positive sigma");
            for v in &mut out.images {
                *v = clip(*v as f64 + noise.sample(&mut rng));
            }
        }
        CorruptionKind::ShotNoise => {
            for v in &mut out.images {
                let lambda = (*v as f64).max(0.0) * c;
                let k = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                };
                *v = clip(k / c);
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in &mut out.images {
                if rng.random::<f64>() < c {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::Contrast => {
            let ch = ds.channels;
            let pixels = ds.height * ds.width;
            for img in out.images.chunks_mut(ds.image_len()) {
                for k in 0..ch {
                    let mean = (0..pixels).map(|p| img[p * ch + k] as f64).sum::<f64>() / pixels as f64;
                    for p in 0..pixels {
                        let v = &mut img[p * ch + k];
                        *v = clip((*v as f64 - mean) * c + mean);
                    }
                }
            }
        }
        CorruptionKind::Brightness => {
            if ds.channels != 3 {
                return Err(Error::InvalidArgument("brightness needs RGB images".into()));
            }
            for px in out.images.chunks_mut(3) {
                let (h, s, v) = rgb_to_hsv(px[0] as f64, px[1] as f64, px[2] as f64);
                let (r, g, b) = hsv_to_rgb(h, s, (v + c).clamp(0.0, 1.0));
                px[0] = clip(r);
                px[1] = clip(g);
                px[2] = clip(b);
            }
        }
        _ => unreachable!("non-native kinds have no severity parameter"),
    }
    Ok(out)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u8 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
