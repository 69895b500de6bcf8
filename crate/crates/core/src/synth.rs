//! Synthetic bursts with known motion.
//!
//! Every frame draws from its own ChaCha8 stream derived from the master
//! seed, so frames can be generated in any order (or in parallel) and still
//! come out identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{forward_apply, mosaic, warp_affine, DegradeConfig, Observation};
use crate::image::{resize_bilinear, BayerFrame, NoiseParams, PlanarImage};
use crate::motion::AffineMotion;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SynthMotion {
    #[default]
    Euclidean,
    Affine,
}

/// How the warped HR image is brought down to the LR grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Downsample {
    /// The solver's own block-mean operator.
    #[default]
    BlockMean,
    /// Bilinear resampling, a deliberate model mismatch.
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub shot_gain: f64,
    pub read_variance: f64,
    pub enabled: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            shot_gain: 1e-3,
            read_variance: 1e-4,
            enabled: true,
        }
    }
}

impl NoiseModel {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn params(&self) -> Option<NoiseParams> {
        self.enabled.then_some(NoiseParams {
            shot_gain: self.shot_gain,
            read_variance: self.read_variance,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub k: usize,
    pub motion_model: SynthMotion,
    /// Per-axis translation bound, in LR pixels.
    pub max_translation: f64,
    /// Rotation bound in degrees.
    pub max_rotation: f64,
    /// Bound on each entry of the extra linear perturbation (affine only).
    pub max_affine_perturb: f64,
    pub scale: usize,
    /// Raw mosaics rather than full-color frames.
    pub mosaic: bool,
    pub downsample: Downsample,
    pub noise: NoiseModel,
    pub white_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k: 8,
            motion_model: SynthMotion::Euclidean,
            max_translation: 2.0,
            max_rotation: 2.0,
            max_affine_perturb: 0.01,
            scale: 2,
            mosaic: true,
            downsample: Downsample::BlockMean,
            noise: NoiseModel::default(),
            white_level: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("burst length must be at least 1".into()));
        }
        let bounds = [
            self.max_translation,
            self.max_rotation,
            self.max_affine_perturb,
            self.noise.shot_gain,
            self.noise.read_variance,
        ];
        if bounds.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::Config(
                "synthesis bounds and noise must be non-negative".into(),
            ));
        }
        if self.scale == 0 || !(self.white_level > 0.0) {
            return Err(Error::Config(
                "scale and white level must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn degrade(&self) -> DegradeConfig {
        if self.mosaic {
            DegradeConfig::raw(self.scale)
        } else {
            DegradeConfig::rgb(self.scale)
        }
    }

    fn rng(&self, frame: usize, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * frame as u64 + purpose);
        rng
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let model = match self.motion_model {
            SynthMotion::Euclidean => "euclidean",
            SynthMotion::Affine => "affine",
        };
        let down = match self.downsample {
            Downsample::BlockMean => "block",
            Downsample::Bilinear => "bilinear",
        };
        format!(
            "k={}\nmotion={model}\nmax_translation={}\nmax_rotation={}\nmax_affine_perturb={}\nscale={}\nmosaic={}\ndownsample={down}\nnoise={}\nshot_gain={}\nread_variance={}\nwhite={}\nseed={}\n",
            self.k,
            self.max_translation,
            self.max_rotation,
            self.max_affine_perturb,
            self.scale,
            self.mosaic,
            self.noise.enabled,
            self.noise.shot_gain,
            self.noise.read_variance,
            self.white_level,
            self.seed
        )
    }
}

impl std::str::FromStr for SynthConfig {
    type Err = Error;

    /// Parses the output of [`SynthConfig::to_kv`]; missing keys keep their defaults.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            let value = value.trim();
            let bad = || Error::Config(format!("bad value {value:?} for {key}"));
            let num = || value.parse::<f64>().map_err(|_| bad());
            let int = || value.parse::<u64>().map_err(|_| bad());
            let flag = || value.parse::<bool>().map_err(|_| bad());
            match key.trim() {
                "k" => cfg.k = int()? as usize,
                "motion" => {
                    cfg.motion_model = match value {
                        "euclidean" => SynthMotion::Euclidean,
                        "affine" => SynthMotion::Affine,
                        _ => return Err(bad()),
                    }
                }
                "max_translation" => cfg.max_translation = num()?,
                "max_rotation" => cfg.max_rotation = num()?,
                "max_affine_perturb" => cfg.max_affine_perturb = num()?,
                "scale" => cfg.scale = int()? as usize,
                "mosaic" => cfg.mosaic = flag()?,
                "downsample" => {
                    cfg.downsample = match value {
                        "block" => Downsample::BlockMean,
                        "bilinear" => Downsample::Bilinear,
                        _ => return Err(bad()),
                    }
                }
                "noise" => cfg.noise.enabled = flag()?,
                "shot_gain" => cfg.noise.shot_gain = num()?,
                "read_variance" => cfg.noise.read_variance = num()?,
                "white" => cfg.white_level = num()?,
                "seed" => cfg.seed = int()?,
                other => return Err(Error::Config(format!("unknown synthesis key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

/// Frame 0 is the identity; the others are uniform within the configured
/// bounds. Translations are drawn in pixels of the `lr_w × lr_h` grid.
pub fn sample_motions(cfg: &SynthConfig, lr_w: usize, lr_h: usize) -> Result<Vec<AffineMotion>> {
    cfg.validate()?;
    let half = lr_w.max(lr_h) as f64 / 2.0;
    let motions = (0..cfg.k)
        .map(|k| {
            if k == 0 {
                return AffineMotion::identity();
            }
            let mut rng = cfg.rng(k, 0);
            let theta = symmetric(&mut rng, cfg.max_rotation).to_radians();
            let tx = symmetric(&mut rng, cfg.max_translation) / half;
            let ty = symmetric(&mut rng, cfg.max_translation) / half;
            let rigid = AffineMotion::euclidean(theta, tx, ty);
            match cfg.motion_model {
                SynthMotion::Euclidean => rigid,
                SynthMotion::Affine => {
                    let mut p = rigid.params();
                    for v in p.iter_mut().take(4) {
                        *v += symmetric(&mut rng, cfg.max_affine_perturb);
                    }
                    AffineMotion::from_params(p)
                }
            }
        })
        .collect();
    Ok(motions)
}

fn clean_frame(hr: &PlanarImage, p: &AffineMotion, cfg: &SynthConfig) -> Result<Observation> {
    let degrade = cfg.degrade();
    match cfg.downsample {
        Downsample::BlockMean => Ok(forward_apply(hr, p, &degrade)?.0),
        Downsample::Bilinear => {
            let (w, h) = degrade.lr_dims(hr.width(), hr.height())?;
            let (warped, _) = warp_affine(hr, p, hr.width(), hr.height())?;
            let small = resize_bilinear(&warped, w, h);
            if cfg.mosaic {
                Ok(Observation::Raw(mosaic(&small)?))
            } else {
                Ok(Observation::Rgb(small))
            }
        }
    }
}

/// Applies the degradation and, when enabled, heteroscedastic Gaussian
/// noise of variance `shot_gain · signal + read_variance`, clipped to
/// `[0, white]`.
pub fn degrade_to_burst(
    hr: &PlanarImage,
    motions: &[AffineMotion],
    cfg: &SynthConfig,
) -> Result<Vec<Observation>> {
    cfg.validate()?;
    if cfg.mosaic && hr.channels() != 3 {
        return Err(Error::dims("raw bursts need an RGB source image"));
    }
    motions
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let mut frame = clean_frame(hr, p, cfg)?;
            if let Some(noise) = cfg.noise.params() {
                let mut rng = cfg.rng(k, 1);
                for y in frame.data_mut() {
                    let var = noise.shot_gain * y.max(0.0) + noise.read_variance;
                    let n: f64 = rng.sample(StandardNormal);
                    *y = (*y + var.sqrt() * n).clamp(0.0, cfg.white_level);
                }
                if let Observation::Raw(f) = frame {
                    frame = Observation::Raw(f.with_noise(Some(noise)));
                }
            }
            Ok(frame)
        })
        .collect()
}

/// Rounds to the 16-bit grid used on disk.
pub fn quantize16(x: f64, white: f64) -> f64 {
    (x / white * 65535.0).round().clamp(0.0, 65535.0) / 65535.0 * white
}

/// A generated burst with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthBurst {
    pub hr: PlanarImage,
    pub frames: Vec<Observation>,
    pub motions: Vec<AffineMotion>,
    pub config: SynthConfig,
}

/// Quantizes `hr` to 16 bits, samples motions and degrades, then quantizes
/// the frames too, so the result survives a round trip through the 16-bit
/// file formats unchanged.
pub fn synthesize(hr: &PlanarImage, cfg: &SynthConfig) -> Result<SynthBurst> {
    let white = cfg.white_level;
    let hr = hr.map(|x| quantize16(x, white));
    let (lr_w, lr_h) = cfg.degrade().lr_dims(hr.width(), hr.height())?;
    let motions = sample_motions(cfg, lr_w, lr_h)?;
    let mut frames = degrade_to_burst(&hr, &motions, cfg)?;
    for f in &mut frames {
        for y in f.data_mut() {
            *y = quantize16(*y, white);
        }
    }
    Ok(SynthBurst {
        hr,
        frames,
        motions,
        config: *cfg,
    })
}

/// Random opaque disks painted back to front: sharp edges at all scales
/// and flat interiors.
pub fn dead_leaves(width: usize, height: usize, seed: u64, count: usize) -> PlanarImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = width.max(height) as f64;
    let (r_min, r_max) = (side / 40.0, side / 5.0);
    let mut img = PlanarImage::filled(width, height, 3, 0.5);
    for _ in 0..count {
        let cx = rng.random_range(-0.1..1.1) * width as f64;
        let cy = rng.random_range(-0.1..1.1) * height as f64;
        // radius density proportional to 1/r³, the usual scale-invariant choice
        let a = rng.random::<f64>();
        let r = 1.0 / (a / (r_min * r_min) + (1.0 - a) / (r_max * r_max)).sqrt();
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let (u0, u1) = (
            (cx - r).floor().max(0.0) as usize,
            ((cx + r).ceil() as usize).min(width),
        );
        let (v0, v1) = (
            (cy - r).floor().max(0.0) as usize,
            ((cy + r).ceil() as usize).min(height),
        );
        for v in v0..v1 {
            for u in u0..u1 {
                let (dx, dy) = (u as f64 + 0.5 - cx, v as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    for (c, value) in color.iter().enumerate() {
                        img.set(c, u, v, *value);
                    }
                }
            }
        }
    }
    img
}

/// Gamma 2.2 decoding of display-referred values in `[0, 1]`.
pub fn srgb_to_linear(img: &PlanarImage) -> PlanarImage {
    img.map(|x| x.clamp(0.0, 1.0).powf(2.2))
}

/// Inverse of [`srgb_to_linear`].
pub fn linear_to_srgb(img: &PlanarImage) -> PlanarImage {
    img.map(|x| x.clamp(0.0, 1.0).powf(1.0 / 2.2))
}

/// Builds a raw frame from samples, keeping noise metadata.
pub fn raw_frame(
    width: usize,
    height: usize,
    data: Vec<f64>,
    noise: Option<NoiseParams>,
) -> Result<BayerFrame> {
    Ok(BayerFrame::new(width, height, data)?.with_noise(noise))
}
