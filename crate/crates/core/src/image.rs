//! Image containers and the pixel-level helpers shared by every stage.
//!
//! All images are linear-intensity `f64` buffers in planar layout: channel
//! major, then row major within a plane. Pixel `(u, v)` is column `u`, row `v`.

use crate::error::{Error, Result};

/// A `width × height × channels` planar image.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PlanarImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::dims(format!(
                "image must be non-empty, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::dims(format!(
                "buffer of length {} does not hold {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && channels > 0);
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Builds an image by evaluating `f(channel, u, v)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for v in 0..height {
                for u in 0..width {
                    data.push(f(c, u, v));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data[(c * self.height + v) * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, c: usize, u: usize, v: usize, value: f64) {
        self.data[(c * self.height + v) * self.width + u] = value;
    }

    pub fn same_shape(&self, other: &PlanarImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> PlanarImage {
        PlanarImage {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    /// Copies the image with a `border`-pixel frame removed on every side.
    pub fn crop_border(&self, border: usize) -> Result<PlanarImage> {
        if 2 * border >= self.width || 2 * border >= self.height {
            return Err(Error::dims(format!(
                "border {border} leaves nothing of a {}x{} image",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width - 2 * border, self.height - 2 * border);
        Ok(PlanarImage::from_fn(w, h, self.channels, |c, u, v| {
            self.get(c, u + border, v + border)
        }))
    }

    /// Splits off one channel as a single-plane image.
    pub fn channel(&self, c: usize) -> PlanarImage {
        PlanarImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.plane(c).to_vec(),
        }
    }
}

/// Color of one mosaic site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Red = 0,
    Green = 1,
    Blue = 2,
}

impl Channel {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Color filter array layout. Only the RGGB phase is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BayerPattern {
    /// Red at `(0, 0)`, green at `(1, 0)` and `(0, 1)`, blue at `(1, 1)`.
    #[default]
    Rggb,
}

impl BayerPattern {
    #[inline]
    pub fn channel_of(self, u: usize, v: usize) -> Channel {
        match self {
            BayerPattern::Rggb => match (u & 1, v & 1) {
                (0, 0) => Channel::Red,
                (1, 1) => Channel::Blue,
                _ => Channel::Green,
            },
        }
    }
}

/// Signal-dependent Gaussian noise description attached to a raw frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    pub shot_gain: f64,
    pub read_variance: f64,
}

/// A single-plane raw mosaic.
#[derive(Clone, Debug, PartialEq)]
pub struct BayerFrame {
    width: usize,
    height: usize,
    pattern: BayerPattern,
    data: Vec<f64>,
    noise: Option<NoiseParams>,
}

impl BayerFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
            return Err(Error::dims(format!(
                "Bayer frames need even non-zero dimensions, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::dims(format!(
                "buffer of length {} does not hold a {width}x{height} mosaic",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pattern: BayerPattern::Rggb,
            data,
            noise: None,
        })
    }

    pub fn with_noise(mut self, noise: Option<NoiseParams>) -> Self {
        self.noise = noise;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pattern(&self) -> BayerPattern {
        self.pattern
    }

    pub fn noise(&self) -> Option<NoiseParams> {
        self.noise
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn channel_of(&self, u: usize, v: usize) -> Channel {
        self.pattern.channel_of(u, v)
    }

    /// The mosaic viewed as a one-channel image (no color interpretation).
    pub fn as_image(&self) -> PlanarImage {
        PlanarImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.clone(),
        }
    }
}

/// Bilinear demosaicking.
///
/// Measured samples are copied; each missing channel is the mean of the
/// nearest same-color neighbors (4-neighborhood for green, horizontal,
/// vertical or diagonal pairs/quads for red and blue). Neighbors outside the
/// frame are dropped, which is replicate padding on each color's sampling
/// lattice.
pub fn demosaic_bilinear(frame: &BayerFrame) -> PlanarImage {
    const CROSS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    const HORIZ: [(isize, isize); 2] = [(-1, 0), (1, 0)];
    const VERT: [(isize, isize); 2] = [(0, -1), (0, 1)];
    const DIAG: [(isize, isize); 4] = [(-1, -1), (1, -1), (-1, 1), (1, 1)];

    let (w, h) = (frame.width, frame.height);
    let mean_of = |u: usize, v: usize, offsets: &[(isize, isize)]| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &(du, dv) in offsets {
            let (x, y) = (u as isize + du, v as isize + dv);
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                sum += frame.get(x as usize, y as usize);
                n += 1;
            }
        }
        sum / n as f64
    };

    let mut out = PlanarImage::zeros(w, h, 3);
    for v in 0..h {
        for u in 0..w {
            let here = frame.channel_of(u, v);
            let value = frame.get(u, v);
            for c in [Channel::Red, Channel::Green, Channel::Blue] {
                let x = if c == here {
                    value
                } else if c == Channel::Green {
                    mean_of(u, v, &CROSS)
                } else if here == Channel::Green {
                    // Red/blue at a green site: the pair along the row holding
                    // that color.
                    let row_has_c = frame.channel_of(u ^ 1, v) == c;
                    mean_of(u, v, if row_has_c { &HORIZ } else { &VERT })
                } else {
                    mean_of(u, v, &DIAG)
                };
                out.set(c.index(), u, v, x);
            }
        }
    }
    out
}

/// Unweighted mean of the three color channels.
pub fn to_grayscale(img: &PlanarImage) -> Result<PlanarImage> {
    if img.channels != 3 {
        return Err(Error::dims(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let n = img.plane_len();
    let data = (0..n)
        .map(|i| (img.data[i] + img.data[n + i] + img.data[2 * n + i]) / 3.0)
        .collect();
    PlanarImage::new(img.width, img.height, 1, data)
}

/// Central differences in the interior, one-sided at the borders.
pub fn spatial_gradient(img: &PlanarImage) -> (PlanarImage, PlanarImage) {
    let (w, h) = (img.width, img.height);
    let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / span as f64;
    let gx = PlanarImage::from_fn(w, h, img.channels, |c, u, v| {
        if w == 1 {
            return 0.0;
        }
        let (a, b) = (u.saturating_sub(1), (u + 1).min(w - 1));
        diff(img.get(c, a, v), img.get(c, b, v), b - a)
    });
    let gy = PlanarImage::from_fn(w, h, img.channels, |c, u, v| {
        if h == 1 {
            return 0.0;
        }
        let (a, b) = (v.saturating_sub(1), (v + 1).min(h - 1));
        diff(img.get(c, u, a), img.get(c, u, b), b - a)
    });
    (gx, gy)
}

/// Normalized 5-tap Gaussian with σ = 1.
pub(crate) fn gaussian5() -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, w) in k.iter_mut().enumerate() {
        let x = i as f64 - 2.0;
        *w = (-0.5 * x * x).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|w| w / s)
}

/// Separable convolution with replicate borders.
pub(crate) fn convolve_separable(img: &PlanarImage, kernel: &[f64]) -> PlanarImage {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let tmp = PlanarImage::from_fn(img.width, img.height, img.channels, |c, u, v| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let x = (u as isize + i as isize - r).clamp(0, w - 1) as usize;
                k * img.get(c, x, v)
            })
            .sum()
    });
    PlanarImage::from_fn(img.width, img.height, img.channels, |c, u, v| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let y = (v as isize + i as isize - r).clamp(0, h - 1) as usize;
                k * tmp.get(c, u, y)
            })
            .sum()
    })
}

/// Coarse-to-fine stack; `levels()[0]` is full resolution.
#[derive(Clone, Debug)]
pub struct Pyramid {
    levels: Vec<PlanarImage>,
}

impl Pyramid {
    pub fn levels(&self) -> &[PlanarImage] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Smallest side a pyramid level may have.
pub const MIN_PYRAMID_SIDE: usize = 8;

/// Gaussian pyramid: blur (σ = 1, 5 taps) then keep every other sample.
pub fn build_pyramid(img: &PlanarImage, levels: usize) -> Result<Pyramid> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let min_side = img.width.min(img.height);
    if min_side >> (levels - 1) < MIN_PYRAMID_SIDE {
        return Err(Error::dims(format!(
            "{}x{} image is too small for {levels} pyramid levels",
            img.width, img.height
        )));
    }
    let kernel = gaussian5();
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let blurred = convolve_separable(prev, &kernel);
        let (w, h) = (prev.width.div_ceil(2), prev.height.div_ceil(2));
        out.push(PlanarImage::from_fn(w, h, prev.channels, |c, u, v| {
            blurred.get(c, 2 * u, 2 * v)
        }));
    }
    Ok(Pyramid { levels: out })
}

/// Bilinear resampling with pixel-center alignment and clamped borders.
pub fn resize_bilinear(img: &PlanarImage, out_w: usize, out_h: usize) -> PlanarImage {
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let (w, h) = (img.width, img.height);
    let coord = |i: usize, scale: f64, n: usize| {
        let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let x0 = (x.floor() as usize).min(n - 1);
        let x1 = (x0 + 1).min(n - 1);
        (x0, x1, x - x0 as f64)
    };
    PlanarImage::from_fn(out_w, out_h, img.channels, |c, u, v| {
        let (x0, x1, fx) = coord(u, sx, w);
        let (y0, y1, fy) = coord(v, sy, h);
        let top = (1.0 - fx) * img.get(c, x0, y0) + fx * img.get(c, x1, y0);
        let bottom = (1.0 - fx) * img.get(c, x0, y1) + fx * img.get(c, x1, y1);
        (1.0 - fy) * top + fy * bottom
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> PlanarImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PlanarImage::from_fn(w, h, c, |_, _, _| rng.random::<f64>())
    }

    fn mosaic_of(img: &PlanarImage) -> BayerFrame {
        let (w, h) = (img.width(), img.height());
        let mut data = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                data.push(img.get(BayerPattern::Rggb.channel_of(u, v).index(), u, v));
            }
        }
        BayerFrame::new(w, h, data).unwrap()
    }

    #[test]
    fn constructor_checks_lengths() {
        assert!(PlanarImage::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(BayerFrame::new(3, 2, vec![0.0; 6]).is_err());
        assert!(BayerFrame::new(4, 2, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn rggb_phase() {
        let p = BayerPattern::Rggb;
        assert_eq!(p.channel_of(0, 0), Channel::Red);
        assert_eq!(p.channel_of(1, 0), Channel::Green);
        assert_eq!(p.channel_of(0, 1), Channel::Green);
        assert_eq!(p.channel_of(1, 1), Channel::Blue);
        assert_eq!(p.channel_of(7, 5), Channel::Blue);
    }

    #[test]
    fn demosaic_constant_mosaic() {
        let frame = BayerFrame::new(6, 4, vec![0.37; 24]).unwrap();
        let rgb = demosaic_bilinear(&frame);
        assert!(rgb.data().iter().all(|&x| (x - 0.37).abs() < 1e-15));
    }

    #[test]
    fn demosaic_per_channel_constants_are_fixed_points() {
        let img = PlanarImage::from_fn(4, 4, 3, |c, _, _| (c + 1) as f64);
        let rgb = demosaic_bilinear(&mosaic_of(&img));
        assert_eq!(rgb, img);
        let gray = to_grayscale(&rgb).unwrap();
        assert_eq!(gray, to_grayscale(&img).unwrap());
    }

    #[test]
    fn demosaic_matches_stencil_oracle_in_interior() {
        let frame = mosaic_of(&random_image(8, 8, 3, 1));
        let rgb = demosaic_bilinear(&frame);
        let m = |u: usize, v: usize| frame.get(u, v);
        for v in 1..7 {
            for u in 1..7 {
                let (r, g, b) = match (u % 2, v % 2) {
                    (0, 0) => (
                        m(u, v),
                        (m(u - 1, v) + m(u + 1, v) + m(u, v - 1) + m(u, v + 1)) / 4.0,
                        (m(u - 1, v - 1) + m(u + 1, v - 1) + m(u - 1, v + 1) + m(u + 1, v + 1))
                            / 4.0,
                    ),
                    (1, 1) => (
                        (m(u - 1, v - 1) + m(u + 1, v - 1) + m(u - 1, v + 1) + m(u + 1, v + 1))
                            / 4.0,
                        (m(u - 1, v) + m(u + 1, v) + m(u, v - 1) + m(u, v + 1)) / 4.0,
                        m(u, v),
                    ),
                    // green on a red row
                    (1, 0) => (
                        (m(u - 1, v) + m(u + 1, v)) / 2.0,
                        m(u, v),
                        (m(u, v - 1) + m(u, v + 1)) / 2.0,
                    ),
                    _ => (
                        (m(u, v - 1) + m(u, v + 1)) / 2.0,
                        m(u, v),
                        (m(u - 1, v) + m(u + 1, v)) / 2.0,
                    ),
                };
                for (c, want) in [r, g, b].into_iter().enumerate() {
                    assert!((rgb.get(c, u, v) - want).abs() < 1e-15, "({u},{v}) c{c}");
                }
            }
        }
    }

    #[test]
    fn grayscale_is_channel_mean() {
        let px = PlanarImage::from_fn(1, 1, 3, |c, _, _| if c == 1 { 3.0 } else { 0.0 });
        assert_eq!(to_grayscale(&px).unwrap().data(), &[1.0]);

        let img = random_image(5, 3, 3, 2);
        let gray = to_grayscale(&img).unwrap();
        for v in 0..3 {
            for u in 0..5 {
                let want = (img.get(0, u, v) + img.get(1, u, v) + img.get(2, u, v)) / 3.0;
                assert!((gray.get(0, u, v) - want).abs() < 1e-15);
            }
        }
        assert!(to_grayscale(&random_image(2, 2, 1, 3)).is_err());
    }

    #[test]
    fn gradient_exact_on_ramps() {
        let ramp = PlanarImage::from_fn(7, 5, 1, |_, u, v| 2.0 * u as f64 - 0.5 * v as f64);
        let (gx, gy) = spatial_gradient(&ramp);
        assert!(gx.data().iter().all(|&g| (g - 2.0).abs() < 1e-12));
        assert!(gy.data().iter().all(|&g| (g + 0.5).abs() < 1e-12));

        let (gx, gy) = spatial_gradient(&PlanarImage::filled(4, 4, 3, 0.2));
        assert!(gx.data().iter().chain(gy.data()).all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_stencil_oracle() {
        let img = random_image(8, 8, 2, 4);
        let (gx, gy) = spatial_gradient(&img);
        for c in 0..2 {
            for v in 0..8 {
                for u in 0..8 {
                    let want_x = match u {
                        0 => img.get(c, 1, v) - img.get(c, 0, v),
                        7 => img.get(c, 7, v) - img.get(c, 6, v),
                        _ => 0.5 * (img.get(c, u + 1, v) - img.get(c, u - 1, v)),
                    };
                    let want_y = match v {
                        0 => img.get(c, u, 1) - img.get(c, u, 0),
                        7 => img.get(c, u, 7) - img.get(c, u, 6),
                        _ => 0.5 * (img.get(c, u, v + 1) - img.get(c, u, v - 1)),
                    };
                    assert!((gx.get(c, u, v) - want_x).abs() < 1e-6);
                    assert!((gy.get(c, u, v) - want_y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pyramid_single_level_is_input() {
        let img = random_image(16, 16, 1, 5);
        let p = build_pyramid(&img, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.levels()[0], img);
    }

    #[test]
    fn pyramid_preserves_constants() {
        let img = PlanarImage::filled(40, 33, 3, 0.625);
        let p = build_pyramid(&img, 3).unwrap();
        for level in p.levels() {
            assert!(level.data().iter().all(|&x| (x - 0.625).abs() < 1e-14));
        }
        assert_eq!((p.levels()[2].width(), p.levels()[2].height()), (10, 9));
    }

    #[test]
    fn pyramid_matches_direct_oracle() {
        let img = PlanarImage::from_fn(32, 32, 1, |_, u, v| u as f64 + 0.25 * v as f64);
        let p = build_pyramid(&img, 3).unwrap();
        let sizes: Vec<_> = p.levels().iter().map(|l| l.width()).collect();
        assert_eq!(sizes, vec![32, 16, 8]);

        // Direct 2D (non-separable) blur then decimation.
        let k: Vec<f64> = {
            let raw: Vec<f64> = (-2..=2)
                .map(|x: i32| (-(x * x) as f64 / 2.0).exp())
                .collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|w| w / s).collect()
        };
        let mut level = img.clone();
        for l in 1..3 {
            let n = level.width() as i64;
            let blurred = PlanarImage::from_fn(level.width(), level.height(), 1, |_, u, v| {
                let mut acc = 0.0;
                for (j, ky) in k.iter().enumerate() {
                    for (i, kx) in k.iter().enumerate() {
                        let x = (u as i64 + i as i64 - 2).clamp(0, n - 1) as usize;
                        let y = (v as i64 + j as i64 - 2).clamp(0, n - 1) as usize;
                        acc += kx * ky * level.get(0, x, y);
                    }
                }
                acc
            });
            let half = level.width() / 2;
            level = PlanarImage::from_fn(half, half, 1, |_, u, v| blurred.get(0, 2 * u, 2 * v));
            for (a, b) in level.data().iter().zip(p.levels()[l].data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_rejects_small_images() {
        let img = PlanarImage::zeros(31, 64, 1);
        assert!(build_pyramid(&img, 3).is_err());
        assert!(build_pyramid(&img, 2).is_ok());
        assert!(build_pyramid(&img, 0).is_err());
    }

    #[test]
    fn resize_identity_and_constants() {
        let img = random_image(6, 4, 3, 6);
        assert_eq!(resize_bilinear(&img, 6, 4), img);
        let c = resize_bilinear(&PlanarImage::filled(3, 3, 1, 0.5), 12, 12);
        assert!(c.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn crop_border_removes_frame() {
        let img = PlanarImage::from_fn(6, 5, 1, |_, u, v| (10 * v + u) as f64);
        let c = img.crop_border(1).unwrap();
        assert_eq!((c.width(), c.height()), (4, 3));
        assert_eq!(c.get(0, 0, 0), 11.0);
        assert!(img.crop_border(3).is_err());
    }
}
