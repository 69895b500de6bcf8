//! The degradation operator `U_p = D B W_p` that maps the latent
//! high-resolution image onto one observed frame, with its transpose and
//! its Jacobian with respect to the motion parameters.
//!
//! * `W_p` resamples the HR image at `A n(u) + t` with bilinear interpolation,
//!   where `n(u)` is the normalized coordinate of output pixel `u`.
//! * `B` followed by the spatial part of `D` is an `s × s` block mean; the
//!   block is centered on its low-resolution pixel.
//! * The spectral part of `D` keeps the RGGB channel at each site (raw mode).
//!
//! Samples that fall outside the source image read as zero, and every
//! low-resolution pixel touching such a sample is marked invalid in the
//! accompanying [`ValidityMask`]. Residuals and Jacobian rows of invalid
//! pixels are dropped downstream.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{BayerFrame, BayerPattern, PlanarImage};
use crate::motion::AffineMotion;

/// Spatial integration model. Block averaging is the only one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlurKind {
    #[default]
    Averaging,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeConfig {
    pub scale: usize,
    pub blur: BlurKind,
    /// Raw mode: keep one color per site. Otherwise all channels pass through.
    pub mosaic: bool,
    pub pattern: BayerPattern,
}

impl DegradeConfig {
    pub fn raw(scale: usize) -> Self {
        Self {
            scale,
            blur: BlurKind::Averaging,
            mosaic: true,
            pattern: BayerPattern::Rggb,
        }
    }

    pub fn rgb(scale: usize) -> Self {
        Self {
            mosaic: false,
            ..Self::raw(scale)
        }
    }

    /// Low-resolution size for an HR image, after checking compatibility.
    pub fn lr_dims(&self, hr_w: usize, hr_h: usize) -> Result<(usize, usize)> {
        let s = self.scale;
        if s == 0 {
            return Err(Error::Config("scale must be at least 1".into()));
        }
        if !hr_w.is_multiple_of(s) || !hr_h.is_multiple_of(s) {
            return Err(Error::dims(format!(
                "{hr_w}x{hr_h} is not divisible by scale {s}"
            )));
        }
        let (w, h) = (hr_w / s, hr_h / s);
        if self.mosaic && (w % 2 != 0 || h % 2 != 0) {
            return Err(Error::dims(format!(
                "raw frames need even dimensions, {w}x{h} is not"
            )));
        }
        Ok((w, h))
    }
}

/// Per-pixel flags for samples whose whole footprint lies inside the source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims("mask length does not match its dimensions"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    /// Logical AND over non-overlapping `s × s` blocks.
    pub fn downsample(&self, s: usize) -> ValidityMask {
        let (w, h) = (self.width / s, self.height / s);
        let mut data = vec![true; w * h];
        for (i, d) in data.iter_mut().enumerate() {
            let (bu, bv) = (i % w, i / w);
            *d = (0..s).all(|dv| (0..s).all(|du| self.get(bu * s + du, bv * s + dv)));
        }
        ValidityMask {
            width: w,
            height: h,
            data,
        }
    }
}

/// One bilinear sample: top-left source index and fractional offsets. The
/// right and bottom neighbors are always in bounds.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    x0: u32,
    y0: u32,
    fx: f64,
    fy: f64,
}

impl Tap {
    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }

    #[inline]
    fn indices(&self, width: usize) -> [usize; 4] {
        let i = self.y0 as usize * width + self.x0 as usize;
        [i, i + 1, i + width, i + width + 1]
    }

    #[inline]
    fn sample(&self, plane: &[f64], width: usize) -> f64 {
        let [a, b, c, d] = self.indices(width).map(|i| plane[i]);
        let w = self.weights();
        w[0] * a + w[1] * b + w[2] * c + w[3] * d
    }

    /// Value and derivatives with respect to the source pixel position.
    #[inline]
    fn sample_with_gradient(&self, plane: &[f64], width: usize) -> (f64, f64, f64) {
        let [a, b, c, d] = self.indices(width).map(|i| plane[i]);
        let (fx, fy) = (self.fx, self.fy);
        let w = self.weights();
        let value = w[0] * a + w[1] * b + w[2] * c + w[3] * d;
        let dx = (1.0 - fy) * (b - a) + fy * (d - c);
        let dy = (1.0 - fx) * (c - a) + fx * (d - b);
        (value, dx, dy)
    }
}

/// Geometry of `W_p` from an output grid onto a source grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct WarpGeometry {
    a: [[f64; 2]; 2],
    /// Translation in source pixels.
    shift: [f64; 2],
    src: (usize, usize),
    out: (usize, usize),
    /// Source pixels per output pixel.
    ratio: f64,
    /// `∂(source pixel)/∂(normalized coordinate)`.
    half_src: f64,
}

impl WarpGeometry {
    pub(crate) fn new(
        p: &AffineMotion,
        src_w: usize,
        src_h: usize,
        out_w: usize,
        out_h: usize,
    ) -> Result<Self> {
        p.validate()?;
        if src_w < 2 || src_h < 2 {
            return Err(Error::dims("warp source must be at least 2x2"));
        }
        let half_src = src_w.max(src_h) as f64 / 2.0;
        let t = p.shift();
        Ok(Self {
            a: p.matrix(),
            shift: [t[0] * half_src, t[1] * half_src],
            src: (src_w, src_h),
            out: (out_w, out_h),
            ratio: src_w.max(src_h) as f64 / out_w.max(out_h) as f64,
            half_src,
        })
    }

    /// Output pixel offset from the output center, in output pixels.
    #[inline]
    fn centered(&self, u: usize, v: usize) -> (f64, f64) {
        (
            u as f64 - (self.out.0 as f64 / 2.0 - 0.5),
            v as f64 - (self.out.1 as f64 / 2.0 - 0.5),
        )
    }

    /// Source pixel position sampled by output pixel `(u, v)`.
    #[inline]
    pub(crate) fn source_position(&self, u: usize, v: usize) -> (f64, f64) {
        let (du, dv) = self.centered(u, v);
        let a = &self.a;
        let cx = self.src.0 as f64 / 2.0 - 0.5;
        let cy = self.src.1 as f64 / 2.0 - 0.5;
        (
            cx + self.ratio * (a[0][0] * du + a[0][1] * dv) + self.shift[0],
            cy + self.ratio * (a[1][0] * du + a[1][1] * dv) + self.shift[1],
        )
    }

    /// `∂(source x)/∂p` (also `∂(source y)/∂p` after moving the pair to
    /// slots 2, 3 and 5).
    #[inline]
    fn position_partials(&self, u: usize, v: usize) -> (f64, f64, f64) {
        let (du, dv) = self.centered(u, v);
        (self.ratio * du, self.ratio * dv, self.half_src)
    }

    #[inline]
    pub(crate) fn tap(&self, u: usize, v: usize) -> Option<Tap> {
        let (sx, sy) = self.source_position(u, v);
        tap_at(sx, sy, self.src.0, self.src.1)
    }
}

#[inline]
fn tap_at(sx: f64, sy: f64, w: usize, h: usize) -> Option<Tap> {
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    if !(sx >= 0.0 && sx <= wmax && sy >= 0.0 && sy <= hmax) {
        return None;
    }
    let split = |s: f64, n: usize| {
        // s ≥ 0 here, so truncation is floor
        let i = s as usize;
        // On the last row/column, interpolate from the left with weight 1.
        if i >= n - 1 {
            (n - 2, s - (n - 2) as f64)
        } else {
            (i, s - i as f64)
        }
    };
    let (x0, fx) = split(sx, w);
    let (y0, fy) = split(sy, h);
    Some(Tap {
        x0: x0 as u32,
        y0: y0 as u32,
        fx,
        fy,
    })
}

/// Resamples `img` at `A n(u) + t` for every pixel `u` of an
/// `out_w × out_h` grid sharing the same field of view.
pub fn warp_affine(
    img: &PlanarImage,
    p: &AffineMotion,
    out_w: usize,
    out_h: usize,
) -> Result<(PlanarImage, ValidityMask)> {
    let geo = WarpGeometry::new(p, img.width(), img.height(), out_w, out_h)?;
    let taps: Vec<Option<Tap>> = (0..out_w * out_h)
        .map(|i| geo.tap(i % out_w, i / out_w))
        .collect();
    let mut out = PlanarImage::zeros(out_w, out_h, img.channels());
    for c in 0..img.channels() {
        let src = img.plane(c);
        for (o, tap) in out.plane_mut(c).iter_mut().zip(&taps) {
            if let Some(t) = tap {
                *o = t.sample(src, img.width());
            }
        }
    }
    let mask = ValidityMask {
        width: out_w,
        height: out_h,
        data: taps.iter().map(Option::is_some).collect(),
    };
    Ok((out, mask))
}

/// Transpose of [`warp_affine`] restricted to `mask`: scatters each output
/// sample back onto its four source pixels with the interpolation weights.
pub fn warp_adjoint(
    residual: &PlanarImage,
    mask: &ValidityMask,
    p: &AffineMotion,
    src_w: usize,
    src_h: usize,
) -> Result<PlanarImage> {
    let (out_w, out_h) = (residual.width(), residual.height());
    if (mask.width, mask.height) != (out_w, out_h) {
        return Err(Error::dims("mask does not match the warped image"));
    }
    let geo = WarpGeometry::new(p, src_w, src_h, out_w, out_h)?;
    let mut out = PlanarImage::zeros(src_w, src_h, residual.channels());
    for c in 0..residual.channels() {
        let r = residual.plane(c);
        let dst = out.plane_mut(c);
        for v in 0..out_h {
            for u in 0..out_w {
                let i = v * out_w + u;
                if !mask.data[i] {
                    continue;
                }
                if let Some(t) = geo.tap(u, v) {
                    for (j, w) in t.indices(src_w).into_iter().zip(t.weights()) {
                        dst[j] += w * r[i];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Non-overlapping `s × s` block means.
pub fn blur_downsample(img: &PlanarImage, s: usize) -> Result<PlanarImage> {
    if s == 0 || !img.width().is_multiple_of(s) || !img.height().is_multiple_of(s) {
        return Err(Error::dims(format!(
            "{}x{} is not divisible by {s}",
            img.width(),
            img.height()
        )));
    }
    let inv = 1.0 / (s * s) as f64;
    Ok(PlanarImage::from_fn(
        img.width() / s,
        img.height() / s,
        img.channels(),
        |c, u, v| {
            let mut acc = 0.0;
            for dv in 0..s {
                for du in 0..s {
                    acc += img.get(c, u * s + du, v * s + dv);
                }
            }
            acc * inv
        },
    ))
}

/// Transpose of [`blur_downsample`]: each value spread over its block, scaled by `1/s²`.
pub fn blur_downsample_adjoint(img: &PlanarImage, s: usize) -> PlanarImage {
    let inv = 1.0 / (s * s) as f64;
    PlanarImage::from_fn(
        img.width() * s,
        img.height() * s,
        img.channels(),
        |c, u, v| img.get(c, u / s, v / s) * inv,
    )
}

/// Keeps the pattern channel at each site.
pub fn mosaic(img: &PlanarImage) -> Result<BayerFrame> {
    if img.channels() != 3 {
        return Err(Error::dims("mosaicking needs an RGB image"));
    }
    let (w, h) = (img.width(), img.height());
    let pattern = BayerPattern::Rggb;
    let mut data = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            data.push(img.get(pattern.channel_of(u, v).index(), u, v));
        }
    }
    BayerFrame::new(w, h, data)
}

/// Scatters each mosaic sample into its channel plane; zeros elsewhere.
pub fn mosaic_adjoint(frame: &BayerFrame) -> PlanarImage {
    let mut out = PlanarImage::zeros(frame.width(), frame.height(), 3);
    for v in 0..frame.height() {
        for u in 0..frame.width() {
            out.set(frame.channel_of(u, v).index(), u, v, frame.get(u, v));
        }
    }
    out
}

/// An observed frame: a raw mosaic or a full-color (or gray) image.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Raw(BayerFrame),
    Rgb(PlanarImage),
}

impl Observation {
    pub fn width(&self) -> usize {
        match self {
            Observation::Raw(f) => f.width(),
            Observation::Rgb(i) => i.width(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Observation::Raw(f) => f.height(),
            Observation::Rgb(i) => i.height(),
        }
    }

    pub fn is_raw(&self) -> bool {
        matches!(self, Observation::Raw(_))
    }

    /// Flattened samples: one plane in raw mode, planar channels otherwise.
    pub fn data(&self) -> &[f64] {
        match self {
            Observation::Raw(f) => f.data(),
            Observation::Rgb(i) => i.data(),
        }
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        match self {
            Observation::Raw(f) => f.data_mut(),
            Observation::Rgb(i) => i.data_mut(),
        }
    }

    /// Full-color view: demosaicked in raw mode.
    pub fn to_color(&self) -> PlanarImage {
        match self {
            Observation::Raw(f) => crate::image::demosaic_bilinear(f),
            Observation::Rgb(i) => i.clone(),
        }
    }

    fn with_data(&self, data: Vec<f64>) -> Observation {
        match self {
            Observation::Raw(f) => Observation::Raw(
                BayerFrame::new(f.width(), f.height(), data)
                    .expect("same dimensions")
                    .with_noise(f.noise()),
            ),
            Observation::Rgb(i) => Observation::Rgb(
                PlanarImage::new(i.width(), i.height(), i.channels(), data)
                    .expect("same dimensions"),
            ),
        }
    }
}

/// `U_p` for one frame, with interpolation taps precomputed on the HR grid.
#[derive(Clone, Debug)]
pub struct FrameOperator {
    cfg: DegradeConfig,
    hr: (usize, usize),
    lr: (usize, usize),
    channels: usize,
    geo: WarpGeometry,
    taps: Vec<Option<Tap>>,
    mask: ValidityMask,
}

impl FrameOperator {
    /// Operator for an HR image of `hr_w × hr_h × channels`. Raw mode needs 3 channels.
    pub fn new(
        hr_w: usize,
        hr_h: usize,
        channels: usize,
        p: &AffineMotion,
        cfg: &DegradeConfig,
    ) -> Result<Self> {
        if cfg.mosaic && channels != 3 {
            return Err(Error::dims("raw mode needs an RGB latent image"));
        }
        let lr = cfg.lr_dims(hr_w, hr_h)?;
        let geo = WarpGeometry::new(p, hr_w, hr_h, hr_w, hr_h)?;
        let taps: Vec<Option<Tap>> = (0..hr_w * hr_h)
            .map(|i| geo.tap(i % hr_w, i / hr_w))
            .collect();
        let hr_mask = ValidityMask {
            width: hr_w,
            height: hr_h,
            data: taps.iter().map(Option::is_some).collect(),
        };
        let mask = hr_mask.downsample(cfg.scale);
        Ok(Self {
            cfg: *cfg,
            hr: (hr_w, hr_h),
            lr,
            channels,
            geo,
            taps,
            mask,
        })
    }

    pub fn for_image(x: &PlanarImage, p: &AffineMotion, cfg: &DegradeConfig) -> Result<Self> {
        Self::new(x.width(), x.height(), x.channels(), p, cfg)
    }

    /// Drops from the mask every output whose HR pixels, or their warped
    /// source positions, lie within `margin` pixels of an image border.
    /// Operator values are unchanged.
    pub fn restrict_to_interior(mut self, margin: f64) -> Self {
        if margin <= 0.0 {
            return self;
        }
        let (w, h) = self.hr;
        let (wmax, hmax) = ((w - 1) as f64 - margin, (h - 1) as f64 - margin);
        let inside = |x: f64, y: f64| x >= margin && x <= wmax && y >= margin && y <= hmax;
        let data = (0..w * h)
            .map(|i| {
                let (u, v) = (i % w, i / w);
                let (sx, sy) = self.geo.source_position(u, v);
                self.taps[i].is_some() && inside(sx, sy) && inside(u as f64, v as f64)
            })
            .collect();
        let interior = ValidityMask {
            width: w,
            height: h,
            data,
        };
        self.mask = self.mask.and(&interior.downsample(self.cfg.scale));
        self
    }

    pub fn lr_dims(&self) -> (usize, usize) {
        self.lr
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        self.hr
    }

    pub fn config(&self) -> &DegradeConfig {
        &self.cfg
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    /// Number of observed samples (`lr_w · lr_h` in raw mode, times channels otherwise).
    pub fn output_len(&self) -> usize {
        let n = self.lr.0 * self.lr.1;
        if self.cfg.mosaic {
            n
        } else {
            n * self.channels
        }
    }

    /// `(plane, lr_u, lr_v)` of an output sample; `plane` is the HR channel it reads.
    #[inline]
    fn locate(&self, i: usize) -> (usize, usize, usize) {
        let n = self.lr.0 * self.lr.1;
        let (c, j) = (i / n, i % n);
        let (u, v) = (j % self.lr.0, j / self.lr.0);
        let plane = if self.cfg.mosaic {
            self.cfg.pattern.channel_of(u, v).index()
        } else {
            c
        };
        (plane, u, v)
    }

    /// Whether output sample `i` is valid.
    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        let n = self.lr.0 * self.lr.1;
        self.mask.data[i % n]
    }

    fn check_input(&self, x: &PlanarImage) -> Result<()> {
        if (x.width(), x.height(), x.channels()) != (self.hr.0, self.hr.1, self.channels) {
            return Err(Error::dims(format!(
                "operator expects {}x{}x{}, got {}x{}x{}",
                self.hr.0,
                self.hr.1,
                self.channels,
                x.width(),
                x.height(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// `U_p x` as a flat sample vector.
    pub fn apply_flat(&self, x: &PlanarImage) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let s = self.cfg.scale;
        let inv = 1.0 / (s * s) as f64;
        let hr_w = self.hr.0;
        let out = (0..self.output_len())
            .into_par_iter()
            .map(|i| {
                let (plane, u, v) = self.locate(i);
                let src = x.plane(plane);
                let mut acc = 0.0;
                for dv in 0..s {
                    let row = (v * s + dv) * hr_w + u * s;
                    for du in 0..s {
                        if let Some(t) = &self.taps[row + du] {
                            acc += t.sample(src, hr_w);
                        }
                    }
                }
                acc * inv
            })
            .collect();
        Ok(out)
    }

    /// `U_pᵀ (M r)`, where `M` zeroes samples outside `mask` (the operator's own
    /// mask when `None`).
    pub fn adjoint_flat(&self, r: &[f64], mask: Option<&ValidityMask>) -> Result<PlanarImage> {
        if r.len() != self.output_len() {
            return Err(Error::dims("residual length does not match the operator"));
        }
        let mask = mask.unwrap_or(&self.mask);
        if (mask.width, mask.height) != self.lr {
            return Err(Error::dims("mask does not match the low-resolution grid"));
        }
        let s = self.cfg.scale;
        let inv = 1.0 / (s * s) as f64;
        let (hr_w, hr_h) = self.hr;
        let n = self.lr.0 * self.lr.1;
        let mut out = PlanarImage::zeros(hr_w, hr_h, self.channels);
        for (i, &ri) in r.iter().enumerate() {
            if !mask.data[i % n] || ri == 0.0 {
                continue;
            }
            let (plane, u, v) = self.locate(i);
            let dst = out.plane_mut(plane);
            let weight = ri * inv;
            for dv in 0..s {
                let row = (v * s + dv) * hr_w + u * s;
                for du in 0..s {
                    if let Some(t) = &self.taps[row + du] {
                        for (j, w) in t.indices(hr_w).into_iter().zip(t.weights()) {
                            dst[j] += w * weight;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Wraps flat samples in the observation type this operator produces.
    pub fn to_observation(&self, data: Vec<f64>) -> Result<Observation> {
        let (w, h) = self.lr;
        if self.cfg.mosaic {
            Ok(Observation::Raw(BayerFrame::new(w, h, data)?))
        } else {
            Ok(Observation::Rgb(PlanarImage::new(
                w,
                h,
                self.channels,
                data,
            )?))
        }
    }

    /// Residual `U_p z − y` with invalid samples zeroed, and its squared norm.
    pub fn masked_residual(&self, z: &PlanarImage, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        if y.len() != self.output_len() {
            return Err(Error::dims("observation does not match the operator"));
        }
        let mut r = self.apply_flat(z)?;
        let mut ssd = 0.0;
        for (i, (ri, yi)) in r.iter_mut().zip(y).enumerate() {
            if self.is_valid(i) {
                *ri -= yi;
                ssd += *ri * *ri;
            } else {
                *ri = 0.0;
            }
        }
        Ok((r, ssd))
    }

    /// Rows `∂(U_p z)_i/∂p`, zero on invalid samples.
    ///
    /// This is the exact derivative of the bilinear resampling, not a sampled
    /// finite-difference gradient, so it agrees with finite differences of
    /// [`FrameOperator::apply_flat`] wherever the interpolant is smooth.
    pub fn jacobian(&self, z: &PlanarImage) -> Result<Jacobian> {
        self.check_input(z)?;
        let s = self.cfg.scale;
        let inv = 1.0 / (s * s) as f64;
        let hr_w = self.hr.0;
        let rows = (0..self.output_len())
            .into_par_iter()
            .map(|i| {
                let mut row = [0.0; 6];
                if !self.is_valid(i) {
                    return row;
                }
                let (plane, u, v) = self.locate(i);
                let src = z.plane(plane);
                for dv in 0..s {
                    let y = v * s + dv;
                    for du in 0..s {
                        let x = u * s + du;
                        let Some(t) = &self.taps[y * hr_w + x] else {
                            continue;
                        };
                        let (_, gx, gy) = t.sample_with_gradient(src, hr_w);
                        let (nx, ny, k) = self.geo.position_partials(x, y);
                        row[0] += gx * nx;
                        row[1] += gx * ny;
                        row[2] += gy * nx;
                        row[3] += gy * ny;
                        row[4] += gx * k;
                        row[5] += gy * k;
                    }
                }
                row.map(|r| r * inv)
            })
            .collect();
        Ok(Jacobian {
            rows,
            mask: self.mask.clone(),
        })
    }
}

/// Motion Jacobian: one 6-vector per observed sample.
#[derive(Clone, Debug)]
pub struct Jacobian {
    pub rows: Vec<[f64; 6]>,
    pub mask: ValidityMask,
}

impl Jacobian {
    /// Column `i` as a dense vector.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }

    /// `JᵀJ` (upper and lower triangles filled).
    pub fn normal_matrix(&self) -> [[f64; 6]; 6] {
        let mut h = [[0.0; 6]; 6];
        for r in &self.rows {
            for a in 0..6 {
                for b in a..6 {
                    h[a][b] += r[a] * r[b];
                }
            }
        }
        for a in 1..6 {
            let (upper, lower) = h.split_at_mut(a);
            for (b, row) in upper.iter().enumerate() {
                lower[0][b] = row[a];
            }
        }
        h
    }

    /// `Jᵀr`.
    pub fn transpose_times(&self, r: &[f64]) -> [f64; 6] {
        let mut g = [0.0; 6];
        for (row, ri) in self.rows.iter().zip(r) {
            for a in 0..6 {
                g[a] += row[a] * ri;
            }
        }
        g
    }
}

/// `U_p x` and the low-resolution validity mask.
pub fn forward_apply(
    x: &PlanarImage,
    p: &AffineMotion,
    cfg: &DegradeConfig,
) -> Result<(Observation, ValidityMask)> {
    let op = FrameOperator::for_image(x, p, cfg)?;
    let data = op.apply_flat(x)?;
    Ok((op.to_observation(data)?, op.mask.clone()))
}

/// `U_pᵀ (M r)` onto an `hr_w × hr_h` RGB grid (or `r`'s channel count in planar mode).
pub fn adjoint_apply(
    r: &Observation,
    p: &AffineMotion,
    cfg: &DegradeConfig,
    mask: &ValidityMask,
) -> Result<PlanarImage> {
    let channels = match r {
        Observation::Raw(_) => 3,
        Observation::Rgb(i) => i.channels(),
    };
    if r.is_raw() != cfg.mosaic {
        return Err(Error::Config(
            "observation kind does not match the degradation mode".into(),
        ));
    }
    let s = cfg.scale;
    let op = FrameOperator::new(r.width() * s, r.height() * s, channels, p, cfg)?;
    op.adjoint_flat(r.data(), Some(mask))
}

/// `∂(U_p z)/∂p` for every observed sample.
pub fn motion_jacobian(z: &PlanarImage, p: &AffineMotion, cfg: &DegradeConfig) -> Result<Jacobian> {
    FrameOperator::for_image(z, p, cfg)?.jacobian(z)
}

/// Residual observation `U_p z − y`, masked.
pub fn residual(
    z: &PlanarImage,
    y: &Observation,
    p: &AffineMotion,
    cfg: &DegradeConfig,
) -> Result<Observation> {
    let op = FrameOperator::for_image(z, p, cfg)?;
    let (r, _) = op.masked_residual(z, y.data())?;
    Ok(y.with_data(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> PlanarImage {
        PlanarImage::from_fn(w, h, c, |_, _, _| rng.random::<f64>())
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn small_motion(rng: &mut ChaCha8Rng, amp: f64) -> AffineMotion {
        let mut p = [0.0; 6];
        for x in &mut p {
            *x = rng.random_range(-amp..amp);
        }
        AffineMotion::from_params(p)
    }

    /// Direct bilinear evaluation with no shared code.
    fn naive_sample(img: &PlanarImage, c: usize, sx: f64, sy: f64) -> Option<f64> {
        let (w, h) = (img.width() as f64, img.height() as f64);
        if sx < 0.0 || sy < 0.0 || sx > w - 1.0 || sy > h - 1.0 {
            return None;
        }
        let get = |x: f64, y: f64| {
            let xi = (x as usize).min(img.width() - 1);
            let yi = (y as usize).min(img.height() - 1);
            img.get(c, xi, yi)
        };
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        Some(
            (1.0 - fx) * (1.0 - fy) * get(x0, y0)
                + fx * (1.0 - fy) * get(x0 + 1.0, y0)
                + (1.0 - fx) * fy * get(x0, y0 + 1.0)
                + fx * fy * get(x0 + 1.0, y0 + 1.0),
        )
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(9, 6, 3, &mut rng);
        let (out, mask) = warp_affine(&img, &AffineMotion::identity(), 9, 6).unwrap();
        assert_eq!(out, img);
        assert!(mask.all());
    }

    #[test]
    fn integer_shift_of_ramp() {
        let ramp = PlanarImage::from_fn(16, 16, 1, |_, u, _| u as f64);
        let one_px = 2.0 / 16.0;
        let (out, mask) =
            warp_affine(&ramp, &AffineMotion::translation(one_px, 0.0), 16, 16).unwrap();
        for v in 0..16 {
            for u in 0..15 {
                assert!(mask.get(u, v));
                assert!((out.get(0, u, v) - (u + 1) as f64).abs() < 1e-12);
            }
            assert!(!mask.get(15, v));
            assert_eq!(out.get(0, 15, v), 0.0);
        }
    }

    #[test]
    fn warp_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let img = random_image(16, 16, 1, &mut rng);
            let p = small_motion(&mut rng, 0.08);
            let (out, mask) = warp_affine(&img, &p, 16, 16).unwrap();
            for v in 0..16 {
                for u in 0..16 {
                    let n = crate::motion::normalized_center(u, v, 16, 16);
                    let q = p.apply(n);
                    let (sx, sy) = (q[0] * 8.0 + 7.5, q[1] * 8.0 + 7.5);
                    match naive_sample(&img, 0, sx, sy) {
                        Some(want) => {
                            assert!(mask.get(u, v));
                            assert!((out.get(0, u, v) - want).abs() < 1e-6);
                        }
                        None => assert!(!mask.get(u, v) && out.get(0, u, v) == 0.0),
                    }
                }
            }
        }
    }

    #[test]
    fn warp_between_resolutions_uses_shared_field_of_view() {
        // A 2x-coarser output grid sees pixel-center positions halfway
        // between source pixels.
        let ramp = PlanarImage::from_fn(8, 8, 1, |_, u, _| u as f64);
        let (out, mask) = warp_affine(&ramp, &AffineMotion::identity(), 4, 4).unwrap();
        assert!(mask.all());
        for u in 0..4 {
            assert!((out.get(0, u, 0) - (2 * u) as f64 - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_adjoint_identity_and_integer_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_image(8, 8, 2, &mut rng);
        let id = AffineMotion::identity();
        let all = ValidityMask::all_valid(8, 8);
        assert_eq!(warp_adjoint(&r, &all, &id, 8, 8).unwrap(), r);

        let shift = AffineMotion::translation(2.0 / 8.0, 0.0);
        let (_, mask) = warp_affine(&r, &shift, 8, 8).unwrap();
        let back = warp_adjoint(&r, &mask, &shift, 8, 8).unwrap();
        for c in 0..2 {
            for v in 0..8 {
                assert_eq!(back.get(c, 0, v), 0.0);
                for u in 1..8 {
                    assert!((back.get(c, u, v) - r.get(c, u - 1, v)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_dot_product_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x = random_image(13, 10, 2, &mut rng);
            let p = small_motion(&mut rng, 0.1);
            let (wx, mask) = warp_affine(&x, &p, 7, 11).unwrap();
            let mut y = random_image(7, 11, 2, &mut rng);
            for c in 0..2 {
                for v in 0..11 {
                    for u in 0..7 {
                        if !mask.get(u, v) {
                            y.set(c, u, v, 0.0);
                        }
                    }
                }
            }
            let lhs = dot(wx.data(), y.data());
            let rhs = dot(
                x.data(),
                warp_adjoint(&y, &mask, &p, 13, 10).unwrap().data(),
            );
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn block_mean_cases() {
        let c = PlanarImage::filled(6, 6, 3, 0.7);
        assert!(blur_downsample(&c, 3)
            .unwrap()
            .data()
            .iter()
            .all(|&x| (x - 0.7).abs() < 1e-15));
        let q = PlanarImage::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(blur_downsample(&q, 2).unwrap().data(), &[2.5]);
        assert!(blur_downsample(&q, 3).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(12, 12, 1, &mut rng);
        let d = blur_downsample(&img, 3).unwrap();
        for bv in 0..4 {
            for bu in 0..4 {
                let mut sum = 0.0;
                for y in 3 * bv..3 * bv + 3 {
                    for x in 3 * bu..3 * bu + 3 {
                        sum += img.get(0, x, y);
                    }
                }
                assert!((d.get(0, bu, bv) - sum / 9.0).abs() < 1e-15);
            }
        }
        // energy bookkeeping
        let total: f64 = img.data().iter().sum();
        let lr_total: f64 = d.data().iter().sum();
        assert!((lr_total * 9.0 - total).abs() < 1e-12);
    }

    #[test]
    fn block_mean_adjoint() {
        let one = PlanarImage::new(1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(blur_downsample_adjoint(&one, 2).data(), &[0.25; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(3, 2, 2, &mut rng);
        assert_eq!(blur_downsample_adjoint(&img, 1), img);

        let x = random_image(12, 8, 3, &mut rng);
        let y = random_image(3, 2, 3, &mut rng);
        let lhs = dot(blur_downsample(&x, 4).unwrap().data(), y.data());
        let rhs = dot(x.data(), blur_downsample_adjoint(&y, 4).data());
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs());
    }

    #[test]
    fn mosaic_phase_and_adjoint() {
        let img = PlanarImage::from_fn(4, 4, 3, |c, _, _| (c + 1) as f64);
        let m = mosaic(&img).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(1, 1), 3.0);
        assert_eq!(mosaic(&mosaic_adjoint(&m)).unwrap(), m);
        assert!(mosaic(&PlanarImage::zeros(3, 4, 3)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_image(6, 4, 3, &mut rng);
        let y = mosaic(&random_image(6, 4, 3, &mut rng)).unwrap();
        let lhs = dot(mosaic(&x).unwrap().data(), y.data());
        let rhs = dot(x.data(), mosaic_adjoint(&y).data());
        assert!((lhs - rhs).abs() <= 1e-7 * lhs.abs());
    }

    #[test]
    fn forward_identity_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_image(6, 4, 3, &mut rng);
        let (y, mask) =
            forward_apply(&x, &AffineMotion::identity(), &DegradeConfig::rgb(1)).unwrap();
        assert_eq!(y, Observation::Rgb(x.clone()));
        assert!(mask.all());
        let back =
            adjoint_apply(&y, &AffineMotion::identity(), &DegradeConfig::rgb(1), &mask).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn forward_matches_component_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in [1, 2, 3] {
            let x = random_image(24, 12, 3, &mut rng);
            let p = small_motion(&mut rng, 0.05);
            let cfg = DegradeConfig::raw(s);
            let (y, mask) = forward_apply(&x, &p, &cfg).unwrap();
            let (w, hr_mask) = warp_affine(&x, &p, x.width(), x.height()).unwrap();
            let chained = mosaic(&blur_downsample(&w, s).unwrap()).unwrap();
            for (a, b) in y.data().iter().zip(chained.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(mask, hr_mask.downsample(s));
        }
    }

    #[test]
    fn per_channel_constants_survive() {
        let x = PlanarImage::from_fn(16, 16, 3, |c, _, _| 0.2 * (c + 1) as f64);
        let p = AffineMotion::euclidean(0.01, 0.02, -0.01);
        let (y, mask) = forward_apply(&x, &p, &DegradeConfig::raw(2)).unwrap();
        let Observation::Raw(frame) = y else { panic!() };
        for v in 0..8 {
            for u in 0..8 {
                if mask.get(u, v) {
                    let want = 0.2 * (frame.channel_of(u, v).index() + 1) as f64;
                    assert!((frame.get(u, v) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn raw_adjoint_of_single_sample() {
        let mut data = vec![0.0; 16];
        data[0] = 1.0; // red site (0, 0)
        let r = Observation::Raw(BayerFrame::new(4, 4, data).unwrap());
        let cfg = DegradeConfig::raw(2);
        let out = adjoint_apply(
            &r,
            &AffineMotion::identity(),
            &cfg,
            &ValidityMask::all_valid(4, 4),
        )
        .unwrap();
        for c in 0..3 {
            for v in 0..8 {
                for u in 0..8 {
                    let want = if c == 0 && u < 2 && v < 2 { 0.25 } else { 0.0 };
                    assert_eq!(out.get(c, u, v), want);
                }
            }
        }
    }

    #[test]
    fn composed_dot_product_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for cfg in [
            DegradeConfig::raw(2),
            DegradeConfig::rgb(3),
            DegradeConfig::raw(1),
        ] {
            for _ in 0..5 {
                let x = random_image(24, 12, 3, &mut rng);
                let p = small_motion(&mut rng, 0.1);
                let op = FrameOperator::for_image(&x, &p, &cfg).unwrap();
                let r: Vec<f64> = (0..op.output_len())
                    .map(|_| rng.random::<f64>() - 0.5)
                    .collect();
                let ux = op.apply_flat(&x).unwrap();
                let masked: f64 = ux
                    .iter()
                    .zip(&r)
                    .enumerate()
                    .filter(|(i, _)| op.is_valid(*i))
                    .map(|(_, (a, b))| a * b)
                    .sum();
                let rhs = dot(x.data(), op.adjoint_flat(&r, None).unwrap().data());
                assert!((masked - rhs).abs() <= 1e-10 * masked.abs().max(1.0));
            }
        }
    }

    #[test]
    fn jacobian_of_constant_is_zero() {
        let z = PlanarImage::filled(16, 16, 3, 0.4);
        let j = motion_jacobian(
            &z,
            &AffineMotion::euclidean(0.02, 0.01, 0.0),
            &DegradeConfig::raw(2),
        )
        .unwrap();
        assert!(j.rows.iter().all(|r| r.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn jacobian_translation_columns_on_ramp() {
        let z = PlanarImage::from_fn(16, 16, 3, |_, u, _| u as f64);
        let j = motion_jacobian(&z, &AffineMotion::identity(), &DegradeConfig::raw(2)).unwrap();
        for r in &j.rows {
            assert!((r[4] - 8.0).abs() < 1e-12);
            assert_eq!(r[5], 0.0);
        }
    }

    #[test]
    fn jacobian_exact_away_from_interpolation_kinks() {
        // A pure sub-pixel translation keeps every sample strictly inside an
        // interpolation cell, where the bilinear model is smooth in the
        // translation parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_image(16, 16, 3, &mut rng);
        let cfg = DegradeConfig::raw(2);
        let p = AffineMotion::translation(0.3 / 8.0, -0.45 / 8.0);
        let j = motion_jacobian(&z, &p, &cfg).unwrap();
        let h = 1e-6;
        for col in [4, 5] {
            let mut plus = p.params();
            let mut minus = p.params();
            plus[col] += h;
            minus[col] -= h;
            let fp = forward_apply(&z, &AffineMotion::from_params(plus), &cfg)
                .unwrap()
                .0;
            let fm = forward_apply(&z, &AffineMotion::from_params(minus), &cfg)
                .unwrap()
                .0;
            for (i, row) in j.rows.iter().enumerate() {
                if !j.mask.data()[i] {
                    continue;
                }
                let fd = (fp.data()[i] - fm.data()[i]) / (2.0 * h);
                assert!(
                    (row[col] - fd).abs() < 1e-6,
                    "col {col} row {i}: {} vs {fd}",
                    row[col]
                );
            }
        }
    }

    #[test]
    fn operator_rejects_bad_shapes() {
        let p = AffineMotion::identity();
        assert!(FrameOperator::new(10, 10, 3, &p, &DegradeConfig::raw(2)).is_err()); // odd LR
        assert!(FrameOperator::new(9, 9, 3, &p, &DegradeConfig::rgb(2)).is_err());
        assert!(FrameOperator::new(8, 8, 1, &p, &DegradeConfig::raw(2)).is_err());
        let bad = AffineMotion::from_params([-0.95, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            FrameOperator::new(8, 8, 3, &bad, &DegradeConfig::raw(2)),
            Err(Error::DegenerateWarp { .. })
        ));
    }

    #[test]
    fn mask_downsample_is_block_and() {
        let mut data = vec![true; 16];
        data[5] = false;
        let m = ValidityMask::from_vec(4, 4, data).unwrap();
        let d = m.downsample(2);
        assert_eq!(d.data(), &[false, true, true, true]);
    }
}
