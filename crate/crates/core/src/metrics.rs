//! Reconstruction and registration quality.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::{to_grayscale, PlanarImage};
use crate::motion::AffineMotion;
use crate::registration::geometric_error;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;

fn check_same(a: &PlanarImage, b: &PlanarImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dims(format!(
            "cannot compare {}x{}x{} with {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// PSNR in dB over all samples, `f64::INFINITY` for identical inputs.
pub fn psnr(a: &PlanarImage, b: &PlanarImage, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::dims("empty images"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR after dropping `border` pixels on every side.
pub fn psnr_cropped(a: &PlanarImage, b: &PlanarImage, peak: f64, border: usize) -> Result<f64> {
    check_same(a, b)?;
    psnr(&a.crop_border(border)?, &b.crop_border(border)?, peak)
}

fn gray(img: &PlanarImage) -> Result<PlanarImage> {
    match img.channels() {
        1 => Ok(img.clone()),
        _ => to_grayscale(img),
    }
}

/// Mean SSIM over every 8×8 window position, on grayscale, with uniform
/// weights and population statistics.
pub fn ssim(a: &PlanarImage, b: &PlanarImage, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    let (ga, gb) = (gray(a)?, gray(b)?);
    let (w, h) = (ga.width(), ga.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::dims("images are smaller than the SSIM window"));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (x, y) = (ga.data(), gb.data());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for v0 in 0..=h - SSIM_WINDOW {
        for u0 in 0..=w - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for v in v0..v0 + SSIM_WINDOW {
                for u in u0..u0 + SSIM_WINDOW {
                    let (p, q) = (x[v * w + u], y[v * w + u]);
                    sx += p;
                    sy += q;
                    sxx += p * p;
                    syy += q * q;
                    sxy += p * q;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub geom_error_px: Option<f64>,
    pub per_frame_geom: Option<Vec<f64>>,
}

/// PSNR and SSIM on the interior (a border of `scale + 2` pixels is
/// dropped) plus, when both motion lists are given, the mean geometric
/// error on the `lr_w × lr_h` grid.
pub fn evaluate(
    estimate: &PlanarImage,
    truth: &PlanarImage,
    scale: usize,
    motions: Option<(&[AffineMotion], &[AffineMotion])>,
    lr_dims: (usize, usize),
) -> Result<EvalReport> {
    check_same(estimate, truth)?;
    let border = scale + 2;
    let (a, b) = (estimate.crop_border(border)?, truth.crop_border(border)?);
    let peak = 1.0;
    let per_frame = match motions {
        Some((est, gt)) => {
            if est.len() != gt.len() {
                return Err(Error::dims("motion lists differ in length"));
            }
            Some(
                est.iter()
                    .zip(gt)
                    .map(|(p, q)| geometric_error(p, q, lr_dims.0, lr_dims.1))
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    Ok(EvalReport {
        psnr: psnr(&a, &b, peak)?,
        ssim: ssim(&a, &b, peak)?.clamp(0.0, 1.0),
        geom_error_px: per_frame
            .as_ref()
            .filter(|g| !g.is_empty())
            .map(|g| g.iter().sum::<f64>() / g.len() as f64),
        per_frame_geom: per_frame,
    })
}

fn parse_field(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::format("eval report", format!("bad number {s:?}")))
}

impl EvalReport {
    /// `psnr<TAB>ssim<TAB>geom` with `inf` and `NA` sentinels; numbers use
    /// the shortest representation that parses back exactly.
    pub fn to_line(&self) -> String {
        let geom = self
            .geom_error_px
            .map_or("NA".to_string(), |g| g.to_string());
        format!("{}\t{}\t{geom}", self.psnr, self.ssim)
    }

    /// Inverse of [`EvalReport::to_line`]; per-frame errors are not part of the line.
    pub fn from_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        let [psnr, ssim, geom] = fields[..] else {
            return Err(Error::format(
                "eval report",
                "expected three tab-separated fields",
            ));
        };
        Ok(Self {
            psnr: parse_field(psnr)?,
            ssim: parse_field(ssim)?,
            geom_error_px: if geom == "NA" {
                None
            } else {
                Some(parse_field(geom)?)
            },
            per_frame_geom: None,
        })
    }

    pub fn to_json(&self) -> String {
        let num = |x: f64| {
            if x.is_finite() {
                serde_json::Value::from(x)
            } else {
                serde_json::Value::from(x.to_string())
            }
        };
        let mut map = serde_json::Map::new();
        map.insert("psnr".into(), num(self.psnr));
        map.insert("ssim".into(), num(self.ssim));
        map.insert(
            "geom_px".into(),
            self.geom_error_px.map_or(serde_json::Value::Null, num),
        );
        serde_json::Value::Object(map).to_string()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}
