//! On-disk formats.
//!
//! * 16-bit binary PGM (`P5`) and PPM (`P6`), samples scaled so that the
//!   maximum code maps to the white level given in a `# white=<value>`
//!   comment (1 when absent). 8-bit files are accepted on input.
//! * `BSR1`: a 16-byte header (`b"BSR1"`, then width, height and channel
//!   count as little-endian `u32`) followed by planar little-endian `f32`.
//! * Burst directories: `frame_%02d.pgm` (raw) or `frame_%02d.ppm` (color),
//!   with optional `hr.ppm`, `motions.json-lines`, `noise.txt` and
//!   `config.txt`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::forward::Observation;
use crate::image::{BayerFrame, NoiseParams, PlanarImage};
use crate::motion::{format_records, parse_records, AffineMotion};
use crate::synth::SynthBurst;

const MAXVAL: f64 = 65535.0;

/// Encodes a 1- or 3-channel image as a 16-bit PGM or PPM.
pub fn encode_netpbm(img: &PlanarImage, white: f64) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::dims(format!(
                "netpbm holds 1 or 3 channels, not {c}"
            )))
        }
    };
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = format!("{magic}\n# white={white}\n{w} {h}\n65535\n").into_bytes();
    out.reserve(w * h * c * 2);
    for v in 0..h {
        for u in 0..w {
            for ch in 0..c {
                let code = (img.get(ch, u, v) / white * MAXVAL)
                    .round()
                    .clamp(0.0, MAXVAL) as u16;
                out.extend_from_slice(&code.to_be_bytes());
            }
        }
    }
    Ok(out)
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    white: f64,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |msg: &str| Error::format("netpbm", msg.to_string());
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("expected a binary PGM (P5) or PPM (P6)")),
    };
    let mut pos = 2;
    let mut white = 1.0f64;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        match bytes.get(pos) {
            None => return Err(bad("truncated header")),
            Some(b'#') => {
                let end = bytes[pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map_or(bytes.len(), |e| pos + e);
                let comment = String::from_utf8_lossy(&bytes[pos + 1..end]);
                if let Some(value) = comment.trim().strip_prefix("white=") {
                    white = value.trim().parse().map_err(|_| bad("bad white level"))?;
                }
                pos = end;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let end = bytes[pos..]
                    .iter()
                    .position(|b| b.is_ascii_whitespace() || *b == b'#')
                    .map_or(bytes.len(), |e| pos + e);
                let text =
                    std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("non-ASCII header"))?;
                fields.push(
                    text.parse::<usize>()
                        .map_err(|_| bad("bad header number"))?,
                );
                pos = end;
            }
        }
    }
    // exactly one whitespace byte separates the header from the samples
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing separator after header"));
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("bad dimensions or maxval"));
    }
    if !(white > 0.0) || !white.is_finite() {
        return Err(bad("white level must be positive"));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        white,
        data_start: pos + 1,
    })
}

/// Decodes a PGM or PPM into linear values and returns the white level.
pub fn decode_netpbm(bytes: &[u8]) -> Result<(PlanarImage, f64)> {
    let hdr = parse_header(bytes)?;
    let wide = hdr.maxval > 255;
    let bps = if wide { 2 } else { 1 };
    let n = hdr.width * hdr.height * hdr.channels;
    let body = &bytes[hdr.data_start..];
    if body.len() < n * bps {
        return Err(Error::format("netpbm", "truncated sample data"));
    }
    let mut img = PlanarImage::zeros(hdr.width, hdr.height, hdr.channels);
    for i in 0..n {
        let code = if wide {
            u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as usize
        } else {
            body[i] as usize
        };
        if code > hdr.maxval {
            return Err(Error::format("netpbm", "sample exceeds maxval"));
        }
        let (pixel, c) = (i / hdr.channels, i % hdr.channels);
        img.set(
            c,
            pixel % hdr.width,
            pixel / hdr.width,
            code as f64 / hdr.maxval as f64 * hdr.white,
        );
    }
    Ok((img, hdr.white))
}

pub fn write_netpbm(path: &Path, img: &PlanarImage, white: f64) -> Result<()> {
    fs::write(path, encode_netpbm(img, white)?)?;
    Ok(())
}

pub fn read_netpbm(path: &Path) -> Result<(PlanarImage, f64)> {
    decode_netpbm(&fs::read(path)?)
}

pub fn encode_bsr(img: &PlanarImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.data().len());
    out.extend_from_slice(b"BSR1");
    for d in [img.width(), img.height(), img.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in img.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_bsr(bytes: &[u8]) -> Result<PlanarImage> {
    if bytes.len() < 16 || &bytes[..4] != b"BSR1" {
        return Err(Error::format("BSR1", "missing BSR1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (word(4), word(8), word(12));
    let n = w
        .checked_mul(h)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::format("BSR1", "dimensions overflow"))?;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(
            "BSR1",
            format!("expected {} data bytes, found {}", 4 * n, bytes.len() - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    PlanarImage::new(w, h, c, data)
}

pub fn write_bsr(path: &Path, img: &PlanarImage) -> Result<()> {
    fs::write(path, encode_bsr(img))?;
    Ok(())
}

pub fn read_bsr(path: &Path) -> Result<PlanarImage> {
    decode_bsr(&fs::read(path)?)
}

pub fn write_motions(path: &Path, motions: &[AffineMotion]) -> Result<()> {
    fs::write(path, format_records(motions))?;
    Ok(())
}

pub fn read_motions(path: &Path) -> Result<Vec<AffineMotion>> {
    parse_records(&fs::read_to_string(path)?)
}

pub fn format_noise(noise: &NoiseParams) -> String {
    format!("{} {}\n", noise.shot_gain, noise.read_variance)
}

pub fn parse_noise(text: &str) -> Result<NoiseParams> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format("noise", "expected two numbers"))?;
    match values[..] {
        [shot_gain, read_variance] if shot_gain >= 0.0 && read_variance >= 0.0 => Ok(NoiseParams {
            shot_gain,
            read_variance,
        }),
        _ => Err(Error::format("noise", "expected two non-negative numbers")),
    }
}

/// A burst directory as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub frames: Vec<Observation>,
    pub white: f64,
    pub hr: Option<PlanarImage>,
    pub motions: Option<Vec<AffineMotion>>,
    pub noise: Option<NoiseParams>,
    pub config: Option<String>,
}

pub fn frame_name(k: usize, raw: bool) -> String {
    format!("frame_{k:02}.{}", if raw { "pgm" } else { "ppm" })
}

/// Writes a synthesized burst with its ground truth.
pub fn write_fixture(dir: &Path, burst: &SynthBurst) -> Result<()> {
    fs::create_dir_all(dir)?;
    let white = burst.config.white_level;
    write_netpbm(&dir.join("hr.ppm"), &burst.hr, white)?;
    for (k, frame) in burst.frames.iter().enumerate() {
        let img = match frame {
            Observation::Raw(f) => f.as_image(),
            Observation::Rgb(i) => i.clone(),
        };
        write_netpbm(&dir.join(frame_name(k, frame.is_raw())), &img, white)?;
    }
    write_motions(&dir.join("motions.json-lines"), &burst.motions)?;
    if let Some(noise) = burst.config.noise.params() {
        fs::write(dir.join("noise.txt"), format_noise(&noise))?;
    }
    let mut cfg = fs::File::create(dir.join("config.txt"))?;
    cfg.write_all(burst.config.to_kv().as_bytes())?;
    Ok(())
}

/// Reads every `frame_NN` file (numbered from 0 without gaps) plus the
/// optional side files.
pub fn read_fixture(dir: &Path) -> Result<Fixture> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a directory", dir.display()),
        )));
    }
    let noise = match fs::read_to_string(dir.join("noise.txt")) {
        Ok(text) => Some(parse_noise(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let mut frames = Vec::new();
    let mut white = None;
    loop {
        let k = frames.len();
        let (raw_path, rgb_path) = (
            dir.join(frame_name(k, true)),
            dir.join(frame_name(k, false)),
        );
        let (path, raw) = if raw_path.exists() {
            (raw_path, true)
        } else if rgb_path.exists() {
            (rgb_path, false)
        } else {
            break;
        };
        let (img, w) = read_netpbm(&path)?;
        if white.is_some_and(|x| x != w) {
            return Err(Error::format(
                "fixture",
                "frames declare different white levels",
            ));
        }
        white = Some(w);
        let frame = if raw {
            if img.channels() != 1 {
                return Err(Error::format(
                    "fixture",
                    format!("{} is not single-channel", path.display()),
                ));
            }
            Observation::Raw(
                BayerFrame::new(img.width(), img.height(), img.into_data())?.with_noise(noise),
            )
        } else {
            Observation::Rgb(img)
        };
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::EmptyBurst);
    }
    let optional = |name: &str| -> Result<Option<std::path::PathBuf>> {
        let p = dir.join(name);
        Ok(p.exists().then_some(p))
    };
    let hr = optional("hr.ppm")?
        .map(|p| read_netpbm(&p).map(|(i, _)| i))
        .transpose()?;
    let motions = optional("motions.json-lines")?
        .map(|p| read_motions(&p))
        .transpose()?;
    let config = optional("config.txt")?
        .map(fs::read_to_string)
        .transpose()?;
    Ok(Fixture {
        frames,
        white: white.unwrap_or(1.0),
        hr,
        motions,
        noise,
        config,
    })
}
