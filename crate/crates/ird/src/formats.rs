//! Binary PPM (P6) and PFM readers and writers, JSON documents and atomic
//! file output.

use std::fs;
use std::io::Write;
use std::path::Path;

use ird_core::ImageBuffer;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};

/// Raw PFM payload in top-to-bottom row order. Samples may be non-finite;
/// ground-truth maps use that to mark missing labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn to_image(&self) -> ird_core::Result<ImageBuffer> {
        ImageBuffer::new(self.height, self.width, self.channels, self.data.iter().map(|&v| f64::from(v)).collect())
    }
}

impl From<&ImageBuffer> for PfmImage {
    fn from(img: &ImageBuffer) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            channels: img.channels(),
            data: img.data().iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Splits the next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

fn parse_token<T: std::str::FromStr>(bytes: &[u8], pos: &mut usize, what: &str) -> Result<T, String> {
    let tok = next_token(bytes, pos).ok_or_else(|| format!("missing {what}"))?;
    std::str::from_utf8(tok).ok().and_then(|s| s.parse().ok()).ok_or_else(|| format!("malformed {what}"))
}

/// Consumes the single whitespace byte separating the header from the
/// payload.
fn end_of_header(bytes: &[u8], pos: &mut usize) -> Result<(), String> {
    match bytes.get(*pos) {
        Some(b) if b.is_ascii_whitespace() => {
            *pos += 1;
            Ok(())
        }
        _ => Err("missing whitespace after header".into()),
    }
}

/// 8-bit P6 encoding; samples are clamped to `[0, 1]` and rounded.
pub fn encode_ppm(img: &ImageBuffer) -> Result<Vec<u8>, String> {
    if img.channels() != 3 {
        return Err(format!("PPM needs 3 channels, got {}", img.channels()));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer, String> {
    let mut pos = 0;
    if next_token(bytes, &mut pos) != Some(b"P6".as_slice()) {
        return Err("not a binary PPM (P6)".into());
    }
    let width: usize = parse_token(bytes, &mut pos, "width")?;
    let height: usize = parse_token(bytes, &mut pos, "height")?;
    let maxval: u16 = parse_token(bytes, &mut pos, "max value")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported max value {maxval}"));
    }
    end_of_header(bytes, &mut pos)?;
    let n = width * height * 3;
    let payload = bytes.get(pos..pos + n).ok_or("truncated pixel data")?;
    let scale = f64::from(maxval);
    let data = payload.iter().map(|&b| (f64::from(b) / scale).min(1.0)).collect();
    ImageBuffer::new(height, width, 3, data).map_err(|e| e.to_string())
}

/// Little-endian PFM (scale `-1.0`), rows stored bottom to top.
pub fn encode_pfm(img: &PfmImage) -> Result<Vec<u8>, String> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(format!("PFM needs 1 or 3 channels, got {c}")),
    };
    let row = img.width * img.channels;
    if img.data.len() != row * img.height {
        return Err("sample count does not match the grid".into());
    }
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for r in (0..img.height).rev() {
        for v in &img.data[r * row..(r + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage, String> {
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos) {
        Some(b"Pf") => 1,
        Some(b"PF") => 3,
        _ => return Err("not a PFM (Pf/PF)".into()),
    };
    let width: usize = parse_token(bytes, &mut pos, "width")?;
    let height: usize = parse_token(bytes, &mut pos, "height")?;
    let scale: f32 = parse_token(bytes, &mut pos, "scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("scale must be finite and nonzero".into());
    }
    end_of_header(bytes, &mut pos)?;
    let row = width * channels;
    let payload = bytes.get(pos..pos + row * height * 4).ok_or("truncated sample data")?;
    let samples: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let mut data = Vec::with_capacity(samples.len());
    for r in (0..height).rev() {
        data.extend_from_slice(&samples[r * row..(r + 1) * row]);
    }
    Ok(PfmImage { height, width, channels, data })
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let name = path.file_name().ok_or_else(|| CliError::format(path, "not a file path"))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    decode_ppm(&read_bytes(path)?).map_err(|m| CliError::format(path, m))
}

pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_atomic(path, &encode_ppm(img).map_err(|m| CliError::format(path, m))?)
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    decode_pfm(&read_bytes(path)?).map_err(|m| CliError::format(path, m))
}

pub fn write_pfm(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_atomic(path, &encode_pfm(&img.into()).map_err(|m| CliError::format(path, m))?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Replicates a single-channel image into three channels for PPM previews.
pub fn gray_to_rgb(img: &ImageBuffer) -> ird_core::Result<ImageBuffer> {
    if img.channels() == 3 {
        return Ok(img.clone());
    }
    ImageBuffer::from_fn(img.height(), img.width(), 3, |r, c, _| img.at(r, c, 0))
}
