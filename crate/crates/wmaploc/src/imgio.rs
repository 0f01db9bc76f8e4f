//! Binary PPM (P6) / PGM (P5) reading and writing, 8-bit, with `#` comment
//! lines in the header. Pixel values map to/from `f64` in [0,1] by scaling
//! with 255 and rounding half away from zero on write.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("{path}: {detail}")]
    Malformed { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImgError>;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an RGB image stored channel-major ([3,H,W], values in [0,1]).
pub fn write_ppm(path: &Path, h: usize, w: usize, chw: &[f64], comment: Option<&str>) -> Result<()> {
    assert_eq!(chw.len(), 3 * h * w);
    let mut buf = Vec::with_capacity(3 * h * w + 64);
    buf.extend_from_slice(b"P6\n");
    if let Some(c) = comment {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    buf.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(quantize(chw[(c * h + y) * w + x]));
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Write a grayscale image ([H,W], values in [0,1]).
pub fn write_pgm(path: &Path, h: usize, w: usize, gray: &[f64], comment: Option<&str>) -> Result<()> {
    assert_eq!(gray.len(), h * w);
    let mut buf = Vec::with_capacity(h * w + 64);
    buf.extend_from_slice(b"P5\n");
    if let Some(c) = comment {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    buf.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    buf.extend(gray.iter().map(|&v| quantize(v)));
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Header {
    w: usize,
    h: usize,
    data_start: usize,
}

fn parse_header(path: &Path, bytes: &[u8], magic: &[u8]) -> Result<Header> {
    let err = |detail: String| ImgError::Malformed { path: path.display().to_string(), detail };
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(err(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields: Vec<usize> = Vec::new();
    while fields.len() < 3 {
        if pos >= bytes.len() {
            return Err(err("truncated header".into()));
        }
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            c if c.is_ascii_digit() => {
                let start = pos;
                while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                    pos += 1;
                }
                let s = std::str::from_utf8(&bytes[start..pos]).unwrap();
                fields.push(s.parse().map_err(|_| err(format!("bad number '{s}'")))?);
            }
            c => return Err(err(format!("unexpected byte 0x{c:02x} in header"))),
        }
    }
    if fields[2] != 255 {
        return Err(err(format!("only maxval 255 supported, got {}", fields[2])));
    }
    // single whitespace byte separates maxval from data
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing separator before pixel data".into()));
    }
    Ok(Header { w: fields[0], h: fields[1], data_start: pos + 1 })
}

/// Read a P6 file into channel-major [3,H,W] values in [0,1].
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let hd = parse_header(path, &bytes, b"P6")?;
    let need = 3 * hd.w * hd.h;
    let data = &bytes[hd.data_start..];
    if data.len() != need {
        return Err(ImgError::Malformed {
            path: path.display().to_string(),
            detail: format!("expected {need} data bytes, got {}", data.len()),
        });
    }
    let mut chw = vec![0.0; need];
    for y in 0..hd.h {
        for x in 0..hd.w {
            for c in 0..3 {
                chw[(c * hd.h + y) * hd.w + x] = data[(y * hd.w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok((hd.h, hd.w, chw))
}

/// Read a P5 file into [H,W] values in [0,1].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let hd = parse_header(path, &bytes, b"P5")?;
    let need = hd.w * hd.h;
    let data = &bytes[hd.data_start..];
    if data.len() != need {
        return Err(ImgError::Malformed {
            path: path.display().to_string(),
            detail: format!("expected {need} data bytes, got {}", data.len()),
        });
    }
    Ok((hd.h, hd.w, data.iter().map(|&b| b as f64 / 255.0).collect()))
}
