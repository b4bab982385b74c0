//! NetPBM grayscale (P2/P5) and color (P3/P6) images.

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;

use super::{DataError, Result};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    /// Offset of the first payload byte.
    offset: usize,
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::MalformedHeader("header ends early".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(DataError::UnsupportedMagic(
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        ));
    }
    let magic = [bytes[0], bytes[1]];
    if !matches!(magic[1], b'2' | b'3' | b'5' | b'6') {
        return Err(DataError::UnsupportedMagic(
            String::from_utf8_lossy(&magic).into_owned(),
        ));
    }
    let mut pos = 2;
    if pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::MalformedHeader(
            "magic must be followed by whitespace".into(),
        ));
    }
    let mut field = |name: &str| -> Result<u32> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse::<u32>()
            .map_err(|_| DataError::MalformedHeader(format!("{name} `{tok}` is not a nonnegative integer")))
    };
    let width = field("width")? as usize;
    let height = field("height")? as usize;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(DataError::MalformedHeader(format!("zero extent {width}×{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(DataError::MalformedHeader(format!("maxval {maxval} outside 1..=65535")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        if matches!(magic[1], b'5' | b'6') {
            return Err(DataError::Truncated {
                expected: width * height,
                actual: 0,
            });
        }
    } else {
        pos += 1;
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        offset: pos,
    })
}

/// Decode a NetPBM file into a `(C, H, W)` tensor with values in `[0, 1]`.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    let channels = if matches!(h.magic[1], b'3' | b'6') { 3 } else { 1 };
    let count = channels * h.width * h.height;
    let scale = h.maxval as f32;
    let mut samples = Vec::with_capacity(count);
    match h.magic[1] {
        b'5' | b'6' => {
            let wide = h.maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            let payload = &bytes[h.offset..];
            if payload.len() < need {
                return Err(DataError::Truncated {
                    expected: need,
                    actual: payload.len(),
                });
            }
            if wide {
                samples.extend(
                    payload[..need]
                        .chunks(2)
                        .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32),
                );
            } else {
                samples.extend(payload[..need].iter().map(|&b| b as u32));
            }
        }
        _ => {
            let text = &bytes[h.offset..];
            let mut pos = 0;
            while samples.len() < count {
                let tok = match header_token(text, &mut pos) {
                    Ok(t) => t,
                    Err(_) => {
                        return Err(DataError::Truncated {
                            expected: count,
                            actual: samples.len(),
                        })
                    }
                };
                let v: u32 = tok
                    .parse()
                    .map_err(|_| DataError::MalformedPayload(format!("sample `{tok}` is not an integer")))?;
                samples.push(v);
            }
        }
    }
    if let Some(&v) = samples.iter().find(|&&v| v > h.maxval) {
        return Err(DataError::MalformedPayload(format!(
            "sample {v} exceeds maxval {}",
            h.maxval
        )));
    }
    let (hw, w) = (h.width * h.height, h.width);
    let mut data = vec![0.0f32; count];
    for (i, &v) in samples.iter().enumerate() {
        let (pixel, ch) = (i / channels, i % channels);
        data[ch * hw + (pixel / w) * w + pixel % w] = v as f32 / scale;
    }
    Ok(Tensor::new(vec![channels, h.height, h.width], data)?)
}

/// Encode a `(1, H, W)` or `(3, H, W)` tensor (a leading batch of one is
/// accepted) as binary P5/P6 with maxval 255.
pub fn encode_netpbm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    let dims = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(DataError::Shape(s.to_vec())),
    };
    let (c, h, w) = dims;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(DataError::Shape(s.to_vec())),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    let d = image.data();
    out.reserve(c * hw);
    for p in 0..hw {
        for ch in 0..c {
            out.push((d[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_netpbm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_netpbm(&bytes)
}

pub fn save_netpbm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_netpbm(image)?).map_err(|e| DataError::io(path, e))
}
