//! Binary netpbm codecs: P6 for RGB frames, P5 for label masks.
//!
//! Encoders always write `maxval = 255` and a single newline between header
//! fields. Decoders accept any whitespace and `#` comments in the header.

use crate::error::{Error, Result};

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape(
                "rgb image",
                format!(
                    "{width}x{height} needs {} bytes, got {}",
                    width * height * 3,
                    data.len()
                ),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn encode(magic: &str, width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    encode("P6", img.width, img.height, &img.data)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    encode("P5", img.width, img.height, &img.data)
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "netpbm",
        offset,
        detail: detail.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err(pos, "header ends early")),
            }
        }
        if pos == 2 && i == 0 {
            return Err(format_err(pos, "missing whitespace after magic"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| format_err(start, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format_err(pos, format!("zero image dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(format_err(pos, format!("maxval must be 255, got {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(pos, "expected a single whitespace byte before the payload")),
    }
    Ok(Header {
        width,
        height,
        payload_start: pos,
    })
}

fn payload(bytes: &[u8], h: &Header, channels: usize) -> Result<Vec<u8>> {
    let expected = h.width * h.height * channels;
    let actual = bytes.len() - h.payload_start;
    if actual < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, got {actual}"),
        ));
    }
    if actual > expected {
        return Err(format_err(
            h.payload_start + expected,
            format!("{} trailing bytes after a {expected}-byte payload", actual - expected),
        ));
    }
    Ok(bytes[h.payload_start..].to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &h, 3)?;
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &h, 1)?;
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        data,
    })
}
