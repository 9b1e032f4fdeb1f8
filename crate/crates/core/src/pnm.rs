//! Binary PPM (P6) and PGM (P5) encoding, 8 and 16 bit. Sixteen-bit samples
//! are big-endian as the format requires.

use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("not a binary PNM file (magic {0:?})")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum PnmImage {
    Gray8(Image<u8>),
    Gray16(Image<u16>),
    Rgb8(Image<[u8; 3]>),
    Rgb16(Image<[u16; 3]>),
}

fn header(magic: &str, w: u32, h: u32, maxval: u32) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes()
}

pub fn encode_pgm8(img: &Image<u8>) -> Vec<u8> {
    let mut out = header("P5", img.width(), img.height(), 255);
    out.extend_from_slice(img.pixels());
    out
}

pub fn encode_pgm16(img: &Image<u16>) -> Vec<u8> {
    let mut out = header("P5", img.width(), img.height(), 65535);
    out.extend(img.pixels().iter().flat_map(|v| v.to_be_bytes()));
    out
}

pub fn encode_ppm8(img: &Image<[u8; 3]>) -> Vec<u8> {
    let mut out = header("P6", img.width(), img.height(), 255);
    out.extend(img.pixels().iter().flatten());
    out
}

pub fn encode_ppm16(img: &Image<[u16; 3]>) -> Vec<u8> {
    let mut out = header("P6", img.width(), img.height(), 65535);
    out.extend(img.pixels().iter().flatten().flat_map(|v| v.to_be_bytes()));
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::Header(format!("missing {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PnmImage, PnmError> {
    let magic = bytes.get(..2).unwrap_or(bytes);
    let rgb = match magic {
        b"P5" => false,
        b"P6" => true,
        _ => return Err(PnmError::BadMagic(String::from_utf8_lossy(magic).into_owned())),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(PnmError::Header(format!("{width}x{height} maxval {maxval}")));
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PnmError::Header("missing separator before pixel data".into()));
    }
    let data = &bytes[r.pos + 1..];
    let wide = maxval > 255;
    let channels = if rgb { 3 } else { 1 };
    let count = width as usize * height as usize * channels;
    let expected = count * if wide { 2 } else { 1 };
    if data.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            found: data.len(),
        });
    }
    let data = &data[..expected];
    let img = match (rgb, wide) {
        (false, false) => PnmImage::Gray8(Image::from_vec(width, height, data.to_vec()).unwrap()),
        (false, true) => PnmImage::Gray16(
            Image::from_vec(
                width,
                height,
                data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
            )
            .unwrap(),
        ),
        (true, false) => PnmImage::Rgb8(
            Image::from_vec(width, height, data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap(),
        ),
        (true, true) => PnmImage::Rgb16(
            Image::from_vec(
                width,
                height,
                data.chunks_exact(6)
                    .map(|c| {
                        [
                            u16::from_be_bytes([c[0], c[1]]),
                            u16::from_be_bytes([c[2], c[3]]),
                            u16::from_be_bytes([c[4], c[5]]),
                        ]
                    })
                    .collect(),
            )
            .unwrap(),
        ),
    };
    Ok(img)
}
