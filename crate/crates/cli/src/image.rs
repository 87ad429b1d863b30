//! Netpbm reading and writing: binary PPM (P6) in, PGM (P5) or PPM out.

use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn malformed(msg: impl Into<String>) -> ImageError {
    ImageError::Malformed(msg.into())
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(malformed("header ended early"));
    }
    std::str::from_utf8(&buf[start..*pos]).map_err(|_| malformed("header is not ASCII"))
}

fn number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(buf, pos)?;
    t.parse().map_err(|_| malformed(format!("{what} {t:?} is not a number")))
}

pub fn decode_ppm(buf: &[u8]) -> Result<Rgb> {
    let mut pos = 0;
    let magic = token(buf, &mut pos)?;
    if magic != "P6" {
        return Err(malformed(format!("expected binary PPM (P6), found {magic:?}")));
    }
    let width = number(buf, &mut pos, "width")?;
    let height = number(buf, &mut pos, "height")?;
    let maxval = number(buf, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed("empty image"));
    }
    if maxval != 255 {
        return Err(malformed(format!("only 8-bit images are supported, maxval is {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width.checked_mul(height).and_then(|p| p.checked_mul(3)).ok_or_else(|| malformed("dimensions overflow"))?;
    let data = buf.get(pos..).filter(|r| r.len() >= len).ok_or_else(|| malformed(format!("raster needs {len} bytes")))?[..len].to_vec();
    Ok(Rgb { width, height, data })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Rgb> {
    decode_ppm(&fs::read(path)?)
}

pub fn encode_ppm(img: &Rgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn decode_pgm(buf: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let magic = token(buf, &mut pos)?;
    if magic != "P5" {
        return Err(malformed(format!("expected binary PGM (P5), found {magic:?}")));
    }
    let w = number(buf, &mut pos, "width")?;
    let h = number(buf, &mut pos, "height")?;
    let maxval = number(buf, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(malformed(format!("maxval {maxval} is not 255")));
    }
    pos += 1;
    let data = buf.get(pos..pos + w * h).ok_or_else(|| malformed("raster too short"))?.to_vec();
    Ok((w, h, data))
}

/// Fixed, well-separated colors for class indices; cycles after 20.
pub fn palette(class: u8) -> [u8; 3] {
    const COLORS: [[u8; 3]; 20] = [
        [0, 0, 0],
        [220, 20, 60],
        [0, 160, 70],
        [30, 60, 230],
        [250, 170, 30],
        [128, 64, 128],
        [70, 200, 220],
        [255, 255, 255],
        [150, 100, 40],
        [107, 142, 35],
        [190, 153, 153],
        [70, 70, 70],
        [255, 0, 255],
        [0, 80, 100],
        [250, 250, 0],
        [119, 11, 32],
        [152, 251, 152],
        [0, 0, 142],
        [102, 102, 156],
        [180, 180, 180],
    ];
    COLORS[class as usize % COLORS.len()]
}

pub fn colorize(width: usize, height: usize, labels: &[u8]) -> Rgb {
    Rgb { width, height, data: labels.iter().flat_map(|&l| palette(l)).collect() }
}
