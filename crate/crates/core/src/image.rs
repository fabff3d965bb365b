//! Raster types and binary PGM/PPM (`P5`/`P6`) reading and writing.
//!
//! Samples are stored as `f64` in `[0, 1]`. 8-bit files use `maxval <= 255`,
//! 16-bit files (`maxval > 255`) are big-endian, as the format prescribes.
//! Label masks travel as 16-bit PGM with the raw label as the sample value.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "GrayImage",
                format!("{width}x{height} needs {} samples, got {}", width * height, data.len()),
            ));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(
                "RgbImage",
                format!("{width}x{height} needs {} samples, got {}", 3 * width * height, data.len()),
            ));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_luma(&self) -> GrayImage {
        let data = self
            .data
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Either raster kind, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Image {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl Image {
    pub fn width(&self) -> usize {
        match self {
            Image::Gray(g) => g.width,
            Image::Rgb(c) => c.width,
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Image::Gray(g) => g.height,
            Image::Rgb(c) => c.height,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Image::Gray(_) => 1,
            Image::Rgb(_) => 3,
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        match self {
            Image::Gray(g) => g.clone(),
            Image::Rgb(c) => c.to_luma(),
        }
    }

    /// Planar `[C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width(), self.height());
        match self {
            Image::Gray(g) => Tensor::new(vec![1, h, w], g.data.clone()).expect("sizes match"),
            Image::Rgb(c) => {
                let mut planar = vec![0.0; 3 * w * h];
                for (i, px) in c.data.chunks(3).enumerate() {
                    for ch in 0..3 {
                        planar[ch * w * h + i] = px[ch];
                    }
                }
                Tensor::new(vec![3, h, w], planar).expect("sizes match")
            }
        }
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8], name: &str) -> Result<Header> {
    let err = |pos: usize, msg: &str| Error::parse(name, format!("byte {pos}"), msg);
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(err(0, "expected binary PGM (P5) or PPM (P6) magic"));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| err(start, &format!("header field {k} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err(pos, "expected single whitespace before raster"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(err(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err(2, "maxval must be in 1..=65535"));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width: w as usize,
        height: h as usize,
        maxval: maxval as u32,
        data_start: pos,
    })
}

fn read_samples(bytes: &[u8], hdr: &Header, channels: usize, name: &str) -> Result<Vec<u32>> {
    let bps = if hdr.maxval > 255 { 2 } else { 1 };
    let n = hdr.width * hdr.height * channels;
    let raster = &bytes[hdr.data_start..];
    if raster.len() < n * bps {
        return Err(Error::parse(
            name,
            format!("byte {}", bytes.len()),
            format!("truncated raster: need {} bytes, have {}", n * bps, raster.len()),
        ));
    }
    let samples: Vec<u32> = if bps == 1 {
        raster[..n].iter().map(|&b| b as u32).collect()
    } else {
        raster[..2 * n]
            .chunks(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as u32)
            .collect()
    };
    if let Some(i) = samples.iter().position(|&s| s > hdr.maxval) {
        return Err(Error::parse(
            name,
            format!("sample {i}"),
            format!("value exceeds maxval {}", hdr.maxval),
        ));
    }
    Ok(samples)
}

pub fn decode_image(bytes: &[u8], name: &str) -> Result<Image> {
    let hdr = parse_header(bytes, name)?;
    let channels = if hdr.magic[1] == b'5' { 1 } else { 3 };
    let samples = read_samples(bytes, &hdr, channels, name)?;
    let scale = hdr.maxval as f64;
    let data: Vec<f64> = samples.iter().map(|&s| s as f64 / scale).collect();
    Ok(if channels == 1 {
        Image::Gray(GrayImage::new(hdr.width, hdr.height, data)?)
    } else {
        Image::Rgb(RgbImage::new(hdr.width, hdr.height, data)?)
    })
}

/// Raw integer samples of a PGM, used for label masks.
pub fn decode_label_pgm(bytes: &[u8], name: &str) -> Result<(usize, usize, Vec<u32>)> {
    let hdr = parse_header(bytes, name)?;
    if hdr.magic[1] != b'5' {
        return Err(Error::parse(name, "byte 0", "label masks must be PGM (P5)"));
    }
    let samples = read_samples(bytes, &hdr, 1, name)?;
    Ok((hdr.width, hdr.height, samples))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_gray8(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_u8(v)));
    out
}

pub fn encode_rgb8(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_u8(v)));
    out
}

pub fn encode_label16(width: usize, height: usize, labels: &[u32]) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::shape("encode_label16", "label count does not match size"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 65535) {
        return Err(Error::invalid(format!("label {l} does not fit 16 bits")));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &l in labels {
        out.extend_from_slice(&(l as u16).to_be_bytes());
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = read_file(path)?;
    decode_image(&bytes, &path.display().to_string())
}

pub fn read_label_mask(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let bytes = read_file(path)?;
    decode_label_pgm(&bytes, &path.display().to_string())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray8_round_trip() {
        let img = GrayImage::new(3, 2, vec![0.0, 1.0, 128.0 / 255.0, 3.0 / 255.0, 0.5 + 0.5 / 255.0, 1.0]).unwrap();
        let back = decode_image(&encode_gray8(&img), "t").unwrap();
        assert_eq!(back, Image::Gray(img));
    }

    #[test]
    fn label16_round_trip_and_header_comments() {
        let labels = vec![0, 1, 300, 65535];
        let bytes = encode_label16(2, 2, &labels).unwrap();
        assert_eq!(decode_label_pgm(&bytes, "m").unwrap(), (2, 2, labels));
        let mut commented = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        commented.extend([7, 9]);
        assert_eq!(decode_label_pgm(&commented, "c").unwrap(), (2, 1, vec![7, 9]));
    }

    #[test]
    fn rgb_luma() {
        let img = RgbImage::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((img.to_luma().at(0, 0) - 0.299).abs() < 1e-15);
        let t = Image::Rgb(RgbImage::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).to_tensor();
        assert_eq!(t.data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode_image(b"P3\n1 1\n255\n0", "x"), Err(Error::Parse { .. })));
        assert!(matches!(decode_image(b"P5\n2 2\n255\n\x01", "x"), Err(Error::Parse { .. })));
        assert!(matches!(decode_image(b"P5\n2", "x"), Err(Error::Parse { .. })));
        assert!(matches!(decode_image(b"P5\n1 1\n10\n\x0b", "x"), Err(Error::Parse { .. })));
    }
}
