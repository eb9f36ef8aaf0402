//! Raster types, 8-bit image I/O and bilinear resampling.
//!
//! Values are stored as `f64`, row-major, interleaved by channel. Files are
//! read and written as 8-bit PNG or binary PPM (P6) / PGM (P5); a byte `p`
//! loads as `p / 255` and a value `v` saves as `round(clamp(v) * 255)`.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};

/// An `height x width x channels` raster with nominal range `[0, 1]`.
///
/// `signed` marks intermediate arithmetic results (HF-maps) whose values may
/// leave the unit interval; they are only clamped when written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    signed: bool,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param("shape", format!("{height}x{width} has a zero side")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::param("channels", format!("expected 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param("data", format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            signed: false,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a grid by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        signed: bool,
    ) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
            signed,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn with_signed(mut self, signed: bool) -> Self {
        self.signed = signed;
        self
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.shape() == other.shape()
    }

    /// Returns a copy with every value clamped to `[0, 1]` and the signed
    /// marker cleared.
    pub fn clamped(&self) -> ImageGrid {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::from_parts_unchecked(self.height, self.width, self.channels, data, false)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_parts_unchecked(self.height, self.width, self.channels, data, self.signed)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Per-pixel channel average as a single-channel grid.
    pub fn to_luma(&self) -> ImageGrid {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Self::from_parts_unchecked(self.height, self.width, 1, data, self.signed)
    }
}

/// Root-mean-square difference of two equally shaped grids.
pub fn rms_diff(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::dims(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let ss: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / a.data.len() as f64).sqrt())
}

/// Spatial weights in `[0, 1]`, broadcast across channels of the grid they gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param("mask", "zero-sized mask"));
        }
        if data.len() != height * width {
            return Err(Error::dims(format!(
                "mask data length {} != {height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("mask", format!("weight at index {i} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    /// Converts the first channel of a single-channel grid, clamping to `[0, 1]`.
    pub fn from_image(img: &ImageGrid) -> Result<Self> {
        let luma = img.to_luma();
        let data = luma.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(img.height, img.width, data)
    }

    pub fn to_image(&self) -> ImageGrid {
        ImageGrid::from_parts_unchecked(self.height, self.width, 1, self.data.clone(), false)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn matches(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    Mask::from_image(&load_image(path)?)
}

enum Format {
    Png,
    Pnm,
}

fn detect_format(path: &Path, bytes: &[u8]) -> Result<Format> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Ok(Format::Png)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        Ok(Format::Pnm)
    } else {
        Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "expected PNG, binary PGM (P5) or binary PPM (P6)".into(),
        })
    }
}

pub fn load_image(path: &Path) -> Result<ImageGrid> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(source) => {
            return Err(Error::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    match detect_format(path, &bytes)? {
        Format::Png => decode_png(path, &bytes),
        Format::Pnm => decode_pnm(path, &bytes),
    }
}

fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<ImageGrid> {
    let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageGrid::new(height, width, channels, data)
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<ImageGrid> {
    let malformed = |e: png::DecodingError| match e {
        png::DecodingError::IoError(ref io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::TruncatedPayload {
                path: path.to_path_buf(),
                expected: 0,
                found: bytes.len(),
            }
        }
        other => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(malformed)?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            depth: format!("{:?}", info.bit_depth),
        });
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("color type {other:?}"),
            })
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(malformed)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(frame.line_size).take(h) {
        data.extend_from_slice(&row[..w * channels]);
    }
    from_bytes(h, w, channels, &data)
}

fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<ImageGrid> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let bad = |reason: &str| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    // Header: magic, width, height, maxval, separated by whitespace and
    // optional `#` comments, followed by exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing whitespace after header")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            depth: format!("maxval {maxval}"),
        });
    }
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    from_bytes(height, width, channels, &payload[..expected])
}

/// Quantizes a value to a byte: clamp to `[0, 1]`, then round half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_bytes(img: &ImageGrid) -> Vec<u8> {
    img.data.iter().map(|&v| quantize(v)).collect()
}

/// Writes `img` as 8-bit PNG, or as PGM/PPM when the extension is `.pgm`,
/// `.ppm` or `.pnm`.
pub fn save_image(img: &ImageGrid, path: &Path) -> Result<()> {
    let bytes = encode_image(img, path)?;
    fs::write(path, bytes).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Encodes `img` into the on-disk byte layout that [`save_image`] would write.
pub fn encode_image(img: &ImageGrid, path: &Path) -> Result<Vec<u8>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let pixels = to_bytes(img);
    match ext.as_deref() {
        Some("pgm") | Some("ppm") | Some("pnm") => {
            let magic = if img.channels == 1 { "P5" } else { "P6" };
            let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&pixels);
            Ok(out)
        }
        _ => {
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(BufWriter::new(&mut out), img.width as u32, img.height as u32);
                enc.set_color(if img.channels == 1 {
                    png::ColorType::Grayscale
                } else {
                    png::ColorType::Rgb
                });
                enc.set_depth(png::BitDepth::Eight);
                let encode_err = |e: png::EncodingError| Error::Write {
                    path: path.to_path_buf(),
                    source: std::io::Error::other(e.to_string()),
                };
                let mut writer = enc.write_header().map_err(encode_err)?;
                writer.write_image_data(&pixels).map_err(encode_err)?;
                writer.finish().map_err(encode_err)?;
            }
            Ok(out)
        }
    }
}

/// Bilinear resampling with half-pixel-centred coordinates and edge clamping.
pub fn resize_bilinear(img: &ImageGrid, new_h: usize, new_w: usize) -> Result<ImageGrid> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::param("size", format!("{new_h}x{new_w} has a zero side")));
    }
    if (new_h, new_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let ys = axis_taps(img.height, new_h);
    let xs = axis_taps(img.width, new_w);
    let c = img.channels;
    let mut data = Vec::with_capacity(new_h * new_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = lerp(img.get(y0, x0, ch), img.get(y0, x1, ch), fx);
                let bottom = lerp(img.get(y1, x0, ch), img.get(y1, x1, ch), fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    Ok(ImageGrid::from_parts_unchecked(new_h, new_w, c, data, img.signed))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}
