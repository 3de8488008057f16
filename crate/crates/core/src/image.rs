//! RGB images with channel values in [0, 1] and binary PPM/PGM export.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H×W×3` image stored pixel-interleaved (RGB RGB ...), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::InvalidShape(vec![height, width, 3]));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        assert!(height > 0 && width > 0);
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(height > 0 && width > 0);
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Applies `f` to every pixel, keeping the geometry.
    pub fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.pixels() {
            data.extend_from_slice(&f(p));
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Channel-first `[3, H, W]` tensor, the layout the classifiers consume.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.pixel_count();
        let mut out = vec![0.0; 3 * hw];
        for (i, p) in self.pixels().enumerate() {
            out[i] = p[0];
            out[hw + i] = p[1];
            out[2 * hw + i] = p[2];
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("consistent image shape")
    }

    /// Inverse of [`Image::to_chw`].
    pub fn from_chw(t: &Tensor) -> Result<Image> {
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::ShapeMismatch {
                context: "channel-first image",
                expected: vec![3, 0, 0],
                actual: t.shape().to_vec(),
            });
        }
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let hw = h * w;
        let d = t.data();
        Ok(Image::from_fn(h, w, |y, x| {
            let i = y * w + x;
            [d[i], d[hw + i], d[2 * hw + i]]
        }))
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Image> {
        let (header, body) = parse_netpbm_header(bytes, b"P6")?;
        let (w, h) = header;
        if body.len() != w * h * 3 {
            return Err(Error::Format(format!(
                "PPM payload has {} bytes, expected {}",
                body.len(),
                w * h * 3
            )));
        }
        let data = body.iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(h, w, data)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_ppm())
    }
}

/// Round-half-up quantization of a [0, 1] value to a byte.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Binary PGM (P5, maxval 255) of a single-channel map in [0, 1].
pub fn gray_to_pgm(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

pub(crate) fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let ((w, h), body) = parse_netpbm_header(bytes, b"P5")?;
    if body.len() != w * h {
        return Err(Error::Format("PGM payload size mismatch".into()));
    }
    Ok((h, w, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

fn parse_netpbm_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<((usize, usize), &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(Error::Format("unexpected netpbm magic".into()));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad netpbm header".into()))?;
    }
    if fields[2] != 255 || pos >= bytes.len() {
        return Err(Error::Format("only maxval 255 is supported".into()));
    }
    // exactly one whitespace byte separates header and payload
    Ok(((fields[0], fields[1]), &bytes[pos + 1..]))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128); // 127.5 rounds up
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn ppm_round_trip_on_byte_grid() {
        let img = Image::from_fn(3, 5, |y, x| {
            [(y * 40) as f64 / 255.0, (x * 50) as f64 / 255.0, 17.0 / 255.0]
        });
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        let back = Image::from_ppm(&bytes).unwrap();
        assert_eq!(back.to_ppm(), bytes);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chw_layout_round_trip() {
        let img = Image::from_fn(2, 3, |y, x| [y as f64, x as f64, 0.5]);
        let t = img.to_chw();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(&t.data()[0..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(Image::from_chw(&t).unwrap(), img);
    }

    #[test]
    fn pgm_header_and_payload() {
        let bytes = gray_to_pgm(2, 2, &[0.0, 0.25, 0.5, 1.0]);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        let (h, w, vals) = parse_pgm(&bytes).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 64, 128, 255]);
        assert_eq!(vals[3], 1.0);
    }
}
