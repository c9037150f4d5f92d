//! Binary PPM (P6, 8-bit) I/O and the seeded synthetic image corpus.
//!
//! Images are `3×H×W` tensors with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// A decoded P6 file. `bytes` holds interleaved RGB samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub bytes: Vec<u8>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Image {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments between header tokens.
    fn skip_space(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

impl Ppm {
    pub fn parse(data: &[u8]) -> Result<Self> {
        let mut c = Cursor { data, pos: 0 };
        if !data.starts_with(b"P6") {
            return Err(c.err("missing P6 magic"));
        }
        c.pos = 2;
        let width = c.number("width")?;
        let height = c.number("height")?;
        let maxval = c.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(c.err("zero image dimension"));
        }
        if maxval != 255 {
            return Err(c.err(format!("maxval {maxval} unsupported, only 8-bit (255)")));
        }
        match data.get(c.pos) {
            Some(b) if b.is_ascii_whitespace() => c.pos += 1,
            _ => return Err(c.err("expected a single whitespace byte before the raster")),
        }
        let need = width * height * 3;
        let have = data.len() - c.pos;
        if have < need {
            return Err(Error::Image {
                offset: data.len(),
                msg: format!("raster truncated: {have} of {need} bytes"),
            });
        }
        if have > need {
            return Err(Error::Image {
                offset: c.pos + need,
                msg: format!("{} trailing bytes after the raster", have - need),
            });
        }
        Ok(Self {
            width,
            height,
            bytes: data[c.pos..].to_vec(),
        })
    }

    /// Canonical encoding: `P6\n<w> <h>\n255\n` then the raster.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.bytes);
        out
    }

    /// Parse errors keep their byte offset and gain the file name.
    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path)?).map_err(|e| match e {
            Error::Image { offset, msg } => Error::Image {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for (p, px) in self.bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + p] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::new(&[3, h, w], data).expect("shape matches raster")
    }

    /// Quantizes a `3×H×W` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(img: &Tensor) -> Result<Self> {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dimension(format!("expected a 3×H×W image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let d = img.data();
        let mut bytes = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for c in 0..3 {
                let v = d[c * h * w + p];
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                bytes.push((v * 255.0).round() as u8);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            bytes,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    Blobs,
}

/// Deterministic synthetic image: a smooth colour gradient, a tinted
/// checkerboard, or a sum of Gaussian blobs, chosen by `index % 3`.
pub fn synthetic_image(height: usize, width: usize, index: usize, rng: &mut Rng) -> Tensor {
    let pattern = [Pattern::Gradient, Pattern::Checkerboard, Pattern::Blobs][index % 3];
    synthetic_pattern(height, width, pattern, rng)
}

pub fn synthetic_pattern(height: usize, width: usize, pattern: Pattern, rng: &mut Rng) -> Tensor {
    let (hf, wf) = (height as f64, width as f64);
    let mut data = vec![0.0; 3 * height * width];
    match pattern {
        Pattern::Gradient => {
            let coef: Vec<[f64; 3]> = (0..3)
                .map(|_| [rng.uniform(0.1, 0.5), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)])
                .collect();
            for (c, k) in coef.iter().enumerate() {
                for i in 0..height {
                    for j in 0..width {
                        let v = k[0] + 0.3 + k[1] * i as f64 / hf + k[2] * j as f64 / wf;
                        data[c * height * width + i * width + j] = v;
                    }
                }
            }
        }
        Pattern::Checkerboard => {
            let cell = [2, 4, 8][rng.below(3)];
            let a: Vec<f64> = (0..3).map(|_| rng.uniform(0.0, 0.5)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.uniform(0.5, 1.0)).collect();
            for c in 0..3 {
                for i in 0..height {
                    for j in 0..width {
                        let on = (i / cell + j / cell) % 2 == 0;
                        data[c * height * width + i * width + j] = if on { a[c] } else { b[c] };
                    }
                }
            }
        }
        Pattern::Blobs => {
            let base: Vec<f64> = (0..3).map(|_| rng.uniform(0.0, 0.3)).collect();
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
                .map(|_| {
                    (
                        rng.uniform(0.0, hf),
                        rng.uniform(0.0, wf),
                        rng.uniform(0.1, 0.3) * hf.min(wf),
                        [rng.uniform(0.0, 0.7), rng.uniform(0.0, 0.7), rng.uniform(0.0, 0.7)],
                    )
                })
                .collect();
            for c in 0..3 {
                for i in 0..height {
                    for j in 0..width {
                        let mut v = base[c];
                        for &(ci, cj, s, col) in &blobs {
                            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                            v += col[c] * (-d2 / (2.0 * s * s)).exp();
                        }
                        data[c * height * width + i * width + j] = v;
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&[3, height, width], data).expect("shape matches data")
}

/// `count` synthetic images, each from its own stream of `seed`.
pub fn synthetic_dataset(height: usize, width: usize, count: usize, seed: u64) -> Vec<Tensor> {
    let root = Rng::new(seed);
    (0..count)
        .map(|i| synthetic_image(height, width, i, &mut root.fork(i as u64)))
        .collect()
}

/// Loads every `*.ppm` in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Tensor>> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset directory {} does not exist", dir.display()),
        )));
    }
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ppm::read(p).map(|m| m.to_tensor())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut v = b"P6\n2 1\n255\n".to_vec();
        v.extend_from_slice(&[0, 128, 255, 10, 20, 30]);
        v
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let raw = sample();
        let p = Ppm::parse(&raw).unwrap();
        assert_eq!(p.encode(), raw);
        let back = Ppm::from_tensor(&p.to_tensor()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut raw = b"P6 # made by hand\n2 1\n# max\n255\n".to_vec();
        raw.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        assert_eq!(Ppm::parse(&raw).unwrap().bytes, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn errors_carry_offsets() {
        let e = Ppm::parse(b"P3\n1 1\n255\n").unwrap_err();
        assert!(matches!(e, Error::Image { offset: 0, .. }));
        let e = Ppm::parse(b"P6\n1 x\n255\n").unwrap_err();
        assert!(matches!(e, Error::Image { offset: 5, .. }), "{e}");
        let e = Ppm::parse(b"P6\n1 1\n255\n\x01").unwrap_err();
        assert!(matches!(e, Error::Image { offset: 12, .. }), "{e}");
        let e = Ppm::parse(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(matches!(e, Error::Image { .. }));
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_dataset(32, 32, 6, 3);
        let b = synthetic_dataset(32, 32, 6, 3);
        assert_eq!(a, b);
        for img in &a {
            assert_eq!(img.shape(), &[3, 32, 32]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(a[0], a[3]);
    }
}
