use std::io::{Read, Write};

use crate::error::{Error, Result};

/// `C x H x W` pixel tensor, channel-major. Data values are nominally in
/// `[-1, 1]`; noised images are not clipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![channels, height, width],
                actual: vec![data.len()],
            });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch { expected: self.shape().to_vec(), actual: other.shape().to_vec() });
        }
        Ok(())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    pub fn clipped(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.clamp(-1.0, 1.0);
        }
        out
    }

    /// Binary PPM (P6); values map from `[-1,1]` to `round((v+1)*127.5)`.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::ShapeMismatch { expected: vec![3], actual: vec![self.channels] });
        }
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.numel());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    bytes.push(to_byte(self.get(c, y, x)));
                }
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_ppm_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_ppm(&mut buf)?;
        Ok(buf)
    }

    pub fn read_ppm<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::MalformedSequence(format!("ppm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let body = buf.get(pos..pos + width * height * 3).ok_or_else(|| bad("truncated body"))?;
        let mut img = Image::zeros(3, height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    img.set(c, y, x, body[(y * width + x) * 3 + c] as f32 / 127.5 - 1.0);
                }
            }
        }
        Ok(img)
    }
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
}
