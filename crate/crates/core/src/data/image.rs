use std::path::Path;

use crate::error::{Error, Result};

/// An RGB image stored as `height × width × 3` floats in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

const GRID_MAGIC: &[u8; 4] = b"OWLG";

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("image must be non-empty, got {height}×{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "image {height}×{width}×3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { height, width, data })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Nearest-neighbour resize to `size × size`.
    pub fn resize(&self, size: usize) -> Image {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let mut out = Image::blank(size, size);
        for y in 0..size {
            let sy = ((y as f64 + 0.5) * self.height as f64 / size as f64) as usize;
            for x in 0..size {
                let sx = ((x as f64 + 0.5) * self.width as f64 / size as f64) as usize;
                out.set_pixel(y, x, self.pixel(sy.min(self.height - 1), sx.min(self.width - 1)));
            }
        }
        out
    }

    /// Decodes PPM (`P3`/`P6`) or the raw float grid format, chosen by
    /// content.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
            decode_ppm(bytes)
        } else if bytes.starts_with(GRID_MAGIC) {
            decode_grid(bytes)
        } else {
            Err(Error::Data("unrecognized image format (expected PPM or float grid)".into()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v * 255.0).round() as u8));
        out
    }

    /// Raw float grid: `OWLG`, height and width as little-endian u32, then
    /// `height·width·3` little-endian f32 values.
    pub fn to_grid(&self) -> Vec<u8> {
        let mut out = GRID_MAGIC.to_vec();
        out.extend((self.height as u32).to_le_bytes());
        out.extend((self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

fn decode_grid(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 12 {
        return Err(Error::Data("truncated float grid header".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != h * w * 3 * 4 {
        return Err(Error::Data(format!("float grid {h}×{w} has {} payload bytes", body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Image::new(h, w, data)
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let binary = bytes.starts_with(b"P6");
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("malformed PPM header".into()))?;
    }
    let [w, h, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
    }
    let n = w * h * 3;
    let values: Vec<usize> = if binary {
        let body = bytes.get(pos + 1..).unwrap_or_default();
        if body.len() < n {
            return Err(Error::Data("truncated PPM payload".into()));
        }
        body[..n].iter().map(|&b| b as usize).collect()
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| Error::Data("PPM P3 body is not text".into()))?;
        let vals: std::result::Result<Vec<usize>, _> = text.split_ascii_whitespace().take(n).map(str::parse).collect();
        let vals = vals.map_err(|_| Error::Data("malformed PPM P3 value".into()))?;
        if vals.len() < n {
            return Err(Error::Data("truncated PPM payload".into()));
        }
        vals
    };
    if values.iter().any(|&v| v > maxval) {
        return Err(Error::Data("PPM sample exceeds maxval".into()));
    }
    let data = values.iter().map(|&v| v as f32 / maxval as f32).collect();
    Image::new(h, w, data)
}
