//! 8-bit RGB image files. Binary PPM (P6) always; PNG with the `png` feature.

use std::path::Path;

use echoir_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed PPM at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("unsupported maximum value {0} (only 8-bit images are supported)")]
    BitDepth(u32),
    #[error("unsupported image format for {0}")]
    Format(String),
    #[error("image tensor must be [3, H, W], got {0:?}")]
    Shape(Vec<usize>),
    #[cfg(feature = "png")]
    #[error(transparent)]
    Png(#[from] image::ImageError),
}

type Result<T> = std::result::Result<T, ImageError>;

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Loads an image as `[3, H, W]` with values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if is_png(path) {
        return decode_png(&bytes, path);
    }
    decode_ppm(&bytes)
}

/// Writes `[3, H, W]` values, clamped to `[0, 1]` and rounded half up.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_png(path) {
        encode_png(image, path)?
    } else {
        encode_ppm(image)?
    };
    std::fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn planar_to_interleaved(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        _ => return Err(ImageError::Shape(image.shape().to_vec())),
    };
    let d = image.data();
    let n = h * w;
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(d[c * n + i]));
        }
    }
    Ok((h, w, out))
}

fn interleaved_to_planar(h: usize, w: usize, pixels: &[u8]) -> Tensor {
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = pixels[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data, false).expect("consistent extents")
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, pixels) = planar_to_interleaved(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> ImageError {
        ImageError::Parse {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| ImageError::Parse {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(cur.err("missing P6 magic"));
    }
    cur.pos = 2;
    let w = cur.number("width")? as usize;
    let h = cur.number("height")? as usize;
    let maxval = cur.number("maximum value")?;
    if maxval != 255 {
        return Err(ImageError::BitDepth(maxval));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected a single whitespace before pixel data"));
    }
    cur.pos += 1;
    if w == 0 || h == 0 {
        return Err(cur.err("zero image extent"));
    }
    let need = 3 * w * h;
    let have = bytes.len() - cur.pos;
    if have < need {
        return Err(ImageError::Parse {
            offset: bytes.len(),
            reason: format!("truncated pixel data: {have} of {need} bytes"),
        });
    }
    Ok(interleaved_to_planar(h, w, &bytes[cur.pos..cur.pos + need]))
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8], _path: &Path) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    if !matches!(img.color(), image::ColorType::Rgb8 | image::ColorType::Rgba8 | image::ColorType::L8) {
        return Err(ImageError::BitDepth(u16::MAX as u32));
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(interleaved_to_planar(h as usize, w as usize, rgb.as_raw()))
}

#[cfg(not(feature = "png"))]
fn decode_png(_bytes: &[u8], path: &Path) -> Result<Tensor> {
    Err(ImageError::Format(format!("{} (rebuild with the png feature)", path.display())))
}

#[cfg(feature = "png")]
fn encode_png(image: &Tensor, _path: &Path) -> Result<Vec<u8>> {
    let (h, w, pixels) = planar_to_interleaved(image)?;
    let buf = image::RgbImage::from_raw(w as u32, h as u32, pixels).expect("consistent extents");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

#[cfg(not(feature = "png"))]
fn encode_png(_image: &Tensor, path: &Path) -> Result<Vec<u8>> {
    Err(ImageError::Format(format!("{} (rebuild with the png feature)", path.display())))
}
