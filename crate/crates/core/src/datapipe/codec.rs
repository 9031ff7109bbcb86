//! Frame files: binary NetPBM (P6, maxval 255) and 8-bit RGB PNG.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::augment::RgbImage;
use crate::error::{Error, Result};

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads a P6 or PNG frame, chosen by the file's magic bytes.
pub fn decode_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading frame {}", path.display()), e))?;
    decode_bytes(&bytes).map_err(|reason| decode_err(path, reason))
}

pub fn decode_bytes(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    if bytes.starts_with(b"P6") {
        decode_p6(bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err("unsupported format (expected binary PPM 'P6' or PNG)".into())
    }
}

/// Header tokenizer: whitespace separated, `#` starts a comment to end of line.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("malformed P6 header: bad {what}"))
    }
}

fn decode_p6(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(format!("P6 maxval must be 255, got {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("malformed P6 header: missing separator before raster".into()),
    }
    if width == 0 || height == 0 {
        return Err(format!("P6 extents must be positive, got {width}x{height}"));
    }
    let need = 3 * width * height;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        return Err(format!("truncated P6 raster: {} of {need} bytes", raster.len()));
    }
    RgbImage::from_interleaved(width, height, &raster[..need]).map_err(|e| e.to_string())
}

fn decode_png(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| format!("png: {e}"))?;
    let size = reader.output_buffer_size().ok_or("png: image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format!("png: {e}"))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(format!("png must be 8-bit RGB, got {:?} at {:?}", info.color_type, info.bit_depth));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let row = info.line_size;
    let mut packed = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        packed.extend_from_slice(&buf[y * row..y * row + 3 * w]);
    }
    RgbImage::from_interleaved(w, h, &packed).map_err(|e| e.to_string())
}

pub fn encode_p6(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.to_interleaved());
    out
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Data(format!("png encode: {e}")))?;
        writer.write_image_data(&img.to_interleaved()).map_err(|e| Error::Data(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Writes PNG when the extension is `.png`, P6 otherwise.
pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => encode_png(img)?,
        _ => encode_p6(img),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    std::io::Write::write_all(&mut w, &bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
