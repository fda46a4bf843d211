//! 8-bit PNG and binary PPM/PGM reading and writing, plus label palettes.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Interleaved 8-bit pixels, one (gray) or three (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ImageFormat(format!("{channels} channels; only gray or RGB images are supported")));
        }
        if data.len() != width * height * channels {
            return Err(Error::ImageFormat(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    /// `[3,H,W]` tensor with intensities scaled to `[0, 1]`; gray images are
    /// replicated across the three channels.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        let scale = 1.0 / 255.0;
        let data = (0..3 * hw)
            .map(|i| {
                let (c, p) = (i / hw, i % hw);
                let v = if self.channels == 1 { self.data[p] } else { self.data[p * 3 + c] };
                T::from_f64_lossy(v as f64 * scale)
            })
            .collect();
        Tensor::from_parts(vec![3, self.height, self.width], data)
    }

    pub fn from_label(label: &LabelMap) -> Self {
        Image { width: label.width, height: label.height, channels: 1, data: label.data.clone() }
    }

    pub fn to_label(&self) -> Result<LabelMap> {
        if self.channels != 1 {
            return Err(Error::ImageFormat("label maps must be single-channel images".into()));
        }
        LabelMap::new(self.height, self.width, self.data.clone())
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let (color, depth) = {
        let header = decoder.read_header_info().map_err(|e| Error::ImageFormat(e.to_string()))?;
        (header.color_type, header.bit_depth)
    };
    if color != png::ColorType::Indexed && depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth(depth as u32));
    }
    let mut reader = decoder.read_info().map_err(|e| Error::ImageFormat(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::ImageFormat("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::ImageFormat(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        png::ColorType::Indexed => return Err(Error::ImageFormat("palette was not expanded".into())),
    };
    Image::new(w, h, channels, data)
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(if image.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::ImageFormat(e.to_string()))?;
        writer.write_image_data(&image.data).map_err(|e| Error::ImageFormat(e.to_string()))?;
        writer.finish().map_err(|e| Error::ImageFormat(e.to_string()))?;
    }
    Ok(out)
}

/// Binary PGM (`P5`) or PPM (`P6`) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::ImageFormat("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::ImageFormat(format!("unsupported PNM variant `{m}`"))),
    };
    let mut number =
        |what: &str| -> Result<usize> { token()?.parse().map_err(|_| Error::ImageFormat(format!("bad PNM {what}"))) };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        let bits = usize::BITS - maxval.leading_zeros();
        return Err(Error::UnsupportedBitDepth(bits));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width * height * channels;
    let raster = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::ImageFormat(format!("PNM raster truncated: expected {len} bytes")))?;
    Image::new(width, height, channels, raster.to_vec())
}

pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

/// Decodes by content: PNG signature or a `P5`/`P6` header.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::ImageFormat("neither PNG nor binary PPM/PGM".into()))
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    decode(&fs::read(path)?)
}

/// Writes PNG unless the extension is `.ppm`/`.pgm`/`.pnm`.
pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("ppm" | "pgm" | "pnm") => encode_pnm(image),
        _ => encode_png(image)?,
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_label(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_image(path)?.to_label()
}

pub fn write_label(path: impl AsRef<Path>, label: &LabelMap) -> Result<()> {
    write_image(path, &Image::from_label(label))
}

const CITYSCAPES: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

/// `k` mutually distinct colors: the Cityscapes colors first, then
/// golden-angle hues for any further classes.
pub fn palette(k: usize) -> Vec<[u8; 3]> {
    let mut out: Vec<[u8; 3]> = CITYSCAPES.iter().take(k).copied().collect();
    let mut i = 0u32;
    while out.len() < k {
        let hue = (i as f64 * 137.507_764) % 360.0;
        let light = [0.45, 0.6, 0.75][(i % 3) as usize];
        let c = hsv_to_rgb(hue, 0.8, light);
        if !out.contains(&c) {
            out.push(c);
        }
        i += 1;
    }
    out
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r, g, b].map(|t| ((t + m) * 255.0).round() as u8)
}

/// RGB rendering of a label map; ignored or out-of-palette pixels are black.
pub fn colorize(label: &LabelMap, palette: &[[u8; 3]]) -> Image {
    let data = label.data.iter().flat_map(|&l| palette.get(l as usize).copied().unwrap_or([0, 0, 0])).collect();
    Image { width: label.width, height: label.height, channels: 3, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_gray_and_rgb() {
        for channels in [1, 3] {
            let data: Vec<u8> = (0..16 * 9 * channels).map(|i| (i * 37 % 256) as u8).collect();
            let img = Image::new(16, 9, channels, data).unwrap();
            assert_eq!(decode(&encode_png(&img).unwrap()).unwrap(), img);
            assert_eq!(decode(&encode_pnm(&img)).unwrap(), img);
        }
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 8]).unwrap();
        }
        assert!(matches!(decode(&out), Err(Error::UnsupportedBitDepth(16))));
        assert!(matches!(decode(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0"), Err(Error::UnsupportedBitDepth(16))));
    }

    #[test]
    fn pnm_comments_and_truncation() {
        let img = decode(b"P5\n# note\n2 1\n255\n\x07\xff").unwrap();
        assert_eq!(img.data, vec![7, 255]);
        assert!(decode(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn palettes_are_distinct() {
        for k in [1, 4, 19, 40, 255] {
            let p = palette(k);
            assert_eq!(p.len(), k);
            for i in 0..k {
                for j in 0..i {
                    assert_ne!(p[i], p[j], "k={k}");
                }
            }
        }
    }
}
