use std::io::Cursor;

use super::{Image, ImagingError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    /// Guesses the format from the leading magic bytes.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
            Some(Self::Png)
        } else if bytes.starts_with(b"P6") {
            Some(Self::Ppm)
        } else {
            None
        }
    }
}

/// Decodes an 8-bit PNG or binary PPM; sample value `v` becomes `v / 255`.
pub fn decode_image<S: Scalar>(bytes: &[u8], format: ImageFormat) -> Result<Image<S>> {
    match format {
        ImageFormat::Png => decode_png(bytes),
        ImageFormat::Ppm => decode_ppm(bytes),
    }
}

pub fn decode_image_auto<S: Scalar>(bytes: &[u8]) -> Result<Image<S>> {
    let format = ImageFormat::sniff(bytes)
        .ok_or_else(|| ImagingError::MalformedFile("unrecognized image signature".into()))?;
    decode_image(bytes, format)
}

/// Reads and decodes a PNG or PPM file.
pub fn read_image<S: Scalar>(path: &std::path::Path) -> Result<Image<S>> {
    let bytes = std::fs::read(path).map_err(|source| ImagingError::Io { path: path.to_path_buf(), source })?;
    decode_image_auto(&bytes)
}

pub fn write_png<S: Scalar>(img: &Image<S>, path: &std::path::Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|source| ImagingError::Io { path: path.to_path_buf(), source })
}

fn decode_png<S: Scalar>(bytes: &[u8]) -> Result<Image<S>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImagingError::MalformedFile(e.to_string()))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(ImagingError::UnsupportedFormat("16-bit PNG".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImagingError::MalformedFile("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImagingError::MalformedFile(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImagingError::UnsupportedFormat(format!("{:?}-bit PNG", info.bit_depth)));
    }
    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(ImagingError::UnsupportedFormat("unexpanded palette".into()))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * keep);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size).take(h) {
        for px in row[..w * src_channels].chunks_exact(src_channels) {
            data.extend(px[..keep].iter().map(|&v| unit_sample::<S>(v, 255)));
        }
    }
    Image::new(w, h, keep, data)
}

fn unit_sample<S: Scalar>(v: u8, max: u32) -> S {
    S::of(f64::from(v) / f64::from(max))
}

fn decode_ppm<S: Scalar>(bytes: &[u8]) -> Result<Image<S>> {
    let malformed = |m: &str| ImagingError::MalformedFile(format!("ppm: {m}"));
    if !bytes.starts_with(b"P6") {
        return Err(malformed("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 {
        return Err(malformed("maxval 0"));
    }
    if maxval > 255 {
        return Err(ImagingError::UnsupportedFormat(format!("ppm maxval {maxval} (16-bit)")));
    }
    // single whitespace byte separates header and raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing separator after header"));
    }
    pos += 1;
    let (w, h) = (w as usize, h as usize);
    let need = w * h * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| malformed("truncated raster"))?;
    let data = raster.iter().map(|&v| unit_sample::<S>(v, maxval)).collect();
    Image::new(w, h, 3, data)
}

/// Encodes as 8-bit gray or RGB PNG (`round(v * 255)`).
pub fn encode_png<S: Scalar>(img: &Image<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        let bytes: Vec<u8> = img
            .data()
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(px);
        v
    }

    #[test]
    fn ppm_white_and_black() {
        let white: Image<f32> = decode_image(&ppm(1, 1, &[255, 255, 255]), ImageFormat::Ppm).unwrap();
        assert_eq!(white.data(), &[1.0, 1.0, 1.0]);
        let black: Image<f32> = decode_image(&ppm(1, 1, &[0, 0, 0]), ImageFormat::Ppm).unwrap();
        assert_eq!(black.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_51_is_exactly_point_two() {
        let img: Image<f32> = decode_image(&ppm(2, 2, &[51; 12]), ImageFormat::Ppm).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.2f32));
        let img64: Image<f64> = decode_image(&ppm(2, 2, &[51; 12]), ImageFormat::Ppm).unwrap();
        assert!(img64.data().iter().all(|&v| v == 0.2f64));
    }

    #[test]
    fn ppm_with_comment() {
        let bytes = b"P6 # made by hand\n1 1 255\n\x80\x00\xff".to_vec();
        let img: Image<f64> = decode_image(&bytes, ImageFormat::Ppm).unwrap();
        assert_eq!(img.get(0, 0, 2), 1.0);
    }

    #[test]
    fn ppm_errors() {
        let truncated = ppm(2, 2, &[0; 5]);
        assert!(matches!(
            decode_image::<f32>(&truncated, ImageFormat::Ppm),
            Err(ImagingError::MalformedFile(_))
        ));
        let deep = b"P6\n1 1\n65535\n\0\0\0\0\0\0".to_vec();
        assert!(matches!(
            decode_image::<f32>(&deep, ImageFormat::Ppm),
            Err(ImagingError::UnsupportedFormat(_))
        ));
        assert!(decode_image::<f32>(b"P3\n", ImageFormat::Ppm).is_err());
    }

    #[test]
    fn png_round_trip_rgb_and_gray() {
        let img = Image::<f32>::from_fn(3, 2, 3, |x, y, c| ((x + 2 * y + c) as f32) / 10.0).unwrap();
        let q: Image<f32> = decode_image(&encode_png(&img).unwrap(), ImageFormat::Png).unwrap();
        assert_eq!(q.width(), 3);
        for (a, b) in img.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
        let gray = Image::<f32>::filled(4, 4, 1, 1.0).unwrap();
        let g: Image<f32> = decode_image_auto(&encode_png(&gray).unwrap()).unwrap();
        assert_eq!(g.channels(), 1);
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn png_rgba_drops_alpha_and_rejects_16_bit() {
        let mut rgba = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut rgba, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[255, 0, 51, 7]).unwrap();
        }
        let img: Image<f32> = decode_image(&rgba, ImageFormat::Png).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);

        let mut deep = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut deep, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2]).unwrap();
        }
        assert!(matches!(
            decode_image::<f32>(&deep, ImageFormat::Png),
            Err(ImagingError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            decode_image::<f32>(&rgba[..20], ImageFormat::Png),
            Err(ImagingError::MalformedFile(_))
        ));
    }
}
