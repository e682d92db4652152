//! 8-bit grayscale PNG encoding shared by cohort files and saliency exports.

use std::io::Cursor;

#[derive(Debug, thiserror::Error)]
pub enum PngError {
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("expected {expected_w}x{expected_h} 8-bit grayscale, got {w}x{h} {color:?}/{depth:?}")]
    Format {
        expected_w: u32,
        expected_h: u32,
        w: u32,
        h: u32,
        color: png::ColorType,
        depth: png::BitDepth,
    },
}

pub fn encode_gray_png(width: u32, height: u32, pixels: &[u8]) -> Result<Vec<u8>, PngError> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(pixels)?;
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale PNG of the given size.
pub fn decode_gray_png(bytes: &[u8], width: u32, height: u32) -> Result<Vec<u8>, PngError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    let (w, h, color, depth) = (info.width, info.height, info.color_type, info.bit_depth);
    if w != width
        || h != height
        || color != png::ColorType::Grayscale
        || depth != png::BitDepth::Eight
    {
        return Err(PngError::Format {
            expected_w: width,
            expected_h: height,
            w,
            h,
            color,
            depth,
        });
    }
    let mut buf = vec![0; (width * height) as usize];
    reader.next_frame(&mut buf)?;
    Ok(buf)
}

/// Maps values in [0, 1] to 8-bit gray levels.
pub fn unit_to_gray(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let px: Vec<u8> = (0..64 * 64).map(|i| (i % 251) as u8).collect();
        let bytes = encode_gray_png(64, 64, &px).unwrap();
        assert_eq!(decode_gray_png(&bytes, 64, 64).unwrap(), px);
        assert!(matches!(
            decode_gray_png(&bytes, 32, 32),
            Err(PngError::Format { .. })
        ));
    }
}
