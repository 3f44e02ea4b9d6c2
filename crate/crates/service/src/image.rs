use divas_core::render::PixelMap;

use crate::ApiError;

fn encode(width: u32, height: u32, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>, ApiError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(internal)?;
        w.write_image_data(data).map_err(internal)?;
    }
    Ok(out)
}

fn internal(e: png::EncodingError) -> ApiError {
    ApiError::new(axum::http::StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

/// 8-bit sRGB-agnostic RGB PNG; channel values are clamped to `[0, 1]`.
pub fn encode_rgb_png(map: &PixelMap<[f32; 3]>) -> Result<Vec<u8>, ApiError> {
    let data: Vec<u8> = map
        .data
        .iter()
        .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    encode(map.width, map.height, png::ColorType::Rgb, &data)
}

/// Grayscale PNG with 255 for set pixels and 0 elsewhere.
pub fn encode_mask_png(map: &PixelMap<bool>) -> Result<Vec<u8>, ApiError> {
    let data: Vec<u8> = map.data.iter().map(|b| if *b { 255 } else { 0 }).collect();
    encode(map.width, map.height, png::ColorType::Grayscale, &data)
}
