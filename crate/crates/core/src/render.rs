//! PNG rendering of axial slices.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume3, LEFT_KIDNEY, RIGHT_KIDNEY};

/// Overlay colors for the right and left kidney.
pub const RIGHT_COLOR: [u8; 3] = [255, 0, 0];
pub const LEFT_COLOR: [u8; 3] = [0, 0, 255];
/// Weight of the label color when blended over the CT.
pub const OVERLAY_ALPHA: f64 = 0.5;

fn check_slice(vol: &Volume3, z: usize) -> Result<()> {
    let nz = vol.dims()[2];
    if z >= nz {
        return Err(Error::Parameter(format!("slice {z} is outside 0..{nz}")));
    }
    Ok(())
}

/// 8-bit gray values of slice `z`, windowed to `[lo, hi]`, row-major in y.
pub fn window_slice(vol: &Volume3, z: usize, window: [f64; 2]) -> Result<Vec<u8>> {
    check_slice(vol, z)?;
    let [lo, hi] = window;
    if !(lo < hi) {
        return Err(Error::Parameter(format!("window requires lo < hi, got [{lo}, {hi}]")));
    }
    let n = vol.geometry().slice_len();
    Ok(vol.data()[z * n..(z + 1) * n]
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

fn encode(width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Parameter(format!("PNG encoding failed: {e}"));
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(pixels).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(out)
}

/// Grayscale PNG of slice `z`.
pub fn slice_png(vol: &Volume3, z: usize, window: [f64; 2]) -> Result<Vec<u8>> {
    let [nx, ny, _] = vol.dims();
    encode(nx, ny, png::ColorType::Grayscale, &window_slice(vol, z, window)?)
}

/// RGB PNG of slice `z` with kidney labels blended in their fixed colors.
pub fn overlay_png(vol: &Volume3, labels: &LabelVolume, z: usize, window: [f64; 2]) -> Result<Vec<u8>> {
    vol.geometry().ensure_congruent(labels.geometry(), "labels vs CT")?;
    let gray = window_slice(vol, z, window)?;
    let n = gray.len();
    let classes = &labels.labels()[z * n..(z + 1) * n];
    let mut rgb = Vec::with_capacity(3 * n);
    for (&g, &c) in gray.iter().zip(classes) {
        let color = match c {
            RIGHT_KIDNEY => Some(RIGHT_COLOR),
            LEFT_KIDNEY => Some(LEFT_COLOR),
            _ => None,
        };
        match color {
            None => rgb.extend_from_slice(&[g, g, g]),
            Some(col) => rgb.extend(
                col.iter()
                    .map(|&k| ((1.0 - OVERLAY_ALPHA) * g as f64 + OVERLAY_ALPHA * k as f64).round() as u8),
            ),
        }
    }
    let [nx, ny, _] = vol.dims();
    encode(nx, ny, png::ColorType::Rgb, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{ChannelKind, Geometry};

    fn decode(bytes: &[u8]) -> (png::OutputInfo, Vec<u8>) {
        let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info, buf)
    }

    #[test]
    fn window_endpoints_map_to_black_and_white() {
        let g = Geometry::with_dims([4, 1, 2]).unwrap();
        let vol = Volume3::new(g, vec![-300.0, -200.0, 150.0, 500.0, 0.0, 0.0, 0.0, 0.0], ChannelKind::CtHu).unwrap();
        assert_eq!(window_slice(&vol, 0, [-200.0, 500.0]).unwrap(), vec![0, 0, 128, 255]);
        let (info, pixels) = decode(&slice_png(&vol, 0, [-200.0, 500.0]).unwrap());
        assert_eq!((info.width, info.height), (4, 1));
        assert_eq!(pixels, vec![0, 0, 128, 255]);
        assert!(slice_png(&vol, 2, [-200.0, 500.0]).is_err());
    }

    #[test]
    fn overlay_colors_kidneys() {
        let g = Geometry::with_dims([3, 1, 1]).unwrap();
        let vol = Volume3::filled(g, -200.0, ChannelKind::CtHu);
        let labels = LabelVolume::new(g, vec![0, 1, 2]).unwrap();
        let (_, pixels) = decode(&overlay_png(&vol, &labels, 0, [-200.0, 500.0]).unwrap());
        assert_eq!(pixels, vec![0, 0, 0, 128, 0, 0, 0, 0, 128]);
    }
}
