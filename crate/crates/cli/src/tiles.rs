//! Exemplar tiles: a descriptor drawn as a fixed-palette heatmap PNG.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

/// Pixels per descriptor value along each axis.
pub const CELL_PX: u32 = 8;
/// Values per tile row; descriptors are drawn as coordinate pairs.
pub const COLUMNS: usize = 2;
/// Values map onto the palette over `[-RANGE, RANGE]`.
pub const RANGE: f64 = 4.0;

const PALETTE: [[u8; 3]; 5] = [
    [59, 76, 192],
    [141, 176, 254],
    [221, 221, 221],
    [244, 154, 123],
    [180, 4, 38],
];

/// Palette colour of `v`, interpolated linearly between the stops.
pub fn colour(v: f64) -> [u8; 3] {
    let t = ((v.clamp(-RANGE, RANGE) + RANGE) / (2.0 * RANGE)) * (PALETTE.len() - 1) as f64;
    let i = (t.floor() as usize).min(PALETTE.len() - 2);
    let f = t - i as f64;
    let (a, b) = (PALETTE[i], PALETTE[i + 1]);
    [0, 1, 2].map(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

/// PNG bytes of the descriptor heatmap.
pub fn render_png(descriptor: &[f64]) -> Vec<u8> {
    let rows = descriptor.len().div_ceil(COLUMNS).max(1);
    let (w, h) = (COLUMNS as u32 * CELL_PX, rows as u32 * CELL_PX);
    let mut pixels = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            let idx = (y / CELL_PX) as usize * COLUMNS + (x / CELL_PX) as usize;
            pixels.extend(descriptor.get(idx).map_or([0, 0, 0], |&v| colour(v)));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer
            .write_image_data(&pixels)
            .expect("in-memory PNG data");
    }
    out
}

pub fn render_base64(descriptor: &[f64]) -> String {
    STANDARD.encode(render_png(descriptor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_ends_and_clamping() {
        assert_eq!(colour(-RANGE), PALETTE[0]);
        assert_eq!(colour(-100.0), PALETTE[0]);
        assert_eq!(colour(0.0), PALETTE[2]);
        assert_eq!(colour(RANGE), PALETTE[4]);
        assert_eq!(colour(f64::MAX), PALETTE[4]);
    }

    #[test]
    fn tile_decodes_to_the_drawn_cells() {
        let d = [-4.0, 4.0, 0.0, 1.0, 2.0];
        let bytes = render_png(&d);
        let mut reader = png::Decoder::new(std::io::Cursor::new(bytes))
            .read_info()
            .unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (2 * CELL_PX, 3 * CELL_PX));
        let px = |x: u32, y: u32| {
            let i = ((y * info.width + x) * 3) as usize;
            [buf[i], buf[i + 1], buf[i + 2]]
        };
        assert_eq!(px(0, 0), colour(-4.0));
        assert_eq!(px(CELL_PX, 0), colour(4.0));
        assert_eq!(px(CELL_PX + 3, CELL_PX + 3), colour(1.0));
        assert_eq!(px(CELL_PX, 2 * CELL_PX), [0, 0, 0]);
    }
}
