//! Optical-flow color wheel rendering.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use hybridflow_core::flow::FlowField;

/// The usual 55-entry wheel: red, yellow, green, cyan, blue, magenta.
fn wheel() -> Vec<[f32; 3]> {
    let segments: [(usize, [f32; 3], [f32; 3]); 6] = [
        (15, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        (6, [1.0, 1.0, 0.0], [-1.0, 0.0, 0.0]),
        (4, [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        (11, [0.0, 1.0, 1.0], [0.0, -1.0, 0.0]),
        (13, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
        (6, [1.0, 0.0, 1.0], [0.0, 0.0, -1.0]),
    ];
    let mut out = Vec::with_capacity(55);
    for (n, base, delta) in segments {
        for i in 0..n {
            let f = i as f32 / n as f32;
            out.push([
                base[0] + f * delta[0],
                base[1] + f * delta[1],
                base[2] + f * delta[2],
            ]);
        }
    }
    out
}

pub const NORMALIZATION_NOTE: &str =
    "viz/*.png: color-wheel flow rendering, saturation normalized by each image's max flow magnitude";

/// RGB bytes for a flow field, normalized by its largest magnitude.
/// Returns the pixels and the normalizer.
pub fn flow_to_rgb(flow: &FlowField) -> (Vec<u8>, f32) {
    let colors = wheel();
    let n = colors.len();
    let (h, w) = (flow.height(), flow.width());
    let mut max = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(x, y);
            max = max.max((u * u + v * v).sqrt());
        }
    }
    let norm = if max > 0.0 { max } else { 1.0 };
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(x, y);
            let (u, v) = (u / norm, v / norm);
            let rad = (u * u + v * v).sqrt();
            let a = (-v).atan2(-u) / std::f32::consts::PI;
            let fk = (a + 1.0) / 2.0 * (n - 1) as f32;
            let k0 = (fk.floor() as usize).min(n - 1);
            let k1 = (k0 + 1) % n;
            let f = fk - k0 as f32;
            for c in 0..3 {
                let col = (1.0 - f) * colors[k0][c] + f * colors[k1][c];
                let col = if rad <= 1.0 {
                    1.0 - rad * (1.0 - col)
                } else {
                    col * 0.75
                };
                rgb.push((255.0 * col).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    (rgb, max)
}

pub fn write_flow_png(path: &Path, flow: &FlowField) -> std::io::Result<f32> {
    let (rgb, max) = flow_to_rgb(flow);
    let mut enc = png::Encoder::new(
        BufWriter::new(File::create(path)?),
        flow.width() as u32,
        flow.height() as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(std::io::Error::other)?;
    writer
        .write_image_data(&rgb)
        .map_err(std::io::Error::other)?;
    Ok(max)
}
