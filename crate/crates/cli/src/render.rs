//! Offline animation of motion sequences: each region is drawn as its
//! 2-sigma covariance ellipse around `mu`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgba, RgbaImage};

use angie::motion::{symmetric_eigen, MotionSequence, RegionMotionFrame};

const SEGMENTS: usize = 72;
const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
];

/// Points of the 2-sigma contour `mu + 2 U diag(sqrt(lambda)) [cos, sin]`.
pub fn ellipse_points(f: &RegionMotionFrame, segments: usize) -> Vec<[f64; 2]> {
    let (u, lam) = symmetric_eigen(&f.covariance());
    let (a, b) = (2.0 * lam[0].max(0.0).sqrt(), 2.0 * lam[1].max(0.0).sqrt());
    (0..segments)
        .map(|i| {
            let th = std::f64::consts::TAU * i as f64 / segments as f64;
            let (c, s) = (a * th.cos(), b * th.sin());
            [f.mu[0] + u[0][0] * c + u[0][1] * s, f.mu[1] + u[1][0] * c + u[1][1] * s]
        })
        .collect()
}

/// Square view covering every ellipse of the sequence with a small margin.
struct View {
    x0: f64,
    y0: f64,
    scale: f64,
}

impl View {
    fn fit(seq: &MotionSequence, size: u32) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for f in seq.region_frames() {
            for p in ellipse_points(f, 8) {
                for d in 0..2 {
                    lo[d] = lo[d].min(p[d]);
                    hi[d] = hi[d].max(p[d]);
                }
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6) * 1.1;
        let cx = 0.5 * (lo[0] + hi[0]);
        let cy = 0.5 * (lo[1] + hi[1]);
        Self { x0: cx - span / 2.0, y0: cy - span / 2.0, scale: size as f64 / span }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        ((p[0] - self.x0) * self.scale, (p[1] - self.y0) * self.scale)
    }
}

fn line(img: &mut RgbaImage, a: (f64, f64), b: (f64, f64), color: Rgba<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

pub fn render_frames(seq: &MotionSequence, size: u32) -> Vec<RgbaImage> {
    let view = View::fit(seq, size);
    seq.frames()
        .map(|regions| {
            let mut img = RgbaImage::from_pixel(size, size, Rgba([255, 255, 255, 255]));
            for (j, f) in regions.iter().enumerate() {
                let [r, g, b] = PALETTE[j % PALETTE.len()];
                let color = Rgba([r, g, b, 255]);
                let pts: Vec<(f64, f64)> = ellipse_points(f, SEGMENTS).into_iter().map(|p| view.px(p)).collect();
                for i in 0..pts.len() {
                    line(&mut img, pts[i], pts[(i + 1) % pts.len()], color);
                }
                let c = view.px(f.mu);
                line(&mut img, (c.0 - 2.0, c.1), (c.0 + 2.0, c.1), color);
                line(&mut img, (c.0, c.1 - 2.0), (c.0, c.1 + 2.0), color);
            }
            img
        })
        .collect()
}

pub fn render_gif(seq: &MotionSequence, path: &Path, size: u32) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = GifEncoder::new(BufWriter::new(file));
    enc.set_repeat(Repeat::Infinite)?;
    let delay = Delay::from_numer_denom_ms(1000, seq.fps().round().max(1.0) as u32);
    for img in render_frames(seq, size) {
        enc.encode_frame(Frame::from_parts(img, 0, 0, delay))?;
    }
    Ok(())
}
