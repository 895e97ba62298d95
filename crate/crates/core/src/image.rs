//! Frames and float image planes.

use crate::geometry::BBox;

/// An 8-bit RGB camera frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    pub index: u64,
    pub timestamp_ms: u64,
}

pub fn luma(r: u8, g: u8, b: u8) -> f32 {
    0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32
}

impl Frame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Self {
        assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
        Self {
            width,
            height,
            rgb,
            index: 0,
            timestamp_ms: 0,
        }
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let rgb = color.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, rgb)
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Luma plane scaled to `[0, 1]`.
    pub fn gray(&self) -> Vec<f32> {
        self.rgb.chunks_exact(3).map(|p| luma(p[0], p[1], p[2]) / 255.0).collect()
    }

    /// Channel-major float planes scaled to `[0, 1]`.
    pub fn to_planes(&self) -> Planes {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (i, p) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c] as f32 / 255.0;
            }
        }
        Planes {
            channels: 3,
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Channel-major float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Planes {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Self {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear resize with pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> Planes {
        let mut out = Planes::zeros(self.channels, width, height);
        if self.width == 0 || self.height == 0 || width == 0 || height == 0 {
            return out;
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let n_out = width * height;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                for c in 0..self.channels {
                    out.data[c * n_out + y * width + x] = sample_bilinear(self.plane(c), self.width, self.height, fx, fy);
                }
            }
        }
        out
    }
}

/// Bilinear sample of a row-major plane at continuous pixel coordinates
/// (pixel centres at integers); coordinates are clamped to the plane.
pub fn sample_bilinear(plane: &[f32], width: usize, height: usize, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (width - 1) as f32);
    let y = y.clamp(0.0, (height - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = x - x0 as f32;
    let ay = y - y0 as f32;
    let top = plane[y0 * width + x0] * (1.0 - ax) + plane[y0 * width + x1] * ax;
    let bottom = plane[y1 * width + x0] * (1.0 - ax) + plane[y1 * width + x1] * ax;
    top * (1.0 - ay) + bottom * ay
}

/// Resamples the `region` of a single-channel plane to `out_w x out_h`.
pub fn resample_region(plane: &[f32], width: usize, height: usize, region: &BBox, out_w: usize, out_h: usize) -> Vec<f32> {
    let sx = region.w / out_w as f32;
    let sy = region.h / out_h as f32;
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        let fy = region.y + (y as f32 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let fx = region.x + (x as f32 + 0.5) * sx - 0.5;
            out[y * out_w + x] = sample_bilinear(plane, width, height, fx, fy);
        }
    }
    out
}
