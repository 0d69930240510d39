//! 8-bit frames and floating-point crops taken from them.

use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit image stored row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer of {} bytes does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Luminance of a pixel (channel mean).
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        let base = (y * self.width + x) * self.channels;
        let s: u32 = self.data[base..base + self.channels]
            .iter()
            .map(|&v| v as u32)
            .sum();
        s as f32 / self.channels as f32
    }

    pub fn channel_means(&self) -> Vec<f32> {
        let mut sums = vec![0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        let n = self.area().max(1) as f64;
        sums.into_iter().map(|s| (s / n) as f32).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let frame = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                Frame::new(g.width() as usize, g.height() as usize, 1, g.into_raw())?
            }
            _ => {
                let rgb = img.to_rgb8();
                Frame::new(rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw())?
            }
        };
        Ok(frame)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// A square floating-point crop, values on the 0..=255 scale, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Patch {
    /// Values rearranged channel-major and rescaled to [0, 1], replicating or
    /// averaging channels to reach `channels`.
    pub fn to_chw(&self, channels: usize) -> Vec<f32> {
        let hw = self.side * self.side;
        let mut out = vec![0f32; channels * hw];
        for i in 0..hw {
            let px = &self.data[i * self.channels..(i + 1) * self.channels];
            if self.channels == channels {
                for c in 0..channels {
                    out[c * hw + i] = px[c] / 255.0;
                }
            } else {
                let mean = px.iter().sum::<f32>() / self.channels as f32 / 255.0;
                for c in 0..channels {
                    out[c * hw + i] = mean;
                }
            }
        }
        out
    }
}

/// Square crop of side `crop_side` (frame pixels) centred at `(cx, cy)`,
/// bilinearly resampled to `out_side` pixels. Samples that fall outside the
/// frame take the per-channel mean intensity.
pub fn crop_resize(frame: &Frame, cx: f32, cy: f32, crop_side: f32, out_side: usize) -> Patch {
    let ch = frame.channels;
    let means = frame.channel_means();
    let scale = crop_side / out_side as f32;
    let half = out_side as f32 / 2.0;
    let mut data = vec![0f32; out_side * out_side * ch];
    let fetch = |x: i64, y: i64, c: usize| -> f32 {
        if x < 0 || y < 0 || x >= frame.width as i64 || y >= frame.height as i64 {
            means[c]
        } else {
            frame.get(x as usize, y as usize, c) as f32
        }
    };
    for v in 0..out_side {
        let sy = cy + (v as f32 + 0.5 - half) * scale - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0 = y0 as i64;
        for u in 0..out_side {
            let sx = cx + (u as f32 + 0.5 - half) * scale - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0 = x0 as i64;
            for c in 0..ch {
                let top = fetch(x0, y0, c) * (1.0 - fx) + fetch(x0 + 1, y0, c) * fx;
                let bot = fetch(x0, y0 + 1, c) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, c) * fx;
                data[(v * out_side + u) * ch + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Patch {
        side: out_side,
        channels: ch,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_crop_reproduces_frame() {
        let data: Vec<u8> = (0..64).map(|v| (v * 3) as u8).collect();
        let f = Frame::new(8, 8, 1, data.clone()).unwrap();
        let p = crop_resize(&f, 4.0, 4.0, 8.0, 8);
        let back: Vec<u8> = p.data.iter().map(|v| v.round() as u8).collect();
        assert_eq!(back, data);
    }

    #[test]
    fn out_of_frame_samples_use_channel_mean() {
        let f = Frame::filled(4, 4, 3, 10);
        let p = crop_resize(&f, -100.0, -100.0, 4.0, 2);
        assert!(p.data.iter().all(|&v| (v - 10.0).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(Frame::new(2, 2, 1, vec![0; 3]).is_err());
        assert!(Frame::new(2, 2, 2, vec![0; 8]).is_err());
    }
}
