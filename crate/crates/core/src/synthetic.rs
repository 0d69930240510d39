//! Synthetic two-domain corpus of moving bright shapes. Source renderings
//! are used as is; target renderings are intensity-inverted and blurred,
//! a cheap stand-in for the look of thermal imagery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{mix_seed, Domain, Sequence};
use crate::error::Result;
use crate::frame::Frame;
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub min_size: f32,
    pub max_size: f32,
    /// Maximum speed in pixels per frame.
    pub speed: f32,
    /// Standard deviation of per-pixel noise.
    pub noise: f32,
    /// Smaller moving blobs besides the tracked object.
    pub distractors: usize,
    /// Box-blur radius applied to target renderings.
    pub blur_radius: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sequences: 6,
            frames: 30,
            width: 160,
            height: 120,
            min_size: 14.0,
            max_size: 30.0,
            speed: 3.0,
            noise: 6.0,
            distractors: 1,
            blur_radius: 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Mover {
    cx: f32,
    cy: f32,
    vx: f32,
    vy: f32,
    w: f32,
    h: f32,
    ellipse: bool,
    level: f32,
}

impl Mover {
    fn random(rng: &mut ChaCha8Rng, cfg: &SynthConfig, scale: f32) -> Self {
        let w = rng.random_range(cfg.min_size..=cfg.max_size) * scale;
        let h = (w * rng.random_range(0.6..1.5f32)).clamp(cfg.min_size * scale * 0.6, cfg.max_size * scale * 1.2);
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let speed = rng.random_range(0.3..=1.0f32) * cfg.speed;
        Self {
            cx: rng.random_range(w..(cfg.width as f32 - w).max(w + 1.0)),
            cy: rng.random_range(h..(cfg.height as f32 - h).max(h + 1.0)),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            w,
            h,
            ellipse: rng.random_bool(0.5),
            level: rng.random_range(190.0..235.0),
        }
    }

    fn step(&mut self, width: f32, height: f32) {
        self.cx += self.vx;
        self.cy += self.vy;
        if self.cx - self.w / 2.0 < 1.0 || self.cx + self.w / 2.0 > width - 1.0 {
            self.vx = -self.vx;
            self.cx = self.cx.clamp(self.w / 2.0 + 1.0, width - self.w / 2.0 - 1.0);
        }
        if self.cy - self.h / 2.0 < 1.0 || self.cy + self.h / 2.0 > height - 1.0 {
            self.vy = -self.vy;
            self.cy = self.cy.clamp(self.h / 2.0 + 1.0, height - self.h / 2.0 - 1.0);
        }
    }

    fn covers(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = ((x - self.cx) / (self.w / 2.0), (y - self.cy) / (self.h / 2.0));
        if self.ellipse {
            dx * dx + dy * dy <= 1.0
        } else {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        }
    }

    fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

fn box_blur(frame: &Frame, r: usize) -> Frame {
    if r == 0 {
        return frame.clone();
    }
    let (w, h) = (frame.width, frame.height);
    let mut out = frame.clone();
    let r = r as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut s, mut n) = (0u32, 0u32);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx >= 0 && yy >= 0 && xx < w as isize && yy < h as isize {
                        s += frame.get(xx as usize, yy as usize, 0) as u32;
                        n += 1;
                    }
                }
            }
            out.set(x as usize, y as usize, 0, (s / n) as u8);
        }
    }
    out
}

/// Renders one sequence. Both styles carry boxes; target boxes are for
/// evaluation only.
pub fn synth_sequence(cfg: &SynthConfig, domain: Domain, seed: u64, id: &str) -> Result<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise.max(1e-6) as f64).expect("positive std");
    let mut object = Mover::random(&mut rng, cfg, 1.0);
    let mut others: Vec<Mover> = (0..cfg.distractors)
        .map(|_| {
            let mut m = Mover::random(&mut rng, cfg, 0.7);
            m.level *= 0.8;
            m
        })
        .collect();
    let base = rng.random_range(40.0..80.0f32);
    let gx = rng.random_range(-0.15..0.15f32);
    let gy = rng.random_range(-0.15..0.15f32);
    let (fw, fh) = (cfg.width as f32, cfg.height as f32);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        let mut f = Frame::filled(cfg.width, cfg.height, 1, 0);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let mut v = base + gx * px + gy * py;
                for o in &others {
                    if o.covers(px, py) {
                        v = o.level;
                    }
                }
                if object.covers(px, py) {
                    v = object.level;
                }
                v += noise.sample(&mut rng) as f32;
                f.set(x, y, 0, v.clamp(0.0, 255.0) as u8);
            }
        }
        if domain == Domain::Target {
            for p in &mut f.data {
                *p = 255 - *p;
            }
            f = box_blur(&f, cfg.blur_radius);
        }
        frames.push(f);
        boxes.push(object.bbox().clip(cfg.width, cfg.height));
        object.step(fw, fh);
        for o in &mut others {
            o.step(fw, fh);
        }
    }
    Sequence::new(id, frames, Some(boxes), domain)
}

pub fn synth_corpus(cfg: &SynthConfig, domain: Domain, seed: u64) -> Result<Vec<Sequence>> {
    (0..cfg.sequences)
        .map(|i| {
            let id = format!("{}_{i:03}", domain.as_str());
            synth_sequence(cfg, domain, mix_seed(seed, &id), &id)
        })
        .collect()
}
