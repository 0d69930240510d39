use candle_core::Tensor;

use crate::error::{Error, Result};

/// Depthwise valid cross-correlation of per-sample template features `z`
/// `(B, C, hz, wz)` over search features `x` `(B, C, hx, wx)`; the output is
/// `(B, C, hx - hz + 1, wx - wz + 1)`. Differentiable in both arguments.
pub fn correlate(z: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (bz, cz, hz, wz) = z.dims4()?;
    let (bx, cx, hx, wx) = x.dims4()?;
    if cz != cx {
        return Err(Error::Shape(format!("channel mismatch: template {cz}, search {cx}")));
    }
    if bz != bx {
        return Err(Error::Shape(format!("batch mismatch: template {bz}, search {bx}")));
    }
    if hz > hx || wz > wx {
        return Err(Error::Shape(format!(
            "template {hz}x{wz} larger than search {hx}x{wx}"
        )));
    }
    let (oh, ow) = (hx - hz + 1, wx - wz + 1);
    let mut acc: Option<Tensor> = None;
    for u in 0..hz {
        let rows = x.narrow(2, u, oh)?;
        for v in 0..wz {
            let window = rows.narrow(3, v, ow)?;
            let k = z.narrow(2, u, 1)?.narrow(3, v, 1)?;
            let term = window.broadcast_mul(&k)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
    }
    acc.ok_or_else(|| Error::Shape("empty template".into()))
}

/// The same correlation for one sample on plain buffers laid out `(C, H, W)`,
/// pooled over positions. Used where no gradient is needed.
pub fn correlate_pooled(
    z: &[f32],
    x: &[f32],
    channels: usize,
    (hz, wz): (usize, usize),
    (hx, wx): (usize, usize),
) -> Vec<f32> {
    let (oh, ow) = (hx + 1 - hz, wx + 1 - wz);
    let mut out = vec![0f32; channels];
    for c in 0..channels {
        let zc = &z[c * hz * wz..(c + 1) * hz * wz];
        let xc = &x[c * hx * wx..(c + 1) * hx * wx];
        // sum over output positions of the window dot product equals
        // sum_{u,v} z[u,v] * (box sum of x over the shifted window)
        let mut integral = vec![0f64; (hx + 1) * (wx + 1)];
        for i in 0..hx {
            let mut row = 0f64;
            for j in 0..wx {
                row += xc[i * wx + j] as f64;
                integral[(i + 1) * (wx + 1) + j + 1] = integral[i * (wx + 1) + j + 1] + row;
            }
        }
        let rect = |i0: usize, j0: usize| {
            let (i1, j1) = (i0 + oh, j0 + ow);
            integral[i1 * (wx + 1) + j1] - integral[i0 * (wx + 1) + j1]
                - integral[i1 * (wx + 1) + j0]
                + integral[i0 * (wx + 1) + j0]
        };
        let mut s = 0f64;
        for u in 0..hz {
            for v in 0..wz {
                s += zc[u * wz + v] as f64 * rect(u, v);
            }
        }
        out[c] = (s / (oh * ow) as f64) as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Sliding-window dot products, one channel at a time.
    fn brute4(z: &[f32], x: &[f32], (b, c, hz, wz): (usize, usize, usize, usize), (hx, wx): (usize, usize)) -> Vec<f64> {
        let (oh, ow) = (hx - hz + 1, wx - wz + 1);
        let mut out = Vec::new();
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = 0f64;
                        for u in 0..hz {
                            for v in 0..wz {
                                let zv = z[((bi * c + ci) * hz + u) * wz + v] as f64;
                                let xv = x[((bi * c + ci) * hx + i + u) * wx + j + v] as f64;
                                s += zv * xv;
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(b, c, hz, hx) in &[(1, 1, 1, 3), (2, 3, 3, 7), (2, 4, 4, 9), (1, 2, 5, 5)] {
            let z = rand_tensor(&mut rng, (b, c, hz, hz));
            let x = rand_tensor(&mut rng, (b, c, hx, hx));
            let got = correlate(&z, &x).unwrap();
            assert_eq!(got.dims(), &[b, c, hx - hz + 1, hx - hz + 1]);
            let got = got.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let zf = z.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let xf = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let want = brute4(&zf, &xf, (b, c, hz, hz), (hx, hx));
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() <= 1e-5 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn self_correlation_peaks_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rand_tensor(&mut rng, (1, 3, 5, 5));
        // x is z embedded in a zero border, so z = x at the central offset
        let x = z.pad_with_zeros(2, 2, 2).unwrap().pad_with_zeros(3, 2, 2).unwrap();
        let r = correlate(&z, &x).unwrap().squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        for ch in r {
            let center = ch[2][2];
            for row in &ch {
                for &v in row {
                    assert!(v <= center + 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_and_identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, (2, 3, 6, 6));
        let zero = Tensor::zeros((2, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let r = correlate(&zero, &x).unwrap();
        assert!(r.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
        let one = Tensor::ones((2, 3, 1, 1), DType::F32, &Device::Cpu).unwrap();
        let r = correlate(&one, &x).unwrap();
        assert_eq!(
            r.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn channel_mismatch_errors() {
        let z = Tensor::zeros((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(correlate(&z, &x).is_err());
    }

    #[test]
    fn pooled_matches_mean_of_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = rand_tensor(&mut rng, (1, 4, 3, 3));
        let x = rand_tensor(&mut rng, (1, 4, 8, 8));
        let full = correlate(&z, &x).unwrap().mean((2, 3)).unwrap().squeeze(0).unwrap().to_vec1::<f32>().unwrap();
        let zf = z.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let xf = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let pooled = correlate_pooled(&zf, &xf, 4, (3, 3), (8, 8));
        for (a, b) in full.iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
