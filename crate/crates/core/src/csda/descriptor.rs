use candle_core::{Tensor, D};

use crate::error::Result;
use crate::tracker::{correlate, correlate_pooled};

/// Pooled, L2-normalized depthwise correlation of `z` over `x`, one row per
/// sample: `(B, C)`. Differentiable. The second value flags samples whose
/// pooled response was all zero; their row is the zero vector.
pub fn correlation_descriptor(z: &Tensor, x: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    let pooled = correlate(z, x)?.mean((2, 3))?;
    normalize_rows(&pooled)
}

pub(crate) fn normalize_rows(v: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    let sq = v.sqr()?.sum_keepdim(D::Minus1)?;
    let zero: Vec<bool> = sq
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?
        .iter()
        .map(|&s| s == 0.0)
        .collect();
    // the offset keeps the zero row at zero and its gradient finite
    let norm = (sq + 1e-24)?.sqrt()?;
    Ok((v.broadcast_div(&norm)?, zero))
}

/// Gradient-free descriptor for one sample on `(C, H, W)` buffers.
pub fn descriptor_from_buffers(
    z: &[f32],
    x: &[f32],
    channels: usize,
    zs: (usize, usize),
    xs: (usize, usize),
) -> (Vec<f32>, bool) {
    let mut v = correlate_pooled(z, x, channels, zs, xs);
    let n = v.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt();
    if n == 0.0 {
        return (v, true);
    }
    for a in &mut v {
        *a = (*a as f64 / n) as f32;
    }
    (v, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, dims: (usize, usize, usize, usize)) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    #[test]
    fn unit_norm_and_scale_invariant() {
        let z = rand_t(1, (2, 5, 3, 3));
        let x = rand_t(2, (2, 5, 6, 6));
        let (d, flags) = correlation_descriptor(&z, &x).unwrap();
        assert_eq!(flags, vec![false, false]);
        for row in d.to_vec2::<f64>().unwrap() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let (d5, _) = correlation_descriptor(&z, &(&x * 5.0).unwrap()).unwrap();
        for (a, b) in d.to_vec2::<f64>().unwrap().concat().iter().zip(d5.to_vec2::<f64>().unwrap().concat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_correlation_is_nonzero_unit() {
        let z = rand_t(3, (1, 4, 4, 4));
        let (d, flags) = correlation_descriptor(&z, &z).unwrap();
        assert!(!flags[0]);
        let n: f64 = d.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_response_is_flagged() {
        let z = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let x = rand_t(4, (1, 3, 5, 5));
        let (d, flags) = correlation_descriptor(&z, &x).unwrap();
        assert!(flags[0]);
        assert!(d.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_pool_then_normalize_oracle() {
        let z = rand_t(5, (1, 6, 3, 3));
        let x = rand_t(6, (1, 6, 9, 9));
        let (d, _) = correlation_descriptor(&z, &x).unwrap();
        let d = d.to_vec2::<f64>().unwrap().remove(0);
        let zf = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xf = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut pooled = vec![0f64; 6];
        for c in 0..6 {
            for i in 0..7 {
                for j in 0..7 {
                    for u in 0..3 {
                        for v in 0..3 {
                            pooled[c] += zf[c * 9 + u * 3 + v] * xf[c * 81 + (i + u) * 9 + j + v];
                        }
                    }
                }
            }
            pooled[c] /= 49.0;
        }
        let n = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in d.iter().zip(&pooled) {
            assert!((a - b / n).abs() < 1e-6);
        }
        let zf32: Vec<f32> = zf.iter().map(|&v| v as f32).collect();
        let xf32: Vec<f32> = xf.iter().map(|&v| v as f32).collect();
        let (buf, flag) = descriptor_from_buffers(&zf32, &xf32, 6, (3, 3), (9, 9));
        assert!(!flag);
        for (a, b) in buf.iter().zip(&pooled) {
            assert!((*a as f64 - b / n).abs() < 1e-5);
        }
    }
}
