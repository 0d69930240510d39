use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Multi-bandwidth RBF kernel with a median-heuristic base bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub multipliers: Vec<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0] }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Config("kernel multipliers must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Median of the pairwise distances over distinct pairs, 0 when fewer than
/// two points. The second value is true when the median was 0 and 1 was used.
pub fn median_bandwidth(sq_dists: &[f64]) -> (f64, bool) {
    let mut d: Vec<f64> = sq_dists.iter().map(|v| v.max(0.0).sqrt()).collect();
    if d.is_empty() {
        return (1.0, true);
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        (med, false)
    } else {
        (1.0, true)
    }
}

fn pair_sq_dists(points: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            out.push(points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    out
}

/// Kernel values between every row of `a` and `b`, row-major `(|a|, |b|)`.
/// The bandwidth is the median pairwise distance over `a ∪ b` (just `a` when
/// both sets are the same).
pub fn kernel_matrix(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &KernelConfig) -> Result<(Vec<f64>, bool)> {
    cfg.validate()?;
    let dim = a.first().or(b.first()).map_or(0, |v| v.len());
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::Shape("kernel inputs differ in dimension".into()));
    }
    let all: Vec<Vec<f64>> = if a == b { a.to_vec() } else { a.iter().chain(b).cloned().collect() };
    let (sigma, flag) = median_bandwidth(&pair_sq_dists(&all));
    Ok((kernel_with_sigma(a, b, sigma, cfg), flag))
}

fn kernel_with_sigma(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64, cfg: &KernelConfig) -> Vec<f64> {
    let mut k = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            k.push(rbf(d2, sigma, &cfg.multipliers));
        }
    }
    k
}

fn rbf(d2: f64, sigma: f64, multipliers: &[f64]) -> f64 {
    multipliers
        .iter()
        .map(|m| (-d2 / (2.0 * (m * sigma).powi(2))).exp())
        .sum::<f64>()
        / multipliers.len() as f64
}

/// Per-sample class weights `1/n_c` for members of class `c`; `None` when the
/// class is absent.
pub fn lmmd_weights(labels: &[usize], c: usize) -> Option<Vec<f64>> {
    let n = labels.iter().filter(|&&l| l == c).count();
    (n > 0).then(|| labels.iter().map(|&l| if l == c { 1.0 / n as f64 } else { 0.0 }).collect())
}

#[derive(Debug, Clone)]
pub struct LmmdOutput {
    pub loss: Tensor,
    /// Classes present in both domains.
    pub present: usize,
    pub sigma: f64,
    pub sigma_fallback: bool,
}

/// Squared distances between rows of `(n, d)` and `(m, d)` tensors.
fn sq_dist_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    let (m, _) = b.dims2()?;
    let diff = a.reshape((n, 1, d))?.broadcast_sub(&b.reshape((1, m, d))?)?;
    Ok(diff.sqr()?.sum(2)?)
}

fn kernel_tensor(d2: &Tensor, sigma: f64, multipliers: &[f64]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for m in multipliers {
        let k = (d2 * (-1.0 / (2.0 * (m * sigma).powi(2))))?.exp()?;
        acc = Some(match acc {
            Some(a) => (a + k)?,
            None => k,
        });
    }
    Ok((acc.expect("validated multipliers") / multipliers.len() as f64)?)
}

/// Class-weighted squared MMD between `(n_s, d)` source rows and `(n_t, d)`
/// target rows, averaged over the classes present in both domains. Gradients
/// flow into both feature tensors; the bandwidth is held constant.
pub fn lmmd_loss(
    fs: &Tensor,
    ft: &Tensor,
    ls: &[usize],
    lt: &[usize],
    num_classes: usize,
    cfg: &KernelConfig,
) -> Result<LmmdOutput> {
    cfg.validate()?;
    let (ns, ds) = fs.dims2()?;
    let (nt, dt) = ft.dims2()?;
    if ds != dt {
        return Err(Error::Shape(format!("feature dimension mismatch: {ds} vs {dt}")));
    }
    if ls.len() != ns || lt.len() != nt {
        return Err(Error::Shape("label count does not match features".into()));
    }
    let dtype = fs.dtype();
    let dev = Device::Cpu;
    let mut ws = Vec::new();
    let mut wt = Vec::new();
    for c in 0..num_classes {
        if let (Some(a), Some(b)) = (lmmd_weights(ls, c), lmmd_weights(lt, c)) {
            ws.extend(a);
            wt.extend(b);
        }
    }
    let present = ws.len() / ns.max(1);
    let dss = sq_dist_tensor(fs, fs)?;
    let dtt = sq_dist_tensor(ft, ft)?;
    let dst = sq_dist_tensor(fs, ft)?;
    let mut pairs = Vec::new();
    for (d, n, upper) in [(&dss, ns, true), (&dtt, nt, true), (&dst, ns, false)] {
        let v = d.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (i, row) in v.iter().enumerate().take(n) {
            let start = if upper { i + 1 } else { 0 };
            pairs.extend_from_slice(&row[start..]);
        }
    }
    let (sigma, sigma_fallback) = median_bandwidth(&pairs);
    if present == 0 {
        return Ok(LmmdOutput {
            loss: Tensor::zeros((), dtype, &dev)?,
            present,
            sigma,
            sigma_fallback,
        });
    }
    let kss = kernel_tensor(&dss, sigma, &cfg.multipliers)?;
    let ktt = kernel_tensor(&dtt, sigma, &cfg.multipliers)?;
    let kst = kernel_tensor(&dst, sigma, &cfg.multipliers)?;
    let ws = Tensor::from_vec(ws, (present, ns), &dev)?.to_dtype(dtype)?;
    let wt = Tensor::from_vec(wt, (present, nt), &dev)?.to_dtype(dtype)?;
    // per class: w_sᵀ K w_s, summed over classes through the diagonal
    let quad = |w1: &Tensor, k: &Tensor, w2: &Tensor| -> Result<Tensor> {
        Ok((w1.matmul(k)? * w2)?.sum_all()?)
    };
    let total = ((quad(&ws, &kss, &ws)? + quad(&wt, &ktt, &wt)?)? - (quad(&ws, &kst, &wt)? * 2.0)?)?;
    Ok(LmmdOutput {
        loss: (total / present as f64)?,
        present,
        sigma,
        sigma_fallback,
    })
}

/// Unweighted squared MMD on plain vectors with the same kernel.
pub fn mmd2(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &KernelConfig) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("MMD needs both sets non-empty".into()));
    }
    cfg.validate()?;
    let all: Vec<Vec<f64>> = a.iter().chain(b).cloned().collect();
    let (sigma, _) = median_bandwidth(&pair_sq_dists(&all));
    let k = kernel_with_sigma(&all, &all, sigma, cfg);
    let n = all.len();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = k[i * n + j];
            match (i < a.len(), j < a.len()) {
                (true, true) => saa += v,
                (false, false) => sbb += v,
                (true, false) => sab += v,
                _ => {}
            }
        }
    }
    Ok(saa / (na * na) + sbb / (nb * nb) - 2.0 * sab / (na * nb))
}
