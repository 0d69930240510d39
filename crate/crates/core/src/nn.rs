//! Small neural-network toolkit on top of candle: named parameters with
//! seeded initialization, an Adam optimizer with inspectable state, a
//! gradient-scaling op and the layer functions the models share.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name.into(), v.clone());
        Ok(v)
    }

    /// Registers an existing variable without copying it.
    pub fn insert_var(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn t(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(name)?.as_tensor())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Bitwise content hash over names and values.
    pub fn content_hash(&self) -> Result<u64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, v) in &self.vars {
            k.hash(&mut h);
            for x in v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                x.to_bits().hash(&mut h);
            }
        }
        Ok(h.finish())
    }

    pub fn to_map(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `map[prefix + name]`.
    pub fn load_map(&self, map: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (k, v) in &self.vars {
            let t = map
                .get(&format!("{prefix}{k}"))
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{prefix}{k}`")))?;
            if t.dims() != v.dims() {
                return Err(Error::Shape(format!(
                    "checkpoint `{prefix}{k}` has shape {:?}, expected {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(t)?;
        }
        Ok(())
    }

    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load_map(&other.to_map(""), "")
    }
}

/// Seeded initializers.
pub struct Init {
    rng: ChaCha8Rng,
    device: Device,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Ok(Tensor::from_vec(data, shape, &self.device)?)
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Ok(Tensor::from_vec(data, shape, &self.device)?)
    }

    /// He-normal conv kernel `(out, in, k, k)`.
    pub fn conv(&mut self, out: usize, inp: usize, k: usize) -> Result<Tensor> {
        self.normal(&[out, inp, k, k], (2.0 / (inp * k * k) as f64).sqrt())
    }

    /// Small-normal conv kernel, used for output layers.
    pub fn conv_small(&mut self, out: usize, inp: usize, k: usize, std: f64) -> Result<Tensor> {
        self.normal(&[out, inp, k, k], std)
    }

    /// Glorot-uniform weight `(out, in)`.
    pub fn linear(&mut self, out: usize, inp: usize) -> Result<Tensor> {
        self.uniform(&[out, inp], (6.0 / (inp + out) as f64).sqrt())
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, DType::F32, &self.device)?)
    }

    pub fn full(&self, shape: &[usize], v: f32) -> Result<Tensor> {
        Ok(Tensor::full(v, shape, &self.device)?)
    }
}

/// Adam with bias correction. Moments are kept per parameter name so the
/// whole optimizer state can be checkpointed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some(mv) => mv.clone(),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let g = g.detach();
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&next)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    pub fn state_map(&self, prefix: &str) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, (m, v)) in &self.moments {
            out.insert(format!("{prefix}m.{k}"), m.clone());
            out.insert(format!("{prefix}v.{k}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, map: &HashMap<String, Tensor>, prefix: &str, step: u64) {
        self.moments.clear();
        self.step = step;
        let mp = format!("{prefix}m.");
        for (k, m) in map {
            if let Some(name) = k.strip_prefix(&mp) {
                if let Some(v) = map.get(&format!("{prefix}v.{name}")) {
                    self.moments.insert(name.to_string(), (m.clone(), v.clone()));
                }
            }
        }
    }
}

/// Identity forward; backward multiplies the incoming gradient by `factor`.
#[derive(Debug, Clone, Copy)]
pub struct GradScale {
    pub factor: f64,
}

fn scale_storage(storage: &CpuStorage, layout: &Layout, factor: f64) -> Result<CpuStorage, candle_core::Error> {
    fn go<T: Copy>(src: &[T], layout: &Layout, f: impl Fn(T) -> T) -> Vec<T> {
        match layout.contiguous_offsets() {
            Some((a, b)) => src[a..b].iter().map(|&x| f(x)).collect(),
            None => strided_offsets(layout).into_iter().map(|i| f(src[i])).collect(),
        }
    }
    fn strided_offsets(layout: &Layout) -> Vec<usize> {
        let dims = layout.dims();
        let stride = layout.stride();
        let mut out = vec![layout.start_offset()];
        for (&d, &s) in dims.iter().zip(stride) {
            out = out.iter().flat_map(|&o| (0..d).map(move |i| o + i * s)).collect();
        }
        out
    }
    Ok(match storage {
        CpuStorage::F32(s) => {
            let k = factor as f32;
            CpuStorage::F32(go(s, layout, |x| x * k))
        }
        CpuStorage::F64(s) => CpuStorage::F64(go(s, layout, |x| x * factor)),
        _ => candle_core::bail!("grad scale supports f32 and f64 only"),
    })
}

struct ScaleOp(f64);

impl CustomOp1 for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((scale_storage(storage, layout, self.0)?, layout.shape().clone()))
    }
}

impl CustomOp1 for GradScale {
    fn name(&self) -> &'static str {
        "grad-scale"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((scale_storage(storage, layout, 1.0)?, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // exact elementwise product, no affine offset
        Ok(Some(grad_res.apply_op1_no_bwd(&ScaleOp(self.factor))?))
    }
}

pub fn grad_scale(x: &Tensor, factor: f64) -> Result<Tensor> {
    Ok(x.apply_op1(GradScale { factor })?)
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let y = x.conv2d(w, pad, stride, 1, 1)?;
    Ok(match b {
        Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
        None => y,
    })
}

pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = groups.min(c).max(1);
    if c % g != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible into {g} groups")));
    }
    let xg = x.reshape((b, g, (c / g) * h * w))?;
    let mean = xg.mean_keepdim(D::Minus1)?;
    let centered = xg.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    let normed = normed.reshape((b, c, h, w))?;
    Ok(normed
        .broadcast_mul(&gamma.reshape((1, c, 1, 1))?)?
        .broadcast_add(&beta.reshape((1, c, 1, 1))?)?)
}

/// `x @ w^T + b` over the last dimension.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inp = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
    let out = w.dim(0)?;
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, inp))?.matmul(&w.t()?)?.broadcast_add(b)?;
    let mut out_dims = dims[..dims.len() - 1].to_vec();
    out_dims.push(out);
    Ok(y.reshape(out_dims)?)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Elementwise binary cross-entropy with logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((softplus(logits)? - (logits * target)?)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn save_tensors(map: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    Ok(candle_core::safetensors::save(map, path)?)
}

pub fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    Ok(candle_core::safetensors::load(path, &Device::Cpu)?)
}
