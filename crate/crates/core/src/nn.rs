//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted names
//! (`controller.entity_enc.weight`, ...). Initialisation draws from our own
//! seeded RNG so identical seeds give bit-identical networks.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};

/// One parameter as `(name, shape, row-major values)`.
pub type FlatParam = (String, Vec<usize>, Vec<f64>);

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable parameters.
#[derive(Clone, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, var: Var) -> Result<()> {
        if self.vars.contains_key(&name) {
            return Err(contract(format!("duplicate parameter {name}")));
        }
        self.vars.insert(name, var);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
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

    pub fn n_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Overwrite every parameter with the matching one in `other`.
    pub fn copy_from(&self, other: &ParamSet) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other
                .vars
                .get(name)
                .ok_or_else(|| contract(format!("missing parameter {name}")))?;
            var.set(&src.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Flattened values in name order.
    pub fn to_flat(&self) -> Result<Vec<FlatParam>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.dims().to_vec(), v.as_tensor().flatten_all()?.to_vec1::<f64>()?)))
            .collect()
    }

    pub fn load_flat(&self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter {name}")))?;
        if var.dims() != shape {
            return Err(contract(format!("shape mismatch for {name}: {:?} vs {:?}", var.dims(), shape)));
        }
        var.set(&Tensor::from_vec(values, shape, &device())?)?;
        Ok(())
    }

    /// Scoped builder that prefixes names.
    pub fn scope<'a>(&'a mut self, prefix: &str, rng: &'a mut ChaCha8Rng) -> Scope<'a> {
        Scope {
            params: self,
            prefix: prefix.to_string(),
            rng,
        }
    }
}

pub struct Scope<'a> {
    params: &'a mut ParamSet,
    prefix: String,
    rng: &'a mut ChaCha8Rng,
}

impl Scope<'_> {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| self.rng.random_range(-bound..bound)).collect() };
        let w = Var::from_tensor(&Tensor::from_vec(draw(fan_in * fan_out), (fan_in, fan_out), &device())?)?;
        let b = Var::from_tensor(&Tensor::from_vec(draw(fan_out), fan_out, &device())?)?;
        self.params.insert(format!("{}.{name}.weight", self.prefix), w.clone())?;
        self.params.insert(format!("{}.{name}.bias", self.prefix), b.clone())?;
        Ok(Linear {
            weight: w,
            bias: b,
            fan_in,
            fan_out,
        })
    }
}

/// Affine map over the last dimension. Weight is stored `[in, out]`.
#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
    fan_in: usize,
    fan_out: usize,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| contract("linear input must have a feature dim"))?;
        if last != self.fan_in {
            return Err(contract(format!("linear expects {} inputs, got {last}", self.fan_in)));
        }
        let rows = x.elem_count() / last;
        let y = x
            .reshape((rows, last))?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.fan_out;
        Ok(y.reshape(out)?)
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }
}

/// Gated recurrent cell (PyTorch gate layout: reset, update, new).
#[derive(Clone)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    width: usize,
}

impl GruCell {
    pub fn new(scope: &mut Scope<'_>, name: &str, fan_in: usize, width: usize) -> Result<Self> {
        Ok(Self {
            input: scope.linear(&format!("{name}.ih"), fan_in, 3 * width)?,
            hidden: scope.linear(&format!("{name}.hh"), width, 3 * width)?,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Input projections for a whole sequence at once.
    pub fn project_inputs(&self, x: &Tensor) -> Result<Tensor> {
        self.input.forward(x)
    }

    /// One step given precomputed input projection `gi` (`[rows, 3w]`).
    pub fn step_projected(&self, gi: &Tensor, h: &Tensor) -> Result<Tensor> {
        let w = self.width;
        let gh = self.hidden.forward(h)?;
        let r = sigmoid(&(gi.narrow(D::Minus1, 0, w)? + gh.narrow(D::Minus1, 0, w)?)?)?;
        let z = sigmoid(&(gi.narrow(D::Minus1, w, w)? + gh.narrow(D::Minus1, w, w)?)?)?;
        let n = (gi.narrow(D::Minus1, 2 * w, w)? + (r * gh.narrow(D::Minus1, 2 * w, w)?)?)?.tanh()?;
        // h' = n + z * (h - n)
        Ok((&n + (z * (h - &n)?)?)?)
    }

    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        self.step_projected(&self.project_inputs(x)?, h)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Softmax over the last dim restricted to `mask` (1.0 keep, 0.0 drop).
///
/// Dropped entries get exactly zero weight; rows with nothing kept return all
/// zeros instead of NaN.
pub fn masked_softmax(scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.broadcast_as(scores.shape())?;
    let bias = ((&mask - 1.0)? * 1e30)?;
    let s = (scores + bias)?;
    let m = s.max_keepdim(D::Minus1)?.detach();
    let e = (s.broadcast_sub(&m)?.exp()? * &mask)?;
    let z = e.sum_keepdim(D::Minus1)?;
    let any = mask.max_keepdim(D::Minus1)?;
    let denom = (z + (1.0 - any)?)?;
    Ok(e.broadcast_div(&denom)?)
}

/// Mean over `values` rows selected by `mask`.
///
/// `mask`: `[.., L, E]`, `values`: `[.., E, H]` -> `[.., L, H]`.
pub fn masked_mean(mask: &Tensor, values: &Tensor) -> Result<Tensor> {
    let count = mask.sum_keepdim(D::Minus1)?.maximum(1.0)?;
    let summed = mask.contiguous()?.matmul(&values.contiguous()?)?;
    Ok(summed.broadcast_div(&count)?)
}

/// `[R, L, H]` -> `[R, heads, L, H / heads]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (r, l, h) = x.dims3()?;
    Ok(x.reshape((r, l, heads, h / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (r, heads, l, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((r, l, heads * dh))?)
}

/// Scaled dot-product attention with multiplicative masking.
///
/// `q`: `[R, L, H]`, `k`/`v`: `[R, S, H]`, `mask`: broadcastable to
/// `[R, heads, L, S]`. Returns the merged output and the weights.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (_, _, h) = q.dims3()?;
    if h % heads != 0 {
        return Err(contract(format!("width {h} not divisible by {heads} heads")));
    }
    let scale = 1.0 / ((h / heads) as f64).sqrt();
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
    let weights = masked_softmax(&scores, mask)?;
    let out = weights.matmul(&vh)?;
    Ok((merge_heads(&out)?, weights))
}

pub fn bool_tensor(values: &[bool], shape: &[usize]) -> Result<Tensor> {
    let data: Vec<f64> = values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}
