//! Named parameter store and the small layer vocabulary shared by the
//! trainable networks (adapter, flow field, eval encoders, projections).

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::num::tape::{Tape, Var};
use crate::num::tensor::Tensor;

/// Parameters keyed by dotted path, e.g. `"blk0.attn.wq"`. BTreeMap so
/// iteration order (checkpoints, optimizer sweeps, gradchecks) is stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Params { map }
    }

    /// Xavier-uniform init for a linear layer: `name.w` (fan_in x fan_out)
    /// drawn from U[-a, a] with a = sqrt(6/(fan_in+fan_out)), `name.b`
    /// (1 x fan_out) zeros.
    pub fn init_linear(&mut self, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{name}.w"), xavier_uniform(rng, fan_in, fan_out));
        self.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
    }

    /// Embedding table `name` (rows x dim), Xavier-uniform like any other
    /// weight matrix.
    pub fn init_table(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, dim: usize) {
        self.insert(name, xavier_uniform(rng, rows, dim));
    }

    /// Layer norm scale/shift: `name.g` ones, `name.o` zeros.
    pub fn init_layernorm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.g"), Tensor::full(1, dim, 1.0));
        self.insert(format!("{name}.o"), Tensor::zeros(1, dim));
    }
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    use rand::Rng;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(fan_in, fan_out);
    for v in t.data.iter_mut() {
        *v = rng.gen_range(-a..=a);
    }
    t
}

/// Binds parameters into a tape as leaves, once each, and maps gradients
/// back to names after `backward`.
pub struct Binding<'p> {
    params: &'p Params,
    vars: BTreeMap<String, Var>,
}

impl<'p> Binding<'p> {
    pub fn new(params: &'p Params) -> Self {
        Binding { params, vars: BTreeMap::new() }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = tape.leaf(self.params.get(name)?.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every bound parameter. Call after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(n, &v)| (n.clone(), tape.grad(v))).collect()
    }
}

/// `x @ W + b` using `name.w` / `name.b`.
pub fn linear(tape: &mut Tape, bind: &mut Binding, name: &str, x: Var) -> Result<Var> {
    let w = bind.var(tape, &format!("{name}.w"))?;
    let b = bind.var(tape, &format!("{name}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Layer norm using `name.g` / `name.o`.
pub fn layernorm(tape: &mut Tape, bind: &mut Binding, name: &str, x: Var) -> Result<Var> {
    let g = bind.var(tape, &format!("{name}.g"))?;
    let o = bind.var(tape, &format!("{name}.o"))?;
    tape.layernorm(x, g, o)
}

/// Multi-head scaled dot-product attention. Queries come from `q_in`
/// (n_q x dim), keys and values from `kv_in` (n_kv x dim). Weights live
/// under `name.{wq,wk,wv,wo}`.
pub fn attention(
    tape: &mut Tape,
    bind: &mut Binding,
    name: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<Var> {
    let dim = tape.value(q_in).cols;
    if dim % heads != 0 {
        return Err(Error::Config(format!("attention dim {dim} not divisible by {heads} heads")));
    }
    let hd = dim / heads;
    let q = linear(tape, bind, &format!("{name}.wq"), q_in)?;
    let k = linear(tape, bind, &format!("{name}.wk"), kv_in)?;
    let v = linear(tape, bind, &format!("{name}.wv"), kv_in)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let mut merged = head_outs[0];
    for &h in &head_outs[1..] {
        merged = tape.concat_cols(merged, h)?;
    }
    linear(tape, bind, &format!("{name}.wo"), merged)
}

pub fn init_attention(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, dim: usize) {
    for part in ["wq", "wk", "wv", "wo"] {
        params.init_linear(rng, &format!("{name}.{part}"), dim, dim);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;

    #[test]
    fn binding_reuses_leaf_vars() {
        let mut params = Params::new();
        let mut rng = Seed(1).stream("t");
        params.init_linear(&mut rng, "l", 3, 2);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&params);
        let a = bind.var(&mut tape, "l.w").unwrap();
        let b = bind.var(&mut tape, "l.w").unwrap();
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn linear_layer_shapes() {
        let mut params = Params::new();
        let mut rng = Seed(1).stream("t");
        params.init_linear(&mut rng, "l", 4, 6);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&params);
        let x = tape.leaf(Tensor::zeros(5, 4));
        let y = linear(&mut tape, &mut bind, "l", x).unwrap();
        assert_eq!(tape.value(y).shape(), (5, 6));
    }

    #[test]
    fn attention_requires_divisible_heads() {
        let mut params = Params::new();
        let mut rng = Seed(1).stream("t");
        init_attention(&mut params, &mut rng, "a", 6);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&params);
        let x = tape.leaf(Tensor::zeros(2, 6));
        assert!(attention(&mut tape, &mut bind, "a", x, x, 4).is_err());
        assert!(attention(&mut tape, &mut bind, "a", x, x, 2).is_ok());
    }

    #[test]
    fn scalar_count_sums_all_tensors() {
        let mut params = Params::new();
        let mut rng = Seed(1).stream("t");
        params.init_linear(&mut rng, "l", 3, 2); // 6 + 2
        params.init_layernorm("n", 4); // 4 + 4
        assert_eq!(params.scalar_count(), 16);
    }
}
