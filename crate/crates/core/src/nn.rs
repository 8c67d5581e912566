//! Named parameters and the small layers everything else is built from.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// All trainable parameters of a model, keyed by dotted path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

/// Forward-pass context: a tape plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: HashMap::new(),
        }
    }

    /// Uses pre-created leaves for the named parameters instead of binding
    /// fresh ones from the store.
    pub fn with_bindings(
        tape: &'a mut Tape,
        store: &'a ParamStore,
        bound: HashMap<String, Var>,
    ) -> Self {
        Self { tape, store, bound }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .clone();
        let v = self.tape.leaf(value, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn into_bindings(self) -> HashMap<String, Var> {
        self.bound
    }
}

/// Reads the gradients of bound parameters after `tape.backward`.
pub fn collect_grads(tape: &Tape, bindings: &HashMap<String, Var>) -> BTreeMap<String, Vec<f64>> {
    bindings
        .iter()
        .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.to_vec())))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from U(-1/sqrt(in), 1/sqrt(in)).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = format!("{name}.weight");
        store.insert(&weight, uniform(rng, &[in_dim, out_dim], bound))?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, uniform(rng, &[out_dim], bound))?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let y = ctx.tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = ctx.param(b)?;
                ctx.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub shift: String,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = format!("{name}.gain");
        let shift = format!("{name}.shift");
        store.insert(&gain, Tensor::full(&[dim], 1.0))?;
        store.insert(&shift, Tensor::zeros(&[dim]))?;
        Ok(Self { gain, shift })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = ctx.tape.layer_norm(x, LN_EPS)?;
        let g = ctx.param(&self.gain)?;
        let s = ctx.param(&self.shift)?;
        let y = ctx.tape.mul_bias(n, g)?;
        ctx.tape.add_bias(y, s)
    }
}

/// Two-layer perceptron `fc2(act(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
    ) -> Result<Self> {
        let (i, h, o) = dims;
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), i, h, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), h, o, true)?,
            act,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = self.act.apply(ctx.tape, h)?;
        self.fc2.forward(ctx, h)
    }
}

/// Scaled dot-product attention with separate query/key/value/output maps.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: {heads} heads do not divide width {dim}"
            )));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (n, l) = (s[0], s[1]);
        let d = self.dim / self.heads;
        let x = tape.reshape(x, &[n, l, self.heads, d])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[n * self.heads, l, d])
    }

    /// `query: [n, lq, dim]`, `context: [n, lk, dim]` -> `[n, lq, dim]`.
    pub fn forward(&self, ctx: &mut Ctx, query: Var, context: Var) -> Result<Var> {
        let sq = ctx.tape.shape(query).to_vec();
        let sk = ctx.tape.shape(context).to_vec();
        if sq.len() != 3
            || sk.len() != 3
            || sq[0] != sk[0]
            || sq[2] != self.dim
            || sk[2] != self.dim
        {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (n, lq) = (sq[0], sq[1]);
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, context)?;
        let v = self.v.forward(ctx, context)?;
        let q = self.split_heads(ctx.tape, q)?;
        let k = self.split_heads(ctx.tape, k)?;
        let v = self.split_heads(ctx.tape, v)?;
        let d = self.dim / self.heads;
        let scores = ctx.tape.bmm(q, k, true)?;
        let scores = ctx.tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let att = ctx.tape.softmax(scores)?;
        let out = ctx.tape.bmm(att, v, false)?;
        let out = ctx.tape.reshape(out, &[n, self.heads, lq, d])?;
        let out = ctx.tape.permute(out, &[0, 2, 1, 3])?;
        let out = ctx.tape.reshape(out, &[n, lq, self.dim])?;
        self.o.forward(ctx, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_of_zero_is_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2, true).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let x = ctx.tape.constant(Tensor::zeros(&[4, 3]));
        let y = lin.forward(&mut ctx, x).unwrap();
        let bias = store.get("l.bias").unwrap().data().to_vec();
        for row in tape.data(y).chunks(2) {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn duplicate_parameter_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, &mut rng, "a", 10, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_over_single_key_returns_value_path() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let q = ctx
            .tape
            .constant(Tensor::from_fn(&[1, 5, 8], |i| (i as f64 * 0.37).sin()));
        let kv = ctx
            .tape
            .constant(Tensor::from_fn(&[1, 1, 8], |i| (i as f64 * 0.11).cos()));
        let out = mha.forward(&mut ctx, q, kv).unwrap();
        let v = mha.v.forward(&mut ctx, kv).unwrap();
        let want = mha.o.forward(&mut ctx, v).unwrap();
        let want = tape.data(want).to_vec();
        for row in tape.data(out).chunks(8) {
            for (a, b) in row.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
