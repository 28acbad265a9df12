use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Result};
use crate::ssm::softplus_inverse;
use crate::tensor::{Tape, Tensor, Var};

/// Named parameters in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<Bound<'t>> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { Ok(tape.constant(v.clone())) })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound { tape, vars, index: self.index.clone() })
    }

    /// Uses `vars` (in store order) as the parameters, e.g. leaves created by
    /// a gradient checker.
    pub fn wrap<'t>(&self, vars: &[Var<'t>]) -> Result<Bound<'t>> {
        let bad = || ModelError::Config(format!("expected {} parameter tensors with matching shapes", self.len()));
        if vars.len() != self.len() || vars.iter().zip(&self.values).any(|(v, t)| v.shape() != t.shape()) {
            return Err(bad());
        }
        let tape = vars.first().ok_or_else(bad)?.tape();
        Ok(Bound { tape, vars: vars.to_vec(), index: self.index.clone() })
    }

    /// Values in store order.
    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
}

/// Parameters placed on a tape, in store order.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> &Var<'t> {
        &self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffer {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
    bn: Vec<BnBuffer>,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let t = Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(-bound..=bound));
        self.store.insert(name, t);
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let d = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape.to_vec(), |_| d.sample(&mut self.rng));
        self.store.insert(name, t);
    }

    fn fixed(&mut self, name: String, t: Tensor) {
        self.store.insert(name, t);
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = (cin * k * k) as f64;
        self.normal(format!("{name}.conv.w"), &[cout, cin, k, k], (2.0 / fan_in).sqrt());
        self.fixed(format!("{name}.conv.b"), Tensor::zeros([cout]));
        self.fixed(format!("{name}.bn.gamma"), Tensor::ones([cout]));
        self.fixed(format!("{name}.bn.beta"), Tensor::zeros([cout]));
        self.bn.push(BnBuffer { name: format!("{name}.bn"), mean: vec![0.0; cout], var: vec![1.0; cout] });
    }

    fn linear(&mut self, w: String, b: String, din: usize, dout: usize) {
        let bound = 1.0 / (din as f64).sqrt();
        self.uniform(w, &[din, dout], bound);
        self.uniform(b, &[1, dout], bound);
    }

    fn norm(&mut self, name: String, c: usize) {
        self.fixed(format!("{name}.gamma"), Tensor::ones([c]));
        self.fixed(format!("{name}.beta"), Tensor::zeros([c]));
    }
}

pub(super) fn init(cfg: &ModelConfig, seed: u64) -> (ParamStore, Vec<BnBuffer>) {
    let mut it = Init { rng: ChaCha8Rng::seed_from_u64(seed), store: ParamStore::default(), bn: Vec::new() };
    let (c, di, n, k) = (cfg.channels, cfg.inner(), cfg.state_size, cfg.conv1d_kernel);
    it.conv("stem1_raw", c, 3, 7);
    it.conv("stem1_diff", c, 12, 7);
    it.conv("stem2", c, c, 7);
    it.conv("stem3", c, c, 5);
    for b in 0..cfg.depth {
        let m = format!("block{b}.mtc");
        it.linear(format!("{m}.in_w"), format!("{m}.in_b"), c, di);
        it.linear(format!("{m}.gate_w"), format!("{m}.gate_b"), c, di);
        it.uniform(format!("{m}.conv_w"), &[di, k], 1.0 / (k as f64).sqrt());
        it.uniform(format!("{m}.conv_b"), &[di], 1.0 / (k as f64).sqrt());
        it.uniform(format!("{m}.dt_w"), &[di, di], 1.0 / di as f64);
        // time steps start log-uniform in [1e-3, 1e-1]
        let dt: Vec<f64> = (0..di)
            .map(|_| {
                let u: f64 = it.rng.random_range(0.0..1.0);
                softplus_inverse((1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp())
            })
            .collect();
        it.fixed(format!("{m}.dt_b"), Tensor::new([1, di], dt).expect("shape"));
        it.uniform(format!("{m}.b_w"), &[di, n], 1.0 / (di as f64).sqrt());
        it.uniform(format!("{m}.c_w"), &[di, n], 1.0 / (di as f64).sqrt());
        it.fixed(format!("{m}.a_log"), Tensor::from_fn([di, n], |i| ((i % n + 1) as f64).ln()));
        it.fixed(format!("{m}.d"), Tensor::ones([di]));
        it.linear(format!("{m}.out_w"), format!("{m}.out_b"), di, c);
        it.norm(format!("block{b}.norm1"), c);

        let f = format!("block{b}.ffn");
        it.linear(format!("{f}.up_w"), format!("{f}.up_b"), c, di);
        let s = 1.0 / di as f64;
        it.uniform(format!("{f}.w_re"), &[di, di], s);
        it.uniform(format!("{f}.w_im"), &[di, di], s);
        it.uniform(format!("{f}.b_re"), &[di], s);
        it.uniform(format!("{f}.b_im"), &[di], s);
        it.linear(format!("{f}.down_w"), format!("{f}.down_b"), di, c);
        it.norm(format!("block{b}.norm2"), c);
    }
    it.linear("head.w".into(), "head.b".into(), c, 1);
    (it.store, it.bn)
}
