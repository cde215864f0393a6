//! Forward policy, backward policy and log-partition under trajectory balance.
//!
//! One MLP trunk (two leaky-ReLU hidden layers) feeds a single output layer
//! whose first `num_actions` columns are forward logits and whose remaining
//! `num_actions - 1` columns are backward logits over parent actions. The
//! output layer starts at zero so both policies are uniform at
//! initialization. `log Z` is a separate scalar.

use std::collections::HashMap;
use std::fs::File;
use std::hash::Hash;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Graph, Tensor, Var, LOG_PROB_FLOOR};
use crate::env::Environment;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub leaky_slope: f64,
    /// Fix `P_B` to the uniform distribution over parents instead of learning it.
    pub uniform_backward: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            leaky_slope: 0.01,
            uniform_backward: false,
        }
    }
}

const NAMES: [&str; 6] = [
    "trunk.0.weight",
    "trunk.0.bias",
    "trunk.1.weight",
    "trunk.1.bias",
    "head.weight",
    "head.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    config: PolicyConfig,
    input_dim: usize,
    num_actions: usize,
    /// Trunk and head tensors in [`NAMES`] order; weights are `[fan_in, fan_out]`.
    layers: Vec<Tensor>,
    log_z: Tensor,
}

impl PolicyModel {
    pub fn new<E: Environment>(env: &E, config: PolicyConfig, seed: u64) -> Self {
        Self::with_dims(env.encoding_len(), env.num_actions(), config, seed)
    }

    pub fn with_dims(input_dim: usize, num_actions: usize, config: PolicyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let out = 2 * num_actions - 1;
        let mut uniform = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::new(&[fan_in, fan_out], data).expect("shape")
        };
        let layers = vec![
            uniform(input_dim, h),
            Tensor::zeros(&[h]),
            uniform(h, h),
            Tensor::zeros(&[h]),
            Tensor::zeros(&[h, out]),
            Tensor::zeros(&[out]),
        ];
        Self {
            config,
            input_dim,
            num_actions,
            layers,
            log_z: Tensor::scalar(0.0),
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn log_total_flow(&self) -> f64 {
        self.log_z.item()
    }

    pub fn set_log_total_flow(&mut self, v: f64) {
        self.log_z = Tensor::scalar(v);
    }

    /// Network tensors, excluding `log Z`.
    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Tensor] {
        &mut self.layers
    }

    pub fn log_z_mut(&mut self) -> &mut Tensor {
        &mut self.log_z
    }

    pub fn bind(&self, g: &mut Graph) -> BoundPolicy {
        let layers = self.layers.iter().map(|t| g.param(t.clone())).collect();
        let log_z = g.param(self.log_z.clone());
        BoundPolicy {
            layers,
            log_z,
            slope: self.config.leaky_slope,
        }
    }

    fn forward_width(&self) -> usize {
        self.num_actions
    }

    fn row_width(&self) -> usize {
        2 * self.num_actions - 1
    }

    /// Raw logits for `n` encoded rows, without recording a graph.
    pub fn logits(&self, inputs: &[f64], n: usize) -> Vec<f64> {
        let h = self.config.hidden;
        let slope = self.config.leaky_slope;
        let dense = |x: &[f64], w: &Tensor, b: &Tensor, fan_in: usize, fan_out: usize| {
            let mut out = vec![0.0; n * fan_out];
            gemm(n, fan_in, fan_out, x, (fan_in, 1), w.data(), (fan_out, 1), &mut out, false);
            for row in out.chunks_mut(fan_out) {
                for (o, bi) in row.iter_mut().zip(b.data()) {
                    *o += bi;
                }
            }
            out
        };
        let leaky = |v: &mut Vec<f64>| {
            for x in v.iter_mut() {
                if *x <= 0.0 {
                    *x *= slope;
                }
            }
        };
        let mut a = dense(inputs, &self.layers[0], &self.layers[1], self.input_dim, h);
        leaky(&mut a);
        let mut b = dense(&a, &self.layers[2], &self.layers[3], h, h);
        leaky(&mut b);
        dense(&b, &self.layers[4], &self.layers[5], h, self.row_width())
    }

    /// `log P_F(. | s)` over all actions, `-inf` where masked.
    pub fn forward_policy<E: Environment>(&self, env: &E, s: &E::State) -> Result<Vec<f64>> {
        Ok(self
            .forward_policy_batch(env, std::slice::from_ref(s))?
            .pop()
            .expect("one row"))
    }

    /// Forward log-probabilities for many non-terminal states at once.
    pub fn forward_policy_batch<E: Environment>(
        &self,
        env: &E,
        states: &[E::State],
    ) -> Result<Vec<Vec<f64>>> {
        let masks = states
            .iter()
            .map(|s| env.valid_actions(s))
            .collect::<Result<Vec<_>, _>>()?;
        let logits = self.logits(&encode_rows(env, states), states.len());
        let width = self.row_width();
        let mut out = Vec::with_capacity(states.len());
        for (row, mask) in logits.chunks(width).zip(&masks) {
            let f = &row[..self.forward_width()];
            out.push(crate::autodiff::masked_log_softmax(f, mask)?);
        }
        Ok(out)
    }

    /// `log P_B(parent | s)` aligned with `env.parents(s)`.
    pub fn backward_policy<E: Environment>(&self, env: &E, s: &E::State) -> Result<Vec<f64>> {
        Ok(self
            .backward_policy_batch(env, std::slice::from_ref(s))?
            .pop()
            .expect("one row"))
    }

    /// Backward log-probabilities for many states other than `s_0`.
    pub fn backward_policy_batch<E: Environment>(
        &self,
        env: &E,
        states: &[E::State],
    ) -> Result<Vec<Vec<f64>>> {
        let parents = states
            .iter()
            .map(|s| env.parents(s))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out: Vec<Vec<f64>> = parents
            .iter()
            .map(|p| vec![-(p.len() as f64).ln(); p.len()])
            .collect();
        if self.config.uniform_backward {
            return Ok(out);
        }
        let learned: Vec<usize> = (0..states.len()).filter(|&i| !env.is_terminal(&states[i])).collect();
        if learned.is_empty() {
            return Ok(out);
        }
        let rows: Vec<E::State> = learned.iter().map(|&i| states[i].clone()).collect();
        let logits = self.logits(&encode_rows(env, &rows), rows.len());
        for (&i, row) in learned.iter().zip(logits.chunks(self.row_width())) {
            let mut mask = vec![false; self.num_actions - 1];
            for (_, a) in &parents[i] {
                mask[*a] = true;
            }
            let logp = crate::autodiff::masked_log_softmax(&row[self.forward_width()..], &mask)?;
            out[i] = parents[i].iter().map(|(_, a)| logp[*a]).collect();
        }
        Ok(out)
    }

    /// Saves every tensor bit-exactly. See the crate README for the layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let meta = Tensor::new(
            &[5],
            vec![
                self.input_dim as f64,
                self.num_actions as f64,
                self.config.hidden as f64,
                self.config.leaky_slope,
                if self.config.uniform_backward { 1.0 } else { 0.0 },
            ],
        )?;
        let mut entries: Vec<(&str, &Tensor)> = vec![("meta", &meta)];
        entries.extend(NAMES.iter().copied().zip(self.layers.iter()));
        entries.push(("log_z", &self.log_z));
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let meta = take("meta")?;
        let m = meta.data();
        if m.len() != 5 {
            return Err(Error::Checkpoint("malformed meta tensor".into()));
        }
        let config = PolicyConfig {
            hidden: m[2] as usize,
            leaky_slope: m[3],
            uniform_backward: m[4] != 0.0,
        };
        let layers = NAMES.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
        let model = Self {
            input_dim: m[0] as usize,
            num_actions: m[1] as usize,
            config,
            layers,
            log_z: take("log_z")?,
        };
        let reference = Self::with_dims(model.input_dim, model.num_actions, model.config.clone(), 0);
        for (a, b) in model.layers.iter().zip(&reference.layers) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor shape {:?} does not match architecture {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GFNCKPT1";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn encode_rows<E: Environment>(env: &E, states: &[E::State]) -> Vec<f64> {
    let w = env.encoding_len();
    let mut buf = vec![0.0; w * states.len()];
    for (s, row) in states.iter().zip(buf.chunks_mut(w)) {
        env.encode(s, row);
    }
    buf
}

/// A [`PolicyModel`] registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundPolicy {
    layers: Vec<Var>,
    log_z: Var,
    slope: f64,
}

impl BoundPolicy {
    /// Parameter handles in the same order as [`PolicyModel::layers`], then `log Z`.
    pub fn params(&self) -> Vec<Var> {
        let mut v = self.layers.clone();
        v.push(self.log_z);
        v
    }

    pub fn log_z(&self) -> Var {
        self.log_z
    }

    pub fn logits(&self, g: &mut Graph, inputs: Var) -> Var {
        let l = &self.layers;
        let h = g.matmul(inputs, l[0]);
        let h = g.add_bias(h, l[1]);
        let h = g.leaky_relu(h, self.slope);
        let h = g.matmul(h, l[2]);
        let h = g.add_bias(h, l[3]);
        let h = g.leaky_relu(h, self.slope);
        let o = g.matmul(h, l[4]);
        g.add_bias(o, l[5])
    }
}

/// Batched, differentiable policy evaluation over a fixed set of
/// non-terminal states.
///
/// Terminal states are handled analytically: `P_F(s_f | x^T) = 1` and
/// `P_B(x | x^T) = 1`. All log-probabilities handed out are clamped at
/// [`LOG_PROB_FLOOR`].
pub struct PolicyEval<S> {
    rows: HashMap<S, usize>,
    forward: Var,
    backward: Option<Var>,
    width: usize,
    num_actions: usize,
    log_z: Var,
    cache: HashMap<(usize, usize, bool), (Var, Var)>,
}

impl<S: Clone + Eq + Hash + std::fmt::Debug> PolicyEval<S> {
    pub fn new<E: Environment<State = S>>(
        g: &mut Graph,
        model: &PolicyModel,
        bound: &BoundPolicy,
        env: &E,
        states: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let mut rows: HashMap<S, usize> = HashMap::new();
        let mut order: Vec<S> = Vec::new();
        for s in states {
            if env.is_terminal(&s) || env.is_final(&s) {
                continue;
            }
            if !rows.contains_key(&s) {
                rows.insert(s.clone(), order.len());
                order.push(s);
            }
        }
        let width = model.row_width();
        let na = model.num_actions;
        if order.is_empty() {
            let log_z = bound.log_z;
            let dummy = g.scalar(0.0);
            return Ok(Self {
                rows,
                forward: dummy,
                backward: None,
                width,
                num_actions: na,
                log_z,
                cache: HashMap::new(),
            });
        }
        let n = order.len();
        let input = g.constant(Tensor::new(&[n, env.encoding_len()], encode_rows(env, &order))?);
        let logits = bound.logits(g, input);

        let mut fmask = vec![false; n * width];
        let mut bmask = vec![false; n * width];
        for (r, s) in order.iter().enumerate() {
            let valid = env.valid_actions(s)?;
            fmask[r * width..r * width + na].copy_from_slice(&valid);
            let base = r * width + na;
            if s == &env.initial_state() {
                // unused row; any single entry keeps the softmax well defined
                bmask[base] = true;
            } else {
                for (_, a) in env.parents(s)? {
                    bmask[base + a] = true;
                }
            }
        }
        let forward = g.masked_log_softmax(logits, &fmask)?;
        let backward = if model.config.uniform_backward {
            None
        } else {
            Some(g.masked_log_softmax(logits, &bmask)?)
        };
        Ok(Self {
            rows,
            forward,
            backward,
            width,
            num_actions: na,
            log_z: bound.log_z,
            cache: HashMap::new(),
        })
    }

    pub fn log_z(&self) -> Var {
        self.log_z
    }

    pub fn contains(&self, s: &S) -> bool {
        self.rows.contains_key(s)
    }

    fn row(&self, s: &S) -> Result<usize> {
        self.rows
            .get(s)
            .copied()
            .ok_or_else(|| Error::NotEvaluated(format!("{s:?}")))
    }

    fn picks(&mut self, g: &mut Graph, row: usize, col: usize, backward: bool) -> (Var, Var) {
        if let Some(&v) = self.cache.get(&(row, col, backward)) {
            return v;
        }
        let src = if backward {
            self.backward.expect("learned backward head")
        } else {
            self.forward
        };
        let raw = g.pick(src, row * self.width + col);
        let log_p = g.clamp_min(raw, LOG_PROB_FLOOR);
        let p = g.exp(raw);
        self.cache.insert((row, col, backward), (log_p, p));
        (log_p, p)
    }

    /// Clamped `log P_F(step(s, action) | s)`.
    pub fn log_pf<E: Environment<State = S>>(
        &mut self,
        g: &mut Graph,
        env: &E,
        s: &S,
        action: usize,
    ) -> Result<Var> {
        Ok(self.forward_pick(g, env, s, action)?.0)
    }

    /// `P_F(step(s, action) | s)` (zero for masked actions).
    pub fn pf<E: Environment<State = S>>(
        &mut self,
        g: &mut Graph,
        env: &E,
        s: &S,
        action: usize,
    ) -> Result<Var> {
        Ok(self.forward_pick(g, env, s, action)?.1)
    }

    fn forward_pick<E: Environment<State = S>>(
        &mut self,
        g: &mut Graph,
        env: &E,
        s: &S,
        action: usize,
    ) -> Result<(Var, Var)> {
        if env.is_terminal(s) {
            return Ok((g.scalar(0.0), g.scalar(1.0)));
        }
        let row = self.row(s)?;
        Ok(self.picks(g, row, action, false))
    }

    /// Clamped `log P_B(parent | s)` where `parent_action` led from the parent to `s`.
    pub fn log_pb<E: Environment<State = S>>(
        &mut self,
        g: &mut Graph,
        env: &E,
        s: &S,
        parent_action: usize,
    ) -> Result<Var> {
        if env.is_terminal(s) {
            return Ok(g.scalar(0.0));
        }
        if self.backward.is_none() {
            let k = env.parents(s)?.len();
            return Ok(g.scalar(-(k as f64).ln()));
        }
        let row = self.row(s)?;
        Ok(self.picks(g, row, self.num_actions + parent_action, true).0)
    }

    /// Forward log-probability values of `s` over all actions (`-inf` masked).
    pub fn forward_values(&self, g: &Graph, s: &S) -> Result<Vec<f64>> {
        let row = self.row(s)?;
        let data = g.value(self.forward).data();
        Ok(data[row * self.width..row * self.width + self.num_actions].to_vec())
    }
}
