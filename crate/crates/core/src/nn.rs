//! Parameters, layers and the Adam optimizer.
//!
//! Parameters live outside the autodiff tape in a [`ParamStore`]; every
//! forward pass links them in as leaves via [`crate::autograd::Graph::param`].
//! Construction order is deterministic, so a fixed seed gives identical
//! initial parameters across runs.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Arr, Graph, Var};

/// Deterministic RNG used for all parameter initialization.
pub type InitRng = ChaCha8Rng;

/// Seeded RNG constructor.
pub fn init_rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct ParamData {
    name: String,
    value: Arr,
    grad: Arr,
    trainable: bool,
}

/// Shared handle to one named tensor (weight, bias or buffer).
#[derive(Clone)]
pub struct Param(Rc<RefCell<ParamData>>);

impl Param {
    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn value(&self) -> Ref<'_, Arr> {
        Ref::map(self.0.borrow(), |d| &d.value)
    }

    pub fn set_value(&self, v: Arr) {
        self.0.borrow_mut().value = v;
    }

    pub fn grad(&self) -> Ref<'_, Arr> {
        Ref::map(self.0.borrow(), |d| &d.grad)
    }

    pub fn zero_grad(&self) {
        let mut d = self.0.borrow_mut();
        d.grad.fill(0.0);
    }

    pub fn trainable(&self) -> bool {
        self.0.borrow().trainable
    }

    pub(crate) fn accumulate_grad(&self, g: &Arr) {
        let mut d = self.0.borrow_mut();
        d.grad += g;
    }
}

/// Ordered, named collection of parameters for one model or model group.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr, trainable: bool) -> Param {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let p = Param(Rc::new(RefCell::new(ParamData {
            name: name.to_string(),
            grad: ArrayD::zeros(value.raw_dim()),
            value,
            trainable,
        })));
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable())
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn total_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value().len()).sum()
    }
}

/// Gaussian sample via Box-Muller on the given RNG.
fn normal(rng: &mut InitRng) -> f32 {
    loop {
        let u1 = (rng.next_u32() as f64 + 1.0) / (u32::MAX as f64 + 2.0);
        let u2 = rng.next_u32() as f64 / (u32::MAX as f64 + 1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.is_finite() {
            return z as f32;
        }
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut InitRng) -> Arr {
    let std = (2.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| normal(rng) * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// 2-D convolution layer.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = store.add(
            &format!("{name}/w"),
            kaiming(&[out_c, in_c, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = bias.then(|| store.add(&format!("{name}/b"), ArrayD::zeros(IxDyn(&[out_c])), true));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let w = g.param(&self.weight);
        let y = x.conv2d(&w, self.stride, self.pad, self.dilation);
        match &self.bias {
            Some(b) => y.add_channel_bias(&g.param(b)),
            None => y,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }
}

/// Batch normalization with running statistics.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(&format!("{name}/gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0), true),
            beta: store.add(&format!("{name}/beta"), ArrayD::zeros(IxDyn(&[channels])), true),
            running_mean: store.add(&format!("{name}/running_mean"), ArrayD::zeros(IxDyn(&[channels])), false),
            running_var: store.add(&format!("{name}/running_var"), ArrayD::from_elem(IxDyn(&[channels]), 1.0), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var, train: bool) -> Var {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let c = self.gamma.value().len();
        if train {
            let v = x.value();
            let m = (v.shape()[0] * v.shape()[2] * v.shape()[3]) as f32;
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ci in 0..c {
                let chan = v.slice(ndarray::s![.., ci, .., ..]);
                let mu = chan.sum() / m;
                mean[ci] = mu;
                var[ci] = chan.mapv(|x| (x - mu) * (x - mu)).sum() / m;
            }
            {
                let mut rm = self.running_mean.value().clone();
                let mut rv = self.running_var.value().clone();
                for ci in 0..c {
                    rm[ci] = (1.0 - self.momentum) * rm[ci] + self.momentum * mean[ci];
                    rv[ci] = (1.0 - self.momentum) * rv[ci] + self.momentum * var[ci];
                }
                self.running_mean.set_value(rm);
                self.running_var.set_value(rv);
            }
            x.batch_norm(&gamma, &beta, &mean, &var, true, self.eps)
        } else {
            let mean: Vec<f32> = self.running_mean.value().iter().copied().collect();
            let var: Vec<f32> = self.running_var.value().iter().copied().collect();
            x.batch_norm(&gamma, &beta, &mean, &var, false, self.eps)
        }
    }
}

/// Fully-connected layer over `(N, in)` matrices.
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_d: usize,
        out_d: usize,
        bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        Linear {
            weight: store.add(&format!("{name}/w"), kaiming(&[in_d, out_d], in_d, rng), true),
            bias: bias.then(|| store.add(&format!("{name}/b"), ArrayD::zeros(IxDyn(&[out_d])), true)),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let w = g.param(&self.weight);
        let y = x.matmul(&w);
        match &self.bias {
            Some(b) => y.add_row_broadcast(&g.param(b)),
            None => y,
        }
    }
}

/// Convolutional LSTM cell: gates from a 3x3 conv over `[x, h]`.
pub struct ConvLstmCell {
    gates: Conv2d,
    pub hidden_channels: usize,
}

impl ConvLstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        hidden_c: usize,
        rng: &mut InitRng,
    ) -> Self {
        ConvLstmCell {
            gates: Conv2d::new(
                store,
                &format!("{name}/gates"),
                in_c + hidden_c,
                4 * hidden_c,
                3,
                1,
                1,
                1,
                true,
                rng,
            ),
            hidden_channels: hidden_c,
        }
    }

    /// One step; `state` is `(h, c)` from the previous iteration.
    pub fn forward(&self, g: &Graph, x: &Var, state: Option<(Var, Var)>) -> (Var, Var) {
        let hc = self.hidden_channels;
        let (h_prev, c_prev) = match state {
            Some(s) => s,
            None => {
                let xs = x.shape();
                let zero = g.constant(ArrayD::zeros(IxDyn(&[xs[0], hc, xs[2], xs[3]])));
                (zero.clone(), zero)
            }
        };
        let stacked = Var::concat_channels(&[x.clone(), h_prev]);
        let gates = self.gates.forward(g, &stacked);
        let i = gates.narrow_channels(0, hc).sigmoid();
        let f = gates.narrow_channels(hc, hc).sigmoid();
        let o = gates.narrow_channels(2 * hc, hc).sigmoid();
        let cand = gates.narrow_channels(3 * hc, hc).tanh();
        let c_new = f.mul(&c_prev).add(&i.mul(&cand));
        let h_new = o.mul(&c_new.tanh());
        (h_new, c_new)
    }
}

/// Adam optimizer over one or more parameter stores.
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: HashMap<String, (Arr, Arr)>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a Param>, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            if !p.trainable() {
                continue;
            }
            let g = p.grad().clone();
            let (m, v) = self
                .moments
                .entry(p.name())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            m.zip_mut_with(&g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(&g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let mut new = p.value().clone();
            ndarray::Zip::from(&mut new)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + self.eps);
                });
            p.set_value(new);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Internal state as named tensors, for checkpointing.
    pub fn export_state(&self) -> (u64, Vec<(String, Arr, Arr)>) {
        let mut entries: Vec<(String, Arr, Arr)> = self
            .moments
            .iter()
            .map(|(k, (m, v))| (k.clone(), m.clone(), v.clone()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        (self.step, entries)
    }

    pub fn import_state(&mut self, step: u64, entries: Vec<(String, Arr, Arr)>) {
        self.step = step;
        self.moments = entries.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}
