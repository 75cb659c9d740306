//! Parameter storage, layers and the optimizer shared by all networks.
//!
//! Networks keep their weights in a [`ParamSet`]; a training step inserts the
//! parameters into a fresh [`Graph`] as leaves, runs the forward pass, calls
//! `backward` and hands the collected gradients to [`Adam`]. Inference uses
//! the same forward code with non-trainable leaves.

use crate::graph::{Graph, Var};
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Negative slope used by every leaky rectifier in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter collection with stable ordering.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Insert every parameter into `g` in index order.
    pub fn insert_into(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Apply collected gradients: caller guarantees index alignment.
    pub fn grads_from(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.params)
            .map(|(v, p)| match g.grad(*v) {
                Some(t) => t.clone(),
                None => Tensor::zeros(p.value.shape()),
            })
            .collect()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Raw little-endian serialization of all parameter values, in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Load values from [`ParamSet::to_bytes`] output; shapes must already match.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> crate::Result<()> {
        let want: usize = self.params.iter().map(|p| p.value.numel() * 8).sum();
        if bytes.len() != want {
            return Err(crate::Error::validation(format!(
                "parameter blob is {} bytes, expected {want}",
                bytes.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        Ok(())
    }
}

pub fn hex_digest(h: Sha256) -> String {
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// He-style normal init scaled for leaky rectifiers.
pub fn init_weight(rng: &mut SeedRng, shape: &[usize], fan_in: usize) -> Tensor {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Fully connected layer `y = x·W^T + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut SeedRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::with_bias_init(ps, rng, name, in_dim, out_dim, 0.0)
    }

    pub fn with_bias_init(
        ps: &mut ParamSet,
        rng: &mut SeedRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_value: f64,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_weight(rng, &[out_dim, in_dim], in_dim),
        );
        let b = ps.add(
            format!("{name}.b"),
            Tensor::from_vec(&[out_dim], vec![bias_value; out_dim]),
        );
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, pv: &[Var], x: Var) -> Var {
        let y = g.matmul_nt(x, pv[self.w]);
        g.add_bias_rows(y, pv[self.b])
    }
}

/// 2D convolution layer; weight `[oc, ic*k*k]`, bias `[oc]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut SeedRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = ps.add(
            format!("{name}.w"),
            init_weight(rng, &[out_ch, fan_in], fan_in),
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Conv {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, pv: &[Var], x: Var) -> Var {
        let y = g.conv2d(x, pv[self.w], self.kernel, self.stride, self.pad);
        g.add_bias_channels(y, pv[self.b])
    }
}

/// Adam with bias correction; state follows the parameter order of one net.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            ..Adam::new(lr)
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), ps.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = ps.get_mut(i).value.data_mut();
            for j in 0..grad.numel() {
                let gj = grad.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
