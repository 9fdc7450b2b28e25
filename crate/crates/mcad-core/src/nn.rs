//! Parameter storage and the linear-layer building block shared by every
//! network in the pipeline.

use crate::rng::RngStream;
use crate::tensor::{Graph, NodeId, ParamId, Real, Tensor, TensorResult};

/// Owns all trainable tensors of a model, keyed by [`ParamId`] and name.
/// Forward passes bind parameters into a [`Graph`] as leaves; the optimizer
/// writes updated tensors back through [`ParamStore::set`].
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    /// Register a parameter. Names must be unique; they key checkpoints.
    pub fn alloc(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len() as u32);
        self.tensors.push(t);
        self.names.push(name.to_string());
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0 as usize]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| ParamId(i as u32))
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, t: Tensor<T>) {
        assert_eq!(
            self.tensors[id.0 as usize].shape(),
            t.shape(),
            "parameter {} shape changed",
            self.names[id.0 as usize]
        );
        self.tensors[id.0 as usize] = t;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i as u32), self.names[i].as_str(), t))
    }

    /// Bind a parameter into a graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> NodeId {
        g.param(self.get(id).clone().with_grad(), id)
    }

    /// Bind a parameter as a constant (no gradient; used by frozen modules).
    pub fn bind_frozen(&self, g: &mut Graph<T>, id: ParamId) -> NodeId {
        g.constant(self.get(id).clone())
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Uniform { lo: f64, hi: f64 },
    Normal { std: f64 },
    /// `U(+-sqrt(6 / (fan_in + fan_out)))` — linear/softmax stacks.
    XavierUniform,
    /// `U(+-sqrt(6 / fan_in))` — ReLU stacks.
    KaimingUniform,
}

impl Init {
    fn sample<T: Real>(
        self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        stream: &mut RngStream,
    ) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Uniform { lo, hi } => Tensor::rand_uniform(shape, lo, hi, stream),
            Init::Normal { std } => Tensor::randn(shape, std, stream),
            Init::XavierUniform => {
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::rand_uniform(shape, -b, b, stream)
            }
            Init::KaimingUniform => {
                let b = (6.0 / fan_in as f64).sqrt();
                Tensor::rand_uniform(shape, -b, b, stream)
            }
        }
    }
}

/// A dense layer `y = x W + b` applied to the last dimension.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        stream: &mut RngStream,
    ) -> Self {
        let w = init.sample(&[in_dim, out_dim], in_dim, out_dim, stream);
        let wid = ps.alloc(&format!("{name}.w"), w);
        let bid = ps.alloc(&format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear {
            w: wid,
            b: Some(bid),
            in_dim,
            out_dim,
        }
    }

    /// Variant with a custom bias initializer (sine layers want phase spread).
    pub fn with_bias_init<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        w_init: Init,
        b_init: Init,
        stream: &mut RngStream,
    ) -> Self {
        let w = w_init.sample(&[in_dim, out_dim], in_dim, out_dim, stream);
        let b = b_init.sample(&[out_dim], in_dim, out_dim, stream);
        let wid = ps.alloc(&format!("{name}.w"), w);
        let bid = ps.alloc(&format!("{name}.b"), b);
        Linear {
            w: wid,
            b: Some(bid),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        x: NodeId,
    ) -> TensorResult<NodeId> {
        self.forward_opts(ps, g, x, true)
    }

    /// `trainable = false` binds the weights as constants (frozen layer).
    pub fn forward_opts<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        x: NodeId,
        trainable: bool,
    ) -> TensorResult<NodeId> {
        let bind = |ps: &ParamStore<T>, g: &mut Graph<T>, id| {
            if trainable {
                ps.bind(g, id)
            } else {
                ps.bind_frozen(g, id)
            }
        };
        let w = bind(ps, g, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = bind(ps, g, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// LayerNorm with learnable scale and shift over the last dimension.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            scale: ps.alloc(&format!("{name}.scale"), Tensor::full(&[dim], T::one())),
            shift: ps.alloc(&format!("{name}.shift"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        x: NodeId,
    ) -> TensorResult<NodeId> {
        let n = g.layer_norm(x, self.eps)?;
        let s = ps.bind(g, self.scale);
        let scaled = g.mul(n, s)?;
        let b = ps.bind(g, self.shift);
        g.add(scaled, b)
    }
}

/// Repeat a `[B, D]` tensor along a new middle axis to `[B, reps, D]`,
/// expressed as a matmul with a constant ones column so gradients fold back.
pub fn expand_mid<T: Real>(g: &mut Graph<T>, x: NodeId, reps: usize) -> TensorResult<NodeId> {
    let (b, d) = {
        let sh = g.value(x).shape();
        assert_eq!(sh.len(), 2, "expand_mid expects [B, D]");
        (sh[0], sh[1])
    };
    let ones = g.constant(Tensor::full(&[reps, 1], T::one()));
    let x3 = g.reshape(x, &[b, 1, d])?;
    g.matmul(ones, x3)
}
