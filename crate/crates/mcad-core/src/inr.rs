//! Dual-path modulated sine network mapping learnable position embeddings
//! and a class token to per-position query embeddings, plus the decoder
//! that turns queries into per-position Gaussian parameters.
//!
//! Synthesis path: `h_0 = z`, `h_i = alpha_i * sin(W_i h_{i-1} + b_i)`.
//! Modulation path: `alpha_0 = z`,
//! `alpha_i = relu(W_i' [alpha_{i-1}, t_c] + b_i')`, with the class token
//! concatenated at every layer. Both paths start from the same position
//! vector.

use crate::mapper::LEAKY_SLOPE;
use crate::nn::{Init, Linear, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Graph, NodeId, ParamId, Real, Tensor, TensorResult};

/// Length of a position vector. The embedding is free (not tied to grid
/// coordinates); three dims follow the reference architecture.
pub const POS_DIM: usize = 3;

/// Frequency factor folded into the stored sine-layer weights.
pub const OMEGA_0: f64 = 30.0;

/// Learnable per-cell position vectors for an `H x W` grid.
#[derive(Debug, Clone, Copy)]
pub struct PositionTable {
    pub table: ParamId,
    pub height: usize,
    pub width: usize,
}

impl PositionTable {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        height: usize,
        width: usize,
        stream: &mut RngStream,
    ) -> Self {
        let t = Tensor::randn(&[height * width, POS_DIM], 1.0, stream);
        PositionTable {
            table: ps.alloc("inr.pos", t),
            height,
            width,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }
}

/// Weights of the synthesis and modulation stacks (equal depth).
#[derive(Debug, Clone)]
pub struct InrParams {
    pub synth: Vec<Linear>,
    pub modul: Vec<Linear>,
    pub width: usize,
    pub token_dim: usize,
}

impl InrParams {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        width: usize,
        token_dim: usize,
        layers: usize,
        stream: &mut RngStream,
    ) -> Self {
        assert!(layers >= 1);
        let mut synth = Vec::with_capacity(layers);
        let mut modul = Vec::with_capacity(layers);
        for i in 0..layers {
            let in_dim = if i == 0 { POS_DIM } else { width };
            // Sine-layer init with the frequency factor folded into the
            // stored weights: first layer U(+-omega0/in), hidden U(+-sqrt(6/in)).
            let w_init = if i == 0 {
                Init::Uniform {
                    lo: -OMEGA_0 / in_dim as f64,
                    hi: OMEGA_0 / in_dim as f64,
                }
            } else {
                Init::Uniform {
                    lo: -(6.0 / in_dim as f64).sqrt(),
                    hi: (6.0 / in_dim as f64).sqrt(),
                }
            };
            let b_bound = 1.0 / (in_dim as f64).sqrt();
            synth.push(Linear::with_bias_init(
                ps,
                &format!("inr.synth{i}"),
                in_dim,
                width,
                w_init,
                Init::Uniform {
                    lo: -b_bound,
                    hi: b_bound,
                },
                stream,
            ));
            let m_in = if i == 0 { POS_DIM } else { width } + token_dim;
            modul.push(Linear::new(
                ps,
                &format!("inr.modul{i}"),
                m_in,
                width,
                Init::KaimingUniform,
                stream,
            ));
        }
        InrParams {
            synth,
            modul,
            width,
            token_dim,
        }
    }

    pub fn layers(&self) -> usize {
        self.synth.len()
    }

    /// Force every modulation layer to output all-ones (zero weights, unit
    /// bias), reducing the network to a plain sine stack.
    pub fn force_identity_modulation<T: Real>(&self, ps: &mut ParamStore<T>) {
        for lin in &self.modul {
            ps.set(lin.w, Tensor::zeros(&[lin.in_dim, lin.out_dim]));
            ps.set(lin.b.unwrap(), Tensor::full(&[lin.out_dim], T::one()));
        }
    }
}

/// Shared core: positions `[S, 3]`, tokens `[B, N']` -> queries `[B, S, K]`.
fn query_core<T: Real>(
    ps: &ParamStore<T>,
    g: &mut Graph<T>,
    params: &InrParams,
    z: NodeId,
    token: NodeId,
    modulated: bool,
) -> TensorResult<NodeId> {
    let s = g.value(z).shape()[0];
    let b = g.value(token).shape()[0];
    // Broadcast z to [B, S, 3] so it can be concatenated with the token.
    let zeros = g.constant(Tensor::zeros(&[b, s, POS_DIM]));
    let zb = g.add(zeros, z)?;
    let tb = crate::nn::expand_mid(g, token, s)?; // [B, S, N']
    let mut h = z; // synthesis state, [S, K] until first modulation
    let mut alpha = zb; // modulation state, [B, S, *]
    for (i, (syn, md)) in params.synth.iter().zip(&params.modul).enumerate() {
        let pre = syn.forward(ps, g, h)?;
        let sine = g.sin(pre)?;
        if modulated {
            let cat = g.concat(&[alpha, tb])?;
            let a = md.forward(ps, g, cat)?;
            alpha = g.relu(a)?;
            h = g.mul(alpha, sine)?;
        } else {
            // Plain sine stack; keep the state batched after the first layer
            // so shapes match the modulated variant.
            h = if i == 0 {
                let zeros = g.constant(Tensor::zeros(&[b, s, params.width]));
                g.add(zeros, sine)?
            } else {
                sine
            };
        }
    }
    Ok(h)
}

/// Map every grid cell through the INR with a shared class token:
/// `[B, N'] -> [B, H*W, K]`, row-major over cells.
pub fn make_query_map<T: Real>(
    ps: &ParamStore<T>,
    g: &mut Graph<T>,
    pos: &PositionTable,
    params: &InrParams,
    token: NodeId,
) -> TensorResult<NodeId> {
    let z = ps.bind(g, pos.table);
    query_core(ps, g, params, z, token, true)
}

/// Single-cell forward: `z` is a length-3 position vector, `t_c` a length-N'
/// token; returns the length-K query.
pub fn inr_forward<T: Real>(
    ps: &ParamStore<T>,
    g: &mut Graph<T>,
    params: &InrParams,
    z: NodeId,
    token: NodeId,
) -> TensorResult<NodeId> {
    let z = g.reshape(z, &[1, POS_DIM])?;
    let t = g.reshape(token, &[1, params.token_dim])?;
    let q = query_core(ps, g, params, z, t, true)?;
    g.reshape(q, &[params.width])
}

/// Unmodulated sine stack over the same synthesis weights (`alpha == 1`
/// reference path).
pub fn plain_siren_forward<T: Real>(
    ps: &ParamStore<T>,
    g: &mut Graph<T>,
    params: &InrParams,
    z: NodeId,
    batch: usize,
) -> TensorResult<NodeId> {
    let token = g.constant(Tensor::zeros(&[batch, params.token_dim]));
    query_core(ps, g, params, z, token, false)
}

/// Three-layer perceptron decoding a query into per-position Gaussian
/// parameters; the final width-2D output is split into the mean and, through
/// a floored softplus, the strictly positive standard deviation.
#[derive(Debug, Clone, Copy)]
pub struct DistDecoder {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    pub out_dim: usize,
    pub sigma_floor: f64,
}

impl DistDecoder {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        query_dim: usize,
        out_dim: usize,
        stream: &mut RngStream,
    ) -> Self {
        let x = Init::XavierUniform;
        DistDecoder {
            l1: Linear::new(ps, "dist.l1", query_dim, query_dim, x, stream),
            l2: Linear::new(ps, "dist.l2", query_dim, query_dim, x, stream),
            l3: Linear::new(ps, "dist.l3", query_dim, 2 * out_dim, x, stream),
            out_dim,
            sigma_floor: 1e-4,
        }
    }

    /// `[.., K] -> (mu [.., D], sigma [.., D])` with `sigma >= sigma_floor`.
    pub fn decode<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        q: NodeId,
    ) -> TensorResult<(NodeId, NodeId)> {
        let h = self.l1.forward(ps, g, q)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.l2.forward(ps, g, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.l3.forward(ps, g, h)?;
        let mu = g.slice_last(h, 0, self.out_dim)?;
        let raw = g.slice_last(h, self.out_dim, self.out_dim)?;
        let sp = g.softplus(raw)?;
        // max(softplus, floor) written with primitives: relu(x - c) + c.
        let shifted = g.add_scalar(sp, -self.sigma_floor)?;
        let r = g.relu(shifted)?;
        let sigma = g.add_scalar(r, self.sigma_floor)?;
        Ok((mu, sigma))
    }
}

/// Diagnostic: `softmax(Q Q^T / sqrt(K))` over a `[S, K]` query map.
pub fn query_self_attention_map<T: Real>(q: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let sh = q.shape();
    assert_eq!(sh.len(), 2, "query map must be [S, K]");
    let k = sh[1];
    let mut g = Graph::new();
    let qn = g.constant(q.clone());
    let qt = g.transpose_last(qn)?;
    let scores = g.matmul(qn, qt)?;
    let scaled = g.scale(scores, 1.0 / (k as f64).sqrt())?;
    let probs = g.softmax(scaled)?;
    Ok(g.value(probs).clone())
}
