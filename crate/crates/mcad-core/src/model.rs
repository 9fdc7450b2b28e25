//! The assembled class-aware reconstruction pipeline.
//!
//! Dataflow per batch of raw feature maps `f'` (`[B, C, H, W]`):
//! adapter -> adapted tokens `f` (`[B, S, K]`, S = H*W); classifier ->
//! class token and category logits; INR (position table + token) -> query
//! map; distribution decoder -> per-position Gaussian; transformer
//! (jittered `f` in, query-driven decode out) -> reconstruction, projected
//! back to the raw channel width for the reconstruction loss and anomaly
//! scores against `f'` itself.
//!
//! Ablation toggles mirror the submodule study: a frozen adapter, dropping
//! the classification loss, dropping the prior loss, and replacing the
//! class-aware INR query with a shared learnable query table.

use crate::inr::{make_query_map, DistDecoder, InrParams, PositionTable};
use crate::loss::{ce_loss, mse_loss, prior_loss, total_loss, LossWeights};
use crate::mapper::{Adapter, Classifier};
use crate::nn::{Init, Linear, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Graph, NodeId, ParamId, Real, Tensor, TensorResult};
use crate::transformer::{JitterConfig, TransformerParams};

/// Architecture and loss-path configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Raw feature channels C.
    pub c_in: usize,
    /// Model width K (adapter output, INR/query width, transformer width).
    pub width: usize,
    /// Class-token length N'.
    pub token_dim: usize,
    pub n_categories: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub inr_layers: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub jitter_scale: f64,
    pub weights: LossWeights,
    /// Class-aware INR query (true) vs a shared learnable query table.
    pub use_query: bool,
    pub use_prior: bool,
    pub use_ce: bool,
    /// When false the adapter stays at its random initialization.
    pub adapter_trainable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_in: 8,
            width: 64,
            token_dim: 32,
            n_categories: 3,
            grid_h: 14,
            grid_w: 14,
            heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            inr_layers: 5,
            classifier_hidden: 64,
            dropout: 0.1,
            jitter_scale: 0.2,
            weights: LossWeights::default(),
            use_query: true,
            use_prior: true,
            use_ce: true,
            adapter_trainable: true,
        }
    }
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// All loss terms of one training step (graph nodes).
pub struct TrainOut {
    pub total: NodeId,
    pub mse: NodeId,
    pub ce: NodeId,
    pub prior: NodeId,
    pub logits: NodeId,
    pub token: NodeId,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub adapter: Adapter,
    pub classifier: Classifier,
    pub pos: PositionTable,
    pub inr: InrParams,
    pub dist: DistDecoder,
    pub transformer: TransformerParams,
    /// Projection from model width back to the raw channel width; the
    /// reconstruction is compared against `f'` in its own space.
    pub out_proj: Linear,
    /// Shared learnable query table `[S, K]` for the no-query ablation.
    pub shared_query: Option<ParamId>,
}

impl Model {
    pub fn init<T: Real>(
        cfg: ModelConfig,
        ps: &mut ParamStore<T>,
        stream: &mut RngStream,
    ) -> Self {
        let s = cfg.seq_len();
        let mut st = stream.split("model-init");
        let adapter = Adapter::new(ps, cfg.c_in, cfg.width, &mut st);
        let classifier = Classifier::new(
            ps,
            cfg.width,
            cfg.classifier_hidden,
            cfg.token_dim,
            s,
            cfg.n_categories,
            &mut st,
        );
        let pos = PositionTable::new(ps, cfg.grid_h, cfg.grid_w, &mut st);
        let inr = InrParams::new(ps, cfg.width, cfg.token_dim, cfg.inr_layers, &mut st);
        let dist = DistDecoder::new(ps, cfg.width, cfg.width, &mut st);
        let transformer = TransformerParams::new(
            ps,
            cfg.width,
            cfg.heads,
            cfg.enc_layers,
            cfg.dec_layers,
            s,
            cfg.dropout,
            &mut st,
        );
        let out_proj = Linear::new(ps, "out_proj", cfg.width, cfg.c_in, Init::XavierUniform, &mut st);
        let shared_query = if cfg.use_query {
            None
        } else {
            Some(ps.alloc(
                "shared_query",
                Tensor::randn(&[s, cfg.width], 1.0, &mut st),
            ))
        };
        Model {
            cfg,
            adapter,
            classifier,
            pos,
            inr,
            dist,
            transformer,
            out_proj,
            shared_query,
        }
    }

    /// `[B, C, H, W] -> [B, S, C]` token sequence.
    fn to_seq<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> TensorResult<NodeId> {
        let sh = g.value(x).shape().to_vec();
        let r = g.reshape(x, &[sh[0], sh[1], self.cfg.seq_len()])?;
        g.transpose(r, 1, 2)
    }

    /// `[B, S, C] -> [B, C, H, W]`.
    fn from_seq<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> TensorResult<NodeId> {
        let sh = g.value(x).shape().to_vec();
        let t = g.transpose(x, 1, 2)?;
        g.reshape(t, &[sh[0], sh[2], self.cfg.grid_h, self.cfg.grid_w])
    }

    /// Build the query sequence for a batch: the class-aware INR map, or the
    /// shared learnable table broadcast over the batch.
    fn query<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        token: NodeId,
        batch: usize,
    ) -> TensorResult<NodeId> {
        match self.shared_query {
            None => make_query_map(ps, g, &self.pos, &self.inr, token),
            Some(tbl) => {
                let t = ps.bind(g, tbl);
                let zeros = g.constant(Tensor::zeros(&[
                    batch,
                    self.cfg.seq_len(),
                    self.cfg.width,
                ]));
                g.add(zeros, t)
            }
        }
    }

    /// Full training forward pass: reconstruction plus all loss terms.
    /// Disabled loss terms contribute constant zeros so the total is always
    /// well-formed.
    pub fn train_losses<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        f_prime: NodeId,
        labels: &[usize],
        train: bool,
        stream: &mut RngStream,
    ) -> TensorResult<TrainOut> {
        let batch = g.value(f_prime).shape()[0];
        let seq = self.to_seq(g, f_prime)?;
        let f = self
            .adapter
            .forward(ps, g, seq, self.cfg.adapter_trainable)?;
        let token = self.classifier.encode_class(ps, g, f)?;
        let logits = self.classifier.classify(ps, g, token)?;
        let ce = if self.cfg.use_ce {
            ce_loss(g, logits, labels, self.cfg.n_categories)?
        } else {
            g.scalar(0.0)
        };
        let query = self.query(ps, g, token, batch)?;
        let prior = if self.cfg.use_prior {
            let (mu, sigma) = self.dist.decode(ps, g, query)?;
            prior_loss(g, f, mu, sigma)?
        } else {
            g.scalar(0.0)
        };
        let recon = self.transformer.reconstruct_seq(
            ps,
            g,
            f,
            query,
            JitterConfig {
                scale: self.cfg.jitter_scale,
            },
            train,
            stream,
        )?;
        let out_seq = self.out_proj.forward(ps, g, recon)?;
        let f_hat = self.from_seq(g, out_seq)?;
        let mse = mse_loss(g, f_prime, f_hat, self.cfg.seq_len())?;
        let total = total_loss(g, mse, ce, prior, self.cfg.weights)?;
        Ok(TrainOut {
            total,
            mse,
            ce,
            prior,
            logits,
            token,
        })
    }

    /// Inference reconstruction `[B, C, H, W]`; no stochastic primitives run.
    pub fn reconstruct<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        f_prime: NodeId,
    ) -> TensorResult<NodeId> {
        let batch = g.value(f_prime).shape()[0];
        // Eval never draws; the stream exists only to satisfy signatures.
        let mut dead = RngStream::from_seed(0).split("eval-unused");
        let seq = self.to_seq(g, f_prime)?;
        let f = self
            .adapter
            .forward(ps, g, seq, self.cfg.adapter_trainable)?;
        let token = self.classifier.encode_class(ps, g, f)?;
        let query = self.query(ps, g, token, batch)?;
        let recon = self.transformer.reconstruct_seq(
            ps,
            g,
            f,
            query,
            JitterConfig { scale: 0.0 },
            false,
            &mut dead,
        )?;
        debug_assert_eq!(dead.draw_count(), 0);
        let out_seq = self.out_proj.forward(ps, g, recon)?;
        self.from_seq(g, out_seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            c_in: 3,
            width: 8,
            token_dim: 4,
            n_categories: 2,
            grid_h: 2,
            grid_w: 3,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            inr_layers: 2,
            classifier_hidden: 8,
            dropout: 0.0,
            jitter_scale: 0.0,
            ..ModelConfig::default()
        }
    }

    fn fixture(cfg: ModelConfig) -> (ParamStore<f64>, Model) {
        let mut ps = ParamStore::new();
        let mut s = RngStream::from_seed(5);
        let m = Model::init(cfg, &mut ps, &mut s);
        (ps, m)
    }

    #[test]
    fn untrained_model_produces_finite_correctly_shaped_output() {
        let (ps, m) = fixture(micro_cfg());
        let mut g = Graph::new();
        let mut s = RngStream::from_seed(7).split("x");
        let x = g.leaf(Tensor::randn(&[4, 3, 2, 3], 1.0, &mut s));
        let y = m.reconstruct(&ps, &mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 3, 2, 3]);
        assert!(g.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_losses_produce_all_terms() {
        let (ps, m) = fixture(micro_cfg());
        let mut g = Graph::new();
        let mut s = RngStream::from_seed(8).split("x");
        let x = g.leaf(Tensor::randn(&[2, 3, 2, 3], 1.0, &mut s));
        let mut ts = RngStream::from_seed(9).split("train");
        let out = m
            .train_losses(&ps, &mut g, x, &[0, 1], true, &mut ts)
            .unwrap();
        let mse = g.scalar_value(out.mse).unwrap();
        let ce = g.scalar_value(out.ce).unwrap();
        let prior = g.scalar_value(out.prior).unwrap();
        let total = g.scalar_value(out.total).unwrap();
        assert!(mse > 0.0 && ce > 0.0);
        assert!((total - (mse + ce + 0.1 * prior)).abs() < 1e-9);
    }

    #[test]
    fn disabled_terms_are_constant_zero() {
        let cfg = ModelConfig {
            use_ce: false,
            use_prior: false,
            use_query: false,
            ..micro_cfg()
        };
        let (ps, m) = fixture(cfg);
        let mut g = Graph::new();
        let mut s = RngStream::from_seed(10).split("x");
        let x = g.leaf(Tensor::randn(&[2, 3, 2, 3], 1.0, &mut s));
        let mut ts = RngStream::from_seed(11).split("train");
        let out = m
            .train_losses(&ps, &mut g, x, &[0, 1], true, &mut ts)
            .unwrap();
        assert_eq!(g.scalar_value(out.ce).unwrap(), 0.0);
        assert_eq!(g.scalar_value(out.prior).unwrap(), 0.0);
        assert_eq!(
            g.scalar_value(out.total).unwrap(),
            g.scalar_value(out.mse).unwrap()
        );
        assert!(m.shared_query.is_some());
    }

    #[test]
    fn eval_is_deterministic_bitwise() {
        let (ps, m) = fixture(micro_cfg());
        let mut s = RngStream::from_seed(12).split("x");
        let x = Tensor::randn(&[3, 3, 2, 3], 1.0, &mut s);
        let run = || {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let y = m.reconstruct(&ps, &mut g, xn).unwrap();
            g.value(y).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn frozen_adapter_gets_no_gradient() {
        let cfg = ModelConfig {
            adapter_trainable: false,
            ..micro_cfg()
        };
        let (ps, m) = fixture(cfg);
        let mut g = Graph::new();
        let mut s = RngStream::from_seed(13).split("x");
        let x = g.leaf(Tensor::randn(&[2, 3, 2, 3], 1.0, &mut s));
        let mut ts = RngStream::from_seed(14).split("train");
        let out = m
            .train_losses(&ps, &mut g, x, &[1, 0], true, &mut ts)
            .unwrap();
        let grads = g.backward(out.total).unwrap();
        assert!(grads.param(m.adapter.lin.w).is_none());
        assert!(grads.param(m.out_proj.w).is_some());
    }
}
