//! Feature adapter and the two-stage classifier that produces the
//! fine-grained class token.
//!
//! The adapter is a single fully connected layer applied per position. The
//! classifier runs a per-position perceptron (ReLU, ReLU, softmax over the
//! token width), flattens position-major, then a channel encoder
//! (LeakyReLU, LeakyReLU, softmax) down to the class token, from which a
//! linear head predicts the category. The token, not the head output, is
//! what conditions the query generator.

use crate::nn::{Init, Linear, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Graph, NodeId, Real, Tensor, TensorError, TensorResult};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Single fully connected layer mapping raw features into the model domain.
#[derive(Debug, Clone, Copy)]
pub struct Adapter {
    pub lin: Linear,
}

impl Adapter {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        c_in: usize,
        width: usize,
        stream: &mut RngStream,
    ) -> Self {
        Adapter {
            lin: Linear::new(ps, "adapter", c_in, width, Init::XavierUniform, stream),
        }
    }

    /// Square identity adapter (tests).
    pub fn identity<T: Real>(ps: &mut ParamStore<T>, dim: usize) -> Self {
        let eye = Tensor::from_fn(&[dim, dim], |i| {
            if i / dim == i % dim {
                T::one()
            } else {
                T::zero()
            }
        });
        let w = ps.alloc("adapter.w", eye);
        let b = ps.alloc("adapter.b", Tensor::zeros(&[dim]));
        Adapter {
            lin: Linear {
                w,
                b: Some(b),
                in_dim: dim,
                out_dim: dim,
            },
        }
    }

    /// Per-position affine map `[B, S, C_in] -> [B, S, width]`.
    /// `trainable = false` freezes the weights (ablation row without the
    /// adapter keeps a fixed random projection so shapes still line up).
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        x: NodeId,
        trainable: bool,
    ) -> TensorResult<NodeId> {
        let sh = g.value(x).shape();
        if sh.last() != Some(&self.lin.in_dim) {
            return Err(TensorError::ShapeMismatch {
                op: "adapt",
                lhs: sh.to_vec(),
                rhs: vec![self.lin.in_dim],
            });
        }
        self.lin.forward_opts(ps, g, x, trainable)
    }
}

/// Two-stage classifier: per-position encoder, position-major flatten,
/// channel encoder to the class token, then the classification head.
#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    pos1: Linear,
    pos2: Linear,
    pos3: Linear,
    ch1: Linear,
    ch2: Linear,
    ch3: Linear,
    pub head: Linear,
    pub token_dim: usize,
    pub seq_len: usize,
}

impl Classifier {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        width: usize,
        hidden: usize,
        token_dim: usize,
        seq_len: usize,
        n_categories: usize,
        stream: &mut RngStream,
    ) -> Self {
        let x = Init::XavierUniform;
        Classifier {
            pos1: Linear::new(ps, "cls.pos1", width, hidden, x, stream),
            pos2: Linear::new(ps, "cls.pos2", hidden, hidden, x, stream),
            pos3: Linear::new(ps, "cls.pos3", hidden, token_dim, x, stream),
            ch1: Linear::new(ps, "cls.ch1", seq_len * token_dim, hidden, x, stream),
            ch2: Linear::new(ps, "cls.ch2", hidden, hidden, x, stream),
            ch3: Linear::new(ps, "cls.ch3", hidden, token_dim, x, stream),
            head: Linear::new(ps, "cls.head", token_dim, n_categories, x, stream),
            token_dim,
            seq_len,
        }
    }

    /// `[B, S, width] -> [B, token_dim]` class token (softmax-normalized).
    pub fn encode_class<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        f: NodeId,
    ) -> TensorResult<NodeId> {
        let sh = g.value(f).shape().to_vec();
        if sh.len() != 3 || sh[1] != self.seq_len || sh[2] != self.pos1.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "encode_class",
                lhs: sh,
                rhs: vec![self.seq_len, self.pos1.in_dim],
            });
        }
        let b = sh[0];
        let h = self.pos1.forward(ps, g, f)?;
        let h = g.relu(h)?;
        let h = self.pos2.forward(ps, g, h)?;
        let h = g.relu(h)?;
        let h = self.pos3.forward(ps, g, h)?;
        let h = g.softmax(h)?;
        // Position-major flatten of the per-position tokens.
        let flat = g.reshape(h, &[b, self.seq_len * self.token_dim])?;
        let h = self.ch1.forward(ps, g, flat)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.ch2.forward(ps, g, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.ch3.forward(ps, g, h)?;
        g.softmax(h)
    }

    /// Raw category logits from a class token (softmax lives in the CE loss).
    pub fn classify<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        token: NodeId,
    ) -> TensorResult<NodeId> {
        self.head.forward(ps, g, token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(b: usize, s: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut st = RngStream::from_seed(seed).split("x");
        Tensor::randn(&[b, s, d], 1.0, &mut st)
    }

    #[test]
    fn identity_adapter_passes_input_through() {
        let mut ps = ParamStore::<f64>::new();
        let a = Adapter::identity(&mut ps, 4);
        let mut g = Graph::new();
        let x = g.leaf(seq(2, 5, 4, 1));
        let y = a.forward(&ps, &mut g, x, true).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn zero_weight_adapter_outputs_bias() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.alloc("adapter.w", Tensor::zeros(&[3, 2]));
        let b = ps.alloc(
            "adapter.b",
            Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap(),
        );
        let a = Adapter {
            lin: Linear {
                w,
                b: Some(b),
                in_dim: 3,
                out_dim: 2,
            },
        };
        let mut g = Graph::new();
        let x = g.leaf(seq(1, 4, 3, 2));
        let y = a.forward(&ps, &mut g, x, true).unwrap();
        for row in g.value(y).data().chunks_exact(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn adapter_matches_per_position_oracle() {
        let mut ps = ParamStore::<f64>::new();
        let mut s = RngStream::from_seed(5).split("init");
        let a = Adapter::new(&mut ps, 3, 4, &mut s);
        let mut g = Graph::new();
        let xt = seq(2, 6, 3, 3);
        let x = g.leaf(xt.clone());
        let y = a.forward(&ps, &mut g, x, true).unwrap();
        let w = ps.get(a.lin.w).data().to_vec();
        let bias = ps.get(a.lin.b.unwrap()).data().to_vec();
        // Straight-line oracle: independent per-position matrix multiply.
        for bi in 0..2 {
            for p in 0..6 {
                for o in 0..4 {
                    let mut acc = bias[o];
                    for i in 0..3 {
                        acc += xt.data()[bi * 18 + p * 3 + i] * w[i * 4 + o];
                    }
                    let got = g.value(y).data()[bi * 24 + p * 4 + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adapter_is_linear_with_zero_bias() {
        let mut ps = ParamStore::<f64>::new();
        let mut s = RngStream::from_seed(8).split("init");
        let a = Adapter::new(&mut ps, 3, 3, &mut s);
        ps.set(a.lin.b.unwrap(), Tensor::zeros(&[3]));
        let xt = seq(1, 4, 3, 10);
        let yt = seq(1, 4, 3, 11);
        let run = |t: &Tensor<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let y = a.forward(&ps, &mut g, x, true).unwrap();
            g.value(y).data().to_vec()
        };
        let combo = Tensor::from_vec(
            &[1, 4, 3],
            xt.data()
                .iter()
                .zip(yt.data())
                .map(|(&u, &v)| 2.0 * u - 0.5 * v)
                .collect(),
        )
        .unwrap();
        let lhs = run(&combo);
        let (fx, fy) = (run(&xt), run(&yt));
        for i in 0..lhs.len() {
            assert!((lhs[i] - (2.0 * fx[i] - 0.5 * fy[i])).abs() < 1e-12);
        }
    }

    fn classifier_fixture() -> (ParamStore<f64>, Classifier) {
        let mut ps = ParamStore::<f64>::new();
        let mut s = RngStream::from_seed(4).split("init");
        let c = Classifier::new(&mut ps, 4, 16, 8, 6, 3, &mut s);
        (ps, c)
    }

    #[test]
    fn class_token_is_a_distribution() {
        let (ps, c) = classifier_fixture();
        let mut g = Graph::new();
        let x = g.leaf(seq(3, 6, 4, 6));
        let t = c.encode_class(&ps, &mut g, x).unwrap();
        assert_eq!(g.value(t).shape(), &[3, 8]);
        for row in g.value(t).data().chunks_exact(8) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_input_token_is_deterministic_constant() {
        let (ps, c) = classifier_fixture();
        let once = |_| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::zeros(&[1, 6, 4]));
            let t = c.encode_class(&ps, &mut g, x).unwrap();
            g.value(t).data().to_vec()
        };
        assert_eq!(once(0), once(1));
    }

    #[test]
    fn spatial_shuffle_changes_token_identity_does_not() {
        let (ps, c) = classifier_fixture();
        let xt = seq(1, 6, 4, 12);
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let tok = c.encode_class(&ps, &mut g, x).unwrap();
            g.value(tok).data().to_vec()
        };
        let base = run(&xt);
        assert_eq!(base, run(&xt), "channel-preserving identity is stable");
        // Swap two positions: the flatten is position-major, so the token
        // must move.
        let mut shuffled = xt.data().to_vec();
        for i in 0..4 {
            shuffled.swap(i, 5 * 4 + i);
        }
        let moved = run(&Tensor::from_vec(&[1, 6, 4], shuffled).unwrap());
        let diff: f64 = base
            .iter()
            .zip(&moved)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "token unchanged by spatial shuffle");
    }

    #[test]
    fn zero_head_gives_uniform_prediction() {
        let (mut ps, c) = classifier_fixture();
        ps.set(c.head.w, Tensor::zeros(&[8, 3]));
        let mut g = Graph::new();
        let x = g.leaf(seq(2, 6, 4, 13));
        let t = c.encode_class(&ps, &mut g, x).unwrap();
        let logits = c.classify(&ps, &mut g, t).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    }
}
