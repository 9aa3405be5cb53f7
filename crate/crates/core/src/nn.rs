//! Layers shared by the autoencoder, fusion module and denoisers.
//!
//! A layer only holds [`ParamId`]s into a [`ParamStore`]; its forward pass
//! takes the store bound to the current graph.

use hdrfuse_tensor::{Bound, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

pub const NORM_EPS: f64 = 1e-5;

/// Largest divisor of `channels` not above 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Conv {
    /// Square `k`x`k` convolution with "same" padding at stride 1.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.add_uniform(format!("{name}.w"), vec![cout, cin, k, k], fan_in, rng);
        let b = store.add_uniform(format!("{name}.b"), vec![cout], fan_in, rng);
        Self { w, b: Some(b), stride, pad: k / 2, groups: 1 }
    }

    /// One `k`x`k` filter per channel.
    pub fn depthwise<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), vec![channels, 1, k, k], k * k, rng);
        let b = store.add_uniform(format!("{name}.b"), vec![channels], k * k, rng);
        Self { w, b: Some(b), stride: 1, pad: k / 2, groups: channels }
    }

    /// Zero the weights and bias, so the layer initially outputs zeros.
    pub fn zero_init<T: Scalar>(self, store: &mut ParamStore<T>) -> Self {
        store.get_mut(self.w).data_mut().fill(T::zero());
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().fill(T::zero());
        }
        self
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p[self.w], self.b.map(|b| p[b]), self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), vec![din, dout], din, rng);
        let b = store.add_uniform(format!("{name}.b"), vec![dout], din, rng);
        Self { w, b }
    }

    /// `x` is `[n, din]`.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.matmul(p[self.w]).add_row_bias(p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        Self { gamma, beta, groups: norm_groups(channels) }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.group_norm(p[self.gamma], p[self.beta], self.groups, NORM_EPS)
    }
}

/// Pre-activation residual block with an optional per-channel embedding
/// injection between the two convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    emb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), cin);
        let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng);
        let emb = emb_dim.map(|d| Linear::new(store, &format!("{name}.emb"), d, cout, rng));
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), cout);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng);
        let skip = (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng));
        Self { norm1, conv1, emb, norm2, conv2, skip }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>, emb: Option<Var<'g, T>>) -> Var<'g, T> {
        let mut h = self.conv1.forward(p, self.norm1.forward(p, x).silu());
        if let (Some(lin), Some(e)) = (&self.emb, emb) {
            h = h.add_channel_bias(lin.forward(p, e));
        }
        let h = self.conv2.forward(p, self.norm2.forward(p, h).silu());
        let x = match &self.skip {
            Some(s) => s.forward(p, x),
            None => x,
        };
        x.add(h)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct Attention {
    norm: GroupNorm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
    channels: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels),
            q: Conv::new(store, &format!("{name}.q"), channels, channels, 1, 1, rng),
            k: Conv::new(store, &format!("{name}.k"), channels, channels, 1, 1, rng),
            v: Conv::new(store, &format!("{name}.v"), channels, channels, 1, 1, rng),
            proj: Conv::new(store, &format!("{name}.proj"), channels, channels, 1, 1, rng),
            channels,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let shape = x.shape();
        let (n, c, hw) = (shape[0], self.channels, shape[2] * shape[3]);
        let h = self.norm.forward(p, x);
        let q = self.q.forward(p, h).reshape(vec![n, c, hw]).transpose_last2();
        let k = self.k.forward(p, h).reshape(vec![n, c, hw]);
        let v = self.v.forward(p, h).reshape(vec![n, c, hw]).transpose_last2();
        let attn = q.matmul(k).scale(1.0 / (c as f64).sqrt()).softmax_last();
        let out = attn.matmul(v).transpose_last2().reshape(shape);
        x.add(self.proj.forward(p, out))
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[n, dim]`.
pub fn timestep_embedding<T: Scalar>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); t.len() * dim];
    for (i, &ti) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            out[i * dim + j] = T::of((ti * freq).sin());
            out[i * dim + half + j] = T::of((ti * freq).cos());
        }
    }
    Tensor::from_vec(vec![t.len(), dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hdrfuse_tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(7), 7);
        assert_eq!(norm_groups(11), 1);
    }

    #[test]
    fn blocks_preserve_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let rb = ResBlock::new(&mut store, "rb", 4, 8, Some(6), &mut rng);
        let at = Attention::new(&mut store, "at", 8, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::randn(vec![2, 4, 5, 3], &mut rng));
        let e = g.constant(timestep_embedding(&[1.0, 500.0], 6));
        let y = at.forward(&p, rb.forward(&p, x, Some(e)));
        assert_eq!(y.shape(), vec![2, 8, 5, 3]);
        assert!(y.value().all_finite());
    }

    #[test]
    fn zero_init_conv_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let c = Conv::new(&mut store, "c", 3, 2, 3, 1, &mut rng).zero_init(&mut store);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let y = c.forward(&p, g.constant(Tensor::randn(vec![1, 3, 4, 4], &mut rng)));
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_values() {
        let e = timestep_embedding::<f64>(&[0.0, 2.0], 4);
        assert_eq!(&e.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 2f64.sin()).abs() < 1e-15);
    }
}
