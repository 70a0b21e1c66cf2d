//! Building blocks of the network: encoders, the message-passing layer and
//! the two output heads.

use std::f64::consts::PI;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use crate::crystal::Mat3;
use crate::kernels::{
    embedding, embedding_backward, gather_rows, segment_sum, sigmoid, sigmoid_backward,
    sigmoid_scalar, silu, silu_backward, softplus_scalar, BatchNorm, BatchNormCache, KernelError,
    Linear, Mode, Param,
};

type Result<T> = std::result::Result<T, KernelError>;

/// Gaussian expansion of `exp(-d)` on `k` centres spread evenly over
/// `[exp(-r_c), 1]`.
pub fn rbf_expand(d: f64, k: usize, r_c: f64) -> Vec<f64> {
    let lo = (-r_c).exp();
    let beta = (2.0 / k as f64 * (1.0 - lo)).powi(-2);
    let x = (-d).exp();
    (0..k)
        .map(|i| {
            let mu = lo + (1.0 - lo) * i as f64 / (k - 1) as f64;
            (-beta * (x - mu).powi(2)).exp()
        })
        .collect()
}

/// Cosine cutoff, 1 at `d = 0` and 0 at `d = r_c`; `d` is clamped to the range.
pub fn envelope(d: f64, r_c: f64) -> f64 {
    let d = d.clamp(0.0, r_c);
    0.5 * ((PI * d / r_c).cos() + 1.0)
}

/// Linear → SiLU → Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(&format!("{name}.0"), d_in, d_hidden, rng),
            l2: Linear::new(&format!("{name}.1"), d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        let z1 = self.l1.forward(x)?;
        let a1 = silu(&z1);
        let y = self.l2.forward(&a1)?;
        Ok((
            y,
            MlpCache {
                x: x.clone(),
                z1,
                a1,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Array2<f64>) -> Array2<f64> {
        let da1 = self.l2.backward(&cache.a1, dy);
        let dz1 = silu_backward(&cache.z1, &da1);
        self.l1.backward(&cache.x, &dz1)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.l1
            .params()
            .into_iter()
            .chain(self.l2.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.l1
            .params_mut()
            .into_iter()
            .chain(self.l2.params_mut())
            .collect()
    }
}

/// Affine map of the per-edge concatenation `h_dst ‖ e ‖ h_src` without
/// materialising it: the node blocks of the weight are applied once per node
/// and gathered onto the edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConcatLinear {
    /// `[3·dim, d_out]`, rows ordered as receiver, edge, sender.
    pub weight: Param,
    pub bias: Param,
    dim: usize,
}

impl EdgeConcatLinear {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::kaiming_uniform(format!("{name}.weight"), 3 * dim, d_out, 3 * dim, rng),
            bias: Param::zeros(format!("{name}.bias"), 1, d_out),
            dim,
        }
    }

    fn blocks(&self) -> [ndarray::ArrayView2<'_, f64>; 3] {
        let d = self.dim;
        let w = &self.weight.value;
        [
            w.slice(s![0..d, ..]),
            w.slice(s![d..2 * d, ..]),
            w.slice(s![2 * d..3 * d, ..]),
        ]
    }

    pub fn forward(
        &self,
        h: &Array2<f64>,
        e: &Array2<f64>,
        src: &[usize],
        dst: &[usize],
    ) -> Result<Array2<f64>> {
        if h.ncols() != self.dim || e.ncols() != self.dim || e.nrows() != src.len() {
            return Err(KernelError::ShapeMismatch {
                op: "edge_concat_linear",
                expected: vec![self.dim, self.dim, src.len()],
                found: vec![h.ncols(), e.ncols(), e.nrows()],
            });
        }
        let [wi, we, wj] = self.blocks();
        let pi = h.dot(&wi);
        let pj = h.dot(&wj);
        let mut z = e.dot(&we) + &self.bias.value;
        Zip::from(z.rows_mut())
            .and(dst)
            .and(src)
            .for_each(|mut row, &i, &j| {
                row += &pi.row(i);
                row += &pj.row(j);
            });
        Ok(z)
    }

    /// Returns `(dh, de)`.
    pub fn backward(
        &mut self,
        h: &Array2<f64>,
        e: &Array2<f64>,
        src: &[usize],
        dst: &[usize],
        dz: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let n = h.nrows();
        let d = self.dim;
        let gi = segment_sum(dz, dst, n).expect("edge indices validated in forward");
        let gj = segment_sum(dz, src, n).expect("edge indices validated in forward");
        let (dh, de) = {
            let [wi, we, wj] = self.blocks();
            (gi.dot(&wi.t()) + gj.dot(&wj.t()), dz.dot(&we.t()))
        };
        let mut g = self.weight.grad.slice_mut(s![0..d, ..]);
        g += &h.t().dot(&gi);
        let mut g = self.weight.grad.slice_mut(s![d..2 * d, ..]);
        g += &e.t().dot(dz);
        let mut g = self.weight.grad.slice_mut(s![2 * d..3 * d, ..]);
        g += &h.t().dot(&gj);
        self.bias.grad += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        (dh, de)
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// `SiLU(W₂·SiLU(Emb(z) + W₁·T + b₁) + b₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomEncoder {
    pub embedding: Param,
    pub temperature: Option<Linear>,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct AtomCache {
    idx: Vec<usize>,
    t: Array2<f64>,
    a: Array2<f64>,
    s: Array2<f64>,
    b: Array2<f64>,
}

impl AtomEncoder {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        n_vocab: usize,
        use_temperature: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            embedding: Param::kaiming_uniform("atom.embedding", n_vocab, 2 * dim, 1, rng),
            temperature: use_temperature.then(|| Linear::new("atom.temperature", 1, 2 * dim, rng)),
            out: Linear::new("atom.out", 2 * dim, dim, rng),
        }
    }

    /// `idx` are zero-based vocabulary rows; `t` is the standardised
    /// temperature per node, `[n, 1]`.
    pub fn forward(&self, idx: &[usize], t: &Array2<f64>) -> Result<(Array2<f64>, AtomCache)> {
        let mut a = embedding(idx, &self.embedding.value)?;
        if let Some(lin) = &self.temperature {
            a += &lin.forward(t)?;
        }
        let s = silu(&a);
        let b = self.out.forward(&s)?;
        let h = silu(&b);
        Ok((
            h,
            AtomCache {
                idx: idx.to_vec(),
                t: t.clone(),
                a,
                s,
                b,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AtomCache, dh: &Array2<f64>) {
        let db = silu_backward(&cache.b, dh);
        let ds = self.out.backward(&cache.s, &db);
        let da = silu_backward(&cache.a, &ds);
        embedding_backward(&cache.idx, &da, &mut self.embedding.grad);
        if let Some(lin) = &mut self.temperature {
            lin.backward(&cache.t, &da);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.embedding];
        if let Some(lin) = &self.temperature {
            out.extend(lin.params());
        }
        out.extend(self.out.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.embedding];
        if let Some(lin) = &mut self.temperature {
            out.extend(lin.params_mut());
        }
        out.extend(self.out.params_mut());
        out
    }
}

/// `SiLU(MLP(rbf(d) ‖ v_hat))` with a `2·dim` hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEncoder {
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct EdgeCache {
    mlp: MlpCache,
    pre: Array2<f64>,
}

impl EdgeEncoder {
    pub fn new<R: Rng + ?Sized>(dim: usize, rbf_k: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new("edge", rbf_k + 3, 2 * dim, dim, rng),
        }
    }

    /// `features` is `[m, K + 3]`: the RBF expansion followed by `v_hat`.
    pub fn forward(&self, features: &Array2<f64>) -> Result<(Array2<f64>, EdgeCache)> {
        let (pre, mlp) = self.mlp.forward(features)?;
        Ok((silu(&pre), EdgeCache { mlp, pre }))
    }

    pub fn backward(&mut self, cache: &EdgeCache, de: &Array2<f64>) {
        let dpre = silu_backward(&cache.pre, de);
        self.mlp.backward(&cache.mlp, &dpre);
    }

    pub fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}

/// Gated message-passing layer with residual node and edge updates.
#[derive(Debug, Clone, PartialEq)]
pub struct CartLayer {
    pub gate_in: EdgeConcatLinear,
    pub gate_out: Linear,
    pub msg_in: EdgeConcatLinear,
    pub msg_out: Linear,
    pub bn_gate: BatchNorm,
    pub bn_node: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    h: Array2<f64>,
    e: Array2<f64>,
    env: Array2<f64>,
    gz1: Array2<f64>,
    ga1: Array2<f64>,
    bn_gate: BatchNormCache,
    sig: Array2<f64>,
    gate: Array2<f64>,
    mz1: Array2<f64>,
    ma1: Array2<f64>,
    msg_raw: Array2<f64>,
    bn_node: BatchNormCache,
    node_pre: Array2<f64>,
}

impl CartLayer {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            gate_in: EdgeConcatLinear::new(&format!("{name}.gate.0"), dim, dim, rng),
            gate_out: Linear::new(&format!("{name}.gate.1"), dim, dim, rng),
            msg_in: EdgeConcatLinear::new(&format!("{name}.msg.0"), dim, dim, rng),
            msg_out: Linear::new(&format!("{name}.msg.1"), dim, dim, rng),
            bn_gate: BatchNorm::new(&format!("{name}.bn_gate"), dim),
            bn_node: BatchNorm::new(&format!("{name}.bn_node"), dim),
        }
    }

    /// `env` is the per-edge envelope weight, `[m, 1]`.
    pub fn forward(
        &self,
        h: &Array2<f64>,
        e: &Array2<f64>,
        env: &Array2<f64>,
        src: &[usize],
        dst: &[usize],
        mode: Mode,
    ) -> Result<(Array2<f64>, Array2<f64>, LayerCache)> {
        let gz1 = self.gate_in.forward(h, e, src, dst)?;
        let ga1 = silu(&gz1);
        let gz2 = self.gate_out.forward(&ga1)?;
        let (gbn, bn_gate) = self.bn_gate.forward(&gz2, mode)?;
        let sig = sigmoid(&gbn);
        let gate = &sig * env;

        let mz1 = self.msg_in.forward(h, e, src, dst)?;
        let ma1 = silu(&mz1);
        let msg_raw = self.msg_out.forward(&ma1)?;
        let msg = &msg_raw * &gate;

        let agg = segment_sum(&msg, dst, h.nrows())?;
        let (node_pre, bn_node) = self.bn_node.forward(&agg, mode)?;
        let h_new = h + &silu(&node_pre);
        let e_new = e + &gate;
        let cache = LayerCache {
            h: h.clone(),
            e: e.clone(),
            env: env.clone(),
            gz1,
            ga1,
            bn_gate,
            sig,
            gate,
            mz1,
            ma1,
            msg_raw,
            bn_node,
            node_pre,
        };
        Ok((h_new, e_new, cache))
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running averages.
    pub fn update_running(&mut self, cache: &LayerCache) {
        self.bn_gate.update_running(&cache.bn_gate);
        self.bn_node.update_running(&cache.bn_node);
    }

    /// Returns `(dh, de)` given the gradients of the layer outputs.
    pub fn backward(
        &mut self,
        cache: &LayerCache,
        dh_out: &Array2<f64>,
        de_out: &Array2<f64>,
        src: &[usize],
        dst: &[usize],
    ) -> (Array2<f64>, Array2<f64>) {
        let mut dh = dh_out.clone();
        let mut de = de_out.clone();

        let dnode_pre = silu_backward(&cache.node_pre, dh_out);
        let dagg = self.bn_node.backward(&cache.bn_node, &dnode_pre);
        let dmsg = gather_rows(&dagg, dst);

        let dgate = de_out + &(&dmsg * &cache.msg_raw);
        let dmsg_raw = &dmsg * &cache.gate;

        let dma1 = self.msg_out.backward(&cache.ma1, &dmsg_raw);
        let dmz1 = silu_backward(&cache.mz1, &dma1);
        let (dh_m, de_m) = self.msg_in.backward(&cache.h, &cache.e, src, dst, &dmz1);
        dh += &dh_m;
        de += &de_m;

        let dsig = &dgate * &cache.env;
        let dgbn = sigmoid_backward(&cache.sig, &dsig);
        let dgz2 = self.bn_gate.backward(&cache.bn_gate, &dgbn);
        let dga1 = self.gate_out.backward(&cache.ga1, &dgz2);
        let dgz1 = silu_backward(&cache.gz1, &dga1);
        let (dh_g, de_g) = self.gate_in.backward(&cache.h, &cache.e, src, dst, &dgz1);
        dh += &dh_g;
        de += &de_g;
        (dh, de)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        out.extend(self.gate_in.params());
        out.extend(self.gate_out.params());
        out.extend(self.msg_in.params());
        out.extend(self.msg_out.params());
        out.extend(self.bn_gate.params());
        out.extend(self.bn_node.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        out.extend(self.gate_in.params_mut());
        out.extend(self.gate_out.params_mut());
        out.extend(self.msg_in.params_mut());
        out.extend(self.msg_out.params_mut());
        out.extend(self.bn_gate.params_mut());
        out.extend(self.bn_node.params_mut());
        out
    }

    pub fn batch_norms(&self) -> [&BatchNorm; 2] {
        [&self.bn_gate, &self.bn_node]
    }

    pub fn batch_norms_mut(&mut self) -> [&mut BatchNorm; 2] {
        [&mut self.bn_gate, &mut self.bn_node]
    }
}

/// Lower-triangular factor from six raw head outputs: softplus on the
/// diagonal, `l21 = o4`, `l32 = o5`, `l31 = o6`.
pub fn cholesky_factor(o: &[f64]) -> Mat3 {
    Mat3::new(
        softplus_scalar(o[0]),
        0.0,
        0.0,
        o[3],
        softplus_scalar(o[1]),
        0.0,
        o[5],
        o[4],
        softplus_scalar(o[2]),
    )
}

/// `L·Lᵀ`, evaluated on the lower triangle and mirrored so the result is
/// exactly symmetric.
pub fn cholesky_adp(o: &[f64]) -> Mat3 {
    let l = cholesky_factor(o);
    let mut u = Mat3::zeros();
    for i in 0..3 {
        for j in 0..=i {
            let v = (0..=j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            u[(i, j)] = v;
            u[(j, i)] = v;
        }
    }
    u
}

/// Gradient of a loss with respect to the six raw outputs given `dL/dU`.
pub fn cholesky_backward(o: &[f64], du: &Mat3) -> [f64; 6] {
    let l = cholesky_factor(o);
    let dl = (du + du.transpose()) * l;
    [
        dl[(0, 0)] * sigmoid_scalar(o[0]),
        dl[(1, 1)] * sigmoid_scalar(o[1]),
        dl[(2, 2)] * sigmoid_scalar(o[2]),
        dl[(1, 0)],
        dl[(2, 1)],
        dl[(2, 0)],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::concat;
    use crate::kernels::gradcheck::{finite_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rbf_peaks_and_bounds() {
        let (k, rc) = (16, 5.0_f64);
        let lo = (-rc).exp();
        for i in 0..k {
            let mu = lo + (1.0 - lo) * i as f64 / (k - 1) as f64;
            assert_eq!(rbf_expand(-mu.ln(), k, rc)[i], 1.0);
        }
        for d in [0.01, 0.5, 1.7, 3.3, 5.0] {
            assert!(rbf_expand(d, k, rc).iter().all(|&r| r > 0.0 && r <= 1.0));
        }
    }

    #[test]
    fn rbf_two_centres_hand_value() {
        let beta = (1.0 - (-5.0_f64).exp()).powi(-2);
        assert!((beta - 1.01358).abs() < 1e-4);
        let r = rbf_expand(5.0, 2, 5.0);
        let expected = (-beta * ((-5.0_f64).exp() - 1.0).powi(2)).exp();
        assert!((r[1] - expected).abs() < 1e-15);
        assert!((r[1] - (-1.0_f64).exp()).abs() < 1e-9);
        assert_eq!(r[0], 1.0);
    }

    #[test]
    fn envelope_endpoints() {
        assert_eq!(envelope(0.0, 5.0), 1.0);
        assert_eq!(envelope(5.0, 5.0), 0.0);
        assert_eq!(envelope(2.5, 5.0), 0.5);
        assert_eq!(envelope(5.0 + 1e-10, 5.0), 0.0);
    }

    #[test]
    fn cholesky_examples() {
        let u = cholesky_adp(&[0.0; 6]);
        let ln2sq = std::f64::consts::LN_2.powi(2);
        assert!((u - Mat3::identity() * ln2sq).abs().max() < 1e-15);
        assert!((ln2sq - 0.480453).abs() < 1e-6);
        // softplus^-1(1) = ln(e - 1)
        let one = (std::f64::consts::E - 1.0).ln();
        let u = cholesky_adp(&[one, one, one, 1.0, 1.0, 1.0]);
        let expected = Mat3::new(1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 2.0, 3.0);
        assert!((u - expected).abs().max() < 1e-12);
    }

    #[test]
    fn cholesky_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let analytic = cholesky_backward(&o, &w);
        let x = Array2::from_shape_vec((1, 6), o).unwrap();
        let fd = finite_difference(
            |x| cholesky_adp(x.as_slice().unwrap()).component_mul(&w).sum(),
            &x,
            1e-5,
        );
        let a = Array2::from_shape_vec((1, 6), analytic.to_vec()).unwrap();
        assert!(relative_error(&a, &fd) < 1e-7);
    }

    #[test]
    fn edge_concat_linear_matches_explicit_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 3;
        let lin = EdgeConcatLinear::new("x", dim, 4, &mut rng);
        let h = random(&mut rng, 4, dim);
        let e = random(&mut rng, 5, dim);
        let src = [0, 1, 2, 3, 3];
        let dst = [1, 0, 0, 2, 3];
        let z = lin.forward(&h, &e, &src, &dst).unwrap();
        let cat = concat(&[&gather_rows(&h, &dst), &e, &gather_rows(&h, &src)]).unwrap();
        let direct = cat.dot(&lin.weight.value) + &lin.bias.value;
        assert!((&z - &direct).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn edge_concat_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 3;
        let mut lin = EdgeConcatLinear::new("x", dim, 2, &mut rng);
        lin.bias.value = random(&mut rng, 1, 2);
        let h = random(&mut rng, 4, dim);
        let e = random(&mut rng, 6, dim);
        let src = [0, 1, 2, 3, 3, 0];
        let dst = [1, 0, 0, 2, 3, 0];
        let w = random(&mut rng, 6, 2);
        let base = lin.clone();
        let (dh, de) = lin.backward(&h, &e, &src, &dst, &w);
        let f = |l: &EdgeConcatLinear, h: &Array2<f64>, e: &Array2<f64>| {
            (l.forward(h, e, &src, &dst).unwrap() * &w).sum()
        };
        assert!(relative_error(&dh, &finite_difference(|h| f(&base, h, &e), &h, 1e-5)) < 1e-7);
        assert!(relative_error(&de, &finite_difference(|e| f(&base, &h, e), &e, 1e-5)) < 1e-7);
        let fw = finite_difference(
            |wt| {
                let mut l = base.clone();
                l.weight.value = wt.clone();
                f(&l, &h, &e)
            },
            &base.weight.value,
            1e-5,
        );
        assert!(relative_error(&lin.weight.grad, &fw) < 1e-7);
    }

    #[test]
    fn zero_layer_is_identity_on_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 4;
        let mut layer = CartLayer::new("l", dim, &mut rng);
        for p in layer.params_mut() {
            if !p.name.ends_with("gamma") {
                p.value.fill(0.0);
            }
        }
        let h = random(&mut rng, 3, dim);
        let e = random(&mut rng, 4, dim);
        let d = [1.0, 2.5, 5.0, 0.0];
        let env = Array2::from_shape_fn((4, 1), |(i, _)| envelope(d[i], 5.0));
        let (h2, e2, _) = layer
            .forward(&h, &e, &env, &[0, 1, 2, 0], &[1, 2, 0, 0], Mode::Eval)
            .unwrap();
        assert_eq!(h2, h);
        for k in 0..4 {
            for c in 0..dim {
                assert_eq!(e2[(k, c)], e[(k, c)] + 0.5 * envelope(d[k], 5.0));
            }
        }
        // the edge at the cutoff is untouched
        assert_eq!(e2.row(2), e.row(2));
    }
}
