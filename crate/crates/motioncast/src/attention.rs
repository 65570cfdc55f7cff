//! Masked scaled dot-product attention and the sparsity patterns used by the
//! spatial and temporal transformer stages.
//!
//! Masks are laid out query-major with one extra key column for the relay
//! token, which always sits last.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::skeleton::SkeletonTopology;

/// Divisor applied to raw attention scores. `SqrtD` is the default; `D`
/// divides by the full head width instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum ScaleMode {
    #[default]
    SqrtD,
    D,
}

impl ScaleMode {
    pub fn scale(self, head_dim: usize) -> f64 {
        match self {
            ScaleMode::SqrtD => (head_dim as f64).sqrt(),
            ScaleMode::D => head_dim as f64,
        }
    }
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt_d" => Ok(ScaleMode::SqrtD),
            "d" => Ok(ScaleMode::D),
            other => Err(Error::Config(format!(
                "unknown scale mode '{other}' (expected sqrt_d or d)"
            ))),
        }
    }
}

impl std::fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleMode::SqrtD => write!(f, "sqrt_d"),
            ScaleMode::D => write!(f, "d"),
        }
    }
}

/// Boolean Q×K pattern of permitted attention edges. Every query row must
/// keep at least one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    allowed: Array2<bool>,
}

impl SparsityMask {
    pub fn new(allowed: Array2<bool>) -> Result<Self> {
        for (i, row) in allowed.rows().into_iter().enumerate() {
            if !row.iter().any(|&a| a) {
                return Err(Error::Precondition(format!(
                    "mask row {i} permits no keys"
                )));
            }
        }
        Ok(Self { allowed })
    }

    pub fn all_allowed(n_queries: usize, n_keys: usize) -> Self {
        Self {
            allowed: Array2::from_elem((n_queries, n_keys), true),
        }
    }

    pub fn allowed(&self) -> ArrayView2<'_, bool> {
        self.allowed.view()
    }

    pub fn n_queries(&self) -> usize {
        self.allowed.shape()[0]
    }

    pub fn n_keys(&self) -> usize {
        self.allowed.shape()[1]
    }
}

/// Joint-level and relay-level spatial patterns. Keys are the N joints of one
/// frame followed by that frame's relay: joint i sees itself, its skeletal
/// neighbors and the relay; the relay sees everything.
pub fn build_spatial_masks(topo: &SkeletonTopology) -> (SparsityMask, SparsityMask) {
    let n = topo.n_joints();
    let mut joint = Array2::from_elem((n, n + 1), false);
    for i in 0..n {
        joint[[i, i]] = true;
        for &j in topo.neighbors(i) {
            joint[[i, j]] = true;
        }
        joint[[i, n]] = true;
    }
    let relay = Array2::from_elem((1, n + 1), true);
    (
        SparsityMask::new(joint).expect("self edge keeps rows nonempty"),
        SparsityMask::new(relay).expect("full row"),
    )
}

/// Frame-level and relay-level temporal patterns over a length-L window.
/// Frame i sees {i−1, i, i+1} clipped to the boundary, plus the relay; the
/// relay sees everything.
pub fn build_temporal_masks(len: usize) -> (SparsityMask, SparsityMask) {
    let mut frame = Array2::from_elem((len, len + 1), false);
    for i in 0..len {
        frame[[i, i]] = true;
        if i > 0 {
            frame[[i, i - 1]] = true;
        }
        if i + 1 < len {
            frame[[i, i + 1]] = true;
        }
        frame[[i, len]] = true;
    }
    let relay = Array2::from_elem((1, len + 1), true);
    (
        SparsityMask::new(frame).expect("self edge keeps rows nonempty"),
        SparsityMask::new(relay).expect("full row"),
    )
}

fn check_attn_shapes(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    mask: &SparsityMask,
    scale: f64,
) -> Result<()> {
    if q.shape()[1] != k.shape()[1] {
        return Err(Error::Shape(format!(
            "query dim {} vs key dim {}",
            q.shape()[1],
            k.shape()[1]
        )));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::Shape(format!(
            "{} keys vs {} values",
            k.shape()[0],
            v.shape()[0]
        )));
    }
    if mask.n_queries() != q.shape()[0] || mask.n_keys() != k.shape()[0] {
        return Err(Error::Shape(format!(
            "mask {}x{} vs {} queries / {} keys",
            mask.n_queries(),
            mask.n_keys(),
            q.shape()[0],
            k.shape()[0]
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Precondition(format!(
            "attention scale must be positive, got {scale}"
        )));
    }
    Ok(())
}

/// Computes per-query softmax((q·kᵀ)/scale) restricted to the mask and takes
/// the weighted sum of values. Also returns the full Q×K weight matrix, which
/// is exactly zero off-mask.
pub fn masked_attention_with_weights(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    mask: &SparsityMask,
    scale: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_attn_shapes(q, k, v, mask, scale)?;
    let (nq, nk) = (q.shape()[0], k.shape()[0]);
    let scores = q.dot(&k.t()) / scale;
    let mut weights = Array2::zeros((nq, nk));
    for i in 0..nq {
        let mut max = f64::NEG_INFINITY;
        for j in 0..nk {
            if mask.allowed[[i, j]] {
                max = max.max(scores[[i, j]]);
            }
        }
        let mut denom = 0.0;
        for j in 0..nk {
            if mask.allowed[[i, j]] {
                let e = (scores[[i, j]] - max).exp();
                weights[[i, j]] = e;
                denom += e;
            }
        }
        for j in 0..nk {
            weights[[i, j]] /= denom;
        }
    }
    let out = weights.dot(&v);
    Ok((out, weights))
}

pub fn masked_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    mask: &SparsityMask,
    scale: f64,
) -> Result<Array2<f64>> {
    masked_attention_with_weights(q, k, v, mask, scale).map(|(out, _)| out)
}

/// Pulls the attention gradient back onto (q, k, v) given the forward's
/// weight matrix. Off-mask weights are zero, so the masked softmax Jacobian
/// needs no special casing beyond using the stored weights.
pub fn masked_attention_backward(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    weights: ArrayView2<'_, f64>,
    scale: f64,
    grad_out: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let grad_v = weights.t().dot(&grad_out);
    let grad_w = grad_out.dot(&v.t());
    // softmax rows: ds_j = w_j (dw_j − Σ_l w_l dw_l)
    let mut grad_scores = Array2::zeros(weights.raw_dim());
    for i in 0..weights.shape()[0] {
        let row_w = weights.row(i);
        let row_g = grad_w.row(i);
        let inner: f64 = row_w.iter().zip(row_g.iter()).map(|(w, g)| w * g).sum();
        for j in 0..weights.shape()[1] {
            grad_scores[[i, j]] = row_w[j] * (row_g[j] - inner);
        }
    }
    grad_scores /= scale;
    let grad_q = grad_scores.dot(&k);
    let grad_k = grad_scores.t().dot(&q);
    (grad_q, grad_k, grad_v)
}

/// Projection weights of one multi-head attention: H heads of width d packed
/// column-wise into C→H·d maps, plus the H·d→C output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

impl AttnParams {
    pub fn zeros(channels: usize, heads: usize, head_dim: usize) -> Self {
        let hd = heads * head_dim;
        Self {
            w_q: Array2::zeros((channels, hd)),
            w_k: Array2::zeros((channels, hd)),
            w_v: Array2::zeros((channels, hd)),
            w_o: Array2::zeros((hd, channels)),
            b_o: Array1::zeros(channels),
        }
    }

    fn check(&self, channels: usize, heads: usize, head_dim: usize) -> Result<()> {
        let hd = heads * head_dim;
        let ok = self.w_q.dim() == (channels, hd)
            && self.w_k.dim() == (channels, hd)
            && self.w_v.dim() == (channels, hd)
            && self.w_o.dim() == (hd, channels)
            && self.b_o.len() == channels;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "attention params inconsistent with C={channels}, H={heads}, d={head_dim}"
            )))
        }
    }
}

/// Everything the backward pass needs from one multi-head forward.
#[derive(Debug, Clone)]
pub struct MhaCache {
    queries_x: Array2<f64>,
    keys_x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttnGrads {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

impl AttnGrads {
    pub fn zeros(channels: usize, heads: usize, head_dim: usize) -> Self {
        let hd = heads * head_dim;
        Self {
            w_q: Array2::zeros((channels, hd)),
            w_k: Array2::zeros((channels, hd)),
            w_v: Array2::zeros((channels, hd)),
            w_o: Array2::zeros((hd, channels)),
            b_o: Array1::zeros(channels),
        }
    }

    pub fn accumulate(&mut self, other: &AttnGrads) {
        self.w_q += &other.w_q;
        self.w_k += &other.w_k;
        self.w_v += &other.w_v;
        self.w_o += &other.w_o;
        self.b_o += &other.b_o;
    }
}

/// Multi-head masked attention: project, attend per head, concatenate heads,
/// project back to C channels.
pub fn mha_forward(
    queries_x: ArrayView2<'_, f64>,
    keys_x: ArrayView2<'_, f64>,
    params: &AttnParams,
    mask: &SparsityMask,
    heads: usize,
    head_dim: usize,
    scale: f64,
) -> Result<(Array2<f64>, MhaCache)> {
    let channels = queries_x.shape()[1];
    params.check(channels, heads, head_dim)?;
    if keys_x.shape()[1] != channels {
        return Err(Error::Shape(format!(
            "query channels {} vs key channels {}",
            channels,
            keys_x.shape()[1]
        )));
    }
    let q = queries_x.dot(&params.w_q);
    let k = keys_x.dot(&params.w_k);
    let v = keys_x.dot(&params.w_v);
    let mut concat = Array2::zeros((queries_x.shape()[0], heads * head_dim));
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let (out_h, w_h) = masked_attention_with_weights(
            q.slice(cols),
            k.slice(cols),
            v.slice(cols),
            mask,
            scale,
        )?;
        concat.slice_mut(cols).assign(&out_h);
        weights.push(w_h);
    }
    let out = concat.dot(&params.w_o) + &params.b_o;
    let cache = MhaCache {
        queries_x: queries_x.to_owned(),
        keys_x: keys_x.to_owned(),
        q,
        k,
        v,
        weights,
        concat,
    };
    Ok((out, cache))
}

/// Backward of [`mha_forward`]: returns parameter gradients plus gradients on
/// the query-side and key-side token features.
pub fn mha_backward(
    params: &AttnParams,
    cache: &MhaCache,
    heads: usize,
    head_dim: usize,
    scale: f64,
    grad_out: ArrayView2<'_, f64>,
) -> (AttnGrads, Array2<f64>, Array2<f64>) {
    let grad_w_o = cache.concat.t().dot(&grad_out);
    let grad_b_o = grad_out.sum_axis(Axis(0));
    let grad_concat = grad_out.dot(&params.w_o.t());

    let mut grad_q = Array2::zeros(cache.q.raw_dim());
    let mut grad_k = Array2::zeros(cache.k.raw_dim());
    let mut grad_v = Array2::zeros(cache.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let (gq, gk, gv) = masked_attention_backward(
            cache.q.slice(cols),
            cache.k.slice(cols),
            cache.v.slice(cols),
            cache.weights[h].view(),
            scale,
            grad_concat.slice(cols),
        );
        grad_q.slice_mut(cols).assign(&gq);
        grad_k.slice_mut(cols).assign(&gk);
        grad_v.slice_mut(cols).assign(&gv);
    }

    let grads = AttnGrads {
        w_q: cache.queries_x.t().dot(&grad_q),
        w_k: cache.keys_x.t().dot(&grad_k),
        w_v: cache.keys_x.t().dot(&grad_v),
        w_o: grad_w_o,
        b_o: grad_b_o,
    };
    let grad_queries_x = grad_q.dot(&params.w_q.t());
    let grad_keys_x = grad_k.dot(&params.w_k.t()) + grad_v.dot(&params.w_v.t());
    (grads, grad_queries_x, grad_keys_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn uniform_weights_on_equal_scores() {
        let q = array![[0.0]];
        let k = array![[0.0], [0.0]];
        let v = array![[1.0], [3.0]];
        let mask = SparsityMask::all_allowed(1, 2);
        let out = masked_attention(q.view(), k.view(), v.view(), &mask, 1.0).unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_allowed_key_dominates() {
        let q = array![[0.0]];
        let k = array![[0.0], [0.0]];
        let v = array![[1.0], [3.0]];
        let mask = SparsityMask::new(array![[true, false]]).unwrap();
        let out = masked_attention(q.view(), k.view(), v.view(), &mask, 1.0).unwrap();
        assert_eq!(out[[0, 0]], 1.0);
    }

    #[test]
    fn two_key_softmax_value() {
        let q = array![[1.0]];
        let k = array![[1.0], [0.0]];
        let v = array![[1.0], [0.0]];
        let mask = SparsityMask::all_allowed(1, 2);
        let out = masked_attention(q.view(), k.view(), v.view(), &mask, 1.0).unwrap();
        // independent scalar oracle: e^1/(e^1 + e^0)
        let expect = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((out[[0, 0]] - expect).abs() < 1e-12);
        assert!((out[[0, 0]] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn scale_mode_values_and_parse() {
        assert_eq!(ScaleMode::SqrtD.scale(64), 8.0);
        assert_eq!(ScaleMode::D.scale(64), 64.0);
        assert_eq!("sqrt_d".parse::<ScaleMode>().unwrap(), ScaleMode::SqrtD);
        assert_eq!("d".parse::<ScaleMode>().unwrap(), ScaleMode::D);
        assert!("dd".parse::<ScaleMode>().is_err());
        assert_eq!(ScaleMode::SqrtD.to_string(), "sqrt_d");
    }

    #[test]
    fn empty_mask_row_rejected() {
        assert!(matches!(
            SparsityMask::new(array![[true, true], [false, false]]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn spatial_masks_two_joint_chain() {
        let topo = SkeletonTopology::new(2, vec![(0, 1)]).unwrap();
        let (joint, relay) = build_spatial_masks(&topo);
        assert_eq!(joint.allowed().row(0).to_vec(), vec![true, true, true]);
        assert_eq!(joint.allowed().row(1).to_vec(), vec![true, true, true]);
        assert!(relay.allowed().iter().all(|&a| a));
    }

    #[test]
    fn spatial_masks_star() {
        // hub 0 with leaves 1..4
        let topo = SkeletonTopology::new(5, vec![(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        let (joint, _) = build_spatial_masks(&topo);
        assert!(joint.allowed().row(0).iter().all(|&a| a));
        for leaf in 1..5 {
            for j in 0..5 {
                let expect = j == 0 || j == leaf;
                assert_eq!(joint.allowed()[[leaf, j]], expect, "leaf {leaf} key {j}");
            }
            assert!(joint.allowed()[[leaf, 5]]);
        }
    }

    #[test]
    fn temporal_masks_band() {
        let (frame, relay) = build_temporal_masks(3);
        assert_eq!(
            frame.allowed().row(1).to_vec(),
            vec![true, true, true, true]
        );
        assert_eq!(
            frame.allowed().row(0).to_vec(),
            vec![true, true, false, true]
        );
        assert_eq!(
            frame.allowed().row(2).to_vec(),
            vec![false, true, true, true]
        );
        assert!(relay.allowed().iter().all(|&a| a));

        let (single, _) = build_temporal_masks(1);
        assert_eq!(single.allowed().row(0).to_vec(), vec![true, true]);
    }

    fn random_qkv(nq: usize, nk: usize, d: usize, seed: u64) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = crate::seeds::rng_for(seed, &[10]);
        let mut fill = |rows: usize| {
            Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0))
        };
        let q = fill(nq);
        let k = fill(nk);
        let v = fill(nk);
        (q, k, v)
    }

    #[test]
    fn dense_mask_matches_reference_softmax() {
        let (q, k, v) = random_qkv(4, 6, 3, 5);
        let scale = (3f64).sqrt();
        let mask = SparsityMask::all_allowed(4, 6);
        let (out, _) = masked_attention_with_weights(q.view(), k.view(), v.view(), &mask, scale).unwrap();
        // reference: plain softmax without any masking machinery
        let scores = q.dot(&k.t()) / scale;
        for i in 0..4 {
            let row = scores.row(i);
            let exps: Vec<f64> = row.iter().map(|s| s.exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..3 {
                let mut expect = 0.0;
                for j in 0..6 {
                    expect += exps[j] / denom * v[[j, c]];
                }
                assert!((out[[i, c]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_backward_matches_fd() {
        let (q, k, v) = random_qkv(3, 4, 2, 9);
        let mask = SparsityMask::new(array![
            [true, false, true, true],
            [true, true, false, false],
            [false, true, true, true],
        ])
        .unwrap();
        let scale = 1.3;
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            let out = masked_attention(q.view(), k.view(), v.view(), &mask, scale).unwrap();
            // weighted sum keeps the probe scalar sensitive to every output
            out.indexed_iter()
                .map(|((i, j), x)| x * ((i + 2 * j) as f64 + 0.5))
                .sum::<f64>()
        };
        let (_, weights) =
            masked_attention_with_weights(q.view(), k.view(), v.view(), &mask, scale).unwrap();
        let mut grad_out = Array2::zeros((3, 2));
        for ((i, j), g) in grad_out.indexed_iter_mut() {
            *g = (i + 2 * j) as f64 + 0.5;
        }
        let (gq, gk, gv) = masked_attention_backward(
            q.view(),
            k.view(),
            v.view(),
            weights.view(),
            scale,
            grad_out.view(),
        );
        let h = 1e-6;
        let eval_perturbed = |which: usize, idx: [usize; 2], delta: f64| {
            let (mut qa, mut ka, mut va) = (q.clone(), k.clone(), v.clone());
            match which {
                0 => qa[idx] += delta,
                1 => ka[idx] += delta,
                _ => va[idx] += delta,
            }
            loss(&qa, &ka, &va)
        };
        let rows = [q.shape()[0], k.shape()[0], v.shape()[0]];
        for (which, grad) in [(0usize, &gq), (1, &gk), (2, &gv)] {
            for idx in [[0usize, 0usize], [1, 1], [2, 0]] {
                if idx[0] >= rows[which] {
                    continue;
                }
                let fd = (eval_perturbed(which, idx, h) - eval_perturbed(which, idx, -h))
                    / (2.0 * h);
                assert!(
                    (fd - grad[idx]).abs() < 1e-6,
                    "which {which} idx {idx:?}: fd {fd} vs {g}",
                    g = grad[idx]
                );
            }
        }
    }

    #[test]
    fn mha_backward_matches_fd() {
        let channels = 4;
        let heads = 2;
        let d = 3;
        let mut rng = crate::seeds::rng_for(17, &[11]);
        let mut rnd2 = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-0.5..0.5))
        };
        let params = AttnParams {
            w_q: rnd2(channels, heads * d),
            w_k: rnd2(channels, heads * d),
            w_v: rnd2(channels, heads * d),
            w_o: rnd2(heads * d, channels),
            b_o: Array1::from_shape_fn(channels, |i| 0.1 * i as f64),
        };
        let qx = rnd2(3, channels);
        let kx = rnd2(5, channels);
        let mask = SparsityMask::new(Array2::from_shape_fn((3, 5), |(i, j)| (i + j) % 2 == 0 || j == 4)).unwrap();
        let scale = (d as f64).sqrt();

        let weight_fn = |out: &Array2<f64>| -> f64 {
            out.indexed_iter()
                .map(|((i, j), x)| x * (1.0 + i as f64 - 0.3 * j as f64))
                .sum()
        };
        let (out, cache) =
            mha_forward(qx.view(), kx.view(), &params, &mask, heads, d, scale).unwrap();
        let mut grad_out = Array2::zeros(out.raw_dim());
        for ((i, j), g) in grad_out.indexed_iter_mut() {
            *g = 1.0 + i as f64 - 0.3 * j as f64;
        }
        let (grads, gqx, gkx) = mha_backward(&params, &cache, heads, d, scale, grad_out.view());

        let h = 1e-6;
        let eval = |p: &AttnParams, qx: &Array2<f64>, kx: &Array2<f64>| {
            let (o, _) = mha_forward(qx.view(), kx.view(), p, &mask, heads, d, scale).unwrap();
            weight_fn(&o)
        };
        // a few entries from every parameter and both inputs
        for idx in [[0usize, 0usize], [1, 2], [3, 4]] {
            let mut p = params.clone();
            p.w_q[idx] += h;
            let up = eval(&p, &qx, &kx);
            p.w_q[idx] -= 2.0 * h;
            let dn = eval(&p, &qx, &kx);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grads.w_q[idx]).abs() < 1e-6, "w_q {idx:?}");
        }
        for idx in [[0usize, 1usize], [2, 3]] {
            let mut p = params.clone();
            p.w_o[idx] += h;
            let up = eval(&p, &qx, &kx);
            p.w_o[idx] -= 2.0 * h;
            let dn = eval(&p, &qx, &kx);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grads.w_o[idx]).abs() < 1e-6, "w_o {idx:?}");
        }
        {
            let mut p = params.clone();
            p.b_o[2] += h;
            let up = eval(&p, &qx, &kx);
            p.b_o[2] -= 2.0 * h;
            let dn = eval(&p, &qx, &kx);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grads.b_o[2]).abs() < 1e-6, "b_o");
        }
        for idx in [[0usize, 0usize], [2, 3]] {
            let mut x = qx.clone();
            x[idx] += h;
            let up = eval(&params, &x, &kx);
            x[idx] -= 2.0 * h;
            let dn = eval(&params, &x, &kx);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gqx[idx]).abs() < 1e-6, "queries_x {idx:?}");
        }
        for idx in [[0usize, 0usize], [4, 1]] {
            let mut x = kx.clone();
            x[idx] += h;
            let up = eval(&params, &qx, &x);
            x[idx] -= 2.0 * h;
            let dn = eval(&params, &qx, &x);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gkx[idx]).abs() < 1e-6, "keys_x {idx:?}");
        }
    }

    proptest! {
        #[test]
        fn weights_zero_off_mask_and_rows_normalized(
            seed in 0u64..500,
            nq in 1usize..5,
            nk in 1usize..6,
            d in 1usize..4,
        ) {
            let mut rng = crate::seeds::rng_for(seed, &[12]);
            let q = Array2::from_shape_fn((nq, d), |_| rng.random_range(-2.0..2.0));
            let k = Array2::from_shape_fn((nk, d), |_| rng.random_range(-2.0..2.0));
            let v = Array2::from_shape_fn((nk, d), |_| rng.random_range(-2.0..2.0));
            let mut allowed = Array2::from_shape_fn((nq, nk), |_| rng.random_bool(0.6));
            for i in 0..nq {
                let forced = rng.random_range(0..nk);
                allowed[[i, forced]] = true;
            }
            let mask = SparsityMask::new(allowed.clone()).unwrap();
            let (_, w) = masked_attention_with_weights(q.view(), k.view(), v.view(), &mask, 1.0).unwrap();
            for i in 0..nq {
                let mut sum = 0.0;
                for j in 0..nk {
                    if allowed[[i, j]] {
                        sum += w[[i, j]];
                    } else {
                        prop_assert_eq!(w[[i, j]], 0.0);
                    }
                }
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
