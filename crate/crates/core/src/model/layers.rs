//! Forward and reverse-mode kernels for the transformer block pieces.
//!
//! Each `*_forward` returns its output plus a cache; the matching
//! `*_backward` consumes the cache and upstream gradient, accumulates
//! parameter gradients, and returns the input gradient.

use crate::model::params::LayerParams;
use crate::numerics::ops::softmax_in_place;
use crate::numerics::{dot, Matrix};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

/// Row-wise layer norm. With `enabled = false` it is the identity and the
/// cache is `None`.
pub fn layer_norm_forward(
    x: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    enabled: bool,
) -> (Matrix, Option<LnCache>) {
    if !enabled {
        return (x.clone(), None);
    }
    let (s, d) = x.shape();
    let mut xhat = Matrix::zeros(s, d);
    let mut y = Matrix::zeros(s, d);
    let mut inv_std = Vec::with_capacity(s);
    let g = gain.data();
    let b = bias.data();
    for r in 0..s {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(r);
        for (o, v) in xr.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = y.row_mut(r);
        for j in 0..d {
            yr[j] = g[j] * xhat.get(r, j) + b[j];
        }
    }
    (y, Some(LnCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    dy: &Matrix,
    cache: Option<&LnCache>,
    gain: &Matrix,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let Some(cache) = cache else {
        return dy.clone();
    };
    let (s, d) = dy.shape();
    let g = gain.data();
    let mut dx = Matrix::zeros(s, d);
    for r in 0..s {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            dgain.data_mut()[j] += dyr[j] * xh[j];
            dbias.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct AttnCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per head, `s x s` row-stochastic attention weights.
    probs: Vec<Matrix>,
    heads_out: Matrix,
}

impl AttnCache {
    pub fn weights(&self) -> &[Matrix] {
        &self.probs
    }
}

/// Bidirectional multi-head self-attention with output projection.
pub fn attention_forward(x: &Matrix, p: &LayerParams, heads: usize) -> (Matrix, AttnCache) {
    let (s, dm) = x.shape();
    let hd = dm / heads;
    let q = x.matmul(&p.w_q);
    let k = x.matmul(&p.w_k);
    let v = x.matmul(&p.w_v);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = Vec::with_capacity(heads);
    let mut heads_out = Matrix::zeros(s, dm);
    for h in 0..heads {
        let c0 = h * hd;
        let mut a = Matrix::zeros(s, s);
        for i in 0..s {
            let qi = &q.row(i)[c0..c0 + hd];
            let ar = a.row_mut(i);
            for j in 0..s {
                ar[j] = dot(qi, &k.row(j)[c0..c0 + hd]) * scale;
            }
            softmax_in_place(ar);
        }
        for i in 0..s {
            let ar = a.row(i);
            let out = &mut heads_out.row_mut(i)[c0..c0 + hd];
            for (j, &w) in ar.iter().enumerate() {
                let vj = &v.row(j)[c0..c0 + hd];
                for (o, vv) in out.iter_mut().zip(vj) {
                    *o += w * vv;
                }
            }
        }
        probs.push(a);
    }
    let out = heads_out.matmul(&p.w_o);
    (
        out,
        AttnCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            heads_out,
        },
    )
}

pub fn attention_backward(
    dout: &Matrix,
    cache: &AttnCache,
    p: &LayerParams,
    g: &mut LayerParams,
    heads: usize,
) -> Matrix {
    let (s, dm) = cache.x.shape();
    let hd = dm / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    cache.heads_out.t_matmul_acc(dout, &mut g.w_o);
    let dheads = dout.matmul_t(&p.w_o);
    let mut dq = Matrix::zeros(s, dm);
    let mut dk = Matrix::zeros(s, dm);
    let mut dv = Matrix::zeros(s, dm);
    let mut ds = vec![0.0; s];
    for h in 0..heads {
        let c0 = h * hd;
        let a = &cache.probs[h];
        for i in 0..s {
            let dho = &dheads.row(i)[c0..c0 + hd];
            let ar = a.row(i);
            // dA[i, j] = dho . v_j ; dV_j += A[i, j] dho
            for j in 0..s {
                ds[j] = dot(dho, &cache.v.row(j)[c0..c0 + hd]);
                let dvj = &mut dv.row_mut(j)[c0..c0 + hd];
                for (o, x) in dvj.iter_mut().zip(dho) {
                    *o += ar[j] * x;
                }
            }
            let inner = dot(&ds, ar);
            for j in 0..s {
                ds[j] = ar[j] * (ds[j] - inner) * scale;
            }
            for j in 0..s {
                let w = ds[j];
                if w == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[c0..c0 + hd];
                let qi = &cache.q.row(i)[c0..c0 + hd];
                let dqi = &mut dq.row_mut(i)[c0..c0 + hd];
                for (o, kv) in dqi.iter_mut().zip(kj) {
                    *o += w * kv;
                }
                let dkj = &mut dk.row_mut(j)[c0..c0 + hd];
                for (o, qv) in dkj.iter_mut().zip(qi) {
                    *o += w * qv;
                }
            }
        }
    }
    cache.x.t_matmul_acc(&dq, &mut g.w_q);
    cache.x.t_matmul_acc(&dk, &mut g.w_k);
    cache.x.t_matmul_acc(&dv, &mut g.w_v);
    let mut dx = dq.matmul_t(&p.w_q);
    dx.add_assign(&dk.matmul_t(&p.w_k));
    dx.add_assign(&dv.matmul_t(&p.w_v));
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Matrix,
    pre: Matrix,
    act: Matrix,
}

pub fn mlp_forward(x: &Matrix, p: &LayerParams) -> (Matrix, MlpCache) {
    let mut pre = x.matmul(&p.mlp_w1);
    pre.add_row_broadcast(p.mlp_b1.data());
    let mut act = pre.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let mut out = act.matmul(&p.mlp_w2);
    out.add_row_broadcast(p.mlp_b2.data());
    (
        out,
        MlpCache {
            x: x.clone(),
            pre,
            act,
        },
    )
}

pub fn mlp_backward(dout: &Matrix, cache: &MlpCache, p: &LayerParams, g: &mut LayerParams) -> Matrix {
    cache.act.t_matmul_acc(dout, &mut g.mlp_w2);
    for (b, v) in g.mlp_b2.data_mut().iter_mut().zip(dout.column_sums()) {
        *b += v;
    }
    let mut dpre = dout.matmul_t(&p.mlp_w2);
    for (d, &z) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        *d *= gelu_grad(z);
    }
    cache.x.t_matmul_acc(&dpre, &mut g.mlp_w1);
    for (b, v) in g.mlp_b1.data_mut().iter_mut().zip(dpre.column_sums()) {
        *b += v;
    }
    dpre.matmul_t(&p.mlp_w1)
}

/// What replaced (or is) the attention sublayer in one block.
#[derive(Clone, Debug)]
pub enum AttnPath {
    Full(AttnCache),
    Compensated,
    Skipped,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pub residual_in: Matrix,
    pub attn_in: Matrix,
    pub attn_out: Matrix,
    ln1: Option<LnCache>,
    attn: AttnPath,
    ln2: Option<LnCache>,
    mlp: MlpCache,
}

impl BlockCache {
    pub fn attention(&self) -> &AttnPath {
        &self.attn
    }
}

/// `x + A(LN(x))` followed by `x + MLP(LN(x))`. For a pruned layer `A` is
/// `LN(x) W_c` when a compensation matrix is installed, zero otherwise.
pub fn block_forward(x: &Matrix, p: &LayerParams, heads: usize, ln: bool) -> (Matrix, BlockCache) {
    let (attn_in, ln1) = layer_norm_forward(x, &p.ln1_gain, &p.ln1_bias, ln);
    let (attn_out, attn) = if p.pruned {
        match &p.compensation {
            Some(wc) => (attn_in.matmul(wc), AttnPath::Compensated),
            None => (Matrix::zeros(x.rows(), x.cols()), AttnPath::Skipped),
        }
    } else {
        let (o, c) = attention_forward(&attn_in, p, heads);
        (o, AttnPath::Full(c))
    };
    let mid = x.add(&attn_out);
    let (mlp_in, ln2) = layer_norm_forward(&mid, &p.ln2_gain, &p.ln2_bias, ln);
    let (mlp_out, mlp) = mlp_forward(&mlp_in, p);
    let out = mid.add(&mlp_out);
    (
        out,
        BlockCache {
            residual_in: x.clone(),
            attn_in,
            attn_out,
            ln1,
            attn,
            ln2,
            mlp,
        },
    )
}

pub fn block_backward(
    dout: &Matrix,
    cache: &BlockCache,
    p: &LayerParams,
    g: &mut LayerParams,
    heads: usize,
    train_compensation: bool,
) -> Matrix {
    let dmlp_in = mlp_backward(dout, &cache.mlp, p, g);
    let mut dmid = layer_norm_backward(
        &dmlp_in,
        cache.ln2.as_ref(),
        &p.ln2_gain,
        &mut g.ln2_gain,
        &mut g.ln2_bias,
    );
    dmid.add_assign(dout);
    let dattn_in = match &cache.attn {
        AttnPath::Full(c) => Some(attention_backward(&dmid, c, p, g, heads)),
        AttnPath::Compensated => {
            let wc = p.compensation.as_ref().expect("compensated layer without W_c");
            if train_compensation {
                if let Some(gwc) = g.compensation.as_mut() {
                    cache.attn_in.t_matmul_acc(&dmid, gwc);
                }
            }
            Some(dmid.matmul_t(wc))
        }
        AttnPath::Skipped => None,
    };
    let mut dx = dmid;
    if let Some(da) = dattn_in {
        let d_ln = layer_norm_backward(
            &da,
            cache.ln1.as_ref(),
            &p.ln1_gain,
            &mut g.ln1_gain,
            &mut g.ln1_bias,
        );
        dx.add_assign(&d_ln);
    }
    dx
}
