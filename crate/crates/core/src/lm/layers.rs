//! Forward/backward kernels for the decoder blocks. Every backward here is
//! validated against finite differences in `model::tests`.

use crate::numerics::ValueGrid;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Cached statistics of one layer-norm application.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: ValueGrid,
    pub rstd: Vec<f64>,
}

/// Row-wise layer norm with gain and bias (both `1 × d`).
pub(crate) fn layer_norm(x: &ValueGrid, gain: &ValueGrid, bias: &ValueGrid) -> (ValueGrid, LnCache) {
    let (n, d) = x.shape();
    let mut xhat = ValueGrid::zeros(n, d);
    let mut out = ValueGrid::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[(i, j)] = h;
            out[(i, j)] = gain[(0, j)] * h + bias[(0, j)];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns `dx` and accumulates into `dgain`, `dbias`.
pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    gain: &ValueGrid,
    dy: &ValueGrid,
    dgain: &mut ValueGrid,
    dbias: &mut ValueGrid,
) -> ValueGrid {
    let (n, d) = dy.shape();
    let mut dx = ValueGrid::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..d {
            dgain[(0, j)] += g[j] * xh[j];
            dbias[(0, j)] += g[j];
            dxhat[j] = g[j] * gain[(0, j)];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[(i, j)] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

/// `x · w + b` with `b` broadcast over rows.
pub(crate) fn linear(x: &ValueGrid, w: &ValueGrid, b: &ValueGrid) -> ValueGrid {
    let mut y = x.matmul(w).expect("linear: caller guarantees shapes");
    for i in 0..y.rows() {
        for (v, bias) in y.row_mut(i).iter_mut().zip(b.row(0)) {
            *v += bias;
        }
    }
    y
}

/// Returns `dx`; accumulates `dw`, `db`.
pub(crate) fn linear_backward(
    x: &ValueGrid,
    w: &ValueGrid,
    dy: &ValueGrid,
    dw: &mut ValueGrid,
    db: &mut ValueGrid,
) -> ValueGrid {
    dw.add_assign(&x.t_matmul(dy).expect("shapes"))
        .expect("dw shape");
    for i in 0..dy.rows() {
        for (acc, v) in db.row_mut(0).iter_mut().zip(dy.row(i)) {
            *acc += v;
        }
    }
    dy.matmul_t(w).expect("shapes")
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Causal multi-head attention over packed `qkv` (`n × 3d`). Returns the
/// concatenated head outputs (`n × d`) and per-head attention (`n × n`,
/// zero above the diagonal).
pub(crate) fn causal_attention(qkv: &ValueGrid, heads: usize) -> (ValueGrid, Vec<ValueGrid>) {
    let n = qkv.rows();
    let d = qkv.cols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = ValueGrid::zeros(n, d);
    let mut atts = Vec::with_capacity(heads);
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let mut att = ValueGrid::zeros(n, n);
        for r in 0..n {
            let q = &qkv.row(r)[qo..qo + dh];
            let mut max = f64::NEG_INFINITY;
            for c in 0..=r {
                let k = &qkv.row(c)[ko..ko + dh];
                scores[c] = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                max = max.max(scores[c]);
            }
            let mut total = 0.0;
            for s in scores.iter_mut().take(r + 1) {
                *s = (*s - max).exp();
                total += *s;
            }
            for c in 0..=r {
                let p = scores[c] / total;
                att[(r, c)] = p;
                let v = &qkv.row(c)[vo..vo + dh];
                for (o, vv) in out.row_mut(r)[qo..qo + dh].iter_mut().zip(v) {
                    *o += p * vv;
                }
            }
        }
        atts.push(att);
    }
    (out, atts)
}

pub(crate) fn causal_attention_backward(
    qkv: &ValueGrid,
    atts: &[ValueGrid],
    dout: &ValueGrid,
) -> ValueGrid {
    let n = qkv.rows();
    let d = qkv.cols() / 3;
    let heads = atts.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = ValueGrid::zeros(n, 3 * d);
    let mut datt = vec![0.0; n];
    for (h, att) in atts.iter().enumerate() {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for r in 0..n {
            let g = &dout.row(r)[qo..qo + dh];
            let mut weighted = 0.0;
            for c in 0..=r {
                let v = &qkv.row(c)[vo..vo + dh];
                datt[c] = g.iter().zip(v).map(|(a, b)| a * b).sum();
                weighted += att[(r, c)] * datt[c];
                let p = att[(r, c)];
                for (dv, gg) in dqkv.row_mut(c)[vo..vo + dh].iter_mut().zip(g) {
                    *dv += p * gg;
                }
            }
            for c in 0..=r {
                let ds = att[(r, c)] * (datt[c] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    let k = qkv[(c, ko + t)];
                    let q = qkv[(r, qo + t)];
                    dqkv[(r, qo + t)] += ds * k;
                    dqkv[(c, ko + t)] += ds * q;
                }
            }
        }
    }
    dqkv
}
