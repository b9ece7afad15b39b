// Raw slice kernels behind the tape primitives. All loops run in a fixed
// order so results are bit-reproducible.

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `da[m×k] += dc[m×n] · bᵀ`.
pub(crate) fn matmul_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += dot(drow, brow);
        }
    }
}

/// `db[k×n] += aᵀ · dc[m×n]`.
pub(crate) fn matmul_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, g) in dbrow.iter_mut().zip(drow) {
                *d += av * g;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Row-wise `(x - mean) / sqrt(var + eps)` with biased variance; returns the
/// normalised values and the per-row reciprocal standard deviation.
pub(crate) fn normalize_rows(x: &[f64], m: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / m);
    for row in x.chunks(m) {
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        xhat.extend(row.iter().map(|v| (v - mean) * r));
    }
    (xhat, rstd)
}

pub(crate) fn layer_norm_grad_input(
    dy: &[f64],
    gain: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    m: usize,
    dx: &mut [f64],
) {
    let mut dxhat = vec![0.0; m];
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * m..(r + 1) * m];
        let xr = &xhat[r * m..(r + 1) * m];
        for ((d, g), w) in dxhat.iter_mut().zip(dyr).zip(gain) {
            *d = g * w;
        }
        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
        let mean_dx = dot(&dxhat, xr) / m as f64;
        for ((o, d), xh) in dx[r * m..(r + 1) * m].iter_mut().zip(&dxhat).zip(xr) {
            *o += rs * (d - mean_d - xh * mean_dx);
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &[f64], v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(v) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|z| (z - max).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|p| *p /= s);
    }
    out
}

/// Per-row negative log-likelihood of the target under softmax.
pub(crate) fn row_nll(logits: &[f64], v: usize, targets: &[usize]) -> Vec<f64> {
    logits
        .chunks(v)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .collect()
}

/// Causal multi-head attention. `qkv` is `[t, 3m]` with queries, keys and
/// values packed along columns; returns the `[t, m]` output and the
/// `[heads, t, t]` attention probabilities (upper triangle zero).
pub(crate) fn attention_forward(qkv: &[f64], t: usize, m: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let w = 3 * m;
    let mut out = vec![0.0; t * m];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, m + h * dh, 2 * m + h * dh);
        for i in 0..t {
            let q = &qkv[i * w + qo..i * w + qo + dh];
            let p = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let k = &qkv[j * w + ko..j * w + ko + dh];
                p[j] = dot(q, k) * scale;
                max = max.max(p[j]);
            }
            let mut s = 0.0;
            for pj in p[..=i].iter_mut() {
                *pj = (*pj - max).exp();
                s += *pj;
            }
            p[..=i].iter_mut().for_each(|pj| *pj /= s);
            let o = &mut out[i * m + h * dh..i * m + h * dh + dh];
            for j in 0..=i {
                let pj = p[j];
                let v = &qkv[j * w + vo..j * w + vo + dh];
                o.iter_mut().zip(v).for_each(|(o, v)| *o += pj * v);
            }
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    dout: &[f64],
    t: usize,
    m: usize,
    heads: usize,
    dqkv: &mut [f64],
) {
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let w = 3 * m;
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, m + h * dh, 2 * m + h * dh);
        for i in 0..t {
            let p = &probs[(h * t + i) * t..(h * t + i) * t + t];
            let go = &dout[i * m + h * dh..i * m + h * dh + dh];
            for j in 0..=i {
                let v = &qkv[j * w + vo..j * w + vo + dh];
                dp[j] = dot(go, v);
                let dv = &mut dqkv[j * w + vo..j * w + vo + dh];
                dv.iter_mut().zip(go).for_each(|(d, g)| *d += p[j] * g);
            }
            let inner: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
            for j in 0..=i {
                let ds = p[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    let kc = qkv[j * w + ko + c];
                    let qc = qkv[i * w + qo + c];
                    dqkv[i * w + qo + c] += ds * kc;
                    dqkv[j * w + ko + c] += ds * qc;
                }
            }
        }
    }
}
