//! Transformer building blocks with explicit forward caches and backward
//! passes. Parameter gradients are accumulated into a flat gradient buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::params::{mat, mat_mut, vector, vector_mut, Init, LayoutBuilder, Slot};

pub const LN_EPS: f64 = 1e-5;

/// `x @ w + b`.
pub fn linear_forward(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates `dw`, `db` into `grads` and returns `dx`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    params: &[f64],
    w: Slot,
    b: Slot,
    dy: ArrayView2<f64>,
    grads: &mut [f64],
) -> Array2<f64> {
    let dx = dy.dot(&mat(params, w).t());
    general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut mat_mut(grads, w));
    vector_mut(grads, b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    dx
}

#[derive(Clone, Debug)]
pub struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub fn layer_norm_forward(
    x: ArrayView2<f64>,
    g: ArrayView1<f64>,
    b: ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let mut y = &xhat * &g;
    y += &b;
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    params: &[f64],
    g: Slot,
    b: Slot,
    grads: &mut [f64],
) -> Array2<f64> {
    let gamma = vector(params, g);
    vector_mut(grads, g).scaled_add(1.0, &(&dy * &cache.xhat).sum_axis(Axis(0)));
    vector_mut(grads, b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let d = dy.ncols() as f64;
    let mut dx = &dy * &gamma;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xh) / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|v, &h| *v = r * (*v - mean_d - h * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu_backward(pre: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx)
        .and(pre)
        .for_each(|d, &x| *d *= gelu_grad(x));
    dx
}

#[derive(Clone, Debug)]
pub struct AttnCache {
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    heads: Array2<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnSlots {
    pub w_qkv: Slot,
    pub b_qkv: Slot,
    pub w_o: Slot,
    pub b_o: Slot,
}

/// Multi-head causal self-attention. Position `i` attends to `0..=i`.
pub fn attention_forward(
    x: ArrayView2<f64>,
    params: &[f64],
    s: &AttnSlots,
    n_heads: usize,
) -> (Array2<f64>, AttnCache) {
    let n = x.nrows();
    let d = s.w_o.rows;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear_forward(x, mat(params, s.w_qkv), vector(params, s.b_qkv));
    let mut heads = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut p = q.dot(&k.t());
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let max = row
                .slice(s![..=i])
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j <= i {
                    *v = (*v * scale - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row /= sum;
        }
        heads
            .slice_mut(s![.., h * dh..(h + 1) * dh])
            .assign(&p.dot(&v));
        probs.push(p);
    }
    let out = linear_forward(heads.view(), mat(params, s.w_o), vector(params, s.b_o));
    (out, AttnCache { qkv, probs, heads })
}

pub fn attention_backward(
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    cache: &AttnCache,
    params: &[f64],
    s: &AttnSlots,
    n_heads: usize,
    grads: &mut [f64],
) -> Array2<f64> {
    let n = x.nrows();
    let d = s.w_o.rows;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_heads = linear_backward(cache.heads.view(), params, s.w_o, s.b_o, dy, grads);
    let mut dqkv = Array2::zeros((n, 3 * d));
    for (h, p) in cache.probs.iter().enumerate() {
        let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = cache
            .qkv
            .slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let d_out = d_heads.slice(s![.., h * dh..(h + 1) * dh]);
        let mut ds = d_out.dot(&v.t());
        let dv = p.t().dot(&d_out);
        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = ds_row.dot(&p_row);
            Zip::from(&mut ds_row)
                .and(&p_row)
                .for_each(|g, &pv| *g = pv * (*g - dot) * scale);
        }
        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh])
            .assign(&ds.dot(&k));
        dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
            .assign(&ds.t().dot(&q));
        dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
            .assign(&dv);
    }
    linear_backward(x, params, s.w_qkv, s.b_qkv, dqkv.view(), grads)
}

/// Parameter slots of one pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub attn: AttnSlots,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w_fc: Slot,
    pub b_fc: Slot,
    pub w_proj: Slot,
    pub b_proj: Slot,
}

impl BlockSlots {
    pub fn register(b: &mut LayoutBuilder, prefix: &str, d: usize, d_ff: usize, std: f64) -> Self {
        Self {
            ln1_g: b.vector(format!("{prefix}.ln1.g"), d, Init::Ones),
            ln1_b: b.vector(format!("{prefix}.ln1.b"), d, Init::Zeros),
            attn: AttnSlots {
                w_qkv: b.matrix(format!("{prefix}.attn.w_qkv"), d, 3 * d, Init::Normal(std)),
                b_qkv: b.vector(format!("{prefix}.attn.b_qkv"), 3 * d, Init::Zeros),
                w_o: b.matrix(format!("{prefix}.attn.w_o"), d, d, Init::Normal(std)),
                b_o: b.vector(format!("{prefix}.attn.b_o"), d, Init::Zeros),
            },
            ln2_g: b.vector(format!("{prefix}.ln2.g"), d, Init::Ones),
            ln2_b: b.vector(format!("{prefix}.ln2.b"), d, Init::Zeros),
            w_fc: b.matrix(format!("{prefix}.ff.w_fc"), d, d_ff, Init::Normal(std)),
            b_fc: b.vector(format!("{prefix}.ff.b_fc"), d_ff, Init::Zeros),
            w_proj: b.matrix(format!("{prefix}.ff.w_proj"), d_ff, d, Init::Normal(std)),
            b_proj: b.vector(format!("{prefix}.ff.b_proj"), d, Init::Zeros),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LnCache,
    ln1_out: Array2<f64>,
    attn: AttnCache,
    ln2: LnCache,
    ln2_out: Array2<f64>,
    fc_pre: Array2<f64>,
    fc_act: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    drop_ff: Option<Array2<f64>>,
}

/// Inverted-dropout mask with entries in `{0, 1/(1-p)}`.
fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

pub struct Dropout<'r, R: Rng + ?Sized> {
    pub p: f64,
    pub rng: &'r mut R,
}

/// `x1 = x + attn(ln1(x))`, `y = x1 + proj(gelu(fc(ln2(x1))))`.
pub fn block_forward<R: Rng + ?Sized>(
    x: Array2<f64>,
    params: &[f64],
    s: &BlockSlots,
    n_heads: usize,
    mut dropout: Option<&mut Dropout<'_, R>>,
) -> (Array2<f64>, BlockCache) {
    let (ln1_out, ln1) =
        layer_norm_forward(x.view(), vector(params, s.ln1_g), vector(params, s.ln1_b));
    let (mut a, attn) = attention_forward(ln1_out.view(), params, &s.attn, n_heads);
    let drop_attn = dropout.as_mut().map(|d| dropout_mask(a.dim(), d.p, d.rng));
    if let Some(m) = &drop_attn {
        a *= m;
    }
    let x1 = &x + &a;
    let (ln2_out, ln2) =
        layer_norm_forward(x1.view(), vector(params, s.ln2_g), vector(params, s.ln2_b));
    let fc_pre = linear_forward(ln2_out.view(), mat(params, s.w_fc), vector(params, s.b_fc));
    let fc_act = fc_pre.mapv(gelu);
    let mut f = linear_forward(
        fc_act.view(),
        mat(params, s.w_proj),
        vector(params, s.b_proj),
    );
    let drop_ff = dropout.as_mut().map(|d| dropout_mask(f.dim(), d.p, d.rng));
    if let Some(m) = &drop_ff {
        f *= m;
    }
    let y = &x1 + &f;
    (
        y,
        BlockCache {
            ln1,
            ln1_out,
            attn,
            ln2,
            ln2_out,
            fc_pre,
            fc_act,
            drop_attn,
            drop_ff,
        },
    )
}

pub fn block_backward(
    dy: Array2<f64>,
    cache: &BlockCache,
    params: &[f64],
    s: &BlockSlots,
    n_heads: usize,
    grads: &mut [f64],
) -> Array2<f64> {
    let mut df = dy.clone();
    if let Some(m) = &cache.drop_ff {
        df *= m;
    }
    let d_act = linear_backward(
        cache.fc_act.view(),
        params,
        s.w_proj,
        s.b_proj,
        df.view(),
        grads,
    );
    let d_pre = gelu_backward(&cache.fc_pre, d_act.view());
    let d_ln2 = linear_backward(
        cache.ln2_out.view(),
        params,
        s.w_fc,
        s.b_fc,
        d_pre.view(),
        grads,
    );
    let mut dx1 = dy;
    dx1 += &layer_norm_backward(d_ln2.view(), &cache.ln2, params, s.ln2_g, s.ln2_b, grads);
    let mut da = dx1.clone();
    if let Some(m) = &cache.drop_attn {
        da *= m;
    }
    let d_ln1 = attention_backward(
        cache.ln1_out.view(),
        da.view(),
        &cache.attn,
        params,
        &s.attn,
        n_heads,
        grads,
    );
    dx1 += &layer_norm_backward(d_ln1.view(), &cache.ln1, params, s.ln1_g, s.ln1_b, grads);
    dx1
}

pub fn stack_forward<R: Rng + ?Sized>(
    mut x: Array2<f64>,
    params: &[f64],
    blocks: &[BlockSlots],
    n_heads: usize,
    mut dropout: Option<&mut Dropout<'_, R>>,
) -> (Array2<f64>, Vec<BlockCache>) {
    let mut caches = Vec::with_capacity(blocks.len());
    for s in blocks {
        let (y, c) = block_forward(x, params, s, n_heads, dropout.as_deref_mut());
        caches.push(c);
        x = y;
    }
    (x, caches)
}

pub fn stack_backward(
    mut dy: Array2<f64>,
    caches: &[BlockCache],
    params: &[f64],
    blocks: &[BlockSlots],
    n_heads: usize,
    grads: &mut [f64],
) -> Array2<f64> {
    for (s, c) in blocks.iter().zip(caches).rev() {
        dy = block_backward(dy, c, params, s, n_heads, grads);
    }
    dy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.37 - 2.0);
        let g = Array1::ones(8);
        let b = Array1::zeros(8);
        let (y, _) = layer_norm_forward(x.view(), g.view(), b.view());
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            assert!((row.dot(&row) / 8.0 - 1.0).abs() < 1e-3);
        }
    }

    /// Central differences on a scalar `sum(y * w)` through one block.
    #[test]
    fn block_backward_matches_finite_differences() {
        let (d, ff, heads, n) = (8, 16, 2, 5);
        let mut lb = LayoutBuilder::default();
        let slots = BlockSlots::register(&mut lb, "b", d, ff, 0.3);
        let entries = lb.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = init_params(&entries, &mut rng);
        for v in params.iter_mut() {
            *v += 0.05 * rng.random::<f64>();
        }
        let x = Array2::from_shape_simple_fn((n, d), || rng.random::<f64>() - 0.5);
        let wsum = Array2::from_shape_simple_fn((n, d), || rng.random::<f64>() - 0.5);
        let loss = |p: &[f64], x: &Array2<f64>| {
            let (y, _) = block_forward::<ChaCha8Rng>(x.clone(), p, &slots, heads, None);
            (&y * &wsum).sum()
        };
        let (_, cache) = block_forward::<ChaCha8Rng>(x.clone(), &params, &slots, heads, None);
        let mut grads = vec![0.0; params.len()];
        let dx = block_backward(wsum.clone(), &cache, &params, &slots, heads, &mut grads);
        let h = 1e-5;
        for idx in (0..params.len()).step_by(7) {
            let orig = params[idx];
            params[idx] = orig + h;
            let up = loss(&params, &x);
            params[idx] = orig - h;
            let dn = loss(&params, &x);
            params[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - grads[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {idx}: fd {fd} vs {}",
                grads[idx]
            );
        }
        let mut xp = x.clone();
        for i in 0..n {
            for j in 0..d {
                let orig = xp[(i, j)];
                xp[(i, j)] = orig + h;
                let up = loss(&params, &xp);
                xp[(i, j)] = orig - h;
                let dn = loss(&params, &xp);
                xp[(i, j)] = orig;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - dx[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
