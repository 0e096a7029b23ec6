use rayon::prelude::*;

use super::{Result, Tensor, TensorError, MIN_ROW_NORM};

/// Work size (multiply-adds) above which conv2d splits output rows across threads.
const PAR_CONV_WORK: usize = 1 << 18;

/// The closed set of differentiable operations understood by the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[n, k] x [k, m] -> [n, m]`
    Matmul,
    /// Stride-1, same-size zero-padded convolution.
    /// `[H, W, Cin]` with kernel `[kh, kw, Cin, Cout]` (odd extents) -> `[H, W, Cout]`.
    Conv2d,
    /// Elementwise sum. The second operand may match a trailing suffix of the
    /// first operand's shape, in which case it is broadcast over the leading axes.
    Add,
    MulScalar(f32),
    Relu,
    /// Mean of all elements, shape `[1]`.
    ReduceMean,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Vec<usize>),
    /// `[n, d], [m, d] -> [n, m]` cosine similarities.
    CosineRows,
    SoftmaxRows,
    /// Max over column groups: `[n, m] -> [n, groups]`; `group_of[j]` names the
    /// group of column `j`. Empty groups yield 0.
    GroupMax {
        group_of: Vec<usize>,
        groups: usize,
    },
    /// Divide every row by its sum.
    NormalizeRows,
    /// Mean over rows of `-ln p[i, targets[i]]`, skipping rows whose target is `ignore`.
    NllMean {
        targets: Vec<usize>,
        ignore: Option<usize>,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Conv2d => "conv2d",
            Primitive::Add => "add",
            Primitive::MulScalar(_) => "mul_scalar",
            Primitive::Relu => "relu",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape(_) => "reshape",
            Primitive::CosineRows => "cosine_rows",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::GroupMax { .. } => "group_max",
            Primitive::NormalizeRows => "normalize_rows",
            Primitive::NllMean { .. } => "nll_mean",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Matmul | Primitive::Conv2d | Primitive::Add | Primitive::CosineRows => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Gradients of the output with respect to each input, given the upstream
    /// gradient `grad`. Inputs with `needs[i] == false` get `None`.
    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Primitive::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let da = want(0).then(|| {
                    let mut da = vec![0.0f32; n * k];
                    for i in 0..n {
                        let g = &grad[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &b.data[p * m..(p + 1) * m];
                            da[i * k + p] = dot(g, brow);
                        }
                    }
                    da
                });
                let db = want(1).then(|| {
                    let mut db = vec![0.0f32; k * m];
                    for i in 0..n {
                        let g = &grad[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = a.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            axpy(av, g, &mut db[p * m..(p + 1) * m]);
                        }
                    }
                    db
                });
                vec![da, db]
            }
            Primitive::Conv2d => conv2d_backward(inputs[0], inputs[1], grad, want(0), want(1)),
            Primitive::Add => {
                let da = want(0).then(|| grad.to_vec());
                let db = want(1).then(|| {
                    let len = inputs[1].numel();
                    let mut db = vec![0.0f32; len];
                    for chunk in grad.chunks(len) {
                        db.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                    db
                });
                vec![da, db]
            }
            Primitive::MulScalar(s) => vec![want(0).then(|| grad.iter().map(|g| g * s).collect())],
            Primitive::Relu => vec![want(0).then(|| {
                inputs[0]
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect()
            })],
            Primitive::ReduceMean => {
                let n = inputs[0].numel();
                vec![want(0).then(|| vec![grad[0] / n as f32; n])]
            }
            Primitive::Concat { axis } => {
                let outer: usize = output.shape[..*axis].iter().product();
                let inner: usize = output.shape[axis + 1..].iter().product();
                let out_block = output.shape[*axis] * inner;
                let mut offset = 0;
                inputs
                    .iter()
                    .enumerate()
                    .map(|(idx, t)| {
                        let block = t.shape[*axis] * inner;
                        let g = want(idx).then(|| {
                            let mut g = Vec::with_capacity(t.numel());
                            for o in 0..outer {
                                let start = o * out_block + offset;
                                g.extend_from_slice(&grad[start..start + block]);
                            }
                            g
                        });
                        offset += block;
                        g
                    })
                    .collect()
            }
            Primitive::Slice { axis, start, end } => {
                let x = inputs[0];
                let outer: usize = x.shape[..*axis].iter().product();
                let inner: usize = x.shape[axis + 1..].iter().product();
                let in_block = x.shape[*axis] * inner;
                let out_block = (end - start) * inner;
                vec![want(0).then(|| {
                    let mut g = vec![0.0f32; x.numel()];
                    for o in 0..outer {
                        let dst = o * in_block + start * inner;
                        g[dst..dst + out_block].copy_from_slice(&grad[o * out_block..(o + 1) * out_block]);
                    }
                    g
                })]
            }
            Primitive::Reshape(_) => vec![want(0).then(|| grad.to_vec())],
            Primitive::CosineRows => cosine_backward(inputs[0], inputs[1], output, grad, want(0), want(1)),
            Primitive::SoftmaxRows => {
                let m = output.shape[1];
                vec![want(0).then(|| {
                    let mut dx = vec![0.0f32; output.numel()];
                    for (i, (y, g)) in output.data.chunks(m).zip(grad.chunks(m)).enumerate() {
                        let s: f64 = y.iter().zip(g).map(|(&y, &g)| y as f64 * g as f64).sum();
                        for j in 0..m {
                            dx[i * m + j] = (y[j] as f64 * (g[j] as f64 - s)) as f32;
                        }
                    }
                    dx
                })]
            }
            Primitive::GroupMax { group_of, groups } => {
                let x = inputs[0];
                let m = x.shape[1];
                vec![want(0).then(|| {
                    let mut dx = vec![0.0f32; x.numel()];
                    for i in 0..x.shape[0] {
                        let row = &x.data[i * m..(i + 1) * m];
                        for (g, arg) in group_argmax(row, group_of, *groups).into_iter().enumerate() {
                            if let Some(j) = arg {
                                dx[i * m + j] += grad[i * groups + g];
                            }
                        }
                    }
                    dx
                })]
            }
            Primitive::NormalizeRows => {
                let x = inputs[0];
                let c = x.shape[1];
                vec![want(0).then(|| {
                    let mut dx = vec![0.0f32; x.numel()];
                    for i in 0..x.shape[0] {
                        let row = &x.data[i * c..(i + 1) * c];
                        let y = &output.data[i * c..(i + 1) * c];
                        let g = &grad[i * c..(i + 1) * c];
                        let s: f64 = row.iter().map(|&v| v as f64).sum();
                        let gy: f64 = g.iter().zip(y).map(|(&g, &y)| g as f64 * y as f64).sum();
                        for j in 0..c {
                            dx[i * c + j] = ((g[j] as f64 - gy) / s) as f32;
                        }
                    }
                    dx
                })]
            }
            Primitive::NllMean { targets, ignore } => {
                let p = inputs[0];
                let c = p.shape[1];
                let count = counted_rows(targets, *ignore);
                vec![want(0).then(|| {
                    let mut dp = vec![0.0f32; p.numel()];
                    for (i, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let idx = i * c + t;
                        dp[idx] = (-(grad[0] as f64) / (count as f64 * p.data[idx] as f64)) as f32;
                    }
                    dp
                })]
            }
        }
    }
}

/// Applies `prim` to `inputs`; the pure forward half of every tape operation.
pub fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    let op = prim.name();
    if let Some(n) = prim.arity() {
        if inputs.len() != n {
            return Err(mismatch(op, format!("expected {n} inputs, got {}", inputs.len())));
        }
    }
    let out = match prim {
        Primitive::Matmul => matmul(inputs[0], inputs[1])?,
        Primitive::Conv2d => conv2d(inputs[0], inputs[1])?,
        Primitive::Add => add(inputs[0], inputs[1])?,
        Primitive::MulScalar(s) => {
            Tensor::from_parts(inputs[0].shape.clone(), inputs[0].data.iter().map(|v| v * s).collect())
        }
        Primitive::Relu => Tensor::from_parts(
            inputs[0].shape.clone(),
            inputs[0].data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        ),
        Primitive::ReduceMean => {
            let x = inputs[0];
            if x.numel() == 0 {
                return Err(mismatch(op, "empty input".into()));
            }
            let s: f64 = x.data.iter().map(|&v| v as f64).sum();
            Tensor::scalar((s / x.numel() as f64) as f32)
        }
        Primitive::Concat { axis } => concat(inputs, *axis)?,
        Primitive::Slice { axis, start, end } => slice(inputs[0], *axis, *start, *end)?,
        Primitive::Reshape(shape) => inputs[0].clone().reshape(shape.clone())?,
        Primitive::CosineRows => cosine_rows(inputs[0], inputs[1])?,
        Primitive::SoftmaxRows => softmax_rows(inputs[0])?,
        Primitive::GroupMax { group_of, groups } => group_max(inputs[0], group_of, *groups)?,
        Primitive::NormalizeRows => normalize_rows(inputs[0])?,
        Primitive::NllMean { targets, ignore } => nll_mean(inputs[0], targets, *ignore)?,
    };
    out.ensure_finite(op)
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn expect_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() == rank {
        Ok(())
    } else {
        Err(mismatch(op, format!("expected rank {rank}, got shape {:?}", t.shape)))
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (n, k) = (a.shape[0], a.shape[1]);
    let (k2, m) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av != 0.0 {
                axpy(av, &b.data[p * m..(p + 1) * m], orow);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

fn conv_dims(x: &Tensor, k: &Tensor) -> Result<ConvDims> {
    expect_rank(x, 3, "conv2d")?;
    expect_rank(k, 4, "conv2d")?;
    let d = ConvDims {
        h: x.shape[0],
        w: x.shape[1],
        cin: x.shape[2],
        kh: k.shape[0],
        kw: k.shape[1],
        cout: k.shape[3],
    };
    if k.shape[2] != d.cin || d.kh.is_multiple_of(2) || d.kw.is_multiple_of(2) {
        return Err(mismatch("conv2d", format!("input {:?}, kernel {:?}", x.shape, k.shape)));
    }
    Ok(d)
}

fn conv2d_row(x: &Tensor, k: &Tensor, d: &ConvDims, y: usize, out_row: &mut [f32]) {
    let (ry, rx) = (d.kh / 2, d.kw / 2);
    for xo in 0..d.w {
        let out_px = &mut out_row[xo * d.cout..(xo + 1) * d.cout];
        for ky in 0..d.kh {
            let Some(yy) = (y + ky).checked_sub(ry).filter(|&v| v < d.h) else {
                continue;
            };
            for kx in 0..d.kw {
                let Some(xx) = (xo + kx).checked_sub(rx).filter(|&v| v < d.w) else {
                    continue;
                };
                let in_px = &x.data[(yy * d.w + xx) * d.cin..(yy * d.w + xx + 1) * d.cin];
                let kbase = (ky * d.kw + kx) * d.cin * d.cout;
                for (ci, &v) in in_px.iter().enumerate() {
                    if v != 0.0 {
                        let krow = &k.data[kbase + ci * d.cout..kbase + (ci + 1) * d.cout];
                        axpy(v, krow, out_px);
                    }
                }
            }
        }
    }
}

fn conv2d(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = conv_dims(x, k)?;
    let row_len = d.w * d.cout;
    let mut out = vec![0.0f32; d.h * row_len];
    let work = d.h * d.w * d.kh * d.kw * d.cin * d.cout;
    if work >= PAR_CONV_WORK {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| conv2d_row(x, k, &d, y, row));
    } else {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| conv2d_row(x, k, &d, y, row));
    }
    Ok(Tensor::from_parts(vec![d.h, d.w, d.cout], out))
}

fn conv2d_backward(x: &Tensor, k: &Tensor, grad: &[f32], need_x: bool, need_k: bool) -> Vec<Option<Vec<f32>>> {
    let d = conv_dims(x, k).expect("shapes validated in forward");
    let (ry, rx) = (d.kh / 2, d.kw / 2);
    let mut dx = need_x.then(|| vec![0.0f32; x.numel()]);
    let mut dk = need_k.then(|| vec![0.0f32; k.numel()]);
    for y in 0..d.h {
        for xo in 0..d.w {
            let g = &grad[(y * d.w + xo) * d.cout..(y * d.w + xo + 1) * d.cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..d.kh {
                let Some(yy) = (y + ky).checked_sub(ry).filter(|&v| v < d.h) else {
                    continue;
                };
                for kx in 0..d.kw {
                    let Some(xx) = (xo + kx).checked_sub(rx).filter(|&v| v < d.w) else {
                        continue;
                    };
                    let in_base = (yy * d.w + xx) * d.cin;
                    let kbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let kr = kbase + ci * d.cout..kbase + (ci + 1) * d.cout;
                        if let Some(dx) = dx.as_mut() {
                            dx[in_base + ci] += dot(g, &k.data[kr.clone()]);
                        }
                        if let Some(dk) = dk.as_mut() {
                            let v = x.data[in_base + ci];
                            if v != 0.0 {
                                axpy(v, g, &mut dk[kr]);
                            }
                        }
                    }
                }
            }
        }
    }
    vec![dx, dk]
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let suffix_ok = b.rank() <= a.rank() && a.shape[a.rank() - b.rank()..] == b.shape[..];
    if !suffix_ok || b.numel() == 0 {
        return Err(mismatch("add", format!("{:?} + {:?}", a.shape, b.shape)));
    }
    let mut out = a.data.clone();
    for chunk in out.chunks_mut(b.numel()) {
        chunk.iter_mut().zip(&b.data).for_each(|(o, v)| *o += v);
    }
    Ok(Tensor::from_parts(a.shape.clone(), out))
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
    if axis >= first.rank() {
        return Err(mismatch("concat", format!("axis {axis} for rank {}", first.rank())));
    }
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for t in inputs {
        let same_rest = t.rank() == first.rank()
            && t.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same_rest {
            return Err(mismatch("concat", format!("{:?} vs {:?}", t.shape, first.shape)));
        }
        shape[axis] += t.shape[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let block = t.shape[axis] * inner;
            out.extend_from_slice(&t.data[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= x.rank() || start >= end || end > x.shape[axis] {
        return Err(mismatch(
            "slice",
            format!("[{start}, {end}) on axis {axis} of {:?}", x.shape),
        ));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let in_block = x.shape[axis] * inner;
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * in_block;
        out.extend_from_slice(&x.data[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

fn row_norms(t: &Tensor) -> Result<Vec<f32>> {
    let d = t.shape[1];
    t.data
        .chunks(d)
        .enumerate()
        .map(|(row, r)| {
            let n = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32;
            if n < MIN_ROW_NORM || !n.is_finite() {
                Err(TensorError::ZeroNormRow { row })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Pairwise cosine similarity between the rows of `a` (`[n, d]`) and `b` (`[m, d]`).
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "cosine_rows")?;
    expect_rank(b, 2, "cosine_rows")?;
    let d = a.shape[1];
    if d == 0 || b.shape[1] != d {
        return Err(mismatch("cosine_rows", format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let (n, m) = (a.shape[0], b.shape[0]);
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let ai = &a.data[i * d..(i + 1) * d];
        for j in 0..m {
            let bj = &b.data[j * d..(j + 1) * d];
            let c = dot(ai, bj) / (na[i] * nb[j]);
            out[i * m + j] = c.clamp(-1.0, 1.0);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn cosine_backward(
    a: &Tensor,
    b: &Tensor,
    out: &Tensor,
    grad: &[f32],
    need_a: bool,
    need_b: bool,
) -> Vec<Option<Vec<f32>>> {
    let d = a.shape[1];
    let (n, m) = (a.shape[0], b.shape[0]);
    let na = row_norms(a).expect("validated in forward");
    let nb = row_norms(b).expect("validated in forward");
    let mut da = need_a.then(|| vec![0.0f32; a.numel()]);
    let mut db = need_b.then(|| vec![0.0f32; b.numel()]);
    for i in 0..n {
        let ai = &a.data[i * d..(i + 1) * d];
        for j in 0..m {
            let g = grad[i * m + j];
            if g == 0.0 {
                continue;
            }
            let bj = &b.data[j * d..(j + 1) * d];
            let c = out.data[i * m + j];
            let inv = 1.0 / (na[i] * nb[j]);
            if let Some(da) = da.as_mut() {
                let s = c / (na[i] * na[i]);
                for t in 0..d {
                    da[i * d + t] += g * (bj[t] * inv - s * ai[t]);
                }
            }
            if let Some(db) = db.as_mut() {
                let s = c / (nb[j] * nb[j]);
                for t in 0..d {
                    db[j * d + t] += g * (ai[t] * inv - s * bj[t]);
                }
            }
        }
    }
    vec![da, db]
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 2, "softmax_rows")?;
    let m = x.shape[1];
    if m == 0 {
        return Err(mismatch("softmax_rows", "zero columns".into()));
    }
    let mut out = vec![0.0f32; x.numel()];
    for (row, o) in x.data.chunks(m).zip(out.chunks_mut(m)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        for (o, e) in o.iter_mut().zip(exps) {
            *o = (e / s) as f32;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Per-group argmax over one row; ties go to the lowest column index.
pub(crate) fn group_argmax(row: &[f32], group_of: &[usize], groups: usize) -> Vec<Option<usize>> {
    let mut best: Vec<Option<usize>> = vec![None; groups];
    for (j, &g) in group_of.iter().enumerate() {
        match best[g] {
            Some(b) if row[b] >= row[j] => {}
            _ => best[g] = Some(j),
        }
    }
    best
}

fn group_max(x: &Tensor, group_of: &[usize], groups: usize) -> Result<Tensor> {
    expect_rank(x, 2, "group_max")?;
    let m = x.shape[1];
    if group_of.len() != m || group_of.iter().any(|&g| g >= groups) {
        return Err(mismatch(
            "group_max",
            format!("{} group ids for {m} columns", group_of.len()),
        ));
    }
    let mut out = vec![0.0f32; x.shape[0] * groups];
    for (i, row) in x.data.chunks(m).enumerate() {
        for (g, arg) in group_argmax(row, group_of, groups).into_iter().enumerate() {
            out[i * groups + g] = arg.map_or(0.0, |j| row[j]);
        }
    }
    Ok(Tensor::from_parts(vec![x.shape[0], groups], out))
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 2, "normalize_rows")?;
    let c = x.shape[1];
    let mut out = vec![0.0f32; x.numel()];
    for (row, o) in x.data.chunks(c).zip(out.chunks_mut(c)) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        for (o, &v) in o.iter_mut().zip(row) {
            *o = (v as f64 / s) as f32;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

fn counted_rows(targets: &[usize], ignore: Option<usize>) -> usize {
    targets.iter().filter(|&&t| Some(t) != ignore).count()
}

fn nll_mean(p: &Tensor, targets: &[usize], ignore: Option<usize>) -> Result<Tensor> {
    expect_rank(p, 2, "nll_mean")?;
    let (n, c) = (p.shape[0], p.shape[1]);
    if targets.len() != n {
        return Err(mismatch("nll_mean", format!("{} targets for {n} rows", targets.len())));
    }
    let count = counted_rows(targets, ignore);
    if count == 0 {
        return Err(TensorError::AllIgnored);
    }
    let mut total = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        if t >= c {
            return Err(mismatch("nll_mean", format!("target {t} with {c} classes")));
        }
        total -= (p.data[i * c + t] as f64).ln();
    }
    Ok(Tensor::scalar((total / count as f64) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let out = forward(&Primitive::Relu, &[&t(&[3], &[-1.0, 0.0, 2.0])]).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let a = t(&[3, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, 7.0, -1.0, 0.5, 2.0]);
        let out = forward(&Primitive::Matmul, &[&Tensor::identity(3), &a]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn conv_of_ones_counts_in_frame_taps() {
        let x = Tensor::full(&[5, 5, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let out = forward(&Primitive::Conv2d, &[&x, &k]).unwrap();
        // Direct summation: the value at (y, x) is the number of in-frame taps.
        for y in 0..5usize {
            for xo in 0..5usize {
                let rows = (y.saturating_sub(1)..=(y + 1).min(4)).count();
                let cols = (xo.saturating_sub(1)..=(xo + 1).min(4)).count();
                assert_eq!(out.data()[y * 5 + xo], (rows * cols) as f32);
            }
        }
        assert_eq!(out.data()[2 * 5 + 2], 9.0);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(matches!(
            forward(&Primitive::Conv2d, &[&x, &k]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cosine_reference_values() {
        let a = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = t(&[1, 2], &[1.0, 0.0]);
        let out = cosine_rows(&a, &b).unwrap();
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_rejects_zero_row() {
        let a = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(cosine_rows(&a, &a), Err(TensorError::ZeroNormRow { row: 1 }));
    }

    #[test]
    fn add_broadcasts_trailing_suffix() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        let out = forward(&Primitive::Add, &[&a, &b]).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 13.0, 24.0]);
        assert!(forward(&Primitive::Add, &[&a, &t(&[3], &[0.0; 3])]).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = forward(&Primitive::Concat { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = forward(
            &Primitive::Slice {
                axis: 1,
                start: 2,
                end: 3,
            },
            &[&c],
        )
        .unwrap();
        assert_eq!(s, b);
    }

    #[test]
    fn group_max_ties_pick_lowest_column() {
        assert_eq!(group_argmax(&[0.3, 0.3, 0.1], &[0, 0, 1], 2), vec![Some(0), Some(2)]);
        assert_eq!(group_argmax(&[0.3], &[0], 2), vec![Some(0), None]);
    }

    #[test]
    fn nll_skips_ignored_and_rejects_all_ignored() {
        let p = t(&[2, 2], &[0.5, 0.5, 0.25, 0.75]);
        let out = forward(
            &Primitive::NllMean {
                targets: vec![0, 255],
                ignore: Some(255),
            },
            &[&p],
        )
        .unwrap();
        assert!((out.item() - std::f32::consts::LN_2).abs() < 1e-7);
        let all = forward(
            &Primitive::NllMean {
                targets: vec![1, 1],
                ignore: Some(1),
            },
            &[&p],
        );
        assert_eq!(all, Err(TensorError::AllIgnored));
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let x = t(&[1], &[f32::MAX]);
        assert_eq!(
            forward(&Primitive::MulScalar(10.0), &[&x]),
            Err(TensorError::NonFinite { op: "mul_scalar" })
        );
    }
}
