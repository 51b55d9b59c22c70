//! Pure forward and backward rules for every differentiable kernel.
//!
//! Tensors are viewed as matrices (`Tensor::dims2`). Row-wise kernels act on
//! the last dimension; reductions produce either a scalar or a column.

use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Kernel identifiers together with their attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Identity,
    /// `a · b`
    MatMul,
    /// `a · bᵀ`
    MatMulNT,
    Transpose,
    Add,
    Sub,
    Mul,
    /// Matrix plus a broadcast row vector.
    AddRow,
    Scale(f64),
    AddScalar(f64),
    Gelu,
    Log,
    Exp,
    /// Row softmax of `x / temperature`.
    SoftmaxRows { temperature: f64 },
    /// Row log-softmax of `x / temperature`.
    LogSoftmaxRows { temperature: f64 },
    /// Inputs: x, gain row, bias row.
    LayerNormRows { eps: f64 },
    L2NormalizeRows,
    /// Input: the embedding table. Output rows are `table[ids[i]]`.
    Embedding { ids: Vec<usize> },
    SelectRows { rows: Vec<usize> },
    SliceCols { start: usize, len: usize },
    ConcatRows,
    ConcatCols,
    SumAll,
    MeanAll,
    MaxAll,
    /// Per-row sum, producing a column.
    SumRows,
    /// Per-row max, producing a column.
    MaxRows,
    /// Multi-head scaled dot-product attention restricted to row segments.
    /// Inputs: q, k, v, all N×d. `segments` must tile `0..N` in order; a row
    /// attends only to rows of its own segment.
    SegmentAttention { segments: Vec<(usize, usize)>, heads: usize },
}

/// Side information kept from the forward pass for the backward rule.
#[derive(Debug, Clone, Default)]
pub enum Aux {
    #[default]
    None,
    /// Per-row (mean, 1/std) and the normalized input.
    LayerNorm { rstd: Vec<f64>, xhat: Vec<f64> },
    /// Per-row norms; zero rows pass through unchanged.
    L2 { norms: Vec<f64>, zero_rows: Vec<bool> },
    ArgMax(Vec<usize>),
    /// Attention weights, segment-major then head-major, len×len each.
    Attention(Vec<f64>),
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Identity => "identity",
            Kernel::MatMul => "matmul",
            Kernel::MatMulNT => "matmul_nt",
            Kernel::Transpose => "transpose",
            Kernel::Add => "add",
            Kernel::Sub => "sub",
            Kernel::Mul => "mul",
            Kernel::AddRow => "add_row",
            Kernel::Scale(_) => "scale",
            Kernel::AddScalar(_) => "add_scalar",
            Kernel::Gelu => "gelu",
            Kernel::Log => "log",
            Kernel::Exp => "exp",
            Kernel::SoftmaxRows { .. } => "softmax_rows",
            Kernel::LogSoftmaxRows { .. } => "log_softmax_rows",
            Kernel::LayerNormRows { .. } => "layer_norm_rows",
            Kernel::L2NormalizeRows => "l2_normalize_rows",
            Kernel::Embedding { .. } => "embedding",
            Kernel::SelectRows { .. } => "select_rows",
            Kernel::SliceCols { .. } => "slice_cols",
            Kernel::ConcatRows => "concat_rows",
            Kernel::ConcatCols => "concat_cols",
            Kernel::SumAll => "sum_all",
            Kernel::MeanAll => "mean_all",
            Kernel::MaxAll => "max_all",
            Kernel::SumRows => "sum_rows",
            Kernel::MaxRows => "max_rows",
            Kernel::SegmentAttention { .. } => "segment_attention",
        }
    }

    /// Number of inputs, `None` when variadic.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Kernel::MatMul
            | Kernel::MatMulNT
            | Kernel::Add
            | Kernel::Sub
            | Kernel::Mul
            | Kernel::AddRow => Some(2),
            Kernel::LayerNormRows { .. } | Kernel::SegmentAttention { .. } => Some(3),
            Kernel::ConcatRows | Kernel::ConcatCols => None,
            _ => Some(1),
        }
    }

    fn validate_attrs(&self) -> Result<()> {
        match self {
            Kernel::SoftmaxRows { temperature } | Kernel::LogSoftmaxRows { temperature } => {
                if !(*temperature > 0.0 && temperature.is_finite()) {
                    contract!("softmax temperature must be positive, got {temperature}");
                }
            }
            Kernel::SegmentAttention { heads: 0, .. } => contract!("attention needs at least one head"),
            Kernel::LayerNormRows { eps } if !(*eps > 0.0) => {
                contract!("layer norm eps must be positive");
            }
            Kernel::Scale(c) | Kernel::AddScalar(c) if !c.is_finite() => {
                return Err(Error::NumericInput(format!("{} attribute is not finite", self.name())));
            }
            _ => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// dense helpers

/// `c[n×m] = a[n×k] · b[k×m]`
pub fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let bp = &b[p * m..(p + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[n×m] = a[n×k] · b[m×k]ᵀ`
pub fn mm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] = dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c[n×m] = a[k×n]ᵀ · b[k×m]`, accumulated into `c`.
pub fn mm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let ap = &a[p * n..(p + 1) * n];
        let bp = &b[p * m..(p + 1) * m];
        for (i, &av) in ap.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let ci = &mut c[i * m..(i + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..a.len() {
        s += a[o] * b[o];
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_row(x: &[f64], temperature: f64, out: &mut [f64]) {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = ((v - mx) / temperature).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

fn same_shape(a: &Tensor, b: &Tensor, k: &Kernel) -> Result<()> {
    if a.shape() != b.shape() {
        contract!("{}: shape mismatch {:?} vs {:?}", k.name(), a.shape(), b.shape());
    }
    Ok(())
}

fn mat(shape: (usize, usize), data: Vec<f64>) -> Tensor {
    Tensor::new(vec![shape.0, shape.1], data).expect("kernel output shape")
}

// ---------------------------------------------------------------------------
// forward

/// Evaluates a kernel. Pure: depends only on its arguments.
pub fn forward(kernel: &Kernel, inputs: &[&Tensor]) -> Result<(Tensor, Aux)> {
    kernel.validate_attrs()?;
    if let Some(n) = kernel.arity() {
        if inputs.len() != n {
            contract!("{} takes {} inputs, got {}", kernel.name(), n, inputs.len());
        }
    } else if inputs.is_empty() {
        contract!("{} needs at least one input", kernel.name());
    }
    for (i, t) in inputs.iter().enumerate() {
        t.check_finite(&format!("{} input {i}", kernel.name()))?;
    }
    let x = inputs[0];
    let (r, c) = x.dims2();
    let out = match kernel {
        Kernel::Identity => (x.clone_value(), Aux::None),
        Kernel::MatMul => {
            let (k2, m) = inputs[1].dims2();
            if c != k2 {
                contract!("matmul: inner dims {c} vs {k2}");
            }
            (mat((r, m), mm(x.data(), inputs[1].data(), r, c, m)), Aux::None)
        }
        Kernel::MatMulNT => {
            let (m, k2) = inputs[1].dims2();
            if c != k2 {
                contract!("matmul_nt: inner dims {c} vs {k2}");
            }
            (mat((r, m), mm_nt(x.data(), inputs[1].data(), r, c, m)), Aux::None)
        }
        Kernel::Transpose => {
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = x.data()[i * c + j];
                }
            }
            (mat((c, r), d), Aux::None)
        }
        Kernel::Add | Kernel::Sub | Kernel::Mul => {
            let y = inputs[1];
            same_shape(x, y, kernel)?;
            let d: Vec<f64> = match kernel {
                Kernel::Add => x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect(),
                Kernel::Sub => x.data().iter().zip(y.data()).map(|(a, b)| a - b).collect(),
                _ => x.data().iter().zip(y.data()).map(|(a, b)| a * b).collect(),
            };
            (Tensor::new(x.shape().to_vec(), d)?, Aux::None)
        }
        Kernel::AddRow => {
            let b = inputs[1];
            if b.len() != c {
                contract!("add_row: row of {} values for {} columns", b.len(), c);
            }
            let mut d = x.data().to_vec();
            for row in d.chunks_mut(c.max(1)) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            (Tensor::new(x.shape().to_vec(), d)?, Aux::None)
        }
        Kernel::Scale(s) => (map(x, |v| v * s), Aux::None),
        Kernel::AddScalar(s) => (map(x, |v| v + s), Aux::None),
        Kernel::Gelu => (map(x, gelu), Aux::None),
        Kernel::Exp => (map(x, f64::exp), Aux::None),
        Kernel::Log => {
            if x.data().iter().any(|v| *v <= 0.0) {
                return Err(Error::NumericInput("log of a non-positive value".into()));
            }
            (map(x, f64::ln), Aux::None)
        }
        Kernel::SoftmaxRows { temperature } => {
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                softmax_row(x.row(i), *temperature, &mut d[i * c..(i + 1) * c]);
            }
            (Tensor::new(x.shape().to_vec(), d)?, Aux::None)
        }
        Kernel::LogSoftmaxRows { temperature } => {
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let row = x.row(i);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| ((v - mx) / temperature).exp()).sum::<f64>().ln();
                for j in 0..c {
                    d[i * c + j] = (row[j] - mx) / temperature - lse;
                }
            }
            (Tensor::new(x.shape().to_vec(), d)?, Aux::None)
        }
        Kernel::LayerNormRows { eps } => {
            let (g, b) = (inputs[1], inputs[2]);
            if g.len() != c || b.len() != c {
                contract!("layer_norm: gain/bias must have {c} values");
            }
            let mut d = vec![0.0; r * c];
            let mut xhat = vec![0.0; r * c];
            let mut rstd = vec![0.0; r];
            for i in 0..r {
                let row = x.row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[i * c + j] = h;
                    d[i * c + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), d)?, Aux::LayerNorm { rstd, xhat })
        }
        Kernel::L2NormalizeRows => {
            let mut d = x.data().to_vec();
            let mut norms = vec![0.0; r];
            let mut zero_rows = vec![false; r];
            for i in 0..r {
                let row = &mut d[i * c..(i + 1) * c];
                let n = dot(row, row).sqrt();
                norms[i] = n;
                if n == 0.0 {
                    zero_rows[i] = true;
                    continue;
                }
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            (Tensor::new(x.shape().to_vec(), d)?, Aux::L2 { norms, zero_rows })
        }
        Kernel::Embedding { ids } | Kernel::SelectRows { rows: ids } => {
            let mut d = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= r {
                    contract!("{}: row {id} out of range for {r} rows", kernel.name());
                }
                d.extend_from_slice(x.row(id));
            }
            (mat((ids.len(), c), d), Aux::None)
        }
        Kernel::SliceCols { start, len } => {
            if start + len > c {
                contract!("slice_cols: {start}+{len} exceeds {c} columns");
            }
            let mut d = Vec::with_capacity(r * len);
            for i in 0..r {
                d.extend_from_slice(&x.row(i)[*start..start + len]);
            }
            (mat((r, *len), d), Aux::None)
        }
        Kernel::ConcatRows => {
            let mut d = Vec::new();
            let mut rows = 0;
            for t in inputs {
                if t.cols() != c {
                    contract!("concat_rows: column mismatch {} vs {c}", t.cols());
                }
                rows += t.rows();
                d.extend_from_slice(t.data());
            }
            (mat((rows, c), d), Aux::None)
        }
        Kernel::ConcatCols => {
            let total: usize = inputs.iter().map(|t| t.cols()).sum();
            if inputs.iter().any(|t| t.rows() != r) {
                contract!("concat_cols: row mismatch");
            }
            let mut d = Vec::with_capacity(r * total);
            for i in 0..r {
                for t in inputs {
                    d.extend_from_slice(t.row(i));
                }
            }
            (mat((r, total), d), Aux::None)
        }
        Kernel::SumAll => (Tensor::scalar(x.data().iter().sum()), Aux::None),
        Kernel::MeanAll => {
            if x.is_empty() {
                contract!("mean of an empty tensor");
            }
            (Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64), Aux::None)
        }
        Kernel::MaxAll => {
            if x.is_empty() {
                contract!("max of an empty tensor");
            }
            let i = argmax(x.data());
            (Tensor::scalar(x.data()[i]), Aux::ArgMax(vec![i]))
        }
        Kernel::SumRows => {
            let d = (0..r).map(|i| x.row(i).iter().sum()).collect();
            (mat((r, 1), d), Aux::None)
        }
        Kernel::SegmentAttention { segments, heads } => {
            same_shape(x, inputs[1], kernel)?;
            same_shape(x, inputs[2], kernel)?;
            if c % heads != 0 {
                contract!("attention width {c} is not divisible by {heads} heads");
            }
            let mut at = 0;
            for &(s, len) in segments {
                if s != at || len == 0 {
                    contract!("attention segments must tile the rows in order");
                }
                at += len;
            }
            if at != r {
                contract!("attention segments cover {at} of {r} rows");
            }
            attention_forward(x.data(), inputs[1].data(), inputs[2].data(), c, segments, *heads)
        }
        Kernel::MaxRows => {
            if c == 0 {
                contract!("max over empty rows");
            }
            let idx: Vec<usize> = (0..r).map(|i| argmax(x.row(i))).collect();
            let d = idx.iter().enumerate().map(|(i, &j)| x.row(i)[j]).collect();
            (mat((r, 1), d), Aux::ArgMax(idx))
        }
    };
    out.0.check_finite(&format!("{} output", kernel.name()))?;
    Ok(out)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect()).unwrap()
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], c: usize, segments: &[(usize, usize)], heads: usize) -> (Tensor, Aux) {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::with_capacity(segments.iter().map(|s| s.1 * s.1).sum::<usize>() * heads);
    let mut scores = Vec::new();
    let mut p = Vec::new();
    for &(s, len) in segments {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..len {
                let qi = &q[(s + i) * c + col..(s + i) * c + col + dh];
                scores.clear();
                scores.extend((0..len).map(|j| scale * dot(qi, &k[(s + j) * c + col..(s + j) * c + col + dh])));
                p.resize(len, 0.0);
                softmax_row(&scores, 1.0, &mut p);
                let oi = &mut out[(s + i) * c + col..(s + i) * c + col + dh];
                for (j, pj) in p.iter().enumerate() {
                    let vj = &v[(s + j) * c + col..(s + j) * c + col + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, vv)| *o += pj * vv);
                }
                probs.extend_from_slice(&p);
            }
        }
    }
    (Tensor::new(vec![q.len() / c, c], out).expect("attention output"), Aux::Attention(probs))
}

fn attention_backward(
    inputs: &[&Tensor],
    gout: &[f64],
    probs: &[f64],
    segments: &[(usize, usize)],
    heads: usize,
) -> Vec<Option<Vec<f64>>> {
    let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
    let c = inputs[0].cols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut gq, mut gk, mut gv) = (vec![0.0; q.len()], vec![0.0; k.len()], vec![0.0; v.len()]);
    let mut off = 0;
    let mut ds = Vec::new();
    for &(s, len) in segments {
        for h in 0..heads {
            let col = h * dh;
            let row = |t: usize| (s + t) * c + col..(s + t) * c + col + dh;
            for i in 0..len {
                let p = &probs[off + i * len..off + (i + 1) * len];
                let go = &gout[row(i)];
                // dP_ij = dO_i · v_j, then the softmax Jacobian
                ds.clear();
                ds.extend((0..len).map(|j| dot(go, &v[row(j)])));
                let mean: f64 = p.iter().zip(&ds).map(|(a, b)| a * b).sum();
                for j in 0..len {
                    let dsj = p[j] * (ds[j] - mean) * scale;
                    let pj = p[j];
                    let (kj, qi) = (row(j), row(i));
                    for t in 0..dh {
                        gv[kj.start + t] += pj * go[t];
                        gq[qi.start + t] += dsj * k[kj.start + t];
                        gk[kj.start + t] += dsj * q[qi.start + t];
                    }
                }
            }
            off += len * len;
        }
    }
    vec![Some(gq), Some(gk), Some(gv)]
}

// ---------------------------------------------------------------------------
// backward

/// Vector-Jacobian product: given `dL/d(output)` returns `dL/d(input)` for
/// every input. Inputs that carry no gradient (ids, attributes) get `None`.
pub fn backward(
    kernel: &Kernel,
    inputs: &[&Tensor],
    output: &Tensor,
    aux: &Aux,
    gout: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let x = inputs[0];
    let (r, c) = x.dims2();
    match kernel {
        Kernel::Identity => vec![Some(gout.to_vec())],
        Kernel::MatMul => {
            let (_, m) = inputs[1].dims2();
            let ga = mm_nt(gout, inputs[1].data(), r, m, c);
            let mut gb = vec![0.0; c * m];
            mm_tn_acc(&mut gb, x.data(), gout, r, c, m);
            vec![Some(ga), Some(gb)]
        }
        Kernel::MatMulNT => {
            let (m, _) = inputs[1].dims2();
            let ga = mm(gout, inputs[1].data(), r, m, c);
            let mut gb = vec![0.0; m * c];
            mm_tn_acc(&mut gb, gout, x.data(), r, m, c);
            vec![Some(ga), Some(gb)]
        }
        Kernel::Transpose => {
            // output is c×r
            let mut g = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    g[i * c + j] = gout[j * r + i];
                }
            }
            vec![Some(g)]
        }
        Kernel::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
        Kernel::Sub => vec![Some(gout.to_vec()), Some(gout.iter().map(|g| -g).collect())],
        Kernel::Mul => {
            let y = inputs[1];
            let gx = gout.iter().zip(y.data()).map(|(g, b)| g * b).collect();
            let gy = gout.iter().zip(x.data()).map(|(g, a)| g * a).collect();
            vec![Some(gx), Some(gy)]
        }
        Kernel::AddRow => {
            let mut gb = vec![0.0; c];
            for row in gout.chunks(c.max(1)) {
                for (b, g) in gb.iter_mut().zip(row) {
                    *b += g;
                }
            }
            vec![Some(gout.to_vec()), Some(gb)]
        }
        Kernel::Scale(s) => vec![Some(gout.iter().map(|g| g * s).collect())],
        Kernel::AddScalar(_) => vec![Some(gout.to_vec())],
        Kernel::Gelu => vec![Some(
            gout.iter().zip(x.data()).map(|(g, v)| g * gelu_grad(*v)).collect(),
        )],
        Kernel::Exp => vec![Some(gout.iter().zip(output.data()).map(|(g, y)| g * y).collect())],
        Kernel::Log => vec![Some(gout.iter().zip(x.data()).map(|(g, v)| g / v).collect())],
        Kernel::SoftmaxRows { temperature } => {
            let y = output.data();
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                let yi = &y[i * c..(i + 1) * c];
                let gi = &gout[i * c..(i + 1) * c];
                let s = dot(yi, gi);
                for j in 0..c {
                    g[i * c + j] = yi[j] * (gi[j] - s) / temperature;
                }
            }
            vec![Some(g)]
        }
        Kernel::LogSoftmaxRows { temperature } => {
            let y = output.data();
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                let gi = &gout[i * c..(i + 1) * c];
                let s: f64 = gi.iter().sum();
                for j in 0..c {
                    g[i * c + j] = (gi[j] - y[i * c + j].exp() * s) / temperature;
                }
            }
            vec![Some(g)]
        }
        Kernel::LayerNormRows { .. } => {
            let Aux::LayerNorm { rstd, xhat } = aux else {
                unreachable!("layer norm without aux")
            };
            let gain = inputs[1].data();
            let mut gx = vec![0.0; r * c];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            let mut gh = vec![0.0; c];
            for i in 0..r {
                let go = &gout[i * c..(i + 1) * c];
                let xh = &xhat[i * c..(i + 1) * c];
                for j in 0..c {
                    gg[j] += go[j] * xh[j];
                    gb[j] += go[j];
                    gh[j] = go[j] * gain[j];
                }
                let mean_gh = gh.iter().sum::<f64>() / c as f64;
                let mean_ghx = dot(&gh, xh) / c as f64;
                for j in 0..c {
                    gx[i * c + j] = rstd[i] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }
        Kernel::L2NormalizeRows => {
            let Aux::L2 { norms, zero_rows } = aux else {
                unreachable!("l2 normalize without aux")
            };
            let y = output.data();
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                let go = &gout[i * c..(i + 1) * c];
                if zero_rows[i] {
                    g[i * c..(i + 1) * c].copy_from_slice(go);
                    continue;
                }
                let yi = &y[i * c..(i + 1) * c];
                let s = dot(yi, go);
                for j in 0..c {
                    g[i * c + j] = (go[j] - yi[j] * s) / norms[i];
                }
            }
            vec![Some(g)]
        }
        Kernel::Embedding { ids } | Kernel::SelectRows { rows: ids } => {
            let mut g = vec![0.0; r * c];
            for (k, &id) in ids.iter().enumerate() {
                for j in 0..c {
                    g[id * c + j] += gout[k * c + j];
                }
            }
            vec![Some(g)]
        }
        Kernel::SliceCols { start, len } => {
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                g[i * c + start..i * c + start + len].copy_from_slice(&gout[i * len..(i + 1) * len]);
            }
            vec![Some(g)]
        }
        Kernel::ConcatRows => {
            let mut off = 0;
            inputs
                .iter()
                .map(|t| {
                    let g = gout[off..off + t.len()].to_vec();
                    off += t.len();
                    Some(g)
                })
                .collect()
        }
        Kernel::ConcatCols => {
            let total: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut off = 0;
            inputs
                .iter()
                .map(|t| {
                    let tc = t.cols();
                    let mut g = Vec::with_capacity(t.len());
                    for i in 0..r {
                        g.extend_from_slice(&gout[i * total + off..i * total + off + tc]);
                    }
                    off += tc;
                    Some(g)
                })
                .collect()
        }
        Kernel::SumAll => vec![Some(vec![gout[0]; x.len()])],
        Kernel::MeanAll => vec![Some(vec![gout[0] / x.len() as f64; x.len()])],
        Kernel::MaxAll => {
            let Aux::ArgMax(idx) = aux else { unreachable!() };
            let mut g = vec![0.0; x.len()];
            g[idx[0]] = gout[0];
            vec![Some(g)]
        }
        Kernel::SumRows => {
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    g[i * c + j] = gout[i];
                }
            }
            vec![Some(g)]
        }
        Kernel::MaxRows => {
            let Aux::ArgMax(idx) = aux else { unreachable!() };
            let mut g = vec![0.0; r * c];
            for (i, &j) in idx.iter().enumerate() {
                g[i * c + j] = gout[i];
            }
            vec![Some(g)]
        }
        Kernel::SegmentAttention { segments, heads } => {
            let Aux::Attention(probs) = aux else { unreachable!("attention without aux") };
            attention_backward(inputs, gout, probs, segments, *heads)
        }
    }
}

impl Tensor {
    /// Copy of shape and values without any gradient.
    pub fn clone_value(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data().to_vec()).unwrap()
    }
}
