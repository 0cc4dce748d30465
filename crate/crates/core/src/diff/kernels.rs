//! Forward kernels and vector-Jacobian products for every [`Op`].

use super::array::Array;
use super::graph::{Op, UnaryOp};
use super::DiffError;

/// How an input of a broadcasting op maps onto the output's linear index.
enum Plan {
    Same,
    Scalar,
    /// Input repeats with period `n` (input shape is a suffix of the output).
    Suffix(usize),
    /// Each input value spans `inner` consecutive outputs.
    Prefix(usize),
    General(Vec<usize>),
}

impl Plan {
    fn new(input: &[usize], out: &[usize]) -> Plan {
        let n_in: usize = input.iter().product();
        let n_out: usize = out.iter().product();
        let mut aligned = vec![1; out.len() - input.len()];
        aligned.extend_from_slice(input);
        if aligned == out {
            return Plan::Same;
        }
        if n_in == 1 {
            return Plan::Scalar;
        }
        for k in 0..=out.len() {
            if aligned[..k].iter().all(|&d| d == 1) && aligned[k..] == out[k..] {
                return Plan::Suffix(n_in);
            }
            if aligned[..k] == out[..k] && aligned[k..].iter().all(|&d| d == 1) {
                return Plan::Prefix(out[k..].iter().product());
            }
        }
        // Explicit index table for the remaining mixed patterns.
        let mut in_strides = vec![0; out.len()];
        let mut acc = 1;
        for d in (0..out.len()).rev() {
            in_strides[d] = if aligned[d] == 1 { 0 } else { acc };
            acc *= aligned[d];
        }
        let mut table = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..n_out {
            table.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Plan::General(table)
    }

    #[inline(always)]
    fn index(&self, i: usize) -> usize {
        match self {
            Plan::Same => i,
            Plan::Scalar => 0,
            Plan::Suffix(n) => i % n,
            Plan::Prefix(inner) => i / inner,
            Plan::General(t) => t[i],
        }
    }
}

fn binary_forward(a: &Array, b: &Array, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Array {
    let n: usize = shape.iter().product();
    let (pa, pb) = (Plan::new(a.shape(), shape), Plan::new(b.shape(), shape));
    let (da, db) = (a.data(), b.data());
    let data = match (&pa, &pb) {
        (Plan::Same, Plan::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
        (Plan::Same, Plan::Scalar) => da.iter().map(|&x| f(x, db[0])).collect(),
        (Plan::Same, Plan::Suffix(m)) => {
            let mut out = Vec::with_capacity(n);
            for chunk in da.chunks(*m) {
                out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        (Plan::Same, Plan::Prefix(inner)) => {
            let mut out = Vec::with_capacity(n);
            for (chunk, &y) in da.chunks(*inner).zip(db) {
                out.extend(chunk.iter().map(|&x| f(x, y)));
            }
            out
        }
        _ => (0..n).map(|i| f(da[pa.index(i)], db[pb.index(i)])).collect(),
    };
    Array::new(shape.to_vec(), data).expect("broadcast output size")
}

/// Sums `g` (output-shaped) down to `shape`, optionally weighting each entry.
fn reduce_to(shape: &[usize], out_shape: &[usize], g: &[f64], weight: Option<(&Array, &[usize])>) -> Array {
    let plan = Plan::new(shape, out_shape);
    let mut acc = Array::zeros(shape);
    let dst = acc.data_mut();
    match weight {
        None => match plan {
            Plan::Same => dst.copy_from_slice(g),
            Plan::Scalar => dst[0] = g.iter().sum(),
            _ => {
                for (i, &v) in g.iter().enumerate() {
                    dst[plan.index(i)] += v;
                }
            }
        },
        Some((w, w_shape)) => {
            let wp = Plan::new(w_shape, out_shape);
            let wd = w.data();
            match (&plan, &wp) {
                (Plan::Same, Plan::Same) => {
                    for ((d, &v), &x) in dst.iter_mut().zip(g).zip(wd) {
                        *d = v * x;
                    }
                }
                _ => {
                    for (i, &v) in g.iter().enumerate() {
                        dst[plan.index(i)] += v * wd[wp.index(i)];
                    }
                }
            }
        }
    }
    acc
}

/// Row-major `c = a · b (+ c if accumulate)` with arbitrary operand strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe views that lie inside `a`, `b` and `c`,
    // whose lengths are checked by the callers through the node shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `expm1` by range reduction to `|r| ≤ ln2/2` and a degree-13 Taylor
/// polynomial; branch-free so the elementwise loops vectorize.
#[inline(always)]
fn expm1_reduced(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-01;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let k = (x * std::f64::consts::LOG2_E + SHIFT) - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    let em = r + r * r * p;
    let scale = f64::from_bits((k + SHIFT).to_bits().wrapping_add(1023) << 52);
    scale * em + (scale - 1.0)
}

/// `tanh` accurate to a few ulp; about twice as fast as the libm call.
#[inline(always)]
pub(crate) fn tanh(x: f64) -> f64 {
    let e = expm1_reduced(2.0 * x.clamp(-20.0, 20.0));
    e / (e + 2.0)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_forward(op: UnaryOp, x: &Array) -> Array {
    match op {
        UnaryOp::Tanh => x.map(tanh),
        UnaryOp::Sigmoid => x.map(sigmoid),
        UnaryOp::Softplus => x.map(softplus),
        UnaryOp::Exp => x.map(f64::exp),
        UnaryOp::Log => x.map(f64::ln),
        UnaryOp::Abs => x.map(f64::abs),
        UnaryOp::Sin => x.map(f64::sin),
        UnaryOp::Cos => x.map(f64::cos),
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn forward(op: &Op, inputs: &[&Array], shape: &[usize]) -> Result<Array, DiffError> {
    let out = match op {
        Op::Leaf { .. } | Op::Constant(_) => unreachable!("leaves are not computed"),
        Op::Add(..) => binary_forward(inputs[0], inputs[1], shape, |a, b| a + b),
        Op::Sub(..) => binary_forward(inputs[0], inputs[1], shape, |a, b| a - b),
        Op::Mul(..) => binary_forward(inputs[0], inputs[1], shape, |a, b| a * b),
        Op::Affine { scale, offset, .. } => inputs[0].map(|x| scale * x + offset),
        Op::MatMul(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = Array::zeros(shape);
            gemm(
                m,
                k,
                n,
                a.data(),
                (k as isize, 1),
                b.data(),
                (n as isize, 1),
                out.data_mut(),
                false,
            );
            out
        }
        Op::Linear { .. } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            let mut out = Array::zeros(shape);
            for row in out.data_mut().chunks_mut(n) {
                row.copy_from_slice(b.data());
            }
            gemm(
                m,
                k,
                n,
                x.data(),
                (k as isize, 1),
                w.data(),
                (n as isize, 1),
                out.data_mut(),
                true,
            );
            out
        }
        Op::LinearTanh { .. } => {
            let mut out = forward(&Op::Linear { x: 0, w: 0, b: 0 }, inputs, shape)?;
            for v in out.data_mut() {
                *v = tanh(*v);
            }
            out
        }
        Op::AddTanh(..) => binary_forward(inputs[0], inputs[1], shape, |a, b| tanh(a + b)),
        Op::Broadcast(_) => binary_forward(inputs[0], &Array::scalar(0.0), shape, |a, _| a),
        Op::Reshape(_) => inputs[0].clone().reshaped(shape)?,
        Op::Concat { axis, .. } => {
            let outer: usize = shape[..*axis].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for x in inputs {
                    let chunk = x.shape()[*axis..].iter().product::<usize>();
                    data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Array::new(shape.to_vec(), data)?
        }
        Op::Sum(_) => Array::scalar(inputs[0].sum()),
        Op::Mean(_) => {
            let x = inputs[0];
            Array::scalar(x.sum() / x.len().max(1) as f64)
        }
        Op::SumAxis { axis, .. } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = Array::zeros(shape);
            let (src, dst) = (x.data(), out.data_mut());
            for o in 0..outer {
                let d = &mut dst[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let s = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
            out
        }
        Op::Unary(_, u) => unary_forward(*u, inputs[0]),
        Op::Clamp { lo, hi, .. } => inputs[0].map(|x| x.clamp(*lo, *hi)),
        Op::CumSumExclusive(_) => {
            let x = inputs[0];
            let len = *shape.last().expect("non-scalar");
            let mut out = Array::zeros(shape);
            if len > 0 {
                for (src, dst) in x.data().chunks(len).zip(out.data_mut().chunks_mut(len)) {
                    let mut acc = 0.0;
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = acc;
                        acc += s;
                    }
                }
            }
            out
        }
        Op::SparseMatMul { matrix, .. } => {
            let x = inputs[0];
            let channels = x.shape().get(1).copied().unwrap_or(1);
            let mut out = Array::zeros(shape);
            matrix.apply(x.data(), channels, out.data_mut());
            out
        }
    };
    Ok(out)
}

fn tanh_backward(g: &Array, y: &Array) -> Array {
    let data = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
    Array::new(y.shape().to_vec(), data).expect("tanh gradient")
}

/// Gradient contribution of `op` to its input number `which`, given the
/// upstream gradient `g` of the op's output.
pub(crate) fn vjp(op: &Op, inputs: &[&Array], output: &Array, g: &Array, which: usize) -> Array {
    let out_shape = output.shape();
    let gd = g.data();
    match op {
        Op::Leaf { .. } | Op::Constant(_) => unreachable!("leaves have no inputs"),
        Op::Add(..) => reduce_to(inputs[which].shape(), out_shape, gd, None),
        Op::Sub(..) => {
            let r = reduce_to(inputs[which].shape(), out_shape, gd, None);
            if which == 0 {
                r
            } else {
                r.map(|v| -v)
            }
        }
        Op::Mul(..) => {
            let other = inputs[1 - which];
            reduce_to(inputs[which].shape(), out_shape, gd, Some((other, other.shape())))
        }
        Op::Affine { scale, .. } => g.map(|v| v * scale),
        Op::MatMul(..) | Op::Linear { .. } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            match which {
                0 => {
                    // dA = G · Bᵀ
                    let mut d = Array::zeros(a.shape());
                    gemm(
                        m,
                        n,
                        k,
                        gd,
                        (n as isize, 1),
                        b.data(),
                        (1, n as isize),
                        d.data_mut(),
                        false,
                    );
                    d
                }
                1 => {
                    // dB = Aᵀ · G
                    let mut d = Array::zeros(b.shape());
                    gemm(
                        k,
                        m,
                        n,
                        a.data(),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        d.data_mut(),
                        false,
                    );
                    d
                }
                _ => {
                    let mut d = Array::zeros(&[n]);
                    for row in gd.chunks(n) {
                        for (acc, v) in d.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    d
                }
            }
        }
        Op::LinearTanh { .. } => {
            let gz = tanh_backward(g, output);
            vjp(&Op::Linear { x: 0, w: 0, b: 0 }, inputs, output, &gz, which)
        }
        Op::AddTanh(..) => {
            let gz = tanh_backward(g, output);
            reduce_to(inputs[which].shape(), out_shape, gz.data(), None)
        }
        Op::Broadcast(_) => reduce_to(inputs[0].shape(), out_shape, gd, None),
        Op::Reshape(_) => Array::new(inputs[0].shape().to_vec(), gd.to_vec()).expect("reshape gradient"),
        Op::Concat { axis, .. } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let row: usize = out_shape[*axis..].iter().product();
            let offset: usize = inputs[..which]
                .iter()
                .map(|x| x.shape()[*axis..].iter().product::<usize>())
                .sum();
            let chunk: usize = inputs[which].shape()[*axis..].iter().product();
            let mut data = Vec::with_capacity(outer * chunk);
            for o in 0..outer {
                data.extend_from_slice(&gd[o * row + offset..o * row + offset + chunk]);
            }
            Array::new(inputs[which].shape().to_vec(), data).expect("concat gradient")
        }
        Op::Sum(_) => Array::full(inputs[0].shape(), gd[0]),
        Op::Mean(_) => {
            let n = inputs[0].len().max(1) as f64;
            Array::full(inputs[0].shape(), gd[0] / n)
        }
        Op::SumAxis { axis, .. } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut d = Array::zeros(x.shape());
            let dst = d.data_mut();
            for o in 0..outer {
                let src = &gd[o * inner..(o + 1) * inner];
                for l in 0..len {
                    dst[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                }
            }
            d
        }
        Op::Unary(_, u) => {
            let x = inputs[0].data();
            let y = output.data();
            let data: Vec<f64> = match u {
                UnaryOp::Tanh => gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                UnaryOp::Sigmoid => gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                UnaryOp::Softplus => gd.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect(),
                UnaryOp::Exp => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                UnaryOp::Log => gd.iter().zip(x).map(|(g, x)| g / x).collect(),
                UnaryOp::Abs => gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                UnaryOp::Sin => gd.iter().zip(x).map(|(g, x)| g * x.cos()).collect(),
                UnaryOp::Cos => gd.iter().zip(x).map(|(g, x)| -g * x.sin()).collect(),
            };
            Array::new(inputs[0].shape().to_vec(), data).expect("unary gradient")
        }
        Op::Clamp { lo, hi, .. } => {
            let x = inputs[0].data();
            let data = gd
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                .collect();
            Array::new(inputs[0].shape().to_vec(), data).expect("clamp gradient")
        }
        Op::CumSumExclusive(_) => {
            let len = *out_shape.last().expect("non-scalar");
            let mut d = Array::zeros(out_shape);
            if len > 0 {
                for (src, dst) in gd.chunks(len).zip(d.data_mut().chunks_mut(len)) {
                    let mut acc = 0.0;
                    for (dv, sv) in dst.iter_mut().zip(src).rev() {
                        *dv = acc;
                        acc += sv;
                    }
                }
            }
            d
        }
        Op::SparseMatMul { matrix, .. } => {
            let x = inputs[0];
            let channels = x.shape().get(1).copied().unwrap_or(1);
            let mut d = Array::zeros(x.shape());
            matrix.apply_transpose_add(gd, channels, d.data_mut());
            d
        }
    }
}
