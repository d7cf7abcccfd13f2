//! Primitive tensor operations recorded on the tape.
//!
//! Binary arithmetic broadcasts the right operand over a 2-D view of the left
//! one: same shape, scalar, row vector (`[K]` or `[1, K]`) or column (`[N, 1]`).

use rayon::prelude::*;

use crate::ad::{AdError, Backward, Tape, Tensor, Var};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn classify<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Bcast, AdError> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.len() == 1 {
        return Ok(Bcast::Scalar);
    }
    if b.rows() == 1 && b.len() == a.cols() {
        return Ok(Bcast::Row);
    }
    if b.cols() == 1 && b.len() == a.rows() {
        return Ok(Bcast::Col);
    }
    Err(AdError::ShapeMismatch(format!(
        "cannot broadcast {:?} onto {:?}",
        b.shape(),
        a.shape()
    )))
}

#[inline]
fn bval<T: Real>(b: &Tensor<T>, mode: Bcast, idx: usize, cols: usize) -> T {
    match mode {
        Bcast::Same => b.data()[idx],
        Bcast::Scalar => b.data()[0],
        Bcast::Row => b.data()[idx % cols],
        Bcast::Col => b.data()[idx / cols],
    }
}

fn reduce<T: Real>(g: Vec<T>, mode: Bcast, rows: usize, cols: usize, shape: &[usize]) -> Tensor<T> {
    let data = match mode {
        Bcast::Same => g,
        Bcast::Scalar => vec![g.iter().copied().sum()],
        Bcast::Row => {
            let mut out = vec![T::zero(); cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += g[r * cols + c];
                }
            }
            out
        }
        Bcast::Col => (0..rows)
            .map(|r| g[r * cols..(r + 1) * cols].iter().copied().sum())
            .collect(),
    };
    Tensor::new(shape.to_vec(), data).expect("reduced adjoint matches operand")
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary {
    kind: BinKind,
    mode: Bcast,
}

impl<T: Real> Backward<T> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let (a, b) = (inputs[0], inputs[1]);
        let (rows, cols) = (a.rows(), a.cols());
        let g = grad.data();
        let n = g.len();
        let (ga, gb): (Vec<T>, Vec<T>) = match self.kind {
            BinKind::Add => (g.to_vec(), g.to_vec()),
            BinKind::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
            BinKind::Mul => (
                (0..n).map(|i| g[i] * bval(b, self.mode, i, cols)).collect(),
                (0..n).map(|i| g[i] * a.data()[i]).collect(),
            ),
            BinKind::Div => (
                (0..n).map(|i| g[i] / bval(b, self.mode, i, cols)).collect(),
                (0..n)
                    .map(|i| {
                        let bv = bval(b, self.mode, i, cols);
                        -g[i] * a.data()[i] / (bv * bv)
                    })
                    .collect(),
            ),
        };
        Ok(vec![
            Some(Tensor::new(a.shape().to_vec(), ga)?),
            Some(reduce(gb, self.mode, rows, cols, b.shape())),
        ])
    }
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Scale(f64),
    Offset(f64),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Sin,
    Cos,
    Square,
    Abs,
    Sqrt,
    Clamp(f64, f64),
}

struct Unary {
    kind: UnKind,
}

impl<T: Real> Backward<T> for Unary {
    fn name(&self) -> &'static str {
        match self.kind {
            UnKind::Neg => "neg",
            UnKind::Scale(_) => "scale",
            UnKind::Offset(_) => "offset",
            UnKind::Relu => "relu",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Tanh => "tanh",
            UnKind::Exp => "exp",
            UnKind::Sin => "sin",
            UnKind::Cos => "cos",
            UnKind::Square => "square",
            UnKind::Abs => "abs",
            UnKind::Sqrt => "sqrt",
            UnKind::Clamp(..) => "clamp",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let x = inputs[0].data();
        let y = output.data();
        let g = grad.data();
        let two = T::of(2.0);
        let d: Vec<T> = (0..g.len())
            .map(|i| {
                let gi = g[i];
                match self.kind {
                    UnKind::Neg => -gi,
                    UnKind::Scale(c) => gi * T::of(c),
                    UnKind::Offset(_) => gi,
                    UnKind::Relu => {
                        if x[i] > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    }
                    UnKind::Sigmoid => gi * y[i] * (T::one() - y[i]),
                    UnKind::Tanh => gi * (T::one() - y[i] * y[i]),
                    UnKind::Exp => gi * y[i],
                    UnKind::Sin => gi * x[i].cos(),
                    UnKind::Cos => -gi * x[i].sin(),
                    UnKind::Square => gi * two * x[i],
                    UnKind::Abs => {
                        if x[i] > T::zero() {
                            gi
                        } else if x[i] < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    }
                    UnKind::Sqrt => gi / (two * y[i]),
                    UnKind::Clamp(lo, hi) => {
                        if x[i] >= T::of(lo) && x[i] <= T::of(hi) {
                            gi
                        } else {
                            T::zero()
                        }
                    }
                }
            })
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct SumAll;

impl<T: Real> Backward<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        Ok(vec![Some(Tensor::filled(inputs[0].shape(), grad.item()))])
    }
}

struct RowSum;

impl<T: Real> Backward<T> for RowSum {
    fn name(&self) -> &'static str {
        "row_sum"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let a = inputs[0];
        let cols = a.cols();
        let data = (0..a.len()).map(|i| grad.data()[i / cols]).collect();
        Ok(vec![Some(Tensor::new(a.shape().to_vec(), data)?)])
    }
}

const PAR_WORK: usize = 1 << 16;

/// `a[n,k] * b[k,m]`, parallel over output rows; each row is summed in fixed order.
pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    let row = |(i, o): (usize, &mut [T])| {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let br = &b[kk * m..(kk + 1) * m];
            for (oj, &bj) in o.iter_mut().zip(br) {
                *oj += av * bj;
            }
        }
    };
    if n * k * m >= PAR_WORK && m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else if m > 0 {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

struct MatMul;

impl<T: Real> Backward<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let (a, b) = (inputs[0], inputs[1]);
        let (n, k) = (a.rows(), a.cols());
        let m = b.cols();
        let g = grad.data();
        let (ad, bd) = (a.data(), b.data());
        // dA = G B^T
        let mut ga = vec![T::zero(); n * k];
        let row_a = |(i, o): (usize, &mut [T])| {
            let gr = &g[i * m..(i + 1) * m];
            for (kk, ok) in o.iter_mut().enumerate() {
                let br = &bd[kk * m..(kk + 1) * m];
                let mut s = T::zero();
                for j in 0..m {
                    s += gr[j] * br[j];
                }
                *ok = s;
            }
        };
        // dB = A^T G
        let mut gb = vec![T::zero(); k * m];
        let row_b = |(kk, o): (usize, &mut [T])| {
            for i in 0..n {
                let av = ad[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let gr = &g[i * m..(i + 1) * m];
                for (oj, &gj) in o.iter_mut().zip(gr) {
                    *oj += av * gj;
                }
            }
        };
        if n * k * m >= PAR_WORK {
            if k > 0 {
                ga.par_chunks_mut(k).enumerate().for_each(row_a);
            }
            if m > 0 {
                gb.par_chunks_mut(m).enumerate().for_each(row_b);
            }
        } else {
            if k > 0 {
                ga.chunks_mut(k).enumerate().for_each(row_a);
            }
            if m > 0 {
                gb.chunks_mut(m).enumerate().for_each(row_b);
            }
        }
        Ok(vec![
            Some(Tensor::new(a.shape().to_vec(), ga)?),
            Some(Tensor::new(b.shape().to_vec(), gb)?),
        ])
    }
}

struct Concat {
    widths: Vec<usize>,
}

impl<T: Real> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let total: usize = self.widths.iter().sum();
        let rows = grad.len() / total.max(1);
        let mut out = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for (inp, &w) in inputs.iter().zip(&self.widths) {
            let mut d = Vec::with_capacity(rows * w);
            for r in 0..rows {
                d.extend_from_slice(&grad.data()[r * total + start..r * total + start + w]);
            }
            out.push(Some(Tensor::new(inp.shape().to_vec(), d)?));
            start += w;
        }
        Ok(out)
    }
}

struct SliceCols {
    start: usize,
    len: usize,
}

impl<T: Real> Backward<T> for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let a = inputs[0];
        let cols = a.cols();
        let mut d = vec![T::zero(); a.len()];
        for r in 0..a.rows() {
            d[r * cols + self.start..r * cols + self.start + self.len]
                .copy_from_slice(&grad.data()[r * self.len..(r + 1) * self.len]);
        }
        Ok(vec![Some(Tensor::new(a.shape().to_vec(), d)?)])
    }
}

struct Gather {
    index: Vec<usize>,
}

impl<T: Real> Backward<T> for Gather {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        let t = inputs[0];
        let k = t.cols();
        let mut d = vec![T::zero(); t.len()];
        for (r, &src) in self.index.iter().enumerate() {
            for c in 0..k {
                d[src * k + c] += grad.data()[r * k + c];
            }
        }
        Ok(vec![Some(Tensor::new(t.shape().to_vec(), d)?)])
    }
}

struct Reshape;

impl<T: Real> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AdError> {
        Ok(vec![Some(grad.clone().reshaped(inputs[0].shape())?)])
    }
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, AdError> {
        let (av, bv) = (self.value(a), self.value(b));
        let mode = classify(av, bv)?;
        let cols = av.cols();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bval(bv, mode, i, cols);
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Box::new(Binary { kind, mode }), &[a, b], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Result<Var, AdError> {
        let f = |x: T| -> T {
            match kind {
                UnKind::Neg => -x,
                UnKind::Scale(c) => x * T::of(c),
                UnKind::Offset(c) => x + T::of(c),
                UnKind::Relu => x.max(T::zero()),
                UnKind::Sigmoid => sigmoid(x),
                UnKind::Tanh => x.tanh(),
                UnKind::Exp => x.exp(),
                UnKind::Sin => x.sin(),
                UnKind::Cos => x.cos(),
                UnKind::Square => x * x,
                UnKind::Abs => x.abs(),
                UnKind::Sqrt => x.sqrt(),
                UnKind::Clamp(lo, hi) => x.max(T::of(lo)).min(T::of(hi)),
            }
        };
        let value = self.value(a).map(f);
        self.push(Box::new(Unary { kind }), &[a], value)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.unary(UnKind::Scale(c), a)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.unary(UnKind::Offset(c), a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Exp, a)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Cos, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(UnKind::Sqrt, a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, AdError> {
        self.unary(UnKind::Clamp(lo, hi), a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Box::new(SumAll), &[a], value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AdError> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `[N, K] -> [N, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, AdError> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let data = (0..rows)
            .map(|r| av.data()[r * cols..(r + 1) * cols].iter().copied().sum())
            .collect();
        let value = Tensor::new(vec![rows, 1], data)?;
        self.push(Box::new(RowSum), &[a], value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(AdError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let value = Tensor::new(vec![n, m], matmul_raw(av.data(), bv.data(), n, k, m))?;
        self.push(Box::new(MatMul), &[a, b], value)
    }

    /// `x W + b` for `x: [N, K]`, `W: [K, M]`, `b: [M]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(AdError::ShapeMismatch("concat_cols row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push(Box::new(Concat { widths }), parts, value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if start + len > cols {
            return Err(AdError::ShapeMismatch(format!(
                "slice {start}..{} of {cols} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        self.push(Box::new(SliceCols { start, len }), &[a], value)
    }

    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var, AdError> {
        let tv = self.value(table);
        let k = tv.cols();
        let mut data = Vec::with_capacity(index.len() * k);
        for &i in index {
            if i >= tv.rows() {
                return Err(AdError::InvalidArgument(format!(
                    "row {i} outside table of {} rows",
                    tv.rows()
                )));
            }
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![index.len(), k], data)?;
        self.push(
            Box::new(Gather {
                index: index.to_vec(),
            }),
            &[table],
            value,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push(Box::new(Reshape), &[a], value)
    }
}
