//! Forward constructors for every differentiable operation.

use super::tape::{gemm, Op, Tape, UnaryKind, Var};
use super::{broadcast_strides, for_each_broadcast, split_at_axis, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(m, k, n, self.value(a).data(), self.value(b).data());
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` for x [n×in], w [in×out], b [out], fused into one node.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::dim(
                "linear",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut data = gemm(m, k, n, self.value(x).data(), self.value(w).data());
        let bias = self.value(b).data();
        for row in data.chunks_exact_mut(n) {
            for (v, c) in row.iter_mut().zip(bias) {
                *v += c;
            }
        }
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(out, Op::Linear(x, w, b), &[x, w, b]))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let strides = broadcast_strides(&bshape, &ashape).ok_or_else(|| {
            Error::dim(name, format!("{bshape:?} does not broadcast to {ashape:?}"))
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; av.len()];
        match kind {
            BinaryKind::Add => for_each_broadcast(&bshape, &ashape, &strides, |i, j| {
                data[i] = av[i] + bv[j];
            }),
            BinaryKind::Sub => for_each_broadcast(&bshape, &ashape, &strides, |i, j| {
                data[i] = av[i] - bv[j];
            }),
            BinaryKind::Mul => for_each_broadcast(&bshape, &ashape, &strides, |i, j| {
                data[i] = av[i] * bv[j];
            }),
        }
        let out = Tensor {
            shape: ashape,
            data,
        };
        let op = match kind {
            BinaryKind::Add => Op::Add(a, b),
            BinaryKind::Sub => Op::Sub(a, b),
            BinaryKind::Mul => Op::Mul(a, b),
        };
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| c * v);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = match kind {
            UnaryKind::Tanh => x.map(f64::tanh),
            UnaryKind::Sigmoid => x.map(sigmoid),
            UnaryKind::Exp => x.map(f64::exp),
            UnaryKind::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: kind.name(),
                        detail: format!("log of non-positive value {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            UnaryKind::Negate => x.map(|v| -v),
            UnaryKind::Square => x.map(|v| v * v),
        };
        Ok(self.push(out, Op::Unary(a, kind), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a).expect("total function")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a).expect("total function")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a).expect("total function")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Negate, a).expect("total function")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a).expect("total function")
    }

    /// Elementwise `f` whose derivative is `df(x, f(x))`.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        self.push(out, Op::Map(a, Box::new(df)), &[a])
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let x = self.value(a);
        let out = match axis {
            None => {
                let s: f64 = x.data().iter().sum();
                Tensor::scalar(if mean { s / x.len() as f64 } else { s })
            }
            Some(ax) => {
                if ax >= x.rank() {
                    return Err(Error::dim(
                        if mean { "mean" } else { "sum" },
                        format!("axis {ax} out of range for shape {:?}", x.shape()),
                    ));
                }
                let (outer, n, inner) = split_at_axis(x.shape(), ax);
                let mut data = vec![0.0; outer * inner];
                let xv = x.data();
                for o in 0..outer {
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let src = &xv[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if mean {
                    let scale = 1.0 / n as f64;
                    data.iter_mut().for_each(|v| *v *= scale);
                }
                let mut shape = x.shape().to_vec();
                shape.remove(ax);
                Tensor { shape, data }
            }
        };
        let op = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        Ok(self.push(out, op, &[a]))
    }

    /// Sum over `axis` (dropped from the shape), or over everything.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let agree = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !agree {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let out = Tensor { shape, data };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || start >= end || end > x.shape()[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", x.shape()),
            ));
        }
        let (outer, total, inner) = split_at_axis(x.shape(), axis);
        let n = end - start;
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * total + start) * inner..(o * total + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = n;
        let out = Tensor { shape, data };
        Ok(self.push(out, Op::Slice { src: a, axis, start }, &[a]))
    }

    /// Picks `indices` along `axis`, in order; indices may repeat.
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || indices.is_empty() || indices.iter().any(|&i| i >= x.shape()[axis]) {
            return Err(Error::dim(
                "gather",
                format!("indices {indices:?} on axis {axis} of {:?}", x.shape()),
            ));
        }
        let (outer, total, inner) = split_at_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                data.extend_from_slice(&x.data()[(o * total + i) * inner..(o * total + i + 1) * inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = indices.len();
        let out = Tensor { shape, data };
        let op = Op::Gather {
            src: a,
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.push(out, op, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Repeats `a` to `shape` under the trailing-axes broadcast rule.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let strides = broadcast_strides(&ashape, shape).ok_or_else(|| {
            Error::dim("broadcast_to", format!("{ashape:?} does not broadcast to {shape:?}"))
        })?;
        let av = self.value(a).data();
        let mut data = vec![0.0; shape.iter().product()];
        for_each_broadcast(&ashape, shape, &strides, |i, j| data[i] = av[j]);
        let out = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.push(out, Op::BroadcastTo(a), &[a]))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 3.0, 4.0, 5.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);

        let err = tape.matmul(row, row).unwrap_err().to_string();
        assert!(err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn elementwise_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let p = tape.mul(x, y).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0, 10.0, 18.0]);
        let wide = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.add(x, wide).is_err());
    }

    #[test]
    fn unary_hand_cases() {
        let mut tape = Tape::new();
        let zero = tape.param(Tensor::scalar(0.0));
        let th = tape.tanh(zero);
        assert_eq!(tape.value(th).item(), 0.0);
        let g = tape.backward(th).unwrap();
        assert_eq!(g.wrt(zero).item(), 1.0);
        let sg = tape.sigmoid(zero);
        assert_eq!(tape.value(sg).item(), 0.5);
        let bad = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(bad), Err(Error::Domain { .. })));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x, None).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);
        let c = tape.constant(Tensor::full(&[4, 5], 2.5));
        let m = tape.mean(c, Some(1)).unwrap();
        assert_eq!(tape.value(m), &Tensor::full(&[4], 2.5));
        assert!(tape.mean(c, Some(2)).is_err());
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let single = tape.concat(&[a], 1).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let ab = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(ab).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(ab, 1, 0, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(a));
        assert!(tape.slice(ab, 1, 2, 4).is_err());
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 1.0, 1.0]));
        let s = tape.sum(w, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);

        let sq = tape.square(w);
        let total = tape.sum(sq, None).unwrap();
        let half = tape.scale(total, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0, 2.0]);

        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
