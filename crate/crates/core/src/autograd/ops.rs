use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, Axis, Ix2, IxDyn, Slice};

use super::{Tape, Var};
use crate::Scalar;

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to<T: Scalar>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            assert!(
                da == db || da == 1 || db == 1,
                "shapes {a:?} and {b:?} do not broadcast"
            );
            da.max(db)
        })
        .collect()
}

fn broadcast_to<T: Scalar>(x: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    x.broadcast(IxDyn(shape))
        .expect("broadcast")
        .to_owned()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary<F, D>(self, forward: F, deriv: D) -> Var<'t, T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let x = self.value();
        let y = x.mapv(&forward);
        let tape = self.tape;
        if !tape.is_recording() || !self.requires_grad() {
            return tape.push(y, &[self], |_, _| vec![None]);
        }
        let y_rc = Rc::new(y.clone());
        tape.push(y, &[self], move |g, _| {
            let mut gx = g.clone();
            ndarray::Zip::from(&mut gx)
                .and(&*x)
                .and(&*y_rc)
                .for_each(|gi, &xi, &yi| *gi = *gi * deriv(xi, yi));
            vec![Some(gx)]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// Exponential linear unit with alpha = 1.
    pub fn elu(self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { x.exp_m1() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// `ln(1 + x)`, for `x > -1`.
    pub fn ln_1p(self) -> Var<'t, T> {
        self.unary(|x| x.ln_1p(), |x, _| T::one() / (T::one() + x))
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'t, T> {
        self.unary(|x| T::one() - x, |_, _| -T::one())
    }

    fn binary<F>(self, other: Var<'t, T>, op: F, kind: BinaryKind) -> Var<'t, T>
    where
        F: Fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>,
    {
        let a = self.value();
        let b = other.value();
        broadcast_shape(a.shape(), b.shape());
        let y = op(&a, &b);
        let a_shape = a.shape().to_vec();
        let b_shape = b.shape().to_vec();
        self.tape.push(y, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => reduce_to(g, &a_shape),
                BinaryKind::Mul => reduce_to(&(g * &*b), &a_shape),
            });
            let gb = needs[1].then(|| match kind {
                BinaryKind::Add => reduce_to(g, &b_shape),
                BinaryKind::Sub => reduce_to(&g.mapv(|v| -v), &b_shape),
                BinaryKind::Mul => reduce_to(&(g * &*a), &b_shape),
            });
            vec![ga, gb]
        })
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a + b, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a - b, BinaryKind::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |a, b| a * b, BinaryKind::Mul)
    }

    /// Sum of all entries, as a 0-dimensional value.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let s = x.sum();
        let shape = x.raw_dim();
        self.tape
            .push(ArrayD::from_elem(IxDyn(&[]), s), &[self], move |g, _| {
                let gv = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(shape.clone(), gv))]
            })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: usize) -> Var<'t, T> {
        let x = self.value();
        let y = x.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let shape = x.shape().to_vec();
        self.tape.push(y, &[self], move |g, _| vec![Some(broadcast_to(g, &shape))])
    }

    /// Mean over `axis`, keeping it with length 1.
    pub fn mean_axis(self, axis: usize) -> Var<'t, T> {
        let n = self.value().shape()[axis];
        self.sum_axis(axis).scale(T::one() / T::from_usize(n).unwrap())
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let full = x.shape().to_vec();
        assert!(start + len <= full[axis], "narrow out of range");
        let y = x
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.tape.push(y, &[self], move |g, _| {
            let mut gx = ArrayD::zeros(IxDyn(&full));
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![Some(gx)]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let y = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.tape.push(y, &[self], move |g, _| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .unwrap(),
            )]
        })
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let y = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push(y, &[self], move |g, _| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned(),
            )]
        })
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dimensions");
        let y = a2.dot(&b2).into_dyn();
        self.tape.push(y, &[self, other], move |g, needs| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            let ga = needs[0].then(|| {
                let mut out = Array2::zeros((a2.nrows(), a2.ncols()));
                general_mat_mul(T::one(), &g2, &b2.t(), T::zero(), &mut out);
                out.into_dyn()
            });
            let gb = needs[1].then(|| {
                let mut out = Array2::zeros((b2.nrows(), b2.ncols()));
                general_mat_mul(T::one(), &a2.t(), &g2, T::zero(), &mut out);
                out.into_dyn()
            });
            vec![ga, gb]
        })
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Concatenation along `axis`.
pub fn concat<'t, T: Scalar>(axis: usize, parts: &[Var<'t, T>]) -> Var<'t, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let tape: &'t Tape<T> = parts[0].tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let y = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    tape.push(y, parts, move |g, needs| {
        let mut start = 0;
        lens.iter()
            .zip(needs)
            .map(|(&len, &need)| {
                let piece = need.then(|| {
                    g.slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned()
                });
                start += len;
                piece
            })
            .collect()
    })
}
