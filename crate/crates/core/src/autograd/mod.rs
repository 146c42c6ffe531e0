//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar result walks the recording in reverse and
//! returns the gradient of that scalar with respect to every node that needs one.
//!
//! Nodes only keep a backward closure when at least one parent requires a
//! gradient, so constant sub-graphs (for example the clean target spectrum)
//! cost nothing on the way back. An inference tape ([`Tape::inference`]) never
//! records closures at all.

mod conv;
mod ops;
mod spectral;

pub use conv::{conv2d, ConvGeometry, FreqMode};
pub use ops::concat;
pub use spectral::{amplitude_projection_var, complex_mul_var, istft_var, log_compress_var, stft_var};

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::Scalar;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &[bool]) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Recording of a computation graph.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that evaluates operations without keeping anything for a backward pass.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push_leaf(value, self.record)
    }

    fn push_leaf(&self, value: ArrayD<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation. `backward` receives the output gradient and a mask of
    /// which parents need gradients, and returns one entry per parent.
    pub(crate) fn push<F>(&self, value: ArrayD<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&ArrayD<T>, &[bool]) -> Vec<Option<ArrayD<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: if requires_grad {
                parents.iter().map(|p| p.id).collect()
            } else {
                Vec::new()
            },
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<ArrayD<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates from a single-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward needs a single-element root"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.raw_dim(), T::one()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape");
                match grads[p].as_mut() {
                    Some(acc) => *acc += &pg,
                    None => grads[p] = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Grads<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the root.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> ArrayD<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(var.shape()),
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<ArrayD<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> IxDyn {
        self.value().raw_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

pub mod gradcheck {
    //! Central finite-difference gradient checker.

    use ndarray::ArrayD;

    use super::{Tape, Var};

    /// Worst disagreement found by [`check`].
    #[derive(Debug, Clone)]
    pub struct GradCheckReport {
        pub max_rel_error: f64,
        /// (input index, flat element index) of the worst entry.
        pub worst_at: (usize, usize),
        pub analytic: f64,
        pub numeric: f64,
        pub entries_checked: usize,
    }

    /// Relative error with a floor on the denominator so that entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Compares the tape gradient of `f` with central differences of step `step`
    /// for every entry of every input. `f` maps the input variables to a scalar.
    pub fn check<F>(inputs: &[ArrayD<f64>], step: f64, f: F) -> GradCheckReport
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| grads.get_or_zeros(*v).iter().copied().collect())
            .collect();

        let eval = |xs: &[ArrayD<f64>]| {
            let tape = Tape::inference();
            let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            f(&tape, &vars).item()
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_at: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            entries_checked: 0,
        };
        let mut probe: Vec<ArrayD<f64>> = inputs.iter().map(|x| x.as_standard_layout().to_owned()).collect();
        for k in 0..inputs.len() {
            for i in 0..probe[k].len() {
                let orig = probe[k].as_slice().unwrap()[i];
                probe[k].as_slice_mut().unwrap()[i] = orig + step;
                let up = eval(&probe);
                probe[k].as_slice_mut().unwrap()[i] = orig - step;
                let down = eval(&probe);
                probe[k].as_slice_mut().unwrap()[i] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic[k][i];
                let rel = relative_error(a, numeric);
                report.entries_checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst_at = (k, i);
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        report
    }
}
