//! Reverse-mode automatic differentiation over dynamic-shape `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! a closure producing the gradients of its parents. Nodes are created in
//! topological order, so [`Graph::backward`] is a single reverse sweep. Graphs
//! are built per forward pass and discarded afterwards; parameters live
//! outside the tape and are bound as leaves each pass.
//!
//! Everything is `f64`. The finite-difference checks in the test suite run at
//! step 1e-5 and relative tolerance 1e-4, which single precision cannot meet.

mod conv;
mod sample;

pub use sample::{bilinear_sample, tps_u};

use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Ops index node storage as flat slices, so every array entering the tape
/// is forced into standard (C-order) layout here.
fn standardize(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` influenced the root.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Computation tape. Not `Send`: build and consume a graph on one thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. Leaves have no parents; their gradients are readable
    /// after `backward`, which is how parameters receive updates.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(standardize(value)),
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf from a scalar.
    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub(crate) fn rc_value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Value of a single-element node as `f64`.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, parents: Vec<Var>, backward: BackwardFn) -> Var {
        self.nodes.push(Node {
            value: Rc::new(standardize(value)),
            parents,
            backward: Some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `root`. The seed gradient is all-ones in the shape
    /// of `root` (a scalar root gets the usual 1.0).
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                let parent_grads = bw(&g);
                assert_eq!(parent_grads.len(), self.nodes[i].parents.len());
                for (p, pg) in self.nodes[i].parents.iter().zip(parent_grads) {
                    let pg = standardize(pg);
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push(out, vec![a, b], Box::new(|g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push(out, vec![a, b], Box::new(|g| vec![g.clone(), -g]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            vec![a, b],
            Box::new(move |g| vec![g * &*vb, g * &*va]),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        self.push(-&*va, vec![a], Box::new(|g| vec![-g]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let va = self.rc_value(a);
        self.push(&*va * k, vec![a], Box::new(move |g| vec![g * k]))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let va = self.rc_value(a);
        self.push(&*va + k, vec![a], Box::new(|g| vec![g.clone()]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(f64::exp);
        let out_rc = Rc::new(out);
        let captured = Rc::clone(&out_rc);
        self.nodes.push(Node {
            value: out_rc,
            parents: vec![a],
            backward: Some(Box::new(move |g| vec![g * &*captured])),
        });
        Var(self.nodes.len() - 1)
    }

    /// Natural logarithm. Callers clamp away from zero first.
    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(f64::ln);
        self.push(out, vec![a], Box::new(move |g| vec![g / &*va]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(|x| x.max(0.0));
        self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut dg = g.clone();
                dg.zip_mut_with(&va, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![dg]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out_rc = Rc::new(out);
        let captured = Rc::clone(&out_rc);
        self.nodes.push(Node {
            value: out_rc,
            parents: vec![a],
            backward: Some(Box::new(move |g| {
                let mut dg = g.clone();
                dg.zip_mut_with(&captured, |d, &s| *d *= s * (1.0 - s));
                vec![dg]
            })),
        });
        Var(self.nodes.len() - 1)
    }

    /// Clamp to `[lo, hi]`; gradient passes only through the interior.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(|x| x.clamp(lo, hi));
        self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut dg = g.clone();
                dg.zip_mut_with(&va, |d, &x| {
                    if x < lo || x > hi {
                        *d = 0.0;
                    }
                });
                vec![dg]
            }),
        )
    }

    /// Square root with a guarded derivative: below `eps` the subgradient is
    /// taken as zero so exact-zero residuals stay finite.
    pub fn sqrt_guarded(&mut self, a: Var, eps: f64) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(|x| x.max(0.0).sqrt());
        self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut dg = g.clone();
                dg.zip_mut_with(&va, |d, &x| {
                    if x > eps {
                        *d *= 0.5 / x.sqrt();
                    } else {
                        *d = 0.0;
                    }
                });
                vec![dg]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc_value(a), self.rc_value(b));
        assert_eq!(va.shape(), vb.shape(), "div: shape mismatch");
        let out = &*va / &*vb;
        self.push(
            out,
            vec![a, b],
            Box::new(move |g| {
                let da = g / &*vb;
                let db = -(g * &*va) / (&*vb * &*vb);
                vec![da, db]
            }),
        )
    }

    /// `x + eps * sign(x)` with `sign(0) = 1`; gradient is the identity.
    /// Keeps denominators away from zero without bending their derivative.
    pub fn sign_offset(&mut self, a: Var, eps: f64) -> Var {
        let va = self.rc_value(a);
        let out = va.mapv(|x| x + eps * if x < 0.0 { -1.0 } else { 1.0 });
        self.push(out, vec![a], Box::new(|g| vec![g.clone()]))
    }

    /// Contiguous slice of a rank-1 node.
    pub fn slice_1d(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.rc_value(a);
        assert_eq!(va.ndim(), 1, "slice_1d: rank 1 required");
        let total = va.len();
        let out = va
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut dg = ArrayD::zeros(IxDyn(&[total]));
                for i in 0..len {
                    dg[[start + i]] = g[[i]];
                }
                vec![dg]
            }),
        )
    }

    /// Stop-gradient: same value, no backward edge.
    pub fn detach(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        self.leaf(va)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let shape: Vec<usize> = va.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), va.sum());
        self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let gs = g.iter().next().copied().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gs)]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let va = self.rc_value(a);
        let out = va.sum_axis(Axis(axis));
        let in_shape: Vec<usize> = va.shape().to_vec();
        self.push(
            out.into_dyn(),
            vec![a],
            Box::new(move |g| {
                let mut dg = ArrayD::zeros(IxDyn(&in_shape));
                for mut lane in dg.axis_iter_mut(Axis(axis)) {
                    lane.zip_mut_with(g, |d, &x| *d = x);
                }
                vec![dg]
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.rc_value(a);
        let in_shape: Vec<usize> = va.shape().to_vec();
        let out = va
            .to_shape(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        self.push(
            out,
            vec![a],
            Box::new(move |g| {
                vec![g
                    .to_shape(IxDyn(&in_shape))
                    .expect("reshape backward")
                    .to_owned()]
            }),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<Rc<ArrayD<f64>>> = parts.iter().map(|&p| self.rc_value(p)).collect();
        let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &refs).expect("concat: incompatible shapes");
        // concatenate along an inner axis can yield a non-standard layout;
        // downstream ops index raw slices.
        let out = if out.is_standard_layout() {
            out
        } else {
            out.as_standard_layout().to_owned()
        };
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &s in &sizes {
                    let part = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + s))
                        .to_owned();
                    grads.push(part);
                    start += s;
                }
                grads
            }),
        )
    }

    // ---- linear algebra ----

    /// Transpose of a rank-2 node.
    pub fn transpose2(&mut self, a: Var) -> Var {
        let va = self.rc_value(a);
        let out = va
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose2: rank 2 required")
            .t()
            .to_owned()
            .into_dyn();
        self.push(
            out,
            vec![a],
            Box::new(|g| {
                vec![g
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .t()
                    .to_owned()
                    .into_dyn()]
            }),
        )
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc_value(a);
        let vb = self.rc_value(b);
        let ma = va
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be rank 2");
        let mb = vb
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be rank 2");
        assert_eq!(ma.ncols(), mb.nrows(), "matmul: inner dim mismatch");
        let out = ma.dot(&mb).into_dyn();
        self.push(
            out,
            vec![a, b],
            Box::new(move |g| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let ma = va.view().into_dimensionality::<Ix2>().unwrap();
                let mb = vb.view().into_dimensionality::<Ix2>().unwrap();
                let da = gm.dot(&mb.t()).into_dyn();
                let db = ma.t().dot(&gm).into_dyn();
                vec![da, db]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_rel_err};
    use ndarray::arr1;

    fn leafd(g: &mut Graph, data: &[f64]) -> Var {
        g.leaf(arr1(data).into_dyn())
    }

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::new();
        let a = leafd(&mut g, &[1.0, 2.0]);
        let b = leafd(&mut g, &[3.0, -4.0]);
        let p = g.mul(a, b);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[3.0, -4.0]);
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let a = leafd(&mut g, &[2.0]);
        let sq = g.mul(a, a);
        let grads = g.backward(sq);
        // d(a*a)/da = 2a = 4
        assert!((grads.get(a).unwrap()[[0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_matches_finite_difference() {
        let a = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| ((ix[0] * 4 + ix[1]) as f64 * 0.37).sin());
        let b = ArrayD::from_shape_fn(IxDyn(&[4, 2]), |ix| ((ix[0] * 2 + ix[1]) as f64 * 0.91).cos());

        let eval = |a_in: &ArrayD<f64>, b_in: &ArrayD<f64>| -> f64 {
            let mut g = Graph::new();
            let va = g.leaf(a_in.clone());
            let vb = g.leaf(b_in.clone());
            let m = g.matmul(va, vb);
            let sq = g.mul(m, m);
            let s = g.sum(sq);
            g.scalar_value(s)
        };

        let mut g = Graph::new();
        let va = g.leaf(a.clone());
        let vb = g.leaf(b.clone());
        let m = g.matmul(va, vb);
        let sq = g.mul(m, m);
        let s = g.sum(sq);
        let grads = g.backward(s);

        let num_a = finite_diff(&|x| eval(x, &b), &a, 1e-5);
        let num_b = finite_diff(&|x| eval(&a, x), &b, 1e-5);
        assert!(max_rel_err(grads.get(va).unwrap(), &num_a) < 1e-6);
        assert!(max_rel_err(grads.get(vb).unwrap(), &num_b) < 1e-6);
    }

    #[test]
    fn elementwise_chain_matches_finite_difference() {
        let base = arr1(&[0.3, -0.7, 1.2, 0.05]).into_dyn();
        let run = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let e = g.exp(v);
            let s = g.sigmoid(e);
            let r = g.relu(s);
            let sq = g.sqrt_guarded(r, 1e-12);
            let m = g.mean(sq);
            g.scalar_value(m)
        };
        let mut g = Graph::new();
        let v = g.leaf(base.clone());
        let e = g.exp(v);
        let s = g.sigmoid(e);
        let r = g.relu(s);
        let sq = g.sqrt_guarded(r, 1e-12);
        let m = g.mean(sq);
        let grads = g.backward(m);
        let num = finite_diff(&run, &base, 1e-6);
        assert!(max_rel_err(grads.get(v).unwrap(), &num) < 1e-6);
    }

    #[test]
    fn concat_and_sum_axis_roundtrip_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1., 2., 3., 4.]).unwrap());
        let b = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![5., 6.]).unwrap());
        let c = g.concat(0, &[a, b]);
        let s = g.sum_axis(c, 0);
        let t = g.sum(s);
        assert!((g.scalar_value(t) - 21.0).abs() < 1e-12);
        let grads = g.backward(t);
        assert_eq!(grads.get(a).unwrap().shape(), &[2, 2]);
        assert!(grads.get(a).unwrap().iter().all(|&x| x == 1.0));
        assert!(grads.get(b).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = leafd(&mut g, &[2.0]);
        let d = g.detach(a);
        let p = g.mul(d, d);
        let grads = g.backward(p);
        assert!(grads.get(a).is_none());
    }
}
