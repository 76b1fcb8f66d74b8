//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! Every value produced during a forward pass lives in the tape's arena and is
//! addressed by a [`Var`]. An operation records a backward node only when one
//! of its inputs requires a gradient, so inference passes leave the tape flat.
//! Ids grow monotonically, which keeps the node list topologically ordered.
//!
//! `sign` is not differentiable and is never recorded; attacks apply it to
//! gradients after `backward` returns.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// `grads` returns one entry per input, in the order the inputs were
/// recorded. Entries for inputs with `needs[i] == false` may be `None`.
pub trait BackwardOp<T: Scalar> {
    fn kind(&self) -> &'static str;

    fn grads(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    inputs: Vec<Var>,
    op: Box<dyn BackwardOp<T>>,
}

pub struct Tape<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
    requires_grad: Vec<bool>,
    nodes: Vec<Option<Node<T>>>,
    backward_passes: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            requires_grad: Vec::new(),
            nodes: Vec::new(),
            backward_passes: 0,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of recorded backward nodes.
    pub fn node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    /// Operation kinds of recorded nodes in recording order.
    pub fn node_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().flatten().map(|n| n.op.kind()).collect()
    }

    pub fn backward_passes(&self) -> usize {
        self.backward_passes
    }

    /// Stores `output` and, if any input requires a gradient, its backward rule.
    pub fn record(
        &mut self,
        output: Tensor<T>,
        inputs: &[Var],
        op: impl BackwardOp<T> + 'static,
    ) -> Var {
        let needs = inputs.iter().any(|v| self.requires_grad[v.0]);
        let node = needs.then(|| Node {
            inputs: inputs.to_vec(),
            op: Box::new(op),
        });
        self.push(output, needs, node)
    }

    /// True when some input of a pending operation will need a backward rule.
    pub fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.requires_grad[v.0])
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, node: Option<Node<T>>) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.nodes.push(node);
        Var(id)
    }

    /// Gradients of the scalar `loss` with respect to every value on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.values[loss.0];
        if !lv.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.requires_grad[loss.0] {
            return Err(Error::Tape(
                "detached tape: loss does not depend on any tensor requiring a gradient".into(),
            ));
        }
        self.backward_passes += 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(node) = &self.nodes[id] else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.requires_grad[v.0])
                .collect();
            let contributions = node.op.grads(&inputs, &self.values[id], &g, &needs);
            debug_assert_eq!(contributions.len(), node.inputs.len(), "{}", node.op.kind());
            for ((input, contribution), need) in node.inputs.iter().zip(contributions).zip(needs) {
                let (true, Some(c)) = (need, contribution) else {
                    continue;
                };
                debug_assert_eq!(c.len(), self.values[input.0].len(), "{}", node.op.kind());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let shapes = self.values[..=loss.0]
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.values[a.0].map(|v| v * s);
        self.record(out, &[a], Scale(s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.values[a.0].map(|v| v + s);
        self.record(out, &[a], AddScalar)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum_f64();
        self.record(Tensor::scalar(T::from_f64(s)), &[a], Sum)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let m = t.sum_f64() / t.len() as f64;
        self.record(Tensor::scalar(T::from_f64(m)), &[a], Mean)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[a.0].reshape(shape)?;
        Ok(self.record(out, &[a], Reshape))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "{} of {:?} and {:?}",
                kind.name(),
                x.shape(),
                y.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| match kind {
                BinaryKind::Add => p + q,
                BinaryKind::Sub => p - q,
                BinaryKind::Mul => p * q,
            })
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(out, &[a, b], Binary(kind)))
    }
}

/// Gradient buffers indexed by tape id. Only leaf gradients are retained;
/// leaves never reached from the loss report zero gradients.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.to_vec()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

struct Binary(BinaryKind);

impl<T: Scalar> BackwardOp<T> for Binary {
    fn kind(&self) -> &'static str {
        self.0.name()
    }

    fn grads(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        match self.0 {
            BinaryKind::Add => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
            BinaryKind::Sub => vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|&v| -v).collect()),
            ],
            BinaryKind::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
                ]
            }
        }
    }
}

struct Scale<T>(T);

impl<T: Scalar> BackwardOp<T> for Scale<T> {
    fn kind(&self) -> &'static str {
        "scale"
    }
    fn grads(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

struct AddScalar;

impl<T: Scalar> BackwardOp<T> for AddScalar {
    fn kind(&self) -> &'static str {
        "add_scalar"
    }
    fn grads(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

struct Sum;

impl<T: Scalar> BackwardOp<T> for Sum {
    fn kind(&self) -> &'static str {
        "sum"
    }
    fn grads(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; inputs[0].len()])]
    }
}

struct Mean;

impl<T: Scalar> BackwardOp<T> for Mean {
    fn kind(&self) -> &'static str {
        "mean"
    }
    fn grads(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let n = inputs[0].len();
        vec![Some(vec![g[0] / T::from_f64(n as f64); n])]
    }
}

struct Reshape;

impl<T: Scalar> BackwardOp<T> for Reshape {
    fn kind(&self) -> &'static str {
        "reshape"
    }
    fn grads(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

/// Largest relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `h`, computed as
/// `max_i |analytic_i - central_i| / max(1e-12, |central_i|)`.
///
/// `f` receives a fresh tape and the input variable and must return a scalar.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    let analytic = if tape.requires_grad(loss) {
        tape.backward(loss)?.wrt(xv)
    } else {
        Tensor::zeros(x.shape())
    };

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let out = f(&mut t, v)?;
        let value = t.value(out);
        if !value.is_scalar() {
            return Err(Error::Tape(
                "finite_diff_check needs a scalar function".into(),
            ));
        }
        let y = value.data()[0];
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("f evaluated to {y}")));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - central).abs() / central.abs().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let c = tape.constant(t(&[2], &[1.0, -2.0]));
        let sc = tape.scale(c, 3.0);
        assert_eq!(tape.value(sc).data(), &[3.0, -6.0]);

        let d = tape.constant(t(&[2], &[2.0, 2.0]));
        let e = tape.constant(t(&[2], &[0.0, 5.0]));
        let m = tape.mul(d, e).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 10.0]);
        // nothing requires a gradient, so nothing is recorded
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, 7.0]), true);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn dot_gradient_is_twice_x() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = tape.dot(x, x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_gradient_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn detached_loss_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let d = tape.detach(x);
        let loss = tape.sum(d);
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x*x + 3x) -> grad = 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let s = tape.add(sq, lin).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn finite_diff_of_sum_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn finite_diff_of_square() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let err = finite_diff_check(|t, v| t.dot(v, v), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn finite_diff_rejects_non_finite() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let r = finite_diff_check(
            |t, v| {
                let s = t.scale(v, f64::INFINITY);
                Ok(t.sum(s))
            },
            &x,
            1e-3,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn mean_sub_reshape_gradients() {
        let x = Tensor::new(&[2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let r = t.reshape(v, &[4])?;
                let c = t.constant(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
                let d = t.sub(r, c)?;
                let sq = t.mul(d, d)?;
                let s = t.add_scalar(sq, 1.0);
                Ok(t.mean(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
