//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are row-major, immutable after creation (the gradient accumulator
//! is the one interior-mutable cell), and carry their recording: every op
//! that produces a grad-requiring tensor attaches a node holding the parent
//! handles and a backward closure. `backward()` walks that graph in reverse
//! topological order, so the "tape" invariant (inputs recorded before the op)
//! holds by construction.
//!
//! The engine is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference verification.

mod ops;
pub mod gradcheck;

pub use ops::concat;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Element type of the engine: `f32` at runtime, `f64` for verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + 'static
{
    const DTYPE: &'static str;

    /// Shorthand constructor from a literal.
    fn fr(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite value")
    }

    /// Row-major gemm: C = alpha * A B + beta * C, with logical A `m x k` and
    /// logical B `k x n`. `ta`/`tb` mark the buffer as holding the transpose.
    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;

            fn gemm(
                ta: bool,
                tb: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: A buffer size");
                assert_eq!(b.len(), k * n, "gemm: B buffer size");
                assert_eq!(c.len(), m * n, "gemm: C buffer size");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    parents: Vec<Tensor<T>>,
    back: BackFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    grad: RwLock<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// Dense row-major tensor handle. Cloning is cheap (shared storage).
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{}>(id={}, shape={:?}, grad={})",
            T::DTYPE,
            self.inner.id,
            self.inner.shape,
            self.inner.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Arc::new(data),
                grad: RwLock::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// Constant tensor (not part of any gradient path).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!(
                "tensor of shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Leaf variable: participates in gradient accumulation.
    pub fn var(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::build(
            t.inner.data.to_vec(),
            t.inner.shape.clone(),
            true,
            None,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::build(vec![T::zero(); numel], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::build(vec![v; numel], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![v], vec![1], false, None)
    }

    /// Internal constructor for op outputs. The node is only recorded when a
    /// parent requires grad, so pure data paths stay graph-free.
    pub(crate) fn from_op<F>(data: Vec<T>, shape: Vec<usize>, parents: Vec<Tensor<T>>, back: F) -> Self
    where
        F: Fn(&Tensor<T>, &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let requires = parents.iter().any(|p| p.requires_grad());
        let node = if requires {
            Some(Node {
                parents,
                back: Box::new(back),
            })
        } else {
            None
        };
        Self::build(data, shape, requires, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.read().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    /// Leaf constant sharing this tensor's storage; cuts the gradient path.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                grad: RwLock::new(None),
                requires_grad: false,
                node: None,
            }),
        }
    }

    /// Leaf variable with the same contents (fresh storage).
    pub fn to_var(&self) -> Tensor<T> {
        Self::build(self.inner.data.to_vec(), self.inner.shape.clone(), true, None)
    }

    /// Re-instantiate at a different precision (detached leaf).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|&v| U::fr(v.as_f64())).collect();
        Tensor::<U>::build(data, self.inner.shape.clone(), false, None)
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut cell = self.inner.grad.write().unwrap();
        match cell.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *cell = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients are accumulated
    /// additively into every reachable tensor that requires grad; call
    /// [`zero_grad`](Self::zero_grad) between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }

        // Iterative postorder DFS; parent order is fixed by construction so
        // the walk (and therefore f32 accumulation order) is deterministic.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, pi)) = stack.pop() {
            let parents = t.inner.node.as_ref().map(|n| &n.parents);
            let np = parents.map_or(0, |p| p.len());
            if pi < np {
                let p = parents.unwrap()[pi].clone();
                stack.push((t, pi + 1));
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                topo.push(t);
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for t in topo.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            if t.requires_grad() {
                t.accumulate_grad(&g);
            }
            if let Some(node) = t.inner.node.as_ref() {
                let parent_grads = (node.back)(t, &g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        debug_assert_eq!(pg.len(), p.numel(), "backward grad size");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a += *b;
                                }
                            }
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_construction_and_invariants() {
        let t = Tensor::<f32>::var(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.numel(), 4);
        assert!(t.requires_grad());
        assert!(t.grad().is_none());
    }

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::<f32>::new(vec![1.0; 3], &[2, 2]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::<f32>::var(vec![1.0, 2.0], &[2]).unwrap();
        match t.backward() {
            Err(Error::NonScalarLoss(shape)) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::<f32>::var(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_sum_squares_is_x() {
        let x = Tensor::<f64>::var(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all().scale(0.5);
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        for (a, b) in g.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f32>::var(vec![2.0], &[1]).unwrap();
        let loss = x.scale(3.0);
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn detach_cuts_gradient_path() {
        let x = Tensor::<f32>::var(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0).detach();
        assert!(!y.requires_grad());
        let loss = y.sum_all();
        assert!(!loss.requires_grad());
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_linearity() {
        // grad of a*f + b*g == a*grad(f) + b*grad(g)
        let x0 = vec![0.3, -0.7, 1.2, 0.5];
        let (a, b) = (2.5f64, -1.25f64);

        let x = Tensor::<f64>::var(x0.clone(), &[4]).unwrap();
        let f = x.mul(&x).unwrap().sum_all();
        let g = x.gelu().sum_all();
        let combo = f.scale(a).add(&g.scale(b)).unwrap();
        combo.backward().unwrap();
        let got = x.grad().unwrap();

        let xf = Tensor::<f64>::var(x0.clone(), &[4]).unwrap();
        xf.mul(&xf).unwrap().sum_all().backward().unwrap();
        let gf = xf.grad().unwrap();
        let xg = Tensor::<f64>::var(x0, &[4]).unwrap();
        xg.gelu().sum_all().backward().unwrap();
        let gg = xg.grad().unwrap();

        for i in 0..4 {
            let want = a * gf[i] + b * gg[i];
            assert!((got[i] - want).abs() < 1e-9, "{} vs {}", got[i], want);
        }
    }
}
