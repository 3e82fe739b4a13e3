use std::fmt;
use std::rc::Rc;

/// Identifies a node on a specific tape. Tapes are numbered globally so a
/// tensor recorded on one tape cannot silently be fed to another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeRef {
    pub(crate) tape: u64,
    pub(crate) node: usize,
}

/// A dense n-dimensional array of `f64` values.
///
/// Plain tensors are just storage. Once an op on a [`crate::autodiff::Tape`]
/// touches a tensor it gains a `node` handle tying it to that tape; only
/// tensors with `requires_grad` set ever receive a gradient.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    pub(crate) node: Option<TapeRef>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that the shape extents multiply out to the
    /// element count.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            expect,
            data.len()
        );
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    /// Marks the tensor as a differentiable leaf for subsequent tape use.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// A scalar is any single-element tensor (shape `[]` or `[1]`).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows of a matrix (or length of a vector).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a matrix (1 for vectors/scalars).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    /// Stable identity of the underlying storage, used by the tape to lease
    /// the same parameter once per pass.
    pub(crate) fn storage_id(&self) -> usize {
        Rc::as_ptr(&self.data) as *const f64 as usize
    }

    pub(crate) fn storage(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub(crate) fn from_storage(
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        node: Option<TapeRef>,
        requires_grad: bool,
    ) -> Self {
        Tensor {
            shape,
            data,
            node,
            requires_grad,
        }
    }

    /// Copies the values into a freshly owned tensor detached from any tape.
    pub fn detached(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.to_vec())
    }

    /// Detached copy with one element replaced; used by finite differencing.
    pub fn with_value_at(&self, idx: usize, v: f64) -> Tensor {
        let mut data = self.data.to_vec();
        data[idx] = v;
        let mut t = Tensor::new(self.shape.clone(), data);
        t.requires_grad = self.requires_grad;
        t
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{:?}{}{:?}{}",
            self.shape,
            if self.requires_grad { "*" } else { "" },
            preview,
            if self.data.len() > 8 { "…" } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_element_count_must_agree() {
        let t = Tensor::matrix(2, 3, vec![0.0; 6]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.len(), 6);
    }

    #[test]
    #[should_panic]
    fn mismatched_shape_panics() {
        let _ = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn scalar_shapes() {
        assert!(Tensor::scalar(4.0).is_scalar());
        assert!(Tensor::new(vec![1], vec![4.0]).is_scalar());
        assert!(!Tensor::vector(vec![1.0, 2.0]).is_scalar());
    }
}
