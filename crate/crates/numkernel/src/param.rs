use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use crate::Tensor;

/// A named, shared, persistent learnable tensor.
///
/// Parameters outlive any individual tape: the super-network holds them, each
/// forward pass snapshots their values onto a fresh tape, and `backward`
/// accumulates gradients into them. Cloning a `Param` clones the handle, not
/// the storage.
#[derive(Clone)]
pub struct Param {
    name: Rc<str>,
    tensor: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(name: impl Into<String>, mut tensor: Tensor) -> Self {
        tensor.set_requires_grad(true);
        Param {
            name: Rc::from(name.into()),
            tensor: Rc::new(RefCell::new(tensor)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> Ref<'_, Tensor> {
        self.tensor.borrow()
    }

    pub fn tensor_mut(&self) -> RefMut<'_, Tensor> {
        self.tensor.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tensor.borrow().numel()
    }

    /// Copy of the current values.
    pub fn value(&self) -> Tensor {
        let mut t = self.tensor.borrow().clone();
        t.set_requires_grad(false);
        t
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.borrow().grad().map(|g| g.to_vec())
    }

    pub fn zero_grad(&self) {
        self.tensor.borrow_mut().zero_grad();
    }

    /// Replace the stored values, keeping the shape.
    pub fn set_data(&self, data: &[f64]) {
        let mut t = self.tensor.borrow_mut();
        assert_eq!(t.numel(), data.len(), "param {}: size mismatch", self.name);
        t.data_mut().copy_from_slice(data);
    }

    /// Two handles are the same parameter iff they share storage.
    pub fn same_storage(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.tensor, &other.tensor)
    }
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Param({}, shape {:?})", self.name, self.shape())
    }
}
