use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::Scalar;

/// Named traversal over every learnable tensor of a module.
///
/// Both visitors must walk tensors in the same order; optimizers and the
/// checkpoint writer rely on it to pair parameters with gradients and names.
pub trait Params<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, mut a| a.fill(T::zero()));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// Elementwise `self += other`, for summing per-shard gradients.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let mut src = Vec::new();
        other.visit("", &mut |_, a| src.push(a.to_owned()));
        let mut i = 0;
        self.visit_mut("", &mut |_, mut a| {
            a += &src[i];
            i += 1;
        });
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _| out.push(n.to_string()));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
