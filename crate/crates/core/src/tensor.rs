//! Named parameter collections shared by the optimizer and checkpoints.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

/// A fixed, ordered set of named trainable arrays.
///
/// `tensors` and `tensors_mut` must enumerate the same names in the same
/// order; gradients of a parameter set use the implementing type itself.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += other`, elementwise, tensor by tensor.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, mut dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst += &s;
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t *= factor;
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }

    fn to_owned_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        self.tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_owned()))
            .collect()
    }
}

/// Prefixes each tensor name of `set` with `prefix.`.
pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(String, T)>,
) -> impl Iterator<Item = (String, T)> + 'a
where
    T: 'a,
{
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}
