use super::Tensor;

/// A fixed collection of named parameter tensors.
///
/// Gradients use the same type as the parameters they belong to, so optimizers and
/// finite-difference checks can walk both in lockstep.
pub trait Params: Clone {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b).expect("identical parameter layout");
        }
    }

    fn scale_all(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Prefixes child parameter names, `prefix.name`.
pub fn prefixed<'a>(
    prefix: &str,
    items: Vec<(String, &'a Tensor)>,
) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> impl Iterator<Item = (String, &'a mut Tensor)> + 'a {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}
