use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Scalar, Var};
use crate::error::{Result, WmError};

/// Dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    pub requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(WmError::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(WmError::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(WmError::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); n], grad: None, requires_grad: false }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None, requires_grad: false }
    }

    /// Normal(0, std²) entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::of(z * std)
            })
            .collect();
        Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false }
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [F]> {
        self.grad.as_deref_mut()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(WmError::shape(
                "accumulate_grad",
                format!("{} gradient values for tensor of {}", g.len(), self.data.len()),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![F::zero(); g.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b = *b + v;
        }
        Ok(())
    }

    pub fn set_grad(&mut self, g: Vec<F>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(WmError::shape("set_grad", "length differs from data"));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| G::of(v.f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }
}

/// Ordered, named parameter collection with stable names across save/load.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a graph leaf. `trainable` overrides the
    /// tensors' own `requires_grad` flags when given.
    pub fn bind(&self, g: &mut Graph<F>, trainable: Option<bool>) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf_ref(t, trainable.unwrap_or(t.requires_grad)))
            .collect()
    }

    /// Adds graph gradients for `vars` into the matching grad buffers.
    pub fn accumulate_grads(&mut self, g: &Graph<F>, vars: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Gradient buffers, zero-filled where absent.
    pub fn grads_or_zero(&self) -> Vec<Vec<F>> {
        self.tensors
            .iter()
            .map(|t| t.grad().map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); t.numel()]))
            .collect()
    }

    pub fn same_layout(&self, other: &ParamSet<F>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// FNV-1a over the raw bits of every value, in order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_invariants() {
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
    }
}
