use std::fmt;

use super::AutodiffError;

/// Dense row-major tensor of `f64`.
///
/// A tensor with an empty shape is a scalar holding one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.contains(&0) {
            return Err(AutodiffError::Usage(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor from a closure over the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(AutodiffError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index
        .iter()
        .zip(strides(shape))
        .zip(shape)
        .map(|((&i, s), &d)| {
            assert!(i < d, "index {i} out of bounds for dimension {d}");
            i * s
        })
        .sum()
}

/// Maps flat indices of an output shape onto a (possibly broadcast) source
/// shape of equal rank. Dimensions of size one in the source repeat.
pub(crate) struct BroadcastMap {
    out_shape: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastMap {
    pub(crate) fn new(out_shape: &[usize], src_shape: &[usize]) -> Self {
        debug_assert_eq!(out_shape.len(), src_shape.len());
        let base = strides(src_shape);
        let src_strides = src_shape
            .iter()
            .zip(base)
            .map(|(&d, s)| if d == 1 { 0 } else { s })
            .collect();
        Self {
            out_shape: out_shape.to_vec(),
            src_strides,
        }
    }

    /// Source flat index for every output flat index, in order.
    pub(crate) fn indices(&self) -> Vec<usize> {
        let total: usize = self.out_shape.iter().product();
        let rank = self.out_shape.len();
        let mut out = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..total {
            out.push(src);
            for axis in (0..rank).rev() {
                counter[axis] += 1;
                src += self.src_strides[axis];
                if counter[axis] < self.out_shape[axis] {
                    break;
                }
                src -= self.src_strides[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
        out
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, AutodiffError> {
    let mismatch = || AutodiffError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn broadcast_indices_repeat_unit_axes() {
        let map = BroadcastMap::new(&[2, 3], &[2, 1]);
        assert_eq!(map.indices(), vec![0, 0, 0, 1, 1, 1]);
        let map = BroadcastMap::new(&[2, 3], &[1, 3]);
        assert_eq!(map.indices(), vec![0, 1, 2, 0, 1, 2]);
        let map = BroadcastMap::new(&[2, 2, 2], &[2, 2, 2]);
        assert_eq!(map.indices(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[2, 3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[3, 2]).is_err());
        assert!(broadcast_shape("t", &[2, 3], &[3]).is_err());
    }
}
