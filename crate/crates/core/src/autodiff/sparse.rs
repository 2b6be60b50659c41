use crate::scalar::Scalar;

/// Fixed linear map `out[o] = sum_j w_j * x[idx_j]` in compressed-row form.
///
/// Backs gathers and bilinear resizing.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    pub(crate) out_shape: Vec<usize>,
    pub(crate) in_len: usize,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<T>,
}

impl<T: Scalar> SparseMap<T> {
    pub(crate) fn builder(out_shape: Vec<usize>, in_len: usize) -> SparseBuilder<T> {
        SparseBuilder {
            map: SparseMap {
                out_shape,
                in_len,
                offsets: vec![0],
                index: Vec::new(),
                weight: Vec::new(),
            },
        }
    }

    pub(crate) fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.offsets.len() - 1)
            .map(|o| {
                let (s, e) = (self.offsets[o], self.offsets[o + 1]);
                let mut acc = T::zero();
                for j in s..e {
                    acc += self.weight[j] * x[self.index[j] as usize];
                }
                acc
            })
            .collect()
    }

    pub(crate) fn apply_transpose(&self, g: &[T], gx: &mut [T]) {
        for o in 0..self.offsets.len() - 1 {
            let go = g[o];
            for j in self.offsets[o]..self.offsets[o + 1] {
                gx[self.index[j] as usize] += self.weight[j] * go;
            }
        }
    }
}

pub(crate) struct SparseBuilder<T> {
    map: SparseMap<T>,
}

impl<T: Scalar> SparseBuilder<T> {
    pub(crate) fn push(&mut self, index: usize, weight: T) {
        debug_assert!(index < self.map.in_len);
        self.map.index.push(index as u32);
        self.map.weight.push(weight);
    }

    pub(crate) fn end_row(&mut self) {
        self.map.offsets.push(self.map.index.len());
    }

    pub(crate) fn finish(self) -> SparseMap<T> {
        debug_assert_eq!(
            self.map.offsets.len() - 1,
            crate::tensor::numel(&self.map.out_shape)
        );
        self.map
    }
}
