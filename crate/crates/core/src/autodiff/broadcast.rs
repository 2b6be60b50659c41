use crate::tensor::numel;

/// Maps a flat output index to the flat index of a broadcast operand.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// operand is a trailing block of the output: `i % n`
    Cycle(usize),
    /// operand is a leading block of the output: `i / inner`
    Repeat(usize),
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Cycle(n) => i % n,
            Bcast::Repeat(inner) => i / inner,
            Bcast::Map(m) => m[i],
        }
    }
}

/// Numpy-style result shape, or `None` when the shapes are incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

pub(crate) fn plan(input: &[usize], out: &[usize]) -> Bcast {
    if input == out {
        return Bcast::Same;
    }
    if numel(input) == 1 {
        return Bcast::Scalar;
    }
    let rank = out.len();
    let mut padded = vec![1; rank - input.len()];
    padded.extend_from_slice(input);
    let first = padded.iter().position(|&d| d != 1).unwrap_or(rank);
    if padded[first..] == out[first..] {
        return Bcast::Cycle(numel(&out[first..]));
    }
    let last = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if padded[..last] == out[..last] {
        return Bcast::Repeat(numel(&out[last..]));
    }
    let mut strides = vec![0; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Bcast::Map(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn materialize(b: &Bcast, n: usize) -> Vec<usize> {
        (0..n).map(|i| b.at(i)).collect()
    }

    #[test]
    fn shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shape(&[3, 1], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
    }

    #[test]
    fn fast_paths_agree_with_general_map() {
        // middle-axis broadcast only has the general form
        let p = plan(&[2, 1, 3], &[2, 4, 3]);
        assert!(matches!(p, Bcast::Map(_)));
        assert_eq!(materialize(&p, 24)[..6], [0, 1, 2, 0, 1, 2]);
        assert_eq!(materialize(&p, 24)[12..15], [3, 4, 5]);
        assert!(matches!(plan(&[3], &[5, 3]), Bcast::Cycle(3)));
        assert!(matches!(plan(&[5, 1], &[5, 3]), Bcast::Repeat(3)));
        assert!(matches!(plan(&[4, 6, 1], &[4, 6, 3]), Bcast::Repeat(3)));
    }
}
