use super::numel;
use crate::error::{Error, Result};

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// How elements of an input map onto a (larger or equal) broadcast output.
pub(crate) enum Plan {
    Same,
    /// Input is a trailing block of the output, repeated.
    Tile(usize),
    General(Vec<usize>),
}

impl Plan {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Plan {
        let trimmed: &[usize] = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            &input[lead..]
        };
        if input == out {
            return Plan::Same;
        }
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
            return Plan::Tile(numel(trimmed).max(1));
        }
        // strides of the input aligned to output dims, zero where broadcast
        let rank = out.len();
        let mut strides = vec![0; rank];
        let mut s = 1;
        for i in (0..input.len()).rev() {
            let oi = i + rank - input.len();
            strides[oi] = if input[i] == 1 { 0 } else { s };
            s *= input[i];
        }
        Plan::General(strides)
    }

    /// Calls `f(out_index, in_index)` for every output element in order.
    #[inline]
    pub(crate) fn for_each(&self, out: &[usize], mut f: impl FnMut(usize, usize)) {
        let n = numel(out);
        match self {
            Plan::Same => (0..n).for_each(|i| f(i, i)),
            Plan::Tile(m) => (0..n).for_each(|i| f(i, i % m)),
            Plan::General(strides) => {
                let rank = out.len();
                let mut idx = vec![0usize; rank];
                let mut off = 0usize;
                for i in 0..n {
                    f(i, off);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        off += strides[d];
                        if idx[d] < out[d] {
                            break;
                        }
                        off -= strides[d] * out[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}
