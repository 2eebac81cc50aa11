use crate::TensorError;

/// Per-sequence boolean attention pattern for a batch of `batch` windows of
/// length `len`. `allows(b, i, j)` means query `i` may attend to key `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Validates that every query row can see at least one key.
    pub fn new(batch: usize, len: usize, allowed: Vec<bool>) -> Result<Self, TensorError> {
        if allowed.len() != batch * len * len {
            return Err(TensorError::Shape {
                op: "attention_mask",
                lhs: vec![batch, len, len],
                rhs: vec![allowed.len()],
            });
        }
        for b in 0..batch {
            for i in 0..len {
                let row = &allowed[(b * len + i) * len..(b * len + i + 1) * len];
                if !row.iter().any(|&x| x) {
                    return Err(TensorError::Contract(format!(
                        "attention row {i} of sequence {b} is fully masked"
                    )));
                }
            }
        }
        Ok(Self { batch, len, allowed })
    }

    /// Lower-triangular mask over real positions. `pad[b * len + t]` marks
    /// padding; pad keys are never visible and pad queries see only themselves.
    pub fn causal(batch: usize, len: usize, pad: &[bool]) -> Result<Self, TensorError> {
        Self::from_pad(batch, len, pad, true)
    }

    /// Full mask over real positions (pad keys hidden).
    pub fn bidirectional(batch: usize, len: usize, pad: &[bool]) -> Result<Self, TensorError> {
        Self::from_pad(batch, len, pad, false)
    }

    fn from_pad(batch: usize, len: usize, pad: &[bool], causal: bool) -> Result<Self, TensorError> {
        if pad.len() != batch * len {
            return Err(TensorError::Shape {
                op: "attention_mask",
                lhs: vec![batch, len],
                rhs: vec![pad.len()],
            });
        }
        let mut allowed = vec![false; batch * len * len];
        for b in 0..batch {
            let p = &pad[b * len..(b + 1) * len];
            for i in 0..len {
                let row = &mut allowed[(b * len + i) * len..(b * len + i + 1) * len];
                if p[i] {
                    row[i] = true;
                    continue;
                }
                let upto = if causal { i + 1 } else { len };
                for j in 0..upto {
                    row[j] = !p[j];
                }
            }
        }
        Self::new(batch, len, allowed)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allows(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.len + i) * self.len + j]
    }

    #[inline]
    pub(crate) fn row(&self, b: usize, i: usize) -> &[bool] {
        let start = (b * self.len + i) * self.len;
        &self.allowed[start..start + self.len]
    }
}
