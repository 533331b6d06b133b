//! Decision fusion across receivers: the predicted class is the argmax of
//! the elementwise sum of every receiver's class probabilities.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FusionError {
    #[error("no probability vectors to fuse")]
    Empty,
    #[error("receiver {receiver_id} has {got} classes, expected {expected}")]
    ClassCount {
        receiver_id: u8,
        expected: usize,
        got: usize,
    },
}

/// One receiver's distribution over the classes of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    pub receiver_id: u8,
    pub probs: Vec<f64>,
}

impl ClassProbabilities {
    pub fn new(receiver_id: u8, probs: Vec<f64>) -> Self {
        ClassProbabilities { receiver_id, probs }
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Elementwise sum of the vectors, summed in the given order.
pub fn summed(vectors: &[ClassProbabilities]) -> Result<Vec<f64>, FusionError> {
    let first = vectors.first().ok_or(FusionError::Empty)?;
    let k = first.probs.len();
    let mut sum = vec![0.0; k];
    for v in vectors {
        if v.probs.len() != k {
            return Err(FusionError::ClassCount {
                receiver_id: v.receiver_id,
                expected: k,
                got: v.probs.len(),
            });
        }
        for (s, p) in sum.iter_mut().zip(&v.probs) {
            *s += p;
        }
    }
    Ok(sum)
}

/// Fused class decision; ties go to the lowest class index.
pub fn fuse(vectors: &[ClassProbabilities]) -> Result<usize, FusionError> {
    let first = vectors.first().ok_or(FusionError::Empty)?;
    if first.probs.is_empty() {
        return Err(FusionError::ClassCount {
            receiver_id: first.receiver_id,
            expected: 1,
            got: 0,
        });
    }
    Ok(argmax(&summed(vectors)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(rx: u8, probs: &[f64]) -> ClassProbabilities {
        ClassProbabilities::new(rx, probs.to_vec())
    }

    #[test]
    fn single_receiver() {
        assert_eq!(fuse(&[p(0, &[0.2, 0.5, 0.3])]).unwrap(), 1);
    }

    #[test]
    fn sum_decides() {
        assert_eq!(fuse(&[p(0, &[0.6, 0.4]), p(1, &[0.3, 0.7])]).unwrap(), 1);
    }

    #[test]
    fn ties_go_low() {
        assert_eq!(
            fuse(&[p(0, &[0.25, 0.5, 0.25]), p(1, &[0.5, 0.25, 0.25])]).unwrap(),
            0
        );
        assert_eq!(fuse(&[p(0, &[0.5, 0.5])]).unwrap(), 0);
    }

    #[test]
    fn errors() {
        assert_eq!(fuse(&[]), Err(FusionError::Empty));
        assert!(matches!(
            fuse(&[p(0, &[0.5, 0.5]), p(3, &[1.0])]),
            Err(FusionError::ClassCount { receiver_id: 3, .. })
        ));
    }
}
