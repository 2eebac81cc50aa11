use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("id {id} out of range for a table with {rows} rows")]
    Vocab { id: usize, rows: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}
