//! Dataset ingestion and the leave-one-out protocol: raw files to
//! interactions, 5-core filtering, per-user sequences, splits and batches.

mod batch;
mod canonical;
mod filter;
mod parse;
mod sequences;
mod split;

pub use batch::{make_batches, pad_window, sample_negatives, Batch, BatchMode};
pub use canonical::{load_canonical, write_canonical};
pub use filter::five_core_filter;
pub use parse::{parse_dataset, parse_reader, DatasetFormat, Interaction};
pub use sequences::{build_sequences, SequenceData, UserSequence, Vocab};
pub use split::{leave_one_out_split, EvalPair, Phase, SplitDataset, TrainUser, TrainView, UserSplit};

/// Reserved item id for padding; real items are `1..=m`.
pub const PAD: usize = 0;
