//! Corpus ingestion, tokenization and sequence packing.

pub mod bpe;
pub mod corpus;
pub mod pack;

pub use bpe::{learn_bpe, Vocab, EOD, PAD, SEP, VIRTUAL_BASE};
pub use corpus::{filter_corpus, read_corpus, write_corpus, Document};
pub use pack::{pack_sequences, split_train_val, PackedDataset};
