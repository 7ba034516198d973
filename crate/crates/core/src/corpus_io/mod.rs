//! Datasets, vocabularies, embedding tables and the binary trace/checkpoint
//! formats.

mod checkpoint;
mod dataset;
mod embeddings;
mod trace;
mod vocab;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use dataset::{
    read_jsonl, write_jsonl, ClassificationRecord, Passage, QaRecord, Record, SummarizationRecord,
};
pub use embeddings::{load_embeddings, seeded_row, EmbeddingTable};
pub use trace::{read_trace, write_trace, AttentionTrace, ROW_SUM_TOLERANCE, TRACE_MAGIC};
pub use vocab::{split_tokens, tokenize, TokenizedDocument, Vocabulary, PAD_ID, UNK_ID};
