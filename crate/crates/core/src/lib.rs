//! MIDI-side machinery for text-to-MIDI language models.
//!
//! - [`midi`]: Standard MIDI File parsing/writing and note extraction.
//! - [`vocab`]: the arrival-time token layout, its placement after a text
//!   vocabulary, and embedding-table expansion.
//! - [`codec`]: notes to tokens and back, infilling interleave, validation.
//! - [`dataset`]: packed pretraining sequences and text-prefixed finetuning
//!   examples with infilling augmentation.
//! - [`decoder`]: nucleus sampling, grammar masks, constrained generation and
//!   an n-gram reference model.
//! - [`bench`]: real-time-factor benchmark reports.

pub mod bench;
pub mod codec;
pub mod dataset;
pub mod decoder;
pub mod midi;
pub mod vocab;

pub use codec::{decode, encode, interleave_infill, quantize, segment, validate, TokenSequence};
pub use midi::{extract_notes, parse_smf, write_smf, MidiFile, Note, NoteSeq};
pub use vocab::{expand_embeddings, EmbeddingTable, Event, EventKind, VocabConfig};
