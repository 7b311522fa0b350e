//! Token-id layout of the arrival-time music vocabulary and its placement
//! after a text LLM vocabulary.
//!
//! Local MIDI ids are laid out as contiguous class blocks:
//!
//! ```text
//! [0, 10000)        onset bins (10 ms each, 0..100 s)
//! [10000, 11000)    duration bins (10 ms each, 0..10 s)
//! [11000, 27512)    instrument-pitch pairs, 129 instruments x 128 pitches
//! [27512, 55024)    the same three blocks again, anticipated flavor
//! ```
//!
//! Global ids put the text vocabulary first, so a MIDI local id `m` becomes
//! `text_vocab_size + m`.

use std::io::{Read, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ONSET_BINS: u32 = 10_000;
pub const DURATION_BINS: u32 = 1_000;
pub const INSTRUMENTS: u32 = 129;
pub const PITCHES: u32 = 128;
/// Instrument index used for the General MIDI drum kit (channel 10).
pub const DRUM_INSTRUMENT: u8 = 128;

pub const ONSET_BASE: u32 = 0;
pub const DURATION_BASE: u32 = ONSET_BASE + ONSET_BINS;
pub const INSTR_PITCH_BASE: u32 = DURATION_BASE + DURATION_BINS;
/// Size of one flavor block (normal or anticipated).
pub const NORMAL_BLOCK: u32 = INSTR_PITCH_BASE + INSTRUMENTS * PITCHES;
pub const MIDI_VOCAB_SIZE: u32 = 2 * NORMAL_BLOCK;

/// Llama 3.2 tokenizer size.
pub const DEFAULT_TEXT_VOCAB_SIZE: u32 = 128_256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("token id {id} out of range (limit {limit})")]
    OutOfRange { id: u32, limit: u32 },
    #[error("invalid vocab config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding dim mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("embedding data length {len} does not match {rows}x{dim}")]
    ShapeMismatch { rows: usize, dim: usize, len: usize },
    #[error("embedding table contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("bad embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Onset(u16),
    Duration(u16),
    InstrPitch { instrument: u8, pitch: u8 },
}

/// One MIDI token before it is given an id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub anticipated: bool,
}

impl Event {
    pub fn onset(bin: u16) -> Self {
        Self { kind: EventKind::Onset(bin), anticipated: false }
    }

    pub fn duration(bin: u16) -> Self {
        Self { kind: EventKind::Duration(bin), anticipated: false }
    }

    pub fn instr_pitch(instrument: u8, pitch: u8) -> Self {
        Self { kind: EventKind::InstrPitch { instrument, pitch }, anticipated: false }
    }

    pub fn anticipated(mut self) -> Self {
        self.anticipated = true;
        self
    }

    /// Whether the fields respect the bin and instrument/pitch ranges.
    pub fn is_valid(&self) -> bool {
        match self.kind {
            EventKind::Onset(b) => u32::from(b) < ONSET_BINS,
            EventKind::Duration(b) => u32::from(b) < DURATION_BINS,
            EventKind::InstrPitch { instrument, pitch } => {
                u32::from(instrument) < INSTRUMENTS && u32::from(pitch) < PITCHES
            }
        }
    }
}

/// Class of a MIDI token, ignoring flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Onset,
    Duration,
    InstrPitch,
}

impl EventKind {
    pub fn class(&self) -> TokenClass {
        match self {
            EventKind::Onset(_) => TokenClass::Onset,
            EventKind::Duration(_) => TokenClass::Duration,
            EventKind::InstrPitch { .. } => TokenClass::InstrPitch,
        }
    }
}

/// Maps an event to its local MIDI id in `[0, MIDI_VOCAB_SIZE)`.
///
/// The event must satisfy [`Event::is_valid`]; out-of-range fields produce ids
/// that alias other tokens.
pub fn local_id_of(event: Event) -> u32 {
    debug_assert!(event.is_valid(), "invalid event {event:?}");
    let base = match event.kind {
        EventKind::Onset(b) => ONSET_BASE + u32::from(b),
        EventKind::Duration(b) => DURATION_BASE + u32::from(b),
        EventKind::InstrPitch { instrument, pitch } => {
            INSTR_PITCH_BASE + u32::from(instrument) * PITCHES + u32::from(pitch)
        }
    };
    if event.anticipated {
        base + NORMAL_BLOCK
    } else {
        base
    }
}

pub fn event_of(local_id: u32) -> Result<Event, VocabError> {
    if local_id >= MIDI_VOCAB_SIZE {
        return Err(VocabError::OutOfRange { id: local_id, limit: MIDI_VOCAB_SIZE });
    }
    let anticipated = local_id >= NORMAL_BLOCK;
    let id = local_id % NORMAL_BLOCK;
    let kind = if id < DURATION_BASE {
        EventKind::Onset((id - ONSET_BASE) as u16)
    } else if id < INSTR_PITCH_BASE {
        EventKind::Duration((id - DURATION_BASE) as u16)
    } else {
        let ip = id - INSTR_PITCH_BASE;
        EventKind::InstrPitch { instrument: (ip / PITCHES) as u8, pitch: (ip % PITCHES) as u8 }
    };
    Ok(Event { kind, anticipated })
}

/// A global id split back into its vocabulary of origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalId {
    TextId(u32),
    MidiId(u32),
}

/// Token-id layout of the joint text + MIDI vocabulary.
///
/// The MIDI block sizes are fixed; only the text side is configurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub text_vocab_size: u32,
    pub eos_id: u32,
    pub separator_id: u32,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self::with_text_vocab(DEFAULT_TEXT_VOCAB_SIZE).expect("default config is valid")
    }
}

impl VocabConfig {
    /// Config whose EOS and separator are the last two text ids.
    pub fn with_text_vocab(text_vocab_size: u32) -> Result<Self, VocabError> {
        if text_vocab_size < 2 {
            return Err(VocabError::InvalidConfig(format!(
                "text vocab of {text_vocab_size} cannot hold EOS and separator"
            )));
        }
        Self::new(text_vocab_size, text_vocab_size - 1, text_vocab_size - 2)
    }

    pub fn new(text_vocab_size: u32, eos_id: u32, separator_id: u32) -> Result<Self, VocabError> {
        let cfg = Self { text_vocab_size, eos_id, separator_id };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), VocabError> {
        if self.eos_id == self.separator_id {
            return Err(VocabError::InvalidConfig("eos_id equals separator_id".into()));
        }
        if self.eos_id >= self.text_vocab_size || self.separator_id >= self.text_vocab_size {
            return Err(VocabError::InvalidConfig("eos_id and separator_id must be text ids".into()));
        }
        if self.text_vocab_size.checked_add(MIDI_VOCAB_SIZE).is_none() {
            return Err(VocabError::InvalidConfig("total vocab overflows u32".into()));
        }
        Ok(())
    }

    pub const fn midi_vocab_size(&self) -> u32 {
        MIDI_VOCAB_SIZE
    }

    pub const fn normal_block(&self) -> u32 {
        NORMAL_BLOCK
    }

    pub const fn total_size(&self) -> u32 {
        self.text_vocab_size + MIDI_VOCAB_SIZE
    }

    pub fn to_global(&self, local_id: u32) -> Result<u32, VocabError> {
        if local_id >= MIDI_VOCAB_SIZE {
            return Err(VocabError::OutOfRange { id: local_id, limit: MIDI_VOCAB_SIZE });
        }
        Ok(self.text_vocab_size + local_id)
    }

    pub fn to_local(&self, global_id: u32) -> Result<LocalId, VocabError> {
        if global_id >= self.total_size() {
            return Err(VocabError::OutOfRange { id: global_id, limit: self.total_size() });
        }
        Ok(if global_id < self.text_vocab_size {
            LocalId::TextId(global_id)
        } else {
            LocalId::MidiId(global_id - self.text_vocab_size)
        })
    }

    pub fn global_id_of(&self, event: Event) -> u32 {
        self.text_vocab_size + local_id_of(event)
    }

    /// Decodes a global id into a MIDI event, or `None` for text ids and
    /// ids beyond the vocabulary.
    pub fn event_of_global(&self, global_id: u32) -> Option<Event> {
        match self.to_local(global_id) {
            Ok(LocalId::MidiId(m)) => event_of(m).ok(),
            _ => None,
        }
    }

    pub fn is_midi(&self, global_id: u32) -> bool {
        global_id >= self.text_vocab_size && global_id < self.total_size()
    }

    /// Global id range of one token class in one flavor.
    pub fn class_range(&self, class: TokenClass, anticipated: bool) -> Range<u32> {
        let (lo, hi) = match class {
            TokenClass::Onset => (ONSET_BASE, DURATION_BASE),
            TokenClass::Duration => (DURATION_BASE, INSTR_PITCH_BASE),
            TokenClass::InstrPitch => (INSTR_PITCH_BASE, NORMAL_BLOCK),
        };
        let shift = self.text_vocab_size + if anticipated { NORMAL_BLOCK } else { 0 };
        lo + shift..hi + shift
    }
}

/// Dense row-major embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, EmbeddingError> {
        if data.len() != rows * dim {
            return Err(EmbeddingError::ShapeMismatch { rows, dim, len: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { rows, dim, data: vec![0.0; rows * dim] }
    }

    /// Gaussian-initialized table, reproducible from `seed`.
    pub fn random_normal(rows: usize, dim: usize, std: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let data = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
        Self { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes the `EMB1` format: magic, u32 rows, u32 dim, u32 reserved (0),
    /// then rows x dim little-endian f32.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        let rows = u32::try_from(self.rows).map_err(|_| EmbeddingError::Format("rows exceed u32".into()))?;
        let dim = u32::try_from(self.dim).map_err(|_| EmbeddingError::Format("dim exceeds u32".into()))?;
        w.write_all(b"EMB1")?;
        w.write_all(&rows.to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EmbeddingError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| EmbeddingError::Format("short header".into()))?;
        if &header[0..4] != b"EMB1" {
            return Err(EmbeddingError::Format("bad magic".into()));
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let n = rows.checked_mul(dim).ok_or_else(|| EmbeddingError::Format("rows x dim overflows".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| EmbeddingError::Format(format!("expected {n} floats")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(rows, dim, data)
    }
}

/// Stacks the MIDI embedding rows under the text embedding rows.
///
/// Text rows are copied bit for bit, so every pretrained row keeps its id.
pub fn expand_embeddings(e_llm: &EmbeddingTable, e_amt: &EmbeddingTable) -> Result<EmbeddingTable, EmbeddingError> {
    if e_llm.dim != e_amt.dim {
        return Err(EmbeddingError::DimMismatch { left: e_llm.dim, right: e_amt.dim });
    }
    let mut data = Vec::with_capacity(e_llm.data.len() + e_amt.data.len());
    data.extend_from_slice(&e_llm.data);
    data.extend_from_slice(&e_amt.data);
    Ok(EmbeddingTable { rows: e_llm.rows + e_amt.rows, dim: e_llm.dim, data })
}

/// Std of the Gaussian used for fresh MIDI embedding rows.
pub const MIDI_EMBEDDING_INIT_STD: f32 = 0.02;

/// Fresh MIDI embedding block with one row per local MIDI id.
pub fn init_midi_embeddings(dim: usize, seed: u64) -> EmbeddingTable {
    EmbeddingTable::random_normal(MIDI_VOCAB_SIZE as usize, dim, MIDI_EMBEDDING_INIT_STD, seed)
}
