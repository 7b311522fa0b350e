//! Arrival-time tokenization: every note becomes an (onset, duration,
//! instrument-pitch) triple of MIDI-block ids.

use std::fmt;
use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::midi::{Note, NoteSeq, DEFAULT_VELOCITY};
use crate::vocab::{Event, EventKind, VocabConfig, DURATION_BINS, MIDI_VOCAB_SIZE, ONSET_BINS};

/// Width of one onset or duration bin.
pub const BIN_SECONDS: f64 = 0.01;
/// Onsets must lie in `[0, MAX_ONSET_SECONDS)`; longer pieces are segmented.
pub const MAX_ONSET_SECONDS: f64 = 100.0;
pub const DEFAULT_ANTICIPATION_SECONDS: f64 = 5.0;

const AMTK_MAGIC: &[u8; 4] = b"AMTK";
const AMTK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("onset {0} s is outside [0, 100) s; segment the piece first")]
    OnsetOutOfRange(f64),
    #[error("notes not sorted at index {0}")]
    Unsorted(usize),
    #[error("text token at position {0} inside MIDI stream")]
    TextToken(usize),
    #[error("dangling partial triple at position {0}")]
    DanglingTriple(usize),
    #[error("token cycle broken at position {0}")]
    CycleBreak(usize),
    #[error("token id {id} at position {position} outside vocab of {limit}")]
    InvalidId { position: usize, id: u32, limit: u32 },
    #[error("bad token file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A note on the 10 ms grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct QuantNote {
    pub onset_bin: u16,
    pub duration_bin: u16,
    pub instrument: u8,
    pub pitch: u8,
    pub anticipated: bool,
}

impl QuantNote {
    pub fn events(&self) -> [Event; 3] {
        let flavor = |e: Event| if self.anticipated { e.anticipated() } else { e };
        [
            flavor(Event::onset(self.onset_bin)),
            flavor(Event::duration(self.duration_bin)),
            flavor(Event::instr_pitch(self.instrument, self.pitch)),
        ]
    }

    pub fn to_note(&self) -> Note {
        Note {
            onset: bin_seconds(self.onset_bin),
            duration: bin_seconds(self.duration_bin.max(1)),
            instrument: self.instrument,
            pitch: self.pitch,
            velocity: DEFAULT_VELOCITY,
        }
    }
}

fn bin_seconds(bin: u16) -> f64 {
    f64::from(bin) / 100.0
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Snaps a note to the 10 ms grid.
///
/// Durations are floored at one bin and clipped at 999 bins. Onsets in the
/// last half bin below 100 s land in bin 9999.
pub fn quantize(note: &Note) -> Result<QuantNote, CodecError> {
    if !(note.onset >= 0.0 && note.onset < MAX_ONSET_SECONDS) {
        return Err(CodecError::OnsetOutOfRange(note.onset));
    }
    let onset_bin = round_half_up(note.onset * 100.0).min(f64::from(ONSET_BINS - 1)) as u16;
    let duration_bin = round_half_up(note.duration * 100.0).clamp(1.0, f64::from(DURATION_BINS - 1)) as u16;
    Ok(QuantNote { onset_bin, duration_bin, instrument: note.instrument, pitch: note.pitch, anticipated: false })
}

/// What `decode(encode(notes))` returns: every note snapped to the grid.
pub fn quantized_image(notes: &NoteSeq) -> Result<NoteSeq, CodecError> {
    let snapped = notes.iter().map(|n| quantize(n).map(|q| q.to_note())).collect::<Result<Vec<_>, _>>()?;
    Ok(NoteSeq::new(snapped).expect("grid notes are valid"))
}

/// Splits notes into consecutive `max_span` windows by onset, rebasing each
/// window to start at zero. Window `k` covers `[k * max_span, (k + 1) * max_span)`
/// and is present even when empty, so its offset is recoverable from its index.
pub fn segment(notes: &NoteSeq, max_span: f64) -> Vec<NoteSeq> {
    assert!(max_span > 0.0 && max_span.is_finite(), "max_span must be positive");
    let mut windows: Vec<Vec<Note>> = Vec::new();
    for note in notes {
        let mut k = (note.onset / max_span).floor() as usize;
        let mut start = k as f64 * max_span;
        if note.onset < start {
            k -= 1;
            start = k as f64 * max_span;
        } else if note.onset - start >= max_span {
            k += 1;
            start = k as f64 * max_span;
        }
        if windows.len() <= k {
            windows.resize_with(k + 1, Vec::new);
        }
        windows[k].push(Note { onset: note.onset - start, ..*note });
    }
    windows.into_iter().map(|w| NoteSeq::new(w).expect("rebased notes stay valid")).collect()
}

/// A flat list of global token ids under one vocabulary layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    cfg: VocabConfig,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, cfg: VocabConfig) -> Result<Self, CodecError> {
        let limit = cfg.total_size();
        if let Some(position) = ids.iter().position(|&id| id >= limit) {
            return Err(CodecError::InvalidId { position, id: ids[position], limit });
        }
        Ok(Self { ids, cfg })
    }

    pub fn empty(cfg: VocabConfig) -> Self {
        Self { ids: Vec::new(), cfg }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.ids
    }

    pub fn cfg(&self) -> &VocabConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Writes the `AMTK` token file: magic, u32 version, u32 text vocab size,
    /// u32 MIDI vocab size, u64 count, then count u32 ids, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CodecError> {
        let mut buf = Vec::with_capacity(24 + 4 * self.ids.len());
        buf.extend_from_slice(AMTK_MAGIC);
        buf.extend_from_slice(&AMTK_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.cfg.text_vocab_size.to_le_bytes());
        buf.extend_from_slice(&MIDI_VOCAB_SIZE.to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads an `AMTK` file. EOS and separator ids are not stored and come
    /// from [`VocabConfig::with_text_vocab`].
    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CodecError> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header).map_err(|_| CodecError::Format("short header".into()))?;
        if &header[0..4] != AMTK_MAGIC {
            return Err(CodecError::Format("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != AMTK_VERSION {
            return Err(CodecError::Format(format!("unsupported version {version}")));
        }
        let text_vocab_size = word(8);
        let midi_vocab_size = word(12);
        if midi_vocab_size != MIDI_VOCAB_SIZE {
            return Err(CodecError::Format(format!("MIDI vocab size {midi_vocab_size}")));
        }
        let count = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let cfg = VocabConfig::with_text_vocab(text_vocab_size).map_err(|e| CodecError::Format(e.to_string()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if (bytes.len() as u64) < count.saturating_mul(4) {
            return Err(CodecError::Format(format!("header declares {count} ids, file holds {}", bytes.len() / 4)));
        }
        let ids =
            bytes.chunks_exact(4).take(count as usize).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(ids, cfg)
    }
}

fn push_triple(ids: &mut Vec<u32>, q: &QuantNote, cfg: &VocabConfig) {
    ids.extend(q.events().iter().map(|&e| cfg.global_id_of(e)));
}

/// Encodes a sorted note slice; unsorted input is rejected.
pub fn encode_notes(notes: &[Note], cfg: &VocabConfig) -> Result<TokenSequence, CodecError> {
    if let Some(i) = notes.windows(2).position(|w| {
        w[0].onset > w[1].onset
            || (w[0].onset == w[1].onset && (w[0].instrument, w[0].pitch) > (w[1].instrument, w[1].pitch))
    }) {
        return Err(CodecError::Unsorted(i + 1));
    }
    let mut ids = Vec::with_capacity(3 * notes.len());
    for n in notes {
        push_triple(&mut ids, &quantize(n)?, cfg);
    }
    Ok(TokenSequence { ids, cfg: *cfg })
}

/// Three normal-flavor tokens per note, in note order.
pub fn encode(notes: &NoteSeq, cfg: &VocabConfig) -> Result<TokenSequence, CodecError> {
    encode_notes(notes.notes(), cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecodeWarning {
    pub position: usize,
    pub message: String,
}

impl fmt::Display for DecodeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "token {}: {}", self.position, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub notes: NoteSeq,
    pub warnings: Vec<DecodeWarning>,
}

/// Turns triples back into notes. Anticipated triples decode like normal ones.
///
/// In strict mode any malformed stretch is an error. In lenient mode the
/// decoder records a warning and resumes at the next onset token.
pub fn decode(tokens: &TokenSequence, strict: bool) -> Result<Decoded, CodecError> {
    decode_ids(tokens.ids(), tokens.cfg(), strict)
}

pub fn decode_ids(ids: &[u32], cfg: &VocabConfig, strict: bool) -> Result<Decoded, CodecError> {
    let mut notes = Vec::with_capacity(ids.len() / 3);
    let mut warnings = Vec::new();
    let event = |i: usize| cfg.event_of_global(ids[i]);
    let is_onset = |i: usize| matches!(event(i), Some(Event { kind: EventKind::Onset(_), .. }));

    let mut i = 0;
    while i < ids.len() {
        let fault = match event(i) {
            None => Some(CodecError::TextToken(i)),
            Some(Event { kind: EventKind::Onset(onset), anticipated }) => {
                if i + 2 >= ids.len() && continues_triple(ids, i, cfg) {
                    Some(CodecError::DanglingTriple(i))
                } else {
                    match (event(i + 1), ids.get(i + 2).and_then(|_| event(i + 2))) {
                        (
                            Some(Event { kind: EventKind::Duration(duration), anticipated: a1 }),
                            Some(Event { kind: EventKind::InstrPitch { instrument, pitch }, anticipated: a2 }),
                        ) if a1 == anticipated && a2 == anticipated => {
                            let q =
                                QuantNote { onset_bin: onset, duration_bin: duration, instrument, pitch, anticipated };
                            notes.push(q.to_note());
                            i += 3;
                            continue;
                        }
                        (Some(Event { kind: EventKind::Duration(_), anticipated: a1 }), _) if a1 == anticipated => {
                            Some(CodecError::CycleBreak(i + 2))
                        }
                        _ => Some(CodecError::CycleBreak(i + 1)),
                    }
                }
            }
            Some(_) => Some(CodecError::CycleBreak(i)),
        };
        if let Some(err) = fault {
            if strict {
                return Err(err);
            }
            warnings.push(DecodeWarning { position: i, message: err.to_string() });
            i += 1;
            while i < ids.len() && !is_onset(i) {
                i += 1;
            }
        }
    }
    let notes = NoteSeq::new(notes).expect("decoded notes are valid");
    Ok(Decoded { notes, warnings })
}

/// True when the tokens after an onset at `i` are a valid but incomplete
/// continuation (or absent).
fn continues_triple(ids: &[u32], i: usize, cfg: &VocabConfig) -> bool {
    let Some(onset) = cfg.event_of_global(ids[i]) else { return false };
    match ids.get(i + 1).map(|&id| cfg.event_of_global(id)) {
        None => true,
        Some(Some(Event { kind: EventKind::Duration(_), anticipated })) => {
            anticipated == onset.anticipated && ids.len() == i + 2
        }
        Some(_) => false,
    }
}

/// Encodes a piece for infilling: `future` notes become anticipated triples
/// interleaved into the normal stream.
///
/// An anticipated note with onset `t` is placed right before the first
/// normal triple whose onset is at least `t - delta`, or at the end when no
/// such triple exists. Several anticipated triples at the same slot keep
/// their onset order.
pub fn interleave_infill(
    past_and_middle: &NoteSeq,
    future: &NoteSeq,
    delta: f64,
    cfg: &VocabConfig,
) -> Result<TokenSequence, CodecError> {
    let normal = past_and_middle.iter().map(quantize).collect::<Result<Vec<_>, _>>()?;
    let mut anticipated = future
        .iter()
        .map(|n| quantize(n).map(|q| QuantNote { anticipated: true, ..q }))
        .collect::<Result<Vec<_>, _>>()?;
    // Sorting the quantized notes keeps slot assignment monotone.
    anticipated.sort_by_key(|q| q.onset_bin);
    let delta_bins = round_half_up(delta * 100.0) as i64;

    let mut ids = Vec::with_capacity(3 * (normal.len() + anticipated.len()));
    let mut pending = anticipated.iter().peekable();
    for n in &normal {
        while let Some(a) = pending.peek() {
            if i64::from(n.onset_bin) >= i64::from(a.onset_bin) - delta_bins {
                push_triple(&mut ids, a, cfg);
                pending.next();
            } else {
                break;
            }
        }
        push_triple(&mut ids, n, cfg);
    }
    for a in pending {
        push_triple(&mut ids, a, cfg);
    }
    Ok(TokenSequence { ids, cfg: *cfg })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    CycleBreak,
    OnsetRegression,
    RangeError,
    DanglingTriple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub position: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self { ok: violations.is_empty(), violations }
    }

    /// `key=value` lines: `ok`, `violations`, then one `violation=` per entry.
    pub fn to_key_value(&self) -> String {
        let mut s = format!("ok={}\nviolations={}\n", self.ok, self.violations.len());
        for v in &self.violations {
            s.push_str(&format!("violation={:?}@{}\n", v.kind, v.position));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Checks that a stream holds only MIDI ids, in whole same-flavor
/// onset/duration/instrument-pitch triples, with non-decreasing normal
/// onsets. Anticipated placement is not checked.
pub fn validate(tokens: &TokenSequence) -> ValidationReport {
    validate_ids(tokens.ids(), tokens.cfg())
}

pub fn validate_ids(ids: &[u32], cfg: &VocabConfig) -> ValidationReport {
    ValidationReport::from_violations(scan(ids, cfg, false, false))
}

/// Validation for packed pretraining chunks: text ids (separators, EOS,
/// text documents) split the chunk into runs that are checked on their own;
/// a partial triple is tolerated at the very start and the very end.
pub fn validate_packed(ids: &[u32], cfg: &VocabConfig) -> ValidationReport {
    let runs: Vec<(usize, &[u32])> = {
        let mut runs = Vec::new();
        let mut start = 0;
        for (i, &id) in ids.iter().enumerate() {
            if !cfg.is_midi(id) {
                if i > start {
                    runs.push((start, &ids[start..i]));
                }
                start = i + 1;
            }
        }
        if start < ids.len() {
            runs.push((start, &ids[start..]));
        }
        runs
    };
    let mut violations = Vec::new();
    for (offset, run) in runs {
        let at_start = offset == 0;
        let at_end = offset + run.len() == ids.len();
        violations.extend(
            scan(run, cfg, at_start, at_end).into_iter().map(|v| Violation { position: v.position + offset, ..v }),
        );
    }
    ValidationReport::from_violations(violations)
}

fn scan(ids: &[u32], cfg: &VocabConfig, skip_head: bool, allow_tail: bool) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |position, kind| out.push(Violation { position, kind });
    let event = |i: usize| ids.get(i).and_then(|&id| cfg.event_of_global(id));
    let mut last_onset: Option<u16> = None;
    let mut i = 0;
    if skip_head {
        while i < ids.len() && !matches!(event(i), Some(Event { kind: EventKind::Onset(_), .. })) {
            i += 1;
        }
    }
    while i < ids.len() {
        let Some(first) = event(i) else {
            push(i, ViolationKind::RangeError);
            i += 1;
            continue;
        };
        let EventKind::Onset(onset) = first.kind else {
            push(i, ViolationKind::CycleBreak);
            i += 1;
            continue;
        };
        let same = |e: Option<Event>, want: fn(&EventKind) -> bool| matches!(e, Some(ev) if ev.anticipated == first.anticipated && want(&ev.kind));
        let dur_ok = same(event(i + 1), |k| matches!(k, EventKind::Duration(_)));
        let ip_ok = same(event(i + 2), |k| matches!(k, EventKind::InstrPitch { .. }));
        if i + 1 >= ids.len() || (i + 2 >= ids.len() && dur_ok) {
            if !allow_tail {
                push(i, ViolationKind::DanglingTriple);
            }
            break;
        }
        if !dur_ok {
            push(i + 1, ViolationKind::CycleBreak);
            i += 1;
            continue;
        }
        if !ip_ok {
            push(i + 2, ViolationKind::CycleBreak);
            i += 2;
            continue;
        }
        if !first.anticipated {
            if matches!(last_onset, Some(prev) if onset < prev) {
                push(i, ViolationKind::OnsetRegression);
            }
            last_onset = Some(onset);
        }
        i += 3;
    }
    out
}
