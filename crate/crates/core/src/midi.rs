//! Standard MIDI File reading and writing, and conversion to absolute-time
//! note lists.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::DRUM_INSTRUMENT;

pub const DEFAULT_TEMPO_US: u32 = 500_000;
pub const DEFAULT_DIVISION: u16 = 480;
pub const DEFAULT_VELOCITY: u8 = 96;
pub const DRUM_CHANNEL: u8 = 9;
/// Channels available to melodic instruments on write, in assignment order.
pub const MELODIC_CHANNELS: [u8; 15] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 14, 15];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed SMF header: {0}")]
    MalformedHeader(String),
    #[error("unsupported SMF: {0}")]
    UnsupportedFormat(String),
    #[error("truncated track {track}: {detail}")]
    TruncatedTrack { track: usize, detail: String },
    #[error("malformed event in track {track} at byte {offset}: {detail}")]
    MalformedEvent { track: usize, offset: usize, detail: String },
    #[error("invalid note: {0}")]
    InvalidNote(String),
    #[error("invalid write parameter: {0}")]
    InvalidParameter(String),
    #[error("line {line}: {detail}")]
    NoteText { line: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmfFormat {
    SingleTrack,
    MultiTrack,
}

impl SmfFormat {
    pub fn code(self) -> u16 {
        match self {
            SmfFormat::SingleTrack => 0,
            SmfFormat::MultiTrack => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    NoteOn {
        channel: u8,
        key: u8,
        velocity: u8,
    },
    NoteOff {
        channel: u8,
        key: u8,
        velocity: u8,
    },
    ProgramChange {
        channel: u8,
        program: u8,
    },
    /// Any other channel voice message (control change, pitch bend, ...).
    Channel {
        status: u8,
        data: Vec<u8>,
    },
    /// Set Tempo meta event, microseconds per quarter note.
    Tempo(u32),
    EndOfTrack,
    Meta {
        kind: u8,
        data: Vec<u8>,
    },
    SysEx {
        status: u8,
        data: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackEvent {
    /// Absolute tick from the start of the track.
    pub tick: u64,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiFile {
    pub format: SmfFormat,
    /// Ticks per quarter note.
    pub division: u16,
    pub tracks: Vec<Vec<TrackEvent>>,
}

impl MidiFile {
    pub fn channel_event_count(&self) -> usize {
        self.tracks
            .iter()
            .flatten()
            .filter(|e| {
                matches!(
                    e.message,
                    Message::NoteOn { .. }
                        | Message::NoteOff { .. }
                        | Message::ProgramChange { .. }
                        | Message::Channel { .. }
                )
            })
            .count()
    }

    /// Last tick of any event in any track.
    pub fn end_tick(&self) -> u64 {
        self.tracks.iter().flatten().map(|e| e.tick).max().unwrap_or(0)
    }

    /// Serializes to SMF bytes. Events are written in track order with
    /// non-decreasing ticks assumed; a missing End-of-Track is appended.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&self.format.code().to_be_bytes());
        out.extend_from_slice(&(self.tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.division.to_be_bytes());
        for track in &self.tracks {
            let mut data = Vec::new();
            let mut last = 0u64;
            let mut ended = false;
            for ev in track {
                let delta = ev.tick.saturating_sub(last);
                last = last.max(ev.tick);
                write_varlen(&mut data, delta as u32);
                encode_message(&mut data, &ev.message);
                if ev.message == Message::EndOfTrack {
                    ended = true;
                    break;
                }
            }
            if !ended {
                write_varlen(&mut data, 0);
                encode_message(&mut data, &Message::EndOfTrack);
            }
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(data.len() as u32).to_be_bytes());
            out.extend_from_slice(&data);
        }
        out
    }
}

fn encode_message(out: &mut Vec<u8>, msg: &Message) {
    match msg {
        Message::NoteOn { channel, key, velocity } => out.extend_from_slice(&[0x90 | channel, *key, *velocity]),
        Message::NoteOff { channel, key, velocity } => out.extend_from_slice(&[0x80 | channel, *key, *velocity]),
        Message::ProgramChange { channel, program } => out.extend_from_slice(&[0xC0 | channel, *program]),
        Message::Channel { status, data } => {
            out.push(*status);
            out.extend_from_slice(data);
        }
        Message::Tempo(us) => {
            let b = us.to_be_bytes();
            out.extend_from_slice(&[0xFF, 0x51, 0x03, b[1], b[2], b[3]]);
        }
        Message::EndOfTrack => out.extend_from_slice(&[0xFF, 0x2F, 0x00]),
        Message::Meta { kind, data } => {
            out.extend_from_slice(&[0xFF, *kind]);
            write_varlen(out, data.len() as u32);
            out.extend_from_slice(data);
        }
        Message::SysEx { status, data } => {
            out.push(*status);
            write_varlen(out, data.len() as u32);
            out.extend_from_slice(data);
        }
    }
}

fn write_varlen(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7F) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = 0x80 | (value & 0x7F) as u8;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

/// Parses SMF format 0 or 1 with a ticks-per-quarter division.
pub fn parse_smf(bytes: &[u8]) -> Result<MidiFile, MidiError> {
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(MidiError::MalformedHeader("missing or short MThd chunk".into()));
    }
    let header_len = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if header_len < 6 || 8 + header_len > bytes.len() {
        return Err(MidiError::MalformedHeader(format!("header length {header_len}")));
    }
    let format = match u16::from_be_bytes([bytes[8], bytes[9]]) {
        0 => SmfFormat::SingleTrack,
        1 => SmfFormat::MultiTrack,
        2 => return Err(MidiError::UnsupportedFormat("format 2 (independent sequences)".into())),
        f => return Err(MidiError::MalformedHeader(format!("unknown format {f}"))),
    };
    let ntracks = u16::from_be_bytes([bytes[10], bytes[11]]) as usize;
    let division = u16::from_be_bytes([bytes[12], bytes[13]]);
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("division is zero".into()));
    }

    let mut pos = 8 + header_len;
    let mut tracks = Vec::with_capacity(ntracks);
    while tracks.len() < ntracks {
        if pos + 8 > bytes.len() {
            return Err(MidiError::TruncatedTrack {
                track: tracks.len(),
                detail: format!("expected {ntracks} tracks, data ends after {}", tracks.len()),
            });
        }
        let id = &bytes[pos..pos + 4];
        let len = u32::from_be_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let start = pos + 8;
        if start + len > bytes.len() {
            return Err(MidiError::TruncatedTrack {
                track: tracks.len(),
                detail: format!("declared {len} bytes, {} available", bytes.len() - start),
            });
        }
        if id == b"MTrk" {
            let idx = tracks.len();
            tracks.push(parse_track(&bytes[start..start + len], idx)?);
        }
        pos = start + len;
    }
    Ok(MidiFile { format, division, tracks })
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    track: usize,
}

impl Cursor<'_> {
    fn byte(&mut self) -> Result<u8, MidiError> {
        let b = *self.data.get(self.pos).ok_or_else(|| MidiError::TruncatedTrack {
            track: self.track,
            detail: "event runs past end of chunk".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    fn bytes(&mut self, n: usize) -> Result<&[u8], MidiError> {
        if self.pos + n > self.data.len() {
            return Err(MidiError::TruncatedTrack {
                track: self.track,
                detail: "event data runs past end of chunk".into(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn varlen(&mut self) -> Result<u32, MidiError> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.byte()?;
            value = (value << 7) | u32::from(b & 0x7F);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::MalformedEvent {
            track: self.track,
            offset: self.pos,
            detail: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

fn parse_track(data: &[u8], track: usize) -> Result<Vec<TrackEvent>, MidiError> {
    let mut cur = Cursor { data, pos: 0, track };
    let mut events = Vec::new();
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut ended = false;

    while cur.pos < data.len() {
        tick += u64::from(cur.varlen()?);
        let offset = cur.pos;
        let first = cur.byte()?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => {
                    return Err(MidiError::MalformedEvent {
                        track,
                        offset,
                        detail: "data byte without running status".into(),
                    })
                }
            }
        };

        let message = match status {
            0x80..=0xEF => {
                running = Some(status);
                let d0 = match first_data {
                    Some(d) => d,
                    None => cur.byte()?,
                } & 0x7F;
                let channel = status & 0x0F;
                match status & 0xF0 {
                    0xC0 => Message::ProgramChange { channel, program: d0 },
                    0xD0 => Message::Channel { status, data: vec![d0] },
                    kind => {
                        let d1 = cur.byte()? & 0x7F;
                        match kind {
                            0x90 if d1 > 0 => Message::NoteOn { channel, key: d0, velocity: d1 },
                            0x90 => Message::NoteOff { channel, key: d0, velocity: 0 },
                            0x80 => Message::NoteOff { channel, key: d0, velocity: d1 },
                            _ => Message::Channel { status, data: vec![d0, d1] },
                        }
                    }
                }
            }
            0xFF => {
                running = None;
                let kind = cur.byte()?;
                let len = cur.varlen()? as usize;
                let payload = cur.bytes(len)?;
                match kind {
                    0x2F => Message::EndOfTrack,
                    0x51 if len == 3 => Message::Tempo(
                        (u32::from(payload[0]) << 16) | (u32::from(payload[1]) << 8) | u32::from(payload[2]),
                    ),
                    _ => Message::Meta { kind, data: payload.to_vec() },
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur.varlen()? as usize;
                Message::SysEx { status, data: cur.bytes(len)?.to_vec() }
            }
            _ => {
                return Err(MidiError::MalformedEvent {
                    track,
                    offset,
                    detail: format!("unexpected status byte {status:#04x}"),
                })
            }
        };
        let is_end = message == Message::EndOfTrack;
        events.push(TrackEvent { tick, message });
        if is_end {
            ended = true;
            break;
        }
    }
    if !ended {
        events.push(TrackEvent { tick, message: Message::EndOfTrack });
    }
    Ok(events)
}

/// Tick to seconds conversion over a merged tempo map.
#[derive(Debug, Clone, PartialEq)]
pub struct TempoMap {
    division: u16,
    /// (start tick, microsecond-ticks elapsed before it, tempo); the middle
    /// field is the exact sum of `ticks * tempo`, divided by `division` on use.
    segments: Vec<(u64, u128, u32)>,
}

impl TempoMap {
    /// Builds a map from `(tick, microseconds per quarter)` changes; at equal
    /// ticks the last change wins.
    pub fn new(division: u16, changes: &[(u64, u32)]) -> Self {
        let mut sorted = changes.to_vec();
        sorted.sort_by_key(|c| c.0);
        let mut segments: Vec<(u64, u128, u32)> = vec![(0, 0, DEFAULT_TEMPO_US)];
        for (tick, tempo) in sorted {
            let &(last_tick, acc, last_tempo) = segments.last().unwrap();
            if tick == last_tick {
                segments.last_mut().unwrap().2 = tempo;
            } else {
                let acc = acc + u128::from(tick - last_tick) * u128::from(last_tempo);
                segments.push((tick, acc, tempo));
            }
        }
        Self { division, segments }
    }

    pub fn from_midi(midi: &MidiFile) -> Self {
        let changes: Vec<(u64, u32)> = midi
            .tracks
            .iter()
            .flatten()
            .filter_map(|e| match e.message {
                Message::Tempo(t) => Some((e.tick, t)),
                _ => None,
            })
            .collect();
        Self::new(midi.division, &changes)
    }

    pub fn seconds(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (start, acc, tempo) = self.segments[idx];
        let total = acc + u128::from(tick - start) * u128::from(tempo);
        total as f64 / f64::from(self.division) / 1e6
    }
}

/// A note in absolute time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub onset: f64,
    pub duration: f64,
    /// 0-127 General MIDI program, 128 for drums.
    pub instrument: u8,
    pub pitch: u8,
    pub velocity: u8,
}

impl Note {
    pub fn new(onset: f64, duration: f64, instrument: u8, pitch: u8) -> Self {
        Self { onset, duration, instrument, pitch, velocity: DEFAULT_VELOCITY }
    }

    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }

    pub fn check(&self) -> Result<(), MidiError> {
        if !(self.onset.is_finite() && self.onset >= 0.0) {
            return Err(MidiError::InvalidNote(format!("onset {}", self.onset)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(MidiError::InvalidNote(format!("duration {}", self.duration)));
        }
        if self.instrument > DRUM_INSTRUMENT || self.pitch > 127 {
            return Err(MidiError::InvalidNote(format!("instrument {} pitch {}", self.instrument, self.pitch)));
        }
        Ok(())
    }

    fn order(&self, other: &Self) -> Ordering {
        self.onset
            .total_cmp(&other.onset)
            .then(self.instrument.cmp(&other.instrument))
            .then(self.pitch.cmp(&other.pitch))
            .then(self.duration.total_cmp(&other.duration))
    }
}

/// Notes sorted by (onset, instrument, pitch, duration).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoteSeq {
    notes: Vec<Note>,
}

impl NoteSeq {
    /// Validates every note and sorts.
    pub fn new(mut notes: Vec<Note>) -> Result<Self, MidiError> {
        for n in &notes {
            n.check()?;
        }
        notes.sort_by(Note::order);
        Ok(Self { notes })
    }

    /// Validates and requires the input to already be in order.
    pub fn from_sorted(notes: Vec<Note>) -> Result<Self, MidiError> {
        for n in &notes {
            n.check()?;
        }
        if let Some(i) = notes.windows(2).position(|w| w[0].order(&w[1]) == Ordering::Greater) {
            return Err(MidiError::InvalidNote(format!("notes not sorted at index {}", i + 1)));
        }
        Ok(Self { notes })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn into_notes(self) -> Vec<Note> {
        self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Note> {
        self.notes.iter()
    }

    /// One `onset_sec duration_sec instrument pitch` line per note.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "{} {} {} {}", n.onset, n.duration, n.instrument, n.pitch);
        }
        s
    }

    /// Parses the line format written by [`NoteSeq::to_text`]. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_text(text: &str) -> Result<Self, MidiError> {
        let mut notes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |detail: String| MidiError::NoteText { line: i + 1, detail };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let onset: f64 = fields[0].parse().map_err(|e| err(format!("onset: {e}")))?;
            let duration: f64 = fields[1].parse().map_err(|e| err(format!("duration: {e}")))?;
            let instrument: u8 = fields[2].parse().map_err(|e| err(format!("instrument: {e}")))?;
            let pitch: u8 = fields[3].parse().map_err(|e| err(format!("pitch: {e}")))?;
            let note = Note::new(onset, duration, instrument, pitch);
            note.check().map_err(|e| err(e.to_string()))?;
            notes.push(note);
        }
        Self::new(notes)
    }
}

impl<'a> IntoIterator for &'a NoteSeq {
    type Item = &'a Note;
    type IntoIter = std::slice::Iter<'a, Note>;

    fn into_iter(self) -> Self::IntoIter {
        self.notes.iter()
    }
}

/// Problems tolerated while extracting notes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExtractReport {
    /// Note-ons never switched off, closed at the end of the piece.
    pub unmatched_note_ons: usize,
    pub orphan_note_offs: usize,
    /// Notes dropped because their on and off fell on the same instant.
    pub zero_length: usize,
}

impl ExtractReport {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }
}

pub fn extract_notes(midi: &MidiFile) -> NoteSeq {
    extract_notes_with_report(midi).0
}

/// An open note: start tick, velocity, instrument.
type Pending = (u64, u8, u8);

/// Pairs note-ons with note-offs FIFO per (channel, pitch) across all
/// tracks and converts ticks to seconds.
pub fn extract_notes_with_report(midi: &MidiFile) -> (NoteSeq, ExtractReport) {
    let tempo = TempoMap::from_midi(midi);
    let mut report = ExtractReport::default();

    // Same-tick order: note-offs, then program changes, then note-ons.
    let mut merged: Vec<(u64, u8, usize, usize, &Message)> = Vec::new();
    for (ti, track) in midi.tracks.iter().enumerate() {
        for (ei, ev) in track.iter().enumerate() {
            let rank = match ev.message {
                Message::NoteOff { .. } | Message::NoteOn { velocity: 0, .. } => 0,
                Message::ProgramChange { .. } => 1,
                Message::NoteOn { .. } => 2,
                _ => continue,
            };
            merged.push((ev.tick, rank, ti, ei, &ev.message));
        }
    }
    merged.sort_by_key(|m| (m.0, m.1, m.2, m.3));

    let mut program = [0u8; 16];
    let mut active: HashMap<(u8, u8), VecDeque<Pending>> = HashMap::new();
    let mut notes = Vec::new();
    let mut close =
        |on_tick: u64, off_tick: u64, velocity: u8, instrument: u8, pitch: u8, report: &mut ExtractReport| {
            let onset = tempo.seconds(on_tick);
            let duration = tempo.seconds(off_tick) - onset;
            if duration > 0.0 {
                notes.push(Note { onset, duration, instrument, pitch, velocity });
            } else {
                report.zero_length += 1;
            }
        };

    for &(tick, _, _, _, msg) in &merged {
        match *msg {
            Message::ProgramChange { channel, program: p } => program[channel as usize] = p,
            Message::NoteOn { channel, key, velocity } if velocity > 0 => {
                let instrument = if channel == DRUM_CHANNEL { DRUM_INSTRUMENT } else { program[channel as usize] };
                active.entry((channel, key)).or_default().push_back((tick, velocity, instrument));
            }
            Message::NoteOff { channel, key, .. } | Message::NoteOn { channel, key, .. } => {
                match active.get_mut(&(channel, key)).and_then(VecDeque::pop_front) {
                    Some((on, vel, instr)) => close(on, tick, vel, instr, key, &mut report),
                    None => report.orphan_note_offs += 1,
                }
            }
            _ => {}
        }
    }

    let end = midi.end_tick();
    let mut leftovers: Vec<((u8, u8), Pending)> =
        active.into_iter().flat_map(|(k, q)| q.into_iter().map(move |v| (k, v))).collect();
    leftovers.sort_by_key(|&((ch, key), (tick, _, _))| (tick, ch, key));
    for ((_, key), (on, vel, instr)) in leftovers {
        report.unmatched_note_ons += 1;
        close(on, end, vel, instr, key, &mut report);
    }

    let seq = NoteSeq::new(notes).expect("extracted notes satisfy invariants");
    (seq, report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteWarning {
    /// More melodic instruments than free channels; some share a channel.
    ChannelOverflow { instruments: usize },
}

impl fmt::Display for WriteWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WriteWarning::ChannelOverflow { instruments } => {
                write!(f, "{instruments} melodic instruments share 15 channels")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmfOutput {
    pub bytes: Vec<u8>,
    pub warnings: Vec<WriteWarning>,
}

/// Writes notes as SMF format 1 at a fixed 120 BPM: a conductor track, then
/// one track per instrument in ascending instrument order.
pub fn write_smf(notes: &NoteSeq, velocity: u8, division: u16) -> Result<SmfOutput, MidiError> {
    if !(1..=127).contains(&velocity) {
        return Err(MidiError::InvalidParameter(format!("velocity {velocity}")));
    }
    if division == 0 || division & 0x8000 != 0 {
        return Err(MidiError::InvalidParameter(format!("division {division}")));
    }
    let ticks_per_second = f64::from(division) * 1e6 / f64::from(DEFAULT_TEMPO_US);
    let to_tick = |s: f64| (s * ticks_per_second).round() as u64;

    let instruments: BTreeSet<u8> = notes.iter().map(|n| n.instrument).collect();
    let melodic = instruments.iter().filter(|&&i| i != DRUM_INSTRUMENT).count();
    let mut warnings = Vec::new();
    if melodic > MELODIC_CHANNELS.len() {
        warnings.push(WriteWarning::ChannelOverflow { instruments: melodic });
    }

    let mut tracks = vec![vec![
        TrackEvent { tick: 0, message: Message::Tempo(DEFAULT_TEMPO_US) },
        TrackEvent { tick: 0, message: Message::EndOfTrack },
    ]];
    let mut melodic_index = 0;
    for &instrument in &instruments {
        let channel = if instrument == DRUM_INSTRUMENT {
            DRUM_CHANNEL
        } else {
            let c = MELODIC_CHANNELS[melodic_index % MELODIC_CHANNELS.len()];
            melodic_index += 1;
            c
        };
        let mut timed: Vec<(u64, u8, Message)> = Vec::new();
        for n in notes.iter().filter(|n| n.instrument == instrument) {
            let on = to_tick(n.onset);
            let off = to_tick(n.end()).max(on + 1);
            timed.push((on, 1, Message::NoteOn { channel, key: n.pitch, velocity }));
            timed.push((off, 0, Message::NoteOff { channel, key: n.pitch, velocity: 0 }));
        }
        // Stable: offs before ons at the same tick, otherwise input order.
        timed.sort_by_key(|t| (t.0, t.1));
        let mut track = Vec::with_capacity(timed.len() + 2);
        if instrument != DRUM_INSTRUMENT {
            track.push(TrackEvent { tick: 0, message: Message::ProgramChange { channel, program: instrument } });
        }
        let mut last = 0;
        for (tick, _, message) in timed {
            last = tick;
            track.push(TrackEvent { tick, message });
        }
        track.push(TrackEvent { tick: last, message: Message::EndOfTrack });
        tracks.push(track);
    }

    let file = MidiFile { format: SmfFormat::MultiTrack, division, tracks };
    Ok(SmfOutput { bytes: file.to_bytes(), warnings })
}
