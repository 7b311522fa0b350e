//! Training corpora: packed pretraining chunks, caption-prefixed finetuning
//! examples, and infilling variants that triple the finetuning token count.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, TokenSequence, DEFAULT_ANTICIPATION_SECONDS, MAX_ONSET_SECONDS};
use crate::midi::{self, MidiError, Note, NoteSeq};
use crate::vocab::VocabConfig;

pub const MAX_TEXT_PREFIX: usize = 256;
pub const MAX_MIDI_TOKENS: usize = 2048;
pub const DEFAULT_SEQLEN: usize = 2048;
/// Infill cut times are drawn from this fraction range of the piece.
pub const CUT_RANGE: (f64, f64) = (0.2, 0.8);
/// Infill gap length range in seconds.
pub const GAP_RANGE: (f64, f64) = (5.0, 15.0);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no notes to build a MIDI example from")]
    EmptyMidi,
    #[error("infilling needs at least 3 distinct onsets, found {0}")]
    TooSparse(usize),
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Midi { path: PathBuf, source: MidiError },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Turns text into ids below the text vocabulary size.
pub trait TextTokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
}

/// One id per UTF-8 byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl TextTokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }
}

/// Tokenizes and keeps at most the first `max_len` ids.
pub fn tokenize_text(caption: &str, tok: &dyn TextTokenizer, max_len: usize) -> Vec<u32> {
    let mut ids = tok.encode(caption);
    ids.truncate(max_len);
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub midi_path: String,
    #[serde(default)]
    pub caption: Option<String>,
    pub split: Split,
}

/// JSON Lines manifest, one entry per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| DatasetError::Manifest { line: i + 1, detail };
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if !seen.insert(entry.midi_path.clone()) {
                return Err(err(format!("duplicate path {}", entry.midi_path)));
            }
            if entry.split == Split::Finetune && entry.caption.is_none() {
                return Err(err("finetune entry without caption".into()));
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    /// Loads a manifest and resolves relative MIDI paths against its directory.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })?;
        let mut manifest = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut manifest.entries {
            if Path::new(&e.midi_path).is_relative() {
                e.midi_path = base.join(&e.midi_path).to_string_lossy().into_owned();
            }
        }
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("entries serialize") + "\n").collect()
    }

    /// Entries of one split, sorted by path.
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        let mut out: Vec<_> = self.entries.iter().filter(|e| e.split == split).collect();
        out.sort_by(|a, b| a.midi_path.cmp(&b.midi_path));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExampleKind {
    Pretrain,
    Finetune,
    Infill,
}

impl ExampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExampleKind::Pretrain => "pretrain",
            ExampleKind::Finetune => "finetune",
            ExampleKind::Infill => "infill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub ids: Vec<u32>,
    /// Number of caption tokens at the head of `ids`.
    pub prefix_len: usize,
    pub kind: ExampleKind,
}

impl TrainingExample {
    /// The MIDI body: for finetune kinds, `ids` without caption, separator
    /// and trailing EOS; for pretraining chunks, the whole chunk.
    pub fn midi_part(&self) -> &[u32] {
        match self.kind {
            ExampleKind::Pretrain => &self.ids,
            _ => &self.ids[self.prefix_len + 1..self.ids.len() - 1],
        }
    }
}

fn midi_budget() -> usize {
    MAX_MIDI_TOKENS / 3 * 3
}

fn prefixed_example(
    caption: Option<&str>,
    mut body: Vec<u32>,
    kind: ExampleKind,
    cfg: &VocabConfig,
    tok: &dyn TextTokenizer,
) -> TrainingExample {
    body.truncate(midi_budget());
    let mut ids = caption.map(|c| tokenize_text(c, tok, MAX_TEXT_PREFIX)).unwrap_or_default();
    let prefix_len = ids.len();
    ids.reserve(body.len() + 2);
    ids.push(cfg.separator_id);
    ids.extend_from_slice(&body);
    ids.push(cfg.eos_id);
    TrainingExample { ids, prefix_len, kind }
}

/// `caption ++ [separator] ++ midi ++ [eos]`, MIDI cut to whole triples
/// within 2048 tokens.
pub fn build_finetune_example(
    caption: &str,
    notes: &NoteSeq,
    cfg: &VocabConfig,
    tok: &dyn TextTokenizer,
) -> Result<TrainingExample, DatasetError> {
    if notes.is_empty() {
        return Err(DatasetError::EmptyMidi);
    }
    let body = codec::encode(notes, cfg)?.into_ids();
    Ok(prefixed_example(Some(caption), body, ExampleKind::Finetune, cfg, tok))
}

fn distinct_onsets(notes: &NoteSeq) -> usize {
    let mut count = 0;
    let mut last = None;
    for n in notes {
        if last != Some(n.onset) {
            count += 1;
            last = Some(n.onset);
        }
    }
    count
}

/// Two infilling variants of one piece, each with its own cut and gap.
///
/// Notes starting at or after `cut + gap` become anticipated conditioning;
/// the rest stay in the normal stream.
pub fn build_infill_examples<R: Rng + ?Sized>(
    caption: Option<&str>,
    notes: &NoteSeq,
    rng: &mut R,
    cfg: &VocabConfig,
    tok: &dyn TextTokenizer,
) -> Result<Vec<TrainingExample>, DatasetError> {
    let distinct = distinct_onsets(notes);
    if distinct < 3 {
        return Err(DatasetError::TooSparse(distinct));
    }
    let start = notes.notes()[0].onset;
    let end = notes.iter().map(Note::end).fold(start, f64::max);
    let span = end - start;

    let mut out = Vec::with_capacity(2);
    for _ in 0..2 {
        let cut = rng.random_range(start + CUT_RANGE.0 * span..=start + CUT_RANGE.1 * span);
        let gap = rng.random_range(GAP_RANGE.0..=GAP_RANGE.1).min(end - cut);
        let boundary = cut + gap;
        let (future, past): (Vec<Note>, Vec<Note>) = notes.iter().partition(|n| n.onset >= boundary);
        let past = NoteSeq::from_sorted(past).expect("subsequence stays sorted");
        let future = NoteSeq::from_sorted(future).expect("subsequence stays sorted");
        let body = codec::interleave_infill(&past, &future, DEFAULT_ANTICIPATION_SECONDS, cfg)?.into_ids();
        out.push(prefixed_example(caption, body, ExampleKind::Infill, cfg, tok));
    }
    Ok(out)
}

/// Concatenates `[separator] ++ doc ++ [eos]` for every doc and slices the
/// stream into `seqlen` chunks; the last partial chunk is dropped.
pub fn pack_pretrain(docs: &[TokenSequence], seqlen: usize, cfg: &VocabConfig) -> Vec<TrainingExample> {
    assert!(seqlen > 0, "seqlen must be positive");
    let total: usize = docs.iter().map(|d| d.len() + 2).sum();
    let mut stream = Vec::with_capacity(total);
    for doc in docs {
        stream.push(cfg.separator_id);
        stream.extend_from_slice(doc.ids());
        stream.push(cfg.eos_id);
    }
    stream
        .chunks_exact(seqlen)
        .map(|c| TrainingExample { ids: c.to_vec(), prefix_len: 0, kind: ExampleKind::Pretrain })
        .collect()
}

/// Reads, parses and extracts notes from one MIDI file.
pub fn load_notes(path: &Path) -> Result<NoteSeq, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })?;
    let midi = midi::parse_smf(&bytes).map_err(|source| DatasetError::Midi { path: path.to_owned(), source })?;
    Ok(midi::extract_notes(&midi))
}

#[cfg(feature = "parallel")]
fn map_ordered<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_ordered<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// One token document per non-empty 100 s segment of every pretraining
/// entry, in path order.
pub fn pretrain_docs(manifest: &Manifest, cfg: &VocabConfig) -> Result<Vec<TokenSequence>, DatasetError> {
    let entries = manifest.split(Split::Pretrain);
    let per_entry = map_ordered(&entries, |_, e| -> Result<Vec<TokenSequence>, DatasetError> {
        let notes = load_notes(Path::new(&e.midi_path))?;
        codec::segment(&notes, MAX_ONSET_SECONDS)
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| codec::encode(s, cfg).map_err(DatasetError::from))
            .collect()
    });
    let mut docs = Vec::new();
    for r in per_entry {
        docs.extend(r?);
    }
    Ok(docs)
}

/// Finetuning examples for one piece: per non-empty segment, the plain
/// example followed by its two infilling variants when the segment has
/// enough distinct onsets.
pub fn augment_piece<R: Rng + ?Sized>(
    caption: &str,
    notes: &NoteSeq,
    rng: &mut R,
    cfg: &VocabConfig,
    tok: &dyn TextTokenizer,
) -> Result<Vec<TrainingExample>, DatasetError> {
    let mut out = Vec::new();
    for seg in codec::segment(notes, MAX_ONSET_SECONDS).iter().filter(|s| !s.is_empty()) {
        out.push(build_finetune_example(caption, seg, cfg, tok)?);
        match build_infill_examples(Some(caption), seg, rng, cfg, tok) {
            Ok(v) => out.extend(v),
            Err(DatasetError::TooSparse(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Rng for the `index`-th finetuning entry; independent of processing order.
pub fn entry_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Augmented finetuning set for every finetune entry, in path order.
pub fn finetune_examples(
    manifest: &Manifest,
    seed: u64,
    cfg: &VocabConfig,
    tok: &dyn TextTokenizer,
) -> Result<Vec<TrainingExample>, DatasetError> {
    let entries = manifest.split(Split::Finetune);
    let per_entry = map_ordered(&entries, |i, e| {
        let notes = load_notes(Path::new(&e.midi_path))?;
        let caption = e.caption.as_deref().unwrap_or_default();
        augment_piece(caption, &notes, &mut entry_rng(seed, i), cfg, tok)
    });
    let mut out = Vec::new();
    for r in per_entry {
        out.extend(r?);
    }
    Ok(out)
}

/// Writes `<stem>.amtk` with all examples back to back and `<stem>.idx`
/// with one `offset length prefix_len kind` line per example.
pub fn write_examples(
    dir: &Path,
    stem: &str,
    examples: &[TrainingExample],
    cfg: &VocabConfig,
) -> Result<(PathBuf, PathBuf), DatasetError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let tok_path = dir.join(format!("{stem}.amtk"));
    let idx_path = dir.join(format!("{stem}.idx"));

    let ids: Vec<u32> = examples.iter().flat_map(|e| e.ids.iter().copied()).collect();
    let seq = TokenSequence::new(ids, *cfg)?;
    let mut buf = Vec::new();
    seq.write_to(&mut buf)?;
    fs::write(&tok_path, buf).map_err(io(&tok_path))?;

    let mut index = Vec::new();
    writeln!(index, "# offset\tlength\tprefix_len\tkind").expect("write to vec");
    let mut offset = 0;
    for e in examples {
        writeln!(index, "{offset}\t{}\t{}\t{}", e.ids.len(), e.prefix_len, e.kind.as_str()).expect("write to vec");
        offset += e.ids.len();
    }
    fs::write(&idx_path, index).map_err(io(&idx_path))?;
    Ok((tok_path, idx_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::validate_ids;

    fn cfg() -> VocabConfig {
        VocabConfig::default()
    }

    fn notes(n: usize, step: f64) -> NoteSeq {
        NoteSeq::new((0..n).map(|i| Note::new(i as f64 * step, 0.1, 0, 60 + (i % 12) as u8)).collect()).unwrap()
    }

    #[test]
    fn text_tokenization() {
        assert!(tokenize_text("", &ByteTokenizer, 256).is_empty());
        assert_eq!(tokenize_text("hé", &ByteTokenizer, 256), vec![104, 0xC3, 0xA9]);
        let long = "a".repeat(300);
        assert_eq!(tokenize_text(&long, &ByteTokenizer, 256).len(), 256);
    }

    #[test]
    fn finetune_layout() {
        let c = cfg();
        let ex = build_finetune_example("x", &notes(1, 1.0), &c, &ByteTokenizer).unwrap();
        assert_eq!(ex.ids.len(), 6);
        assert_eq!(ex.prefix_len, 1);
        assert_eq!(ex.ids[0], u32::from(b'x'));
        assert_eq!(ex.ids[1], c.separator_id);
        assert_eq!(*ex.ids.last().unwrap(), c.eos_id);
        assert_eq!(ex.midi_part().len(), 3);
        assert_eq!(ex.kind, ExampleKind::Finetune);
    }

    #[test]
    fn finetune_truncates_to_whole_triples() {
        let c = cfg();
        let ex = build_finetune_example("", &notes(700, 0.1), &c, &ByteTokenizer).unwrap();
        assert_eq!(ex.midi_part().len(), 2046);
        assert!(validate_ids(ex.midi_part(), &c).ok);
        assert!(matches!(
            build_finetune_example("x", &NoteSeq::empty(), &c, &ByteTokenizer),
            Err(DatasetError::EmptyMidi)
        ));
    }

    #[test]
    fn infill_requires_three_onsets() {
        let c = cfg();
        let two =
            NoteSeq::new(vec![Note::new(0.0, 1.0, 0, 60), Note::new(0.0, 1.0, 0, 64), Note::new(1.0, 1.0, 0, 60)])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_infill_examples(None, &two, &mut rng, &c, &ByteTokenizer),
            Err(DatasetError::TooSparse(2))
        ));
    }

    #[test]
    fn infill_is_seeded_and_valid() {
        let c = cfg();
        let piece = notes(200, 0.4);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            build_infill_examples(Some("calm piano"), &piece, &mut rng, &c, &ByteTokenizer).unwrap()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
        for ex in &a {
            assert_eq!(ex.kind, ExampleKind::Infill);
            assert_eq!(ex.prefix_len, 10);
            assert_eq!(ex.midi_part().len(), 600);
            assert!(validate_ids(ex.midi_part(), &c).ok);
            let anticipated =
                ex.midi_part().iter().filter(|&&id| c.event_of_global(id).is_some_and(|e| e.anticipated)).count();
            assert!(anticipated > 0);
        }
    }

    #[test]
    fn pack_examples() {
        let c = cfg();
        let doc = |n| TokenSequence::new(vec![c.text_vocab_size; n], c).unwrap();
        let packed = pack_pretrain(&[doc(3000), doc(1500)], 2048, &c);
        assert_eq!(packed.len(), 2);
        assert!(packed.iter().all(|e| e.ids.len() == 2048 && e.prefix_len == 0));
        assert_eq!(packed[0].ids[0], c.separator_id);

        let packed = pack_pretrain(&[doc(2046)], 2048, &c);
        assert_eq!(packed.len(), 1);
        assert_eq!(*packed[0].ids.last().unwrap(), c.eos_id);

        assert!(pack_pretrain(&[], 2048, &c).is_empty());
    }

    #[test]
    fn manifest_parsing() {
        let text = r#"{"midi_path": "a.mid", "split": "pretrain"}
{"midi_path": "b.mid", "caption": "jazz trio", "split": "finetune"}
"#;
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].caption.as_deref(), Some("jazz trio"));
        assert_eq!(Manifest::parse(&m.to_jsonl()).unwrap(), m);

        let dup = "{\"midi_path\":\"a\",\"split\":\"pretrain\"}\n{\"midi_path\":\"a\",\"split\":\"pretrain\"}";
        assert!(matches!(Manifest::parse(dup), Err(DatasetError::Manifest { line: 2, .. })));
        let uncaptioned = "{\"midi_path\":\"a\",\"split\":\"finetune\"}";
        assert!(Manifest::parse(uncaptioned).is_err());
        assert!(Manifest::parse("{\"midi_path\":\"a\",\"split\":\"other\"}").is_err());
    }

    #[test]
    fn entry_rngs_are_independent_streams() {
        let a: u64 = entry_rng(1, 0).random();
        let b: u64 = entry_rng(1, 1).random();
        let a2: u64 = entry_rng(1, 0).random();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }
}
