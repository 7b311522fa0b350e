//! Autoregressive generation over the joint vocabulary: top-p sampling, a
//! triple grammar that keeps MIDI output decodable, and a back-off n-gram
//! model usable as a small stand-in for a trained network.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::codec::TokenSequence;
use crate::vocab::{Event, EventKind, TokenClass, VocabConfig, MIDI_VOCAB_SIZE};

pub const DEFAULT_TOP_P: f64 = 0.98;
pub const DEFAULT_MAX_NEW: usize = 2048;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("grammar mask left no token to sample at step {0}")]
    DeadEnd(usize),
    #[error("provider returned {got} scores, expected {expected}")]
    ProviderShape { expected: usize, got: usize },
    #[error("provider returned a non-finite score for id {0}")]
    NonFinite(u32),
    #[error("token {id} not allowed while expecting {expected:?}")]
    Rejected { id: u32, expected: Expect },
    #[error("prompt token {0} is outside the vocabulary")]
    InvalidPrompt(u32),
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("n-gram training corpus is empty")]
    EmptyCorpus,
    #[error("corpus sequences use different vocab layouts")]
    MixedVocab,
    #[error("bad n-gram model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source of next-token scores (unnormalized log-probabilities) over the
/// whole joint vocabulary.
pub trait LogitsProvider: Sync {
    fn vocab(&self) -> &VocabConfig;
    fn scores(&self, context: &[u32]) -> Vec<f32>;
}

/// Equal scores for every id.
#[derive(Debug, Clone, Copy)]
pub struct UniformProvider {
    pub cfg: VocabConfig,
}

impl LogitsProvider for UniformProvider {
    fn vocab(&self) -> &VocabConfig {
        &self.cfg
    }

    fn scores(&self, _context: &[u32]) -> Vec<f32> {
        vec![0.0; self.cfg.total_size() as usize]
    }
}

/// Softmax in f64 with the usual max shift.
pub fn softmax(scores: &[f32]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return vec![0.0; scores.len()];
    }
    let w: Vec<f64> = scores.iter().map(|&s| f64::from(s - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Sorts `(id, weight)` by weight descending, then id ascending, and cuts to
/// the smallest prefix holding `top_p` of the total weight. Zero weights
/// never survive. Returns the kept mass.
fn truncate_nucleus(cands: &mut Vec<(u32, f64)>, top_p: f64) -> f64 {
    cands.retain(|c| c.1 > 0.0);
    cands.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: f64 = cands.iter().map(|c| c.1).sum();
    let target = top_p * total;
    let mut cum = 0.0;
    let mut keep = cands.len();
    for (k, c) in cands.iter().enumerate() {
        cum += c.1;
        if cum >= target {
            keep = k + 1;
            break;
        }
    }
    cands.truncate(keep);
    cands.iter().map(|c| c.1).sum()
}

/// Ids of the nucleus of a probability vector, most probable first.
pub fn nucleus_support(probs: &[f64], top_p: f64) -> Vec<u32> {
    let mut cands: Vec<(u32, f64)> = probs.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect();
    truncate_nucleus(&mut cands, top_p);
    cands.into_iter().map(|c| c.0).collect()
}

fn sample_scored<R: Rng + ?Sized>(scored: &[(u32, f32)], top_p: f64, rng: &mut R) -> Option<u32> {
    let max = scored.iter().map(|c| c.1).fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return None;
    }
    let mut cands: Vec<(u32, f64)> = scored.iter().map(|&(id, s)| (id, f64::from(s - max).exp())).collect();
    let kept = truncate_nucleus(&mut cands, top_p);
    let mut u = rng.random::<f64>() * kept;
    for &(id, w) in &cands {
        if u < w {
            return Some(id);
        }
        u -= w;
    }
    cands.last().map(|c| c.0)
}

/// Top-p sampling over a full score vector.
///
/// # Panics
/// If `top_p` is outside `(0, 1]` or every score is `-inf`.
pub fn nucleus_sample<R: Rng + ?Sized>(scores: &[f32], top_p: f64, rng: &mut R) -> u32 {
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must be in (0, 1]");
    let scored: Vec<(u32, f32)> = scores.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect();
    sample_scored(&scored, top_p, rng).expect("at least one finite score")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Onset,
    Duration,
    InstrPitch,
    /// Unconstrained: every id is allowed.
    Any,
}

/// Position inside the onset/duration/instrument-pitch cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    pub expects: Expect,
    pub last_onset_bin: u16,
    pub emitted: usize,
}

impl Default for GrammarState {
    fn default() -> Self {
        Self::new()
    }
}

impl GrammarState {
    pub fn new() -> Self {
        Self { expects: Expect::Onset, last_onset_bin: 0, emitted: 0 }
    }

    pub fn unconstrained() -> Self {
        Self { expects: Expect::Any, last_onset_bin: 0, emitted: 0 }
    }

    pub fn at_triple_boundary(&self) -> bool {
        matches!(self.expects, Expect::Onset | Expect::Any)
    }

    /// Advances on an accepted normal-flavor MIDI token or EOS.
    pub fn accept(&mut self, id: u32, cfg: &VocabConfig) -> Result<(), DecoderError> {
        let rejected = || DecoderError::Rejected { id, expected: self.expects };
        match self.expects {
            Expect::Any => {}
            Expect::Onset if id == cfg.eos_id => {}
            expect => {
                let event = cfg.event_of_global(id).filter(|e| !e.anticipated).ok_or_else(rejected)?;
                self.expects = match (expect, event.kind) {
                    (Expect::Onset, EventKind::Onset(bin)) if bin >= self.last_onset_bin => {
                        self.last_onset_bin = bin;
                        Expect::Duration
                    }
                    (Expect::Duration, EventKind::Duration(_)) => Expect::InstrPitch,
                    (Expect::InstrPitch, EventKind::InstrPitch { .. }) => Expect::Onset,
                    _ => return Err(rejected()),
                };
            }
        }
        self.emitted += 1;
        Ok(())
    }
}

/// A set of allowed ids stored as disjoint ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    ranges: Vec<Range<u32>>,
}

impl TokenMask {
    pub fn single(id: u32) -> Self {
        Self { ranges: std::iter::once(id..id + 1).collect() }
    }

    pub fn ranges(&self) -> &[Range<u32>] {
        &self.ranges
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ranges.iter().any(|r| r.contains(&id))
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }
}

/// Ids the grammar permits next. EOS is offered only at triple boundaries.
pub fn grammar_mask(state: &GrammarState, cfg: &VocabConfig) -> TokenMask {
    let ranges = match state.expects {
        Expect::Any => std::iter::once(0..cfg.total_size()).collect(),
        Expect::Onset => {
            let onsets = cfg.class_range(TokenClass::Onset, false);
            let first = cfg.global_id_of(Event::onset(state.last_onset_bin));
            let mut r = vec![cfg.eos_id..cfg.eos_id + 1, first..onsets.end];
            r.sort_by_key(|r| r.start);
            r
        }
        Expect::Duration => vec![cfg.class_range(TokenClass::Duration, false)],
        Expect::InstrPitch => vec![cfg.class_range(TokenClass::InstrPitch, false)],
    };
    TokenMask { ranges }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub top_p: f64,
    pub max_new: usize,
    pub constrained: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { top_p: DEFAULT_TOP_P, max_new: DEFAULT_MAX_NEW, constrained: true }
    }
}

/// Samples up to `max_new` tokens after `prompt`, stopping at EOS.
///
/// When constrained, masked ids get zero probability before top-p
/// truncation and a triple is never started unless it fits in the
/// remaining budget; EOS is forced when it does not. The grammar picks up
/// from any MIDI tokens that end the prompt.
pub fn generate<P: LogitsProvider + ?Sized, R: Rng + ?Sized>(
    provider: &P,
    prompt: &[u32],
    opts: &GenerateOptions,
    rng: &mut R,
) -> Result<TokenSequence, DecoderError> {
    assert!(opts.top_p > 0.0 && opts.top_p <= 1.0, "top_p must be in (0, 1]");
    let cfg = *provider.vocab();
    let total = cfg.total_size() as usize;
    if let Some(&bad) = prompt.iter().find(|&&id| id >= cfg.total_size()) {
        return Err(DecoderError::InvalidPrompt(bad));
    }

    let mut state = if opts.constrained { GrammarState::new() } else { GrammarState::unconstrained() };
    if opts.constrained {
        let midi_start = prompt.iter().rposition(|&id| !cfg.is_midi(id)).map_or(0, |i| i + 1);
        for &id in &prompt[midi_start..] {
            state.accept(id, &cfg)?;
        }
    }

    let mut ids = prompt.to_vec();
    for step in 0..opts.max_new {
        let scores = provider.scores(&ids);
        if scores.len() != total {
            return Err(DecoderError::ProviderShape { expected: total, got: scores.len() });
        }
        let id = if opts.constrained {
            let mask = if state.expects == Expect::Onset && opts.max_new - step < 3 {
                TokenMask::single(cfg.eos_id)
            } else {
                grammar_mask(&state, &cfg)
            };
            let scored: Vec<(u32, f32)> = mask.iter().map(|id| (id, scores[id as usize])).collect();
            if let Some(&(id, _)) = scored.iter().find(|c| c.1.is_nan() || c.1 == f32::INFINITY) {
                return Err(DecoderError::NonFinite(id));
            }
            let id = sample_scored(&scored, opts.top_p, rng).ok_or(DecoderError::DeadEnd(step))?;
            let before = state.last_onset_bin;
            state.accept(id, &cfg)?;
            assert!(state.last_onset_bin >= before, "onset regressed under the mask");
            id
        } else {
            if let Some(i) = scores.iter().position(|s| s.is_nan() || *s == f32::INFINITY) {
                return Err(DecoderError::NonFinite(i as u32));
            }
            nucleus_sample(&scores, opts.top_p, rng)
        };
        ids.push(id);
        if id == cfg.eos_id {
            break;
        }
    }
    Ok(TokenSequence::new(ids, cfg).expect("sampled ids are in the vocabulary"))
}

/// The tokens generated after a prompt of `prompt_len`, without the EOS.
pub fn generated_midi(tokens: &TokenSequence, prompt_len: usize) -> &[u32] {
    let new = &tokens.ids()[prompt_len.min(tokens.len())..];
    match new.last() {
        Some(&id) if id == tokens.cfg().eos_id => &new[..new.len() - 1],
        _ => new,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Back-off n-gram model with add-one smoothing over the joint vocabulary.
///
/// `tables[k]` holds counts for contexts of length `k`, so the unigram table
/// is `tables[0]` keyed by the empty context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramModel {
    order: usize,
    cfg: VocabConfig,
    tables: Vec<HashMap<Vec<u32>, ContextCounts>>,
}

/// Counts every context of length `0..n` within each sequence.
pub fn train_ngram(corpus: &[TokenSequence], n: usize) -> Result<NGramModel, DecoderError> {
    if n == 0 {
        return Err(DecoderError::InvalidOrder);
    }
    let cfg = *corpus.first().ok_or(DecoderError::EmptyCorpus)?.cfg();
    if corpus.iter().any(|s| *s.cfg() != cfg) {
        return Err(DecoderError::MixedVocab);
    }
    let mut model = NGramModel { order: n, cfg, tables: vec![HashMap::new(); n] };
    for seq in corpus {
        let ids = seq.ids();
        for i in 0..ids.len() {
            for k in 0..n.min(i + 1) {
                model.add(&ids[i - k..i], ids[i], 1);
            }
        }
    }
    Ok(model)
}

impl NGramModel {
    fn add(&mut self, context: &[u32], next: u32, count: u64) {
        let entry = self.tables[context.len()].entry(context.to_vec()).or_default();
        entry.total += count;
        *entry.next.entry(next).or_default() += count;
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn count(&self, context: &[u32], next: u32) -> u64 {
        self.tables
            .get(context.len())
            .and_then(|t| t.get(context))
            .and_then(|c| c.next.get(&next))
            .copied()
            .unwrap_or(0)
    }

    /// Longest seen suffix of `context`, at most `order - 1` long.
    fn lookup(&self, context: &[u32]) -> Option<&ContextCounts> {
        let longest = context.len().min(self.order - 1);
        (0..=longest).rev().find_map(|k| self.tables[k].get(&context[context.len() - k..]))
    }

    /// Smoothed probability of `next` after `context`.
    pub fn prob(&self, context: &[u32], next: u32) -> f64 {
        let v = f64::from(self.cfg.total_size());
        match self.lookup(context) {
            Some(c) => (c.next.get(&next).copied().unwrap_or(0) as f64 + 1.0) / (c.total as f64 + v),
            None => 1.0 / v,
        }
    }

    /// Writes the `NGRM` file: magic, u32 order, u32 text vocab size, u32
    /// MIDI vocab size, u64 record count, then records sorted by (context
    /// length, context, next): u32 context length, the context ids, u32 next,
    /// u64 count. All little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DecoderError> {
        let mut records: Vec<(&[u32], u32, u64)> = Vec::new();
        for table in &self.tables {
            for (ctx, counts) in table {
                for (&next, &count) in &counts.next {
                    records.push((ctx, next, count));
                }
            }
        }
        records.sort_by(|a, b| (a.0.len(), a.0, a.1).cmp(&(b.0.len(), b.0, b.1)));

        let mut buf = Vec::new();
        buf.extend_from_slice(b"NGRM");
        buf.extend_from_slice(&(self.order as u32).to_le_bytes());
        buf.extend_from_slice(&self.cfg.text_vocab_size.to_le_bytes());
        buf.extend_from_slice(&MIDI_VOCAB_SIZE.to_le_bytes());
        buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (ctx, next, count) in records {
            buf.extend_from_slice(&(ctx.len() as u32).to_le_bytes());
            for id in ctx {
                buf.extend_from_slice(&id.to_le_bytes());
            }
            buf.extend_from_slice(&next.to_le_bytes());
            buf.extend_from_slice(&count.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DecoderError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut rd = LeReader { bytes: &bytes, pos: 0 };
        if rd.take(4)? != b"NGRM" {
            return Err(DecoderError::Format("bad magic".into()));
        }
        let order = rd.u32()? as usize;
        let text_vocab_size = rd.u32()?;
        let midi = rd.u32()?;
        if order == 0 {
            return Err(DecoderError::InvalidOrder);
        }
        if midi != MIDI_VOCAB_SIZE {
            return Err(DecoderError::Format(format!("MIDI vocab size {midi}")));
        }
        let cfg = VocabConfig::with_text_vocab(text_vocab_size).map_err(|e| DecoderError::Format(e.to_string()))?;
        let records = rd.u64()?;
        let mut model = NGramModel { order, cfg, tables: vec![HashMap::new(); order] };
        for _ in 0..records {
            let len = rd.u32()? as usize;
            if len >= order {
                return Err(DecoderError::Format(format!("context length {len} for order {order}")));
            }
            let ctx = (0..len).map(|_| rd.u32()).collect::<Result<Vec<_>, _>>()?;
            let next = rd.u32()?;
            let count = rd.u64()?;
            if next >= cfg.total_size() || ctx.iter().any(|&id| id >= cfg.total_size()) {
                return Err(DecoderError::Format("token id outside vocabulary".into()));
            }
            model.add(&ctx, next, count);
        }
        Ok(model)
    }
}

struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl LeReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DecoderError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| DecoderError::Format("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DecoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecoderError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl LogitsProvider for NGramModel {
    fn vocab(&self) -> &VocabConfig {
        &self.cfg
    }

    /// `ln(count + 1)` for the backed-off context; unseen ids score 0.
    fn scores(&self, context: &[u32]) -> Vec<f32> {
        let mut scores = vec![0.0f32; self.cfg.total_size() as usize];
        if let Some(c) = self.lookup(context) {
            for (&id, &count) in &c.next {
                scores[id as usize] = ((count + 1) as f64).ln() as f32;
            }
        }
        scores
    }
}
