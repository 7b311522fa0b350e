//! Generation throughput in real-time-factor terms: seconds of music
//! produced per second of wall clock.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::decode_ids;
use crate::decoder::{generate, generated_midi, DecoderError, GenerateOptions, LogitsProvider};
use crate::midi::NoteSeq;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchReport {
    pub wall_clock_s: f64,
    pub output_music_s: f64,
    pub rtf: f64,
    pub tokens_per_s: f64,
    pub batch_size: usize,
    pub runs: usize,
    pub generated_tokens: usize,
}

impl BenchReport {
    /// Derives the rates from the measured totals.
    pub fn new(
        wall_clock_s: f64,
        output_music_s: f64,
        generated_tokens: usize,
        batch_size: usize,
        runs: usize,
    ) -> Self {
        let wall_clock_s = wall_clock_s.max(1e-9);
        Self {
            wall_clock_s,
            output_music_s,
            rtf: output_music_s / wall_clock_s,
            tokens_per_s: generated_tokens as f64 / wall_clock_s,
            batch_size,
            runs,
            generated_tokens,
        }
    }

    /// One `key=value` per line. Floats use the shortest representation that
    /// parses back to the same value, so `rtf` can be rechecked from the
    /// printed fields exactly.
    pub fn to_key_value(&self) -> String {
        format!(
            "wall_clock_s={}\noutput_music_s={}\nrtf={}\ntokens_per_s={}\nbatch_size={}\nruns={}\ngenerated_tokens={}\n",
            self.wall_clock_s,
            self.output_music_s,
            self.rtf,
            self.tokens_per_s,
            self.batch_size,
            self.runs,
            self.generated_tokens
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Length of a generated piece: end of its last note in sequence order.
pub fn music_duration(notes: &NoteSeq) -> f64 {
    notes.notes().last().map_or(0.0, |n| n.onset + n.duration)
}

/// Runs `runs` rounds of `batch` generations and times each round.
///
/// Sequence `j` of round `r` uses rng stream `r * batch + j` of `seed`, so
/// the generated tokens do not depend on scheduling.
pub fn run_bench<P: LogitsProvider + ?Sized>(
    provider: &P,
    prompt: &[u32],
    opts: &GenerateOptions,
    batch: usize,
    runs: usize,
    seed: u64,
) -> Result<BenchReport, DecoderError> {
    let cfg = *provider.vocab();
    let mut wall = 0.0;
    let mut music = 0.0;
    let mut tokens = 0;
    for r in 0..runs {
        let start = Instant::now();
        let outputs = generate_batch(provider, prompt, opts, batch, |j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((r * batch + j) as u64);
            rng
        })?;
        wall += start.elapsed().as_secs_f64();
        for out in &outputs {
            tokens += out.len() - prompt.len();
            let midi = generated_midi(out, prompt.len());
            let notes = decode_ids(midi, &cfg, false).expect("lenient decode").notes;
            music += music_duration(&notes);
        }
    }
    Ok(BenchReport::new(wall, music, tokens, batch, runs))
}

#[cfg(feature = "parallel")]
fn generate_batch<P, F>(
    provider: &P,
    prompt: &[u32],
    opts: &GenerateOptions,
    batch: usize,
    rng_for: F,
) -> Result<Vec<crate::codec::TokenSequence>, DecoderError>
where
    P: LogitsProvider + ?Sized,
    F: Fn(usize) -> ChaCha8Rng + Sync,
{
    use rayon::prelude::*;
    (0..batch).into_par_iter().map(|j| generate(provider, prompt, opts, &mut rng_for(j))).collect()
}

#[cfg(not(feature = "parallel"))]
fn generate_batch<P, F>(
    provider: &P,
    prompt: &[u32],
    opts: &GenerateOptions,
    batch: usize,
    rng_for: F,
) -> Result<Vec<crate::codec::TokenSequence>, DecoderError>
where
    P: LogitsProvider + ?Sized,
    F: Fn(usize) -> ChaCha8Rng + Sync,
{
    (0..batch).map(|j| generate(provider, prompt, opts, &mut rng_for(j))).collect()
}
