//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.
//!
//!     cargo test -p midillm-core --test acceptance

mod common;

use std::collections::HashMap;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    fixture_dir, fixture_names, mass_ranked_before, notes_match, random_grid_notes, random_notes, softmax_oracle,
    write_tick,
};
use midillm_core::bench::{run_bench, BenchReport};
use midillm_core::codec::{self, decode_ids, quantize, quantized_image, validate_ids, MAX_ONSET_SECONDS};
use midillm_core::dataset::{self, pack_pretrain, ByteTokenizer, ExampleKind, Manifest, ManifestEntry, Split};
use midillm_core::decoder::{
    generate, generated_midi, nucleus_sample, train_ngram, GenerateOptions, LogitsProvider, UniformProvider,
};
use midillm_core::midi::{self, Note, NoteSeq};
use midillm_core::vocab::{self, event_of, local_id_of, EmbeddingTable, MIDI_VOCAB_SIZE, NORMAL_BLOCK};
use midillm_core::{TokenSequence, VocabConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn vocab_constants() -> Outcome {
    check(NORMAL_BLOCK == 27_512, || format!("normal block {NORMAL_BLOCK}"))?;
    check(MIDI_VOCAB_SIZE == 55_024, || format!("midi vocab {MIDI_VOCAB_SIZE}"))?;
    for id in 0..MIDI_VOCAB_SIZE {
        let ev = event_of(id).map_err(|e| format!("id {id}: {e}"))?;
        check(local_id_of(ev) == id, || format!("id {id} maps back to {}", local_id_of(ev)))?;
    }
    check(event_of(MIDI_VOCAB_SIZE).is_err(), || "id 55024 accepted".into())?;
    Ok(format!("{MIDI_VOCAB_SIZE} ids bijective"))
}

fn worked_example() -> Outcome {
    let q = quantize(&Note::new(10.2, 0.12, 0, 60)).map_err(|e| e.to_string())?;
    let local = q.events().map(local_id_of);
    check(local == [1020, 10012, 11060], || format!("local ids {local:?}"))?;
    let cfg = VocabConfig::default();
    check(cfg.text_vocab_size == 128_256, || "default text vocab".into())?;
    let global = q.events().map(|e| cfg.global_id_of(e));
    check(global == [129_276, 138_268, 139_316], || format!("global ids {global:?}"))?;
    Ok(format!("local {local:?} global {global:?}"))
}

fn round_trip() -> Outcome {
    let cfg = VocabConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for i in 0..1000 {
        let notes = random_notes(&mut rng, 500);
        let toks = codec::encode(&notes, &cfg).map_err(|e| format!("seq {i}: {e}"))?;
        let back = codec::decode(&toks, true).map_err(|e| format!("seq {i}: {e}"))?.notes;
        check(back == quantized_image(&notes).unwrap(), || format!("seq {i} differs after decode"))?;
    }
    let names = fixture_names();
    check(names.len() >= 5, || format!("only {} fixtures", names.len()))?;
    let mut fixture_notes = 0;
    for name in &names {
        let bytes = fs::read(fixture_dir().join(format!("{name}.mid"))).map_err(|e| e.to_string())?;
        let notes = midi::extract_notes(&midi::parse_smf(&bytes).map_err(|e| format!("{name}: {e}"))?);
        fixture_notes += notes.len();
        for seg in codec::segment(&notes, MAX_ONSET_SECONDS) {
            let toks = codec::encode(&seg, &cfg).map_err(|e| format!("{name}: {e}"))?;
            let back = codec::decode(&toks, true).map_err(|e| format!("{name}: {e}"))?.notes;
            check(back == quantized_image(&seg).unwrap(), || format!("{name}: segment differs"))?;
        }
        let out = midi::write_smf(&notes, 96, 480).map_err(|e| e.to_string())?;
        let again = midi::extract_notes(&midi::parse_smf(&out.bytes).map_err(|e| e.to_string())?);
        notes_match(&notes, &again, write_tick(480) + 1e-9).map_err(|e| format!("{name} smf: {e}"))?;
    }
    for i in 0..200 {
        let notes = random_grid_notes(&mut rng, 300, 480);
        let out = midi::write_smf(&notes, 96, 480).map_err(|e| e.to_string())?;
        let again = midi::extract_notes(&midi::parse_smf(&out.bytes).map_err(|e| e.to_string())?);
        notes_match(&notes, &again, write_tick(480) + 1e-9).map_err(|e| format!("grid {i} smf: {e}"))?;
    }
    Ok(format!("1000 random seqs, {} fixtures ({fixture_notes} notes), SMF within 1 tick", names.len()))
}

fn embedding_expansion() -> Outcome {
    for (dim, seed) in [(8, 1), (64, 2)] {
        let llm = EmbeddingTable::random_normal(128_256, dim, 1.0, seed);
        let amt = vocab::init_midi_embeddings(dim, seed + 100);
        let out = vocab::expand_embeddings(&llm, &amt).map_err(|e| e.to_string())?;
        check(out.rows() == 128_256 + 55_024 && out.dim() == dim, || format!("shape {}x{}", out.rows(), out.dim()))?;
        let head = &out.data()[..llm.data().len()];
        let same = head.iter().zip(llm.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, || format!("D={dim}: text rows changed"))?;
        let tail = &out.data()[llm.data().len()..];
        check(tail.iter().zip(amt.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("D={dim}: midi rows changed")
        })?;
    }
    Ok("D in {8, 64}, 183280 rows, text rows bit-identical".into())
}

fn random_scores<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    // mix of peaked, flat and tied distributions
    match rng.random_range(0..3) {
        0 => (0..n).map(|_| rng.random_range(-8.0f32..8.0)).collect(),
        1 => (0..n).map(|_| rng.random_range(0..4) as f32).collect(),
        _ => (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    }
}

fn nucleus() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ps = [0.5, 0.9, 0.98, 1.0];
    let mut samples = 0;
    for i in 0..10_000 {
        let n = rng.random_range(2..=1000);
        let scores = random_scores(&mut rng, n);
        let probs = softmax_oracle(&scores);
        for &p in &ps {
            let id = nucleus_sample(&scores, p, &mut rng) as usize;
            let before = mass_ranked_before(&probs, id);
            check(before < p + 1e-9, || format!("dist {i} p={p}: id {id} has {before} ranked before"))?;
            samples += 1;
        }
    }

    let draws = 100_000;
    let mut worst = 1.0f64;
    for d in 0..10 {
        let n = 5 + 3 * d;
        let scores: Vec<f32> = (0..n).map(|k| -0.15 * k as f32 * (1.0 + d as f32 / 10.0)).collect();
        let p = ps[d % ps.len()];
        let probs = softmax_oracle(&scores);
        let support: Vec<usize> = (0..n).filter(|&k| mass_ranked_before(&probs, k) < p).collect();
        let z: f64 = support.iter().map(|&k| probs[k]).sum();
        let mut counts: HashMap<usize, u64> = HashMap::new();
        let mut draw_rng = ChaCha8Rng::seed_from_u64(1000 + d as u64);
        for _ in 0..draws {
            *counts.entry(nucleus_sample(&scores, p, &mut draw_rng) as usize).or_default() += 1;
        }
        check(counts.keys().all(|k| support.contains(k)), || format!("fixed dist {d}: outside support"))?;
        let stat: f64 = support
            .iter()
            .map(|&k| {
                let expected = draws as f64 * probs[k] / z;
                let observed = counts.get(&k).copied().unwrap_or(0) as f64;
                (observed - expected).powi(2) / expected
            })
            .sum();
        if support.len() > 1 {
            let chi = ChiSquared::new((support.len() - 1) as f64).unwrap();
            let pval = 1.0 - chi.cdf(stat);
            worst = worst.min(pval);
            check(pval > 0.001, || format!("fixed dist {d}: chi2 {stat:.2}, p-value {pval:.2e}"))?;
        }
    }
    Ok(format!("{samples} samples in support, min chi2 p-value {worst:.3}"))
}

fn fixture_corpus(cfg: &VocabConfig) -> Vec<TokenSequence> {
    let mut docs = Vec::new();
    for name in fixture_names() {
        let bytes = fs::read(fixture_dir().join(format!("{name}.mid"))).unwrap();
        let notes = midi::extract_notes(&midi::parse_smf(&bytes).unwrap());
        for seg in codec::segment(&notes, MAX_ONSET_SECONDS) {
            if !seg.is_empty() {
                docs.push(codec::encode(&seg, cfg).unwrap());
            }
        }
    }
    docs
}

fn sound_runs<P: LogitsProvider>(provider: &P, label: &str, seed: u64) -> Result<usize, String> {
    let cfg = *provider.vocab();
    let prompt = [cfg.separator_id];
    let opts = GenerateOptions::default();
    let mut total_notes = 0;
    for run in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run);
        let out = generate(provider, &prompt, &opts, &mut rng).map_err(|e| format!("{label} {run}: {e}"))?;
        let body = generated_midi(&out, prompt.len());
        let report = validate_ids(body, &cfg);
        check(report.ok, || format!("{label} {run}: {:?}", report.violations.first()))?;
        let notes = decode_ids(body, &cfg, true).map_err(|e| format!("{label} {run}: {e}"))?.notes;
        let smf = midi::write_smf(&notes, 96, 480).map_err(|e| format!("{label} {run}: {e}"))?;
        let parsed = midi::parse_smf(&smf.bytes).map_err(|e| format!("{label} {run}: {e}"))?;
        if smf.warnings.is_empty() {
            let n = midi::extract_notes(&parsed).len();
            check(n == notes.len(), || format!("{label} {run}: {n} notes after SMF, {} before", notes.len()))?;
        }
        total_notes += notes.len();
    }
    Ok(total_notes)
}

fn constrained_generation() -> Outcome {
    let cfg = VocabConfig::default();
    let uniform = sound_runs(&UniformProvider { cfg }, "uniform", 11)?;
    let model = train_ngram(&fixture_corpus(&cfg), 3).map_err(|e| e.to_string())?;
    let ngram = sound_runs(&model, "ngram", 12)?;
    Ok(format!("200 runs valid ({uniform} + {ngram} notes)"))
}

fn tripling() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = VocabConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut entries = Vec::new();
    let mut plain_tokens = 0;
    for i in 0..24 {
        // under 100 s, at most 600 notes, many distinct onsets
        let notes: Vec<Note> = (0..rng.random_range(20..600))
            .map(|k| Note::new(k as f64 * 0.15, 0.3, rng.random_range(0..8), rng.random_range(30..90)))
            .collect();
        let notes = NoteSeq::new(notes).unwrap();
        let smf = midi::write_smf(&notes, 96, 480).map_err(|e| e.to_string())?;
        let path = format!("piece{i:02}.mid");
        fs::write(dir.path().join(&path), &smf.bytes).map_err(|e| e.to_string())?;
        let reread = dataset::load_notes(&dir.path().join(&path)).map_err(|e| e.to_string())?;
        plain_tokens += codec::encode(&reread, &cfg).unwrap().len();
        entries.push(ManifestEntry { midi_path: path, caption: Some(format!("piece {i}")), split: Split::Finetune });
    }
    let manifest_path = dir.path().join("manifest.jsonl");
    fs::write(&manifest_path, Manifest { entries }.to_jsonl()).map_err(|e| e.to_string())?;
    let manifest = Manifest::load(&manifest_path).map_err(|e| e.to_string())?;
    let examples = dataset::finetune_examples(&manifest, 3, &cfg, &ByteTokenizer).map_err(|e| e.to_string())?;
    let infill = examples.iter().filter(|e| e.kind == ExampleKind::Infill).count();
    check(infill == 48, || format!("{infill} infill examples for 24 pieces"))?;
    let augmented: usize = examples.iter().map(|e| e.midi_part().len()).sum();
    check(augmented == 3 * plain_tokens, || format!("{augmented} augmented vs {plain_tokens} plain tokens"))?;
    Ok(format!("{augmented} = 3 x {plain_tokens} MIDI tokens"))
}

fn packing_law() -> Outcome {
    let cfg = VocabConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..500 {
        let lengths: Vec<usize> = (0..rng.random_range(0..60)).map(|_| rng.random_range(0..5000)).collect();
        let docs: Vec<TokenSequence> =
            lengths.iter().map(|&n| TokenSequence::new(vec![cfg.text_vocab_size; n], cfg).unwrap()).collect();
        let total: usize = lengths.iter().map(|n| n + 2).sum();
        let packed = pack_pretrain(&docs, 2048, &cfg);
        check(packed.len() == total / 2048, || format!("case {case}: {} examples for {total} ids", packed.len()))?;
        check(packed.iter().all(|e| e.ids.len() == 2048), || format!("case {case}: wrong length"))?;
    }
    Ok("500 fuzzed corpora".into())
}

fn bench_metric() -> Outcome {
    let provider = UniformProvider { cfg: VocabConfig::default() };
    let opts = GenerateOptions { max_new: 150, ..GenerateOptions::default() };
    let report = run_bench(&provider, &[], &opts, 4, 2, 5).map_err(|e| e.to_string())?;
    let printed = report.to_key_value();
    let fields: HashMap<&str, f64> =
        printed.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k, v.parse().unwrap())).collect();
    let rtf = fields["output_music_s"] / fields["wall_clock_s"];
    check(rtf == fields["rtf"], || format!("printed rtf {} vs {rtf}", fields["rtf"]))?;
    let synthetic = BenchReport::new(0.3, 7.1, 10, 1, 1);
    check(synthetic.rtf == 7.1 / 0.3, || "synthetic report".into())?;
    Ok(format!("rtf={} matches", fields["rtf"]))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("vocabulary constants and bijection", Duration::from_secs(1), vocab_constants),
        ("worked example token ids", Duration::MAX, worked_example),
        ("encode/decode and SMF round trip", Duration::from_secs(30), round_trip),
        ("embedding expansion", Duration::MAX, embedding_expansion),
        ("nucleus sampling", Duration::from_secs(60), nucleus),
        ("constrained generation soundness", Duration::from_secs(60), constrained_generation),
        ("augmentation tripling", Duration::MAX, tripling),
        ("pretraining packing law", Duration::MAX, packing_law),
        ("bench real-time factor", Duration::MAX, bench_metric),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (tag, detail) = match outcome {
            Ok(d) if elapsed <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; took {elapsed:.2?}, budget {budget:.0?}")),
            Err(e) => ("FAIL", e),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("[{tag}] {name} ({:.2}s): {detail}", elapsed.as_secs_f64());
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
