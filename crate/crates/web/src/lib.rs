//! Browser bindings for the demo page. Every export takes plain values and
//! returns a JSON string: either the result object or `{"error": "..."}`.

use std::sync::OnceLock;

use midillm_core::codec::{self, decode_ids, quantized_image};
use midillm_core::decoder::{
    generate, generated_midi, nucleus_support, softmax, train_ngram, GenerateOptions, LogitsProvider, NGramModel,
    UniformProvider,
};
use midillm_core::midi::{Note, NoteSeq, DEFAULT_DIVISION, DEFAULT_VELOCITY};
use midillm_core::vocab::{EventKind, LocalId};
use midillm_core::{write_smf, TokenSequence, VocabConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Byte-level text ids plus separator and EOS.
const DEMO_TEXT_VOCAB: u32 = 258;

fn demo_cfg() -> VocabConfig {
    VocabConfig::with_text_vocab(DEMO_TEXT_VOCAB).expect("valid demo vocab")
}

fn respond(result: Result<Value, String>) -> String {
    result.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

#[derive(Serialize)]
struct NoteView {
    onset: f64,
    duration: f64,
    instrument: u8,
    pitch: u8,
}

fn note_views(notes: &NoteSeq) -> Vec<NoteView> {
    notes
        .iter()
        .map(|n| NoteView { onset: n.onset, duration: n.duration, instrument: n.instrument, pitch: n.pitch })
        .collect()
}

fn label(id: u32, cfg: &VocabConfig) -> String {
    if id == cfg.eos_id {
        return "<eos>".into();
    }
    if id == cfg.separator_id {
        return "<sep>".into();
    }
    let Some(ev) = cfg.event_of_global(id) else {
        return match cfg.to_local(id) {
            Ok(LocalId::TextId(t)) if t < 128 => format!("text {:?}", char::from(t as u8)),
            _ => format!("text {id}"),
        };
    };
    let mark = if ev.anticipated { "*" } else { "" };
    match ev.kind {
        EventKind::Onset(b) => format!("{mark}onset {:.2}s", f64::from(b) / 100.0),
        EventKind::Duration(b) => format!("{mark}dur {}ms", u32::from(b) * 10),
        EventKind::InstrPitch { instrument: 128, pitch } => format!("{mark}drum {pitch}"),
        EventKind::InstrPitch { instrument, pitch } => format!("{mark}prog {instrument} pitch {pitch}"),
    }
}

fn token_views(ids: &[u32], cfg: &VocabConfig) -> Vec<Value> {
    ids.iter().map(|&id| json!({ "id": id, "label": label(id, cfg) })).collect()
}

pub fn tokenize_impl(note_text: &str) -> Result<Value, String> {
    let cfg = demo_cfg();
    let notes = NoteSeq::from_text(note_text).map_err(|e| e.to_string())?;
    let tokens = codec::encode(&notes, &cfg).map_err(|e| e.to_string())?;
    let image = quantized_image(&notes).map_err(|e| e.to_string())?;
    Ok(json!({
        "tokens": token_views(tokens.ids(), &cfg),
        "notes": note_views(&image),
        "valid": codec::validate(&tokens).ok,
    }))
}

pub fn nucleus_impl(scores_json: &str, temperature: f64, top_p: f64) -> Result<Value, String> {
    let scores: Vec<f32> = serde_json::from_str(scores_json).map_err(|e| format!("scores: {e}"))?;
    if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
        return Err("scores must be a non-empty list of finite numbers".into());
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err("temperature must be positive".into());
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err("top_p must be in (0, 1]".into());
    }
    let scaled: Vec<f32> = scores.iter().map(|&s| (f64::from(s) / temperature) as f32).collect();
    let probs = softmax(&scaled);
    let support = nucleus_support(&probs, top_p);
    let mass: f64 = support.iter().map(|&i| probs[i as usize]).sum();
    let kept: Vec<Value> = support
        .iter()
        .map(|&i| json!({ "id": i, "p": probs[i as usize], "renormalized": probs[i as usize] / mass }))
        .collect();
    Ok(json!({ "probs": probs, "support": kept, "mass": mass }))
}

/// Small corpus of arpeggios over a drum pattern, varied by key and tempo.
fn demo_corpus(cfg: &VocabConfig) -> Vec<TokenSequence> {
    let progressions: [[u8; 4]; 3] = [[0, 5, 7, 0], [0, 9, 5, 7], [0, 4, 9, 7]];
    let mut docs = Vec::new();
    for (k, prog) in progressions.iter().enumerate() {
        for (root, step) in [(48u8, 0.25), (53, 0.2), (55, 0.3)] {
            let mut notes = Vec::new();
            for (bar, &shift) in prog.iter().cycle().take(8).enumerate() {
                let start = bar as f64 * 8.0 * step;
                let chord = [0u8, 4 - (k as u8 % 2), 7, 12];
                for i in 0..8 {
                    let t = start + i as f64 * step;
                    notes.push(Note::new(t, step, 0, root + shift + chord[i % 4]));
                    if i % 2 == 0 {
                        notes.push(Note::new(t, step / 2.0, 128, if i % 4 == 0 { 36 } else { 38 }));
                    }
                }
                notes.push(Note::new(start, 8.0 * step, 32, root + shift - 12));
            }
            let seq = NoteSeq::new(notes).expect("finite notes");
            let mut ids = vec![cfg.separator_id];
            ids.extend(codec::encode(&seq, cfg).expect("demo notes encode").into_ids());
            ids.push(cfg.eos_id);
            docs.push(TokenSequence::new(ids, *cfg).expect("ids in vocab"));
        }
    }
    docs
}

fn demo_model() -> &'static NGramModel {
    static MODEL: OnceLock<NGramModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = demo_cfg();
        train_ngram(&demo_corpus(&cfg), 4).expect("non-empty corpus")
    })
}

pub fn generate_impl(model: &str, seed: u32, top_p: f64, max_new: usize, constrained: bool) -> Result<Value, String> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err("top_p must be in (0, 1]".into());
    }
    let uniform = UniformProvider { cfg: demo_cfg() };
    let provider: &dyn LogitsProvider = match model {
        "ngram" => demo_model(),
        "uniform" => &uniform,
        other => return Err(format!("unknown model {other:?}")),
    };
    let cfg = *provider.vocab();
    let prompt = [cfg.separator_id];
    let opts = GenerateOptions { top_p, max_new: max_new.min(4096), constrained };
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let out = generate(provider, &prompt, &opts, &mut rng).map_err(|e| e.to_string())?;
    let body = generated_midi(&out, prompt.len());
    let valid = codec::validate_ids(body, &cfg).ok;
    let decoded = decode_ids(body, &cfg, false).map_err(|e| e.to_string())?;
    let smf = write_smf(&decoded.notes, DEFAULT_VELOCITY, DEFAULT_DIVISION).map_err(|e| e.to_string())?;
    Ok(json!({
        "tokens": token_views(&out.ids()[prompt.len()..], &cfg),
        "valid": valid,
        "skipped": decoded.warnings.len(),
        "notes": note_views(&decoded.notes),
        "smf": smf.bytes,
    }))
}

/// Encodes `onset duration instrument pitch` lines into labelled tokens.
#[wasm_bindgen]
pub fn tokenize(note_text: &str) -> String {
    respond(tokenize_impl(note_text))
}

/// Temperature softmax of `scores_json` (a JSON number list) and its top-p support.
#[wasm_bindgen]
pub fn nucleus(scores_json: &str, temperature: f64, top_p: f64) -> String {
    respond(nucleus_impl(scores_json, temperature, top_p))
}

/// Samples a piece from the built-in `"ngram"` or `"uniform"` model.
#[wasm_bindgen(js_name = generatePiece)]
pub fn generate_piece(model: &str, seed: u32, top_p: f64, max_new: usize, constrained: bool) -> String {
    respond(generate_impl(model, seed, top_p, max_new, constrained))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_labels() {
        let v = tokenize_impl("10.2 0.12 0 60\n").unwrap();
        let labels: Vec<&str> = v["tokens"].as_array().unwrap().iter().map(|t| t["label"].as_str().unwrap()).collect();
        assert_eq!(labels, ["onset 10.20s", "dur 120ms", "prog 0 pitch 60"]);
        assert_eq!(v["tokens"][0]["id"], DEMO_TEXT_VOCAB + 1020);
        assert_eq!(v["valid"], true);
        assert!(tokenize_impl("1 2 3").is_err());
    }

    #[test]
    fn nucleus_support_and_mass() {
        let v = nucleus_impl("[2.0, 1.0, 0.0, -5.0]", 1.0, 0.95).unwrap();
        let ids: Vec<u64> = v["support"].as_array().unwrap().iter().map(|s| s["id"].as_u64().unwrap()).collect();
        assert_eq!(ids, [0, 1, 2]);
        let renorm: f64 = v["support"].as_array().unwrap().iter().map(|s| s["renormalized"].as_f64().unwrap()).sum();
        assert!((renorm - 1.0).abs() < 1e-12);
        let cold = nucleus_impl("[2.0, 1.0, 0.0, -5.0]", 0.1, 0.9).unwrap();
        assert_eq!(cold["support"].as_array().unwrap().len(), 1);
        assert!(nucleus_impl("[]", 1.0, 0.9).is_err());
        assert!(nucleus_impl("[1]", 0.0, 0.9).is_err());
    }

    #[test]
    fn generation_is_valid_and_seeded() {
        for model in ["ngram", "uniform"] {
            let a = generate_impl(model, 7, 0.98, 300, true).unwrap();
            assert_eq!(a["valid"], true, "{model}");
            assert_eq!(a, generate_impl(model, 7, 0.98, 300, true).unwrap());
            let smf: Vec<u8> = serde_json::from_value(a["smf"].clone()).unwrap();
            assert!(midillm_core::parse_smf(&smf).is_ok());
        }
        assert!(!generate_impl("ngram", 1, 0.98, 300, true).unwrap()["notes"].as_array().unwrap().is_empty());
        assert!(generate_impl("gpt", 1, 0.9, 10, true).is_err());
    }
}
