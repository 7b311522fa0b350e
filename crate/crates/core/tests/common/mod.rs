//! Oracles and generators shared by the integration tests. Nothing here
//! calls into the code paths it is used to check.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use midillm_core::midi::{Note, NoteSeq};
use rand::Rng;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture_names() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(fixture_dir())
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.ends_with(".mid").then(|| name.trim_end_matches(".mid").to_string())
        })
        .collect();
    names.sort();
    names
}

/// Microseconds elapsed at `tick`, integrated one tick at a time with the
/// tempo in force during that tick.
pub fn brute_force_micros(division: u16, changes: &[(u64, u32)], tick: u64) -> f64 {
    let mut total = 0.0;
    for t in 0..tick {
        let mut tempo = 500_000u32;
        let mut best: Option<u64> = None;
        for &(ct, tp) in changes {
            // last change at or before t wins; later entries win ties
            if ct <= t && best.is_none_or(|b| ct >= b) {
                best = Some(ct);
                tempo = tp;
            }
        }
        total += f64::from(tempo) / f64::from(division);
    }
    total
}

/// Probability mass ranked strictly ahead of `id` (higher probability, or
/// equal probability and lower id). `id` belongs to the smallest
/// `top_p`-prefix iff this mass is below `top_p`.
pub fn mass_ranked_before(probs: &[f64], id: usize) -> f64 {
    let p = probs[id];
    probs.iter().enumerate().filter(|&(j, &q)| q > p || (q == p && j < id)).map(|(_, &q)| q).sum()
}

/// The smallest prefix by enumeration: tries every prefix length in rank
/// order and returns the first whose mass reaches `top_p`.
pub fn brute_force_nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    for k in 1..=order.len() {
        let mass: f64 = order[..k].iter().map(|&i| probs[i]).sum();
        if mass >= top_p {
            return order[..k].to_vec();
        }
    }
    order
}

pub fn softmax_oracle(scores: &[f32]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f32::MIN, f32::max) as f64;
    let w: Vec<f64> = scores.iter().map(|&s| (s as f64 - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

/// Random notes with onsets in `[0, 100)` s.
pub fn random_notes<R: Rng>(rng: &mut R, max_notes: usize) -> NoteSeq {
    let n = rng.random_range(0..=max_notes);
    let notes = (0..n)
        .map(|_| {
            let instrument = if rng.random_bool(0.1) { 128 } else { rng.random_range(0..128) };
            Note::new(rng.random_range(0.0..100.0), rng.random_range(0.001..12.0), instrument, rng.random_range(0..128))
        })
        .collect();
    NoteSeq::new(notes).unwrap()
}

/// Seconds per tick when writing at 120 BPM with the given division.
pub fn write_tick(division: u16) -> f64 {
    1.0 / (2.0 * f64::from(division))
}

/// Random notes on the write tick grid that survive FIFO pairing: at most
/// 15 melodic instruments and no overlapping notes of one instrument/pitch.
pub fn random_grid_notes<R: Rng>(rng: &mut R, max_notes: usize, division: u16) -> NoteSeq {
    let tick = write_tick(division);
    let instruments: Vec<u8> = {
        let mut set = HashSet::new();
        let k = rng.random_range(1..=15);
        while set.len() < k {
            set.insert(rng.random_range(0..128u8));
        }
        let mut v: Vec<u8> = set.into_iter().collect();
        v.push(128);
        v.sort();
        v
    };
    let mut busy: BTreeMap<(u8, u8), Vec<(u64, u64)>> = BTreeMap::new();
    let mut notes = Vec::new();
    let n = rng.random_range(0..=max_notes);
    for _ in 0..n {
        let instrument = instruments[rng.random_range(0..instruments.len())];
        let pitch = rng.random_range(0..128u8);
        let on = rng.random_range(0..100_000u64 * 2 * u64::from(division) / 1000);
        let off = on + rng.random_range(1..4 * u64::from(division));
        let spans = busy.entry((instrument, pitch)).or_default();
        if spans.iter().any(|&(a, b)| on < b && a < off) {
            continue;
        }
        spans.push((on, off));
        notes.push(Note::new(on as f64 * tick, (off - on) as f64 * tick, instrument, pitch));
    }
    NoteSeq::new(notes).unwrap()
}

/// Pairs notes of `a` and `b` per (instrument, pitch) in time order and
/// checks onset and end agree within `tol` seconds.
pub fn notes_match(a: &NoteSeq, b: &NoteSeq, tol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("note counts differ: {} vs {}", a.len(), b.len()));
    }
    let group = |s: &NoteSeq| {
        let mut m: BTreeMap<(u8, u8), Vec<(f64, f64)>> = BTreeMap::new();
        for n in s {
            m.entry((n.instrument, n.pitch)).or_default().push((n.onset, n.onset + n.duration));
        }
        for v in m.values_mut() {
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        }
        m
    };
    let (ga, gb) = (group(a), group(b));
    if ga.keys().ne(gb.keys()) {
        return Err("instrument/pitch sets differ".into());
    }
    for (k, va) in &ga {
        let vb = &gb[k];
        if va.len() != vb.len() {
            return Err(format!("{k:?}: {} vs {} notes", va.len(), vb.len()));
        }
        for (x, y) in va.iter().zip(vb) {
            if (x.0 - y.0).abs() > tol || (x.1 - y.1).abs() > tol {
                return Err(format!("{k:?}: {x:?} vs {y:?}"));
            }
        }
    }
    Ok(())
}
