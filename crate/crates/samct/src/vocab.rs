//! Object label vocabulary.
//!
//! CT objects are keyed by a category letter plus a number (H = head & neck,
//! C = chest, A = abdomen, P = pelvis, B = bone, L = lesion, V = vessel).
//! The bundled table maps the anatomical IDs to names; IDs outside the table
//! (e.g. synthetic task labels like `S1`) are accepted as long as they follow
//! the letter+number scheme.

use std::collections::HashMap;
use std::sync::OnceLock;

const VOCAB_TSV: &str = include_str!("object_vocabulary.tsv");

fn table() -> &'static HashMap<&'static str, &'static str> {
    static TABLE: OnceLock<HashMap<&'static str, &'static str>> = OnceLock::new();
    TABLE.get_or_init(|| {
        VOCAB_TSV
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (id, name) = l.split_once('\t').expect("tab-separated vocabulary");
                (id, name)
            })
            .collect()
    })
}

/// True when `id` follows the `letter(s) + number` object-ID scheme.
pub fn is_valid_object_id(id: &str) -> bool {
    let letters: String = id.chars().take_while(|c| c.is_ascii_uppercase()).collect();
    let digits = &id[letters.len()..];
    !letters.is_empty() && !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit())
}

/// Anatomical name for a known object ID.
pub fn object_name(id: &str) -> Option<&'static str> {
    table().get(id).copied()
}

/// Number of entries in the bundled vocabulary.
pub fn vocabulary_len() -> usize {
    table().len()
}
