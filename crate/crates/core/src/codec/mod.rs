//! Dialog state tracking as masked-span recovery.
//!
//! A task's slots are rendered into a query `d1 : <M1> . d2 : <M2> .`
//! appended to the dialog; the model answers `<M1> v1 <M2> v2`, writing
//! `None` for slots the dialog does not fill.

pub mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use vocab::{sentinel_text, NONE_VALUE, SENTINEL_COUNT, SEP_TEXT};

/// Slot name to value. Slots missing from the map count as `None`.
pub type ValueMap = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("a query needs at least one slot")]
    EmptyQuery,
    #[error("{0} slots exceed the {SENTINEL_COUNT} available sentinels")]
    TooManySlots(usize),
    #[error("slot `{name}` of service `{service}` appears twice")]
    DuplicateSlot { service: String, name: String },
    #[error("slot `{0}` has an empty description")]
    EmptyDescription(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub description: String,
    pub service_id: String,
}

impl Slot {
    pub fn new(name: impl Into<String>, description: impl Into<String>, service_id: impl Into<String>) -> Self {
        Self { name: name.into(), description: description.into(), service_id: service_id.into() }
    }
}

/// Ordered slots with their rendered query text. Slot `i` (0-based) is
/// asked for by sentinel `<M{i+1}>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    slots: Vec<Slot>,
    text: String,
}

impl Query {
    pub fn build(slots: Vec<Slot>) -> Result<Self, CodecError> {
        if slots.is_empty() {
            return Err(CodecError::EmptyQuery);
        }
        if slots.len() > SENTINEL_COUNT {
            return Err(CodecError::TooManySlots(slots.len()));
        }
        for (i, s) in slots.iter().enumerate() {
            if s.description.trim().is_empty() {
                return Err(CodecError::EmptyDescription(s.name.clone()));
            }
            if slots[..i].iter().any(|o| o.name == s.name && o.service_id == s.service_id) {
                return Err(CodecError::DuplicateSlot { service: s.service_id.clone(), name: s.name.clone() });
            }
        }
        let text = slots
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{} : {} .", s.description.trim(), sentinel_text(i + 1)))
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Self { slots, text })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Values in query order, `None` where `values` has no usable entry.
    pub fn padded(&self, values: &ValueMap) -> Vec<String> {
        self.slots.iter().map(|s| clean_value(values.get(&s.name).map(String::as_str))).collect()
    }

    /// The padded values keyed by slot name.
    pub fn padded_map(&self, values: &ValueMap) -> ValueMap {
        self.slots.iter().map(|s| s.name.clone()).zip(self.padded(values)).collect()
    }
}

/// Shorthand for [`Query::build`].
pub fn build_query(slots: Vec<Slot>) -> Result<Query, CodecError> {
    Query::build(slots)
}

fn clean_value(v: Option<&str>) -> String {
    match v.map(str::trim) {
        Some(v) if !v.is_empty() => v.to_string(),
        _ => NONE_VALUE.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedExample {
    pub input_text: String,
    pub target_text: String,
    /// `(sentinel index, slot name)` in query order; empty for the name format.
    pub alignment: Vec<(usize, String)>,
}

/// Formats with values given positionally in query order.
pub fn format_positional(dialog: &str, values: &[String], query: &Query) -> FormattedExample {
    debug_assert_eq!(values.len(), query.len());
    let target_text = values
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{} {}", sentinel_text(i + 1), clean_value(Some(v))))
        .collect::<Vec<_>>()
        .join(" ");
    FormattedExample {
        input_text: format!("{} {SEP_TEXT} {}", dialog.trim(), query.text()),
        target_text,
        alignment: query.slots.iter().enumerate().map(|(i, s)| (i + 1, s.name.clone())).collect(),
    }
}

pub fn format_example(dialog: &str, values: &ValueMap, query: &Query) -> FormattedExample {
    format_positional(dialog, &query.padded(values), query)
}

/// Values in query order recovered from generated text.
///
/// The text is cut at every `<M{n}>` marker. The piece following marker
/// `n` is slot `n`'s value, trimmed; text before the first marker,
/// markers outside the query and repeats of an already seen marker are
/// ignored. Slots without a marker or with an empty piece are `None`.
pub fn parse_positional(generated: &str, query: &Query) -> Vec<String> {
    let mut out: Vec<Option<String>> = vec![None; query.len()];
    let mut current: Option<usize> = None;
    let mut piece_start = 0;
    let bytes = generated.as_bytes();
    let mut i = 0;
    let flush = |slot: Option<usize>, piece: &str, out: &mut Vec<Option<String>>| {
        if let Some(n) = slot {
            if (1..=out.len()).contains(&n) && out[n - 1].is_none() {
                out[n - 1] = Some(clean_value(Some(piece)));
            }
        }
    };
    while i < bytes.len() {
        if let Some((n, len)) = marker_at(bytes, i) {
            flush(current, &generated[piece_start..i], &mut out);
            current = Some(n);
            i += len;
            piece_start = i;
        } else {
            i += 1;
        }
    }
    flush(current, &generated[piece_start..], &mut out);
    out.into_iter().map(|v| v.unwrap_or_else(|| NONE_VALUE.to_string())).collect()
}

/// `<M` digits `>` starting at `i`: the index and byte length.
fn marker_at(bytes: &[u8], i: usize) -> Option<(usize, usize)> {
    if !bytes[i..].starts_with(b"<M") {
        return None;
    }
    let digits = bytes[i + 2..].iter().take_while(|b| b.is_ascii_digit()).count();
    if digits == 0 || digits > 4 || bytes.get(i + 2 + digits) != Some(&b'>') {
        return None;
    }
    let n = std::str::from_utf8(&bytes[i + 2..i + 2 + digits]).ok()?.parse().ok()?;
    Some((n, digits + 3))
}

/// Slot name to value for every query slot.
pub fn parse_prediction(generated: &str, query: &Query) -> ValueMap {
    query.slots.iter().map(|s| s.name.clone()).zip(parse_positional(generated, query)).collect()
}

/// The plain format used by the fine-tuning baselines: the dialog with the
/// service name as input and `slot = value ; ...` over filled slots as
/// target.
pub fn name_format_example(dialog: &str, service_name: &str, values: &ValueMap) -> FormattedExample {
    let target_text = values
        .iter()
        .filter_map(|(k, v)| {
            let v = clean_value(Some(v));
            (v != NONE_VALUE).then(|| format!("{k} = {v}"))
        })
        .collect::<Vec<_>>()
        .join(" ; ");
    FormattedExample {
        input_text: format!("{} {SEP_TEXT} {}", dialog.trim(), service_name.trim()),
        target_text,
        alignment: Vec::new(),
    }
}

/// Inverse of the name format. Pieces without ` = ` are dropped; the first
/// value given for a slot wins.
pub fn parse_name_format(generated: &str) -> ValueMap {
    let mut out = ValueMap::new();
    for piece in generated.split(" ; ") {
        if let Some((k, v)) = piece.split_once(" = ") {
            let (k, v) = (k.trim(), v.trim());
            if !k.is_empty() && !v.is_empty() && v != NONE_VALUE {
                out.entry(k.to_string()).or_insert_with(|| v.to_string());
            }
        }
    }
    out
}

/// Lowercase, single spaces, no leading or trailing punctuation.
pub fn normalize_value(v: &str) -> String {
    let collapsed = v.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).to_string()
}
