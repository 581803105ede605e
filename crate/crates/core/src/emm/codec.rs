//! Canonical byte encoding of a frequency matrix.
//!
//! ```text
//! magic    4 bytes  "CEMM"
//! version  u32 LE   1
//! entries  u64 LE   number of triples
//! triples  entries x (row u64 LE, col u64 LE, count u64 LE), sorted by (row, col)
//! ```
//!
//! Equal models always encode to identical bytes, which is what record
//! signatures and block digests rely on.

use super::{FrequencyMatrix, State};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"CEMM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;
const TRIPLE_LEN: usize = 24;

pub fn encode_model(model: &FrequencyMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + TRIPLE_LEN * model.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.len() as u64).to_le_bytes());
    for (i, j, c) in model.entries() {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&j.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

/// Decodes a model, rejecting anything that is not the canonical encoding
/// (unsorted or duplicate keys, zero counts, trailing bytes).
pub fn decode_model(bytes: &[u8]) -> Result<FrequencyMatrix> {
    let (model, used) = decode_model_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::decode(used, "trailing bytes after model"));
    }
    Ok(model)
}

/// Decodes a model from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub(crate) fn decode_model_prefix(bytes: &[u8]) -> Result<(FrequencyMatrix, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::decode(bytes.len(), "truncated model header"));
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(Error::decode(0, "bad model magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::decode(4, format!("unsupported model version {version}")));
    }
    let entries = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = entries
        .checked_mul(TRIPLE_LEN as u64)
        .and_then(|b| usize::try_from(b).ok())
        .filter(|b| *b <= bytes.len() - HEADER_LEN)
        .ok_or_else(|| Error::decode(8, format!("entry count {entries} exceeds input")))?;

    let mut model = FrequencyMatrix::new();
    let mut prev: Option<(State, State)> = None;
    for k in 0..entries as usize {
        let at = HEADER_LEN + k * TRIPLE_LEN;
        let word = |o: usize| u64::from_le_bytes(bytes[at + o..at + o + 8].try_into().unwrap());
        let (i, j, c) = (word(0), word(8), word(16));
        if prev.is_some_and(|p| p >= (i, j)) {
            return Err(Error::decode(at, "entries not strictly sorted"));
        }
        if c == 0 {
            return Err(Error::decode(at + 16, "zero count in canonical encoding"));
        }
        model.add_count(i, j, c);
        prev = Some((i, j));
    }
    Ok((model, HEADER_LEN + body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_model_is_header_only() {
        let bytes = encode_model(&FrequencyMatrix::new());
        assert_eq!(bytes, b"CEMM\x01\0\0\0\0\0\0\0\0\0\0\0");
        assert!(decode_model(&bytes).unwrap().is_empty());
    }

    #[test]
    fn round_trip_three_entries() {
        let m = FrequencyMatrix::from_entries([(0, 1, 3), (4, 2, 9), (1, 1, 1)]);
        assert_eq!(decode_model(&encode_model(&m)).unwrap(), m);
    }

    #[test]
    fn insertion_order_does_not_change_bytes() {
        let mut a = FrequencyMatrix::new();
        let mut b = FrequencyMatrix::new();
        let seq = [(3, 1), (0, 2), (3, 1), (7, 7), (0, 2), (1, 0)];
        for &(i, j) in &seq {
            a.record_transition(i, j);
        }
        for &(i, j) in seq.iter().rev() {
            b.record_transition(i, j);
        }
        assert_eq!(encode_model(&a), encode_model(&b));
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let good = encode_model(&FrequencyMatrix::from_entries([(0, 1, 1), (0, 2, 1)]));

        let err = decode_model(&good[..10]).unwrap_err();
        assert!(matches!(err, Error::Decode { offset: 10, .. }), "{err}");

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Decode { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_model(&bad), Err(Error::Decode { offset: 4, .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(
            decode_model(&bad),
            Err(Error::Decode { offset: 64, .. })
        ));

        // swap the two triples so they are out of order
        let mut bad = good.clone();
        let (a, b) = bad[16..].split_at_mut(24);
        a.swap_with_slice(b);
        assert!(matches!(
            decode_model(&bad),
            Err(Error::Decode { offset: 40, .. })
        ));

        let mut bad = good.clone();
        bad[32..40].fill(0);
        assert!(matches!(
            decode_model(&bad),
            Err(Error::Decode { offset: 32, .. })
        ));

        let mut bad = good;
        bad[8] = 200;
        assert!(matches!(decode_model(&bad), Err(Error::Decode { offset: 8, .. })));
    }
}
