//! Byte-level tokenizer shared by every component.
//!
//! Ids `0..3` are specials; byte `b` maps to `b + 3`.

pub const EOS: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const BYTE_OFFSET: u32 = 3;
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET as usize;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(|b| b as u32 + BYTE_OFFSET).collect()
}

/// Decodes byte tokens, skipping specials. Invalid UTF-8 is replaced.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&t))
        .map(|&t| (t - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Joins segments with a single [`SEP`] token between consecutive segments.
pub fn join(segments: &[Vec<u32>]) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_specials() {
        let toks = encode("héllo");
        assert_eq!(toks.len(), 6);
        assert_eq!(decode(&toks), "héllo");
        let mut with_specials = vec![BOS];
        with_specials.extend(encode("ab"));
        with_specials.push(EOS);
        assert_eq!(decode(&with_specials), "ab");
        assert!(encode("\u{ff}").iter().all(|&t| (t as usize) < VOCAB_SIZE));
    }

    #[test]
    fn join_inserts_separators_between_segments() {
        let j = join(&[encode("ab"), encode("c"), encode("de")]);
        assert_eq!(j.len(), 2 + 1 + 1 + 1 + 2);
        assert_eq!(j.iter().filter(|&&t| t == SEP).count(), 2);
        assert!(join(&[]).is_empty());
    }
}
