//! Modality tags, packed tagged sequences, and the versatile attention mask.
//!
//! One mask rule set serves every task: text tokens are causal, continuous
//! vision tokens attend freely inside their own contiguous segment, and
//! discrete generation tokens attend freely inside their own scale while
//! staying causal across scales. Everything is confined to its sample, so
//! packed samples cannot see each other.

mod mask;

pub use mask::AttentionMask;

use std::sync::Arc;

use crate::error::{Error, Result};

/// Modality of one token in a packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityTag {
    /// Discrete text token (causal attention).
    Text,
    /// Continuous visual token: understanding input or editing reference
    /// (full attention inside its contiguous segment).
    UndVision,
    /// Discrete visual generation token at a given scale index, 1-based
    /// (full attention inside the scale, causal across scales).
    GenVision(usize),
}

impl ModalityTag {
    pub fn is_gen(&self) -> bool {
        matches!(self, ModalityTag::GenVision(_))
    }
}

/// What a token position embeds.
#[derive(Debug, Clone)]
pub enum TokenContent {
    /// Vocabulary id, resolved through the text embedding table.
    Text(u32),
    /// Raw pixels of this token's image block, channel-major, resolved
    /// through the patch embedding stack.
    Patch(Arc<Vec<f64>>),
    /// Code-space input vector (length = code dim), resolved through the
    /// code embedding projection.
    Gen(Vec<f64>),
}

/// Tokens of a single sample, before packing. Positions are implicit 0..n.
#[derive(Debug, Clone, Default)]
pub struct SampleTokens {
    pub contents: Vec<TokenContent>,
    pub tags: Vec<ModalityTag>,
}

impl SampleTokens {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn push(&mut self, content: TokenContent, tag: ModalityTag) {
        self.contents.push(content);
        self.tags.push(tag);
    }
}

/// Packed token sequence: every token carries a modality tag, a sample id
/// and a position that restarts at 0 on each sample boundary.
#[derive(Debug, Clone, Default)]
pub struct TaggedSequence {
    pub contents: Vec<TokenContent>,
    pub tags: Vec<ModalityTag>,
    pub sample_ids: Vec<u32>,
    pub positions: Vec<u32>,
}

impl TaggedSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Concatenate samples into one packed sequence, assigning sample ids
    /// in order and restarting positions at each boundary.
    pub fn from_samples(samples: &[SampleTokens]) -> Self {
        let mut seq = TaggedSequence::default();
        for (sid, s) in samples.iter().enumerate() {
            for (pos, (c, t)) in s.contents.iter().zip(&s.tags).enumerate() {
                seq.contents.push(c.clone());
                seq.tags.push(*t);
                seq.sample_ids.push(sid as u32);
                seq.positions.push(pos as u32);
            }
        }
        seq
    }

    pub fn single(sample: &SampleTokens) -> Self {
        Self::from_samples(std::slice::from_ref(sample))
    }

    /// Check the structural invariants: equal field lengths, contiguous
    /// sample runs with positions restarting at 0, and nondecreasing
    /// generation scale indices within each sample.
    pub fn validate(&self) -> Result<()> {
        let n = self.tags.len();
        if self.contents.len() != n || self.sample_ids.len() != n || self.positions.len() != n {
            return Err(Error::InvalidArgument {
                context: "TaggedSequence",
                message: "field lengths differ".into(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        let mut i = 0;
        while i < n {
            let sid = self.sample_ids[i];
            if !seen.insert(sid) {
                return Err(Error::InvalidArgument {
                    context: "TaggedSequence",
                    message: format!("sample id {sid} appears in two separate runs"),
                });
            }
            let mut pos = 0u32;
            let mut last_scale = 0usize;
            while i < n && self.sample_ids[i] == sid {
                if self.positions[i] != pos {
                    return Err(Error::InvalidArgument {
                        context: "TaggedSequence",
                        message: format!("position {} at token {i}, expected {pos}", self.positions[i]),
                    });
                }
                if let ModalityTag::GenVision(k) = self.tags[i] {
                    if k < last_scale {
                        return Err(Error::InvalidArgument {
                            context: "TaggedSequence",
                            message: format!("scale index decreases at token {i}"),
                        });
                    }
                    last_scale = k;
                }
                pos += 1;
                i += 1;
            }
        }
        Ok(())
    }
}

/// Build the versatile attention mask for a packed sequence.
///
/// allow(i, j) holds iff i and j share a sample and at least one of:
/// j ≤ i; both are UndVision inside the same contiguous segment; both are
/// GenVision with equal scale index.
pub fn build_mask(seq: &TaggedSequence) -> AttentionMask {
    let n = seq.len();
    let mut ranges: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let sid = seq.sample_ids[start];
        let mut end = start;
        while end < n && seq.sample_ids[end] == sid {
            end += 1;
        }
        // maximal UndVision segments and per-scale GenVision runs
        let mut und_segments: Vec<(usize, usize)> = Vec::new();
        let mut gen_runs: Vec<(usize, usize, usize)> = Vec::new(); // (scale, from, to)
        let mut i = start;
        while i < end {
            match seq.tags[i] {
                ModalityTag::UndVision => {
                    let s = i;
                    while i < end && seq.tags[i] == ModalityTag::UndVision {
                        i += 1;
                    }
                    und_segments.push((s, i - 1));
                }
                ModalityTag::GenVision(k) => {
                    let s = i;
                    while i < end && seq.tags[i] == ModalityTag::GenVision(k) {
                        i += 1;
                    }
                    gen_runs.push((k, s, i - 1));
                }
                ModalityTag::Text => i += 1,
            }
        }
        for i in start..end {
            let mut rs = vec![(start, i)];
            match seq.tags[i] {
                ModalityTag::UndVision => {
                    let seg = und_segments
                        .iter()
                        .find(|&&(s, e)| s <= i && i <= e)
                        .expect("token must lie in its own segment");
                    rs.push(*seg);
                }
                ModalityTag::GenVision(k) => {
                    for &(rk, s, e) in &gen_runs {
                        if rk == k {
                            rs.push((s, e));
                        }
                    }
                }
                ModalityTag::Text => {}
            }
            ranges.push(merge_ranges(rs));
        }
        start = end;
    }
    AttentionMask::from_ranges(ranges)
}

fn merge_ranges(mut rs: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    rs.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(rs.len());
    for (s, e) in rs {
        match out.last_mut() {
            Some(last) if s <= last.1 + 1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Parse a compact tag string into a tagged sequence with placeholder
/// contents, e.g. `"TT UU G1 G2x4 | T U"`; `|` separates samples.
pub fn sequence_from_tag_string(s: &str) -> Result<TaggedSequence> {
    let mut samples = vec![SampleTokens::default()];
    for word in s.split_whitespace() {
        if word == "|" {
            samples.push(SampleTokens::default());
            continue;
        }
        let sample = samples.last_mut().unwrap();
        let bad = |message: String| Error::InvalidArgument { context: "tag string", message };
        if let Some(rest) = word.strip_prefix('G') {
            let (scale_str, count) = match rest.split_once('x') {
                Some((a, b)) => {
                    (a, b.parse::<usize>().map_err(|_| bad(format!("bad repeat in `{word}`")))?)
                }
                None => (rest, 1),
            };
            let k: usize =
                scale_str.parse().map_err(|_| bad(format!("bad scale in `{word}`")))?;
            if k == 0 {
                return Err(bad(format!("scale must be 1-based in `{word}`")));
            }
            for _ in 0..count {
                sample.push(TokenContent::Gen(Vec::new()), ModalityTag::GenVision(k));
            }
        } else {
            for ch in word.chars() {
                match ch {
                    'T' => sample.push(TokenContent::Text(0), ModalityTag::Text),
                    'U' => sample.push(TokenContent::Patch(Arc::new(Vec::new())), ModalityTag::UndVision),
                    _ => return Err(bad(format!("unknown tag char `{ch}` in `{word}`"))),
                }
            }
        }
    }
    let seq = TaggedSequence::from_samples(&samples);
    seq.validate()?;
    Ok(seq)
}

/// Textual bitmap of the mask: one row per query, `1` = allowed, `.` = not.
pub fn mask_bitmap(mask: &AttentionMask) -> String {
    let n = mask.len();
    let mut out = String::with_capacity(n * (n + 1));
    for i in 0..n {
        for j in 0..n {
            out.push(if mask.allows(i, j) { '1' } else { '.' });
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    /// Pairwise oracle applying the three rules directly; independent of
    /// the range-based builder.
    pub(crate) fn oracle_allow(seq: &TaggedSequence, i: usize, j: usize) -> bool {
        if seq.sample_ids[i] != seq.sample_ids[j] {
            return false;
        }
        if j <= i {
            return true;
        }
        match (seq.tags[i], seq.tags[j]) {
            (ModalityTag::UndVision, ModalityTag::UndVision) => {
                // same contiguous U segment: every token between them is U
                // of the same sample
                (i..=j).all(|t| {
                    seq.tags[t] == ModalityTag::UndVision
                        && seq.sample_ids[t] == seq.sample_ids[i]
                })
            }
            (ModalityTag::GenVision(a), ModalityTag::GenVision(b)) => a == b,
            _ => false,
        }
    }

    fn random_sequence(rng: &mut crate::rng::Rng, max_len: usize) -> TaggedSequence {
        let n_samples = rng.gen_range(1..=3);
        let mut samples = Vec::new();
        for _ in 0..n_samples {
            let mut s = SampleTokens::default();
            let segments = rng.gen_range(1..=5);
            let mut scale = 1usize;
            for _ in 0..segments {
                let seg_len = rng.gen_range(1..=6);
                match rng.gen_range(0..3) {
                    0 => {
                        for _ in 0..seg_len {
                            s.push(TokenContent::Text(0), ModalityTag::Text);
                        }
                    }
                    1 => {
                        for _ in 0..seg_len {
                            s.push(
                                TokenContent::Patch(Arc::new(Vec::new())),
                                ModalityTag::UndVision,
                            );
                        }
                    }
                    _ => {
                        for _ in 0..seg_len {
                            s.push(TokenContent::Gen(Vec::new()), ModalityTag::GenVision(scale));
                        }
                        scale += rng.gen_range(0..=1);
                    }
                }
                if s.len() >= max_len / n_samples {
                    break;
                }
            }
            samples.push(s);
        }
        TaggedSequence::from_samples(&samples)
    }

    #[test]
    fn pure_text_is_lower_triangular() {
        let seq = sequence_from_tag_string("TTT").unwrap();
        let mask = build_mask(&seq);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(mask.allows(i, j), j <= i);
            }
        }
    }

    #[test]
    fn und_segment_sees_itself_text_stays_causal() {
        // [U, U, T]: full attention inside the U segment, the trailing text
        // token sees everything before it, U never sees later text.
        let seq = sequence_from_tag_string("UU T").unwrap();
        let mask = build_mask(&seq);
        assert!(mask.allows(0, 1));
        assert!(mask.allows(1, 0));
        assert!(mask.allows(2, 0) && mask.allows(2, 1) && mask.allows(2, 2));
        assert!(!mask.allows(0, 2));
    }

    #[test]
    fn gen_scales_are_block_causal() {
        // [T, G1, G2×4]: scale 2 tokens mutually visible and see scale 1
        // and the text; scale 1 never sees scale 2.
        let seq = sequence_from_tag_string("T G1 G2x4").unwrap();
        let mask = build_mask(&seq);
        for i in 2..6 {
            for j in 2..6 {
                assert!(mask.allows(i, j), "G2 tokens must see each other ({i},{j})");
            }
            assert!(mask.allows(i, 0) && mask.allows(i, 1));
        }
        for j in 2..6 {
            assert!(!mask.allows(1, j), "G1 must not see G2 at {j}");
        }
    }

    #[test]
    fn two_und_segments_do_not_merge() {
        let seq = sequence_from_tag_string("UU T UU").unwrap();
        let mask = build_mask(&seq);
        // first segment must not see the second
        assert!(!mask.allows(0, 3) && !mask.allows(1, 4));
        // second segment is full among itself and sees the past
        assert!(mask.allows(3, 4) && mask.allows(4, 3) && mask.allows(3, 0));
    }

    #[test]
    fn matches_brute_force_oracle_on_random_layouts() {
        let mut rng = seeded(42);
        for _ in 0..200 {
            let seq = random_sequence(&mut rng, 64);
            seq.validate().unwrap();
            let mask = build_mask(&seq);
            for i in 0..seq.len() {
                for j in 0..seq.len() {
                    assert_eq!(
                        mask.allows(i, j),
                        oracle_allow(&seq, i, j),
                        "mismatch at ({i},{j}) tags {:?}/{:?}",
                        seq.tags[i],
                        seq.tags[j]
                    );
                }
            }
        }
    }

    #[test]
    fn mask_invariants_hold() {
        let mut rng = seeded(7);
        for _ in 0..50 {
            let seq = random_sequence(&mut rng, 48);
            let mask = build_mask(&seq);
            for i in 0..seq.len() {
                assert!(mask.allows(i, i), "diagonal must be allowed");
                for j in 0..seq.len() {
                    if mask.allows(i, j) {
                        assert_eq!(seq.sample_ids[i], seq.sample_ids[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn tag_string_round_trip_and_errors() {
        let seq = sequence_from_tag_string("TT UU G1 G2x4").unwrap();
        assert_eq!(seq.len(), 9);
        assert_eq!(seq.tags[4], ModalityTag::GenVision(1));
        assert!(sequence_from_tag_string("G0").is_err());
        assert!(sequence_from_tag_string("Q").is_err());
        let two = sequence_from_tag_string("T | T").unwrap();
        assert_eq!(two.sample_ids, vec![0, 1]);
        assert_eq!(two.positions, vec![0, 0]);
    }

    #[test]
    fn validate_rejects_decreasing_scales() {
        let mut s = SampleTokens::default();
        s.push(TokenContent::Gen(Vec::new()), ModalityTag::GenVision(2));
        s.push(TokenContent::Gen(Vec::new()), ModalityTag::GenVision(1));
        assert!(TaggedSequence::single(&s).validate().is_err());
    }
}
