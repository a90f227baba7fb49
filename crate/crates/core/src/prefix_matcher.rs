//! Character-level comparison of a new prompt against a cached transcript.
//!
//! Matching works on text rather than token ids because BPE output depends on
//! context: the same prefix can tokenize differently once more text follows.

use serde::{Deserialize, Serialize};

use crate::agent_cache::AgentCache;

/// Minimum fraction of the cached transcript that must survive for partial reuse.
pub const REUSE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Exact,
    Extend,
    Diverge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub verdict: Verdict,
    pub common_chars: usize,
    pub reuse_tokens: usize,
    pub reuse_blocks: usize,
    /// Prompt text not covered by the reused tokens.
    pub suffix_text: String,
}

/// Length of the longest common prefix, in code points.
pub fn common_prefix_chars(a: &str, b: &str) -> usize {
    let (ab, bb) = (a.as_bytes(), b.as_bytes());
    let n = ab.len().min(bb.len());
    // Word-at-a-time scan for the first differing byte.
    let mut i = 0;
    while i + 8 <= n {
        let x = u64::from_ne_bytes(ab[i..i + 8].try_into().expect("8 bytes"));
        let y = u64::from_ne_bytes(bb[i..i + 8].try_into().expect("8 bytes"));
        if x != y {
            break;
        }
        i += 8;
    }
    while i < n && ab[i] == bb[i] {
        i += 1;
    }
    // A mismatch inside a multi-byte character: back up to its first byte.
    while !a.is_char_boundary(i) {
        i -= 1;
    }
    a[..i].chars().count()
}

fn skip_chars(s: &str, chars: usize) -> &str {
    match s.char_indices().nth(chars) {
        Some((i, _)) => &s[i..],
        None => "",
    }
}

/// Compares `prompt` against the cached transcript of `cached`.
pub fn match_prompt(cached: &AgentCache, prompt: &str, block_tokens: usize) -> MatchResult {
    match_transcript(&cached.transcript_text, &cached.char_offsets, prompt, block_tokens)
}

/// As [`match_prompt`], on raw transcript parts.
pub fn match_transcript(
    transcript: &str,
    char_offsets: &[usize],
    prompt: &str,
    block_tokens: usize,
) -> MatchResult {
    let cached_chars = transcript.chars().count();
    let prompt_chars = prompt.chars().count();
    let total_tokens = char_offsets.len();
    let c = common_prefix_chars(transcript, prompt);
    let diverge = MatchResult {
        verdict: Verdict::Diverge,
        common_chars: c,
        reuse_tokens: 0,
        reuse_blocks: 0,
        suffix_text: prompt.to_string(),
    };
    if cached_chars == 0 {
        return diverge;
    }
    let all_blocks = total_tokens.div_ceil(block_tokens);
    if c == cached_chars && c == prompt_chars {
        return MatchResult {
            verdict: Verdict::Exact,
            common_chars: c,
            reuse_tokens: total_tokens,
            reuse_blocks: all_blocks,
            suffix_text: String::new(),
        };
    }
    if c == cached_chars {
        return MatchResult {
            verdict: Verdict::Extend,
            common_chars: c,
            reuse_tokens: total_tokens,
            reuse_blocks: all_blocks,
            suffix_text: skip_chars(prompt, c).to_string(),
        };
    }
    if (c as f64) / (cached_chars as f64) < REUSE_THRESHOLD {
        return diverge;
    }
    // Tokens lying wholly inside the common prefix; token i ends where i+1
    // starts. Ends are non-decreasing, so the qualifying tokens form a prefix.
    let token_end = |i: usize| char_offsets.get(i + 1).copied().unwrap_or(cached_chars);
    let (mut lo, mut hi) = (0usize, total_tokens);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if token_end(mid) <= c {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let reuse_blocks = lo / block_tokens;
    let reuse_tokens = reuse_blocks * block_tokens;
    // c < cached_chars here, so the final token never qualifies and
    // reuse_tokens < total_tokens.
    let reuse_chars = char_offsets.get(reuse_tokens).copied().unwrap_or(0);
    MatchResult {
        verdict: Verdict::Extend,
        common_chars: c,
        reuse_tokens,
        reuse_blocks,
        suffix_text: skip_chars(prompt, reuse_chars).to_string(),
    }
}
