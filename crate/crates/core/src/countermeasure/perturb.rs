//! Character perturbation (smoothllm) and word-splitting retokenization.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CountermeasureError;

const PRINTABLE_ASCII: std::ops::RangeInclusive<u8> = 0x20..=0x7e;

/// Replace `ceil(rate * chars)` character positions, chosen uniformly
/// without replacement, with uniform printable ASCII. The replacement is
/// always different from the original character, so exactly that many
/// positions differ. Deterministic under `seed`.
pub fn perturb(text: &str, rate: f64, seed: u64) -> Result<String, CountermeasureError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(CountermeasureError::InvalidParams(format!(
            "perturb rate {rate} outside (0, 1)"
        )));
    }
    let mut chars: Vec<char> = text.chars().collect();
    let len = chars.len();
    if len == 0 {
        return Ok(String::new());
    }
    let count = ((rate * len as f64).ceil() as usize).min(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Partial Fisher-Yates: the first `count` entries are a uniform sample
    // without replacement.
    let mut indices: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = rng.random_range(i..len);
        indices.swap(i, j);
    }
    for &pos in &indices[..count] {
        let original = chars[pos];
        loop {
            let replacement = *PRINTABLE_ASCII.start()
                + rng.random_range(0..=(PRINTABLE_ASCII.end() - PRINTABLE_ASCII.start()));
            let replacement = replacement as char;
            if replacement != original {
                chars[pos] = replacement;
                break;
            }
        }
    }
    Ok(chars.into_iter().collect())
}

/// The perturbed copies evaluated by smoothllm; copy `i` uses `seed + i`.
pub fn perturbed_copies(
    text: &str,
    copies: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<String>, CountermeasureError> {
    (0..copies)
        .map(|i| perturb(text, rate, seed.wrapping_add(i as u64)))
        .collect()
}

/// Split each word at an internal position with per-word probability
/// `rate`, inserting a single space. Whitespace runs are preserved
/// verbatim, so the multiset of non-whitespace characters never changes.
/// This is a surrogate for BPE-dropout-style retokenization: what matters
/// observably is the disruption of token boundaries.
pub fn retokenize(text: &str, rate: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(text.len() + text.len() / 8);
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String, rng: &mut ChaCha8Rng| {
        if word.is_empty() {
            return;
        }
        let split = rng.random::<f64>() < rate;
        let char_count = word.chars().count();
        if split && char_count >= 2 {
            let cut = rng.random_range(1..char_count);
            let byte_cut = word
                .char_indices()
                .nth(cut)
                .map(|(b, _)| b)
                .expect("cut is an interior char index");
            out.push_str(&word[..byte_cut]);
            out.push(' ');
            out.push_str(&word[byte_cut..]);
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut out, &mut rng);
            out.push(c);
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut out, &mut rng);
    out
}
