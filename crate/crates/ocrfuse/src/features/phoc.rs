//! Pyramidal histogram of characters: binary, position-sensitive
//! character-occupancy encoding of a word.
//!
//! Levels 2–5 over the 36-character alphabet [a-z0-9] give 504 dims;
//! a level-2 histogram of the 50 most common English bigrams adds 100,
//! for 604 total. A character (or bigram) with normalized occupancy
//! interval [i/n, (i+k)/n] is assigned to region [r/ℓ, (r+1)/ℓ] of level ℓ
//! when their overlap exceeds half of the shorter of the two intervals.
//! All interval comparisons are carried out in exact integer arithmetic
//! (both intervals scaled by n·ℓ), so the encoding is bit-stable.

/// Unigram slots: (2+3+4+5) regions × 36 characters.
pub const UNIGRAM_DIMS: usize = 14 * 36;
/// Bigram slots: 2 level-2 regions × 50 bigrams.
pub const BIGRAM_DIMS: usize = 2 * 50;
pub const PHOC_DIMS: usize = UNIGRAM_DIMS + BIGRAM_DIMS;

const LEVELS: [usize; 4] = [2, 3, 4, 5];

/// The 50 most common English bigrams, fixed ordering.
pub const BIGRAMS: [&str; 50] = [
    "th", "he", "in", "er", "an", "re", "on", "at", "en", "nd", "ti", "es", "or", "te", "of",
    "ed", "is", "it", "al", "ar", "st", "to", "nt", "ng", "se", "ha", "as", "ou", "io", "le",
    "ve", "co", "me", "de", "hi", "ri", "ro", "ic", "ne", "ea", "ra", "ce", "li", "ch", "ll",
    "be", "ma", "si", "om", "ur",
];

fn char_index(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        '0'..='9' => Some(26 + c as usize - '0' as usize),
        _ => None,
    }
}

fn bigram_index(b: &str) -> Option<usize> {
    BIGRAMS.iter().position(|&x| x == b)
}

/// Occupancy test in integers: the span [pos, pos+width) of `n` character
/// slots against region `r` of `level`, both scaled by n·level.
/// True when 2·overlap > min(span, region) in the scaled units.
fn occupies(pos: usize, width: usize, n: usize, level: usize, r: usize) -> bool {
    let item_lo = pos * level;
    let item_hi = (pos + width) * level;
    let reg_lo = r * n;
    let reg_hi = (r + 1) * n;
    let lo = item_lo.max(reg_lo);
    let hi = item_hi.min(reg_hi);
    if hi <= lo {
        return false;
    }
    let overlap = hi - lo;
    let item_span = width * level;
    let region_span = n;
    2 * overlap > item_span.min(region_span)
}

fn unigram_level_offset(level: usize) -> usize {
    LEVELS
        .iter()
        .take_while(|&&l| l < level)
        .map(|&l| l * 36)
        .sum()
}

/// Encodes `text` into the 604-dim binary histogram. Characters outside
/// [a-z0-9] are dropped before positions are assigned; text that filters
/// to nothing yields the all-zero vector.
pub fn phoc_encode(text: &str) -> Vec<f64> {
    let chars: Vec<usize> = text
        .to_lowercase()
        .chars()
        .filter_map(char_index)
        .collect();
    let mut out = vec![0.0; PHOC_DIMS];
    let n = chars.len();
    if n == 0 {
        return out;
    }
    for (pos, &c) in chars.iter().enumerate() {
        for &level in &LEVELS {
            for r in 0..level {
                if occupies(pos, 1, n, level, r) {
                    out[unigram_level_offset(level) + r * 36 + c] = 1.0;
                }
            }
        }
    }
    // level-2 bigram histogram over consecutive filtered pairs
    let filtered: String = text.to_lowercase().chars().filter(|c| char_index(*c).is_some()).collect();
    let fchars: Vec<char> = filtered.chars().collect();
    for pos in 0..n.saturating_sub(1) {
        let pair: String = fchars[pos..pos + 2].iter().collect();
        if let Some(b) = bigram_index(&pair) {
            for r in 0..2 {
                if occupies(pos, 2, n, 2, r) {
                    out[UNIGRAM_DIMS + r * 50 + b] = 1.0;
                }
            }
        }
    }
    out
}
