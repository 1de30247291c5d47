//! Deterministic stand-in for a pretrained word embedding: hashed character
//! n-grams summed and L2-normalized. Identical strings always map to
//! identical vectors.

pub const WORD_EMBED_DIMS: usize = 300;

const HASH_SEED: u64 = 0x5161_7a2e_77f0_d1b3;

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix_next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Embeds a token as the normalized sum of hashed 2–4 character n-grams of
/// the boundary-marked lowercased string. The empty string maps to zeros.
pub fn stand_in_word_embedding(text: &str) -> Vec<f64> {
    let mut out = vec![0.0; WORD_EMBED_DIMS];
    let marked: Vec<char> = std::iter::once('^')
        .chain(text.to_lowercase().chars())
        .chain(std::iter::once('$'))
        .collect();
    if marked.len() == 2 {
        return out; // empty token
    }
    for n in 2..=4usize {
        if marked.len() < n {
            continue;
        }
        for start in 0..=marked.len() - n {
            let gram: String = marked[start..start + n].iter().collect();
            let mut state = fnv1a(gram.as_bytes(), HASH_SEED);
            for slot in out.iter_mut() {
                // uniform in [-1, 1)
                let u = (splitmix_next(&mut state) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                *slot += 2.0 * u - 1.0;
            }
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in out.iter_mut() {
            *v /= norm;
        }
    }
    out
}
