//! Evaluation token streams: seeded pseudo-random streams and a small bundled
//! text corpus read byte by byte.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::model::{Token, BOT_TOKEN};

/// Plain text shipped with the crate.
pub const CORPUS: &str = include_str!("../data/corpus.txt");

/// `len` tokens: the BOT token followed by uniform draws from `1..vocab`.
pub fn seeded_stream(seed: u64, len: usize, vocab: usize) -> Result<Vec<Token>> {
    if len == 0 {
        return Err(invalid("stream length must be positive"));
    }
    if vocab < 2 {
        return Err(invalid("vocabulary needs at least two tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len);
    out.push(BOT_TOKEN);
    out.extend((1..len).map(|_| rng.gen_range(1..vocab as Token)));
    Ok(out)
}

/// BOT followed by the bytes of `text`. Needs a vocabulary of 256.
pub fn byte_tokens(text: &str, vocab: usize) -> Result<Vec<Token>> {
    if vocab < 256 {
        return Err(invalid(format!("byte tokens need a vocabulary of 256, got {vocab}")));
    }
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOT_TOKEN);
    out.extend(text.bytes().map(Token::from));
    Ok(out)
}

/// The first `len` tokens of the bundled corpus.
pub fn corpus_stream(len: usize, vocab: usize) -> Result<Vec<Token>> {
    let mut t = byte_tokens(CORPUS, vocab)?;
    if len == 0 || len > t.len() {
        return Err(invalid(format!("corpus holds {} tokens, asked for {len}", t.len())));
    }
    t.truncate(len);
    Ok(t)
}
