//! Prompt tokenization and learned word-level embeddings.

use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::network::layers::randn;
use crate::network::params::{join, Params};
use crate::{Error, Result, Scalar};

pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";

/// Longest token sequence, BOS included.
pub const MAX_TOKENS: usize = 16;

/// Closed word list of the toy corpus. Index 0 is BOS, index 1 is `<unk>`.
pub const WORDS: &[&str] = &[
    BOS,
    UNK,
    "a",
    "man",
    "person",
    "woman",
    "someone",
    "jumps",
    "walks",
    "runs",
    "waves",
    "squats",
    "sits",
    "stands",
    "then",
    "and",
    "once",
    "twice",
    "two",
    "three",
    "four",
    "five",
    "six",
    "times",
    "forward",
    "down",
    "still",
    "his",
    "her",
    "hand",
    "hands",
    "in",
    "place",
    "high",
    "happily",
    "slowly",
    "quickly",
    "the",
    "up",
    "energetically",
    "briefly",
    "around",
];

/// Action verbs; their positions become the editable word indices.
pub const VERBS: &[&str] = &["jumps", "walks", "runs", "waves", "squats", "sits", "stands"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(WORDS.iter().map(|s| s.to_string()).collect()).expect("built-in vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != BOS || words[1] != UNK {
            return Err(Error::data("vocabulary must start with <bos>, <unk>"));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.iter().position(|w| w == word).unwrap_or(1)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// SHA-256 of the JSON word array; checkpoints pin it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.words).expect("strings serialize");
        hex(&Sha256::digest(&json))
    }

    /// Lowercases, strips punctuation, splits on whitespace and prepends BOS.
    pub fn tokenize(&self, prompt: &str) -> Result<PromptTokens> {
        let words: Vec<String> = prompt
            .to_lowercase()
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c.is_whitespace() {
                    c
                } else {
                    ' '
                }
            })
            .collect::<String>()
            .split_whitespace()
            .map(str::to_string)
            .collect();
        if words.is_empty() {
            return Err(Error::invalid("prompt has no words"));
        }
        if words.len() >= MAX_TOKENS {
            return Err(Error::invalid(format!(
                "prompt has {} words, at most {} allowed",
                words.len(),
                MAX_TOKENS - 1
            )));
        }
        let mut ids = vec![0];
        ids.extend(words.iter().map(|w| self.id(w)));
        let verb_indices = words
            .iter()
            .enumerate()
            .filter(|(_, w)| VERBS.contains(&w.as_str()))
            .map(|(i, _)| i)
            .collect();
        Ok(PromptTokens {
            words,
            ids,
            verb_indices,
        })
    }

    pub fn null_tokens(&self) -> PromptTokens {
        PromptTokens::null()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tokenized prompt. `ids[0]` is BOS; `verb_indices` index into `words`
/// (so the matching embedding row is `1 + index`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub words: Vec<String>,
    pub ids: Vec<usize>,
    pub verb_indices: Vec<usize>,
}

impl PromptTokens {
    /// BOS-only sequence, the null condition of classifier-free guidance.
    pub fn null() -> Self {
        Self {
            words: Vec::new(),
            ids: vec![0],
            verb_indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn unknown_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id == 1).count()
    }

    /// Position of `word` among the words, if present.
    pub fn position(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
}

/// Embedding table plus learned positional vectors.
#[derive(Debug, Clone)]
pub struct TextEmbedder<T: Scalar> {
    pub table: Array2<T>,
    pub positions: Array2<T>,
}

impl<T: Scalar> TextEmbedder<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize, dim: usize) -> Self {
        Self {
            table: randn(rng, (vocab_size, dim), 1.0),
            positions: randn(rng, (MAX_TOKENS, dim), 0.1),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    /// Row `i` is `table[ids[i]] + positions[i]`.
    pub fn embed(&self, tokens: &PromptTokens) -> Result<Array2<T>> {
        if tokens.len() > MAX_TOKENS {
            return Err(Error::invalid("too many tokens"));
        }
        let mut out = Array2::zeros((tokens.len(), self.dim()));
        for (i, &id) in tokens.ids.iter().enumerate() {
            if id >= self.table.nrows() {
                return Err(Error::range(format!("token id {id} outside vocabulary")));
            }
            let mut row = out.row_mut(i);
            row.assign(&self.table.row(id));
            row += &self.positions.row(i);
        }
        Ok(out)
    }

    /// Scatters row gradients back into the table and positional rows.
    pub fn backward(&self, tokens: &[&PromptTokens], g: &Array2<T>, grad: &mut TextEmbedder<T>) {
        let mut row = 0;
        for t in tokens {
            for (i, &id) in t.ids.iter().enumerate() {
                let gr = g.row(row);
                let mut tr = grad.table.row_mut(id);
                tr += &gr;
                let mut pr = grad.positions.slice_mut(s![i, ..]);
                pr += &gr;
                row += 1;
            }
        }
    }
}

impl<T: Scalar> Params<T> for TextEmbedder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f(&join(prefix, "table"), self.table.view().into_dyn());
        f(&join(prefix, "positions"), self.positions.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(&join(prefix, "table"), self.table.view_mut().into_dyn());
        f(&join(prefix, "positions"), self.positions.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenize_strips_punctuation_and_prepends_bos() {
        let v = Vocabulary::default();
        let t = v.tokenize("a man jumps.").unwrap();
        assert_eq!(t.words, vec!["a", "man", "jumps"]);
        assert_eq!(t.ids.len(), 4);
        assert_eq!(t.ids[0], 0);
        assert_eq!(t.verb_indices, vec![2]);
    }

    #[test]
    fn empty_and_punctuation_only_prompts_are_rejected() {
        let v = Vocabulary::default();
        assert!(v.tokenize("").is_err());
        assert!(v.tokenize(" .,! ").is_err());
    }

    #[test]
    fn case_folding() {
        let v = Vocabulary::default();
        assert_eq!(
            v.tokenize("a man JUMPS.").unwrap().ids,
            v.tokenize("a man jumps.").unwrap().ids
        );
    }

    #[test]
    fn long_prompt_rejected() {
        let v = Vocabulary::default();
        let p = vec!["man"; 16].join(" ");
        assert!(v.tokenize(&p).is_err());
        let ok = vec!["man"; 15].join(" ");
        assert_eq!(v.tokenize(&ok).unwrap().len(), 16);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::default();
        let t = v.tokenize("a man pirouettes").unwrap();
        assert_eq!(t.ids[3], 1);
        assert_eq!(t.unknown_count(), 1);
    }

    #[test]
    fn vocabulary_is_closed_and_small() {
        let v = Vocabulary::default();
        assert!(v.len() <= 48);
        let mut sorted = v.words().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), v.len());
    }

    #[test]
    fn embed_is_deterministic_and_handles_bos_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Vocabulary::default();
        let emb = TextEmbedder::<f32>::new(&mut rng, v.len(), 8);
        let t = v.tokenize("a man jumps").unwrap();
        assert_eq!(emb.embed(&t).unwrap(), emb.embed(&t).unwrap());
        assert_eq!(emb.embed(&PromptTokens::null()).unwrap().dim(), (1, 8));
    }

    #[test]
    fn unk_row_differs_from_every_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = Vocabulary::default();
        let emb = TextEmbedder::<f32>::new(&mut rng, v.len(), 16);
        for id in 2..v.len() {
            assert_ne!(emb.table.row(1), emb.table.row(id));
        }
    }

    #[test]
    fn out_of_range_id_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = TextEmbedder::<f32>::new(&mut rng, 4, 8);
        let t = PromptTokens {
            words: vec!["x".into()],
            ids: vec![0, 9],
            verb_indices: vec![],
        };
        assert!(emb.embed(&t).is_err());
    }

    #[test]
    fn unused_rows_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Vocabulary::default();
        let emb = TextEmbedder::<f64>::new(&mut rng, v.len(), 4);
        let t = v.tokenize("a man jumps").unwrap();
        let g = Array2::from_elem((t.len(), 4), 1.0);
        let mut grad = emb.zeros_like();
        emb.backward(&[&t], &g, &mut grad);
        for id in 0..v.len() {
            let used = t.ids.contains(&id);
            let norm: f64 = grad.table.row(id).iter().map(|x| x.abs()).sum();
            assert_eq!(norm == 0.0, !used, "row {id}");
        }
    }
}
