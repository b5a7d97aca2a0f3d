use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIALS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Word ↔ id mapping. Ids `0..4` are the special symbols; the remaining ids
/// are ordered by descending corpus frequency with lexicographic tie-breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `cap − 4` most frequent tokens of `sentences`.
    pub fn build<'a, I, S>(sentences: I, cap: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for sentence in sentences {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap.saturating_sub(NUM_SPECIALS));
        Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Vocabulary from an ordered word list (specials are prepended).
    pub fn from_tokens<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIALS
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Words in id order, specials excluded.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    pub fn all_tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(raw: &[&str]) -> Vec<Vec<String>> {
        raw.iter()
            .map(|s| s.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn cap_keeps_most_frequent() {
        let s = sents(&["a b c", "a b", "a"]);
        let v = Vocab::build(s.iter().map(Vec::as_slice), 6);
        assert_eq!(v.len(), 6);
        assert_eq!(v.words(), &["a".to_string(), "b".to_string()]);
        assert_eq!(v.id("c"), UNK);
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn ties_break_lexicographically() {
        let s = sents(&["zeta alpha mid", "mid"]);
        let v = Vocab::build(s.iter().map(Vec::as_slice), 100);
        assert_eq!(v.words(), &["mid", "alpha", "zeta"].map(String::from));
    }

    #[test]
    fn everything_fits_means_no_unknowns() {
        let s = sents(&["x y z", "y z", "w"]);
        let v = Vocab::build(s.iter().map(Vec::as_slice), 35_000);
        for sent in &s {
            assert!(v.encode(sent).iter().all(|&i| i != UNK));
        }
        assert_eq!(v.decode(&v.encode(&s[0])), s[0]);
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::from_tokens(Vec::new());
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("</s>"), EOS);
    }
}
