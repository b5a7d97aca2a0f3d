use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::DataError;

/// One post/response record, whitespace-tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pair {
    pub post: Vec<String>,
    pub response: Vec<String>,
}

impl Pair {
    pub fn new(post: &str, response: &str) -> Pair {
        Pair {
            post: tokenize(post),
            response: tokenize(response),
        }
    }
}

pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Outcome counts of [`load_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadSummary {
    pub accepted: usize,
    /// Records with an empty post or response field.
    pub rejected_empty: usize,
}

/// A named split of post/response pairs with a post → pair index.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: String,
    pairs: Vec<Pair>,
    index: BTreeMap<Vec<String>, Vec<usize>>,
}

impl Corpus {
    /// Builds a corpus. Pairs with an empty side are not allowed here; the
    /// file loader filters them before construction.
    pub fn new(split: impl Into<String>, pairs: Vec<Pair>) -> Result<Corpus, DataError> {
        if let Some(i) = pairs
            .iter()
            .position(|p| p.post.is_empty() || p.response.is_empty())
        {
            return Err(DataError::Contract(format!("pair {i} has an empty side")));
        }
        let mut index: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate() {
            index.entry(p.post.clone()).or_default().push(i);
        }
        Ok(Corpus {
            split: split.into(),
            pairs,
            index,
        })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct posts in first-seen order.
    pub fn posts(&self) -> Vec<&[String]> {
        let mut seen = HashSet::new();
        self.pairs
            .iter()
            .filter(|p| seen.insert(&p.post))
            .map(|p| p.post.as_slice())
            .collect()
    }

    pub fn num_posts(&self) -> usize {
        self.index.len()
    }

    pub fn responses_for(&self, post: &[String]) -> Vec<&[String]> {
        self.index
            .get(post)
            .map(|ids| ids.iter().map(|&i| self.pairs[i].response.as_slice()).collect())
            .unwrap_or_default()
    }

    /// Every token sequence on both sides, for vocabulary building.
    pub fn sentences(&self) -> impl Iterator<Item = &[String]> {
        self.pairs
            .iter()
            .flat_map(|p| [p.post.as_slice(), p.response.as_slice()])
    }

    pub fn responses(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.response.as_slice())
    }

    /// Drops every pair containing a token seen fewer than `min_count` times
    /// in this corpus.
    pub fn filter_min_freq(&self, min_count: u64) -> Result<Corpus, DataError> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for s in self.sentences() {
            for t in s {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let keep = |s: &[String]| s.iter().all(|t| counts[t.as_str()] >= min_count);
        let pairs = self
            .pairs
            .iter()
            .filter(|p| keep(&p.post) && keep(&p.response))
            .cloned()
            .collect();
        Corpus::new(self.split.clone(), pairs)
    }

    /// Tab-separated form, one pair per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(out, "{}\t{}", p.post.join(" "), p.response.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_tsv()).map_err(|e| DataError::io(path, e))
    }
}

/// Parses tab-separated `post<TAB>response` records. Blank lines are skipped;
/// a line without exactly one tab is a hard error; a record with an empty
/// side is counted as rejected and dropped.
pub fn parse_corpus(split: &str, text: &str) -> Result<(Corpus, LoadSummary), DataError> {
    let mut pairs = Vec::new();
    let mut summary = LoadSummary::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(DataError::Parse {
                line: n + 1,
                msg: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let pair = Pair::new(fields[0], fields[1]);
        if pair.post.is_empty() || pair.response.is_empty() {
            summary.rejected_empty += 1;
            continue;
        }
        pairs.push(pair);
    }
    summary.accepted = pairs.len();
    Ok((Corpus::new(split, pairs)?, summary))
}

pub fn load_corpus(path: &Path, split: &str) -> Result<(Corpus, LoadSummary), DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_corpus(split, &text)
}

/// Fails if any post appears in more than one of `splits`.
pub fn check_disjoint(splits: &[&Corpus]) -> Result<(), DataError> {
    let mut owner: HashMap<&[String], &str> = HashMap::new();
    for c in splits {
        for post in c.index.keys() {
            if let Some(prev) = owner.insert(post.as_slice(), &c.split) {
                if prev != c.split {
                    return Err(DataError::Contract(format!(
                        "post `{}` appears in both `{prev}` and `{}`",
                        post.join(" "),
                        c.split
                    )));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines_two_pairs() {
        let (c, s) = parse_corpus("train", "hello there\thi\nhow are you\tfine thanks\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(s.accepted, 2);
        assert_eq!(c.pairs()[1].response, vec!["fine", "thanks"]);
    }

    #[test]
    fn missing_field_reports_line() {
        let err = parse_corpus("train", "a\tb\nonly post\nc\td\n").unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn empty_fields_are_counted() {
        let (c, s) = parse_corpus("train", "a\t \n\tb\nx\ty\n").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(s.rejected_empty, 2);
    }

    #[test]
    fn repeated_post_indexes_all_responses() {
        let (c, _) = parse_corpus("train", "p q\tr1\nother\tz\np q\tr2\np q\tr3\np q\tr1\n").unwrap();
        assert_eq!(c.responses_for(&tokenize("p q")).len(), 4);
        assert_eq!(c.num_posts(), 2);
        assert_eq!(c.len(), 5);
    }

    #[test]
    fn post_with_three_responses() {
        let (c, _) = parse_corpus("train", "p\tr1\np\tr2\np\tr3\n").unwrap();
        let r = c.responses_for(&tokenize("p"));
        assert_eq!(r.len(), 3);
        assert_eq!(r[2], ["r3".to_string()]);
    }

    #[test]
    fn disjointness_check() {
        let a = Corpus::new("train", vec![Pair::new("x", "y")]).unwrap();
        let b = Corpus::new("test", vec![Pair::new("x", "z")]).unwrap();
        let c = Corpus::new("dev", vec![Pair::new("w", "z")]).unwrap();
        assert!(check_disjoint(&[&a, &c]).is_ok());
        assert!(check_disjoint(&[&a, &b]).is_err());
    }

    #[test]
    fn min_freq_filter_drops_rare_pairs() {
        let (c, _) = parse_corpus("train", "a b\tc\na b\tc\nrare\tc\n").unwrap();
        let f = c.filter_min_freq(2).unwrap();
        assert_eq!(f.len(), 2);
    }

    #[test]
    fn tsv_round_trip() {
        let (c, _) = parse_corpus("train", "a  b\tc\nd\te f\n").unwrap();
        let (back, _) = parse_corpus("train", &c.to_tsv()).unwrap();
        assert_eq!(c, back);
    }
}
