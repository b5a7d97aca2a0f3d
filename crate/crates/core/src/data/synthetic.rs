//! Template-grammar corpus with the 1-to-n shape of real chat data.
//!
//! Every post names one topic noun and carries a sentiment. Each post gets a
//! random number of distinct responses, all of which repeat the post's topic
//! noun and use adjectives of the matching sentiment. Within a topic and
//! sentiment, response popularity falls off as `1 / rank` over a seeded
//! ranking, so a few replies recur across many posts while most are rare.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{Corpus, Pair};
use super::DataError;

pub const TOPICS: [&str; 16] = [
    "coffee", "music", "football", "rain", "cats", "pizza", "movies", "summer", "trains",
    "books", "chess", "beach", "snow", "tea", "games", "dogs",
];

const SUBJECTS: [&str; 6] = ["i", "my friend", "my sister", "we", "everyone", "my boss"];
const VERBS_POS: [&str; 4] = ["love", "enjoy", "like", "adore"];
const VERBS_NEG: [&str; 4] = ["hate", "dislike", "fear", "avoid"];
const TIMES: [&str; 6] = ["today", "tonight", "again", "so much", "every day", "this week"];
const MODIFIERS: [&str; 4] = ["lol", "honestly", "!", "..."];

const ADJ_POS: [&str; 5] = ["great", "wonderful", "amazing", "lovely", "nice"];
const ADJ_NEG: [&str; 5] = ["awful", "terrible", "boring", "annoying", "bad"];
const INTERJ: [&str; 4] = ["wow", "haha", "yeah", "oh"];
const TAILS: [&str; 4] = ["", "for sure", "to me", "right"];

/// `{t}` is the topic, `{a}` the adjective, `{i}` an interjection.
const TEMPLATES: [&str; 6] = [
    "the {t} is {a}",
    "{t} is so {a}",
    "i think {t} is {a} too",
    "{i} {t} is {a}",
    "yes the {t} is really {a}",
    "{i} the {t} was {a}",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl SyntheticSplits {
    pub fn all(&self) -> [&Corpus; 3] {
        [&self.train, &self.dev, &self.test]
    }
}

fn response_pool(topic: &str, positive: bool) -> Vec<String> {
    let adjs = if positive { &ADJ_POS } else { &ADJ_NEG };
    let mut pool = BTreeSet::new();
    for tpl in TEMPLATES {
        for a in adjs {
            let interjs: &[&str] = if tpl.contains("{i}") { &INTERJ } else { &[""] };
            for i in interjs {
                for tail in TAILS {
                    let s = tpl.replace("{t}", topic).replace("{a}", a).replace("{i}", i);
                    pool.insert(format!("{s} {tail}").trim().to_string());
                }
            }
        }
    }
    pool.into_iter().collect()
}

/// Generates `n_posts` distinct posts with on average `mean_responses`
/// responses each (uniform in `mean ± mean/2`), split 80/10/10 by post.
pub fn gen_synthetic(seed: u64, n_posts: usize, mean_responses: usize) -> Result<SyntheticSplits, DataError> {
    if n_posts < 3 {
        return Err(DataError::Contract("at least 3 posts are needed for three splits".into()));
    }
    if mean_responses == 0 {
        return Err(DataError::Contract("mean_responses must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = SUBJECTS.len() * 8 * TOPICS.len() * TIMES.len() * (MODIFIERS.len() + 1);
    if n_posts > capacity {
        return Err(DataError::Contract(format!(
            "the grammar only yields {capacity} distinct posts"
        )));
    }

    let pools: Vec<[Vec<String>; 2]> = TOPICS
        .iter()
        .map(|t| {
            let mut neg = response_pool(t, false);
            let mut pos = response_pool(t, true);
            neg.shuffle(&mut rng);
            pos.shuffle(&mut rng);
            [neg, pos]
        })
        .collect();
    let max_pool = pools.iter().flatten().map(Vec::len).min().unwrap_or(0);

    let mut seen = BTreeSet::new();
    let mut posts = Vec::with_capacity(n_posts);
    while posts.len() < n_posts {
        let topic = rng.random_range(0..TOPICS.len());
        let positive = rng.random_bool(0.5);
        let verbs = if positive { &VERBS_POS } else { &VERBS_NEG };
        let mut text = format!(
            "{} {} the {} {}",
            SUBJECTS.choose(&mut rng).unwrap(),
            verbs.choose(&mut rng).unwrap(),
            TOPICS[topic],
            TIMES.choose(&mut rng).unwrap()
        );
        if rng.random_bool(0.5) {
            text.push(' ');
            text.push_str(MODIFIERS.choose(&mut rng).unwrap());
        }
        if seen.insert(text.clone()) {
            posts.push((text, topic, positive));
        }
    }

    let half = mean_responses / 2;
    let (lo, hi) = (mean_responses - half, (mean_responses + half).min(max_pool));
    let mut grouped: Vec<Vec<Pair>> = Vec::with_capacity(n_posts);
    for (post, topic, positive) in &posts {
        let n = rng.random_range(lo..=hi.max(lo));
        let pool = &pools[*topic][usize::from(*positive)];
        let ranks: Vec<usize> = (0..pool.len()).collect();
        let mut picks: Vec<usize> = ranks
            .choose_multiple_weighted(&mut rng, n, |&r| 1.0 / (r + 1) as f64)
            .expect("weights are positive and finite")
            .copied()
            .collect();
        picks.sort_unstable();
        grouped.push(picks.into_iter().map(|r| Pair::new(post, &pool[r])).collect());
    }

    let n_test = (n_posts / 10).max(1);
    let n_dev = (n_posts / 10).max(1);
    let n_train = n_posts - n_test - n_dev;
    let mut order: Vec<usize> = (0..n_posts).collect();
    order.shuffle(&mut rng);
    let take = |range: std::ops::Range<usize>| -> Vec<Pair> {
        let mut ids: Vec<usize> = order[range].to_vec();
        ids.sort_unstable();
        ids.into_iter().flat_map(|i| grouped[i].clone()).collect()
    };
    Ok(SyntheticSplits {
        train: Corpus::new("train", take(0..n_train))?,
        dev: Corpus::new("dev", take(n_train..n_train + n_dev))?,
        test: Corpus::new("test", take(n_train + n_dev..n_posts))?,
    })
}

/// The topic noun a synthetic sentence mentions, if any.
pub fn topic_of(tokens: &[String]) -> Option<&'static str> {
    TOPICS.iter().copied().find(|t| tokens.iter().any(|w| w == t))
}
