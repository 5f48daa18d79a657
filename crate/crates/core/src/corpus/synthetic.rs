//! Template grammar that plants known sentiment words, giving exact ground
//! truth for mask positions, word polarities and transfer references.
//!
//! Grammar files are `key = value` lines; `#` starts a comment:
//!
//! ```text
//! seed = 7
//! template = {SENT} {FILL} and {SENT} {FILL}
//! template = the {FILL} was {SENT}
//! positive = fresh good great
//! negative = stale poor bad
//! filler = food service staff
//! ```
//!
//! `template` may repeat. `positive[i]` and `negative[i]` are antonym pairs
//! used to build oracle references.
//!
//! With `collocate = true` (the default) each `{SENT}` slot is bound to the
//! nearest `{FILL}` slot (the earlier one on a tie) and takes the antonym pair
//! `i mod |lexicon|` of that filler word `filler[i]`, so a sentiment word is
//! recoverable from its noun and the label. With `collocate = false` sentiment
//! words are drawn uniformly.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tokenize, Label, Polarity, Sentence};
use crate::error::{invalid, Error, Result};

const SENT_SLOT: &str = "{SENT}";
const FILL_SLOT: &str = "{FILL}";

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Word(String),
    Sent,
    Fill,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticGrammar {
    templates: Vec<Vec<Piece>>,
    positive: Vec<String>,
    negative: Vec<String>,
    filler: Vec<String>,
    pub seed: u64,
    pub collocate: bool,
}

/// A generated sentence with its planted sentiment positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSentence {
    pub sentence: Sentence,
    /// Sorted positions holding lexicon sentiment words.
    pub planted: Vec<usize>,
    /// Gold word-level polarity per position.
    pub polarity: Vec<Polarity>,
}

fn words(s: &str) -> Vec<String> {
    tokenize(s)
}

impl SyntheticGrammar {
    pub fn new(
        templates: &[&str],
        positive: &[&str],
        negative: &[&str],
        filler: &[&str],
        seed: u64,
    ) -> Result<Self> {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_lowercase()).collect::<Vec<_>>();
        let templates = templates
            .iter()
            .map(|t| parse_template(t))
            .collect::<Result<Vec<_>>>()?;
        let g = SyntheticGrammar {
            templates,
            positive: own(positive),
            negative: own(negative),
            filler: own(filler),
            seed,
            collocate: true,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(invalid("grammar has no templates"));
        }
        if self.positive.is_empty() || self.negative.is_empty() || self.filler.is_empty() {
            return Err(invalid("grammar lexicons must be non-empty"));
        }
        let pos: HashSet<&str> = self.positive.iter().map(String::as_str).collect();
        let neg: HashSet<&str> = self.negative.iter().map(String::as_str).collect();
        let fill: HashSet<&str> = self.filler.iter().map(String::as_str).collect();
        if !pos.is_disjoint(&neg) || !pos.is_disjoint(&fill) || !neg.is_disjoint(&fill) {
            return Err(invalid("positive, negative and filler lexicons must be disjoint"));
        }
        for t in &self.templates {
            if !t.contains(&Piece::Sent) {
                return Err(invalid("every template needs at least one {SENT} slot"));
            }
            for p in t {
                if let Piece::Word(w) = p {
                    if pos.contains(w.as_str()) || neg.contains(w.as_str()) {
                        return Err(invalid(format!(
                            "template word `{w}` is a sentiment lexicon entry"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn positive(&self) -> &[String] {
        &self.positive
    }

    pub fn negative(&self) -> &[String] {
        &self.negative
    }

    pub fn filler(&self) -> &[String] {
        &self.filler
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn lexicon(&self, label: Label) -> &[String] {
        match label {
            Label::Positive => &self.positive,
            Label::Negative => &self.negative,
        }
    }

    /// Polarity of a single word according to the lexicons.
    pub fn word_polarity(&self, word: &str) -> Polarity {
        if self.positive.iter().any(|w| w == word) {
            Polarity::Positive
        } else if self.negative.iter().any(|w| w == word) {
            Polarity::Negative
        } else {
            Polarity::Neutral
        }
    }

    /// Majority vote of lexicon hits; `None` on a tie (including no hits).
    pub fn judge(&self, tokens: &[String]) -> Option<Label> {
        let (mut p, mut n) = (0usize, 0usize);
        for t in tokens {
            match self.word_polarity(t) {
                Polarity::Positive => p += 1,
                Polarity::Negative => n += 1,
                Polarity::Neutral => {}
            }
        }
        match p.cmp(&n) {
            std::cmp::Ordering::Greater => Some(Label::Positive),
            std::cmp::Ordering::Less => Some(Label::Negative),
            std::cmp::Ordering::Equal => None,
        }
    }

    /// Oracle reference: every sentiment word swapped for its antonym in the
    /// `target` lexicon.
    pub fn reference(&self, tokens: &[String], target: Label) -> Vec<String> {
        let (from, to) = match target {
            Label::Positive => (&self.negative, &self.positive),
            Label::Negative => (&self.positive, &self.negative),
        };
        tokens
            .iter()
            .map(|t| match from.iter().position(|w| w == t) {
                Some(i) => to[i % to.len()].clone(),
                None => t.clone(),
            })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut templates = Vec::new();
        let (mut pos, mut neg, mut fill) = (Vec::new(), Vec::new(), Vec::new());
        let mut seed = None;
        let mut collocate = true;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("grammar line {}: expected key = value", i + 1)))?;
            let value = value.trim();
            match key.trim() {
                "template" => templates.push(value.to_string()),
                "positive" => pos.extend(words(value)),
                "negative" => neg.extend(words(value)),
                "filler" => fill.extend(words(value)),
                "seed" => {
                    seed = Some(value.parse::<u64>().map_err(|_| {
                        invalid(format!("grammar line {}: bad seed `{value}`", i + 1))
                    })?)
                }
                "collocate" => {
                    collocate = value.parse::<bool>().map_err(|_| {
                        invalid(format!("grammar line {}: bad collocate `{value}`", i + 1))
                    })?
                }
                other => {
                    return Err(invalid(format!("grammar line {}: unknown key `{other}`", i + 1)))
                }
            }
        }
        let t: Vec<&str> = templates.iter().map(String::as_str).collect();
        fn r(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        let mut g = SyntheticGrammar::new(&t, &r(&pos), &r(&neg), &r(&fill), seed.unwrap_or(0))?;
        g.collocate = collocate;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SyntheticGrammar::from_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("seed = {}\ncollocate = {}\n", self.seed, self.collocate);
        for t in &self.templates {
            let rendered: Vec<&str> = t
                .iter()
                .map(|p| match p {
                    Piece::Word(w) => w.as_str(),
                    Piece::Sent => SENT_SLOT,
                    Piece::Fill => FILL_SLOT,
                })
                .collect();
            out.push_str(&format!("template = {}\n", rendered.join(" ")));
        }
        out.push_str(&format!("positive = {}\n", self.positive.join(" ")));
        out.push_str(&format!("negative = {}\n", self.negative.join(" ")));
        out.push_str(&format!("filler = {}\n", self.filler.join(" ")));
        out
    }

    /// Restaurant-review grammar with roughly 200 distinct words.
    pub fn restaurant(seed: u64) -> Self {
        SyntheticGrammar::new(
            DEFAULT_TEMPLATES,
            DEFAULT_POSITIVE,
            DEFAULT_NEGATIVE,
            DEFAULT_FILLER,
            seed,
        )
        .expect("built-in grammar is valid")
    }

    fn render(&self, template: &[Piece], label: Label, rng: &mut ChaCha8Rng) -> SyntheticSentence {
        let lex = self.lexicon(label);
        let fills: Vec<Option<usize>> = template
            .iter()
            .map(|p| (*p == Piece::Fill).then(|| rng.random_range(0..self.filler.len())))
            .collect();
        let mut tokens = Vec::with_capacity(template.len());
        let mut planted = Vec::new();
        let mut polarity = Vec::with_capacity(template.len());
        for (pos, piece) in template.iter().enumerate() {
            match piece {
                Piece::Word(w) => {
                    tokens.push(w.clone());
                    polarity.push(Polarity::Neutral);
                }
                Piece::Sent => {
                    let bound = if self.collocate { nearest_fill(&fills, pos) } else { None };
                    let index = match bound {
                        Some(f) => f % lex.len(),
                        None => rng.random_range(0..lex.len()),
                    };
                    planted.push(tokens.len());
                    tokens.push(lex[index].clone());
                    polarity.push(Polarity::of_label(label));
                }
                Piece::Fill => {
                    tokens.push(self.filler[fills[pos].expect("filler drawn")].clone());
                    polarity.push(Polarity::Neutral);
                }
            }
        }
        SyntheticSentence {
            sentence: Sentence { tokens, label },
            planted,
            polarity,
        }
    }
}

/// Filler index of the `{FILL}` slot closest to `pos`, preferring the earlier one.
fn nearest_fill(fills: &[Option<usize>], pos: usize) -> Option<usize> {
    fills
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.map(|f| (i.abs_diff(pos), i, f)))
        .min_by_key(|&(d, i, _)| (d, i))
        .map(|(_, _, f)| f)
}

fn parse_template(t: &str) -> Result<Vec<Piece>> {
    let pieces: Vec<Piece> = t
        .split_whitespace()
        .map(|w| match w {
            SENT_SLOT => Piece::Sent,
            FILL_SLOT => Piece::Fill,
            other => Piece::Word(other.to_lowercase()),
        })
        .collect();
    if pieces.is_empty() {
        return Err(invalid("empty template"));
    }
    Ok(pieces)
}

/// Generates `count` sentences, exactly balanced between labels (the odd one
/// out is positive), in an order fixed by `g.seed`.
pub fn generate_synthetic_corpus(g: &SyntheticGrammar, count: usize) -> Result<Vec<SyntheticSentence>> {
    if count == 0 {
        return Err(Error::EmptyInput("synthetic corpus size must be at least 1".into()));
    }
    g.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut labels: Vec<Label> = (0..count)
        .map(|i| if i < count.div_ceil(2) { Label::Positive } else { Label::Negative })
        .collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .map(|label| {
            let template = g.templates.choose(&mut rng).expect("non-empty templates");
            g.render(template, label, &mut rng)
        })
        .collect())
}

const DEFAULT_TEMPLATES: &[&str] = &[
    "{SENT} {FILL} and {SENT} {FILL}",
    "the {FILL} was {SENT}",
    "the {FILL} was {SENT} and the {FILL} was {SENT}",
    "we had {SENT} {FILL} at this place",
    "their {FILL} is always {SENT}",
    "i thought the {FILL} was {SENT}",
    "{SENT} {FILL} with {FILL} on the side",
    "my {FILL} came {SENT} and the {FILL} was {SENT}",
    "the {FILL} here is {SENT}",
    "overall a {SENT} {FILL} experience",
    "the {FILL} and the {FILL} were {SENT}",
    "what a {SENT} {FILL}",
    "they served {SENT} {FILL} with our {FILL}",
    "the {FILL} is {SENT} for the {FILL}",
];

const DEFAULT_POSITIVE: &[&str] = &[
    "fresh",
    "good",
    "great",
    "excellent",
    "wonderful",
    "friendly",
    "fast",
    "warm",
    "clean",
    "tasty",
    "amazing",
    "delightful",
    "superb",
    "affordable",
    "delicious",
    "helpful",
    "fun",
    "cozy",
    "best",
    "crispy",
];

const DEFAULT_NEGATIVE: &[&str] = &[
    "stale",
    "poor",
    "bad",
    "awful",
    "terrible",
    "rude",
    "slow",
    "cold",
    "dirty",
    "bland",
    "horrible",
    "disappointing",
    "mediocre",
    "overpriced",
    "greasy",
    "unhelpful",
    "boring",
    "noisy",
    "worst",
    "soggy",
];

const DEFAULT_FILLER: &[&str] = &[
    "food", "service", "staff", "menu", "pizza", "burger", "salad", "pasta", "coffee", "tea",
    "soup", "steak", "chicken", "fish", "rice", "noodles", "bread", "dessert", "cake", "pie",
    "sandwich", "fries", "sushi", "tacos", "waiter", "waitress", "manager", "owner", "chef",
    "bartender", "host", "cashier", "table", "booth", "patio", "bar", "counter", "kitchen",
    "lobby", "room", "view", "music", "atmosphere", "decor", "lighting", "parking", "location",
    "price", "portion", "drink", "beer", "wine", "cocktail", "juice", "water", "breakfast",
    "lunch", "dinner", "brunch", "buffet", "appetizer", "entree", "sauce", "salsa", "cheese",
    "bacon", "eggs", "pancakes", "waffles", "omelette", "bagel", "muffin", "croissant", "donut",
    "smoothie", "milkshake", "yogurt", "fruit", "vegetables", "beans", "corn", "potatoes",
    "shrimp", "lobster", "crab", "oysters", "salmon", "tuna", "pork", "lamb", "beef", "turkey",
    "ham", "sausage", "wings", "ribs", "brisket", "curry", "dumplings", "ramen", "pho",
    "burrito", "quesadilla", "nachos", "hummus", "falafel", "kebab", "gyro", "lasagna",
    "risotto", "gnocchi", "ravioli", "tortilla", "pretzel", "popcorn", "cookie", "brownie",
    "cupcake", "tart", "pudding", "espresso", "latte", "cappuccino", "mocha", "lemonade", "soda",
    "cider", "hotel", "pool", "gym", "lounge", "spa", "shop", "store", "bakery", "cafe", "diner",
    "bistro", "pub", "grill", "deli", "truck", "terrace", "garden",
];
