//! Labeled datasets, splitting and the synthetic FAQ corpus.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{KnowledgeBase, KnowledgeEntry};

/// One supervision record: does `kb_id` answer `query`?
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTriple {
    pub query: String,
    pub kb_id: String,
    pub label: u8,
}

#[derive(Debug, Deserialize)]
struct RawTriple {
    query: String,
    kb_id: String,
    label: i64,
}

/// Parses dataset JSON lines and checks every `kb_id` against `kb`.
pub fn parse_dataset(text: &str, kb: &KnowledgeBase) -> Result<Vec<LabeledTriple>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTriple = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let label = match raw.label {
            0 => 0,
            1 => 1,
            other => {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("label must be 0 or 1, found {other}"),
                })
            }
        };
        kb.resolve(&raw.kb_id)?;
        out.push(LabeledTriple {
            query: raw.query,
            kb_id: raw.kb_id,
            label,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, kb: &KnowledgeBase) -> Result<Vec<LabeledTriple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, kb)
}

pub fn dataset_to_jsonl(triples: &[LabeledTriple]) -> String {
    let mut out = String::new();
    for t in triples {
        out.push_str(&serde_json::to_string(t).expect("triple serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, triples: &[LabeledTriple]) -> Result<()> {
    fs::write(path, dataset_to_jsonl(triples)).map_err(|e| Error::io(path, e))
}

/// Train / validation / test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledTriple>,
    pub valid: Vec<LabeledTriple>,
    pub test: Vec<LabeledTriple>,
    pub seed: u64,
}

/// Seeded shuffle followed by a 60/20/20 partition.
pub fn split(triples: &[LabeledTriple], seed: u64) -> Result<Splits> {
    if triples.len() < 5 {
        return Err(Error::Argument(format!(
            "need at least 5 triples to split, got {}",
            triples.len()
        )));
    }
    let mut shuffled = triples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_valid = (n as f64 * 0.2).round() as usize;
    let test = shuffled.split_off(n_train + n_valid);
    let valid = shuffled.split_off(n_train);
    Ok(Splits {
        train: shuffled,
        valid,
        test,
        seed,
    })
}

/// Ratio of unrelated to related examples, the weight that balances the
/// two classes in the loss. 1.0 when either class is absent.
pub fn balanced_pos_weight(triples: &[LabeledTriple]) -> f64 {
    let pos = triples.iter().filter(|t| t.label == 1).count();
    let neg = triples.len() - pos;
    if pos == 0 || neg == 0 {
        1.0
    } else {
        neg as f64 / pos as f64
    }
}

// ---------------------------------------------------------------------------
// Synthetic FAQ corpus

/// (canonical form, paraphrase synonyms)
const ACTIONS: &[(&str, &[&str])] = &[
    ("cancel", &["stop", "abort", "call off"]),
    ("change", &["modify", "edit", "alter"]),
    ("track", &["trace", "follow"]),
    ("check", &["inspect", "look at"]),
    ("update", &["refresh", "renew"]),
    ("delete", &["remove", "erase"]),
    ("confirm", &["approve", "acknowledge"]),
    ("reset", &["restore", "reinitialize"]),
    ("find", &["search for", "look up"]),
    ("apply", &["use", "redeem"]),
    ("pause", &["suspend", "hold"]),
    ("extend", &["prolong", "lengthen"]),
    ("print", &["download", "export"]),
    ("report", &["flag", "complain about"]),
    ("split", &["divide", "separate"]),
    ("combine", &["merge", "join"]),
    ("dispute", &["contest", "challenge"]),
    ("request", &["ask for", "claim"]),
    ("upgrade", &["improve", "boost"]),
    ("transfer", &["move", "send"]),
    ("share", &["forward", "pass on"]),
    ("lock", &["freeze", "block"]),
    ("schedule", &["plan", "book"]),
    ("verify", &["validate", "double check"]),
];

const OBJECTS: &[(&str, &[&str])] = &[
    // orders
    ("order", &["purchase"]),
    ("cart", &["basket"]),
    ("coupon", &["voucher", "promo code"]),
    ("invoice", &["bill"]),
    ("receipt", &["proof of purchase"]),
    ("gift card", &["gift voucher"]),
    ("warranty", &["guarantee"]),
    // shipping
    ("package", &["parcel"]),
    ("delivery", &["shipment"]),
    ("courier", &["carrier"]),
    ("tracking code", &["waybill"]),
    ("shipping fee", &["postage"]),
    ("pickup point", &["collection point"]),
    // refunds
    ("refund", &["reimbursement", "money back"]),
    ("return label", &["return slip"]),
    ("exchange", &["swap"]),
    ("deposit", &["down payment"]),
    ("chargeback", &["bank reversal"]),
    ("store credit", &["shop credit"]),
    // accounts
    ("account", &["profile"]),
    ("password", &["passcode"]),
    ("email", &["mail address"]),
    ("phone number", &["mobile number"]),
    ("payment card", &["credit card", "bank card"]),
    ("username", &["login name"]),
    ("nickname", &["display name"]),
    ("subscription", &["membership"]),
    ("wishlist", &["saved items"]),
    ("review", &["rating"]),
    ("loyalty points", &["reward points"]),
];

const QUALIFIERS: &[&str] = &[
    "",
    "on the app",
    "on the website",
    "after payment",
    "before shipping",
    "from abroad",
];

const TITLE_TEMPLATES: &[&str] = &[
    "how do i {a} my {o} {q}",
    "how can i {a} my {o} {q}",
    "can i {a} my {o} {q}",
    "is it possible to {a} my {o} {q}",
    "where do i {a} my {o} {q}",
];

const QUERY_TEMPLATES: &[&str] = &[
    "how do i {a} my {o} {q}",
    "how to {a} {o} {q}",
    "{a} my {o} {q}",
    "i want to {a} my {o} {q}",
    "{o} {a} {q}",
    "need to {a} the {o} {q}",
    "please help me {a} my {o} {q}",
    "hi how can i {a} the {o} {q}",
];

const PLACES: &[&str] = &[
    "the orders page",
    "account settings",
    "the help center",
    "the details screen",
    "the wallet section",
    "the service menu",
];

const TAILS: &[&str] = &[
    "the change takes effect within one day",
    "contact support if the option is greyed out",
    "a confirmation message will follow",
    "there is no extra charge",
    "",
];

/// Particles the paraphraser may drop.
const DROPPABLE: &[&str] = &["do", "i", "my", "the", "to", "can", "me"];

/// Function words ignored when checking content overlap.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "after", "and", "at", "before", "can", "do", "for", "from", "help", "hi", "how",
    "i", "if", "is", "it", "me", "my", "need", "of", "on", "open", "please", "possible", "select",
    "tap", "the", "there", "to", "want", "where", "will", "with", "within", "you", "your",
];

/// Share of (action, object) intents kept out of the knowledge base; their
/// paraphrases become the unrelated queries.
const HELD_OUT_SHARE: f64 = 0.2;

fn fill(template: &str, action: &str, object: &str, qualifier: &str) -> String {
    template
        .replace("{a}", action)
        .replace("{o}", object)
        .replace("{q}", qualifier)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Intent {
    action: usize,
    object: usize,
    qualifier: usize,
}

/// Paraphrase and negative-sampling rates of the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    /// Probability that a paraphrase swaps the action for a synonym; the
    /// object is swapped with the same probability, never both.
    pub synonym_rate: f64,
    /// Probability of keeping the intent's qualifier in a paraphrase.
    pub qualifier_rate: f64,
    /// Probability of dropping each droppable particle.
    pub drop_rate: f64,
    /// Probability that an unrelated entry shares the query's object
    /// (and, with the same probability, its action) instead of being random.
    pub hard_negative_rate: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            synonym_rate: 0.3,
            qualifier_rate: 0.5,
            drop_rate: 0.3,
            hard_negative_rate: 0.4,
        }
    }
}

/// A generated knowledge base with its labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub kb: KnowledgeBase,
    pub triples: Vec<LabeledTriple>,
}

impl SyntheticCorpus {
    pub const KB_FILE: &'static str = "kb.jsonl";
    pub const DATASET_FILE: &'static str = "dataset.jsonl";

    /// Writes `kb.jsonl` and `dataset.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let kb_path = dir.join(Self::KB_FILE);
        fs::write(&kb_path, self.kb.to_jsonl()).map_err(|e| Error::io(&kb_path, e))?;
        save_dataset(&dir.join(Self::DATASET_FILE), &self.triples)
    }
}

pub fn generate_synthetic(seed: u64, n_entries: usize, n_queries: usize) -> Result<SyntheticCorpus> {
    generate_synthetic_with(seed, n_entries, n_queries, SynthOptions::default())
}

/// Deterministic templated FAQ corpus over orders, shipping, refunds and
/// accounts.
///
/// Every knowledge entry is one intent (action, object, qualifier). Each of
/// the `n_queries` labeled queries yields one triple. Half are related: a
/// paraphrase of an entry's title paired with that entry. The other half are
/// unrelated: a paraphrase of an intent that has no entry, paired with an
/// existing entry. No entry answers an unrelated query, so judgments are
/// complete.
pub fn generate_synthetic_with(
    seed: u64,
    n_entries: usize,
    n_queries: usize,
    opts: SynthOptions,
) -> Result<SyntheticCorpus> {
    if n_entries < 10 || n_queries < 10 {
        return Err(Error::Argument(format!(
            "need at least 10 entries and 10 queries, got {n_entries} and {n_queries}"
        )));
    }
    let n_pairs = ACTIONS.len() * OBJECTS.len();
    let n_held_out = (n_pairs as f64 * HELD_OUT_SHARE).round() as usize;
    let kb_pairs = n_pairs - n_held_out;
    let max_entries = kb_pairs * QUALIFIERS.len();
    if n_entries > max_entries {
        return Err(Error::Argument(format!(
            "the templates support at most {max_entries} entries"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pairs: Vec<(usize, usize)> = (0..ACTIONS.len())
        .flat_map(|a| (0..OBJECTS.len()).map(move |o| (a, o)))
        .collect();
    pairs.shuffle(&mut rng);
    let held_out: Vec<Intent> = pairs[kb_pairs..]
        .iter()
        .map(|&(action, object)| Intent {
            action,
            object,
            qualifier: rng.gen_range(0..QUALIFIERS.len()),
        })
        .collect();

    // every pair is used once before any pair repeats with another qualifier
    let qualifier_orders: Vec<Vec<usize>> = (0..kb_pairs)
        .map(|_| {
            let mut q: Vec<usize> = (0..QUALIFIERS.len()).collect();
            q.shuffle(&mut rng);
            q
        })
        .collect();
    let intents: Vec<Intent> = (0..n_entries)
        .map(|i| {
            let (action, object) = pairs[i % kb_pairs];
            Intent {
                action,
                object,
                qualifier: qualifier_orders[i % kb_pairs][i / kb_pairs],
            }
        })
        .collect();

    let entries: Vec<KnowledgeEntry> = intents
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (a, o, q) = (
                ACTIONS[s.action].0,
                OBJECTS[s.object].0,
                QUALIFIERS[s.qualifier],
            );
            let title = fill(TITLE_TEMPLATES.choose(&mut rng).unwrap(), a, o, q);
            let answer = fill(
                &format!(
                    "to {{a}} your {{o}} {{q}} open {} select the {{o}} and tap {{a}} {}",
                    PLACES.choose(&mut rng).unwrap(),
                    TAILS.choose(&mut rng).unwrap()
                ),
                a,
                o,
                q,
            );
            KnowledgeEntry {
                id: format!("kb{i:05}"),
                title,
                answer,
            }
        })
        .collect();

    let mut labels: Vec<u8> = (0..n_queries).map(|i| u8::from(i < n_queries / 2)).collect();
    labels.shuffle(&mut rng);
    let mut triples = Vec::with_capacity(n_queries);
    let mut seen = HashSet::new();
    let mut attempts = 0;
    let mut next = 0;
    while next < n_queries {
        attempts += 1;
        let label = labels[next];
        let (intent, target) = if label == 1 {
            let x = rng.gen_range(0..n_entries);
            (intents[x], x)
        } else {
            let z = *held_out.choose(&mut rng).unwrap();
            (z, pick_unrelated(&intents, &z, opts, &mut rng))
        };
        let query = paraphrase(&intent, opts, &mut rng);
        // distinct query texts unless the paraphrase space is exhausted
        if !seen.insert(query.clone()) && attempts < 50 * n_queries {
            continue;
        }
        triples.push(LabeledTriple {
            query,
            kb_id: entries[target].id.clone(),
            label,
        });
        next += 1;
    }

    Ok(SyntheticCorpus {
        kb: KnowledgeBase::new(entries)?,
        triples,
    })
}

/// Synonym swap of at most one of action/object, template reorder, optional
/// qualifier and random particle drops.
fn paraphrase(intent: &Intent, opts: SynthOptions, rng: &mut ChaCha8Rng) -> String {
    let (action, action_syn) = ACTIONS[intent.action];
    let (object, object_syn) = OBJECTS[intent.object];
    let r: f64 = rng.gen();
    let (a, o) = if r < opts.synonym_rate {
        (*action_syn.choose(rng).unwrap(), object)
    } else if r < 2.0 * opts.synonym_rate {
        (action, *object_syn.choose(rng).unwrap())
    } else {
        (action, object)
    };
    let q = if rng.gen_bool(opts.qualifier_rate) {
        QUALIFIERS[intent.qualifier]
    } else {
        ""
    };
    let text = fill(QUERY_TEMPLATES.choose(rng).unwrap(), a, o, q);
    let kept: Vec<&str> = text
        .split_whitespace()
        .filter(|w| !(DROPPABLE.contains(w) && rng.gen_bool(opts.drop_rate)))
        .collect();
    kept.join(" ")
}

/// An entry for an intent without an entry: usually one sharing its object
/// or its action.
fn pick_unrelated(
    intents: &[Intent],
    z: &Intent,
    opts: SynthOptions,
    rng: &mut ChaCha8Rng,
) -> usize {
    let r: f64 = rng.gen();
    let candidates: Vec<usize> = if r < opts.hard_negative_rate {
        (0..intents.len()).filter(|&i| intents[i].object == z.object).collect()
    } else if r < 2.0 * opts.hard_negative_rate {
        (0..intents.len()).filter(|&i| intents[i].action == z.action).collect()
    } else {
        Vec::new()
    };
    match candidates.choose(rng) {
        Some(&c) => c,
        None => rng.gen_range(0..intents.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, TokenizerMode};

    fn kb() -> KnowledgeBase {
        KnowledgeBase::new(vec![
            KnowledgeEntry {
                id: "a".into(),
                title: "t".into(),
                answer: "x".into(),
            },
            KnowledgeEntry {
                id: "b".into(),
                title: "u".into(),
                answer: "y".into(),
            },
        ])
        .unwrap()
    }

    fn triples(n: usize) -> Vec<LabeledTriple> {
        (0..n)
            .map(|i| LabeledTriple {
                query: format!("q{i}"),
                kb_id: "a".into(),
                label: (i % 2) as u8,
            })
            .collect()
    }

    #[test]
    fn parse_dataset_examples() {
        assert!(parse_dataset("", &kb()).unwrap().is_empty());
        let text = "{\"query\":\"x\",\"kb_id\":\"a\",\"label\":1}\n\
                    {\"query\":\"y\",\"kb_id\":\"b\",\"label\":0}\n\
                    {\"query\":\"z\",\"kb_id\":\"a\",\"label\":0}\n";
        let parsed = parse_dataset(text, &kb()).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[1].query, "y");
        assert_eq!(parse_dataset(&dataset_to_jsonl(&parsed), &kb()).unwrap(), parsed);

        let bad = "{\"query\":\"x\",\"kb_id\":\"a\",\"label\":1}\n{\"query\":\"x\",\"kb_id\":\"a\",\"label\":2}\n";
        assert!(matches!(parse_dataset(bad, &kb()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_dataset("{oops\n", &kb()), Err(Error::Parse { line: 1, .. })));
        let unknown = "{\"query\":\"x\",\"kb_id\":\"zz\",\"label\":1}\n";
        assert!(matches!(parse_dataset(unknown, &kb()), Err(Error::Data(m)) if m.contains("zz")));
    }

    #[test]
    fn split_proportions_and_determinism() {
        let data = triples(10);
        let s = split(&data, 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (6, 2, 2));
        assert_eq!(split(&data, 3).unwrap(), s);
        assert!(split(&triples(4), 3).is_err());

        let base = split(&data, 0).unwrap();
        assert!((1..=20).any(|seed| split(&data, seed).unwrap().train != base.train));
    }

    #[test]
    fn split_is_a_partition() {
        for n in [5, 7, 11, 50, 123] {
            let data = triples(n);
            let s = split(&data, n as u64).unwrap();
            let expect = |p: f64| n as f64 * p;
            assert!((s.train.len() as f64 - expect(0.6)).abs() <= 1.0);
            assert!((s.valid.len() as f64 - expect(0.2)).abs() <= 1.0);
            assert!((s.test.len() as f64 - expect(0.2)).abs() <= 1.0);
            let mut all: Vec<_> = s.train.iter().chain(&s.valid).chain(&s.test).cloned().collect();
            all.sort_by(|a, b| a.query.cmp(&b.query));
            let mut orig = data.clone();
            orig.sort_by(|a, b| a.query.cmp(&b.query));
            assert_eq!(all, orig);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let a = generate_synthetic(42, 60, 40).unwrap();
        let b = generate_synthetic(42, 60, 40).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(43, 60, 40).unwrap());
        assert_eq!(a.kb.len(), 60);
        assert_eq!(a.triples.len(), 40);
        let reparsed = parse_dataset(&dataset_to_jsonl(&a.triples), &a.kb).unwrap();
        assert_eq!(reparsed, a.triples);
        assert!(generate_synthetic(1, 9, 40).is_err());
        assert!(generate_synthetic(1, 10, 9).is_err());
    }

    #[test]
    fn synthetic_balance_and_overlap() {
        let c = generate_synthetic(42, 500, 300).unwrap();
        let related = c.triples.iter().filter(|t| t.label == 1).count();
        let frac = related as f64 / c.triples.len() as f64;
        assert!((frac - 0.5).abs() <= 0.05, "{frac}");
        for t in c.triples.iter().filter(|t| t.label == 1) {
            let e = c.kb.get(&t.kb_id).unwrap();
            let entry_tokens: HashSet<String> = tokenize(&e.title, TokenizerMode::Whitespace)
                .into_iter()
                .chain(tokenize(&e.answer, TokenizerMode::Whitespace))
                .collect();
            let shared = tokenize(&t.query, TokenizerMode::Whitespace)
                .into_iter()
                .filter(|w| !STOPWORDS.contains(&w.as_str()))
                .any(|w| entry_tokens.contains(&w));
            assert!(shared, "no content overlap: {t:?} vs {e:?}");
        }
    }

    #[test]
    fn large_corpora_use_qualifier_variants() {
        let c = generate_synthetic(5, 700, 10).unwrap();
        let titles: HashSet<_> = c.kb.entries().iter().map(|e| e.title.clone()).collect();
        assert!(titles.len() > 500);
    }

    #[test]
    fn pos_weight_balances_classes() {
        let mut data = triples(10);
        data[0].label = 1;
        // labels: 1,1,0,1,0,1,0,1,0,1 → 6 related, 4 unrelated
        assert!((balanced_pos_weight(&data) - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(balanced_pos_weight(&data[..0]), 1.0);
    }
}
