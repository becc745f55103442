//! Knowledge base and fielded BM25 candidate retrieval.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::text::{hex_digest, tokenize, TokenizerMode};

/// One knowledge entry: a canonical question (title) and its answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: String,
    pub title: String,
    pub answer: String,
}

/// Knowledge entries with unique ids, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<KnowledgeEntry>,
    by_id: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(entries: Vec<KnowledgeEntry>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.title.trim().is_empty() {
                return Err(Error::Data(format!("knowledge entry '{}' has an empty title", e.id)));
            }
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate knowledge entry id '{}'", e.id)));
            }
        }
        Ok(KnowledgeBase { entries, by_id })
    }

    /// Reads JSON lines with keys `id`, `title`, `answer`. Blank lines are skipped.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: KnowledgeEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    /// Like [`KnowledgeBase::get`] but a data error naming the id if absent.
    pub fn resolve(&self, id: &str) -> Result<&KnowledgeEntry> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("unknown knowledge entry id '{id}'")))
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Hex SHA-256 over the tokenizer mode and the sorted set of terms in
    /// all titles and answers. Two artifacts built from the same knowledge
    /// base with the same tokenizer share this value.
    pub fn term_fingerprint(&self, mode: TokenizerMode) -> String {
        let mut terms = BTreeSet::new();
        for e in &self.entries {
            terms.extend(tokenize(&e.title, mode));
            terms.extend(tokenize(&e.answer, mode));
        }
        let mut blob = format!("{mode}\n");
        for t in terms {
            blob.push_str(&t);
            blob.push('\n');
        }
        hex_digest(blob.as_bytes())
    }
}

pub const TITLE_FIELD: usize = 0;
pub const ANSWER_FIELD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    /// Weights of the title and answer fields.
    pub field_weights: [f64; 2],
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: 1.2,
            b: 0.75,
            field_weights: [2.0, 1.0],
        }
    }
}

/// Default number of candidates handed to the reranker.
pub const DEFAULT_TOP_K: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub field: u8,
    pub tf: u32,
}

/// Inverted index over the title and answer fields of a knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    pub params: Bm25Params,
    pub mode: TokenizerMode,
    doc_ids: Vec<String>,
    field_lengths: Vec<[u32; 2]>,
    avg_lengths: [f64; 2],
    /// Per term, postings sorted by (doc, field).
    postings: BTreeMap<String, Vec<Posting>>,
    fingerprint: String,
}

impl Bm25Index {
    pub fn build(kb: &KnowledgeBase, mode: TokenizerMode, params: Bm25Params) -> Self {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut field_lengths = Vec::with_capacity(kb.len());
        let mut totals = [0u64; 2];
        for (doc, e) in kb.entries().iter().enumerate() {
            let mut lens = [0u32; 2];
            for (field, text) in [(TITLE_FIELD, &e.title), (ANSWER_FIELD, &e.answer)] {
                let tokens = tokenize(text, mode);
                lens[field] = tokens.len() as u32;
                totals[field] += tokens.len() as u64;
                let mut tf: BTreeMap<String, u32> = BTreeMap::new();
                for t in tokens {
                    *tf.entry(t).or_default() += 1;
                }
                for (term, tf) in tf {
                    postings.entry(term).or_default().push(Posting {
                        doc: doc as u32,
                        field: field as u8,
                        tf,
                    });
                }
            }
            field_lengths.push(lens);
        }
        for list in postings.values_mut() {
            list.sort_by_key(|p| (p.doc, p.field));
        }
        let n = kb.len().max(1) as f64;
        Bm25Index {
            params,
            mode,
            doc_ids: kb.entries().iter().map(|e| e.id.clone()).collect(),
            field_lengths,
            avg_lengths: [totals[0] as f64 / n, totals[1] as f64 / n],
            postings,
            fingerprint: kb.term_fingerprint(mode),
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    /// Term fingerprint of the knowledge base the index was built from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn idf(n: f64, df: f64) -> f64 {
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-`k` entries by fielded BM25 score; ties by ascending id.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<(String, f64)>> {
        if k < 1 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        let n = self.doc_count() as f64;
        let Bm25Params {
            k1,
            b,
            field_weights,
        } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in tokenize(query, self.mode) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let mut df = [0usize; 2];
            for p in list {
                df[p.field as usize] += 1;
            }
            for p in list {
                let f = p.field as usize;
                if field_weights[f] == 0.0 {
                    continue;
                }
                let idf = Self::idf(n, df[f] as f64);
                let len = f64::from(self.field_lengths[p.doc as usize][f]);
                let tf = f64::from(p.tf);
                let norm = tf * (k1 + 1.0)
                    / (tf + k1 * (1.0 - b + b * len / self.avg_lengths[f]));
                *scores.entry(p.doc).or_default() += field_weights[f] * idf * norm;
            }
        }
        let mut ranked: Vec<(String, f64)> = scores
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(d, s)| (self.doc_ids[d as usize].clone(), s))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked)
    }

    const MAGIC: &'static [u8; 4] = b"TBM5";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(Self::MAGIC);
        w.u32(Self::VERSION);
        w.f64(self.params.k1);
        w.f64(self.params.b);
        w.f64(self.params.field_weights[0]);
        w.f64(self.params.field_weights[1]);
        w.str32(self.mode.as_str());
        w.str32(&self.fingerprint);
        w.f64(self.avg_lengths[0]);
        w.f64(self.avg_lengths[1]);
        w.u32(self.doc_ids.len() as u32);
        for (id, lens) in self.doc_ids.iter().zip(&self.field_lengths) {
            w.str32(id);
            w.u32(lens[0]);
            w.u32(lens[1]);
        }
        w.u32(self.postings.len() as u32);
        for (term, list) in &self.postings {
            w.str32(term);
            w.u32(list.len() as u32);
            for p in list {
                w.u32(p.doc);
                w.u8(p.field);
                w.u32(p.tf);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4).ok() != Some(&Self::MAGIC[..]) {
            return Err(Error::Corrupt("not a BM25 index file".into()));
        }
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(Error::Version {
                found: version,
                expected: Self::VERSION,
            });
        }
        let params = Bm25Params {
            k1: r.f64()?,
            b: r.f64()?,
            field_weights: [r.f64()?, r.f64()?],
        };
        let mode: TokenizerMode = r
            .str32()?
            .parse()
            .map_err(|_| Error::Corrupt("unknown tokenizer mode in index".into()))?;
        let fingerprint = r.str32()?;
        let avg_lengths = [r.f64()?, r.f64()?];
        let n_docs = r.u32()? as usize;
        let mut doc_ids = Vec::with_capacity(n_docs.min(r.remaining()));
        let mut field_lengths = Vec::with_capacity(n_docs.min(r.remaining()));
        for _ in 0..n_docs {
            doc_ids.push(r.str32()?);
            field_lengths.push([r.u32()?, r.u32()?]);
        }
        let n_terms = r.u32()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = r.str32()?;
            let len = r.u32()? as usize;
            let mut list = Vec::with_capacity(len.min(r.remaining()));
            for _ in 0..len {
                let p = Posting {
                    doc: r.u32()?,
                    field: r.u8()?,
                    tf: r.u32()?,
                };
                if p.doc as usize >= n_docs || p.field > 1 {
                    return Err(Error::Corrupt(format!(
                        "posting for '{term}' references doc {} field {}",
                        p.doc, p.field
                    )));
                }
                list.push(p);
            }
            postings.insert(term, list);
        }
        r.finish()?;
        Ok(Bm25Index {
            params,
            mode,
            doc_ids,
            field_lengths,
            avg_lengths,
            postings,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, title: &str, answer: &str) -> KnowledgeEntry {
        KnowledgeEntry {
            id: id.into(),
            title: title.into(),
            answer: answer.into(),
        }
    }

    fn title_only() -> Bm25Params {
        Bm25Params {
            field_weights: [1.0, 0.0],
            ..Bm25Params::default()
        }
    }

    /// Evaluates the BM25 formula directly over every document.
    fn brute_force(kb: &KnowledgeBase, params: Bm25Params, query: &str) -> Vec<(String, f64)> {
        let mode = TokenizerMode::Whitespace;
        let docs: Vec<[Vec<String>; 2]> = kb
            .entries()
            .iter()
            .map(|e| [tokenize(&e.title, mode), tokenize(&e.answer, mode)])
            .collect();
        let n = docs.len() as f64;
        let mut out = Vec::new();
        for (i, doc) in docs.iter().enumerate() {
            let mut total = 0.0;
            for f in 0..2 {
                let avg = docs.iter().map(|d| d[f].len()).sum::<usize>() as f64 / n;
                let mut field_score = 0.0;
                for q in tokenize(query, mode) {
                    let tf = doc[f].iter().filter(|t| **t == q).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let df = docs.iter().filter(|d| d[f].contains(&q)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    let len = doc[f].len() as f64;
                    field_score += idf * tf * (params.k1 + 1.0)
                        / (tf + params.k1 * (1.0 - params.b + params.b * len / avg));
                }
                total += params.field_weights[f] * field_score;
            }
            if total > 0.0 {
                out.push((kb.entries()[i].id.clone(), total));
            }
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    fn hand_corpus() -> KnowledgeBase {
        KnowledgeBase::new(vec![
            entry("d1", "refund policy", ""),
            entry("d2", "shipping fee", ""),
            entry("d3", "refund shipping time", ""),
        ])
        .unwrap()
    }

    #[test]
    fn hand_computed_example() {
        let idx = Bm25Index::build(&hand_corpus(), TokenizerMode::Whitespace, title_only());
        let hits = idx.search("refund", 15).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].0, "d1");
        assert!((hits[0].1 - 0.4992).abs() < 1e-4, "{hits:?}");
        assert_eq!(hits[1].0, "d3");
        assert!((hits[1].1 - 0.4208).abs() < 1e-4, "{hits:?}");
    }

    #[test]
    fn edge_cases() {
        let empty = Bm25Index::build(
            &KnowledgeBase::default(),
            TokenizerMode::Whitespace,
            Bm25Params::default(),
        );
        assert!(empty.search("anything", 5).unwrap().is_empty());

        let one = KnowledgeBase::new(vec![entry("only", "reset password", "use the link")]).unwrap();
        let idx = Bm25Index::build(&one, TokenizerMode::Whitespace, Bm25Params::default());
        let hits = idx.search("password reset", 3).unwrap();
        assert_eq!(hits[0].0, "only");
        assert!(hits[0].1 > 0.0);

        let idx = Bm25Index::build(&hand_corpus(), TokenizerMode::Whitespace, title_only());
        assert_eq!(idx.search("shipping refund", 100).unwrap().len(), 3);
        assert!(idx.search("nothing here", 5).unwrap().is_empty());
        assert!(idx.search("refund", 0).is_err());
        assert_eq!(
            idx,
            Bm25Index::build(&hand_corpus(), TokenizerMode::Whitespace, title_only())
        );
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let kb = KnowledgeBase::new(vec![
            entry("b", "same words", ""),
            entry("a", "same words", ""),
            entry("c", "other", ""),
        ])
        .unwrap();
        let idx = Bm25Index::build(&kb, TokenizerMode::Whitespace, title_only());
        let ids: Vec<_> = idx.search("same", 5).unwrap().into_iter().map(|h| h.0).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn knowledge_base_validation() {
        let dup = KnowledgeBase::new(vec![entry("x", "a", "b"), entry("x", "c", "d")]);
        assert!(matches!(dup, Err(Error::Data(m)) if m.contains("'x'")));
        assert!(KnowledgeBase::new(vec![entry("x", "  ", "b")]).is_err());
        let parsed = KnowledgeBase::from_jsonl(
            "{\"id\":\"1\",\"title\":\"t\",\"answer\":\"a\"}\n\n{\"id\":\"2\",\"title\":\"u\",\"answer\":\"b\"}\n",
        )
        .unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(KnowledgeBase::from_jsonl(&parsed.to_jsonl()).unwrap(), parsed);
        assert!(matches!(
            KnowledgeBase::from_jsonl("{\"id\":\"1\"}\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn index_bytes_round_trip_and_reject_garbage() {
        let idx = Bm25Index::build(&hand_corpus(), TokenizerMode::CjkChar, Bm25Params::default());
        let bytes = idx.to_bytes();
        assert_eq!(Bm25Index::from_bytes(&bytes).unwrap(), idx);
        assert!(Bm25Index::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Bm25Index::from_bytes(b"nope").is_err());
    }

    #[test]
    fn disjoint_document_keeps_relative_order() {
        // three docs with total title length 6, avg 2; the added doc also has length 2
        let base = vec![
            entry("a", "refund refund", ""),
            entry("b", "refund", ""),
            entry("c", "refund policy fee", ""),
        ];
        let kb = KnowledgeBase::new(base.clone()).unwrap();
        let before = Bm25Index::build(&kb, TokenizerMode::Whitespace, title_only())
            .search("refund", 10)
            .unwrap();
        let mut more = base;
        more.push(entry("z", "zebra yak", ""));
        let kb = KnowledgeBase::new(more).unwrap();
        let after = Bm25Index::build(&kb, TokenizerMode::Whitespace, title_only())
            .search("refund", 10)
            .unwrap();
        let order = |v: &[(String, f64)]| v.iter().map(|h| h.0.clone()).collect::<Vec<_>>();
        assert_eq!(order(&before), order(&after));
        assert!(after.iter().all(|h| h.1 >= 0.0));
    }

    fn random_kb(rng: &mut ChaCha8Rng) -> KnowledgeBase {
        let words = [
            "order", "ship", "refund", "fee", "track", "cancel", "account", "login", "card",
            "address", "return", "policy", "time", "late",
        ];
        let n = rng.gen_range(1..=50);
        let sentence = |rng: &mut ChaCha8Rng, min: usize| -> String {
            let len = rng.gen_range(min..8);
            (0..len)
                .map(|_| words[rng.gen_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let entries = (0..n)
            .map(|i| entry(&format!("e{i:03}"), &sentence(rng, 1), &sentence(rng, 0)))
            .collect();
        KnowledgeBase::new(entries).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn search_matches_brute_force(seed in any::<u64>(), k in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kb = random_kb(&mut rng);
            let params = Bm25Params::default();
            let idx = Bm25Index::build(&kb, TokenizerMode::Whitespace, params);
            for query in ["refund fee", "order order track", "login", "unknown words", "time late card"] {
                let got = idx.search(query, k).unwrap();
                let mut want = brute_force(&kb, params, query);
                want.truncate(k);
                prop_assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    prop_assert_eq!(&g.0, &w.0);
                    prop_assert!((g.1 - w.1).abs() <= 1e-9);
                }
            }
        }
    }
}
