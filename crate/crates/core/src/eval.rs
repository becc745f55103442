//! Candidate reranking, thresholded top-1 metrics, the word-average baseline
//! and latency measurement.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledTriple;
use crate::error::{Error, Result};
use crate::matcher::Matcher;
use crate::model::ModelParams;
use crate::numerics::cosine;
use crate::retrieval::{Bm25Index, KnowledgeBase, KnowledgeEntry};
use crate::text::EmbeddingTable;

/// Anything that can score a query against a knowledge entry on a [0, 1] scale.
pub trait Scorer: Sync {
    fn name(&self) -> String;
    fn score_entry(&self, query: &str, entry: &KnowledgeEntry) -> Result<f64>;
}

impl Scorer for Matcher {
    fn name(&self) -> String {
        self.config.variant.as_str().to_uppercase()
    }

    fn score_entry(&self, query: &str, entry: &KnowledgeEntry) -> Result<f64> {
        Ok(Matcher::score_entry(self, query, entry)?.value())
    }
}

/// Cosine of mean word vectors, mapped from [-1, 1] onto [0, 1].
pub fn word_average_score(
    query: &[usize],
    title: &[usize],
    answer: &[usize],
    embeddings: &EmbeddingTable,
) -> f64 {
    let q = embeddings.mean_vector(query);
    let t = embeddings.mean_vector(title);
    let a = embeddings.mean_vector(answer);
    let entry: Vec<f64> = t.iter().zip(&a).map(|(x, y)| (x + y) / 2.0).collect();
    let raw = cosine(&q, &entry).expect("equal embedding dimensions");
    (raw + 1.0) / 2.0
}

/// The word-average baseline, reading text with a matcher's vocabulary and
/// embedding table.
pub struct WordAverage<'a> {
    pub matcher: &'a Matcher,
}

impl Scorer for WordAverage<'_> {
    fn name(&self) -> String {
        "WordAverage".into()
    }

    fn score_entry(&self, query: &str, entry: &KnowledgeEntry) -> Result<f64> {
        let m = self.matcher;
        Ok(word_average_score(
            &m.encode(query),
            &m.encode(&entry.title),
            &m.encode(&entry.answer),
            &m.params.embeddings,
        ))
    }
}

/// A copy of `matcher` carrying untrained embeddings: the seeded initial
/// table, or `pretrained` vectors when given. The word-average baseline runs
/// on this so that it sees no supervision.
pub fn untrained_baseline(matcher: &Matcher, pretrained: Option<&Path>) -> Result<Matcher> {
    let cfg = &matcher.config;
    let params = ModelParams::initial(cfg, &matcher.vocab, pretrained)?;
    Ok(Matcher {
        config: cfg.clone(),
        vocab: matcher.vocab.clone(),
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub kb_id: String,
    pub score: f64,
    pub label: u8,
}

/// One query's candidates, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedQuery {
    pub query: String,
    pub candidates: Vec<Candidate>,
    /// Whether the query has any related entry at all, retrieved or not.
    pub has_relevant: bool,
}

fn by_score_then_id(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.kb_id.cmp(&b.kb_id))
}

impl RankedQuery {
    /// Sorts `candidates` by descending score, ties by ascending id.
    pub fn new(query: impl Into<String>, mut candidates: Vec<Candidate>, has_relevant: bool) -> Self {
        candidates.sort_by(by_score_then_id);
        RankedQuery {
            query: query.into(),
            candidates,
            has_relevant,
        }
    }

    pub fn top(&self) -> Option<&Candidate> {
        self.candidates.first()
    }
}

/// Scores every `(kb_id, label)` candidate for `query` and ranks them.
pub fn rank_candidates(
    query: &str,
    candidates: &[(String, u8)],
    scorer: &dyn Scorer,
    kb: &KnowledgeBase,
) -> Result<RankedQuery> {
    let mut scored = Vec::with_capacity(candidates.len());
    for (id, label) in candidates {
        let entry = kb.resolve(id)?;
        scored.push(Candidate {
            kb_id: id.clone(),
            score: scorer.score_entry(query, entry)?,
            label: *label,
        });
    }
    let has_relevant = candidates.iter().any(|(_, l)| *l == 1);
    Ok(RankedQuery::new(query, scored, has_relevant))
}

/// Judgments for one query text, in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroup {
    pub query: String,
    pub judgments: Vec<(String, u8)>,
}

impl QueryGroup {
    pub fn has_relevant(&self) -> bool {
        self.judgments.iter().any(|(_, l)| *l == 1)
    }
}

/// Groups triples by query text. A repeated `(query, kb_id)` pair keeps its
/// first label.
pub fn group_by_query(triples: &[LabeledTriple]) -> Vec<QueryGroup> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<QueryGroup> = Vec::new();
    for t in triples {
        let g = *index.entry(t.query.as_str()).or_insert_with(|| {
            groups.push(QueryGroup {
                query: t.query.clone(),
                judgments: Vec::new(),
            });
            groups.len() - 1
        });
        let judgments = &mut groups[g].judgments;
        if !judgments.iter().any(|(id, _)| *id == t.kb_id) {
            judgments.push((t.kb_id.clone(), t.label));
        }
    }
    groups
}

/// Ranks exactly the judged candidates of each group.
pub fn rank_judged(
    groups: &[QueryGroup],
    scorer: &dyn Scorer,
    kb: &KnowledgeBase,
) -> Result<Vec<RankedQuery>> {
    groups
        .par_iter()
        .map(|g| rank_candidates(&g.query, &g.judgments, scorer, kb))
        .collect()
}

/// Retrieve-then-rerank over condensed lists: the candidates of each query
/// are its top-`k` BM25 hits that carry a judgment; unjudged hits are left
/// out, and a related entry that retrieval misses is not a candidate.
pub fn rank_retrieved(
    groups: &[QueryGroup],
    index: &Bm25Index,
    k: usize,
    scorer: &dyn Scorer,
    kb: &KnowledgeBase,
) -> Result<Vec<RankedQuery>> {
    groups
        .par_iter()
        .map(|g| {
            let candidates: Vec<(String, u8)> = index
                .search(&g.query, k)?
                .into_iter()
                .filter_map(|(id, _)| {
                    g.judgments
                        .iter()
                        .find(|(j, _)| *j == id)
                        .map(|(_, l)| (id, *l))
                })
                .collect();
            rank_candidates(&g.query, &candidates, scorer, kb)
        })
        .collect()
}

/// Top-1 metrics at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub answered: usize,
    pub correct: usize,
    pub with_relevant: usize,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// A query is answered when its top-1 score reaches `tau`; it is correct when
/// that top-1 is related. Recall divides by queries with a related entry.
pub fn metrics_at_threshold(ranked: &[RankedQuery], tau: f64) -> Metrics {
    let mut answered = 0;
    let mut correct = 0;
    let mut with_relevant = 0;
    for q in ranked {
        if q.has_relevant {
            with_relevant += 1;
        }
        if let Some(top) = q.top() {
            if top.score >= tau {
                answered += 1;
                if top.label == 1 {
                    correct += 1;
                }
            }
        }
    }
    let precision = ratio(correct, answered);
    let recall = ratio(correct, with_relevant);
    Metrics {
        threshold: tau,
        precision,
        recall,
        f1: f1(precision, recall),
        answered,
        correct,
        with_relevant,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub grid: Vec<Metrics>,
    pub selected: Metrics,
}

/// `{0, step, 2·step, …, 1}`.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Argument(format!("grid step must lie in (0, 1], got {step}")));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n)
        .map(|i| ((i as f64 * step) * 1e12).round() / 1e12)
        .collect();
    if *grid.last().unwrap() < 1.0 {
        grid.push(1.0);
    }
    Ok(grid)
}

/// Evaluates every threshold in `grid` and selects the best F1, ties going
/// to the smallest threshold.
pub fn sweep_grid(method: &str, ranked: &[RankedQuery], grid: &[f64]) -> Result<EvalReport> {
    if grid.is_empty() {
        return Err(Error::Argument("empty threshold grid".into()));
    }
    let mut points: Vec<Metrics> = grid.iter().map(|&t| metrics_at_threshold(ranked, t)).collect();
    points.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    let mut selected = points[0];
    for p in &points[1..] {
        if p.f1 > selected.f1 {
            selected = *p;
        }
    }
    Ok(EvalReport {
        method: method.to_string(),
        grid: points,
        selected,
    })
}

pub fn threshold_sweep(method: &str, ranked: &[RankedQuery], step: f64) -> Result<EvalReport> {
    sweep_grid(method, ranked, &threshold_grid(step)?)
}

/// Report for a single fixed threshold.
pub fn evaluate_at(method: &str, ranked: &[RankedQuery], tau: f64) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Argument(format!("threshold must lie in [0, 1], got {tau}")));
    }
    sweep_grid(method, ranked, &[tau])
}

/// Aligned plain-text table of the selected rows.
pub fn format_table(reports: &[EvalReport]) -> String {
    let header = ["Methods", "Threshold", "Precision@1", "Recall@1", "F1@1"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            let m = &r.selected;
            [
                r.method.clone(),
                format!("{:.2}", m.threshold),
                format!("{:.3}", m.precision),
                format!("{:.3}", m.recall),
                format!("{:.3}", m.f1),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let mut l = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(l, "{cell:<w$}");
            } else {
                let _ = write!(l, "  {cell:>w$}");
            }
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(&header);
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&cells);
    }
    out
}

/// Per-triple scoring latency in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples: usize,
}

pub const WARMUP_CALLS: usize = 10;

/// Times `repetitions` passes over `probes` (query, title, answer), one
/// scoring call at a time on the calling thread, after a warm-up.
pub fn latency_bench(
    matcher: &Matcher,
    probes: &[(String, String, String)],
    repetitions: usize,
) -> Result<LatencyStats> {
    if repetitions == 0 {
        return Err(Error::Argument("repetitions must be at least 1".into()));
    }
    if probes.is_empty() {
        return Err(Error::Argument("no probe triples to time".into()));
    }
    for (q, t, a) in probes.iter().cycle().take(WARMUP_CALLS) {
        std::hint::black_box(matcher.score_text(q, t, a)?);
    }
    let mut samples = Vec::with_capacity(repetitions * probes.len());
    for _ in 0..repetitions {
        for (q, t, a) in probes {
            let start = Instant::now();
            std::hint::black_box(matcher.score_text(q, t, a)?);
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    };
    let p95 = samples[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    Ok(LatencyStats {
        mean_ms: samples.iter().sum::<f64>() / n as f64,
        median_ms: median,
        p95_ms: p95,
        min_ms: samples[0],
        max_ms: samples[n - 1],
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;
    use proptest::prelude::*;

    fn cand(id: &str, score: f64, label: u8) -> Candidate {
        Candidate {
            kb_id: id.into(),
            score,
            label,
        }
    }

    /// q1 top (0.9, related); q2 top (0.8, unrelated) with a related runner-up;
    /// q3 top (0.4, related).
    pub(crate) fn fixture() -> Vec<RankedQuery> {
        vec![
            RankedQuery::new("q1", vec![cand("a", 0.9, 1), cand("b", 0.2, 0)], true),
            RankedQuery::new("q2", vec![cand("c", 0.8, 0), cand("d", 0.3, 1)], true),
            RankedQuery::new("q3", vec![cand("e", 0.4, 1)], true),
        ]
    }

    /// One pass over the definitions, written independently of the library.
    fn oracle(ranked: &[RankedQuery], tau: f64) -> (f64, f64, f64) {
        let tops: Vec<(f64, u8, bool)> = ranked
            .iter()
            .filter_map(|q| {
                q.candidates
                    .iter()
                    .cloned()
                    .reduce(|best, c| {
                        if c.score > best.score || (c.score == best.score && c.kb_id < best.kb_id) {
                            c
                        } else {
                            best
                        }
                    })
                    .map(|c| (c.score, c.label, q.has_relevant))
            })
            .collect();
        let answered = tops.iter().filter(|t| t.0 >= tau).count() as f64;
        let correct = tops.iter().filter(|t| t.0 >= tau && t.1 == 1).count() as f64;
        let relevant = ranked.iter().filter(|q| q.has_relevant).count() as f64;
        let p = if answered > 0.0 { correct / answered } else { 0.0 };
        let r = if relevant > 0.0 { correct / relevant } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }

    #[test]
    fn fixture_metrics() {
        let m = metrics_at_threshold(&fixture(), 0.5);
        assert!((m.precision - 0.5).abs() < 1e-12);
        assert!((m.recall - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 0.4).abs() < 1e-12);
        assert_eq!((m.answered, m.correct, m.with_relevant), (2, 1, 3));
    }

    #[test]
    fn explicit_grid_selects_smallest_best() {
        let r = sweep_grid("m", &fixture(), &[0.3, 0.5, 0.85]).unwrap();
        let f: Vec<f64> = r.grid.iter().map(|m| m.f1).collect();
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f[1] - 0.4).abs() < 1e-12);
        assert!((f[2] - 0.5).abs() < 1e-12);
        assert_eq!(r.selected.threshold, 0.3);
    }

    #[test]
    fn trivial_threshold_cases() {
        let all_related: Vec<RankedQuery> = (0..4)
            .map(|i| RankedQuery::new(format!("q{i}"), vec![cand("x", 0.9, 1)], true))
            .collect();
        let m = metrics_at_threshold(&all_related, 0.0);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = metrics_at_threshold(&fixture(), 1.0);
        assert_eq!((m.precision, m.recall, m.f1, m.answered), (0.0, 0.0, 0.0, 0));

        let r = threshold_sweep("m", &all_related, 0.01).unwrap();
        assert_eq!(r.selected.threshold, 0.0);
        assert_eq!(r.selected.f1, 1.0);
        assert!(r.grid.iter().filter(|p| p.threshold <= 0.9).all(|p| p.f1 == 1.0));
    }

    #[test]
    fn table_one_arithmetic() {
        assert!((f1(0.878, 0.953) - 0.914).abs() <= 0.0005);
        assert!((f1(0.891, 0.920) - 0.905).abs() <= 0.0005);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn grid_covers_unit_interval() {
        let g = threshold_grid(0.01).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(g[37], 0.37);
        assert_eq!(threshold_grid(0.3).unwrap(), vec![0.0, 0.3, 0.6, 0.9, 1.0]);
        assert_eq!(threshold_grid(1.0).unwrap(), vec![0.0, 1.0]);
        assert!(threshold_grid(0.0).is_err());
        assert!(threshold_grid(1.5).is_err());
    }

    #[test]
    fn ranking_ties_and_order() {
        let r = RankedQuery::new("q", vec![cand("b", 0.5, 0), cand("a", 0.5, 1)], true);
        assert_eq!(r.top().unwrap().kb_id, "a");
        let single = RankedQuery::new("q", vec![cand("z", 0.1, 0)], false);
        assert_eq!(single.top().unwrap().kb_id, "z");
    }

    #[test]
    fn word_average_examples() {
        let mut w = Mat::zeros(2, 4);
        w[(0, 2)] = 1.0;
        w[(1, 3)] = 1.0;
        let table = EmbeddingTable { weights: w };
        assert!((word_average_score(&[2, 3], &[2, 3], &[2, 3], &table) - 1.0).abs() < 1e-12);
        assert!((word_average_score(&[2], &[3], &[3], &table) - 0.5).abs() < 1e-12);
        assert!((word_average_score(&[0, 0], &[2], &[3], &table) - 0.5).abs() < 1e-12);
        assert_eq!(
            word_average_score(&[2], &[2, 3], &[3], &table),
            word_average_score(&[2], &[3], &[2, 3], &table)
        );
    }

    #[test]
    fn baseline_uses_initial_embeddings() {
        use crate::model::{ModelConfig, Variant, gradcheck};
        let texts: Vec<Vec<String>> = vec![vec!["parcel".into(), "refund".into()]];
        let vocab = crate::text::Vocabulary::build(texts.iter().map(Vec::as_slice), 1);
        let config = ModelConfig {
            variant: Variant::Atcnn1,
            ..ModelConfig::default()
        };
        let params = gradcheck::random_params(&config, vocab.len(), 3).unwrap();
        let trained = Matcher { config, vocab, params };
        let base = untrained_baseline(&trained, None).unwrap();
        let fresh = ModelParams::init(&trained.config, trained.vocab.len()).unwrap();
        assert_eq!(base.params, fresh);
        assert_eq!(base.vocab, trained.vocab);
        assert_ne!(base.params.embeddings, trained.params.embeddings);
    }

    #[test]
    fn grouping_keeps_first_judgment() {
        let t = |q: &str, id: &str, l: u8| LabeledTriple {
            query: q.into(),
            kb_id: id.into(),
            label: l,
        };
        let groups = group_by_query(&[t("x", "a", 1), t("y", "b", 0), t("x", "c", 0), t("x", "a", 0)]);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].judgments, vec![("a".to_string(), 1), ("c".to_string(), 0)]);
        assert!(groups[0].has_relevant());
        assert!(!groups[1].has_relevant());
    }

    #[test]
    fn table_has_expected_columns() {
        let r = sweep_grid("TCNN", &fixture(), &[0.3]).unwrap();
        let t = format_table(&[r]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("Methods"));
        assert!(lines[0].ends_with("F1@1"));
        assert!(lines[1].starts_with("TCNN"));
        assert!(lines[1].contains("0.30"));
        assert!(lines[1].contains("0.667"));
    }

    fn arb_ranked() -> impl Strategy<Value = Vec<RankedQuery>> {
        let cand_strategy = (0u8..6, 0u32..20, 0u8..2);
        let query = (prop::collection::vec(cand_strategy, 0..4), any::<bool>());
        prop::collection::vec(query, 0..8).prop_map(|qs| {
            qs.into_iter()
                .enumerate()
                .map(|(i, (cs, extra))| {
                    let cands: Vec<Candidate> = cs
                        .into_iter()
                        .map(|(id, s, l)| cand(&format!("k{id}"), f64::from(s) / 20.0, l))
                        .collect();
                    let rel = extra || cands.iter().any(|c| c.label == 1);
                    RankedQuery::new(format!("q{i}"), cands, rel)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(ranked in arb_ranked(), t in 0u32..=20) {
            let tau = f64::from(t) / 20.0;
            let m = metrics_at_threshold(&ranked, tau);
            prop_assert_eq!((m.precision, m.recall, m.f1), oracle(&ranked, tau));
        }

        #[test]
        fn sweep_invariant_under_monotone_maps(ranked in arb_ranked()) {
            let grid: Vec<f64> = (0..=20).map(|i| f64::from(i) / 20.0).collect();
            let g = |x: f64| x * x * x;
            let mapped: Vec<RankedQuery> = ranked
                .iter()
                .map(|q| {
                    let c = q.candidates.iter().map(|c| cand(&c.kb_id, g(c.score), c.label)).collect();
                    RankedQuery::new(q.query.clone(), c, q.has_relevant)
                })
                .collect();
            let mapped_grid: Vec<f64> = grid.iter().map(|&t| g(t)).collect();
            let a = sweep_grid("a", &ranked, &grid).unwrap();
            let b = sweep_grid("b", &mapped, &mapped_grid).unwrap();
            let fa: Vec<f64> = a.grid.iter().map(|m| m.f1).collect();
            let fb: Vec<f64> = b.grid.iter().map(|m| m.f1).collect();
            prop_assert_eq!(fa, fb);
        }

        #[test]
        fn input_order_does_not_change_ranking(scores in prop::collection::vec(0u32..5, 1..8)) {
            let cands: Vec<Candidate> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| cand(&format!("k{i}"), f64::from(s), 0))
                .collect();
            let mut rev = cands.clone();
            rev.reverse();
            prop_assert_eq!(
                RankedQuery::new("q", cands, false).candidates,
                RankedQuery::new("q", rev, false).candidates
            );
        }
    }
}
