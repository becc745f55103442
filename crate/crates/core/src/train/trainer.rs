use std::ops::ControlFlow;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledTriple;
use crate::error::{Error, Result};
use crate::eval::{group_by_query, rank_judged, threshold_sweep};
use crate::matcher::Matcher;
use crate::model::{gradients, EncodedTriple, LossConfig, ModelConfig, ModelParams};
use crate::retrieval::KnowledgeBase;
use crate::text::{tokenize, Vocabulary};

use super::adagrad::AdaGrad;
use super::checkpoint::{Checkpoint, TrainingMeta};

/// Grid step of the validation threshold sweep.
pub const VALID_GRID_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Weight of related examples in the loss; `None` uses unrelated/related
    /// counts of the training set.
    pub pos_weight: Option<f64>,
    pub min_count: usize,
    pub pretrained: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            l2: 1e-4,
            batch: 32,
            max_epochs: 30,
            patience: 5,
            seed: 42,
            pos_weight: Some(1.0),
            min_count: 1,
            pretrained: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Argument(format!("l2 must be non-negative, got {}", self.l2)));
        }
        if self.batch == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Argument(
                "batch size, patience and max epochs must be at least 1".into(),
            ));
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Argument(format!("pos_weight must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Training-set accuracy at threshold 0.5 after the epoch.
    pub train_accuracy: f64,
    pub valid_f1: f64,
    pub valid_threshold: f64,
}

/// Patience counter over a stream of validation scores.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Records a score; returns `(improved, stop)`.
    pub fn observe(&mut self, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

/// Vocabulary over knowledge-base texts and training queries.
pub fn build_vocabulary(
    kb: &KnowledgeBase,
    train: &[LabeledTriple],
    cfg: &ModelConfig,
    min_count: usize,
) -> Vocabulary {
    let mut texts: Vec<Vec<String>> = Vec::new();
    for e in kb.entries() {
        texts.push(tokenize(&e.title, cfg.tokenizer));
        texts.push(tokenize(&e.answer, cfg.tokenizer));
    }
    for t in train {
        texts.push(tokenize(&t.query, cfg.tokenizer));
    }
    Vocabulary::build(texts.iter().map(Vec::as_slice), min_count)
}

pub fn encode_triples(
    matcher: &Matcher,
    triples: &[LabeledTriple],
    kb: &KnowledgeBase,
) -> Result<Vec<EncodedTriple>> {
    triples
        .iter()
        .map(|t| {
            let e = kb.resolve(&t.kb_id)?;
            Ok(EncodedTriple {
                query: matcher.encode(&t.query),
                title: matcher.encode(&e.title),
                answer: matcher.encode(&e.answer),
                label: t.label,
            })
        })
        .collect()
}

/// Fraction of triples whose score falls on the labeled side of `threshold`.
pub fn accuracy(
    matcher: &Matcher,
    triples: &[LabeledTriple],
    kb: &KnowledgeBase,
    threshold: f64,
) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Argument("accuracy of an empty set".into()));
    }
    let mut hits = 0;
    for t in triples {
        let s = matcher.score_entry(&t.query, kb.resolve(&t.kb_id)?)?.value();
        if (s >= threshold) == (t.label == 1) {
            hits += 1;
        }
    }
    Ok(hits as f64 / triples.len() as f64)
}

/// Best validation F1@1 and its threshold, ranking each query's judged
/// candidates.
pub fn validation_f1(
    matcher: &Matcher,
    valid: &[LabeledTriple],
    kb: &KnowledgeBase,
) -> Result<(f64, f64)> {
    let ranked = rank_judged(&group_by_query(valid), matcher, kb)?;
    let report = threshold_sweep("valid", &ranked, VALID_GRID_STEP)?;
    Ok((report.selected.f1, report.selected.threshold))
}

/// Trains a matcher with AdaGrad on mini-batches, keeping the parameters of
/// the epoch with the best validation F1@1.
pub fn train(
    train_set: &[LabeledTriple],
    valid_set: &[LabeledTriple],
    kb: &KnowledgeBase,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    train_with_progress(train_set, valid_set, kb, cfg, tcfg, |_| ControlFlow::Continue(()))
}

/// [`train`] with a callback after every epoch; returning `Break` ends
/// training as if patience had run out.
pub fn train_with_progress(
    train_set: &[LabeledTriple],
    valid_set: &[LabeledTriple],
    kb: &KnowledgeBase,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    cfg.validate()?;
    tcfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Argument("training and validation sets must be non-empty".into()));
    }
    for t in train_set.iter().chain(valid_set) {
        kb.resolve(&t.kb_id)?;
    }

    let vocab = build_vocabulary(kb, train_set, cfg, tcfg.min_count);
    let params = ModelParams::initial(cfg, &vocab, tcfg.pretrained.as_deref())?;
    let mut matcher = Matcher {
        config: cfg.clone(),
        vocab,
        params,
    };
    let encoded = encode_triples(&matcher, train_set, kb)?;
    let loss = LossConfig {
        l2: tcfg.l2,
        pos_weight: tcfg
            .pos_weight
            .unwrap_or_else(|| crate::data::balanced_pos_weight(train_set)),
    };

    let mut optimizer = AdaGrad::new(&matcher.params, tcfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut stopper = EarlyStopping::new(tcfg.patience);
    let mut best = matcher.params.clone();
    let mut meta = TrainingMeta {
        kb_fingerprint: kb.term_fingerprint(cfg.tokenizer),
        ..TrainingMeta::default()
    };
    let mut history = Vec::new();

    for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(tcfg.batch).enumerate() {
            let batch: Vec<EncodedTriple> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let (grads, value) = gradients(&batch, &matcher.params, cfg, loss)?;
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            optimizer.step(&mut matcher.params, &grads)?;
            matcher.params.clear_pad();
            total += value;
            batches += 1;
        }
        if !matcher.params.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged during epoch {epoch}")));
        }
        let (valid_f1, valid_threshold) = validation_f1(&matcher, valid_set, kb)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            train_accuracy: accuracy(&matcher, train_set, kb, 0.5)?,
            valid_f1,
            valid_threshold,
        };
        let halt = on_epoch(&record).is_break();
        history.push(record);
        let (improved, stop) = stopper.observe(valid_f1);
        if improved {
            best = matcher.params.clone();
            meta.epoch = epoch;
            meta.best_valid_f1 = valid_f1;
            meta.threshold = valid_threshold;
        }
        if stop || halt {
            break;
        }
    }

    matcher.params = best;
    Ok((Checkpoint { matcher, meta }, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::retrieval::KnowledgeEntry;
    use crate::train::checkpoint::checkpoint_to_bytes;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            seq_len: 8,
            embed_dim: 8,
            window: 3,
            filters: 6,
            blocks: 2,
            ..ModelConfig::default()
        }
    }

    fn corpus() -> (KnowledgeBase, Vec<LabeledTriple>) {
        let entries = vec![
            ("a", "cancel order", "open orders and tap cancel"),
            ("b", "track parcel", "tracking shows the parcel route"),
            ("c", "reset password", "use the reset link by email"),
            ("d", "refund status", "refunds take five days"),
        ];
        let kb = KnowledgeBase::new(
            entries
                .iter()
                .map(|(id, t, a)| KnowledgeEntry {
                    id: id.to_string(),
                    title: t.to_string(),
                    answer: a.to_string(),
                })
                .collect(),
        )
        .unwrap();
        let qs = [
            ("cancel my order", "a", "b"),
            ("where is my parcel", "b", "c"),
            ("forgot password", "c", "d"),
            ("refund status please", "d", "a"),
        ];
        let mut triples = Vec::new();
        for (q, pos, neg) in qs {
            for (id, label) in [(pos, 1), (neg, 0)] {
                triples.push(LabeledTriple {
                    query: q.into(),
                    kb_id: id.into(),
                    label,
                });
            }
        }
        (kb, triples)
    }

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(0.5), (true, false));
        assert_eq!(s.observe(0.5), (false, true));

        let mut s = EarlyStopping::new(3);
        let stops: Vec<bool> = [0.1, 0.2, 0.2, 0.3, 0.1, 0.1, 0.1].iter().map(|&f| s.observe(f).1).collect();
        assert_eq!(stops, vec![false, false, false, false, false, false, true]);
    }

    #[test]
    fn training_is_deterministic_and_records_history() {
        let (kb, triples) = corpus();
        let cfg = tiny_cfg(Variant::Atcnn1);
        let tcfg = TrainConfig {
            max_epochs: 3,
            batch: 3,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&triples, &triples, &kb, &cfg, &tcfg).unwrap();
        let (b, hb) = train(&triples, &triples, &kb, &cfg, &tcfg).unwrap();
        assert_eq!(checkpoint_to_bytes(&a), checkpoint_to_bytes(&b));
        assert_eq!(ha, hb);
        assert!(!ha.is_empty() && ha.len() <= 3);
        assert!(ha.iter().all(|r| r.train_loss.is_finite()));
        assert!((1..=ha.len()).contains(&a.meta.epoch));
        let best = ha.iter().map(|r| r.valid_f1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.meta.best_valid_f1, best);
    }

    #[test]
    fn pad_embedding_stays_zero() {
        let (kb, triples) = corpus();
        let tcfg = TrainConfig {
            max_epochs: 2,
            batch: 4,
            ..TrainConfig::default()
        };
        let (ckpt, _) = train(&triples, &triples, &kb, &tiny_cfg(Variant::Tcnn), &tcfg).unwrap();
        let w = &ckpt.matcher.params.embeddings.weights;
        assert!((0..w.rows()).all(|r| w[(r, crate::text::PAD_ID)] == 0.0));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (kb, mut triples) = corpus();
        let cfg = tiny_cfg(Variant::Tcnn);
        let tcfg = TrainConfig::default();
        assert!(matches!(train(&[], &triples, &kb, &cfg, &tcfg), Err(Error::Argument(_))));
        assert!(TrainConfig { lr: 0.0, ..tcfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..tcfg.clone() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..tcfg.clone() }.validate().is_err());
        triples[0].kb_id = "nope".into();
        let err = train(&triples, &triples, &kb, &cfg, &tcfg).unwrap_err();
        assert!(matches!(err, Error::Data(m) if m.contains("nope")));
    }

    #[test]
    fn diverging_training_reports_numeric_error() {
        let (kb, triples) = corpus();
        let tcfg = TrainConfig {
            l2: f64::MAX,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let err = train(&triples, &triples, &kb, &tiny_cfg(Variant::Tcnn), &tcfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(m) if m.contains("epoch 1")));
    }
}
