use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::CommandFactory;
use tcnn_core::data::{generate_synthetic, load_dataset, save_dataset, split, SyntheticCorpus};
use tcnn_core::eval::{
    evaluate_at, format_table, group_by_query, latency_bench, rank_candidates, rank_retrieved,
    threshold_sweep, untrained_baseline, EvalReport, RankedQuery, Scorer, WordAverage,
};
use tcnn_core::model::gradcheck::{self, TOLERANCE};
use tcnn_core::model::{ModelConfig, Variant};
use tcnn_core::retrieval::{Bm25Index, Bm25Params, KnowledgeBase, DEFAULT_TOP_K};
use tcnn_core::text::{PAD_ID, UNK_ID, UNK_TOKEN};
use tcnn_core::train::{
    accuracy, load_checkpoint, save_checkpoint, train_with_progress, Checkpoint, TrainConfig,
};

use crate::settings::Settings;
use crate::{
    Baseline, BenchArgs, CheckFailed, Cli, Command, EvalArgs, GradcheckArgs, IndexArgs, PosWeight,
    QueryArgs, SynthArgs, Threshold, TrainArgs, Usage,
};

const DEFAULT_SEED: u64 = 42;
const DEFAULT_REPETITIONS: usize = 100;
const DEFAULT_GRID_STEP: f64 = 0.01;
const BENCH_PROBES: usize = 16;

pub fn run(cli: Cli) -> Result<()> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let env_threads = match std::env::var("TCNN_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Usage(format!("TCNN_THREADS must be a positive integer, got '{v}'")))?,
        Err(_) => 1,
    };
    let threads: usize = s.get("threads", cli.threads, env_threads)?;
    if threads == 0 {
        return Err(Usage("threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting the scoring thread pool")?;
    let verbose = s.get("verbose", cli.verbose.then_some(true), false)?;
    let seed = cli.seed;
    match cli.command {
        Command::Index(a) => index(&mut s, a),
        Command::Train(a) => train(&mut s, a, seed, verbose),
        Command::Eval(a) => eval(&mut s, a),
        Command::Query(a) => query(&mut s, a),
        Command::Gradcheck(a) => check(&mut s, a, seed),
        Command::Bench(a) => bench(&mut s, a),
        Command::Synth(a) => synth(&mut s, a, seed),
    }
}

fn path_arg(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    s.require::<String>(key, flag.map(|p| p.display().to_string()))
        .map(PathBuf::from)
}

fn opt_path_arg(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
    Ok(s.optional::<String>(key, flag.map(|p| p.display().to_string()))?
        .map(PathBuf::from))
}

fn index(s: &mut Settings, a: IndexArgs) -> Result<()> {
    let d = Bm25Params::default();
    let kb_path = path_arg(s, "kb", a.kb)?;
    let out = path_arg(s, "out", a.out)?;
    let params = Bm25Params {
        k1: s.get("k1", a.k1, d.k1)?,
        b: s.get("b", a.b, d.b)?,
        ..d
    };
    let mode = s.get("tokenizer", a.tokenizer, ModelConfig::default().tokenizer)?;
    s.echo("index");
    if !(params.k1 >= 0.0 && params.k1.is_finite()) || !(0.0..=1.0).contains(&params.b) {
        return Err(Usage("k1 must be finite and non-negative, b must lie in [0, 1]".into()).into());
    }
    let kb = KnowledgeBase::load_jsonl(&kb_path)?;
    let idx = Bm25Index::build(&kb, mode, params);
    idx.save(&out)?;
    println!("{} documents, {} terms", idx.doc_count(), idx.term_count());
    Ok(())
}

/// Sibling of the checkpoint path with another extension.
fn sibling(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

fn train(s: &mut Settings, a: TrainArgs, seed: Option<u64>, verbose: bool) -> Result<()> {
    let md = ModelConfig::default();
    let td = TrainConfig::default();
    let seed = s.get("seed", seed, DEFAULT_SEED)?;
    let cfg = ModelConfig {
        variant: s.require("variant", a.variant)?,
        seq_len: s.get("seq-len", a.seq_len, md.seq_len)?,
        embed_dim: s.get("embed-dim", a.embed_dim, md.embed_dim)?,
        window: s.get("window", a.window, md.window)?,
        filters: s.get("filters", a.filters, md.filters)?,
        blocks: s.get("blocks", a.blocks, md.blocks)?,
        use_answer: s.get("use-answer", a.use_answer, md.use_answer)?,
        seed,
        tokenizer: s.get("tokenizer", a.tokenizer, md.tokenizer)?,
    };
    let default_weight = td.pos_weight.map_or(PosWeight::Balanced, PosWeight::Fixed);
    let tcfg = TrainConfig {
        lr: s.get("lr", a.lr, td.lr)?,
        l2: s.get("l2", a.l2, td.l2)?,
        batch: s.get("batch", a.batch, td.batch)?,
        max_epochs: s.get("max-epochs", a.max_epochs, td.max_epochs)?,
        patience: s.get("patience", a.patience, td.patience)?,
        seed,
        pos_weight: match s.get("pos-weight", a.pos_weight, default_weight)? {
            PosWeight::Balanced => None,
            PosWeight::Fixed(w) => Some(w),
        },
        min_count: s.get("min-count", a.min_count, td.min_count)?,
        pretrained: opt_path_arg(s, "pretrained", a.pretrained)?,
    };
    let kb_path = path_arg(s, "kb", a.kb)?;
    let train_path = path_arg(s, "train", a.train)?;
    let valid_path = path_arg(s, "valid", a.valid)?;
    let out = path_arg(s, "out", a.out)?;
    s.echo("train");

    let kb = KnowledgeBase::load_jsonl(&kb_path)?;
    let train_set = load_dataset(&train_path, &kb)?;
    let valid_set = load_dataset(&valid_path, &kb)?;
    let (ckpt, history) = train_with_progress(&train_set, &valid_set, &kb, &cfg, &tcfg, |r| {
        if verbose {
            eprintln!(
                "epoch {:>3}  loss {:.4}  train acc {:.3}  valid F1@1 {:.3} at {:.2}",
                r.epoch, r.train_loss, r.train_accuracy, r.valid_f1, r.valid_threshold
            );
        }
        ControlFlow::Continue(())
    })?;
    save_checkpoint(&ckpt, &out)?;
    ckpt.matcher.vocab.save(&sibling(&out, "vocab.tsv"))?;
    let history_path = sibling(&out, "history.json");
    fs::write(&history_path, serde_json::to_string_pretty(&history)? + "\n")
        .with_context(|| format!("writing {}", history_path.display()))?;

    let train_acc = accuracy(&ckpt.matcher, &train_set, &kb, 0.5)?;
    println!(
        "{}: best epoch {} of {}, valid F1@1 {:.3} at threshold {:.2}",
        cfg.variant,
        ckpt.meta.epoch,
        history.len(),
        ckpt.meta.best_valid_f1,
        ckpt.meta.threshold
    );
    println!("train accuracy {train_acc:.3}");
    println!("wrote {}", out.display());
    Ok(())
}

fn check_fingerprints(ckpt: &Checkpoint, index: &Bm25Index, kb: &KnowledgeBase) -> Result<()> {
    if kb.term_fingerprint(index.mode) != index.fingerprint() {
        return Err(Usage("the index was built from a different knowledge base".into()).into());
    }
    if ckpt.meta.kb_fingerprint != index.fingerprint() {
        return Err(Usage(format!(
            "model and index disagree on the vocabulary hash (model {}, index {})",
            short(&ckpt.meta.kb_fingerprint),
            short(index.fingerprint())
        ))
        .into());
    }
    Ok(())
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn eval(s: &mut Settings, a: EvalArgs) -> Result<()> {
    let model_path = path_arg(s, "model", a.model)?;
    let kb_path = path_arg(s, "kb", a.kb)?;
    let index_path = path_arg(s, "index", a.index)?;
    let test_path = path_arg(s, "test", a.test)?;
    let threshold = s.get("threshold", a.threshold, Threshold::Auto)?;
    let baseline = s.get("baseline", a.baseline, Baseline::None)?;
    let k = s.get("k", a.k, DEFAULT_TOP_K)?;
    let step = s.get("grid-step", a.grid_step, DEFAULT_GRID_STEP)?;
    let pretrained = opt_path_arg(s, "pretrained", a.pretrained)?;
    let report_path = opt_path_arg(s, "report", a.report)?;
    s.echo("eval");
    if k == 0 {
        return Err(Usage("k must be at least 1".into()).into());
    }

    let ckpt = load_checkpoint(&model_path)?;
    let kb = KnowledgeBase::load_jsonl(&kb_path)?;
    let index = Bm25Index::load(&index_path)?;
    check_fingerprints(&ckpt, &index, &kb)?;
    let test = load_dataset(&test_path, &kb)?;
    let groups = group_by_query(&test);

    let report = |scorer: &dyn Scorer| -> Result<EvalReport> {
        let ranked: Vec<RankedQuery> = rank_retrieved(&groups, &index, k, scorer, &kb)?;
        Ok(match threshold {
            Threshold::Auto => threshold_sweep(&scorer.name(), &ranked, step)?,
            Threshold::Fixed(t) => evaluate_at(&scorer.name(), &ranked, t)?,
        })
    };
    let mut reports = vec![report(&ckpt.matcher)?];
    if baseline == Baseline::WordAverage {
        let base = untrained_baseline(&ckpt.matcher, pretrained.as_deref())?;
        reports.push(report(&WordAverage { matcher: &base })?);
    }
    print!("{}", format_table(&reports));
    let sel = &reports[0].selected;
    println!(
        "{} queries, {} with a related entry, top {} candidates",
        groups.len(),
        sel.with_relevant,
        k
    );
    if let Some(p) = report_path {
        fs::write(&p, serde_json::to_string_pretty(&reports)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn query(s: &mut Settings, a: QueryArgs) -> Result<()> {
    let model_path = path_arg(s, "model", a.model)?;
    let kb_path = path_arg(s, "kb", a.kb)?;
    let index_path = path_arg(s, "index", a.index)?;
    let k = s.get("k", a.k, DEFAULT_TOP_K)?;
    let question = a.question.join(" ");
    if question.trim().is_empty() {
        let mut cmd = Cli::command();
        cmd.build();
        let usage = cmd
            .find_subcommand_mut("query")
            .map(|c| c.render_usage().to_string())
            .unwrap_or_default();
        return Err(Usage(format!("the question is empty\n{usage}")).into());
    }
    if k == 0 {
        return Err(Usage("k must be at least 1".into()).into());
    }
    let ckpt = load_checkpoint(&model_path)?;
    let tau = s.get("threshold", a.threshold, ckpt.meta.threshold)?;
    s.echo("query");
    let kb = KnowledgeBase::load_jsonl(&kb_path)?;
    let index = Bm25Index::load(&index_path)?;
    check_fingerprints(&ckpt, &index, &kb)?;

    let hits: Vec<(String, u8)> = index
        .search(&question, k)?
        .into_iter()
        .map(|(id, _)| (id, 0))
        .collect();
    let ranked = rank_candidates(&question, &hits, &ckpt.matcher, &kb)?;
    for (i, c) in ranked.candidates.iter().enumerate() {
        let title = &kb.resolve(&c.kb_id)?.title;
        println!("{:>3}  {:.4}  {}  {}", i + 1, c.score, c.kb_id, title);
    }
    match ranked.top() {
        Some(top) if top.score >= tau => {
            let entry = kb.resolve(&top.kb_id)?;
            println!("answer [{}]: {}", entry.id, entry.answer);
        }
        _ => println!("no confident answer"),
    }
    Ok(())
}

fn check(s: &mut Settings, a: GradcheckArgs, seed: Option<u64>) -> Result<()> {
    let seed = s.get("seed", seed, DEFAULT_SEED)?;
    let variants: Vec<Variant> = match s.optional("variant", a.variant)? {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    s.echo("gradcheck");
    let mut failed = Vec::new();
    for v in variants {
        let reports = gradcheck::run_standard(v, seed)?;
        let mut worst: Vec<(String, f64)> = reports[0].groups.clone();
        for r in &reports[1..] {
            for (slot, (_, e)) in worst.iter_mut().zip(&r.groups) {
                slot.1 = slot.1.max(*e);
            }
        }
        for (group, err) in &worst {
            let mark = if *err <= TOLERANCE { "ok" } else { "FAIL" };
            println!("{:<7} {group:<20} {err:.3e}  {mark}", v.as_str());
        }
        if worst.iter().any(|(_, e)| !(*e <= TOLERANCE)) {
            failed.push(v.to_string());
        }
    }
    if failed.is_empty() {
        println!("all relative errors <= {TOLERANCE:e}");
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

fn bench(s: &mut Settings, a: BenchArgs) -> Result<()> {
    let model_path = path_arg(s, "model", a.model)?;
    let repetitions = s.get("repetitions", a.repetitions, DEFAULT_REPETITIONS)?;
    let kb_path = opt_path_arg(s, "kb", a.kb)?;
    s.echo("bench");
    let matcher = load_checkpoint(&model_path)?.matcher;

    let probes: Vec<(String, String, String)> = match kb_path {
        Some(p) => {
            let kb = KnowledgeBase::load_jsonl(&p)?;
            let e = kb.entries();
            (0..e.len().min(BENCH_PROBES))
                .map(|i| {
                    let other = &e[(i + 1) % e.len()];
                    (other.title.clone(), e[i].title.clone(), e[i].answer.clone())
                })
                .collect()
        }
        None => {
            let words: Vec<&str> = matcher
                .vocab
                .tokens()
                .iter()
                .enumerate()
                .filter(|(id, _)| *id != PAD_ID && *id != UNK_ID)
                .map(|(_, t)| t.as_str())
                .collect();
            let pick = |start: usize, n: usize| -> String {
                if words.is_empty() {
                    return UNK_TOKEN.to_string();
                }
                (0..n)
                    .map(|j| words[(start + 7 * j) % words.len()])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            (0..BENCH_PROBES)
                .map(|i| (pick(i, 8), pick(i + 3, 8), pick(i + 5, 24)))
                .collect()
        }
    };
    let stats = latency_bench(&matcher, &probes, repetitions)?;
    println!("per-triple scoring latency over {} calls", stats.samples);
    println!("mean   {:.4} ms", stats.mean_ms);
    println!("median {:.4} ms", stats.median_ms);
    println!("p95    {:.4} ms", stats.p95_ms);
    println!("min    {:.4} ms", stats.min_ms);
    println!("max    {:.4} ms", stats.max_ms);
    Ok(())
}

fn synth(s: &mut Settings, a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let seed = s.get("seed", seed, DEFAULT_SEED)?;
    let entries = s.get("entries", a.entries, 500usize)?;
    let queries = s.get("queries", a.queries, 300usize)?;
    let dir = path_arg(s, "out-dir", a.out_dir)?;
    s.echo("synth");
    let corpus = generate_synthetic(seed, entries, queries)?;
    corpus.write(&dir)?;
    let parts = split(&corpus.triples, seed)?;
    for (name, set) in [("train", &parts.train), ("valid", &parts.valid), ("test", &parts.test)] {
        save_dataset(&dir.join(format!("{name}.jsonl")), set)?;
    }
    let related = corpus.triples.iter().filter(|t| t.label == 1).count();
    println!(
        "{} entries, {} labeled triples ({} related) in {}",
        corpus.kb.len(),
        corpus.triples.len(),
        related,
        dir.display()
    );
    println!(
        "wrote {}, {}, train.jsonl ({}), valid.jsonl ({}), test.jsonl ({})",
        SyntheticCorpus::KB_FILE,
        SyntheticCorpus::DATASET_FILE,
        parts.train.len(),
        parts.valid.len(),
        parts.test.len()
    );
    Ok(())
}
