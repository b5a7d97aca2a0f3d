//! Command-line front end. Every command reads an optional TOML run
//! configuration, writes its artifacts and a `*.manifest.json` beside them.
//!
//! Run directory layout used by `eval`:
//!
//! ```text
//! RUN/data/{train,dev,test}.tsv
//! RUN/models/{seq2seq,cvae,cvae-simple,ctvae,tcd,lm}.ckpt
//! RUN/outputs/<model>.topk.jsonl
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AuxConfig, ModelConfig, ModelKind, NetworkKind};
use crate::data::{
    check_disjoint, gen_synthetic, load_corpus, Checkpoint, CheckpointError, Corpus, DataError, OptimizerState,
    Vocab,
};
use crate::decoding::{generate_candidates, GenerationConfig};
use crate::metrics::RnnLm;
use crate::models::{encode_corpus, evaluate, Generator};
use crate::pipeline::{
    evaluate_outputs, gradcheck_network, post_rng, rerank_post, train_generator, train_lm, train_tcd, PostOutput,
    RerankConfig,
};
use crate::rerank::{encode_labeled, make_negatives, Tcd};
use crate::tensor::TensorError;
use crate::train::{Session, TrainError};

pub const VERSION: &str = env!("CTVAE_VERSION");

/// Gradient-check tolerance of the `gradcheck` command.
pub const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "ctvae", version = VERSION, about = "Train, sample and evaluate conversational response generators")]
pub struct Cli {
    /// TOML run configuration; missing sections take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainTarget {
    Generator,
    Tcd,
    Lm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic 1-to-n corpus as train/dev/test TSV files.
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Trains a generator, the coherence discriminator or the evaluation LM.
    Train {
        #[arg(value_enum)]
        target: TrainTarget,
        /// Generator to train (required for `generator`).
        #[arg(long)]
        model_kind: Option<ModelKind>,
        /// Directory holding train.tsv and dev.tsv.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Samples candidate responses for every post of a TSV file.
    Generate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Posts, one per line; a tab ends the post (corpus files work as is).
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Must match the checkpoint's generator when given.
        #[arg(long)]
        model_kind: Option<ModelKind>,
    },
    /// Reranks generated candidates with a trained discriminator.
    Rerank {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Scores every `outputs/*.topk.jsonl` of a run directory.
    Eval {
        #[arg(long, value_name = "DIR")]
        run_dir: PathBuf,
        /// Language model; defaults to RUN/models/lm.ckpt.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Report directory; defaults to the run directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of a network's loss on toy dimensions.
    Gradcheck {
        /// seq2seq, cvae, cvae-simple, ctvae, tcd or lm; all when omitted.
        #[arg(long)]
        model_kind: Option<NetworkKind>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_posts: usize,
    pub mean_responses: usize,
    /// Drops pairs containing a word seen fewer times than this in training.
    pub min_freq: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_posts: 500,
            mean_responses: 19,
            min_freq: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of data generation and sampling.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Discriminator and LM settings; follow `model` when absent.
    pub aux: Option<AuxConfig>,
    pub generation: GenerationConfig,
    pub rerank: RerankConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
            cfg.model.seed = s;
            if let Some(a) = &mut cfg.aux {
                a.seed = s;
            }
        }
        Ok(cfg)
    }

    pub fn aux(&self) -> AuxConfig {
        self.aux.clone().unwrap_or_else(|| AuxConfig::from_model(&self.model))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(DataError, CheckpointError, TrainError, TensorError, serde_json::Error);

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seed: u64,
    wall_time_secs: f64,
    artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<serde_json::Value>,
}

fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join("manifest.json")
    } else {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

struct Run<'a> {
    command: &'a str,
    cfg: &'a RunConfig,
    seed: u64,
    start: Instant,
}

impl Run<'_> {
    fn finish(&self, at: &Path, artifacts: &[&Path], summary: Option<serde_json::Value>) -> Result<(), CliError> {
        let m = Manifest {
            command: self.command,
            version: VERSION,
            config_sha256: self.cfg.hash(),
            seed: self.seed,
            wall_time_secs: self.start.elapsed().as_secs_f64(),
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
            summary,
        };
        let path = manifest_path(at);
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| io_err(&path, e))
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_err(p, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    ensure_parent(path)?;
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::Runtime(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

struct Splits {
    train: Corpus,
    dev: Option<Corpus>,
}

fn load_splits(dir: &Path, cfg: &RunConfig) -> Result<Splits, CliError> {
    let (train, summary) = load_corpus(&dir.join("train.tsv"), "train")?;
    if summary.rejected_empty > 0 {
        eprintln!("train.tsv: skipped {} records with an empty field", summary.rejected_empty);
    }
    let train = if cfg.data.min_freq > 1 {
        train.filter_min_freq(cfg.data.min_freq)?
    } else {
        train
    };
    let dev_path = dir.join("dev.tsv");
    let dev = if dev_path.exists() {
        let (dev, _) = load_corpus(&dev_path, "dev")?;
        check_disjoint(&[&train, &dev])?;
        Some(dev)
    } else {
        None
    };
    Ok(Splits { train, dev })
}

fn build_vocab(train: &Corpus, cfg: &RunConfig) -> Vocab {
    Vocab::build(train.sentences(), cfg.model.vocab_cap)
}

fn save_with_state(mut ckpt: Checkpoint, s: &Session, path: &Path) -> Result<(), CliError> {
    ckpt.optimizer = Some(OptimizerState::capture(&s.adam, &s.params));
    ckpt.rng = Some(s.rng.clone());
    ensure_parent(path)?;
    ckpt.save(path)?;
    Ok(())
}

/// Distinct posts of a file, in first-seen order. Everything after the first
/// tab of a line is ignored.
pub fn read_posts(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut seen = HashSet::new();
    let mut posts = Vec::new();
    for line in text.lines() {
        let post: Vec<String> = line
            .split('\t')
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(String::from)
            .collect();
        if !post.is_empty() && seen.insert(post.clone()) {
            posts.push(post);
        }
    }
    if posts.is_empty() {
        return Err(CliError::Runtime(format!("{}: no posts", path.display())));
    }
    Ok(posts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub tokens: Vec<String>,
    pub ended: bool,
    pub loglik: f64,
    pub sample: usize,
}

/// One line of `generate` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPost {
    pub model: String,
    pub index: usize,
    pub post: Vec<String>,
    pub candidates: Vec<CandidateRecord>,
    pub error: Option<String>,
}

/// One line of `rerank` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPost {
    pub model: String,
    pub index: usize,
    #[serde(flatten)]
    pub output: PostOutput,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let start = Instant::now();
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out, start),
        Command::Train {
            target,
            model_kind,
            data,
            out,
        } => train(&cfg, target, model_kind, &data, &out, start),
        Command::Generate {
            checkpoint,
            input,
            out,
            model_kind,
        } => generate(&cfg, &checkpoint, &input, &out, model_kind, start),
        Command::Rerank { checkpoint, input, out } => rerank(&cfg, &checkpoint, &input, &out, start),
        Command::Eval {
            run_dir,
            checkpoint,
            out,
        } => eval(&cfg, &run_dir, checkpoint.as_deref(), out.as_deref(), start),
        Command::Gradcheck { model_kind } => gradcheck(&cfg, model_kind),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, start: Instant) -> Result<(), CliError> {
    let s = gen_synthetic(cfg.seed, cfg.data.n_posts, cfg.data.mean_responses)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut paths = Vec::new();
    for c in s.all() {
        let p = out.join(format!("{}.tsv", c.split));
        c.save(&p)?;
        eprintln!("{}: {} pairs, {} posts", p.display(), c.len(), c.num_posts());
        paths.push(p);
    }
    let run = Run {
        command: "gen-data",
        cfg,
        seed: cfg.seed,
        start,
    };
    run.finish(out, &paths.iter().map(PathBuf::as_path).collect::<Vec<_>>(), None)
}

fn train(
    cfg: &RunConfig,
    target: TrainTarget,
    kind: Option<ModelKind>,
    data: &Path,
    out: &Path,
    start: Instant,
) -> Result<(), CliError> {
    let splits = load_splits(data, cfg)?;
    let vocab = build_vocab(&splits.train, cfg);
    eprintln!("vocabulary: {} entries", vocab.len());
    let (command, seed, summary) = match target {
        TrainTarget::Generator => {
            let kind = kind.ok_or_else(|| CliError::Usage("train generator needs --model-kind".into()))?;
            let mc = ModelConfig {
                kind,
                ..cfg.model.clone()
            };
            mc.validate().map_err(CliError::Usage)?;
            let data = encode_corpus(&splits.train, &vocab, mc.max_seq_len);
            let (gen, s) = train_generator(&mc, vocab.len(), &data, |e, st| {
                eprintln!(
                    "epoch {e}: step {} nll/token {:.4} kl {:.4} kl_weight {:.3}",
                    st.steps, st.nll_per_token, st.mean_kl, st.kl_weight
                );
            })?;
            let mut summary = serde_json::json!({ "steps": s.step, "vocab": vocab.len() });
            if let Some(dev) = &splits.dev {
                let mut rng = post_rng(mc.seed, 0);
                let (nll, kl) = evaluate(&gen, &s.params, &encode_corpus(dev, &vocab, mc.max_seq_len), &mut rng)?;
                eprintln!("dev: nll/token {nll:.4} kl {kl:.4}");
                summary["dev_nll_per_token"] = nll.into();
                summary["dev_kl"] = kl.into();
            }
            save_with_state(gen.checkpoint(&s.params, &vocab), &s, out)?;
            ("train generator", mc.seed, summary)
        }
        TrainTarget::Tcd => {
            let aux = cfg.aux();
            aux.validate().map_err(CliError::Usage)?;
            let (tcd, s) = train_tcd(&aux, &splits.train, &vocab, |e, l| eprintln!("epoch {e}: loss {l:.4}"))?;
            let mut summary = serde_json::json!({ "steps": s.step, "vocab": vocab.len() });
            if let Some(dev) = &splits.dev {
                if dev.num_posts() >= 2 {
                    let labeled = encode_labeled(&make_negatives(dev, aux.seed)?, &vocab, aux.max_seq_len);
                    let acc = tcd.accuracy(&s.params, &labeled)?;
                    eprintln!("dev accuracy: {acc:.4}");
                    summary["dev_accuracy"] = acc.into();
                }
            }
            save_with_state(tcd.checkpoint(&s.params, &vocab), &s, out)?;
            ("train tcd", aux.seed, summary)
        }
        TrainTarget::Lm => {
            let aux = cfg.aux();
            aux.validate().map_err(CliError::Usage)?;
            let (lm, s) = train_lm(&aux, &splits.train, &vocab, |e, l| eprintln!("epoch {e}: nll/token {l:.4}"))?;
            let mut summary = serde_json::json!({ "steps": s.step, "vocab": vocab.len() });
            if let Some(dev) = &splits.dev {
                let ids: Vec<Vec<usize>> = dev.responses().map(|r| vocab.encode(r)).collect();
                let ppl = lm.perplexity(&s.params, &ids)?;
                eprintln!("dev perplexity: {ppl:.4}");
                summary["dev_ppl"] = ppl.into();
            }
            save_with_state(lm.checkpoint(&s.params, &vocab), &s, out)?;
            ("train lm", aux.seed, summary)
        }
    };
    let run = Run {
        command,
        cfg,
        seed,
        start,
    };
    run.finish(out, &[out], Some(summary))
}

fn generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    kind: Option<ModelKind>,
    start: Instant,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(k) = kind {
        ckpt.expect_kind(k.as_str())?;
    }
    let (gen, params) = Generator::from_checkpoint(&ckpt)?;
    let vocab = &ckpt.vocab;
    let posts = read_posts(input)?;
    let gen_cfg = GenerationConfig {
        max_len: gen.config.max_decode_len,
        ..cfg.generation
    };
    let records: Vec<GeneratedPost> = posts
        .par_iter()
        .enumerate()
        .map(|(i, post)| {
            let mut rng = post_rng(cfg.seed, i);
            let ids = vocab.encode(&post[..post.len().min(gen.config.max_seq_len)]);
            let (candidates, error) = match generate_candidates(&gen, &params, &ids, &gen_cfg, &mut rng) {
                Ok((_, cands)) => (
                    cands
                        .iter()
                        .map(|c| CandidateRecord {
                            tokens: vocab.decode(&c.tokens),
                            ended: c.ended,
                            loglik: c.loglik,
                            sample: c.sample,
                        })
                        .collect(),
                    None,
                ),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            GeneratedPost {
                model: gen.kind().as_str().to_string(),
                index: i,
                post: post.clone(),
                candidates,
                error,
            }
        })
        .collect();
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    eprintln!("{} posts, {failed} failed", records.len());
    write_jsonl(out, &records)?;
    let run = Run {
        command: "generate",
        cfg,
        seed: cfg.seed,
        start,
    };
    run.finish(out, &[out], Some(serde_json::json!({ "posts": records.len(), "failed_posts": failed })))
}

fn rerank(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path, start: Instant) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (tcd, params) = Tcd::from_checkpoint(&ckpt)?;
    let generated: Vec<GeneratedPost> = read_jsonl(input)?;
    let ranked: Vec<RankedPost> = generated
        .iter()
        .map(|g| {
            let result = match &g.error {
                Some(e) => Err(e.clone()),
                None => rerank_post(
                    (&tcd, &params),
                    &ckpt.vocab,
                    &g.post,
                    g.candidates.iter().map(|c| (c.tokens.as_slice(), c.loglik)),
                    &cfg.rerank,
                )
                .map_err(|e| e.to_string()),
            };
            let (responses, error) = match result {
                Ok(r) => (r, None),
                Err(e) => (Vec::new(), Some(e)),
            };
            RankedPost {
                model: g.model.clone(),
                index: g.index,
                output: PostOutput {
                    post: g.post.clone(),
                    responses,
                    error,
                },
            }
        })
        .collect();
    write_jsonl(out, &ranked)?;
    let run = Run {
        command: "rerank",
        cfg,
        seed: cfg.seed,
        start,
    };
    run.finish(out, &[out], None)
}

fn model_order(name: &str) -> (usize, String) {
    let pos = ModelKind::ALL.iter().position(|k| k.as_str() == name);
    (pos.unwrap_or(ModelKind::ALL.len()), name.to_string())
}

fn eval(
    cfg: &RunConfig,
    run_dir: &Path,
    lm_path: Option<&Path>,
    out: Option<&Path>,
    start: Instant,
) -> Result<(), CliError> {
    let lm_path = lm_path.map_or_else(|| run_dir.join("models").join("lm.ckpt"), Path::to_path_buf);
    let ckpt = Checkpoint::load(&lm_path)?;
    let (lm, params) = RnnLm::from_checkpoint(&ckpt)?;
    let (train, _) = load_corpus(&run_dir.join("data").join("train.tsv"), "train")?;
    let training: HashSet<Vec<String>> = train.responses().map(<[String]>::to_vec).collect();

    let outputs_dir = run_dir.join("outputs");
    let mut files: Vec<(String, PathBuf)> = fs::read_dir(&outputs_dir)
        .map_err(|e| io_err(&outputs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.strip_suffix(".topk.jsonl")?.to_string();
            Some((name, p))
        })
        .collect();
    if files.is_empty() {
        return Err(CliError::Runtime(format!(
            "{}: no *.topk.jsonl files to evaluate",
            outputs_dir.display()
        )));
    }
    files.sort_by_key(|(name, _)| model_order(name));

    let mut report = crate::metrics::MetricsReport::default();
    for (name, path) in &files {
        let ranked: Vec<RankedPost> = read_jsonl(path)?;
        let outputs: Vec<PostOutput> = ranked.into_iter().map(|r| r.output).collect();
        report
            .rows
            .push(evaluate_outputs(name, &outputs, (&lm, &params), &ckpt.vocab, &training)?);
    }
    let out = out.unwrap_or(run_dir);
    let tsv = out.join("report.tsv");
    let jsonl = out.join("report.jsonl");
    write_file(&tsv, &report.to_tsv())?;
    write_file(&jsonl, &report.to_jsonl())?;
    print!("{}", report.to_tsv());
    let run = Run {
        command: "eval",
        cfg,
        seed: cfg.seed,
        start,
    };
    run.finish(&tsv, &[&tsv, &jsonl], None)
}

fn gradcheck(cfg: &RunConfig, which: Option<NetworkKind>) -> Result<(), CliError> {
    let all: Vec<NetworkKind> = match which {
        Some(k) => vec![k],
        None => ModelKind::ALL
            .iter()
            .map(|&k| NetworkKind::Generator(k))
            .chain([NetworkKind::Tcd, NetworkKind::Lm])
            .collect(),
    };
    let mut failed = Vec::new();
    for k in all {
        let r = gradcheck_network(k, cfg.seed)?;
        let ok = r.max_rel_error < GRADCHECK_TOL;
        println!(
            "{k}\tmax_rel_error {:.3e}\tentries {}\t{}",
            r.max_rel_error,
            r.entries_checked,
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            if let Some((name, i, a, n)) = &r.worst {
                println!("  worst: {name}[{i}] analytic {a:.6e} numeric {n:.6e}");
            }
            failed.push(k.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}
