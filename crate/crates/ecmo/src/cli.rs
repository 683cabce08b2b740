//! Command-line driver.
//!
//! Subcommands: `gen-synth`, `pretrain-hed`, `finetune-hed`,
//! `extract-ecmo`, `train-matcher`, `eval-matcher`. Every value is a
//! `--flag value` pair; training subcommands also accept a plain
//! `key = value` config file whose keys are the flag names with
//! underscores. Precedence: built-in defaults, then the config file, then
//! explicit flags. Unknown flags and unknown config keys are rejected.
//!
//! Logs and progress go to standard error; data and reports go to files
//! or standard output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{
    self, encode_session, gen_synth, read_text_candidates, read_text_sessions,
    read_text_triples, write_text_candidates, write_text_sessions, write_text_triples,
    Session, SynthSpec, SynthStyle, Vocabulary,
};
use crate::error::{Error, Result};
use crate::hed::{HedConfig, HedModel};
use crate::matcher::{build_eval_example, build_examples, EcmoMode, MatcherConfig, MatcherModel};
use crate::metrics::{self, RankedList};
use crate::reps::{self, DumpLevel};
use crate::rng::Rng;
use crate::trainer::{
    self, hed_from_checkpoint, hed_to_checkpoint, load_checkpoint, matcher_from_checkpoint,
    matcher_to_checkpoint, save_checkpoint, TrainOpts,
};

struct FlagSpec {
    name: &'static str,
    default: Option<&'static str>,
    required: bool,
    help: &'static str,
}

const fn flag(name: &'static str, default: Option<&'static str>, required: bool, help: &'static str) -> FlagSpec {
    FlagSpec { name, default, required, help }
}

const GEN_SYNTH_FLAGS: &[FlagSpec] = &[
    flag("out", None, true, "output path prefix for the four data files"),
    flag("sessions", Some("200"), false, "number of sessions to generate"),
    flag("entities", Some("20"), false, "number of distinct entity tokens"),
    flag("style", Some("support"), false, "template family: support or chitchat"),
    flag("seed", Some("0"), false, "root random seed"),
];

const HED_TRAIN_FLAGS: &[FlagSpec] = &[
    flag("corpus", None, true, "training session file"),
    flag("val", None, false, "validation session file"),
    flag("config", None, false, "key = value config file"),
    flag("init-ckpt", None, false, "checkpoint to continue from"),
    flag("out-ckpt", None, true, "where to write the trained checkpoint"),
    flag("epochs", Some("1"), false, "training epochs"),
    flag("seed", Some("0"), false, "root random seed"),
    flag("embeddings", None, false, "pretrained embedding file (token v1 .. vd)"),
    flag("vocab-corpus", None, false, "comma-separated extra session files merged into the vocabulary"),
    flag("log", None, false, "also write the training log to this file"),
    flag("embed-dim", Some("300"), false, "word embedding width"),
    flag("hidden-dim", Some("300"), false, "recurrent state width"),
    flag("max-session-len", Some("10"), false, "utterances kept per session (last wins)"),
    flag("max-utterance-len", Some("50"), false, "tokens kept per utterance (first wins)"),
    flag("vocab-max", Some("60000"), false, "most frequent tokens kept per corpus"),
    flag("lr", Some("0.001"), false, "Adam learning rate"),
    flag("batch", Some("40"), false, "sessions per optimizer step"),
    flag("clip-norm", Some("5"), false, "global gradient norm bound"),
];

const EXTRACT_FLAGS: &[FlagSpec] = &[
    flag("ckpt", None, true, "encoder checkpoint"),
    flag("input", None, true, "session file to run the encoder over"),
    flag("level", Some("both"), false, "which vectors to dump: local, global, or both"),
    flag("out", None, false, "output file (standard output when absent)"),
];

const MATCHER_TRAIN_FLAGS: &[FlagSpec] = &[
    flag("triples", None, true, "labeled triple file"),
    flag("ecmo", Some("none"), false, "augmentation mode: none, frozen, or continue"),
    flag("hed-ckpt", None, false, "pretrained encoder checkpoint (frozen/continue modes)"),
    flag("out-ckpt", None, true, "where to write the trained matcher checkpoint"),
    flag("epochs", Some("1"), false, "training epochs"),
    flag("seed", Some("0"), false, "root random seed"),
    flag("config", None, false, "key = value config file"),
    flag("embeddings", None, false, "pretrained embedding file for the matcher table"),
    flag("log", None, false, "also write the training log to this file"),
    flag("embed-dim", Some("200"), false, "matcher embedding width"),
    flag("hidden-dim", Some("200"), false, "matcher recurrent state width"),
    flag("max-session-len", Some("10"), false, "utterances kept per context (last wins)"),
    flag("max-utterance-len", Some("50"), false, "tokens kept per utterance (first wins)"),
    flag("vocab-max", Some("60000"), false, "most frequent tokens kept from the triples"),
    flag("lr", Some("0.001"), false, "Adam learning rate"),
    flag("batch", Some("40"), false, "triples per optimizer step"),
    flag("clip-norm", Some("5"), false, "global gradient norm bound"),
];

const EVAL_FLAGS: &[FlagSpec] = &[
    flag("ckpt", None, true, "matcher checkpoint"),
    flag("lists", None, true, "candidate list file"),
    flag("contexts", None, true, "session file keyed by list id"),
    flag("metrics", Some("r@1,r@2,r@5,map,mrr,p@1"), false, "comma-separated metric names"),
    flag("out", None, false, "report file (standard output when absent)"),
];

const SUBCOMMANDS: &[(&str, &str, &[FlagSpec])] = &[
    ("gen-synth", "generate a synthetic dialogue corpus with train/eval files", GEN_SYNTH_FLAGS),
    ("pretrain-hed", "train the conversation encoder-decoder from scratch", HED_TRAIN_FLAGS),
    ("finetune-hed", "continue training a checkpoint on a new corpus", HED_TRAIN_FLAGS),
    ("extract-ecmo", "dump word-level and utterance-level vectors as text", EXTRACT_FLAGS),
    ("train-matcher", "train the context-response matcher", MATCHER_TRAIN_FLAGS),
    ("eval-matcher", "score candidate lists and report ranking metrics", EVAL_FLAGS),
];

fn top_help() -> String {
    let mut out = String::from("usage: ecmo <subcommand> [--flag value ...]\n\nsubcommands:\n");
    for (name, help, _) in SUBCOMMANDS {
        out.push_str(&format!("  {name:<14} {help}\n"));
    }
    out.push_str("\nrun `ecmo <subcommand> --help` for the flag list\n");
    out
}

fn subcommand_help(name: &str, specs: &[FlagSpec]) -> String {
    let mut out = format!("usage: ecmo {name} [--flag value ...]\n\nflags:\n");
    for s in specs {
        let mut line = format!("  --{} <value>", s.name);
        while line.len() < 28 {
            line.push(' ');
        }
        line.push_str(s.help);
        match (s.required, s.default) {
            (true, _) => line.push_str(" (required)"),
            (_, Some(d)) => line.push_str(&format!(" (default: {d})")),
            _ => {}
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Flag values after applying defaults, the config file, and explicit
/// flags, in that order.
#[derive(Debug)]
struct Parsed {
    values: BTreeMap<String, String>,
}

impl Parsed {
    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Usage(format!("missing required flag --{key}")))
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Usage(format!("--{key} expects a non-negative integer, got {raw:?}")))
    }

    fn u64(&self, key: &str) -> Result<u64> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Usage(format!("--{key} expects an integer seed, got {raw:?}")))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Usage(format!("--{key} expects a number, got {raw:?}")))
    }
}

/// Parse `--flag value` / `--flag=value` pairs against the spec list,
/// then merge the config file (when the spec set includes one).
/// Returns None when help was requested and printed.
fn parse_flags(name: &str, specs: &[FlagSpec], args: &[String]) -> Result<Option<Parsed>> {
    let known = |key: &str| specs.iter().any(|s| s.name == key);
    let mut explicit: BTreeMap<String, String> = BTreeMap::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--help" || arg == "-h" {
            print!("{}", subcommand_help(name, specs));
            return Ok(None);
        }
        let stripped = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("expected --flag, got {arg:?}")))?;
        let (key, value) = match stripped.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let key = stripped.to_string();
                i += 1;
                let value = args
                    .get(i)
                    .ok_or_else(|| Error::Usage(format!("flag --{key} needs a value")))?
                    .clone();
                (key, value)
            }
        };
        if !known(&key) {
            return Err(Error::Usage(format!("unknown flag --{key} for {name}")));
        }
        if explicit.insert(key.clone(), value).is_some() {
            return Err(Error::Usage(format!("flag --{key} given twice")));
        }
        i += 1;
    }

    let mut values: BTreeMap<String, String> = BTreeMap::new();
    for s in specs {
        if let Some(d) = s.default {
            values.insert(s.name.to_string(), d.to_string());
        }
    }
    // config file settles between defaults and explicit flags
    if let Some(cfg_path) = explicit.get("config").map(PathBuf::from) {
        for (key, value) in read_config_file(&cfg_path)? {
            let flag_key = key.replace('_', "-");
            if !known(&flag_key) {
                return Err(Error::Usage(format!(
                    "unknown config key {key:?} in {}",
                    cfg_path.display()
                )));
            }
            values.insert(flag_key, value);
        }
    }
    for (k, v) in explicit {
        values.insert(k, v);
    }
    for s in specs {
        if s.required && !values.contains_key(s.name) {
            return Err(Error::Usage(format!("missing required flag --{}", s.name)));
        }
    }
    Ok(Some(Parsed { values }))
}

fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Usage(format!(
                "config line {} is not `key = value`: {line:?}",
                lineno + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn run(args: &[String]) -> Result<()> {
    let Some(first) = args.first() else {
        return Err(Error::Usage(format!("no subcommand given\n{}", top_help())));
    };
    if first == "--help" || first == "-h" {
        print!("{}", top_help());
        return Ok(());
    }
    let rest = &args[1..];
    match first.as_str() {
        "gen-synth" => cmd_gen_synth(rest),
        "pretrain-hed" => cmd_train_hed(rest, false),
        "finetune-hed" => cmd_train_hed(rest, true),
        "extract-ecmo" => cmd_extract(rest),
        "train-matcher" => cmd_train_matcher(rest),
        "eval-matcher" => cmd_eval(rest),
        other => Err(Error::Usage(format!(
            "unknown subcommand {other:?}\n{}",
            top_help()
        ))),
    }
}

// ── gen-synth ───────────────────────────────────────────────────────

fn cmd_gen_synth(args: &[String]) -> Result<()> {
    let Some(p) = parse_flags("gen-synth", GEN_SYNTH_FLAGS, args)? else {
        return Ok(());
    };
    let n_sessions = p.usize("sessions")?;
    let n_entities = p.usize("entities")?;
    if n_sessions == 0 {
        return Err(Error::Usage("--sessions must be positive".into()));
    }
    if n_entities < 2 {
        return Err(Error::Usage("--entities must be at least 2".into()));
    }
    let style: SynthStyle = p.require("style")?.parse()?;
    let seed = p.u64("seed")?;
    let spec = SynthSpec::new(n_sessions, n_entities, style);
    let data = gen_synth(&spec, seed)?;

    let prefix = p.require("out")?;
    let path = |suffix: &str| PathBuf::from(format!("{prefix}.{suffix}.txt"));
    write_text_sessions(&path("sessions"), &data.sessions)?;
    write_text_triples(&path("triples"), &data.triples)?;
    write_text_candidates(&path("candidates"), &data.lists)?;
    write_text_sessions(&path("contexts"), &data.contexts)?;
    eprintln!(
        "wrote {} sessions, {} triples, {} candidate lists under {prefix}.*",
        data.sessions.len(),
        data.triples.len(),
        data.lists.len()
    );
    Ok(())
}

// ── pretrain-hed / finetune-hed ─────────────────────────────────────

fn load_sessions(path: &Path, vocab: &Vocabulary, cfg: &HedConfig) -> Result<Vec<Session>> {
    let text_sessions = read_text_sessions(path)?;
    let mut unk = 0usize;
    let sessions = text_sessions
        .iter()
        .map(|s| {
            let encoded = encode_session(vocab, s, true, &mut unk);
            data::truncate(&encoded, cfg.max_session_len, cfg.max_utterance_len)
        })
        .collect();
    if unk > 0 {
        eprintln!("note: {unk} tokens outside the vocabulary mapped to <unk>");
    }
    Ok(sessions)
}

fn train_opts(p: &Parsed) -> Result<TrainOpts> {
    Ok(TrainOpts {
        epochs: p.usize("epochs")?,
        batch_size: p.usize("batch")?,
        lr: p.f64("lr")?,
        clip_norm: match p.f64("clip-norm")? {
            x if x <= 0.0 => None,
            x => Some(x),
        },
        seed: p.u64("seed")?,
    })
}

fn emit_log(lines: &[trainer::LogLine], log_path: Option<&Path>) -> Result<()> {
    for l in lines {
        eprintln!("{l}");
    }
    if let Some(path) = log_path {
        fs::write(path, trainer::render_log(lines))?;
    }
    Ok(())
}

fn cmd_train_hed(args: &[String], finetune: bool) -> Result<()> {
    let name = if finetune { "finetune-hed" } else { "pretrain-hed" };
    let Some(p) = parse_flags(name, HED_TRAIN_FLAGS, args)? else {
        return Ok(());
    };
    if finetune && p.get("init-ckpt").is_none() {
        return Err(Error::Usage("finetune-hed requires --init-ckpt".into()));
    }
    let seed = p.u64("seed")?;
    let corpus_path = p.path("corpus")?;

    let (mut model, vocab) = match p.opt_path("init-ckpt") {
        Some(ckpt_path) => {
            let (model, vocab) = hed_from_checkpoint(&load_checkpoint(&ckpt_path)?)?;
            // explicit dimension knobs must agree with the checkpoint
            for (key, have) in [
                ("embed-dim", model.config.embed_dim),
                ("hidden-dim", model.config.hidden_dim),
            ] {
                let want = p.usize(key)?;
                let is_default = HED_TRAIN_FLAGS
                    .iter()
                    .find(|s| s.name == key)
                    .and_then(|s| s.default)
                    .map(|d| d == p.get(key).unwrap_or_default())
                    .unwrap_or(false);
                if !is_default && want != have {
                    return Err(Error::Compatibility(format!(
                        "--{key} {want} conflicts with checkpoint value {have}"
                    )));
                }
            }
            (model, vocab)
        }
        None => {
            let train_text = read_text_sessions(&corpus_path)?;
            let mut corpora = vec![data::corpus_tokens(&train_text, true)];
            if let Some(extra) = p.get("vocab-corpus") {
                for file in extra.split(',') {
                    let text = read_text_sessions(Path::new(file))?;
                    corpora.push(data::corpus_tokens(&text, true));
                }
            }
            let vocab = Vocabulary::build(&corpora, p.usize("vocab-max")?)?;
            let config = HedConfig {
                vocab_size: vocab.len(),
                embed_dim: p.usize("embed-dim")?,
                hidden_dim: p.usize("hidden-dim")?,
                max_session_len: p.usize("max-session-len")?,
                max_utterance_len: p.usize("max-utterance-len")?,
            };
            let mut rng = Rng::derive(seed, "hed_init", 0);
            let model = match p.opt_path("embeddings") {
                Some(embed_path) => {
                    let (table, n) =
                        data::load_embeddings(&embed_path, &vocab, config.embed_dim, seed)?;
                    eprintln!("loaded {n} pretrained embedding rows");
                    HedModel::new_with_embeddings(config, table, &mut rng)?
                }
                None => HedModel::new(config, &mut rng)?,
            };
            (model, vocab)
        }
    };

    let corpus = load_sessions(&corpus_path, &vocab, &model.config)?;
    let val = match p.opt_path("val") {
        Some(path) => Some(load_sessions(&path, &vocab, &model.config)?),
        None => None,
    };
    let opts = train_opts(&p)?;
    let log = trainer::train_hed(&mut model, &corpus, val.as_deref(), &opts)?;
    emit_log(&log, p.opt_path("log").as_deref())?;
    save_checkpoint(&p.path("out-ckpt")?, &hed_to_checkpoint(&model, &vocab))?;
    eprintln!("saved checkpoint to {}", p.require("out-ckpt")?);
    Ok(())
}

// ── extract-ecmo ────────────────────────────────────────────────────

fn cmd_extract(args: &[String]) -> Result<()> {
    let Some(p) = parse_flags("extract-ecmo", EXTRACT_FLAGS, args)? else {
        return Ok(());
    };
    let (model, vocab) = hed_from_checkpoint(&load_checkpoint(&p.path("ckpt")?)?)?;
    let level: DumpLevel = p.require("level")?.parse()?;
    let text_sessions = read_text_sessions(&p.path("input")?)?;
    let mut unk = 0usize;
    let mut out = String::new();
    for (idx, text) in text_sessions.iter().enumerate() {
        let session = encode_session(&vocab, text, true, &mut unk);
        let session = data::truncate(
            &session,
            model.config.max_session_len,
            model.config.max_utterance_len,
        );
        let extracted = reps::extract(&model, &session)?;
        reps::dump_session(&mut out, idx, &session, &vocab, &extracted, level);
    }
    if unk > 0 {
        eprintln!("warning: {unk} tokens mapped to <unk>");
    }
    match p.opt_path("out") {
        Some(path) => fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

// ── train-matcher ───────────────────────────────────────────────────

fn cmd_train_matcher(args: &[String]) -> Result<()> {
    let Some(p) = parse_flags("train-matcher", MATCHER_TRAIN_FLAGS, args)? else {
        return Ok(());
    };
    let mode: EcmoMode = p.require("ecmo")?.parse()?;
    let seed = p.u64("seed")?;
    let hed_loaded = match (mode, p.opt_path("hed-ckpt")) {
        (EcmoMode::None, _) => None,
        (_, Some(path)) => Some(hed_from_checkpoint(&load_checkpoint(&path)?)?),
        (_, None) => {
            return Err(Error::Usage(format!(
                "--ecmo {mode} requires --hed-ckpt"
            )))
        }
    };
    let (hed_model, hed_vocab) = match hed_loaded {
        Some((m, v)) => (Some(m), Some(v)),
        None => (None, None),
    };

    let triples = read_text_triples(&p.path("triples")?)?;
    if triples.is_empty() {
        return Err(Error::Contract("triple file has no examples".into()));
    }
    let mut tokens = Vec::new();
    for (_, ctx, resp) in &triples {
        for u in ctx {
            tokens.extend(data::tokenize(u, true));
        }
        tokens.extend(data::tokenize(resp, true));
    }
    let vocab = Vocabulary::build(&[tokens], p.usize("vocab-max")?)?;

    let mut max_session_len = p.usize("max-session-len")?;
    let mut max_utterance_len = p.usize("max-utterance-len")?;
    if let Some(h) = &hed_model {
        // contexts must also fit through the encoder
        if h.config.max_session_len < max_session_len {
            max_session_len = h.config.max_session_len;
            eprintln!("note: clamping max session length to the encoder's {max_session_len}");
        }
        if h.config.max_utterance_len < max_utterance_len {
            max_utterance_len = h.config.max_utterance_len;
            eprintln!("note: clamping max utterance length to the encoder's {max_utterance_len}");
        }
    }
    let config = MatcherConfig {
        vocab_size: vocab.len(),
        embed_dim: p.usize("embed-dim")?,
        hidden_dim: p.usize("hidden-dim")?,
        ecmo_mode: mode,
        max_session_len,
        max_utterance_len,
    };
    let mut rng = Rng::derive(seed, "matcher_init", 0);
    let mut model = MatcherModel::new(config, hed_model, &mut rng)?;
    if let Some(embed_path) = p.opt_path("embeddings") {
        let (table, n) = data::load_embeddings(&embed_path, &vocab, config.embed_dim, seed)?;
        eprintln!("loaded {n} pretrained embedding rows");
        model.embed.data = table;
    }

    let examples = build_examples(
        &triples,
        &vocab,
        hed_vocab.as_ref(),
        max_session_len,
        max_utterance_len,
    )?;
    let opts = train_opts(&p)?;
    let log = trainer::train_matcher(&mut model, &examples, &opts)?;
    emit_log(&log, p.opt_path("log").as_deref())?;
    let ckpt = matcher_to_checkpoint(&model, &vocab, hed_vocab.as_ref())?;
    save_checkpoint(&p.path("out-ckpt")?, &ckpt)?;
    eprintln!("saved checkpoint to {}", p.require("out-ckpt")?);
    Ok(())
}

// ── eval-matcher ────────────────────────────────────────────────────

fn cmd_eval(args: &[String]) -> Result<()> {
    let Some(p) = parse_flags("eval-matcher", EVAL_FLAGS, args)? else {
        return Ok(());
    };
    let (model, vocab, hed_vocab) =
        matcher_from_checkpoint(&load_checkpoint(&p.path("ckpt")?)?)?;
    let lists = read_text_candidates(&p.path("lists")?)?;
    let contexts = read_text_sessions(&p.path("contexts")?)?;
    if lists.is_empty() {
        return Err(Error::Format("candidate file has no lists".into()));
    }
    if contexts.len() < lists.len() {
        return Err(Error::Format(format!(
            "{} candidate lists but only {} contexts",
            lists.len(),
            contexts.len()
        )));
    }

    let augmented = model.config.ecmo_mode != EcmoMode::None;
    let mut ranked = Vec::with_capacity(lists.len());
    for (list_id, list) in lists.iter().enumerate() {
        let context = &contexts[list_id];
        let mut scores = Vec::with_capacity(list.len());
        let mut labels = Vec::with_capacity(list.len());
        // the context extraction is shared by every candidate of the list
        let mut ctx_reps: Option<crate::reps::EcmoReps> = None;
        for (label, response) in list {
            let ex = build_eval_example(
                context,
                response,
                &vocab,
                hed_vocab.as_ref(),
                model.config.max_session_len,
                model.config.max_utterance_len,
            )?;
            let score = if augmented {
                let hed = model.hed.as_ref().unwrap();
                if ctx_reps.is_none() {
                    ctx_reps = Some(reps::extract(
                        hed,
                        &crate::data::Session::new(ex.ctx_h.clone()),
                    )?);
                }
                let frozen = crate::matcher::FrozenReps {
                    ctx: ctx_reps.clone().unwrap(),
                    resp: reps::extract_response(hed, &ex.resp_h)?,
                };
                model.score_with(&ex, Some(&frozen))?.prob
            } else {
                model.score(&ex)?.prob
            };
            scores.push(score);
            labels.push(*label);
        }
        ranked.push(RankedList::new(scores, labels)?);
    }

    let mut entries: Vec<(String, f64)> = Vec::new();
    for metric in p.require("metrics")?.split(',') {
        let metric = metric.trim();
        match metric {
            "map" => entries.push(("map".to_string(), metrics::map(&ranked)?)),
            "mrr" => entries.push(("mrr".to_string(), metrics::mrr(&ranked)?)),
            "p@1" => entries.push(("p@1".to_string(), metrics::p_at_1(&ranked)?)),
            other => {
                let k: usize = other
                    .strip_prefix("r@")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| {
                        Error::Usage(format!(
                            "unknown metric {other:?}; expected r@<k>, map, mrr, or p@1"
                        ))
                    })?;
                let n = ranked[0].len();
                entries.push((format!("r{n}@{k}"), metrics::r_at_k(&ranked, n, k)?));
            }
        }
    }
    let report = metrics::render_report(&entries);
    match p.opt_path("out") {
        Some(path) => fs::write(path, report)?,
        None => print!("{report}"),
    }
    Ok(())
}
