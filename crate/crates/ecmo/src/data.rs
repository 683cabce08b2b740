//! Corpus ingestion: tokenization, vocabularies, truncation, negative
//! sampling, embedding files, synthetic dialogue generation, and the plain
//! text file formats shared by the CLI.
//!
//! File formats (all UTF-8):
//! - session corpus: one session per line, utterances separated by TAB,
//!   tokens separated by single spaces;
//! - labeled triples: `label<TAB>utt_1<TAB>...<TAB>utt_n<TAB>response`;
//! - candidate lists: `list_id<TAB>rel_label<TAB>response`, lists
//!   contiguous, contexts in a parallel session file where `list_id` is the
//!   zero-based line number;
//! - embeddings: `token v1 ... vd` per line.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// An utterance as token ids.
pub type Utterance = Vec<usize>;

/// An ordered list of utterances; the unit of encoder training/extraction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub utterances: Vec<Utterance>,
}

impl Session {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Session { utterances }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// One matcher training example: (y, s, r).
#[derive(Clone, Debug)]
pub struct LabeledTriple {
    pub label: bool,
    pub context: Session,
    pub response: Utterance,
}

/// One evaluation list: a context and its scored candidates.
#[derive(Clone, Debug)]
pub struct CandidateList {
    pub context: Session,
    pub candidates: Vec<(Utterance, bool)>,
}

// ── Tokenization ────────────────────────────────────────────────────

/// Whitespace split with optional lowercasing; no other normalization.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

// ── Vocabulary ──────────────────────────────────────────────────────

/// Token table with the four reserved ids up front. Unknown lookups map
/// to `<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Per corpus keep the `max_per_corpus` most frequent tokens (ties by
    /// first occurrence), then take the union across corpora in order.
    pub fn build(corpora: &[Vec<String>], max_per_corpus: usize) -> Result<Vocabulary> {
        if corpora.is_empty() {
            return Err(Error::Contract("vocabulary needs at least one corpus".into()));
        }
        if max_per_corpus == 0 {
            return Err(Error::Contract("max vocabulary size must be positive".into()));
        }
        let mut vocab = Vocabulary::reserved_only();
        for corpus in corpora {
            let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
            for (pos, tok) in corpus.iter().enumerate() {
                let entry = counts.entry(tok.as_str()).or_insert((0, pos));
                entry.0 += 1;
            }
            let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
            for (tok, _) in ranked.into_iter().take(max_per_corpus) {
                vocab.insert(tok);
            }
        }
        Ok(vocab)
    }

    pub fn reserved_only() -> Vocabulary {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in RESERVED {
            v.insert(tok);
        }
        v
    }

    /// Rebuild from an explicit token list (checkpoint loading). The list
    /// must start with the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(String::from)
        {
            return Err(Error::Format(
                "vocabulary must start with <pad> <unk> <bos> <eos>".into(),
            ));
        }
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in &tokens {
            if v.token_to_id.contains_key(tok) {
                return Err(Error::Format(format!("duplicate vocabulary token {tok:?}")));
            }
            v.insert(tok);
        }
        Ok(v)
    }

    fn insert(&mut self, token: &str) {
        if !self.token_to_id.contains_key(token) {
            self.token_to_id.insert(token.to_string(), self.id_to_token.len());
            self.id_to_token.push(token.to_string());
        }
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

// ── Truncation ──────────────────────────────────────────────────────

/// Keep the last `max_session_len` utterances and the first
/// `max_utterance_len` tokens of each.
pub fn truncate(session: &Session, max_session_len: usize, max_utterance_len: usize) -> Session {
    let start = session.len().saturating_sub(max_session_len);
    let utterances = session.utterances[start..]
        .iter()
        .map(|u| u[..u.len().min(max_utterance_len)].to_vec())
        .collect();
    Session::new(utterances)
}

// ── Negative sampling ───────────────────────────────────────────────

/// For every positive, draw `ratio` responses uniformly from `pool`
/// (excluding the true response by value). Deterministic under `seed`.
pub fn sample_negatives(
    positives: &[LabeledTriple],
    pool: &[Utterance],
    ratio: usize,
    seed: u64,
) -> Result<Vec<LabeledTriple>> {
    if pool.len() < 2 {
        return Err(Error::Contract(format!(
            "response pool has {} entries; need at least 2",
            pool.len()
        )));
    }
    let mut rng = Rng::derive(seed, "sample_negatives", 0);
    let mut out = Vec::with_capacity(positives.len() * (ratio + 1));
    for pos in positives {
        if !pool.iter().any(|r| *r != pos.response) {
            return Err(Error::Contract(
                "response pool has no candidate distinct from the positive".into(),
            ));
        }
        out.push(pos.clone());
        for _ in 0..ratio {
            let neg = loop {
                let cand = &pool[rng.index(pool.len())];
                if *cand != pos.response {
                    break cand.clone();
                }
            };
            out.push(LabeledTriple {
                label: false,
                context: pos.context.clone(),
                response: neg,
            });
        }
    }
    Ok(out)
}

// ── Embedding file loader ───────────────────────────────────────────

/// Rows for in-vocab tokens come from the file (last occurrence wins);
/// every other row is drawn from normal(0, 0.1). Returns the flat
/// [vocab × dim] table and the number of rows taken from the file.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    let text = fs::read_to_string(path)?;
    let mut rng = Rng::derive(seed, "embed_init", 0);
    let mut table = vec![0.0; vocab.len() * dim];
    for row in table.iter_mut() {
        *row = rng.normal(0.0, 0.1);
    }
    let mut loaded = vec![false; vocab.len()];
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap();
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::Format(format!(
                "line {}: expected {} embedding values, found {}",
                lineno + 1,
                dim,
                values.len()
            )));
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.lookup(token);
        for (j, v) in values.iter().enumerate() {
            table[id * dim + j] = v.parse::<f64>().map_err(|_| {
                Error::Format(format!("line {}: bad float {v:?}", lineno + 1))
            })?;
        }
        loaded[id] = true;
    }
    let n_loaded = loaded.iter().filter(|&&x| x).count();
    Ok((table, n_loaded))
}

// ── Text session I/O ────────────────────────────────────────────────

/// Sessions with utterances kept as raw text.
pub type TextSession = Vec<String>;

pub fn read_text_sessions(path: &Path) -> Result<Vec<TextSession>> {
    let text = fs::read_to_string(path)?;
    let mut sessions = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let utterances: Vec<String> = line.split('\t').map(|s| s.to_string()).collect();
        if utterances.iter().any(|u| u.trim().is_empty()) {
            return Err(Error::Format(format!(
                "line {}: empty utterance in session",
                lineno + 1
            )));
        }
        sessions.push(utterances);
    }
    Ok(sessions)
}

pub fn write_text_sessions(path: &Path, sessions: &[TextSession]) -> Result<()> {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&s.join("\t"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// All whitespace-separated tokens of a text corpus, in order.
pub fn corpus_tokens(sessions: &[TextSession], lowercase: bool) -> Vec<String> {
    let mut toks = Vec::new();
    for s in sessions {
        for u in s {
            toks.extend(tokenize(u, lowercase));
        }
    }
    toks
}

/// Map a text session through a vocabulary; counts how many tokens fell
/// back to `<unk>`.
pub fn encode_session(
    vocab: &Vocabulary,
    session: &TextSession,
    lowercase: bool,
    unk_count: &mut usize,
) -> Session {
    let utterances = session
        .iter()
        .map(|u| {
            let toks = tokenize(u, lowercase);
            let ids = vocab.encode(&toks);
            *unk_count += ids.iter().filter(|&&i| i == UNK).count();
            ids
        })
        .collect();
    Session::new(utterances)
}

// ── Labeled triple I/O ──────────────────────────────────────────────

/// Triples kept as raw text: (label, context utterances, response).
pub type TextTriple = (bool, Vec<String>, String);

pub fn read_text_triples(path: &Path) -> Result<Vec<TextTriple>> {
    let text = fs::read_to_string(path)?;
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!(
                "line {}: need label, at least one context utterance, and a response",
                lineno + 1
            )));
        }
        let label = match fields[0] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Format(format!(
                    "line {}: label must be 0 or 1, found {other:?}",
                    lineno + 1
                )))
            }
        };
        let context = fields[1..fields.len() - 1]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let response = fields[fields.len() - 1].to_string();
        triples.push((label, context, response));
    }
    Ok(triples)
}

pub fn write_text_triples(path: &Path, triples: &[TextTriple]) -> Result<()> {
    let mut out = String::new();
    for (label, context, response) in triples {
        out.push_str(if *label { "1" } else { "0" });
        for u in context {
            out.push('\t');
            out.push_str(u);
        }
        out.push('\t');
        out.push_str(response);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ── Candidate list I/O ──────────────────────────────────────────────

/// Candidate lists as raw text, grouped by list id in file order.
pub type TextCandidateList = Vec<(bool, String)>;

pub fn read_text_candidates(path: &Path) -> Result<Vec<TextCandidateList>> {
    let text = fs::read_to_string(path)?;
    let mut lists: Vec<TextCandidateList> = Vec::new();
    let mut current_id: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "line {}: expected `list_id<TAB>label<TAB>response`",
                lineno + 1
            )));
        }
        let list_id: usize = fields[0].parse().map_err(|_| {
            Error::Format(format!("line {}: bad list id {:?}", lineno + 1, fields[0]))
        })?;
        let label = match fields[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Format(format!(
                    "line {}: label must be 0 or 1, found {other:?}",
                    lineno + 1
                )))
            }
        };
        match current_id {
            Some(id) if id == list_id => {}
            Some(id) if list_id == id + 1 => {
                current_id = Some(list_id);
                lists.push(Vec::new());
            }
            None if list_id == 0 => {
                current_id = Some(0);
                lists.push(Vec::new());
            }
            _ => {
                return Err(Error::Format(format!(
                    "line {}: list ids must be contiguous from 0, found {list_id}",
                    lineno + 1
                )))
            }
        }
        lists.last_mut().unwrap().push((label, fields[2].to_string()));
    }
    Ok(lists)
}

pub fn write_text_candidates(path: &Path, lists: &[TextCandidateList]) -> Result<()> {
    let mut out = String::new();
    for (id, list) in lists.iter().enumerate() {
        for (label, response) in list {
            out.push_str(&format!(
                "{id}\t{}\t{response}\n",
                if *label { "1" } else { "0" }
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ── Synthetic corpus ────────────────────────────────────────────────

/// Template family for the generated dialogues. The two styles share no
/// content words, which gives two distinguishable domains for the
/// pre-train/fine-tune workflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthStyle {
    Support,
    Chitchat,
}

impl std::str::FromStr for SynthStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<SynthStyle> {
        match s {
            "support" => Ok(SynthStyle::Support),
            "chitchat" => Ok(SynthStyle::Chitchat),
            other => Err(Error::Usage(format!(
                "unknown style {other:?}; expected support or chitchat"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_sessions: usize,
    pub n_entities: usize,
    pub n_candidates: usize,
    pub style: SynthStyle,
}

impl SynthSpec {
    pub fn new(n_sessions: usize, n_entities: usize, style: SynthStyle) -> Self {
        SynthSpec { n_sessions, n_entities, n_candidates: 10, style }
    }

    fn validate(&self) -> Result<()> {
        if self.n_sessions == 0 {
            return Err(Error::Contract("need at least one session".into()));
        }
        if self.n_entities < 2 {
            return Err(Error::Contract("need at least two entities".into()));
        }
        if self.n_candidates < 2 {
            return Err(Error::Contract("need at least two candidates per list".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    /// Full four-turn sessions (encoder training data).
    pub sessions: Vec<TextSession>,
    /// 1:1 positive/negative triples over the three-turn contexts.
    pub triples: Vec<TextTriple>,
    /// Ten-way candidate lists, one per session.
    pub lists: Vec<TextCandidateList>,
    /// The three-turn context of each list, parallel to `lists`.
    pub contexts: Vec<TextSession>,
}

struct Templates {
    openers: &'static [&'static str],
    middles1: &'static [&'static str],
    middles2: &'static [&'static str],
    responses: &'static [&'static str],
    entity_prefix: &'static str,
}

// The entity is introduced in the opener, persists into the second turn,
// and is absent from the last context turn, so ranking the response takes
// session-level memory; the correct response echoes it twice, first token
// included. Conversations are coherent: the two middle turns follow the
// opener's phrasing (one template index drives all three), so the next
// turn is predictable only from a context-sensitive state. The response
// phrasing is drawn independently, which keeps the entity the one usable
// ranking signal.
const SUPPORT: Templates = Templates {
    openers: &[
        "hello i have a problem with {E}",
        "hi there my {E} keeps failing",
        "help needed with {E} on this machine",
        "good morning something is wrong with {E}",
    ],
    middles1: &[
        "{E} problems again so what goes wrong",
        "{E} acting up since when exactly",
        "{E} failing how often per day",
        "{E} broken for how long now",
    ],
    middles2: &[
        "it crashes right after boot",
        "it started after the last update",
        "yes it fails on every attempt",
        "since the kernel upgrade last week",
    ],
    responses: &[
        "{E} needs a reinstall so purge {E} first",
        "{E} should be downgraded reinstall {E} later",
        "{E} has a broken config check {E} again",
        "{E} may be corrupted replace {E} tonight",
    ],
    entity_prefix: "pkg",
};

const CHITCHAT: Templates = Templates {
    openers: &[
        "hey did you hear about {E} yesterday",
        "so i finally tried {E} last night",
        "my friend keeps talking about {E}",
        "honestly {E} surprised me this week",
    ],
    middles1: &[
        "{E} really how was it",
        "{E} seriously tell me more",
        "{E} again what happened then",
        "{E} wow i had no idea",
    ],
    middles2: &[
        "it was better than expected",
        "it turned into a long night",
        "they would not stop recommending it",
        "it completely changed my plans",
    ],
    responses: &[
        "{E} is worth it visit {E} soon",
        "{E} deserves the hype tell {E} stories",
        "{E} can wait skip {E} this month",
        "{E} was lovely take friends to {E}",
    ],
    entity_prefix: "place",
};

fn fill(template: &str, entity: &str) -> String {
    template.replace("{E}", entity)
}

/// Generate template dialogues where the correct final response echoes an
/// entity introduced three turns earlier and absent from the last context
/// utterance; distractors echo entities of other sessions.
pub fn gen_synth(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let t = match spec.style {
        SynthStyle::Support => &SUPPORT,
        SynthStyle::Chitchat => &CHITCHAT,
    };
    let mut rng_entity = Rng::derive(seed, "synth.entity", 0);
    let mut rng_template = Rng::derive(seed, "synth.template", 0);
    let mut rng_distract = Rng::derive(seed, "synth.distractor", 0);
    let mut rng_shuffle = Rng::derive(seed, "synth.shuffle", 0);

    let entities: Vec<String> = (0..spec.n_entities)
        .map(|i| format!("{}{}", t.entity_prefix, i))
        .collect();

    let mut sessions = Vec::with_capacity(spec.n_sessions);
    let mut session_entities = Vec::with_capacity(spec.n_sessions);
    for _ in 0..spec.n_sessions {
        let e = &entities[rng_entity.index(entities.len())];
        // one style index drives the opener and both middle turns; the
        // response style is independent
        let style = rng_template.index(t.openers.len());
        let response = rng_template.index(t.responses.len());
        let session = vec![
            fill(t.openers[style], e),
            fill(t.middles1[style], e),
            t.middles2[style].to_string(),
            fill(t.responses[response], e),
        ];
        sessions.push(session);
        session_entities.push(e.clone());
    }

    // one distractor response with a different entity
    let other_response = |i: usize, rng: &mut Rng| -> Result<String> {
        if !session_entities.iter().any(|e| *e != session_entities[i]) {
            return Err(Error::Contract(
                "all sessions share one entity; cannot build distractors".into(),
            ));
        }
        loop {
            let j = rng.index(sessions.len());
            if session_entities[j] != session_entities[i] {
                return Ok(sessions[j][3].clone());
            }
        }
    };

    let mut triples = Vec::with_capacity(spec.n_sessions * 2);
    let mut lists = Vec::with_capacity(spec.n_sessions);
    let mut contexts = Vec::with_capacity(spec.n_sessions);
    for i in 0..spec.n_sessions {
        let context: TextSession = sessions[i][..3].to_vec();
        triples.push((true, context.clone(), sessions[i][3].clone()));
        let neg = other_response(i, &mut rng_distract)?;
        triples.push((false, context.clone(), neg));

        let mut list: TextCandidateList = vec![(true, sessions[i][3].clone())];
        while list.len() < spec.n_candidates {
            list.push((false, other_response(i, &mut rng_distract)?));
        }
        rng_shuffle.shuffle(&mut list);
        lists.push(list);
        contexts.push(context);
    }

    Ok(SynthData { sessions, triples, lists, contexts })
}
