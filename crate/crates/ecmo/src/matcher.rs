//! Context-response matching.
//!
//! The baseline g(s,r) is a hierarchical dual encoder: a word-level biGRU
//! with max pooling turns each utterance into a vector, a second GRU
//! aggregates the utterance vectors into a context vector c, the response
//! is encoded by its own word-level biGRU with max pooling into r, and the
//! score is σ(cᵀ·M·r + b).
//!
//! With a pretrained conversation encoder attached, every word embedding is
//! extended with the word's local contextual vector at the input layer, and
//! a second bilinear score over the two global vectors (last context state,
//! response state) is added to the base logit at the output layer. The two
//! logits are summed and squashed once, so the blended score stays a
//! probability. The attached encoder is either frozen (its states enter the
//! tape as constants) or trained further under the matching loss.

use crate::data::{Session, TextTriple, Vocabulary};
use crate::error::{Error, Result};
use crate::hed::{
    encode_session_ids, gru_cell, GruIds, GruParams, HedIds, HedModel,
};
use crate::reps;
use crate::rng::Rng;
use crate::tensor::{Param, Tape, TensorId};

const INIT_RANGE: f64 = 0.08;
const EMBED_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EcmoMode {
    None,
    Frozen,
    Continue,
}

impl std::fmt::Display for EcmoMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EcmoMode::None => "none",
            EcmoMode::Frozen => "frozen",
            EcmoMode::Continue => "continue",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for EcmoMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<EcmoMode> {
        match s {
            "none" => Ok(EcmoMode::None),
            "frozen" => Ok(EcmoMode::Frozen),
            "continue" => Ok(EcmoMode::Continue),
            other => Err(Error::Usage(format!(
                "unknown ecmo mode {other:?}; expected none, frozen, or continue"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatcherConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub ecmo_mode: EcmoMode,
    pub max_session_len: usize,
    pub max_utterance_len: usize,
}

impl MatcherConfig {
    /// Defaults: 200-dimensional embeddings and hidden states.
    pub fn with_defaults(vocab_size: usize, ecmo_mode: EcmoMode) -> Self {
        MatcherConfig {
            vocab_size,
            embed_dim: 200,
            hidden_dim: 200,
            ecmo_mode,
            max_session_len: 10,
            max_utterance_len: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_session_len", self.max_session_len),
            ("max_utterance_len", self.max_utterance_len),
        ] {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One training/evaluation example with both tokenizations: the matcher's
/// own ids and, in the augmented modes, the conversation encoder's ids
/// aligned token by token.
#[derive(Clone, Debug)]
pub struct MatchExample {
    pub label: bool,
    pub ctx_m: Vec<Vec<usize>>,
    pub resp_m: Vec<usize>,
    pub ctx_h: Vec<Vec<usize>>,
    pub resp_h: Vec<usize>,
}

impl MatchExample {
    /// Tokenize a text triple once and map through both vocabularies by
    /// position; truncation happens before mapping so both views align.
    pub fn build(
        triple: &TextTriple,
        matcher_vocab: &Vocabulary,
        hed_vocab: Option<&Vocabulary>,
        max_session_len: usize,
        max_utterance_len: usize,
    ) -> Result<MatchExample> {
        let (label, ctx_text, resp_text) = triple;
        if ctx_text.is_empty() {
            return Err(Error::EmptySequence("triple has an empty context".into()));
        }
        let ctx_tokens: Vec<Vec<String>> = ctx_text
            .iter()
            .map(|u| crate::data::tokenize(u, true))
            .collect();
        if ctx_tokens.iter().any(|u| u.is_empty()) {
            return Err(Error::EmptySequence("context utterance has no tokens".into()));
        }
        let resp_tokens = crate::data::tokenize(resp_text, true);
        if resp_tokens.is_empty() {
            return Err(Error::EmptySequence("response has no tokens".into()));
        }
        let start = ctx_tokens.len().saturating_sub(max_session_len);
        let ctx_tokens: Vec<Vec<String>> = ctx_tokens[start..]
            .iter()
            .map(|u| u[..u.len().min(max_utterance_len)].to_vec())
            .collect();
        let resp_tokens = resp_tokens[..resp_tokens.len().min(max_utterance_len)].to_vec();

        let ctx_m: Vec<Vec<usize>> = ctx_tokens.iter().map(|u| matcher_vocab.encode(u)).collect();
        let resp_m = matcher_vocab.encode(&resp_tokens);
        let (ctx_h, resp_h) = match hed_vocab {
            Some(hv) => (
                ctx_tokens.iter().map(|u| hv.encode(u)).collect(),
                hv.encode(&resp_tokens),
            ),
            None => (Vec::new(), Vec::new()),
        };
        Ok(MatchExample {
            label: *label,
            ctx_m,
            resp_m,
            ctx_h,
            resp_h,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherModel {
    pub config: MatcherConfig,
    pub embed: Param,
    pub ctx_fwd: GruParams,
    pub ctx_bwd: GruParams,
    pub ctx_agg: GruParams,
    pub resp_fwd: GruParams,
    pub resp_bwd: GruParams,
    pub m_base: Param,
    pub b_base: Param,
    pub w_glob: Option<Param>,
    pub b_glob: Option<Param>,
    /// Attached conversation encoder; required in the augmented modes.
    pub hed: Option<HedModel>,
}

impl MatcherModel {
    pub fn new(config: MatcherConfig, hed: Option<HedModel>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if config.ecmo_mode != EcmoMode::None && hed.is_none() {
            return Err(Error::Contract(format!(
                "ecmo mode {} requires a pretrained encoder",
                config.ecmo_mode
            )));
        }
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let word_width = e + match (&hed, config.ecmo_mode) {
            (Some(m), EcmoMode::Frozen | EcmoMode::Continue) => m.config.local_width(),
            _ => 0,
        };
        let embed_data = (0..v * e).map(|_| rng.normal(0.0, EMBED_STD)).collect();
        let (w_glob, b_glob) = match (&hed, config.ecmo_mode) {
            (Some(m), EcmoMode::Frozen | EcmoMode::Continue) => {
                let hd = m.config.hidden_dim;
                let data = (0..hd * hd)
                    .map(|_| rng.uniform_in(-INIT_RANGE, INIT_RANGE))
                    .collect();
                (
                    Some(Param::new("w_glob", vec![hd, hd], data)),
                    Some(Param::zeros("b_glob", vec![1])),
                )
            }
            _ => (None, None),
        };
        Ok(MatcherModel {
            config,
            embed: Param::new("embed", vec![v, e], embed_data),
            ctx_fwd: GruParams::new("ctx_fwd", word_width, h, rng),
            ctx_bwd: GruParams::new("ctx_bwd", word_width, h, rng),
            ctx_agg: GruParams::new("ctx_agg", 2 * h, h, rng),
            resp_fwd: GruParams::new("resp_fwd", word_width, h, rng),
            resp_bwd: GruParams::new("resp_bwd", word_width, h, rng),
            m_base: Param::new(
                "m_base",
                vec![h, 2 * h],
                (0..h * 2 * h).map(|_| rng.uniform_in(-INIT_RANGE, INIT_RANGE)).collect(),
            ),
            b_base: Param::zeros("b_base", vec![1]),
            w_glob,
            b_glob,
            hed,
        })
    }

    /// Width of one (possibly augmented) word vector at the input layer.
    pub fn word_input_width(&self) -> usize {
        self.config.embed_dim
            + match (&self.hed, self.config.ecmo_mode) {
                (Some(m), EcmoMode::Frozen | EcmoMode::Continue) => m.config.local_width(),
                _ => 0,
            }
    }

    /// Matcher-side parameters, without the attached encoder.
    pub fn params(&self) -> Vec<&Param> {
        let mut ps = vec![&self.embed];
        ps.extend(self.ctx_fwd.params());
        ps.extend(self.ctx_bwd.params());
        ps.extend(self.ctx_agg.params());
        ps.extend(self.resp_fwd.params());
        ps.extend(self.resp_bwd.params());
        ps.push(&self.m_base);
        ps.push(&self.b_base);
        if let Some(w) = &self.w_glob {
            ps.push(w);
        }
        if let Some(b) = &self.b_glob {
            ps.push(b);
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.trainable_params_mut(false)
    }

    /// Matcher parameters, then the attached encoder's when `joint` —
    /// the optimizer order for continue-train.
    pub fn trainable_params_mut(&mut self, joint: bool) -> Vec<&mut Param> {
        let MatcherModel {
            embed,
            ctx_fwd,
            ctx_bwd,
            ctx_agg,
            resp_fwd,
            resp_bwd,
            m_base,
            b_base,
            w_glob,
            b_glob,
            hed,
            ..
        } = self;
        let mut ps = vec![embed];
        ps.extend(ctx_fwd.params_mut());
        ps.extend(ctx_bwd.params_mut());
        ps.extend(ctx_agg.params_mut());
        ps.extend(resp_fwd.params_mut());
        ps.extend(resp_bwd.params_mut());
        ps.push(m_base);
        ps.push(b_base);
        if let Some(w) = w_glob {
            ps.push(w);
        }
        if let Some(b) = b_glob {
            ps.push(b);
        }
        if joint {
            if let Some(h) = hed {
                ps.extend(h.params_mut());
            }
        }
        ps
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool, hed_trainable: bool) -> MatcherIds {
        MatcherIds {
            embed: tape.param(&self.embed, trainable),
            ctx_fwd: self.ctx_fwd.bind(tape, trainable),
            ctx_bwd: self.ctx_bwd.bind(tape, trainable),
            ctx_agg: self.ctx_agg.bind(tape, trainable),
            resp_fwd: self.resp_fwd.bind(tape, trainable),
            resp_bwd: self.resp_bwd.bind(tape, trainable),
            m_base: tape.param(&self.m_base, trainable),
            b_base: tape.param(&self.b_base, trainable),
            w_glob: self.w_glob.as_ref().map(|p| tape.param(p, trainable)),
            b_glob: self.b_glob.as_ref().map(|p| tape.param(p, trainable)),
            hed: match (self.config.ecmo_mode, &self.hed) {
                (EcmoMode::Continue, Some(m)) => Some(m.bind(tape, hed_trainable)),
                _ => None,
            },
        }
    }

    /// Score one example on a fresh tape; no gradients involved.
    pub fn score(&self, example: &MatchExample) -> Result<ScoreValues> {
        self.score_with(example, None)
    }

    /// Score with precomputed frozen-mode vectors (candidate-list scoring
    /// reuses the context extraction across candidates).
    pub fn score_with(
        &self,
        example: &MatchExample,
        frozen: Option<&FrozenReps>,
    ) -> Result<ScoreValues> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false, false);
        let parts = score_example_with(&mut tape, &ids, self, example, frozen)?;
        Ok(ScoreValues {
            base_logit: tape.value(parts.base_logit),
            base_prob: sigmoid(tape.value(parts.base_logit)),
            global_logit: parts.global_logit.map(|id| tape.value(id)),
            prob: sigmoid(tape.value(parts.logit)),
        })
    }

    /// Mean binary cross entropy over a batch, on a fresh tape.
    pub fn loss(&self, batch: &[MatchExample]) -> Result<f64> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false, false);
        let loss = batch_loss_ids(&mut tape, &ids, self, batch)?;
        Ok(tape.value(loss))
    }
}

/// Matcher parameters bound to one tape. `hed` is present only in
/// continue mode, where the encoder runs on the same tape.
pub struct MatcherIds {
    pub embed: TensorId,
    pub ctx_fwd: GruIds,
    pub ctx_bwd: GruIds,
    pub ctx_agg: GruIds,
    pub resp_fwd: GruIds,
    pub resp_bwd: GruIds,
    pub m_base: TensorId,
    pub b_base: TensorId,
    pub w_glob: Option<TensorId>,
    pub b_glob: Option<TensorId>,
    pub hed: Option<HedIds>,
}

impl MatcherIds {
    /// Tensor ids in the same order as [`MatcherModel::params`].
    pub fn ordered(&self) -> Vec<TensorId> {
        let mut v = vec![self.embed];
        for g in [&self.ctx_fwd, &self.ctx_bwd, &self.ctx_agg, &self.resp_fwd, &self.resp_bwd] {
            v.extend([g.w_z, g.u_z, g.b_z, g.w_r, g.u_r, g.b_r, g.w_h, g.u_h, g.b_h]);
        }
        v.push(self.m_base);
        v.push(self.b_base);
        if let Some(w) = self.w_glob {
            v.push(w);
        }
        if let Some(b) = self.b_glob {
            v.push(b);
        }
        v
    }
}

pub struct ScoreParts {
    pub base_logit: TensorId,
    pub global_logit: Option<TensorId>,
    /// Combined logit: base plus global where present.
    pub logit: TensorId,
}

#[derive(Clone, Copy, Debug)]
pub struct ScoreValues {
    pub base_logit: f64,
    pub base_prob: f64,
    pub global_logit: Option<f64>,
    /// g̃ = σ(base logit + global logit), or the base probability alone.
    pub prob: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The per-example contextual vectors, either as constants (frozen) or as
/// live tape nodes (continue).
struct EcmoOnTape {
    ctx_local: Vec<Vec<TensorId>>,
    ctx_global_last: TensorId,
    resp_local: Vec<TensorId>,
    resp_global: TensorId,
}

/// Frozen-mode vectors for one example. The encoder never changes during
/// frozen training, so these are computed once and reused every epoch.
#[derive(Clone, Debug)]
pub struct FrozenReps {
    pub ctx: reps::EcmoReps,
    pub resp: reps::EcmoReps,
}

pub fn extract_frozen(hed: &HedModel, example: &MatchExample) -> Result<FrozenReps> {
    Ok(FrozenReps {
        ctx: reps::extract(hed, &Session::new(example.ctx_h.clone()))?,
        resp: reps::extract_response(hed, &example.resp_h)?,
    })
}

pub fn precompute_frozen(hed: &HedModel, examples: &[MatchExample]) -> Result<Vec<FrozenReps>> {
    examples.iter().map(|ex| extract_frozen(hed, ex)).collect()
}

fn ecmo_constants(tape: &mut Tape, hed: &HedModel, frozen: &FrozenReps) -> Result<EcmoOnTape> {
    let width = hed.config.local_width();
    let hd = hed.config.hidden_dim;
    let mut ctx_local = Vec::with_capacity(frozen.ctx.local.len());
    for utt in &frozen.ctx.local {
        let rows: Vec<TensorId> = utt
            .iter()
            .map(|v| tape.leaf(v.clone(), vec![width], false))
            .collect::<Result<_>>()?;
        ctx_local.push(rows);
    }
    Ok(EcmoOnTape {
        ctx_local,
        ctx_global_last: tape.leaf(frozen.ctx.global.last().unwrap().clone(), vec![hd], false)?,
        resp_local: frozen.resp.local[0]
            .iter()
            .map(|v| tape.leaf(v.clone(), vec![width], false))
            .collect::<Result<_>>()?,
        resp_global: tape.leaf(frozen.resp.global[0].clone(), vec![hd], false)?,
    })
}

fn ecmo_live(tape: &mut Tape, hed_ids: &HedIds, example: &MatchExample) -> Result<EcmoOnTape> {
    let ctx = encode_session_ids(tape, hed_ids, &Session::new(example.ctx_h.clone()))?;
    let resp = encode_session_ids(tape, hed_ids, &Session::new(vec![example.resp_h.clone()]))?;
    Ok(EcmoOnTape {
        ctx_local: ctx.word_rows,
        ctx_global_last: *ctx.ctx_states.last().unwrap(),
        resp_local: resp.word_rows.into_iter().next().unwrap(),
        resp_global: resp.ctx_states[0],
    })
}

/// ẽ = [embedding ; local contextual vector]; widths add exactly.
fn augment_word(tape: &mut Tape, embed_row: TensorId, local: TensorId) -> Result<TensorId> {
    tape.concat(embed_row, local)
}

/// Build the (possibly augmented) word vectors of one utterance.
fn word_vectors(
    tape: &mut Tape,
    embed: TensorId,
    tokens: &[usize],
    locals: Option<&[TensorId]>,
) -> Result<Vec<TensorId>> {
    if let Some(locals) = locals {
        if locals.len() != tokens.len() {
            return Err(Error::Alignment(format!(
                "{} contextual vectors for {} tokens",
                locals.len(),
                tokens.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(tokens.len());
    for (k, &tok) in tokens.iter().enumerate() {
        let row = tape.select_row(embed, tok)?;
        let vec = match locals {
            Some(locals) => augment_word(tape, row, locals[k])?,
            None => row,
        };
        out.push(vec);
    }
    Ok(out)
}

/// biGRU over given word vectors, stacked and max-pooled to width 2·hidden.
fn encode_word_vectors(
    tape: &mut Tape,
    fwd: &GruIds,
    bwd: &GruIds,
    hidden_dim: usize,
    vecs: &[TensorId],
) -> Result<TensorId> {
    if vecs.is_empty() {
        return Err(Error::EmptySequence("cannot encode zero word vectors".into()));
    }
    let mut states_f = Vec::with_capacity(vecs.len());
    let mut h = tape.zeros(vec![hidden_dim]);
    for &x in vecs {
        h = gru_cell(tape, fwd, h, x)?;
        states_f.push(h);
    }
    let mut states_b = Vec::with_capacity(vecs.len());
    let mut hb = tape.zeros(vec![hidden_dim]);
    for &x in vecs.iter().rev() {
        hb = gru_cell(tape, bwd, hb, x)?;
        states_b.push(hb);
    }
    states_b.reverse();
    let rows: Vec<TensorId> = states_f
        .iter()
        .zip(&states_b)
        .map(|(&f, &b)| tape.concat(f, b))
        .collect::<Result<_>>()?;
    let stacked = tape.stack_rows(&rows)?;
    tape.max_over_time(stacked)
}

/// vᵀ·W·u + b as a scalar tensor.
fn bilinear(
    tape: &mut Tape,
    v: TensorId,
    w: TensorId,
    u: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let wu = tape.matvec(w, u)?;
    let prod = tape.mul(v, wu)?;
    let s = tape.sum(prod);
    tape.add(s, b)
}

/// Forward pass of the full matcher for one example.
pub fn score_example(
    tape: &mut Tape,
    ids: &MatcherIds,
    model: &MatcherModel,
    example: &MatchExample,
) -> Result<ScoreParts> {
    score_example_with(tape, ids, model, example, None)
}

/// Forward pass with optionally precomputed frozen-mode vectors.
pub fn score_example_with(
    tape: &mut Tape,
    ids: &MatcherIds,
    model: &MatcherModel,
    example: &MatchExample,
    frozen: Option<&FrozenReps>,
) -> Result<ScoreParts> {
    if example.ctx_m.is_empty() || example.ctx_m.iter().any(|u| u.is_empty()) {
        return Err(Error::EmptySequence("matcher got an empty context".into()));
    }
    if example.resp_m.is_empty() {
        return Err(Error::EmptySequence("matcher got an empty response".into()));
    }
    let mode = model.config.ecmo_mode;
    let ecmo = match mode {
        EcmoMode::None => None,
        EcmoMode::Frozen => {
            let hed = model.hed.as_ref().ok_or_else(|| {
                Error::Contract("frozen mode without an attached encoder".into())
            })?;
            let computed;
            let frozen = match frozen {
                Some(f) => f,
                None => {
                    computed = extract_frozen(hed, example)?;
                    &computed
                }
            };
            Some(ecmo_constants(tape, hed, frozen)?)
        }
        EcmoMode::Continue => match frozen {
            // precomputed constants are fine whenever no gradients are
            // needed (evaluation); training always runs the live path
            Some(f) => {
                let hed = model.hed.as_ref().ok_or_else(|| {
                    Error::Contract("continue mode without an attached encoder".into())
                })?;
                Some(ecmo_constants(tape, hed, f)?)
            }
            None => {
                let hed_ids = ids.hed.as_ref().ok_or_else(|| {
                    Error::Contract("continue mode without encoder bound to the tape".into())
                })?;
                Some(ecmo_live(tape, hed_ids, example)?)
            }
        },
    };

    let h = model.config.hidden_dim;
    let mut utt_vecs = Vec::with_capacity(example.ctx_m.len());
    for (i, utt) in example.ctx_m.iter().enumerate() {
        let locals = ecmo.as_ref().map(|e| e.ctx_local[i].as_slice());
        let vecs = word_vectors(tape, ids.embed, utt, locals)?;
        let pooled = encode_word_vectors(tape, &ids.ctx_fwd, &ids.ctx_bwd, h, &vecs)?;
        utt_vecs.push(pooled);
    }
    let mut c = tape.zeros(vec![h]);
    for &v in &utt_vecs {
        c = gru_cell(tape, &ids.ctx_agg, c, v)?;
    }

    let resp_locals = ecmo.as_ref().map(|e| e.resp_local.as_slice());
    let resp_vecs = word_vectors(tape, ids.embed, &example.resp_m, resp_locals)?;
    let r = encode_word_vectors(tape, &ids.resp_fwd, &ids.resp_bwd, h, &resp_vecs)?;

    let base_logit = bilinear(tape, c, ids.m_base, r, ids.b_base)?;

    let (global_logit, logit) = match &ecmo {
        Some(e) => {
            let (w, b) = match (ids.w_glob, ids.b_glob) {
                (Some(w), Some(b)) => (w, b),
                _ => {
                    return Err(Error::Contract(
                        "augmented mode without global score parameters".into(),
                    ))
                }
            };
            let gl = bilinear(tape, e.ctx_global_last, w, e.resp_global, b)?;
            let combined = tape.add(base_logit, gl)?;
            (Some(gl), combined)
        }
        None => (None, base_logit),
    };
    Ok(ScoreParts { base_logit, global_logit, logit })
}

/// Mean binary cross entropy of the combined score over a batch.
pub fn batch_loss_ids(
    tape: &mut Tape,
    ids: &MatcherIds,
    model: &MatcherModel,
    batch: &[MatchExample],
) -> Result<TensorId> {
    batch_loss_with(tape, ids, model, batch, None)
}

/// Batch loss with an optional frozen-representation cache parallel to
/// `batch`.
pub fn batch_loss_with(
    tape: &mut Tape,
    ids: &MatcherIds,
    model: &MatcherModel,
    batch: &[MatchExample],
    frozen: Option<&[&FrozenReps]>,
) -> Result<TensorId> {
    if batch.is_empty() {
        return Err(Error::Contract("matcher loss over an empty batch".into()));
    }
    if let Some(f) = frozen {
        if f.len() != batch.len() {
            return Err(Error::Alignment(format!(
                "{} cached representations for {} examples",
                f.len(),
                batch.len()
            )));
        }
    }
    let mut total: Option<TensorId> = None;
    for (i, example) in batch.iter().enumerate() {
        let parts = score_example_with(tape, ids, model, example, frozen.map(|f| f[i]))?;
        let y = if example.label { 1.0 } else { 0.0 };
        let loss = tape.bce_with_logit(parts.logit, y)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

/// Per-example encoding limits used when building examples from text.
pub fn build_examples(
    triples: &[TextTriple],
    matcher_vocab: &Vocabulary,
    hed_vocab: Option<&Vocabulary>,
    max_session_len: usize,
    max_utterance_len: usize,
) -> Result<Vec<MatchExample>> {
    triples
        .iter()
        .map(|t| {
            MatchExample::build(t, matcher_vocab, hed_vocab, max_session_len, max_utterance_len)
        })
        .collect()
}

/// Context tokenized for evaluation lists (no label).
pub fn build_eval_example(
    context: &[String],
    response: &str,
    matcher_vocab: &Vocabulary,
    hed_vocab: Option<&Vocabulary>,
    max_session_len: usize,
    max_utterance_len: usize,
) -> Result<MatchExample> {
    let triple: TextTriple = (false, context.to_vec(), response.to_string());
    MatchExample::build(&triple, matcher_vocab, hed_vocab, max_session_len, max_utterance_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error};
    use crate::hed::HedConfig;

    fn hed_model(seed: u64) -> HedModel {
        let cfg = HedConfig {
            vocab_size: 12,
            embed_dim: 4,
            hidden_dim: 3,
            max_session_len: 10,
            max_utterance_len: 50,
        };
        let mut rng = Rng::derive(seed, "matcher_test_hed", 0);
        HedModel::new(cfg, &mut rng).unwrap()
    }

    fn matcher(seed: u64, mode: EcmoMode) -> MatcherModel {
        let cfg = MatcherConfig {
            vocab_size: 12,
            embed_dim: 4,
            hidden_dim: 3,
            ecmo_mode: mode,
            max_session_len: 10,
            max_utterance_len: 50,
        };
        let hed = match mode {
            EcmoMode::None => None,
            _ => Some(hed_model(seed + 100)),
        };
        let mut rng = Rng::derive(seed, "matcher_test", 0);
        MatcherModel::new(cfg, hed, &mut rng).unwrap()
    }

    fn example(label: bool) -> MatchExample {
        MatchExample {
            label,
            ctx_m: vec![vec![4, 5], vec![6]],
            resp_m: vec![7, 8],
            ctx_h: vec![vec![5, 6], vec![7]],
            resp_h: vec![8, 9],
        }
    }

    #[test]
    fn zero_score_matrix_gives_half() {
        let mut m = matcher(1, EcmoMode::None);
        m.m_base.data.iter_mut().for_each(|x| *x = 0.0);
        m.b_base.data[0] = 0.0;
        let s = m.score(&example(true)).unwrap();
        assert_eq!(s.prob, 0.5);
        assert_eq!(s.base_logit, 0.0);
    }

    #[test]
    fn score_strictly_inside_unit_interval() {
        for mode in [EcmoMode::None, EcmoMode::Frozen, EcmoMode::Continue] {
            let m = matcher(2, mode);
            let s = m.score(&example(true)).unwrap();
            assert!(s.prob > 0.0 && s.prob < 1.0);
            assert!(s.base_prob > 0.0 && s.base_prob < 1.0);
        }
    }

    #[test]
    fn empty_context_or_response_rejected() {
        let m = matcher(3, EcmoMode::None);
        let mut ex = example(true);
        ex.ctx_m = vec![];
        assert!(matches!(m.score(&ex), Err(Error::EmptySequence(_))));
        let mut ex = example(true);
        ex.resp_m = vec![];
        assert!(matches!(m.score(&ex), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn augmented_width_arithmetic() {
        // paper-scale widths: 200-dim embeddings + 600-dim local vectors
        let hed_cfg = HedConfig {
            vocab_size: 8,
            embed_dim: 10,
            hidden_dim: 300,
            max_session_len: 10,
            max_utterance_len: 50,
        };
        let mut rng = Rng::new(4);
        let hed = HedModel::new(hed_cfg, &mut rng).unwrap();
        let cfg = MatcherConfig::with_defaults(8, EcmoMode::Frozen);
        let m = MatcherModel::new(cfg, Some(hed), &mut rng).unwrap();
        assert_eq!(m.word_input_width(), 800);
        assert_eq!(m.ctx_fwd.w_z.shape, vec![200, 800]);

        // and for arbitrary pairs
        for (me, hd) in [(4usize, 3usize), (7, 5), (2, 9)] {
            let hed_cfg = HedConfig {
                vocab_size: 8,
                embed_dim: 4,
                hidden_dim: hd,
                max_session_len: 10,
                max_utterance_len: 50,
            };
            let hed = HedModel::new(hed_cfg, &mut rng).unwrap();
            let mut cfg = MatcherConfig::with_defaults(8, EcmoMode::Frozen);
            cfg.embed_dim = me;
            cfg.hidden_dim = 3;
            let m = MatcherModel::new(cfg, Some(hed), &mut rng).unwrap();
            assert_eq!(m.word_input_width(), me + 2 * hd);
        }
    }

    #[test]
    fn augmentation_concat_slices_back_exactly() {
        let mut tape = Tape::new();
        let e = tape.leaf(vec![1.0, 2.0], vec![2], false).unwrap();
        let l = tape.leaf(vec![3.0, 4.0, 5.0], vec![3], false).unwrap();
        let a = augment_word(&mut tape, e, l).unwrap();
        assert_eq!(tape.shape(a), &[5]);
        assert_eq!(&tape.data(a)[..2], tape.data(e));
        assert_eq!(&tape.data(a)[2..], tape.data(l));

        // zero contextual vector keeps the head intact and the tail zero
        let z = tape.zeros(vec![3]);
        let az = augment_word(&mut tape, e, z).unwrap();
        assert_eq!(&tape.data(az)[..2], &[1.0, 2.0]);
        assert_eq!(&tape.data(az)[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn misaligned_locals_are_an_alignment_error() {
        let m = matcher(5, EcmoMode::Frozen);
        let mut ex = example(true);
        ex.ctx_h[0] = vec![5]; // one vector for two tokens
        assert!(matches!(m.score(&ex), Err(Error::Alignment(_))));
    }

    #[test]
    fn global_score_zero_parameters_give_half() {
        let mut m = matcher(6, EcmoMode::Frozen);
        m.w_glob.as_mut().unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        m.b_glob.as_mut().unwrap().data[0] = 0.0;
        let s = m.score(&example(true)).unwrap();
        assert_eq!(s.global_logit, Some(0.0));
    }

    #[test]
    fn global_score_identity_unit_vectors() {
        // σ(e₁ᵀ·I·e₁) = σ(1)
        let mut tape = Tape::new();
        let dim = 3;
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        let w = tape.leaf(eye, vec![dim, dim], false).unwrap();
        let b = tape.leaf(vec![0.0], vec![1], false).unwrap();
        let mut unit = vec![0.0; dim];
        unit[0] = 1.0;
        let es = tape.leaf(unit.clone(), vec![dim], false).unwrap();
        let er = tape.leaf(unit, vec![dim], false).unwrap();
        let logit = bilinear(&mut tape, es, w, er, b).unwrap();
        let g = sigmoid(tape.value(logit));
        assert!((g - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn combined_score_is_logit_sum() {
        let m = matcher(7, EcmoMode::Frozen);
        let s = m.score(&example(true)).unwrap();
        let expected = sigmoid(s.base_logit + s.global_logit.unwrap());
        assert!((s.prob - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_global_logit_preserves_base_ranking() {
        let mut m = matcher(8, EcmoMode::Frozen);
        m.w_glob.as_mut().unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        m.b_glob.as_mut().unwrap().data[0] = 0.0;
        let mut scored: Vec<(f64, f64)> = Vec::new();
        for resp in [vec![4], vec![5, 6], vec![7, 8, 9], vec![10]] {
            let mut ex = example(true);
            ex.resp_m = resp.clone();
            ex.resp_h = resp;
            let s = m.score(&ex).unwrap();
            scored.push((s.prob, s.base_logit));
        }
        let mut by_prob: Vec<usize> = (0..scored.len()).collect();
        by_prob.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
        let mut by_base: Vec<usize> = (0..scored.len()).collect();
        by_base.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1));
        assert_eq!(by_prob, by_base);
    }

    #[test]
    fn loss_ln2_at_half_and_symmetry() {
        let mut m = matcher(9, EcmoMode::None);
        m.m_base.data.iter_mut().for_each(|x| *x = 0.0);
        m.b_base.data[0] = 0.0;
        let pos = m.loss(&[example(true)]).unwrap();
        let neg = m.loss(&[example(false)]).unwrap();
        assert!((pos - 2.0_f64.ln()).abs() < 1e-12);
        assert!((neg - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_empty_batch_rejected() {
        let m = matcher(10, EcmoMode::None);
        assert!(matches!(m.loss(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn base_score_gradients_match_finite_differences() {
        let model = matcher(11, EcmoMode::None);
        let batch = vec![example(true), example(false)];
        check_all_matcher_grads(&model, &batch);
    }

    #[test]
    fn full_matcher_gradients_match_finite_differences_frozen() {
        let model = matcher(12, EcmoMode::Frozen);
        let batch = vec![example(true), example(false)];
        check_all_matcher_grads(&model, &batch);
    }

    #[test]
    fn continue_mode_gradients_reach_the_encoder() {
        let model = matcher(13, EcmoMode::Continue);
        let batch = vec![example(true), example(false)];

        let mut tape = Tape::new();
        let ids = model.bind(&mut tape, true, true);
        let loss = batch_loss_ids(&mut tape, &ids, &model, &batch).unwrap();
        tape.backward(loss).unwrap();

        // encoder embedding gradient vs finite differences
        let hed_ids = ids.hed.as_ref().unwrap();
        let analytic = tape.grad(hed_ids.embed).unwrap().to_vec();
        let base = model.hed.as_ref().unwrap().embed.data.clone();
        let numeric = central_diff(
            |v| {
                let mut probe = model.clone();
                probe.hed.as_mut().unwrap().embed.data = v.to_vec();
                probe.loss(&batch).unwrap()
            },
            &base,
            1e-6,
        );
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-5, "encoder embed rel err {err}");
        assert!(analytic.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn frozen_mode_encoder_gets_no_gradient() {
        let model = matcher(14, EcmoMode::Frozen);
        let batch = vec![example(true)];
        let mut tape = Tape::new();
        let ids = model.bind(&mut tape, true, false);
        assert!(ids.hed.is_none()); // encoder never touches the tape
        let loss = batch_loss_ids(&mut tape, &ids, &model, &batch).unwrap();
        tape.backward(loss).unwrap();
        // matcher parameters do get gradients
        assert!(tape.grad(ids.m_base).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn frozen_and_continue_agree_at_step_zero() {
        let frozen = matcher(15, EcmoMode::Frozen);
        let mut continued = frozen.clone();
        continued.config.ecmo_mode = EcmoMode::Continue;
        let ex = example(true);
        let a = frozen.score(&ex).unwrap();
        let b = continued.score(&ex).unwrap();
        assert_eq!(a.prob.to_bits(), b.prob.to_bits());
        assert_eq!(a.base_logit.to_bits(), b.base_logit.to_bits());
    }

    #[test]
    fn concurrent_scoring_with_shared_model_matches_sequential() {
        let model = matcher(16, EcmoMode::Frozen);
        let examples: Vec<MatchExample> = (0..4)
            .map(|i| {
                let mut ex = example(i % 2 == 0);
                ex.resp_m = vec![4 + i];
                ex.resp_h = vec![4 + i];
                ex
            })
            .collect();
        let sequential: Vec<f64> = examples.iter().map(|e| model.score(e).unwrap().prob).collect();
        let parallel: Vec<f64> = std::thread::scope(|scope| {
            let handles: Vec<_> = examples
                .iter()
                .map(|e| scope.spawn(|| model.score(e).unwrap().prob))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(sequential, parallel);
    }

    fn check_all_matcher_grads(model: &MatcherModel, batch: &[MatchExample]) {
        let mut tape = Tape::new();
        let ids = model.bind(&mut tape, true, false);
        let loss = batch_loss_ids(&mut tape, &ids, model, batch).unwrap();
        tape.backward(loss).unwrap();

        let mut bound: Vec<TensorId> = vec![ids.embed];
        for g in [&ids.ctx_fwd, &ids.ctx_bwd, &ids.ctx_agg, &ids.resp_fwd, &ids.resp_bwd] {
            bound.extend([g.w_z, g.u_z, g.b_z, g.w_r, g.u_r, g.b_r, g.w_h, g.u_h, g.b_h]);
        }
        bound.push(ids.m_base);
        bound.push(ids.b_base);
        if let Some(w) = ids.w_glob {
            bound.push(w);
        }
        if let Some(b) = ids.b_glob {
            bound.push(b);
        }
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        for (pi, id) in bound.iter().enumerate() {
            let analytic = tape.grad(*id).unwrap().to_vec();
            let base = model.params()[pi].data.clone();
            let numeric = central_diff(
                |v| {
                    let mut probe = model.clone();
                    probe.params_mut()[pi].data = v.to_vec();
                    probe.loss(batch).unwrap()
                },
                &base,
                1e-6,
            );
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-5, "{} rel err {err}", names[pi]);
        }
    }
}
