//! The hierarchical encoder-decoder (HED) conversation model.
//!
//! The encoder has two levels: a bidirectional GRU reads each utterance
//! into per-word states whose forward and backward halves are concatenated,
//! and a max pooling over those states gives one vector per utterance; a
//! second GRU runs over the utterance vectors and produces one context
//! state per position. A GRU decoder, initialized from a tanh projection of
//! the last context state, predicts the next utterance word by word under
//! teacher forcing. Training minimizes the per-token negative log
//! likelihood of every turn after the first, summed over the corpus.
//!
//! Forward passes are expressed twice: once as tape-building functions
//! (used by training and by the matcher when the encoder is trained
//! further), and once as plain-value wrappers on [`HedModel`] for
//! inference and extraction.

use crate::data::{Session, BOS, EOS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Param, Tape, TensorId};

/// Weight range for recurrent and projection matrices.
const INIT_RANGE: f64 = 0.08;
/// Standard deviation for embedding rows without a pretrained vector.
const EMBED_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HedConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_session_len: usize,
    pub max_utterance_len: usize,
}

impl HedConfig {
    /// Defaults: 300-dimensional embeddings and hidden states, sessions of
    /// at most 10 utterances, utterances of at most 50 tokens.
    pub fn with_defaults(vocab_size: usize) -> Self {
        HedConfig {
            vocab_size,
            embed_dim: 300,
            hidden_dim: 300,
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

    /// Width of a per-word state: the two GRU directions concatenated.
    pub fn local_width(&self) -> usize {
        2 * self.hidden_dim
    }
}

// ── GRU cell ────────────────────────────────────────────────────────

/// One gated recurrent unit: nine parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Param,
    pub u_z: Param,
    pub b_z: Param,
    pub w_r: Param,
    pub u_r: Param,
    pub b_r: Param,
    pub w_h: Param,
    pub u_h: Param,
    pub b_h: Param,
}

impl GruParams {
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let mut mat = |name: &str, rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.uniform_in(-INIT_RANGE, INIT_RANGE))
                .collect();
            Param::new(format!("{prefix}.{name}"), vec![rows, cols], data)
        };
        let w_z = mat("w_z", hidden_dim, input_dim);
        let u_z = mat("u_z", hidden_dim, hidden_dim);
        let w_r = mat("w_r", hidden_dim, input_dim);
        let u_r = mat("u_r", hidden_dim, hidden_dim);
        let w_h = mat("w_h", hidden_dim, input_dim);
        let u_h = mat("u_h", hidden_dim, hidden_dim);
        GruParams {
            w_z,
            u_z,
            b_z: Param::zeros(format!("{prefix}.b_z"), vec![hidden_dim]),
            w_r,
            u_r,
            b_r: Param::zeros(format!("{prefix}.b_r"), vec![hidden_dim]),
            w_h,
            u_h,
            b_h: Param::zeros(format!("{prefix}.b_h"), vec![hidden_dim]),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_z, &self.u_z, &self.b_z,
            &self.w_r, &self.u_r, &self.b_r,
            &self.w_h, &self.u_h, &self.b_h,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_z, &mut self.u_z, &mut self.b_z,
            &mut self.w_r, &mut self.u_r, &mut self.b_r,
            &mut self.w_h, &mut self.u_h, &mut self.b_h,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GruIds {
        GruIds {
            w_z: tape.param(&self.w_z, trainable),
            u_z: tape.param(&self.u_z, trainable),
            b_z: tape.param(&self.b_z, trainable),
            w_r: tape.param(&self.w_r, trainable),
            u_r: tape.param(&self.u_r, trainable),
            b_r: tape.param(&self.b_r, trainable),
            w_h: tape.param(&self.w_h, trainable),
            u_h: tape.param(&self.u_h, trainable),
            b_h: tape.param(&self.b_h, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruIds {
    pub w_z: TensorId,
    pub u_z: TensorId,
    pub b_z: TensorId,
    pub w_r: TensorId,
    pub u_r: TensorId,
    pub b_r: TensorId,
    pub w_h: TensorId,
    pub u_h: TensorId,
    pub b_h: TensorId,
}

/// z = σ(W_z x + U_z h + b_z); r = σ(W_r x + U_r h + b_r);
/// h̃ = tanh(W_h x + U_h (r⊙h) + b_h); h' = (1−z)⊙h + z⊙h̃.
pub fn gru_cell(tape: &mut Tape, g: &GruIds, h_prev: TensorId, x: TensorId) -> Result<TensorId> {
    let zx = tape.matvec(g.w_z, x)?;
    let zh = tape.matvec(g.u_z, h_prev)?;
    let z_pre = tape.add(zx, zh)?;
    let z_pre = tape.add(z_pre, g.b_z)?;
    let z = tape.sigmoid(z_pre);

    let rx = tape.matvec(g.w_r, x)?;
    let rh = tape.matvec(g.u_r, h_prev)?;
    let r_pre = tape.add(rx, rh)?;
    let r_pre = tape.add(r_pre, g.b_r)?;
    let r = tape.sigmoid(r_pre);

    let gated = tape.mul(r, h_prev)?;
    let hx = tape.matvec(g.w_h, x)?;
    let hh = tape.matvec(g.u_h, gated)?;
    let h_pre = tape.add(hx, hh)?;
    let h_pre = tape.add(h_pre, g.b_h)?;
    let h_tilde = tape.tanh(h_pre);

    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, h_tilde)?;
    tape.add(kept, new)
}

// ── Model ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct HedModel {
    pub config: HedConfig,
    /// Shared by the encoder and the decoder inputs.
    pub embed: Param,
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    pub ctx: GruParams,
    pub dec: GruParams,
    pub init_w: Param,
    pub init_b: Param,
    /// Projects [decoder state ; previous embedding] to vocabulary logits.
    pub out_w: Param,
    pub out_b: Param,
}

impl HedModel {
    pub fn new(config: HedConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, e, d) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let embed_data = (0..v * e).map(|_| rng.normal(0.0, EMBED_STD)).collect();
        Ok(HedModel {
            config,
            embed: Param::new("embed", vec![v, e], embed_data),
            enc_fwd: GruParams::new("enc_fwd", e, d, rng),
            enc_bwd: GruParams::new("enc_bwd", e, d, rng),
            ctx: GruParams::new("ctx", 2 * d, d, rng),
            dec: GruParams::new("dec", e, d, rng),
            init_w: Param::new(
                "init.w",
                vec![d, d],
                (0..d * d).map(|_| rng.uniform_in(-INIT_RANGE, INIT_RANGE)).collect(),
            ),
            init_b: Param::zeros("init.b", vec![d]),
            out_w: Param::new(
                "out.w",
                vec![v, d + e],
                (0..v * (d + e)).map(|_| rng.uniform_in(-INIT_RANGE, INIT_RANGE)).collect(),
            ),
            out_b: Param::zeros("out.b", vec![v]),
        })
    }

    /// Like [`HedModel::new`] but with embedding rows supplied up front
    /// (a pretrained table from an embedding file).
    pub fn new_with_embeddings(config: HedConfig, table: Vec<f64>, rng: &mut Rng) -> Result<Self> {
        let mut model = HedModel::new(config, rng)?;
        if table.len() != model.embed.numel() {
            return Err(Error::Dimension(format!(
                "embedding table has {} values, model needs {}",
                table.len(),
                model.embed.numel()
            )));
        }
        model.embed.data = table;
        Ok(model)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = vec![&self.embed];
        ps.extend(self.enc_fwd.params());
        ps.extend(self.enc_bwd.params());
        ps.extend(self.ctx.params());
        ps.extend(self.dec.params());
        ps.push(&self.init_w);
        ps.push(&self.init_b);
        ps.push(&self.out_w);
        ps.push(&self.out_b);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = vec![&mut self.embed];
        ps.extend(self.enc_fwd.params_mut());
        ps.extend(self.enc_bwd.params_mut());
        ps.extend(self.ctx.params_mut());
        ps.extend(self.dec.params_mut());
        ps.push(&mut self.init_w);
        ps.push(&mut self.init_b);
        ps.push(&mut self.out_w);
        ps.push(&mut self.out_b);
        ps
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HedIds {
        HedIds {
            cfg: self.config,
            embed: tape.param(&self.embed, trainable),
            enc_fwd: self.enc_fwd.bind(tape, trainable),
            enc_bwd: self.enc_bwd.bind(tape, trainable),
            ctx: self.ctx.bind(tape, trainable),
            dec: self.dec.bind(tape, trainable),
            init_w: tape.param(&self.init_w, trainable),
            init_b: tape.param(&self.init_b, trainable),
            out_w: tape.param(&self.out_w, trainable),
            out_b: tape.param(&self.out_b, trainable),
        }
    }

    // ── Value-level wrappers ────────────────────────────────────────

    pub fn encode_utterance(&self, tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let (rows, _, v_u) = encode_utterance_ids(&mut tape, &ids, tokens)?;
        let word_states = rows.iter().map(|&r| tape.data(r).to_vec()).collect();
        Ok((word_states, tape.data(v_u).to_vec()))
    }

    pub fn encode_session(&self, session: &Session) -> Result<EncodedSession> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let enc = encode_session_ids(&mut tape, &ids, session)?;
        Ok(enc.values(&tape))
    }

    pub fn decode_nll(&self, context_state: &[f64], target: &[usize]) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let h = tape.leaf(context_state.to_vec(), vec![self.config.hidden_dim], false)?;
        let (loss, count) = decode_nll_ids(&mut tape, &ids, h, target)?;
        Ok((tape.value(loss), count))
    }

    pub fn session_nll(&self, session: &Session) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let (loss, count) = session_nll_ids(&mut tape, &ids, session)?;
        Ok((tape.value(loss), count))
    }

    /// exp(total loss / total predicted tokens) over every turn after the
    /// first of every session.
    pub fn perplexity(&self, corpus: &[Session]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Contract("perplexity over an empty corpus".into()));
        }
        let mut total_loss = 0.0;
        let mut total_tokens = 0usize;
        for session in corpus {
            let (loss, count) = self.session_nll(session)?;
            total_loss += loss;
            total_tokens += count;
        }
        Ok((total_loss / total_tokens as f64).exp())
    }
}

/// Parameter handles for one tape pass.
#[derive(Clone, Copy, Debug)]
pub struct HedIds {
    pub cfg: HedConfig,
    pub embed: TensorId,
    pub enc_fwd: GruIds,
    pub enc_bwd: GruIds,
    pub ctx: GruIds,
    pub dec: GruIds,
    pub init_w: TensorId,
    pub init_b: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

impl HedIds {
    /// Tensor ids in the same order as [`HedModel::params`].
    pub fn ordered(&self) -> Vec<TensorId> {
        let mut v = vec![self.embed];
        for g in [&self.enc_fwd, &self.enc_bwd, &self.ctx, &self.dec] {
            v.extend([g.w_z, g.u_z, g.b_z, g.w_r, g.u_r, g.b_r, g.w_h, g.u_h, g.b_h]);
        }
        v.extend([self.init_w, self.init_b, self.out_w, self.out_b]);
        v
    }
}

/// Encoder outputs still on the tape.
pub struct EncodedIds {
    /// Per utterance, the per-word concatenated states (width 2·hidden).
    pub word_rows: Vec<Vec<TensorId>>,
    /// Per utterance, the same states stacked as a [T×2·hidden] matrix.
    pub word_states: Vec<TensorId>,
    /// Per utterance, the max-pooled utterance vector (width 2·hidden).
    pub utt_vecs: Vec<TensorId>,
    /// Context states h^s_1..h^s_n (width hidden).
    pub ctx_states: Vec<TensorId>,
}

impl EncodedIds {
    pub fn values(&self, tape: &Tape) -> EncodedSession {
        EncodedSession {
            word_states: self
                .word_rows
                .iter()
                .map(|rows| rows.iter().map(|&r| tape.data(r).to_vec()).collect())
                .collect(),
            utt_vecs: self.utt_vecs.iter().map(|&v| tape.data(v).to_vec()).collect(),
            ctx_states: self.ctx_states.iter().map(|&v| tape.data(v).to_vec()).collect(),
        }
    }
}

/// Encoder outputs as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSession {
    pub word_states: Vec<Vec<Vec<f64>>>,
    pub utt_vecs: Vec<Vec<f64>>,
    pub ctx_states: Vec<Vec<f64>>,
}

// ── Tape-level forward passes ───────────────────────────────────────

/// Run both GRU directions over an utterance. Returns the per-word
/// concatenated states, their [T×2d] stack, and the max-pooled vector.
pub fn encode_utterance_ids(
    tape: &mut Tape,
    ids: &HedIds,
    tokens: &[usize],
) -> Result<(Vec<TensorId>, TensorId, TensorId)> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence("cannot encode an empty utterance".into()));
    }
    if tokens.len() > ids.cfg.max_utterance_len {
        return Err(Error::Contract(format!(
            "utterance has {} tokens, limit is {}",
            tokens.len(),
            ids.cfg.max_utterance_len
        )));
    }
    let d = ids.cfg.hidden_dim;
    let embeds: Vec<TensorId> = tokens
        .iter()
        .map(|&tok| tape.select_row(ids.embed, tok))
        .collect::<Result<_>>()?;

    let mut fwd = Vec::with_capacity(tokens.len());
    let mut h = tape.zeros(vec![d]);
    for &x in &embeds {
        h = gru_cell(tape, &ids.enc_fwd, h, x)?;
        fwd.push(h);
    }
    let mut bwd = Vec::with_capacity(tokens.len());
    let mut hb = tape.zeros(vec![d]);
    for &x in embeds.iter().rev() {
        hb = gru_cell(tape, &ids.enc_bwd, hb, x)?;
        bwd.push(hb);
    }
    bwd.reverse();

    let rows: Vec<TensorId> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(f, b))
        .collect::<Result<_>>()?;
    let stacked = tape.stack_rows(&rows)?;
    let pooled = tape.max_over_time(stacked)?;
    Ok((rows, stacked, pooled))
}

/// Full causal encoding of a session: word states, utterance vectors, and
/// context states, with zero initial recurrent states.
pub fn encode_session_ids(tape: &mut Tape, ids: &HedIds, session: &Session) -> Result<EncodedIds> {
    if session.is_empty() {
        return Err(Error::EmptySequence("cannot encode an empty session".into()));
    }
    if session.len() > ids.cfg.max_session_len {
        return Err(Error::Contract(format!(
            "session has {} utterances, limit is {}",
            session.len(),
            ids.cfg.max_session_len
        )));
    }
    let d = ids.cfg.hidden_dim;
    let mut enc = EncodedIds {
        word_rows: Vec::with_capacity(session.len()),
        word_states: Vec::with_capacity(session.len()),
        utt_vecs: Vec::with_capacity(session.len()),
        ctx_states: Vec::with_capacity(session.len()),
    };
    let mut h_s = tape.zeros(vec![d]);
    for utterance in &session.utterances {
        let (rows, stacked, pooled) = encode_utterance_ids(tape, ids, utterance)?;
        h_s = gru_cell(tape, &ids.ctx, h_s, pooled)?;
        enc.word_rows.push(rows);
        enc.word_states.push(stacked);
        enc.utt_vecs.push(pooled);
        enc.ctx_states.push(h_s);
    }
    Ok(enc)
}

/// Teacher-forced negative log likelihood of `target` given a context
/// state. `target` must end with `<eos>`; the first decoder input is
/// `<bos>`. Returns the summed loss and the number of predicted tokens.
pub fn decode_nll_ids(
    tape: &mut Tape,
    ids: &HedIds,
    context_state: TensorId,
    target: &[usize],
) -> Result<(TensorId, usize)> {
    if target.is_empty() {
        return Err(Error::Contract("decoder target is empty".into()));
    }
    if *target.last().unwrap() != EOS {
        return Err(Error::Contract("decoder target must end with <eos>".into()));
    }
    let init_pre = tape.matvec(ids.init_w, context_state)?;
    let init_pre = tape.add(init_pre, ids.init_b)?;
    let mut h_d = tape.tanh(init_pre);

    let mut prev_token = BOS;
    let mut total: Option<TensorId> = None;
    for &tok in target {
        let e_prev = tape.select_row(ids.embed, prev_token)?;
        h_d = gru_cell(tape, &ids.dec, h_d, e_prev)?;
        let feat = tape.concat(h_d, e_prev)?;
        let logits = tape.matvec(ids.out_w, feat)?;
        let logits = tape.add(logits, ids.out_b)?;
        let step_loss = tape.softmax_cross_entropy(logits, tok)?;
        total = Some(match total {
            None => step_loss,
            Some(acc) => tape.add(acc, step_loss)?,
        });
        prev_token = tok;
    }
    Ok((total.unwrap(), target.len()))
}

/// Summed decoder loss over turns 2..n, each conditioned on the context
/// state of its prefix. Targets get `<eos>` appended.
pub fn session_nll_ids(
    tape: &mut Tape,
    ids: &HedIds,
    session: &Session,
) -> Result<(TensorId, usize)> {
    if session.len() < 2 {
        return Err(Error::Contract(
            "session likelihood needs at least two utterances".into(),
        ));
    }
    let enc = encode_session_ids(tape, ids, session)?;
    let mut total: Option<TensorId> = None;
    let mut tokens = 0usize;
    for j in 1..session.len() {
        let mut target = session.utterances[j].clone();
        target.push(EOS);
        let (loss, count) = decode_nll_ids(tape, ids, enc.ctx_states[j - 1], &target)?;
        tokens += count;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    Ok((total.unwrap(), tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error};

    fn tiny_config() -> HedConfig {
        HedConfig {
            vocab_size: 12,
            embed_dim: 5,
            hidden_dim: 5,
            max_session_len: 10,
            max_utterance_len: 50,
        }
    }

    fn tiny_model(seed: u64) -> HedModel {
        let mut rng = Rng::derive(seed, "hed_test", 0);
        HedModel::new(tiny_config(), &mut rng).unwrap()
    }

    fn zeroed_gru(input_dim: usize, hidden_dim: usize) -> GruParams {
        let mut rng = Rng::new(0);
        let mut g = GruParams::new("z", input_dim, hidden_dim, &mut rng);
        for p in g.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        g
    }

    #[test]
    fn gru_cell_zero_params_halves_state() {
        // z = σ(0) = 0.5 and h̃ = 0, so h' = 0.5·h
        let g = zeroed_gru(3, 3);
        let mut tape = Tape::new();
        let ids = g.bind(&mut tape, false);
        let h = tape.leaf(vec![1.0, -2.0, 0.5], vec![3], false).unwrap();
        let x = tape.leaf(vec![0.3, 0.7, -0.1], vec![3], false).unwrap();
        let out = gru_cell(&mut tape, &ids, h, x).unwrap();
        assert_eq!(tape.data(out), &[0.5, -1.0, 0.25]);

        let zero_h = tape.zeros(vec![3]);
        let out2 = gru_cell(&mut tape, &ids, zero_h, x).unwrap();
        assert_eq!(tape.data(out2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gru_cell_gradients_match_finite_differences() {
        let mut rng = Rng::new(17);
        let gp = GruParams::new("g", 4, 3, &mut rng);
        let h0: Vec<f64> = (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let x0: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

        let loss_with = |gp: &GruParams| -> f64 {
            let mut tape = Tape::new();
            let ids = gp.bind(&mut tape, false);
            let h = tape.leaf(h0.clone(), vec![3], false).unwrap();
            let x = tape.leaf(x0.clone(), vec![4], false).unwrap();
            let out = gru_cell(&mut tape, &ids, h, x).unwrap();
            let loss = tape.sum(out);
            tape.value(loss)
        };

        // analytic gradients for every parameter in one pass
        let mut tape = Tape::new();
        let ids = gp.bind(&mut tape, true);
        let h = tape.leaf(h0.clone(), vec![3], true).unwrap();
        let x = tape.leaf(x0.clone(), vec![4], true).unwrap();
        let out = gru_cell(&mut tape, &ids, h, x).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();

        let bound = [
            ids.w_z, ids.u_z, ids.b_z,
            ids.w_r, ids.u_r, ids.b_r,
            ids.w_h, ids.u_h, ids.b_h,
        ];
        for (pi, id) in bound.iter().enumerate() {
            let analytic = tape.grad(*id).unwrap().to_vec();
            let base = gp.params()[pi].data.clone();
            let numeric = central_diff(
                |v| {
                    let mut probe = gp.clone();
                    probe.params_mut()[pi].data = v.to_vec();
                    loss_with(&probe)
                },
                &base,
                1e-6,
            );
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-5, "param {pi} rel err {err}");
        }

        // and for the inputs
        let gh = tape.grad(h).unwrap().to_vec();
        let nh = central_diff(
            |v| {
                let mut t2 = Tape::new();
                let ids2 = gp.bind(&mut t2, false);
                let h2 = t2.leaf(v.to_vec(), vec![3], false).unwrap();
                let x2 = t2.leaf(x0.clone(), vec![4], false).unwrap();
                let o = gru_cell(&mut t2, &ids2, h2, x2).unwrap();
                let l = t2.sum(o);
                t2.value(l)
            },
            &h0,
            1e-6,
        );
        assert!(max_rel_error(&gh, &nh) < 1e-5);
    }

    #[test]
    fn encode_single_token_pool_is_identity() {
        let model = tiny_model(1);
        let (word_states, v_u) = model.encode_utterance(&[4]).unwrap();
        assert_eq!(word_states.len(), 1);
        assert_eq!(word_states[0], v_u);
        assert_eq!(v_u.len(), model.config.local_width());
    }

    #[test]
    fn encode_pool_dominates_every_state() {
        let model = tiny_model(2);
        let (word_states, v_u) = model.encode_utterance(&[4, 5, 6, 7]).unwrap();
        for row in &word_states {
            for (j, &x) in row.iter().enumerate() {
                assert!(v_u[j] >= x);
            }
        }
    }

    #[test]
    fn encode_reversal_swaps_direction_halves() {
        // with shared direction parameters, reversing the tokens mirrors
        // the matrix of word states and swaps the forward/backward halves
        let mut model = tiny_model(3);
        model.enc_bwd = model.enc_fwd.clone();
        let d = model.config.hidden_dim;
        let (h_ab, _) = model.encode_utterance(&[4, 5]).unwrap();
        let (h_ba, _) = model.encode_utterance(&[5, 4]).unwrap();
        let swap = |row: &[f64]| -> Vec<f64> {
            let mut out = row[d..].to_vec();
            out.extend_from_slice(&row[..d]);
            out
        };
        assert_eq!(h_ba[0], swap(&h_ab[1]));
        assert_eq!(h_ba[1], swap(&h_ab[0]));
    }

    #[test]
    fn encode_rejects_empty_and_out_of_range() {
        let model = tiny_model(4);
        assert!(matches!(
            model.encode_utterance(&[]),
            Err(Error::EmptySequence(_))
        ));
        assert!(matches!(
            model.encode_utterance(&[99]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn encode_session_single_utterance() {
        let model = tiny_model(5);
        let session = Session::new(vec![vec![4, 5]]);
        let enc = model.encode_session(&session).unwrap();
        assert_eq!(enc.ctx_states.len(), 1);
        assert_eq!(enc.ctx_states[0].len(), model.config.hidden_dim);

        // h^s_1 = GRU_s(0, v^u_1), checked directly
        let mut tape = Tape::new();
        let ids = model.bind(&mut tape, false);
        let zero = tape.zeros(vec![model.config.hidden_dim]);
        let v = tape.leaf(enc.utt_vecs[0].clone(), vec![model.config.local_width()], false).unwrap();
        let h = gru_cell(&mut tape, &ids.ctx, zero, v).unwrap();
        assert_eq!(tape.data(h), enc.ctx_states[0].as_slice());
    }

    #[test]
    fn encode_session_prefix_agreement() {
        let model = tiny_model(6);
        let two = Session::new(vec![vec![4, 5], vec![6]]);
        let three = Session::new(vec![vec![4, 5], vec![6], vec![7, 8]]);
        let enc2 = model.encode_session(&two).unwrap();
        let enc3 = model.encode_session(&three).unwrap();
        assert_eq!(enc2.ctx_states[0], enc3.ctx_states[0]);
        assert_eq!(enc2.ctx_states[1], enc3.ctx_states[1]);
        assert_eq!(enc2.word_states, enc3.word_states[..2].to_vec());
    }

    #[test]
    fn encode_session_order_sensitivity() {
        let model = tiny_model(7);
        let a = Session::new(vec![vec![4], vec![5], vec![6]]);
        let b = Session::new(vec![vec![5], vec![4], vec![6]]);
        let ea = model.encode_session(&a).unwrap();
        let eb = model.encode_session(&b).unwrap();
        assert_ne!(ea.ctx_states[2], eb.ctx_states[2]);
    }

    #[test]
    fn encode_session_rejects_empty_and_oversize() {
        let model = tiny_model(8);
        assert!(matches!(
            model.encode_session(&Session::new(vec![])),
            Err(Error::EmptySequence(_))
        ));
        let long = Session::new((0..11).map(|_| vec![4]).collect());
        assert!(matches!(
            model.encode_session(&long),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn decode_uniform_logits_give_ln_v_per_token() {
        let mut model = tiny_model(9);
        let v = 50;
        let mut cfg = model.config;
        cfg.vocab_size = v;
        let mut rng = Rng::new(1);
        model = HedModel::new(cfg, &mut rng).unwrap();
        model.out_w.data.iter_mut().for_each(|x| *x = 0.0);
        model.out_b.data.iter_mut().for_each(|x| *x = 0.0);
        let h = vec![0.1; model.config.hidden_dim];
        let (loss, count) = model.decode_nll(&h, &[7, 9, EOS]).unwrap();
        assert_eq!(count, 3);
        assert!((loss - 3.0 * (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn decode_confident_single_token() {
        // constant logits +10 on <eos>, −10 elsewhere: loss ≈ (V−1)e^{−20}
        let mut model = tiny_model(10);
        model.out_w.data.iter_mut().for_each(|x| *x = 0.0);
        model.out_b.data.iter_mut().for_each(|x| *x = -10.0);
        model.out_b.data[EOS] = 10.0;
        let h = vec![0.0; model.config.hidden_dim];
        let (loss, count) = model.decode_nll(&h, &[EOS]).unwrap();
        assert_eq!(count, 1);
        assert!(loss < 1e-3, "loss {loss}");
        assert!(loss > 0.0);
    }

    #[test]
    fn decode_rejects_bad_targets() {
        let model = tiny_model(11);
        let h = vec![0.0; model.config.hidden_dim];
        assert!(matches!(model.decode_nll(&h, &[]), Err(Error::Contract(_))));
        assert!(matches!(
            model.decode_nll(&h, &[4, 5]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            model.decode_nll(&h, &[99, EOS]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn decode_gradient_wrt_context_state_matches_fd() {
        let model = tiny_model(12);
        let target = vec![4, 6, EOS];
        let h0: Vec<f64> = (0..model.config.hidden_dim).map(|i| 0.1 * i as f64 - 0.2).collect();

        let mut tape = Tape::new();
        let ids = model.bind(&mut tape, false);
        let h = tape.leaf(h0.clone(), vec![model.config.hidden_dim], true).unwrap();
        let (loss, _) = decode_nll_ids(&mut tape, &ids, h, &target).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(h).unwrap().to_vec();

        let numeric = central_diff(
            |v| model.decode_nll(v, &target).unwrap().0,
            &h0,
            1e-6,
        );
        assert!(max_rel_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn session_nll_two_turns_equals_single_decode() {
        let model = tiny_model(13);
        let session = Session::new(vec![vec![4, 5], vec![6, 7]]);
        let (loss, count) = model.session_nll(&session).unwrap();
        let enc = model.encode_session(&session).unwrap();
        let (direct, direct_count) = model
            .decode_nll(&enc.ctx_states[0], &[6, 7, EOS])
            .unwrap();
        assert_eq!(count, direct_count);
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn session_nll_three_turns_sums_two_decodes() {
        let model = tiny_model(14);
        let session = Session::new(vec![vec![4], vec![5, 6], vec![7]]);
        let (loss, count) = model.session_nll(&session).unwrap();

        let enc = model.encode_session(&session).unwrap();
        let (l1, c1) = model.decode_nll(&enc.ctx_states[0], &[5, 6, EOS]).unwrap();
        let (l2, c2) = model.decode_nll(&enc.ctx_states[1], &[7, EOS]).unwrap();
        assert_eq!(count, c1 + c2);
        assert!((loss - (l1 + l2)).abs() < 1e-9);
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn session_nll_needs_two_turns() {
        let model = tiny_model(15);
        assert!(matches!(
            model.session_nll(&Session::new(vec![vec![4]])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn session_nll_full_gradient_matches_fd() {
        let model = tiny_model(16);
        let session = Session::new(vec![vec![4, 5], vec![6], vec![7, 8]]);

        let mut tape = Tape::new();
        let ids = model.bind(&mut tape, true);
        let (loss, _) = session_nll_ids(&mut tape, &ids, &session).unwrap();
        tape.backward(loss).unwrap();

        let bound: Vec<TensorId> = {
            let mut v = vec![ids.embed];
            for g in [&ids.enc_fwd, &ids.enc_bwd, &ids.ctx, &ids.dec] {
                v.extend([g.w_z, g.u_z, g.b_z, g.w_r, g.u_r, g.b_r, g.w_h, g.u_h, g.b_h]);
            }
            v.extend([ids.init_w, ids.init_b, ids.out_w, ids.out_b]);
            v
        };
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        for (pi, id) in bound.iter().enumerate() {
            let analytic = tape.grad(*id).unwrap().to_vec();
            let base = model.params()[pi].data.clone();
            let numeric = central_diff(
                |v| {
                    let mut probe = model.clone();
                    probe.params_mut()[pi].data = v.to_vec();
                    probe.session_nll(&session).unwrap().0
                },
                &base,
                1e-6,
            );
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-5, "{} rel err {err}", names[pi]);
        }
    }

    #[test]
    fn perplexity_uniform_model_equals_vocab_size() {
        let cfg = HedConfig {
            vocab_size: 100,
            embed_dim: 4,
            hidden_dim: 4,
            max_session_len: 10,
            max_utterance_len: 50,
        };
        let mut rng = Rng::new(2);
        let mut model = HedModel::new(cfg, &mut rng).unwrap();
        model.out_w.data.iter_mut().for_each(|x| *x = 0.0);
        model.out_b.data.iter_mut().for_each(|x| *x = 0.0);
        let corpus = vec![
            Session::new(vec![vec![4, 5], vec![6]]),
            Session::new(vec![vec![7], vec![8, 9], vec![10]]),
        ];
        let ppl = model.perplexity(&corpus).unwrap();
        assert!((ppl - 100.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_invariant_to_corpus_order() {
        let model = tiny_model(18);
        let a = Session::new(vec![vec![4, 5], vec![6]]);
        let b = Session::new(vec![vec![7], vec![8, 9]]);
        let p1 = model.perplexity(&[a.clone(), b.clone()]).unwrap();
        let p2 = model.perplexity(&[b, a]).unwrap();
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn perplexity_rejects_empty_corpus() {
        let model = tiny_model(19);
        assert!(matches!(model.perplexity(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn word_state_and_context_width_contract() {
        let model = tiny_model(20);
        let session = Session::new(vec![vec![4, 5, 6], vec![7]]);
        let enc = model.encode_session(&session).unwrap();
        for utt in &enc.word_states {
            for row in utt {
                assert_eq!(row.len(), 2 * model.config.hidden_dim);
            }
        }
        for state in &enc.ctx_states {
            assert_eq!(state.len(), model.config.hidden_dim);
        }
    }
}
