//! Adam optimization, training loops, and binary checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//! magic `ECMOCKPT`, version u32, config byte length u32, config as UTF-8
//! `key = value` lines, parameter count u32, then per parameter: name
//! length u32, name bytes, rank u32, dims as u64 each, row-major f64 data.
//! The float bytes round-trip exactly.

use std::fs;
use std::path::Path;

use crate::data::{Session, Vocabulary};
use crate::error::{Error, Result};
use crate::hed::{session_nll_ids, HedConfig, HedModel};
use crate::matcher::{
    batch_loss_with, precompute_frozen, EcmoMode, FrozenReps, MatchExample, MatcherConfig,
    MatcherModel,
};
use crate::rng::Rng;
use crate::tensor::{Param, Tape};

// ── Adam ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..AdamConfig::default() }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, param_sizes: &[usize]) -> Self {
        Adam {
            config,
            step_count: 0,
            first: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&Param]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Adam::new(config, &sizes)
    }

    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer holds {} buffers, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if grads[i].len() != p.numel() || self.first[i].len() != p.numel() {
                return Err(Error::Dimension(format!(
                    "gradient/moment size mismatch for {}",
                    p.name
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, param) in params.iter_mut().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for ((x, &g), (mj, vj)) in param
                .data
                .iter_mut()
                .zip(&grads[i])
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * g;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * g * g;
                let m_hat = *mj / bias1;
                let v_hat = *vj / bias2;
                *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

// ── Checkpoints ─────────────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"ECMOCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint config misses {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint config {key} = {raw:?} is not a number")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    let mut config_text = String::new();
    for (k, v) in &ckpt.config {
        config_text.push_str(&format!("{k} = {v}\n"));
    }
    bytes.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_text.as_bytes());
    bytes.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, shape, data) in &ckpt.params {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} not supported (expected {VERSION})"
        )));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let mut config = Vec::new();
    for line in config_text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
        config.push((k.to_string(), v.to_string()));
    }
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        params.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { config, params })
}

fn vocab_config_entry(vocab: &Vocabulary) -> (String, String) {
    ("vocab".to_string(), vocab.tokens().join(" "))
}

fn vocab_from_config(ckpt: &Checkpoint, key: &str) -> Result<Vocabulary> {
    let raw = ckpt
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint config misses {key:?}")))?;
    Vocabulary::from_tokens(raw.split(' ').map(|s| s.to_string()).collect())
}

/// Overwrite a model's parameters from checkpoint records; names and
/// shapes must match exactly, with `prefix` stripped from record names.
fn fill_params(
    records: &[(String, Vec<usize>, Vec<f64>)],
    prefix: &str,
    params: Vec<&mut Param>,
) -> Result<()> {
    let expected = params.len();
    let matching: Vec<&(String, Vec<usize>, Vec<f64>)> = records
        .iter()
        .filter(|(name, _, _)| name.starts_with(prefix))
        .collect();
    if matching.len() != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint has {} parameters with prefix {prefix:?}, model needs {expected}",
            matching.len()
        )));
    }
    for (record, param) in matching.iter().zip(params) {
        let (name, shape, data) = record;
        let bare = &name[prefix.len()..];
        if bare != param.name {
            return Err(Error::Compatibility(format!(
                "checkpoint parameter {bare:?} where model expects {:?}",
                param.name
            )));
        }
        if *shape != param.shape {
            return Err(Error::Compatibility(format!(
                "parameter {bare:?} has shape {shape:?}, model expects {:?}",
                param.shape
            )));
        }
        param.data = data.clone();
    }
    Ok(())
}

/// Serialize an encoder model together with its vocabulary.
pub fn hed_to_checkpoint(model: &HedModel, vocab: &Vocabulary) -> Checkpoint {
    let c = &model.config;
    let config = vec![
        ("kind".to_string(), "hed".to_string()),
        ("vocab_size".to_string(), c.vocab_size.to_string()),
        ("embed_dim".to_string(), c.embed_dim.to_string()),
        ("hidden_dim".to_string(), c.hidden_dim.to_string()),
        ("max_session_len".to_string(), c.max_session_len.to_string()),
        ("max_utterance_len".to_string(), c.max_utterance_len.to_string()),
        vocab_config_entry(vocab),
    ];
    let params = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone(), p.data.clone()))
        .collect();
    Checkpoint { config, params }
}

pub fn hed_from_checkpoint(ckpt: &Checkpoint) -> Result<(HedModel, Vocabulary)> {
    if ckpt.get("kind") != Some("hed") {
        return Err(Error::Format(format!(
            "expected a hed checkpoint, found kind {:?}",
            ckpt.get("kind")
        )));
    }
    let vocab = vocab_from_config(ckpt, "vocab")?;
    let config = HedConfig {
        vocab_size: ckpt.get_usize("vocab_size")?,
        embed_dim: ckpt.get_usize("embed_dim")?,
        hidden_dim: ckpt.get_usize("hidden_dim")?,
        max_session_len: ckpt.get_usize("max_session_len")?,
        max_utterance_len: ckpt.get_usize("max_utterance_len")?,
    };
    if config.vocab_size != vocab.len() {
        return Err(Error::Compatibility(format!(
            "config says vocab_size {}, vocabulary has {} tokens",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut rng = Rng::new(0);
    let mut model = HedModel::new(config, &mut rng)?;
    fill_params(&ckpt.params, "", model.params_mut())?;
    Ok((model, vocab))
}

/// Serialize a matcher; in the augmented modes the attached encoder's
/// parameters and vocabulary travel inside, `hed.`-prefixed.
pub fn matcher_to_checkpoint(
    model: &MatcherModel,
    vocab: &Vocabulary,
    hed_vocab: Option<&Vocabulary>,
) -> Result<Checkpoint> {
    let c = &model.config;
    let mut config = vec![
        ("kind".to_string(), "matcher".to_string()),
        ("vocab_size".to_string(), c.vocab_size.to_string()),
        ("embed_dim".to_string(), c.embed_dim.to_string()),
        ("hidden_dim".to_string(), c.hidden_dim.to_string()),
        ("ecmo_mode".to_string(), c.ecmo_mode.to_string()),
        ("max_session_len".to_string(), c.max_session_len.to_string()),
        ("max_utterance_len".to_string(), c.max_utterance_len.to_string()),
        vocab_config_entry(vocab),
    ];
    let mut params: Vec<(String, Vec<usize>, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone(), p.data.clone()))
        .collect();
    if c.ecmo_mode != EcmoMode::None {
        let hed = model.hed.as_ref().ok_or_else(|| {
            Error::Contract("augmented matcher without an attached encoder".into())
        })?;
        let hv = hed_vocab.ok_or_else(|| {
            Error::Contract("augmented matcher checkpoint needs the encoder vocabulary".into())
        })?;
        let hc = &hed.config;
        config.push(("hed.vocab_size".to_string(), hc.vocab_size.to_string()));
        config.push(("hed.embed_dim".to_string(), hc.embed_dim.to_string()));
        config.push(("hed.hidden_dim".to_string(), hc.hidden_dim.to_string()));
        config.push(("hed.max_session_len".to_string(), hc.max_session_len.to_string()));
        config.push(("hed.max_utterance_len".to_string(), hc.max_utterance_len.to_string()));
        config.push(("hed.vocab".to_string(), hv.tokens().join(" ")));
        for p in hed.params() {
            params.push((format!("hed.{}", p.name), p.shape.clone(), p.data.clone()));
        }
    }
    Ok(Checkpoint { config, params })
}

pub fn matcher_from_checkpoint(
    ckpt: &Checkpoint,
) -> Result<(MatcherModel, Vocabulary, Option<Vocabulary>)> {
    if ckpt.get("kind") != Some("matcher") {
        return Err(Error::Format(format!(
            "expected a matcher checkpoint, found kind {:?}",
            ckpt.get("kind")
        )));
    }
    let vocab = vocab_from_config(ckpt, "vocab")?;
    let mode: EcmoMode = ckpt
        .get("ecmo_mode")
        .ok_or_else(|| Error::Format("checkpoint config misses ecmo_mode".into()))?
        .parse()?;
    let config = MatcherConfig {
        vocab_size: ckpt.get_usize("vocab_size")?,
        embed_dim: ckpt.get_usize("embed_dim")?,
        hidden_dim: ckpt.get_usize("hidden_dim")?,
        ecmo_mode: mode,
        max_session_len: ckpt.get_usize("max_session_len")?,
        max_utterance_len: ckpt.get_usize("max_utterance_len")?,
    };
    if config.vocab_size != vocab.len() {
        return Err(Error::Compatibility(format!(
            "config says vocab_size {}, vocabulary has {} tokens",
            config.vocab_size,
            vocab.len()
        )));
    }
    let (hed, hed_vocab) = if mode != EcmoMode::None {
        let hv = vocab_from_config(ckpt, "hed.vocab")?;
        let hed_config = HedConfig {
            vocab_size: ckpt.get_usize("hed.vocab_size")?,
            embed_dim: ckpt.get_usize("hed.embed_dim")?,
            hidden_dim: ckpt.get_usize("hed.hidden_dim")?,
            max_session_len: ckpt.get_usize("hed.max_session_len")?,
            max_utterance_len: ckpt.get_usize("hed.max_utterance_len")?,
        };
        if hed_config.vocab_size != hv.len() {
            return Err(Error::Compatibility(format!(
                "config says hed.vocab_size {}, vocabulary has {} tokens",
                hed_config.vocab_size,
                hv.len()
            )));
        }
        let mut rng = Rng::new(0);
        let mut hed = HedModel::new(hed_config, &mut rng)?;
        fill_params(&ckpt.params, "hed.", hed.params_mut())?;
        (Some(hed), Some(hv))
    } else {
        (None, None)
    };
    let mut rng = Rng::new(0);
    let mut model = MatcherModel::new(config, hed, &mut rng)?;
    let matcher_records: Vec<(String, Vec<usize>, Vec<f64>)> = ckpt
        .params
        .iter()
        .filter(|(name, _, _)| !name.starts_with("hed."))
        .cloned()
        .collect();
    fill_params(&matcher_records, "", model.params_mut())?;
    Ok((model, vocab, hed_vocab))
}

// ── Training loops ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 1,
            batch_size: 40,
            lr: 1e-3,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// One `epoch<TAB>split<TAB>metric<TAB>value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl std::fmt::Display for LogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.epoch, self.split, self.metric, self.value)
    }
}

pub fn render_log(lines: &[LogLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    // per-epoch derived stream: reordering epochs never reuses a permutation
    let mut rng = Rng::derive(seed, "epoch_shuffle", epoch as u64);
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Minimize the per-token session likelihood loss. Logs the mean per-token
/// training loss each epoch, and validation perplexity when a validation
/// split is given.
pub fn train_hed(
    model: &mut HedModel,
    corpus: &[Session],
    val: Option<&[Session]>,
    opts: &TrainOpts,
) -> Result<Vec<LogLine>> {
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Contract(format!(
                "corpus session {i} has fewer than two utterances"
            )));
        }
    }
    let mut adam = Adam::for_params(AdamConfig::with_lr(opts.lr), &model.params());
    let mut log = Vec::new();
    for epoch in 1..=opts.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in epoch_batches(corpus.len(), opts.batch_size, opts.seed, epoch) {
            let mut tape = Tape::new();
            let ids = model.bind(&mut tape, true);
            let mut total = None;
            let mut tokens = 0usize;
            for &si in &batch {
                let (loss, count) = session_nll_ids(&mut tape, &ids, &corpus[si])?;
                tokens += count;
                total = Some(match total {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let loss = tape.scale(total.unwrap(), 1.0 / tokens as f64);
            epoch_loss += tape.value(loss) * tokens as f64;
            epoch_tokens += tokens;
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = ids
                .ordered()
                .iter()
                .map(|&id| tape.grad(id).unwrap().to_vec())
                .collect();
            if let Some(max_norm) = opts.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(&mut model.params_mut(), &grads)?;
        }
        log.push(LogLine {
            epoch,
            split: "train".to_string(),
            metric: "loss_per_token".to_string(),
            value: epoch_loss / epoch_tokens as f64,
        });
        if let Some(val) = val {
            let ppl = model.perplexity(val)?;
            log.push(LogLine {
                epoch,
                split: "val".to_string(),
                metric: "perplexity".to_string(),
                value: ppl,
            });
        }
    }
    Ok(log)
}

/// Continue training a loaded model on a new corpus with fresh optimizer
/// state (stale moments from the old distribution are discarded).
pub fn finetune_hed(
    model: &mut HedModel,
    corpus: &[Session],
    val: Option<&[Session]>,
    opts: &TrainOpts,
) -> Result<Vec<LogLine>> {
    train_hed(model, corpus, val, opts)
}

/// Minimize the matching loss. In frozen mode the attached encoder stays
/// outside the optimizer and the tape; in continue mode it trains jointly.
pub fn train_matcher(
    model: &mut MatcherModel,
    examples: &[MatchExample],
    opts: &TrainOpts,
) -> Result<Vec<LogLine>> {
    if examples.is_empty() {
        return Err(Error::Contract("no training examples".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    if model.config.ecmo_mode != EcmoMode::None && model.hed.is_none() {
        return Err(Error::Contract(
            "augmented mode requires a pretrained encoder checkpoint".into(),
        ));
    }
    let joint = model.config.ecmo_mode == EcmoMode::Continue;
    let mut sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    if joint {
        sizes.extend(model.hed.as_ref().unwrap().params().iter().map(|p| p.numel()));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), &sizes);
    // frozen vectors never change; extract them once up front
    let cache: Option<Vec<FrozenReps>> = match model.config.ecmo_mode {
        EcmoMode::Frozen => Some(precompute_frozen(model.hed.as_ref().unwrap(), examples)?),
        _ => None,
    };
    let mut log = Vec::new();
    for epoch in 1..=opts.epochs {
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch_idx in epoch_batches(examples.len(), opts.batch_size, opts.seed, epoch) {
            let batch: Vec<MatchExample> =
                batch_idx.iter().map(|&i| examples[i].clone()).collect();
            let batch_cache: Option<Vec<&FrozenReps>> = cache
                .as_ref()
                .map(|c| batch_idx.iter().map(|&i| &c[i]).collect());
            let mut tape = Tape::new();
            let ids = model.bind(&mut tape, true, joint);
            let loss = batch_loss_with(&mut tape, &ids, model, &batch, batch_cache.as_deref())?;
            epoch_loss += tape.value(loss) * batch.len() as f64;
            seen += batch.len();
            tape.backward(loss)?;
            let mut grad_ids = ids.ordered();
            if joint {
                grad_ids.extend(ids.hed.as_ref().unwrap().ordered());
            }
            let mut grads: Vec<Vec<f64>> = grad_ids
                .iter()
                .map(|&id| tape.grad(id).unwrap().to_vec())
                .collect();
            if let Some(max_norm) = opts.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(&mut model.trainable_params_mut(joint), &grads)?;
        }
        log.push(LogLine {
            epoch,
            split: "train".to_string(),
            metric: "loss".to_string(),
            value: epoch_loss / seen as f64,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocabulary;
    use crate::matcher::ScoreValues;

    fn tmpdir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ecmo_trainer_{name}"));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut p = Param::new("p", vec![2], vec![1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        adam.step(&mut [&mut p], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        // g = 1 with fresh moments: m̂ = 1, v̂ = 1, Δ = −lr / (1 + ε)
        let mut p = Param::new("p", vec![1], vec![0.5]);
        let mut adam = Adam::new(AdamConfig::default(), &[1]);
        adam.step(&mut [&mut p], &[vec![1.0]]).unwrap();
        let delta = p.data[0] - 0.5;
        assert!((delta + 0.001).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn adam_deterministic_across_runs() {
        let run = || {
            let mut p = Param::new("p", vec![3], vec![0.1, 0.2, 0.3]);
            let mut adam = Adam::new(AdamConfig::default(), &[3]);
            for t in 0..10 {
                let g: Vec<f64> = (0..3).map(|i| ((t + i) as f64).sin()).collect();
                adam.step(&mut [&mut p], &[g]).unwrap();
            }
            p.data
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn adam_shape_mismatch_errors() {
        let mut p = Param::new("p", vec![2], vec![0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        assert!(matches!(
            adam.step(&mut [&mut p], &[vec![1.0]]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        let mut grads = vec![vec![3.0, 0.0], vec![4.0]];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads, vec![vec![3.0, 0.0], vec![4.0]]);
        let norm = clip_global_norm(&mut grads, 2.5);
        assert_eq!(norm, 5.0);
        assert!((grads[0][0] - 1.5).abs() < 1e-12);
        assert!((grads[1][0] - 2.0).abs() < 1e-12);
    }

    fn demo_vocab(n_extra: usize) -> Vocabulary {
        let mut toks: Vec<String> =
            crate::data::RESERVED.iter().map(|s| s.to_string()).collect();
        toks.extend((0..n_extra).map(|i| format!("w{i}")));
        Vocabulary::from_tokens(toks).unwrap()
    }

    fn small_hed(seed: u64, vocab: &Vocabulary) -> HedModel {
        let cfg = HedConfig {
            vocab_size: vocab.len(),
            embed_dim: 8,
            hidden_dim: 8,
            max_session_len: 10,
            max_utterance_len: 50,
        };
        let mut rng = Rng::derive(seed, "trainer_test_hed", 0);
        HedModel::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tmpdir("roundtrip");
        let vocab = demo_vocab(8);
        let model = small_hed(1, &vocab);
        let ckpt = hed_to_checkpoint(&model, &vocab);
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let (back, back_vocab) = hed_from_checkpoint(&loaded).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_vocab, vocab);
    }

    #[test]
    fn checkpoint_flipped_magic_rejected() {
        let dir = tmpdir("magic");
        let vocab = demo_vocab(4);
        let model = small_hed(2, &vocab);
        let path = dir.join("m.ckpt");
        save_checkpoint(&path, &hed_to_checkpoint(&model, &vocab)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_truncation_rejected() {
        let dir = tmpdir("trunc");
        let vocab = demo_vocab(4);
        let model = small_hed(3, &vocab);
        let path = dir.join("m.ckpt");
        save_checkpoint(&path, &hed_to_checkpoint(&model, &vocab)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_version_mismatch_rejected() {
        let dir = tmpdir("version");
        let vocab = demo_vocab(4);
        let model = small_hed(4, &vocab);
        let path = dir.join("m.ckpt");
        save_checkpoint(&path, &hed_to_checkpoint(&model, &vocab)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn checkpoint_param_count_mismatch_rejected() {
        let vocab = demo_vocab(4);
        let model = small_hed(5, &vocab);
        let mut ckpt = hed_to_checkpoint(&model, &vocab);
        ckpt.params.pop();
        assert!(matches!(
            hed_from_checkpoint(&ckpt),
            Err(Error::Compatibility(_))
        ));
    }

    fn overfit_sessions() -> Vec<Session> {
        // four short sessions whose second turns share one deterministic
        // token chain, so the previous-token input alone predicts the next
        vec![
            Session::new(vec![vec![4, 5], vec![6, 7, 8]]),
            Session::new(vec![vec![5, 4], vec![6, 7, 8]]),
            Session::new(vec![vec![4, 4], vec![6, 7, 8]]),
            Session::new(vec![vec![5, 5], vec![6, 7, 8]]),
        ]
    }

    #[test]
    fn hed_single_batch_overfit_drops_ninety_percent() {
        // the displacement an Adam step can add is bounded by the learning
        // rate, so the logit gap 200 steps can open scales with the width
        // of the output features; width 24 gives ample headroom
        let vocab = demo_vocab(8);
        let cfg = HedConfig {
            vocab_size: vocab.len(),
            embed_dim: 24,
            hidden_dim: 24,
            max_session_len: 10,
            max_utterance_len: 50,
        };
        let mut rng = Rng::derive(6, "trainer_test_hed", 0);
        let mut model = HedModel::new(cfg, &mut rng).unwrap();
        let corpus = overfit_sessions();
        let initial = mean_session_loss(&model, &corpus);
        let opts = TrainOpts {
            epochs: 200,
            batch_size: 4,
            lr: 1e-3,
            clip_norm: Some(5.0),
            seed: 1,
        };
        train_hed(&mut model, &corpus, None, &opts).unwrap();
        let fin = mean_session_loss(&model, &corpus);
        assert!(
            fin <= 0.1 * initial,
            "loss only fell from {initial} to {fin}"
        );
    }

    fn mean_session_loss(model: &HedModel, corpus: &[Session]) -> f64 {
        let mut loss = 0.0;
        let mut tokens = 0usize;
        for s in corpus {
            let (l, c) = model.session_nll(s).unwrap();
            loss += l;
            tokens += c;
        }
        loss / tokens as f64
    }

    #[test]
    fn perplexity_of_memorized_corpus_approaches_one() {
        // overfit a single session to < 0.01 nats per token; the
        // perplexity is then e^loss < 1.02
        let vocab = demo_vocab(8);
        let cfg = HedConfig {
            vocab_size: vocab.len(),
            embed_dim: 16,
            hidden_dim: 16,
            max_session_len: 10,
            max_utterance_len: 50,
        };
        let mut rng = Rng::derive(52, "trainer_test_hed", 0);
        let mut model = HedModel::new(cfg, &mut rng).unwrap();
        let corpus = vec![Session::new(vec![vec![4, 5], vec![6, 7, 8]])];
        let opts = TrainOpts {
            epochs: 1200,
            batch_size: 1,
            lr: 1e-2,
            clip_norm: Some(5.0),
            seed: 3,
        };
        train_hed(&mut model, &corpus, None, &opts).unwrap();
        let (loss, tokens) = model.session_nll(&corpus[0]).unwrap();
        let per_token = loss / tokens as f64;
        assert!(per_token < 0.01, "per-token loss {per_token}");
        let ppl = model.perplexity(&corpus).unwrap();
        assert!(ppl < 1.02, "perplexity {ppl}");
    }

    #[test]
    fn hed_training_is_deterministic() {
        let vocab = demo_vocab(8);
        let corpus = overfit_sessions();
        let opts = TrainOpts {
            epochs: 5,
            batch_size: 2,
            lr: 1e-3,
            clip_norm: Some(5.0),
            seed: 9,
        };
        let run = || {
            let mut model = small_hed(7, &vocab);
            let log = train_hed(&mut model, &corpus, Some(&corpus), &opts).unwrap();
            (model, log)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn hed_zero_epochs_leaves_model_unchanged() {
        let vocab = demo_vocab(8);
        let mut model = small_hed(8, &vocab);
        let before = model.clone();
        let opts = TrainOpts { epochs: 0, ..TrainOpts::default() };
        let log = train_hed(&mut model, &overfit_sessions(), None, &opts).unwrap();
        assert_eq!(model, before);
        assert!(log.is_empty());
    }

    #[test]
    fn hed_first_epoch_beats_uniform_perplexity() {
        let vocab = demo_vocab(8);
        let mut model = small_hed(9, &vocab);
        let corpus: Vec<Session> = (0..20)
            .map(|i| {
                Session::new(vec![
                    vec![4 + (i % 2), 5],
                    vec![6, 6, 7],
                ])
            })
            .collect();
        let opts = TrainOpts {
            epochs: 1,
            batch_size: 4,
            lr: 1e-2,
            clip_norm: Some(5.0),
            seed: 2,
        };
        let log = train_hed(&mut model, &corpus, Some(&corpus), &opts).unwrap();
        let ppl = log
            .iter()
            .find(|l| l.metric == "perplexity")
            .unwrap()
            .value;
        assert!(ppl < vocab.len() as f64, "perplexity {ppl}");
    }

    #[test]
    fn finetune_zero_epochs_reproduces_checkpoint() {
        let dir = tmpdir("finetune0");
        let vocab = demo_vocab(8);
        let mut model = small_hed(10, &vocab);
        let opts = TrainOpts { epochs: 2, batch_size: 2, ..TrainOpts::default() };
        train_hed(&mut model, &overfit_sessions(), None, &opts).unwrap();
        let path = dir.join("m.ckpt");
        save_checkpoint(&path, &hed_to_checkpoint(&model, &vocab)).unwrap();

        let (mut loaded, _) = hed_from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
        let zero = TrainOpts { epochs: 0, ..TrainOpts::default() };
        finetune_hed(&mut loaded, &overfit_sessions(), None, &zero).unwrap();
        let path2 = dir.join("m2.ckpt");
        save_checkpoint(&path2, &hed_to_checkpoint(&loaded, &vocab)).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    fn matcher_fixture(seed: u64, mode: EcmoMode) -> (MatcherModel, Vec<MatchExample>) {
        let vocab = demo_vocab(12);
        let hed = match mode {
            EcmoMode::None => None,
            _ => Some(small_hed(seed + 50, &vocab)),
        };
        let cfg = MatcherConfig {
            vocab_size: vocab.len(),
            embed_dim: 6,
            hidden_dim: 6,
            ecmo_mode: mode,
            max_session_len: 10,
            max_utterance_len: 50,
        };
        let mut rng = Rng::derive(seed, "trainer_test_matcher", 0);
        let model = MatcherModel::new(cfg, hed, &mut rng).unwrap();
        let examples: Vec<MatchExample> = (0..8)
            .map(|i| {
                let a = 4 + (i % 4);
                let b = 8 + (i % 4);
                MatchExample {
                    label: i % 2 == 0,
                    ctx_m: vec![vec![a, b], vec![a]],
                    resp_m: vec![b, a],
                    ctx_h: vec![vec![a, b], vec![a]],
                    resp_h: vec![b, a],
                }
            })
            .collect();
        (model, examples)
    }

    #[test]
    fn matcher_single_batch_overfit() {
        let (mut model, examples) = matcher_fixture(11, EcmoMode::None);
        let opts = TrainOpts {
            epochs: 300,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: Some(5.0),
            seed: 3,
        };
        train_matcher(&mut model, &examples, &opts).unwrap();
        let loss = model.loss(&examples).unwrap();
        assert!(loss < 0.05, "loss {loss}");
    }

    #[test]
    fn matcher_frozen_mode_never_touches_the_encoder() {
        let (mut model, examples) = matcher_fixture(12, EcmoMode::Frozen);
        let before = model.hed.clone().unwrap();
        let opts = TrainOpts {
            epochs: 25,
            batch_size: 4,
            lr: 1e-3,
            clip_norm: Some(5.0),
            seed: 4,
        };
        train_matcher(&mut model, &examples, &opts).unwrap();
        // bit-exact: 100 steps of matcher training left every encoder
        // parameter untouched
        assert_eq!(model.hed.as_ref().unwrap(), &before);
    }

    #[test]
    fn matcher_continue_mode_updates_the_encoder() {
        let (mut model, examples) = matcher_fixture(13, EcmoMode::Continue);
        let before = model.hed.clone().unwrap();
        let opts = TrainOpts {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: Some(5.0),
            seed: 5,
        };
        train_matcher(&mut model, &examples, &opts).unwrap();
        assert_ne!(model.hed.as_ref().unwrap(), &before);
    }

    #[test]
    fn frozen_and_continue_identical_scores_before_training() {
        let (frozen, examples) = matcher_fixture(14, EcmoMode::Frozen);
        let mut cont = frozen.clone();
        cont.config.ecmo_mode = EcmoMode::Continue;
        for ex in &examples {
            let a: ScoreValues = frozen.score(ex).unwrap();
            let b: ScoreValues = cont.score(ex).unwrap();
            assert_eq!(a.prob.to_bits(), b.prob.to_bits());
        }
    }

    #[test]
    fn all_positive_labels_push_scores_up() {
        let (mut model, mut examples) = matcher_fixture(15, EcmoMode::None);
        for ex in &mut examples {
            ex.label = true;
        }
        let opts = TrainOpts {
            epochs: 500,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: Some(5.0),
            seed: 6,
        };
        train_matcher(&mut model, &examples, &opts).unwrap();
        let mean: f64 = examples
            .iter()
            .map(|e| model.score(e).unwrap().prob)
            .sum::<f64>()
            / examples.len() as f64;
        assert!(mean > 0.9, "mean score {mean}");
    }

    #[test]
    fn matcher_training_deterministic_and_loss_logged() {
        let opts = TrainOpts {
            epochs: 3,
            batch_size: 4,
            lr: 1e-3,
            clip_norm: Some(5.0),
            seed: 7,
        };
        let run = || {
            let (mut model, examples) = matcher_fixture(16, EcmoMode::Frozen);
            let log = train_matcher(&mut model, &examples, &opts).unwrap();
            (model, log)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        assert_eq!(l1.len(), 3);
        assert!(l1.iter().all(|l| l.metric == "loss"));
    }

    #[test]
    fn matcher_checkpoint_round_trip_with_embedded_encoder() {
        let dir = tmpdir("matcher_ckpt");
        let (model, _) = matcher_fixture(17, EcmoMode::Frozen);
        let vocab = demo_vocab(12);
        let ckpt = matcher_to_checkpoint(&model, &vocab, Some(&vocab)).unwrap();
        let path = dir.join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let (back, back_vocab, back_hed_vocab) =
            matcher_from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_vocab, vocab);
        assert_eq!(back_hed_vocab.unwrap(), vocab);
    }

    #[test]
    fn log_lines_render_tab_separated() {
        let line = LogLine {
            epoch: 3,
            split: "val".into(),
            metric: "perplexity".into(),
            value: 12.5,
        };
        assert_eq!(line.to_string(), "3\tval\tperplexity\t12.5");
    }

    #[test]
    fn epoch_loss_trend_decreases_across_seeds() {
        // epoch-3 training loss below epoch-1 in at least 9 of 10 seeds
        let vocab = demo_vocab(8);
        let corpus: Vec<Session> = (0..12)
            .map(|i| {
                Session::new(vec![
                    vec![4 + (i % 3), 5],
                    vec![6, 7, 4 + (i % 3)],
                ])
            })
            .collect();
        let mut improved = 0;
        for seed in 0..10u64 {
            let mut model = small_hed(100 + seed, &vocab);
            let opts = TrainOpts {
                epochs: 3,
                batch_size: 4,
                lr: 1e-3,
                clip_norm: Some(5.0),
                seed,
            };
            let log = train_hed(&mut model, &corpus, None, &opts).unwrap();
            let losses: Vec<f64> = log
                .iter()
                .filter(|l| l.metric == "loss_per_token")
                .map(|l| l.value)
                .collect();
            if losses[2] < losses[0] {
                improved += 1;
            }
        }
        assert!(improved >= 9, "only {improved}/10 seeds improved");
    }
}
