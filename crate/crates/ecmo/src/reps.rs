//! Extraction of the two-level contextualized representations from a
//! trained encoder.
//!
//! For each word the local vector is its bidirectional utterance-encoder
//! state (width 2·hidden); for each utterance the global vector is the
//! context-encoder state at its position (width hidden). A response is
//! treated as a one-utterance session, so its global vector is the single
//! context state.

use std::fmt::Write as _;

use crate::data::{Session, Vocabulary};
use crate::error::{Error, Result};
use crate::hed::HedModel;

/// Per-word local vectors and per-utterance global vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EcmoReps {
    /// `local[i][k]` is the vector of word k in utterance i.
    pub local: Vec<Vec<Vec<f64>>>,
    /// `global[i]` is the vector of utterance i; every word of the
    /// utterance shares it.
    pub global: Vec<Vec<f64>>,
}

impl EcmoReps {
    /// The global vector of word k in utterance i (k-independent).
    pub fn global_for_word(&self, utterance: usize, _word: usize) -> &[f64] {
        &self.global[utterance]
    }
}

/// Run the encoder over a session and read off both levels.
pub fn extract(model: &HedModel, session: &Session) -> Result<EcmoReps> {
    let enc = model.encode_session(session)?;
    Ok(EcmoReps {
        local: enc.word_states,
        global: enc.ctx_states,
    })
}

/// A response is a special session with one utterance.
pub fn extract_response(model: &HedModel, response: &[usize]) -> Result<EcmoReps> {
    if response.is_empty() {
        return Err(Error::EmptySequence("cannot extract an empty response".into()));
    }
    extract(model, &Session::new(vec![response.to_vec()]))
}

/// Which level(s) the `extract-ecmo` subcommand dumps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpLevel {
    Local,
    Global,
    Both,
}

impl std::str::FromStr for DumpLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<DumpLevel> {
        match s {
            "local" => Ok(DumpLevel::Local),
            "global" => Ok(DumpLevel::Global),
            "both" => Ok(DumpLevel::Both),
            other => Err(Error::Usage(format!(
                "unknown level {other:?}; expected local, global, or both"
            ))),
        }
    }
}

/// Text dump: local lines are `utt_index word_index token v1 v2 ...`,
/// global lines are `utt_index v1 v2 ...`. Sections carry `# session i`
/// headers (and `# local` / `# global` when both levels are written).
pub fn dump_session(
    out: &mut String,
    session_index: usize,
    session: &Session,
    vocab: &Vocabulary,
    reps: &EcmoReps,
    level: DumpLevel,
) {
    writeln!(out, "# session {session_index}").unwrap();
    if level == DumpLevel::Both {
        writeln!(out, "# local").unwrap();
    }
    if matches!(level, DumpLevel::Local | DumpLevel::Both) {
        for (i, utt) in session.utterances.iter().enumerate() {
            for (k, &tok) in utt.iter().enumerate() {
                write!(out, "{i} {k} {}", vocab.token(tok)).unwrap();
                for v in &reps.local[i][k] {
                    write!(out, " {v}").unwrap();
                }
                out.push('\n');
            }
        }
    }
    if level == DumpLevel::Both {
        writeln!(out, "# global").unwrap();
    }
    if matches!(level, DumpLevel::Global | DumpLevel::Both) {
        for (i, vec) in reps.global.iter().enumerate() {
            write!(out, "{i}").unwrap();
            for v in vec {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
    }
}
