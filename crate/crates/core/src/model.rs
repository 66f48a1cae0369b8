//! The fitted ensemble and its on-disk document.
//!
//! The document is JSON with a fixed `format` tag and integer `version`.
//! Reals are written as shortest round-trip decimals and parsed with correct
//! rounding, so `from_document(to_document(m)) == m` bit for bit.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hmm::{StateDistribution, TransitionMatrix};
use crate::mqe::{ConstraintFallback, MqeEmission};
use crate::scalar::Real;

pub const DOCUMENT_FORMAT: &str = "ptse-model";
pub const DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed model document: {0}")]
    Malformed(String),
    #[error("unsupported model document version {found} (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u32 },
}

/// Transition matrix, initial and stationary distributions, and one
/// constrained residual density per member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<T> {
    pub transition: TransitionMatrix<T>,
    pub initial: StateDistribution<T>,
    pub stationary: StateDistribution<T>,
    pub emissions: Vec<MqeEmission<T>>,
    pub q: T,
    pub member_names: Vec<String>,
    /// Data log-likelihood after each EM update; entry 0 is the starting
    /// point, the last entry belongs to the returned parameters.
    pub fit_trace: Vec<T>,
}

impl<T: Real> EnsembleModel<T> {
    pub fn members(&self) -> usize {
        self.emissions.len()
    }

    pub fn final_log_likelihood(&self) -> Option<T> {
        self.fit_trace.last().copied()
    }

    pub fn bandwidths(&self) -> Vec<T> {
        self.emissions.iter().map(MqeEmission::bandwidth).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument<T> {
    format: String,
    version: u32,
    states: usize,
    q: T,
    member_names: Vec<String>,
    transition: Vec<Vec<T>>,
    initial: Vec<T>,
    stationary: Vec<T>,
    emissions: Vec<EmissionDocument<T>>,
    fit_trace: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmissionDocument<T> {
    member: String,
    bandwidth: T,
    w_neg: T,
    w_pos: T,
    fallback: Option<ConstraintFallback>,
    residuals: Vec<T>,
    gamma: Vec<T>,
}

pub fn to_document<T: Real + Serialize>(model: &EnsembleModel<T>) -> String {
    let doc = ModelDocument {
        format: DOCUMENT_FORMAT.to_owned(),
        version: DOCUMENT_VERSION,
        states: model.members(),
        q: model.q,
        member_names: model.member_names.clone(),
        transition: model.transition.rows(),
        initial: model.initial.probs().to_vec(),
        stationary: model.stationary.probs().to_vec(),
        emissions: model
            .emissions
            .iter()
            .zip(&model.member_names)
            .map(|(e, name)| EmissionDocument {
                member: name.clone(),
                bandwidth: e.bandwidth(),
                w_neg: e.w_neg(),
                w_pos: e.w_pos(),
                fallback: e.fallback(),
                residuals: e.residuals().to_vec(),
                gamma: e.gamma().to_vec(),
            })
            .collect(),
        fit_trace: model.fit_trace.clone(),
    };
    let mut out = serde_json::to_string_pretty(&doc).expect("model document serializes");
    out.push('\n');
    out
}

pub fn from_document<T: Real + DeserializeOwned>(text: &str) -> Result<EnsembleModel<T>, ModelError> {
    let malformed = |msg: String| ModelError::Malformed(msg);
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let format = raw.get("format").and_then(|v| v.as_str());
    if format != Some(DOCUMENT_FORMAT) {
        return Err(malformed(format!("format tag is {format:?}, expected {DOCUMENT_FORMAT:?}")));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing integer version".into()))?;
    if version != u64::from(DOCUMENT_VERSION) {
        return Err(ModelError::SchemaVersionMismatch {
            found: version,
            expected: DOCUMENT_VERSION,
        });
    }
    // Typed parse goes back to the text so reals keep their exact decimal.
    let doc: ModelDocument<T> = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;

    let k = doc.states;
    let check_len = |what: &str, got: usize| {
        if got == k {
            Ok(())
        } else {
            Err(malformed(format!("{what} has {got} entries but the document declares {k} states")))
        }
    };
    check_len("member_names", doc.member_names.len())?;
    check_len("transition", doc.transition.len())?;
    check_len("initial", doc.initial.len())?;
    check_len("stationary", doc.stationary.len())?;
    check_len("emissions", doc.emissions.len())?;
    if !(doc.q > T::zero() && doc.q < T::one()) {
        return Err(malformed(format!("quantile level {} outside (0, 1)", doc.q)));
    }

    let transition =
        TransitionMatrix::from_rows(&doc.transition).map_err(|e| malformed(e.to_string()))?;
    let initial = StateDistribution::new(doc.initial).map_err(|e| malformed(e.to_string()))?;
    let stationary = StateDistribution::new(doc.stationary).map_err(|e| malformed(e.to_string()))?;
    let mut emissions = Vec::with_capacity(k);
    for (e, name) in doc.emissions.into_iter().zip(&doc.member_names) {
        if &e.member != name {
            return Err(malformed(format!("emission for {:?} listed where {name:?} was expected", e.member)));
        }
        if e.residuals.len() != e.gamma.len() || e.residuals.is_empty() {
            return Err(malformed(format!("emission {name:?} has mismatched residual and weight columns")));
        }
        if !(e.bandwidth > T::zero()) {
            return Err(malformed(format!("emission {name:?} has non-positive bandwidth")));
        }
        emissions.push(MqeEmission::from_parts(
            e.residuals,
            e.gamma,
            e.bandwidth,
            e.w_neg,
            e.w_pos,
            doc.q,
            e.fallback,
        ));
    }
    Ok(EnsembleModel {
        transition,
        initial,
        stationary,
        emissions,
        q: doc.q,
        member_names: doc.member_names,
        fit_trace: doc.fit_trace,
    })
}
