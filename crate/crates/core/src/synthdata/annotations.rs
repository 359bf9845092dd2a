//! Evaluation-only access to hidden event annotations.
//!
//! Reading annotations needs an [`EvalAccess`] token. Tokens cannot be obtained on a
//! thread with an open [`TrainingScope`], and every acquisition is counted per thread,
//! so a training stage can prove it never looked.
//!
//! Tokens cannot be built outside this module:
//!
//! ```compile_fail
//! let access = wlss_core::synthdata::EvalAccess { _private: () };
//! ```
//!
//! The training view has no event field:
//!
//! ```compile_fail
//! fn peek(c: &wlss_core::synthdata::TrainingClip) -> usize { c.events.len() }
//! ```
//!
//! and training takes the view, not the annotated clip:
//!
//! ```compile_fail
//! use wlss_core::{runlog::RunLog, sed::{train_sed, SedArch, SedTrainConfig}, synthdata::WeakClip};
//! fn train(clips: &[WeakClip]) {
//!     let _ = train_sed(clips, SedArch::default(), &SedTrainConfig::default(), 0, &mut RunLog::sink(), None);
//! }
//! ```

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static OPEN_TRAINING_SCOPES: Cell<usize> = const { Cell::new(0) };
    static ACCESS_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Ground-truth event placement. Never part of the training view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventAnnotation {
    pub class_id: usize,
    pub onset_s: f64,
    pub offset_s: f64,
}

/// Proof that the caller is on the evaluation path.
#[derive(Debug)]
pub struct EvalAccess {
    _private: (),
}

impl EvalAccess {
    /// Fails while a training scope is open on this thread.
    pub fn acquire(purpose: &str) -> Result<Self> {
        if OPEN_TRAINING_SCOPES.get() > 0 {
            return Err(Error::invalid(format!(
                "hidden annotations requested during training (purpose: {purpose})"
            )));
        }
        ACCESS_COUNT.set(ACCESS_COUNT.get() + 1);
        Ok(Self { _private: () })
    }
}

/// Number of successful [`EvalAccess::acquire`] calls on this thread.
pub fn annotation_access_count() -> u64 {
    ACCESS_COUNT.get()
}

/// Marks a training region. While alive, annotation access is refused.
#[derive(Debug)]
pub struct TrainingScope {
    accesses_at_entry: u64,
}

impl TrainingScope {
    pub fn enter() -> Self {
        OPEN_TRAINING_SCOPES.set(OPEN_TRAINING_SCOPES.get() + 1);
        Self {
            accesses_at_entry: annotation_access_count(),
        }
    }

    /// Annotation reads on this thread since the scope opened.
    pub fn accesses_since_entry(&self) -> u64 {
        annotation_access_count() - self.accesses_at_entry
    }
}

impl Drop for TrainingScope {
    fn drop(&mut self) {
        OPEN_TRAINING_SCOPES.set(OPEN_TRAINING_SCOPES.get() - 1);
    }
}
