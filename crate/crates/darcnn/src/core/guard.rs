//! Read guard separating trainer and evaluator access to annotations.
//!
//! Target-domain ground truth must never leak into training; the guard makes
//! the rule structural instead of conventional. Denied accesses are counted
//! so tests can assert the trainer never even attempts one.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::core::types::InstanceAnnotation;

static TRAINER_DENIALS: AtomicU64 = AtomicU64::new(0);

/// Number of trainer-context accesses denied so far in this process.
pub fn trainer_denials() -> u64 {
    TRAINER_DENIALS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessContext {
    Trainer,
    Evaluator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationPolicy {
    /// Readable from any context (source ground truth, pseudo-labels).
    Open,
    /// Readable only from an evaluator context (target ground truth).
    EvalOnly,
}

#[derive(Debug, Clone)]
pub struct GuardedAnnotations {
    items: Option<Vec<InstanceAnnotation>>,
    policy: AnnotationPolicy,
    pseudo: bool,
}

impl GuardedAnnotations {
    pub fn new(
        items: Option<Vec<InstanceAnnotation>>,
        policy: AnnotationPolicy,
        pseudo: bool,
    ) -> Self {
        GuardedAnnotations {
            items,
            policy,
            pseudo,
        }
    }

    pub fn policy(&self) -> AnnotationPolicy {
        self.policy
    }

    pub fn is_pseudo(&self) -> bool {
        self.pseudo
    }

    pub fn is_present(&self) -> bool {
        self.items.is_some()
    }

    /// Guarded read. `EvalOnly` annotations deny trainer access.
    pub fn get(&self, ctx: AccessContext) -> Result<Option<&[InstanceAnnotation]>> {
        if self.policy == AnnotationPolicy::EvalOnly && ctx == AccessContext::Trainer {
            TRAINER_DENIALS.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Guard(
                "trainer context may not read eval-only annotations".into(),
            ));
        }
        Ok(self.items.as_deref())
    }

    /// Unguarded read for serialization paths that must persist ground truth.
    pub(crate) fn raw(&self) -> Option<&[InstanceAnnotation]> {
        self.items.as_deref()
    }
}
