//! Glob-based freeze plans; later rules override earlier ones.

use glob::Pattern;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// Encoder frozen; adapters, norms, decoder, reduce conv and pose train.
    Stage1,
    /// Encoder and decoder frozen; adapters, norms and pose train.
    Stage2,
    FullFineTune,
    FrozenAll,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanOptions {
    pub freeze_pose: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreezeRule {
    pub pattern: Pattern,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreezePlan {
    pub rules: Vec<FreezeRule>,
}

fn rules(list: &[(&str, bool)]) -> Vec<FreezeRule> {
    list.iter()
        .map(|&(p, trainable)| FreezeRule { pattern: Pattern::new(p).expect("static pattern"), trainable })
        .collect()
}

/// Adapters and every batch-norm affine stay trainable in both stages.
const ALWAYS_TUNED: [(&str, bool); 4] =
    [("*.adapter.*", true), ("*.decoder_adapter.*", true), ("*.gamma", true), ("*.beta", true)];

pub fn build_freeze_plan(kind: PlanKind, options: PlanOptions) -> FreezePlan {
    let pose = ("pose.*", !options.freeze_pose);
    let mut list: Vec<(&str, bool)> = match kind {
        PlanKind::Stage1 => vec![
            ("*.encoder.*", false),
            ("*.decoder.*", true),
            ("student.reduce_conv.*", true),
            ("*.decoder_adapter.*", true),
        ],
        PlanKind::Stage2 => vec![("*.encoder.*", false), ("*.decoder.*", false), ("student.reduce_conv.*", false)],
        PlanKind::FullFineTune => vec![("*", true)],
        PlanKind::FrozenAll => vec![("*", false)],
    };
    if matches!(kind, PlanKind::Stage1 | PlanKind::Stage2) {
        list.extend(ALWAYS_TUNED);
    }
    if kind != PlanKind::FrozenAll {
        list.push(pose);
    }
    FreezePlan { rules: rules(&list) }
}

impl FreezePlan {
    /// Trainability of `name`, or `None` when no rule matches.
    pub fn decide(&self, name: &str) -> Option<bool> {
        self.rules.iter().rev().find(|r| r.pattern.matches(name)).map(|r| r.trainable)
    }

    /// Sets every parameter's `trainable` flag. Fails, without changing
    /// anything, if some parameter matches no rule.
    pub fn apply<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        let unmatched: Vec<String> = store.names().filter(|n| self.decide(n).is_none()).cloned().collect();
        if !unmatched.is_empty() {
            return Err(Error::Config(format!("freeze plan leaves parameters unmatched: {}", unmatched.join(", "))));
        }
        for (name, p) in store.iter_mut() {
            p.trainable = self.decide(name).expect("checked above");
        }
        Ok(())
    }
}
