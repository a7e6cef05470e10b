//! Exact FLOPs accounting for every phase of the pipeline.
//!
//! Costs are modeled for dense transformer shapes. The per-token cost is the
//! sum of an attention term `12·L·H²·(1 + q/heads + S/H)`, an MLP term
//! `18·L·H·FFN`, and an embedding term `6·V·H`, multiplied by
//! `(1 + backward_multiplier)` — 1 for generation/scoring forward passes,
//! 4 (i.e. backward multiplier 3) for training. The attention term is the
//! only non-integer piece; it is kept as an exact rational with denominator
//! `heads` and the total is rounded half-up exactly once at the end. All
//! arithmetic is `u128` and overflow is a hard error, so ledgers never
//! silently saturate or drift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense transformer shape used for cost accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    /// Number of transformer layers.
    pub layers: u64,
    /// Hidden (model) dimension.
    pub hidden: u64,
    /// Number of attention heads.
    pub heads: u64,
    /// Number of query groups (grouped-query attention); `heads` for MHA.
    pub query_groups: u64,
    /// MLP inner dimension.
    pub ffn: u64,
    /// Vocabulary size for the embedding/unembedding term.
    pub vocab: u64,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("query_groups", self.query_groups),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(Error::domain(format!("model shape field {name} must be >= 1")));
            }
        }
        if self.query_groups > self.heads {
            return Err(Error::domain(format!(
                "query_groups ({}) must not exceed heads ({})",
                self.query_groups, self.heads
            )));
        }
        Ok(())
    }

    /// Looks up a named preset shape; `None` if the name is unknown.
    pub fn preset(name: &str) -> Option<ModelShape> {
        match name {
            "llama8b-like" => Some(ModelShape {
                layers: 32,
                hidden: 4096,
                heads: 32,
                query_groups: 8,
                ffn: 14336,
                vocab: 128256,
            }),
            "llama70b-like" => Some(ModelShape {
                layers: 80,
                hidden: 8192,
                heads: 64,
                query_groups: 8,
                ffn: 28672,
                vocab: 128256,
            }),
            _ => None,
        }
    }

    /// Resolves a preset name, mapping unknown names to a config error.
    pub fn resolve(name: &str) -> Result<ModelShape> {
        ModelShape::preset(name).ok_or_else(|| {
            Error::config(format!(
                "unknown model shape preset {name:?}; known presets: llama8b-like, llama70b-like"
            ))
        })
    }
}

fn checked_mul(a: u128, b: u128, what: &str) -> Result<u128> {
    a.checked_mul(b)
        .ok_or_else(|| Error::domain(format!("FLOPs overflow while computing {what}")))
}

fn checked_add(a: u128, b: u128, what: &str) -> Result<u128> {
    a.checked_add(b)
        .ok_or_else(|| Error::domain(format!("FLOPs overflow while computing {what}")))
}

/// Exact per-token FLOPs for one pass over a model of the given shape.
///
/// `backward_multiplier` is 0 for a pure forward pass (generation, scoring)
/// and 3 for training (forward + backward). The result is the half-up
/// rounding of the exact rational cost.
pub fn flops_per_token(shape: &ModelShape, seq_len: u64, backward_multiplier: u32) -> Result<u128> {
    shape.validate()?;
    if seq_len == 0 {
        return Err(Error::domain("seq_len must be >= 1"));
    }
    if backward_multiplier != 0 && backward_multiplier != 3 {
        return Err(Error::domain(format!(
            "backward_multiplier must be 0 (forward) or 3 (training), got {backward_multiplier}"
        )));
    }
    let l = shape.layers as u128;
    let h = shape.hidden as u128;
    let heads = shape.heads as u128;
    let qg = shape.query_groups as u128;
    let ffn = shape.ffn as u128;
    let v = shape.vocab as u128;
    let s = seq_len as u128;

    // attention = 12·L·H²·(1 + qg/heads + S/H)
    //           = 12·L·H·(heads·H + qg·H + S·heads) / heads
    let inner = checked_add(
        checked_add(
            checked_mul(heads, h, "attention inner")?,
            checked_mul(qg, h, "attention inner")?,
            "attention inner",
        )?,
        checked_mul(s, heads, "attention inner")?,
        "attention inner",
    )?;
    let attn_num = checked_mul(checked_mul(12 * l, h, "attention")?, inner, "attention")?;
    let mlp = checked_mul(checked_mul(18 * l, h, "mlp")?, ffn, "mlp")?;
    let embed = checked_mul(6 * v, h, "embedding")?;

    // Common denominator `heads`; multiply by the pass factor, then round
    // half-up in a single step: round(n/d) = (2n + d) / (2d).
    let pass = 1 + backward_multiplier as u128;
    let integral = checked_add(mlp, embed, "per-token total")?;
    let num = checked_mul(
        checked_add(attn_num, checked_mul(integral, heads, "per-token total")?, "per-token total")?,
        pass,
        "per-token total",
    )?;
    let rounded = checked_add(checked_mul(2, num, "rounding")?, heads, "rounding")? / (2 * heads);
    Ok(rounded)
}

/// FLOPs for one on-policy epoch: trained tokens cost forward+backward on the
/// student, evaluation/scoring tokens cost a plain forward pass.
pub fn onpolicy_epoch_flops(
    n_train_tokens: u128,
    n_eval_tokens: u128,
    student: &ModelShape,
    seq_len: u64,
) -> Result<u128> {
    let train = checked_mul(
        n_train_tokens,
        flops_per_token(student, seq_len, 3)?,
        "on-policy train tokens",
    )?;
    let eval = checked_mul(
        n_eval_tokens,
        flops_per_token(student, seq_len, 0)?,
        "on-policy eval tokens",
    )?;
    checked_add(train, eval, "on-policy epoch total")
}

/// FLOPs for one offline (distillation-style) epoch: generated tokens cost a
/// teacher forward pass and a student training pass.
pub fn offline_epoch_flops(
    n_gen_tokens: u128,
    teacher: &ModelShape,
    student: &ModelShape,
    seq_len: u64,
) -> Result<u128> {
    let gen = checked_mul(
        n_gen_tokens,
        flops_per_token(teacher, seq_len, 0)?,
        "offline generated tokens",
    )?;
    let train = checked_mul(
        n_gen_tokens,
        flops_per_token(student, seq_len, 3)?,
        "offline trained tokens",
    )?;
    checked_add(gen, train, "offline epoch total")
}

/// Converts an exact FLOPs count into exaFLOPs (1e18) for reporting.
pub fn to_exaflops(flops: u128) -> f64 {
    flops as f64 / 1e18
}

/// Running totals for each billed phase of the pipeline.
///
/// SFT-phase operations only ever touch `teacher_gen_flops` and
/// `sft_train_flops`; RL-phase operations only ever touch the three RL
/// counters. Evaluation during RL is billed to `eval_flops`, which counts
/// toward the RL side of the budget.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComputeLedger {
    pub teacher_gen_flops: u128,
    pub sft_train_flops: u128,
    pub rl_rollout_flops: u128,
    pub rl_train_flops: u128,
    pub eval_flops: u128,
}

impl ComputeLedger {
    pub fn new() -> Self {
        ComputeLedger::default()
    }

    fn bump(slot: &mut u128, amount: u128, what: &str) -> Result<()> {
        *slot = slot
            .checked_add(amount)
            .ok_or_else(|| Error::domain(format!("ledger overflow in {what}")))?;
        Ok(())
    }

    pub fn bill_teacher_gen(&mut self, flops: u128) -> Result<()> {
        Self::bump(&mut self.teacher_gen_flops, flops, "teacher_gen_flops")
    }

    pub fn bill_sft_train(&mut self, flops: u128) -> Result<()> {
        Self::bump(&mut self.sft_train_flops, flops, "sft_train_flops")
    }

    pub fn bill_rl_rollout(&mut self, flops: u128) -> Result<()> {
        Self::bump(&mut self.rl_rollout_flops, flops, "rl_rollout_flops")
    }

    pub fn bill_rl_train(&mut self, flops: u128) -> Result<()> {
        Self::bump(&mut self.rl_train_flops, flops, "rl_train_flops")
    }

    pub fn bill_eval(&mut self, flops: u128) -> Result<()> {
        Self::bump(&mut self.eval_flops, flops, "eval_flops")
    }

    /// Sum of all counters.
    pub fn total(&self) -> u128 {
        self.teacher_gen_flops
            + self.sft_train_flops
            + self.rl_rollout_flops
            + self.rl_train_flops
            + self.eval_flops
    }

    /// SFT-side subtotal: teacher generation plus student SFT training.
    pub fn sft_side(&self) -> u128 {
        self.teacher_gen_flops + self.sft_train_flops
    }

    /// RL-side subtotal: rollouts, policy updates, and evaluation.
    pub fn rl_side(&self) -> u128 {
        self.rl_rollout_flops + self.rl_train_flops + self.eval_flops
    }

    /// Element-wise sum of two ledgers.
    pub fn merge(&self, other: &ComputeLedger) -> Result<ComputeLedger> {
        let mut out = self.clone();
        out.bill_teacher_gen(other.teacher_gen_flops)?;
        out.bill_sft_train(other.sft_train_flops)?;
        out.bill_rl_rollout(other.rl_rollout_flops)?;
        out.bill_rl_train(other.rl_train_flops)?;
        out.bill_eval(other.eval_flops)?;
        Ok(out)
    }

    /// JSON summary with exact counts as decimal strings (counts exceed what
    /// a JSON number can hold losslessly) alongside exaFLOP floats.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "teacher_gen_flops": self.teacher_gen_flops.to_string(),
            "sft_train_flops": self.sft_train_flops.to_string(),
            "rl_rollout_flops": self.rl_rollout_flops.to_string(),
            "rl_train_flops": self.rl_train_flops.to_string(),
            "eval_flops": self.eval_flops.to_string(),
            "total_flops": self.total().to_string(),
            "total_exaflops": to_exaflops(self.total()),
        })
    }
}

/// Precomputed per-token costs for the teacher/student pair used by a run.
///
/// Environment steps map to tokens via `tokens_per_pair`: one (observation,
/// action) exchange is billed as that many sequence tokens, which keeps the
/// desk-scale step counts on the same FLOPs axis as the modeled shapes.
#[derive(Debug, Clone)]
pub struct CostModel {
    teacher: ModelShape,
    student: ModelShape,
    seq_len: u64,
    tokens_per_pair: u64,
    teacher_forward_fpt: u128,
    student_train_fpt: u128,
    student_forward_fpt: u128,
}

impl CostModel {
    pub fn new(
        teacher: ModelShape,
        student: ModelShape,
        seq_len: u64,
        tokens_per_pair: u64,
    ) -> Result<Self> {
        if tokens_per_pair == 0 {
            return Err(Error::domain("tokens_per_pair must be >= 1"));
        }
        let teacher_forward_fpt = flops_per_token(&teacher, seq_len, 0)?;
        let student_train_fpt = flops_per_token(&student, seq_len, 3)?;
        let student_forward_fpt = flops_per_token(&student, seq_len, 0)?;
        Ok(CostModel {
            teacher,
            student,
            seq_len,
            tokens_per_pair,
            teacher_forward_fpt,
            student_train_fpt,
            student_forward_fpt,
        })
    }

    pub fn teacher(&self) -> &ModelShape {
        &self.teacher
    }

    pub fn student(&self) -> &ModelShape {
        &self.student
    }

    pub fn seq_len(&self) -> u64 {
        self.seq_len
    }

    pub fn tokens_per_pair(&self) -> u64 {
        self.tokens_per_pair
    }

    fn pair_tokens(&self, pairs: u128, what: &str) -> Result<u128> {
        checked_mul(pairs, self.tokens_per_pair as u128, what)
    }

    /// Teacher forward cost of generating `pairs` (observation, action) pairs.
    pub fn teacher_gen_flops(&self, pairs: u128) -> Result<u128> {
        checked_mul(
            self.pair_tokens(pairs, "teacher generation tokens")?,
            self.teacher_forward_fpt,
            "teacher generation",
        )
    }

    /// Student forward+backward cost of training on `pairs` pairs.
    pub fn student_train_flops(&self, pairs: u128) -> Result<u128> {
        checked_mul(
            self.pair_tokens(pairs, "student training tokens")?,
            self.student_train_fpt,
            "student training",
        )
    }

    /// Student forward cost of generating or scoring `pairs` pairs.
    pub fn student_forward_flops(&self, pairs: u128) -> Result<u128> {
        checked_mul(
            self.pair_tokens(pairs, "student forward tokens")?,
            self.student_forward_fpt,
            "student forward",
        )
    }
}
