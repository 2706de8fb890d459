//! Re-shaping dumped rollouts offline, and flattening shaping plans into
//! per-token records.

use std::collections::BTreeMap;

use crate::error::{CesError, Result};
use crate::policy::ContextFeatures;
use crate::records::{check_version, RolloutRecord, ShapedRecord, SCHEMA_VERSION};
use crate::rollout::{group_statistics, ResponseTrace, TokenRecord};
use crate::shaping::{shape_group, ShapingConfig};
use crate::{Batch, Plan};

/// Response index to `(line, record)`.
type Members<'a> = BTreeMap<usize, (usize, &'a RolloutRecord)>;

fn trace_of(rec: &RolloutRecord) -> ResponseTrace<f64> {
    let records = rec
        .tokens
        .iter()
        .zip(rec.entropy_bits.iter().zip(&rec.old_log_prob))
        .enumerate()
        .map(|(position, (&token, (&entropy_bits, &old_log_prob)))| TokenRecord {
            token,
            position,
            old_log_prob,
            entropy_bits,
            features: ContextFeatures {
                active: Vec::new(),
                dim: 0,
            },
        })
        .collect();
    ResponseTrace {
        index: rec.response_index,
        records,
        r_acc: rec.r_acc,
        r_fmt: rec.r_fmt,
        truncated: false,
    }
}

fn check_record(rec: &RolloutRecord) -> std::result::Result<(), String> {
    check_version(rec.schema_version)?;
    let n = rec.tokens.len();
    if n == 0 {
        return Err("empty response".into());
    }
    if rec.entropy_bits.len() != n || rec.old_log_prob.len() != n {
        return Err(format!(
            "{} tokens but {} entropies and {} log-probs",
            n,
            rec.entropy_bits.len(),
            rec.old_log_prob.len()
        ));
    }
    if rec.r_acc > 1 || rec.r_fmt > 1 {
        return Err("rewards must be 0 or 1".into());
    }
    if rec.entropy_bits.iter().any(|h| !h.is_finite() || *h < 0.0) {
        return Err("entropies must be finite and non-negative".into());
    }
    Ok(())
}

/// Groups `(line, record)` pairs by `(step, prompt_id)`, recomputes the
/// group-relative advantages and shapes them. Output is ordered by step,
/// prompt, response and position.
pub fn shape_rollouts(
    records: &[(usize, RolloutRecord)],
    config: &ShapingConfig,
    source: &str,
) -> Result<Vec<ShapedRecord>> {
    config.validate()?;
    let schema = |line: usize, message: String| CesError::Schema {
        path: source.to_string(),
        line,
        message,
    };
    let mut groups: BTreeMap<(u64, u64), Members> = BTreeMap::new();
    for (line, rec) in records {
        check_record(rec).map_err(|m| schema(*line, m))?;
        let group = groups.entry((rec.step, rec.prompt_id)).or_default();
        if group.insert(rec.response_index, (*line, rec)).is_some() {
            return Err(schema(
                *line,
                format!(
                    "duplicate response {} for step {} prompt {}",
                    rec.response_index, rec.step, rec.prompt_id
                ),
            ));
        }
    }
    let mut out = Vec::new();
    for ((step, prompt_id), members) in groups {
        for (expected, (&index, (line, _))) in members.iter().enumerate() {
            if index != expected {
                return Err(schema(
                    *line,
                    format!("step {step} prompt {prompt_id}: response {expected} missing"),
                ));
            }
        }
        let traces: Vec<ResponseTrace<f64>> = members.values().map(|(_, r)| trace_of(r)).collect();
        let r_acc: Vec<u8> = traces.iter().map(|t| t.r_acc).collect();
        let rewards: Vec<u8> = traces.iter().map(ResponseTrace::reward).collect();
        let (accuracy, advantages) = group_statistics::<f64>(&r_acc, &rewards);
        let live: Vec<Vec<f64>> = traces.iter().map(ResponseTrace::entropies).collect();
        let plan = shape_group(&traces, accuracy, &advantages, config, &live)?;
        out.extend(flatten(step, prompt_id, &traces, &plan));
    }
    Ok(out)
}

fn flatten(step: u64, prompt_id: u64, traces: &[ResponseTrace<f64>], plan: &Plan) -> Vec<ShapedRecord> {
    traces
        .iter()
        .zip(&plan.responses)
        .flat_map(|(t, p)| {
            (0..t.len()).map(move |j| ShapedRecord {
                schema_version: SCHEMA_VERSION,
                step,
                prompt_id,
                response_index: t.index,
                position: j,
                base_advantage: p.base,
                shaped_advantage: p.shaped[j],
                selected: p.signs[j] != 0,
                sign: p.signs[j],
            })
        })
        .collect()
}

/// The records a trainer step's own shaping plans correspond to, in the
/// same order `shape_rollouts` emits them.
pub fn plan_records(step: u64, batches: &[Batch], plans: &[Plan]) -> Vec<ShapedRecord> {
    let mut pairs: Vec<(&Batch, &Plan)> = batches.iter().zip(plans).collect();
    pairs.sort_by_key(|(b, _)| b.instance.id);
    pairs
        .into_iter()
        .flat_map(|(b, p)| flatten(step, b.instance.id, &b.responses, p))
        .collect()
}
