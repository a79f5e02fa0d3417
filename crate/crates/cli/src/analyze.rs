//! `analyze`: the standalone formulas, printed as JSON.

use anyhow::Result;
use serde_json::{json, Value};

use realstream_core::analysis::{
    corrected_loss, effective_samples, per_token_score, sample_budget, spearman, Label, NoiseModel,
    RankVector,
};
use realstream_core::{Rational64, Scalar};

use crate::config::usage;

fn exact(x: f64) -> Result<Rational64> {
    Rational64::from_f64(x).ok_or_else(|| usage(format!("{x} is not a finite number")))
}

fn ratio_json(r: Rational64) -> Value {
    json!({"value": r.to_f64(), "exact": r.to_string()})
}

pub fn eta(accuracy: f64, avg_tokens: f64) -> Result<Value> {
    let v =
        per_token_score(exact(accuracy)?, exact(avg_tokens)?).map_err(|e| usage(e.to_string()))?;
    Ok(json!({
        "accuracy": accuracy,
        "avg_tokens": avg_tokens,
        "eta": v.to_f64(),
        "eta_2dp": format!("{:.2}", v.to_f64()),
    }))
}

pub fn parse_ranks(text: &str) -> Result<RankVector> {
    let ranks = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|e| usage(format!("rank {s:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    RankVector::new(ranks).map_err(|e| usage(e.to_string()))
}

/// Spearman of `reference` against each named vector, plus their mean.
pub fn spearman_table(reference: &RankVector, others: &[(String, RankVector)]) -> Result<Value> {
    if others.is_empty() {
        return Err(usage("at least one comparison vector is required"));
    }
    let mut pairs = serde_json::Map::new();
    let mut sum = Rational64::from_integer(0);
    for (name, v) in others {
        let rho: Rational64 = spearman(reference, v).map_err(|e| usage(e.to_string()))?;
        sum += rho;
        pairs.insert(name.clone(), ratio_json(rho));
    }
    let mean = sum / Rational64::from_integer(others.len() as i64);
    Ok(json!({"pairs": pairs, "mean": ratio_json(mean)}))
}

pub fn noise(
    rho_minus: f64,
    rho_plus: f64,
    loss_as_labeled: f64,
    loss_as_flipped: f64,
    observed: Label,
) -> Result<Value> {
    let model = NoiseModel::new(rho_minus, rho_plus).map_err(|e| usage(e.to_string()))?;
    let v = corrected_loss(loss_as_labeled, loss_as_flipped, observed, &model)
        .map_err(|e| usage(e.to_string()))?;
    Ok(json!({
        "rho_minus": rho_minus,
        "rho_plus": rho_plus,
        "observed": observed,
        "corrected_loss": v,
    }))
}

pub fn effective(n: u64, eps_v: f64) -> Result<Value> {
    let v = effective_samples(n, exact(eps_v)?).map_err(|e| usage(e.to_string()))?;
    Ok(json!({"n": n, "eps_v": eps_v, "effective_samples": ratio_json(v)}))
}

pub fn budget(log_covering: f64, eps_v: f64, eps: f64, constant: f64) -> Result<Value> {
    let v = sample_budget(log_covering, eps_v, eps, constant).map_err(|e| usage(e.to_string()))?;
    Ok(json!({
        "log_covering": log_covering,
        "eps_v": eps_v,
        "eps": eps,
        "constant": constant,
        "sample_budget": v,
    }))
}
