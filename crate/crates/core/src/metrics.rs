//! Ranking metrics over category × room affinities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotations::GroundTruthMap;
use crate::error::{Error, Result};
use crate::infer::AffinityMatrix;

/// Mean over relevant items of precision at each relevant item's rank.
pub fn average_precision<T: PartialEq>(ranking: &[T], relevant: &[T]) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Metric(
            "average precision needs a relevant item".into(),
        ));
    }
    for (i, r) in relevant.iter().enumerate() {
        if relevant[..i].contains(r) {
            return Err(Error::Metric("relevant items must be distinct".into()));
        }
        if !ranking.contains(r) {
            return Err(Error::Metric(
                "relevant item missing from the ranking".into(),
            ));
        }
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, item) in ranking.iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// Column indices by descending score; ties keep column order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: String,
    pub gt_room: String,
    /// 1-based rank of the ground-truth room.
    pub rank: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub hit_ratio: BTreeMap<String, f64>,
    pub per_category: Vec<CategoryResult>,
}

fn per_category(aff: &AffinityMatrix, gt: &GroundTruthMap) -> Result<Vec<CategoryResult>> {
    if aff.row_names.is_empty() {
        return Err(Error::Metric("no categories to evaluate".into()));
    }
    aff.row_names
        .iter()
        .enumerate()
        .map(|(i, cat)| {
            let room = gt
                .gt_room(cat)
                .ok_or_else(|| Error::Metric(format!("category `{cat}` has no ground truth")))?;
            let col = aff
                .col_names
                .iter()
                .position(|c| c == room)
                .ok_or_else(|| {
                    Error::Metric(format!(
                        "ground-truth room `{room}` of `{cat}` is not a column"
                    ))
                })?;
            let order = rank_order(aff.values.row(i));
            let rank = order.iter().position(|&c| c == col).unwrap() + 1;
            Ok(CategoryResult {
                category: cat.clone(),
                gt_room: room.to_string(),
                rank,
                ap: average_precision(&order, &[col])?,
            })
        })
        .collect()
}

/// Unweighted mean of per-category AP against the single ground-truth room.
pub fn mean_ap(aff: &AffinityMatrix, gt: &GroundTruthMap) -> Result<f64> {
    let rows = per_category(aff, gt)?;
    Ok(rows.iter().map(|r| r.ap).sum::<f64>() / rows.len() as f64)
}

/// Fraction of categories whose ground-truth room ranks in the top `k`.
pub fn topk_hit_ratio(aff: &AffinityMatrix, gt: &GroundTruthMap, k: usize) -> Result<f64> {
    let n_rooms = aff.col_names.len();
    if k == 0 || k > n_rooms {
        return Err(Error::Metric(format!("k = {k} outside 1..={n_rooms}")));
    }
    let rows = per_category(aff, gt)?;
    Ok(rows.iter().filter(|r| r.rank <= k).count() as f64 / rows.len() as f64)
}

/// mAP plus hit ratios for each `k` in `ks` that does not exceed the room
/// count.
pub fn evaluate(aff: &AffinityMatrix, gt: &GroundTruthMap, ks: &[usize]) -> Result<EvalReport> {
    let rows = per_category(aff, gt)?;
    let n = rows.len() as f64;
    let map = rows.iter().map(|r| r.ap).sum::<f64>() / n;
    let hit_ratio = ks
        .iter()
        .filter(|&&k| k >= 1 && k <= aff.col_names.len())
        .map(|&k| {
            let hits = rows.iter().filter(|r| r.rank <= k).count() as f64;
            (k.to_string(), hits / n)
        })
        .collect();
    Ok(EvalReport {
        map,
        hit_ratio,
        per_category: rows,
    })
}
