//! Average precision and mAP.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::error::{Error, Result};
use crate::retrieval::{RankedList, RetrievalIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApVariant {
    /// Mean of precision at the rank of each positive.
    #[default]
    Discrete,
    /// Trapezoidal area under the precision/recall curve, as in the Oxford
    /// `compute_ap` tool.
    Trapezoid,
}

impl ApVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ApVariant::Discrete => "discrete",
            ApVariant::Trapezoid => "trapezoid",
        }
    }
}

impl fmt::Display for ApVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ApVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(ApVariant::Discrete),
            "trapezoid" => Ok(ApVariant::Trapezoid),
            _ => Err(Error::invalid("ap variant", format!("{s:?} (expected discrete or trapezoid)"))),
        }
    }
}

pub fn average_precision(rl: &RankedList, gt: &GroundTruth) -> Result<f64> {
    average_precision_with(rl, gt, ApVariant::Discrete)
}

/// AP of one ranked list. Junk entries (and the query itself when
/// `exclude_self` is set) are dropped first and the ranks close up.
pub fn average_precision_with(rl: &RankedList, gt: &GroundTruth, variant: ApVariant) -> Result<f64> {
    if gt.positives.is_empty() {
        return Err(Error::NoPositives(gt.query_id.clone()));
    }
    let npos = gt.positives.len() as f64;
    let kept = rl
        .ids()
        .filter(|id| !gt.junk.contains(*id) && !(gt.exclude_self && *id == gt.query_id));

    let mut hits = 0usize;
    let mut ap = 0.0;
    let (mut old_recall, mut old_precision) = (0.0, 1.0);
    for (rank0, id) in kept.enumerate() {
        if !gt.positives.contains(id) {
            continue;
        }
        hits += 1;
        let precision = hits as f64 / (rank0 + 1) as f64;
        match variant {
            ApVariant::Discrete => ap += precision,
            ApVariant::Trapezoid => {
                let recall = hits as f64 / npos;
                ap += (recall - old_recall) * (old_precision + precision) / 2.0;
                old_recall = recall;
                old_precision = precision;
            }
        }
    }
    Ok(match variant {
        ApVariant::Discrete => ap / npos,
        ApVariant::Trapezoid => ap,
    })
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::Computation("mean of an empty AP list".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub query_id: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub per_query: Vec<QueryResult>,
    /// Queries without positives, left out of the mean.
    pub skipped: Vec<String>,
    pub map: f64,
    pub ap_variant: ApVariant,
}

/// Runs every ground-truth query against `index` (full scan) and averages
/// the APs. Queries are evaluated in parallel; results keep input order.
pub fn evaluate_index(index: &RetrievalIndex, gts: &[GroundTruth], variant: ApVariant) -> Result<EvalSummary> {
    let results: Vec<Result<Option<QueryResult>>> = gts
        .par_iter()
        .map(|gt| {
            if gt.positives.is_empty() {
                return Ok(None);
            }
            let mut exclude = HashSet::new();
            if gt.exclude_self {
                exclude.insert(gt.query_id.clone());
            }
            let rl = index.query_by_id(&gt.query_id, None, &exclude)?;
            let ap = average_precision_with(&rl, gt, variant)?;
            Ok(Some(QueryResult {
                query_id: gt.query_id.clone(),
                ap,
            }))
        })
        .collect();

    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for (gt, r) in gts.iter().zip(results) {
        match r? {
            Some(q) => per_query.push(q),
            None => {
                log::warn!("query {} has no positives; skipped", gt.query_id);
                skipped.push(gt.query_id.clone());
            }
        }
    }
    let aps: Vec<f64> = per_query.iter().map(|q| q.ap).collect();
    let map = mean_ap(&aps)?;
    Ok(EvalSummary {
        per_query,
        skipped,
        map,
        ap_variant: variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Hit;
    use std::collections::BTreeSet;

    fn list(ids: &[&str]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, id)| Hit {
                    image_id: id.to_string(),
                    distance: i as f64,
                })
                .collect(),
        }
    }

    fn gt(pos: &[&str], junk: &[&str], exclude_self: bool) -> GroundTruth {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        GroundTruth::new("q", set(pos), set(junk), exclude_self).unwrap()
    }

    #[test]
    fn perfect_ranking() {
        let ap = average_precision(&list(&["a", "b", "x"]), &gt(&["a", "b"], &[], false)).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn plus_minus_plus() {
        let ap = average_precision(&list(&["a", "x", "b"]), &gt(&["a", "b"], &[], false)).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let ap = average_precision(&list(&["j", "a", "x", "b"]), &gt(&["a", "b"], &["j"], false)).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn self_exclusion() {
        let g = gt(&["a", "b"], &[], true);
        let ap = average_precision(&list(&["q", "a", "x", "b"]), &g).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn unretrieved_positives_count_as_zero() {
        let ap = average_precision(&list(&["a"]), &gt(&["a", "b"], &[], false)).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn trapezoid_variant() {
        // [+, -, +]: recall steps 0.5 at precision 1 then 0.5 at 2/3
        let ap = average_precision_with(&list(&["a", "x", "b"]), &gt(&["a", "b"], &[], false), ApVariant::Trapezoid)
            .unwrap();
        let expected = 0.5 * (1.0 + 1.0) / 2.0 + 0.5 * (1.0 + 2.0 / 3.0) / 2.0;
        assert!((ap - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_positives_is_an_error() {
        assert!(matches!(
            average_precision(&list(&["a"]), &gt(&[], &[], false)),
            Err(Error::NoPositives(_))
        ));
    }

    #[test]
    fn mean() {
        assert_eq!(mean_ap(&[1.0]).unwrap(), 1.0);
        assert_eq!(mean_ap(&[1.0, 0.0]).unwrap(), 0.5);
        assert!(mean_ap(&[]).is_err());
    }

    #[test]
    fn evaluate_skips_empty_queries() {
        let idx = RetrievalIndex::build(
            1,
            vec![("100000", vec![0.0]), ("100001", vec![0.1]), ("100100", vec![5.0]), ("100200", vec![9.0])],
        )
        .unwrap();
        let gts = super::super::holidays_from_ids(["100000", "100001", "100100", "100200"]).unwrap();
        let s = evaluate_index(&idx, &gts, ApVariant::Discrete).unwrap();
        assert_eq!(s.per_query.len(), 1);
        assert_eq!(s.skipped, vec!["100100", "100200"]);
        assert_eq!(s.map, 1.0);
    }
}
