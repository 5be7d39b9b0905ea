//! Ranking metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Area under the ROC curve from the rank-sum statistic. Tied scores share
/// their average rank, so each tied positive-negative pair counts ½.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 average to (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_avg * pos;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok((twice_u as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Relative AUC improvement in percent, measured from the 0.5 random floor.
pub fn rela_impr(auc_measure: f64, auc_base: f64) -> Result<f64> {
    if auc_base == 0.5 {
        return Err(Error::UndefinedMetric("RelaImpr base AUC is exactly 0.5".into()));
    }
    Ok(((auc_measure - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub count: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    /// Present when a base run was supplied and the base AUC is defined.
    pub rela_impr: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub base: Option<String>,
    pub domains: Vec<DomainMetrics>,
}

impl MetricsReport {
    /// Per-domain AUC of `scores`; domains appear in first-seen order.
    /// A single-class domain gets `auc: None`.
    pub fn from_scores(scores: &[f64], labels: &[u8], domains: &[&str]) -> Self {
        let mut order: Vec<&str> = Vec::new();
        let mut by: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for ((&s, &y), &d) in scores.iter().zip(labels).zip(domains) {
            let e = by.entry(d).or_insert_with(|| {
                order.push(d);
                (Vec::new(), Vec::new())
            });
            e.0.push(s);
            e.1.push(y);
        }
        let domains = order
            .into_iter()
            .map(|d| {
                let (s, y) = &by[d];
                DomainMetrics {
                    domain: d.to_string(),
                    count: s.len(),
                    positives: y.iter().filter(|&&v| v == 1).count(),
                    auc: auc(s, y).ok(),
                    rela_impr: None,
                }
            })
            .collect();
        MetricsReport { base: None, domains }
    }

    /// Fills RelaImpr against per-domain base AUCs.
    pub fn with_base(mut self, name: &str, base: &BTreeMap<String, f64>) -> Self {
        self.base = Some(name.to_string());
        for d in &mut self.domains {
            if let (Some(a), Some(&b)) = (d.auc, base.get(&d.domain)) {
                d.rela_impr = rela_impr(a, b).ok();
            }
        }
        self
    }

    pub fn auc_of(&self, domain: &str) -> Option<f64> {
        self.domains.iter().find(|d| d.domain == domain).and_then(|d| d.auc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ordering() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_one_half() {
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn small_mixed_case() {
        // Pairs (pos, neg): (0.35,0.1) (0.35,0.4)x (0.8,0.1) (0.8,0.4) → 3/4
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rela_impr_closed_forms() {
        assert_eq!(rela_impr(0.7, 0.7).unwrap(), 0.0);
        assert!((rela_impr(0.75, 0.625).unwrap() - 100.0).abs() < 1e-12);
        assert!(matches!(rela_impr(0.7, 0.5), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn report_groups_by_domain() {
        let r = MetricsReport::from_scores(
            &[0.1, 0.9, 0.5, 0.5],
            &[0, 1, 1, 1],
            &["a", "a", "b", "b"],
        );
        assert_eq!(r.auc_of("a"), Some(1.0));
        assert_eq!(r.auc_of("b"), None);
        assert_eq!(r.domains[1].positives, 2);
    }
}
