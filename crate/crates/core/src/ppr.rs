//! Personalized PageRank by power iteration, and top-k extraction over items
//! and conversations.
//!
//! Propagation uses `W = A·D⁻¹` (column-stochastic). Columns of zero-degree
//! nodes are replaced by the normalized personalization vector, so the walk
//! conserves mass. Iteration starts at `r⁰ = p` and stops once the L1 step
//! difference drops below `tol`.

use serde::{Deserialize, Serialize};

use crate::corpus::ConversationId;
use crate::error::{Error, Result};
use crate::index::FrequencyMatrix;
use crate::kg::{EntityId, ItemId};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PprConfig {
    /// Teleport (restart) probability.
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sparse restart distribution over graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Personalization {
    node_count: usize,
    entries: Vec<(usize, f64)>,
}

impl Personalization {
    /// Arbitrary nonnegative weights; entries for the same node are summed.
    pub fn from_weights(node_count: usize, weights: &[(usize, f64)]) -> Result<Self> {
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
        for &(node, w) in weights {
            if node >= node_count {
                return Err(Error::InvalidParameter(format!(
                    "personalization node {node} out of range"
                )));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "personalization weight {w} on node {node}"
                )));
            }
            match entries.iter_mut().find(|(n, _)| *n == node) {
                Some(e) => e.1 += w,
                None => entries.push((node, w)),
            }
        }
        entries.retain(|&(_, w)| w > 0.0);
        if entries.is_empty() {
            return Err(Error::EmptySeeds);
        }
        entries.sort_by_key(|&(n, _)| n);
        Ok(Self { node_count, entries })
    }

    /// Equal weight `value` on every seed node (the indicator vector when
    /// `value` is 1).
    pub fn uniform(node_count: usize, seeds: &[usize], value: f64) -> Result<Self> {
        let mut nodes = seeds.to_vec();
        nodes.sort_unstable();
        nodes.dedup();
        let weights: Vec<(usize, f64)> = nodes.into_iter().map(|n| (n, value)).collect();
        Self::from_weights(node_count, &weights)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.node_count];
        for &(n, w) in &self.entries {
            v[n] = w;
        }
        v
    }
}

/// Uniform mass `1/|seeds|` on each distinct seed entity.
pub fn make_personalization(seeds: &[EntityId], node_count: usize) -> Result<Personalization> {
    if seeds.is_empty() {
        return Err(Error::EmptySeeds);
    }
    let mut nodes: Vec<usize> = seeds.iter().map(|e| e.index()).collect();
    nodes.sort_unstable();
    nodes.dedup();
    Personalization::uniform(node_count, &nodes, 1.0 / nodes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PprScores {
    pub r: Vec<f64>,
    pub iterations: usize,
    /// L1 difference of the final step.
    pub residual: f64,
    pub converged: bool,
    /// L1 difference of every step, in order.
    pub residuals: Vec<f64>,
}

impl PprScores {
    /// True when the residual sequence never increases after the first step.
    pub fn residuals_monotone(&self) -> bool {
        self.residuals
            .windows(2)
            .skip(1)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15)
    }
}

pub fn ppr(adjacency: &CsrMatrix, p: &Personalization, config: &PprConfig) -> Result<PprScores> {
    config.validate()?;
    let n = adjacency.dim();
    if n == 0 {
        return Err(Error::InvalidParameter("graph has no nodes".into()));
    }
    if p.node_count != n {
        return Err(Error::InvalidParameter(format!(
            "personalization covers {} nodes, graph has {n}",
            p.node_count
        )));
    }
    let degree: Vec<f64> = (0..n).map(|i| adjacency.weighted_degree(i)).collect();
    let dangling: Vec<usize> = (0..n).filter(|&i| degree[i] <= 0.0).collect();
    let p_dense = p.to_dense();
    let p_mass = p.mass();
    let p_hat: Vec<(usize, f64)> = p.entries.iter().map(|&(i, w)| (i, w / p_mass)).collect();
    let alpha = config.alpha;
    let damp = 1.0 - alpha;

    let mut r = p_dense.clone();
    let mut next = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iter {
        for j in 0..n {
            y[j] = if degree[j] > 0.0 { r[j] / degree[j] } else { 0.0 };
        }
        let dangling_mass: f64 = dangling.iter().map(|&j| r[j]).sum();
        for (i, out) in next.iter_mut().enumerate() {
            let walk: f64 = adjacency.row(i).map(|(j, a, _)| a * y[j]).sum();
            *out = alpha * p_dense[i] + damp * walk;
        }
        if dangling_mass > 0.0 {
            for &(i, w) in &p_hat {
                next[i] += damp * dangling_mass * w;
            }
        }
        let diff: f64 = next.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut r, &mut next);
        residuals.push(diff);
        if diff < config.tol {
            converged = true;
            break;
        }
    }
    let scores = PprScores {
        iterations: residuals.len(),
        residual: *residuals.last().expect("at least one iteration"),
        converged,
        residuals,
        r,
    };
    if !scores.converged {
        tracing::warn!(
            iterations = scores.iterations,
            residual = scores.residual,
            "ppr did not converge"
        );
    }
    if !scores.residuals_monotone() {
        tracing::error!(residuals = ?scores.residuals, "ppr residuals increased between steps");
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankedItem {
    pub item: ItemId,
    pub score: f64,
    /// Padded into the list with no relevance to the seeds.
    pub zero: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankedConversation {
    pub conversation: ConversationId,
    pub score: f64,
}

/// Indices of the `k` largest scores, by score descending then index ascending.
pub fn top_indices(scores: &[f64], k: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| keep(i)).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if idx.len() > k && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    idx
}

/// Top `k` items from the item prefix of `r`, skipping `exclusions`.
pub fn top_k_items(r: &[f64], item_count: usize, k: usize, exclusions: &[ItemId]) -> Vec<RankedItem> {
    let items = &r[..item_count.min(r.len())];
    top_indices(items, k, |i| !exclusions.contains(&EntityId(i as u32)))
        .into_iter()
        .map(|i| RankedItem {
            item: EntityId(i as u32),
            score: items[i],
            zero: items[i] <= 0.0,
        })
        .collect()
}

/// Scores conversations by `rᵀℙ` over the entity sub-vector and returns the
/// top `n`, skipping `exclude`.
pub fn top_n_conversations(
    entity_scores: &[f64],
    frequency: &FrequencyMatrix,
    n: usize,
    exclude: Option<ConversationId>,
) -> Vec<RankedConversation> {
    let scores = frequency.contract(&entity_scores[..frequency.rows()]);
    top_indices(&scores, n, |j| exclude != Some(ConversationId(j as u32)))
        .into_iter()
        .map(|j| RankedConversation {
            conversation: ConversationId(j as u32),
            score: scores[j],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SymmetricBuilder;

    fn path(n: usize) -> CsrMatrix {
        let mut b = SymmetricBuilder::new(n);
        for i in 1..n {
            b.add(i - 1, i, 1.0, 1);
        }
        b.build()
    }

    #[test]
    fn personalization_is_uniform_and_normalized() {
        let p = make_personalization(&[EntityId(3)], 10).unwrap();
        assert_eq!(p.entries(), &[(3, 1.0)]);
        let p = make_personalization(&[EntityId(1), EntityId(4)], 10).unwrap();
        assert_eq!(p.entries(), &[(1, 0.5), (4, 0.5)]);
        assert_eq!(p.mass(), 1.0);
        assert!(matches!(make_personalization(&[], 10), Err(Error::EmptySeeds)));
    }

    #[test]
    fn two_node_symmetric_graph() {
        let p = make_personalization(&[EntityId(0), EntityId(1)], 2).unwrap();
        let s = ppr(&path(2), &p, &PprConfig::default()).unwrap();
        assert_eq!(s.r, vec![0.5, 0.5]);
        assert!(s.converged);
    }

    #[test]
    fn teleport_limit_returns_p() {
        let p = make_personalization(&[EntityId(2)], 6).unwrap();
        let cfg = PprConfig {
            alpha: 0.999999,
            ..Default::default()
        };
        let s = ppr(&path(6), &p, &cfg).unwrap();
        let l1: f64 = s.r.iter().zip(p.to_dense()).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 1e-5);
    }

    #[test]
    fn dangling_mass_returns_to_seeds() {
        let adj = CsrMatrix::empty(4);
        let p = make_personalization(&[EntityId(1)], 4).unwrap();
        let s = ppr(&adj, &p, &PprConfig::default()).unwrap();
        assert_eq!(s.r, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let p = make_personalization(&[EntityId(0)], 30).unwrap();
        let cfg = PprConfig {
            max_iter: 2,
            ..Default::default()
        };
        let s = ppr(&path(30), &p, &cfg).unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations, 2);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let p = make_personalization(&[EntityId(0)], 2).unwrap();
        for alpha in [0.0, 1.0, -0.1] {
            let cfg = PprConfig {
                alpha,
                ..Default::default()
            };
            assert!(ppr(&path(2), &p, &cfg).is_err());
        }
        let p3 = make_personalization(&[EntityId(0)], 3).unwrap();
        assert!(ppr(&path(2), &p3, &PprConfig::default()).is_err());
    }

    #[test]
    fn top_k_items_orders_and_flags_zero() {
        let r = [0.5, 0.2, 0.3, 0.9];
        let top = top_k_items(&r, 3, 2, &[]);
        assert_eq!(top.iter().map(|t| t.item.0).collect::<Vec<_>>(), vec![0, 2]);
        let zeros = top_k_items(&[0.0, 0.0, 0.0], 3, 2, &[]);
        assert_eq!(zeros.iter().map(|t| t.item.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(zeros.iter().all(|t| t.zero));
        let excl = top_k_items(&r, 3, 2, &[EntityId(0)]);
        assert_eq!(excl.iter().map(|t| t.item.0).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn top_n_conversations_contracts_scores() {
        let f = FrequencyMatrix::from_parts(6, vec![0, 1, 2], vec![4, 4], vec![3, 1]).unwrap();
        let mut r = vec![0.0; 6];
        r[4] = 1.0;
        let top = top_n_conversations(&r, &f, 1, None);
        assert_eq!(
            top,
            vec![RankedConversation {
                conversation: ConversationId(0),
                score: 3.0
            }]
        );
        let top = top_n_conversations(&r, &f, 1, Some(ConversationId(0)));
        assert_eq!(top[0].conversation, ConversationId(1));
        let zero = top_n_conversations(&[0.0; 6], &f, 2, None);
        assert_eq!(zero.iter().map(|c| c.conversation.0).collect::<Vec<_>>(), vec![0, 1]);
    }
}
