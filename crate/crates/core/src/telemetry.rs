//! Routing telemetry: expert-attribute histograms of top-1 selections, a
//! specialization score and per-layer balance statistics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::losses;
use crate::model::RoutingTrace;
use crate::moe::GateDecision;
use crate::{Error, Result, Scalar, Tensor};

/// Counts `[attributes × experts]` of top-1 expert choices for one MoE
/// layer.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpertHistogram {
    pub block: usize,
    pub row_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ExpertHistogram {
    pub fn new(block: usize, row_labels: Vec<String>, experts: usize) -> Self {
        let counts = vec![vec![0; experts]; row_labels.len()];
        ExpertHistogram { block, row_labels, counts }
    }

    /// Rows labelled `0..attributes`.
    pub fn numbered(block: usize, attributes: usize, experts: usize) -> Self {
        Self::new(block, (0..attributes).map(|a| alloc::format!("{a}")).collect(), experts)
    }

    pub fn attributes(&self) -> usize {
        self.counts.len()
    }

    pub fn experts(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Adds one count per labelled token at (its attribute, its top-1
    /// expert). Tokens labelled `None` are skipped.
    pub fn record<T: Scalar>(&mut self, decision: &GateDecision<T>, token_labels: &[Option<usize>]) -> Result<()> {
        if token_labels.len() != decision.tokens() {
            return Err(Error::ShapeMismatch {
                op: "record_routing",
                lhs: vec![decision.tokens()],
                rhs: vec![token_labels.len()],
            });
        }
        if decision.num_experts() != self.experts() {
            return Err(Error::ShapeMismatch {
                op: "record_routing",
                lhs: vec![decision.num_experts()],
                rhs: vec![self.experts()],
            });
        }
        if let Some(&bad) = token_labels.iter().flatten().find(|&&a| a >= self.attributes()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.attributes(),
            });
        }
        for (t, label) in token_labels.iter().enumerate() {
            if let Some(a) = *label {
                self.counts[a][decision.top1(t)] += 1;
            }
        }
        Ok(())
    }

    /// Adds the counts of `other`, which must have the same layout.
    pub fn merge(&mut self, other: &ExpertHistogram) -> Result<()> {
        if other.block != self.block || other.attributes() != self.attributes() || other.experts() != self.experts() {
            return Err(Error::ShapeMismatch {
                op: "ExpertHistogram::merge",
                lhs: vec![self.block, self.attributes(), self.experts()],
                rhs: vec![other.block, other.attributes(), other.experts()],
            });
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

/// One histogram per MoE layer of `trace`, with `attributes` rows.
pub fn record_routing<T: Scalar>(
    trace: &RoutingTrace<T>,
    token_labels: &[Option<usize>],
    attributes: usize,
) -> Result<Vec<ExpertHistogram>> {
    trace
        .layers
        .iter()
        .map(|layer| {
            let mut h = ExpertHistogram::numbered(layer.block, attributes, layer.decision.num_experts());
            h.record(&layer.decision, token_labels)?;
            Ok(h)
        })
        .collect()
}

/// Accumulates `trace` into existing per-layer histograms.
pub fn accumulate<T: Scalar>(hists: &mut [ExpertHistogram], trace: &RoutingTrace<T>, token_labels: &[Option<usize>]) -> Result<()> {
    if hists.len() != trace.layers.len() {
        return Err(Error::ShapeMismatch {
            op: "accumulate",
            lhs: vec![hists.len()],
            rhs: vec![trace.layers.len()],
        });
    }
    for (h, layer) in hists.iter_mut().zip(&trace.layers) {
        h.record(&layer.decision, token_labels)?;
    }
    Ok(())
}

/// Fraction of tokens routed to their attribute's most used expert:
/// `Σ_a max_e h[a][e] / Σ h`.
pub fn specialization_purity(hist: &ExpertHistogram) -> Result<f64> {
    let total = hist.total();
    if total == 0 {
        return Err(Error::EmptyAxis { op: "specialization_purity" });
    }
    let peak: u64 = hist.counts.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(peak as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerBalanceReport {
    pub block: usize,
    pub tokens: usize,
    /// Squared CV of per-expert summed gate weights.
    pub importance: f64,
    /// Squared CV of per-expert summed load probabilities.
    pub load: f64,
    /// Fraction of all expert selections that went to each expert.
    pub shares: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BalanceReport {
    pub layers: Vec<LayerBalanceReport>,
}

fn stack_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let cols = parts.first().map_or(0, |t| t.cols());
    let mut data = Vec::new();
    for p in parts {
        if p.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "balance_report",
                lhs: vec![cols],
                rhs: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new([data.len() / cols.max(1), cols], data)
}

/// Balance statistics over the traces of an evaluation pass (recorded with
/// routing noise off). Gate and load matrices of all traces are stacked per
/// layer and passed to the loss functions.
pub fn balance_report<T: Scalar>(traces: &[RoutingTrace<T>]) -> Result<BalanceReport> {
    let Some(first) = traces.first() else {
        return Ok(BalanceReport { layers: Vec::new() });
    };
    if traces.iter().any(|t| t.layers.len() != first.layers.len()) {
        return Err(Error::invalid("balance_report", "traces disagree on the number of MoE layers"));
    }
    let mut layers = Vec::with_capacity(first.layers.len());
    for (i, layer) in first.layers.iter().enumerate() {
        let decisions: Vec<&GateDecision<T>> = traces.iter().map(|t| &t.layers[i].decision).collect();
        let gates = stack_rows(&decisions.iter().map(|d| &d.gate_weights).collect::<Vec<_>>())?;
        let load = stack_rows(&decisions.iter().map(|d| &d.load_prob).collect::<Vec<_>>())?;
        let mut counts = vec![0usize; layer.decision.num_experts()];
        for d in &decisions {
            counts.iter_mut().zip(d.expert_counts()).for_each(|(c, n)| *c += n);
        }
        let picks: usize = counts.iter().sum();
        layers.push(LayerBalanceReport {
            block: layer.block,
            tokens: gates.rows(),
            importance: losses::importance_loss(&gates)?.as_f64(),
            load: losses::load_loss(&load)?.as_f64(),
            shares: counts.iter().map(|&c| c as f64 / picks.max(1) as f64).collect(),
        });
    }
    Ok(BalanceReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerTrace;
    use crate::rng::{standard_normal, SeedTree};
    use proptest::prelude::*;
    use rand::Rng;

    /// A decision whose top-1 choices are `top1`; gate weights put 1 on the
    /// chosen expert.
    fn decision(top1: &[usize], experts: usize) -> GateDecision<f64> {
        let t = top1.len();
        let gates = Tensor::from_fn([t, experts], |i| if top1[i / experts] == i % experts { 1.0 } else { 0.0 });
        GateDecision {
            raw_logits: gates.clone(),
            noisy_logits: gates.clone(),
            gate_weights: gates.clone(),
            selected: top1.iter().map(|&e| vec![e]).collect(),
            load_prob: gates,
        }
    }

    fn trace(top1: &[usize], experts: usize) -> RoutingTrace<f64> {
        RoutingTrace {
            samples: top1.len(),
            tokens_per_sample: 1,
            layers: vec![LayerTrace {
                block: 1,
                decision: decision(top1, experts),
            }],
        }
    }

    #[test]
    fn single_attribute_single_expert() {
        let t = trace(&[2; 7], 4);
        let h = &record_routing(&t, &[Some(1); 7], 3).unwrap()[0];
        let nonzero: Vec<(usize, usize, u64)> = h
            .counts
            .iter()
            .enumerate()
            .flat_map(|(a, r)| r.iter().enumerate().filter(|(_, &c)| c > 0).map(move |(e, &c)| (a, e, c)))
            .collect();
        assert_eq!(nonzero, vec![(1, 2, 7)]);
        assert_eq!(h.block, 1);
        assert_eq!(specialization_purity(h).unwrap(), 1.0);
    }

    #[test]
    fn counts_match_tally_oracle() {
        let mut rng = SeedTree::new(1).stream("t");
        let (n, a, e) = (500, 5, 4);
        let top1: Vec<usize> = (0..n).map(|_| rng.random_range(0..e)).collect();
        let labels: Vec<Option<usize>> = (0..n).map(|_| if rng.random_bool(0.9) { Some(rng.random_range(0..a)) } else { None }).collect();
        let h = &record_routing(&trace(&top1, e), &labels, a).unwrap()[0];
        let mut oracle = vec![vec![0u64; e]; a];
        for (t, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                oracle[*l][top1[t]] += 1;
            }
        }
        assert_eq!(h.counts, oracle);
        assert_eq!(h.total(), labels.iter().flatten().count() as u64);
        let rows = h.row_totals();
        for (ai, r) in rows.iter().enumerate() {
            assert_eq!(*r, labels.iter().filter(|l| **l == Some(ai)).count() as u64);
        }
    }

    #[test]
    fn misaligned_labels_are_rejected() {
        let t = trace(&[0, 1, 2], 3);
        assert!(matches!(record_routing(&t, &[Some(0); 2], 2), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(record_routing(&t, &[Some(5); 3], 2), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn purity_examples() {
        let mut h = ExpertHistogram::numbered(0, 3, 3);
        h.counts = vec![vec![4, 0, 0], vec![0, 0, 9], vec![0, 2, 0]];
        assert_eq!(specialization_purity(&h).unwrap(), 1.0);
        h.counts = vec![vec![5; 4]; 3];
        assert!((specialization_purity(&h).unwrap() - 0.25).abs() < 1e-15);
        h.counts = vec![vec![3, 1, 2], vec![0, 5, 5], vec![7, 0, 1]];
        // Hand tally: (3 + 5 + 7) / 24.
        assert_eq!(specialization_purity(&h).unwrap(), 15.0 / 24.0);
        let empty = ExpertHistogram::numbered(0, 2, 2);
        assert!(specialization_purity(&empty).is_err());
    }

    #[test]
    fn balanced_routing_has_zero_cv() {
        let top1: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let r = balance_report(&[trace(&top1, 4)]).unwrap();
        assert_eq!(r.layers[0].importance, 0.0);
        assert_eq!(r.layers[0].load, 0.0);
        assert_eq!(r.layers[0].shares, vec![0.25; 4]);
    }

    #[test]
    fn report_matches_losses_and_counts() {
        let mut rng = SeedTree::new(2).stream("t");
        let (n, e) = (60, 5);
        let gates = Tensor::from_fn([n, e], |_| libm::fabs(standard_normal::<f64, _>(&mut rng)));
        let load = Tensor::from_fn([n, e], |_| rng.random::<f64>());
        let selected: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.random_range(0..e), rng.random_range(0..e)]).collect();
        let d = GateDecision {
            raw_logits: gates.clone(),
            noisy_logits: gates.clone(),
            gate_weights: gates.clone(),
            selected: selected.clone(),
            load_prob: load.clone(),
        };
        let t = RoutingTrace {
            samples: n,
            tokens_per_sample: 1,
            layers: vec![LayerTrace { block: 0, decision: d }],
        };
        let r = balance_report(&[t]).unwrap();
        assert_eq!(r.layers[0].importance, losses::importance_loss(&gates).unwrap());
        assert_eq!(r.layers[0].load, losses::load_loss(&load).unwrap());
        let mut counts = vec![0usize; e];
        selected.iter().flatten().for_each(|&x| counts[x] += 1);
        for (s, c) in r.layers[0].shares.iter().zip(&counts) {
            assert_eq!(*s, *c as f64 / (2 * n) as f64);
        }
        assert!((r.layers[0].shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_stacks_traces() {
        let a = trace(&[0, 0, 1], 3);
        let b = trace(&[2, 2, 2, 1], 3);
        let joint = trace(&[0, 0, 1, 2, 2, 2, 1], 3);
        assert_eq!(balance_report(&[a, b]).unwrap(), balance_report(&[joint]).unwrap());
    }

    proptest! {
        #[test]
        fn histogram_total_is_order_invariant(
            picks in prop::collection::vec((0usize..4, 0usize..3), 1..80),
            split in 0usize..80,
        ) {
            let top1: Vec<usize> = picks.iter().map(|p| p.0).collect();
            let labels: Vec<Option<usize>> = picks.iter().map(|p| Some(p.1)).collect();
            let whole = &record_routing(&trace(&top1, 4), &labels, 3).unwrap()[0];

            let cut = split.min(picks.len());
            let mut rev = top1.clone();
            let mut rev_labels = labels.clone();
            rev.reverse();
            rev_labels.reverse();
            let mut h = ExpertHistogram::numbered(1, 3, 4);
            let (r1, r2) = rev.split_at(cut);
            let (l1, l2) = rev_labels.split_at(cut);
            let mut parts = Vec::new();
            if !r1.is_empty() {
                parts.push(record_routing(&trace(r1, 4), l1, 3).unwrap().remove(0));
            }
            if !r2.is_empty() {
                parts.push(record_routing(&trace(r2, 4), l2, 3).unwrap().remove(0));
            }
            for p in parts.iter().rev() {
                h.merge(p).unwrap();
            }
            prop_assert_eq!(&h, whole);
            prop_assert_eq!(h.total(), picks.len() as u64);
        }
    }
}
