//! The training objective: masked cross-entropy, the attention-guidance MSE
//! loss over guided heads, the decaying guidance weight, and the
//! head-assignment policy.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::model::AttentionTrace;
use crate::patterns::{build_pattern, PatternKind};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Ordered (head index, pattern) pairs; the same map applies to every layer.
pub type HeadAssignment = Vec<(usize, PatternKind)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Fraction of heads guided per layer.
    pub lambda: f64,
    /// Initial weight on the guidance loss.
    pub alpha0: f64,
    /// Total planned steps; the guidance weight decays linearly to 0 here.
    pub horizon: u64,
    pub assignment: HeadAssignment,
}

impl GuidanceConfig {
    pub fn new(heads: usize, lambda: f64, alpha0: f64, horizon: u64) -> Self {
        GuidanceConfig {
            lambda,
            alpha0,
            horizon,
            assignment: default_assignment(heads, lambda, &PatternKind::ALL, false),
        }
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        let mut seen = HashSet::new();
        let mut next = 0;
        let mut prev = 0;
        for &(idx, kind) in &self.assignment {
            if idx >= heads {
                return Err(Error::Config(format!("guided head index {} >= {} heads", idx, heads)));
            }
            if !seen.insert(idx) {
                return Err(Error::Config(format!("head {} assigned twice", idx)));
            }
            match kind {
                PatternKind::Next => next += 1,
                PatternKind::Prev => prev += 1,
                _ => {}
            }
        }
        if next > 1 || prev > 1 {
            return Err(Error::Config("at most one Next and one Prev head allowed".into()));
        }
        Ok(())
    }
}

/// Number of guided heads per layer: round(lambda * h), ties to even.
pub fn guided_count(heads: usize, lambda: f64) -> usize {
    ((lambda * heads as f64).round_ties_even() as usize).min(heads)
}

fn fill_slots(plan: &[PatternKind], available: &[PatternKind], refill: bool) -> HeadAssignment {
    let avail: HashSet<PatternKind> = available.iter().copied().collect();
    let mut out = Vec::new();
    for (slot, &kind) in plan.iter().enumerate() {
        if avail.contains(&kind) {
            out.push((slot, kind));
        } else if refill {
            // A vacated slot is refilled by the best remaining global pattern.
            for sub in [PatternKind::First, PatternKind::Period, PatternKind::Delim] {
                if avail.contains(&sub) {
                    out.push((slot, sub));
                    break;
                }
            }
        }
    }
    out
}

/// The training recipe: one head guided with Next, one with Prev, and every
/// remaining guided head with First. Kinds missing from `available` vacate
/// their slots (leave-one-out ablation); `refill` substitutes the next
/// global pattern instead, keeping the guided-head count constant.
pub fn default_assignment(
    heads: usize,
    lambda: f64,
    available: &[PatternKind],
    refill: bool,
) -> HeadAssignment {
    let m = guided_count(heads, lambda);
    let mut plan = Vec::with_capacity(m);
    if m >= 1 {
        plan.push(PatternKind::Next);
    }
    if m >= 2 {
        plan.push(PatternKind::Prev);
    }
    while plan.len() < m {
        plan.push(PatternKind::First);
    }
    fill_slots(&plan, available, refill)
}

/// Ablation baseline covering all five patterns: Next, Prev, First, Period,
/// Delim take one slot each (in importance order) and any further slots get
/// First. Needs round(lambda*heads) >= 5 to represent every pattern.
pub fn all_patterns_assignment(
    heads: usize,
    lambda: f64,
    available: &[PatternKind],
    refill: bool,
) -> HeadAssignment {
    let m = guided_count(heads, lambda);
    let mut plan = Vec::with_capacity(m);
    for kind in PatternKind::ALL {
        if plan.len() < m {
            plan.push(kind);
        }
    }
    while plan.len() < m {
        plan.push(PatternKind::First);
    }
    fill_slots(&plan, available, refill)
}

/// Mean squared difference over all matrix entries: ||H - P||_F^2 / n^2.
pub fn matrix_mse<F: Scalar>(h: &Tensor<F>, p: &Tensor<F>) -> Result<F> {
    if h.shape != p.shape {
        return Err(Error::ShapeMismatch {
            op: "matrix_mse",
            detail: format!("{:?} vs {:?}", h.shape, p.shape),
        });
    }
    let mut total = F::zero();
    for (&a, &b) in h.data.iter().zip(&p.data) {
        let d = a - b;
        total = total + d * d;
    }
    Ok(total / F::from_f64(h.numel() as f64))
}

/// Guidance weight at step t: alpha0 * max(0, 1 - t/T).
pub fn alpha_at(t: u64, config: &GuidanceConfig) -> Result<f64> {
    if config.horizon == 0 {
        return Err(Error::Config("guidance decay horizon must be positive".into()));
    }
    Ok(config.alpha0 * (1.0 - t as f64 / config.horizon as f64).max(0.0))
}

/// Batch-mean masked cross-entropy: the sum over every masked position in
/// the batch, divided by the total masked count.
pub fn mlm_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: &[NodeId],
    batch: &MaskedBatch,
) -> Result<NodeId> {
    let total: usize = batch.total_masked();
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let mut parts = Vec::new();
    for (s, positions) in batch.mask_sets.iter().enumerate() {
        if positions.is_empty() {
            continue;
        }
        parts.push(tape.ce_masked_sum(logits[s], &batch.labels[s], positions)?);
    }
    let sum = tape.sum_scalars(&parts)?;
    Ok(tape.scale(sum, 1.0 / total as f64))
}

/// Builds the per-sequence guidance target for one pattern over the valid
/// (non-pad) submatrix, embedded in an n x n tensor, plus the entry mask.
fn guidance_target<F: Scalar>(
    kind: PatternKind,
    tokens: &[usize],
    valid_len: usize,
    n: usize,
    delim_set: &HashSet<usize>,
    period_id: usize,
) -> (Tensor<F>, Vec<bool>) {
    let pattern = build_pattern(kind, &tokens[..valid_len], delim_set, period_id);
    let mut target = Tensor::<F>::zeros(vec![n, n]);
    let mut mask = vec![false; n * n];
    for p in 0..valid_len {
        for q in 0..valid_len {
            target.data[p * n + q] = F::from_f64(pattern.get(p, q));
            mask[p * n + q] = true;
        }
    }
    (target, mask)
}

/// In-graph AG loss (Eq. over guided layer/head pairs): sum over layers and
/// guided heads of the per-sequence masked matrix MSE, averaged over the
/// batch. Depends only on the (masked) inputs, never on labels.
pub fn ag_loss_taped<F: Scalar>(
    tape: &mut Tape<F>,
    attention: &[Vec<Vec<NodeId>>],
    config: &GuidanceConfig,
    batch: &MaskedBatch,
    delim_set: &HashSet<usize>,
    period_id: usize,
) -> Result<Option<NodeId>> {
    if config.assignment.is_empty() {
        return Ok(None);
    }
    let b = batch.input_ids.len();
    let n = batch.input_ids.first().map_or(0, |s| s.len());
    let mut parts = Vec::new();
    for layer in attention {
        for &(head, kind) in &config.assignment {
            for s in 0..b {
                let vl = batch.valid_len[s];
                let (target, mask) =
                    guidance_target::<F>(kind, &batch.input_ids[s], vl, n, delim_set, period_id);
                let denom = (vl * vl) as f64;
                parts.push(tape.mse_vs_const(layer[head][s], &target, Some(&mask), denom)?);
            }
        }
    }
    let sum = tape.sum_scalars(&parts)?;
    Ok(Some(tape.scale(sum, 1.0 / b as f64)))
}

/// Value-level AG loss over a captured trace; an independent route used by
/// evaluation and tests.
pub fn ag_loss<F: Scalar>(
    trace: &AttentionTrace<F>,
    config: &GuidanceConfig,
    batch: &MaskedBatch,
    delim_set: &HashSet<usize>,
    period_id: usize,
) -> Result<F> {
    if config.assignment.is_empty() {
        return Ok(F::zero());
    }
    let b = batch.input_ids.len();
    let mut total = F::zero();
    for layer in &trace.h {
        for &(head, kind) in &config.assignment {
            for s in 0..b {
                let vl = batch.valid_len[s];
                let h_full = &layer[head][s];
                let pattern =
                    build_pattern(kind, &batch.input_ids[s][..vl], delim_set, period_id);
                let mut sse = F::zero();
                for p in 0..vl {
                    for q in 0..vl {
                        let d = h_full.get2(p, q) - F::from_f64(pattern.get(p, q));
                        sse = sse + d * d;
                    }
                }
                total = total + sse / F::from_f64((vl * vl) as f64);
            }
        }
    }
    Ok(total / F::from_f64(b as f64))
}

/// Scalar nodes of the combined objective plus the guidance weight used.
pub struct LossNodes {
    pub total: NodeId,
    pub mlm: NodeId,
    pub ag: Option<NodeId>,
    pub alpha: f64,
}

/// total = mlm + alpha_t * ag. When no head is guided, or alpha_t has
/// decayed to zero, `total` IS the mlm node, so the backward pass is
/// bitwise identical to plain MLM training.
pub fn combined_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: &[NodeId],
    attention: Option<&[Vec<Vec<NodeId>>]>,
    batch: &MaskedBatch,
    config: &GuidanceConfig,
    t: u64,
    delim_set: &HashSet<usize>,
    period_id: usize,
) -> Result<LossNodes> {
    let mlm = mlm_loss(tape, logits, batch)?;
    let alpha = alpha_at(t, config)?;
    let ag = match attention {
        Some(att) => ag_loss_taped(tape, att, config, batch, delim_set, period_id)?,
        None => None,
    };
    let total = match ag {
        Some(ag_node) if alpha > 0.0 => {
            let weighted = tape.scale(ag_node, alpha);
            tape.sum_scalars(&[mlm, weighted])?
        }
        _ => mlm,
    };
    Ok(LossNodes { total, mlm, ag, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_h12_half() {
        let a = default_assignment(12, 0.5, &PatternKind::ALL, false);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0], (0, PatternKind::Next));
        assert_eq!(a[1], (1, PatternKind::Prev));
        for (i, &(idx, kind)) in a.iter().enumerate().skip(2) {
            assert_eq!(idx, i);
            assert_eq!(kind, PatternKind::First);
        }
    }

    #[test]
    fn assignment_lambda_zero_is_empty() {
        assert!(default_assignment(4, 0.0, &PatternKind::ALL, false).is_empty());
    }

    #[test]
    fn assignment_quarter_of_four_is_next_only() {
        let a = default_assignment(4, 0.25, &PatternKind::ALL, false);
        assert_eq!(a, vec![(0, PatternKind::Next)]);
    }

    #[test]
    fn assignment_counts_for_h16() {
        let a = default_assignment(16, 0.5, &PatternKind::ALL, false);
        assert_eq!(a.len(), 8);
        assert_eq!(a.iter().filter(|(_, k)| *k == PatternKind::Next).count(), 1);
        assert_eq!(a.iter().filter(|(_, k)| *k == PatternKind::Prev).count(), 1);
        assert_eq!(a.iter().filter(|(_, k)| *k == PatternKind::First).count(), 6);
    }

    #[test]
    fn leave_one_out_vacates_without_refill() {
        let avail = [PatternKind::Prev, PatternKind::First, PatternKind::Period, PatternKind::Delim];
        let a = default_assignment(4, 1.0, &avail, false);
        // slot 0 (Next) vacated; Prev stays at head 1
        assert_eq!(a, vec![(1, PatternKind::Prev), (2, PatternKind::First), (3, PatternKind::First)]);
    }

    #[test]
    fn leave_one_out_refills_with_first() {
        let avail = [PatternKind::First, PatternKind::Period, PatternKind::Delim];
        let a = default_assignment(4, 1.0, &avail, true);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|(_, k)| *k == PatternKind::First));
    }

    #[test]
    fn all_patterns_plan_covers_five_kinds() {
        let a = all_patterns_assignment(8, 0.625, &PatternKind::ALL, false);
        assert_eq!(
            a,
            vec![
                (0, PatternKind::Next),
                (1, PatternKind::Prev),
                (2, PatternKind::First),
                (3, PatternKind::Period),
                (4, PatternKind::Delim),
            ]
        );
        let b = all_patterns_assignment(8, 0.75, &PatternKind::ALL, false);
        assert_eq!(b.len(), 6);
        assert_eq!(b[5], (5, PatternKind::First));
    }

    #[test]
    fn alpha_schedule_endpoints() {
        let cfg = GuidanceConfig::new(4, 0.5, 100.0, 1000);
        assert_eq!(alpha_at(0, &cfg).unwrap(), 100.0);
        assert_eq!(alpha_at(1000, &cfg).unwrap(), 0.0);
        assert_eq!(alpha_at(500, &cfg).unwrap(), 50.0);
        assert_eq!(alpha_at(2000, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn alpha_is_nonincreasing() {
        let cfg = GuidanceConfig::new(4, 0.5, 10.0, 777);
        let mut last = f64::INFINITY;
        for t in 0..2000 {
            let a = alpha_at(t, &cfg).unwrap();
            assert!(a <= last);
            last = a;
        }
    }

    #[test]
    fn alpha_zero_horizon_is_config_error() {
        let cfg = GuidanceConfig { lambda: 0.5, alpha0: 1.0, horizon: 0, assignment: vec![] };
        assert!(alpha_at(0, &cfg).is_err());
    }

    #[test]
    fn matrix_mse_zero_iff_equal() {
        let a = Tensor::<f64>::new(vec![2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        assert_eq!(matrix_mse(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data[3] += 1e-6;
        assert!(matrix_mse(&a, &b).unwrap() > 0.0);
    }

    fn uniform_h(n: usize) -> Tensor<f64> {
        let v = 1.0 / n as f64;
        Tensor { shape: vec![n, n], data: vec![v; n * n], requires_grad: false }
    }

    fn batch_n2() -> MaskedBatch {
        MaskedBatch {
            input_ids: vec![vec![10, 11]],
            labels: vec![vec![10, 11]],
            mask_sets: vec![vec![]],
            valid_len: vec![2],
        }
    }

    fn trace_one_layer(heads: Vec<Tensor<f64>>) -> AttentionTrace<f64> {
        AttentionTrace {
            layers: 1,
            heads: heads.len(),
            h: vec![heads.into_iter().map(|t| vec![t]).collect()],
        }
    }

    #[test]
    fn ag_loss_hand_computed_example() {
        // 1 layer, 2 guided heads, n = 2, both H uniform.
        // First: mse(uniform, [[1,0],[1,0]]) = 0.25
        // Next:  mse(uniform, [[0,1],[.5,.5]]) = (0.25+0.25+0+0)/4 = 0.125
        let trace = trace_one_layer(vec![uniform_h(2), uniform_h(2)]);
        let cfg = GuidanceConfig {
            lambda: 1.0,
            alpha0: 1.0,
            horizon: 10,
            assignment: vec![(0, PatternKind::First), (1, PatternKind::Next)],
        };
        let loss = ag_loss(&trace, &cfg, &batch_n2(), &HashSet::new(), usize::MAX).unwrap();
        assert!((loss - 0.375).abs() < 1e-12, "got {}", loss);
    }

    #[test]
    fn ag_loss_zero_when_heads_match_patterns() {
        let first = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        // unguided head is arbitrary garbage
        let garbage = Tensor::<f64>::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let trace = trace_one_layer(vec![first, garbage]);
        let cfg = GuidanceConfig {
            lambda: 0.5,
            alpha0: 1.0,
            horizon: 10,
            assignment: vec![(0, PatternKind::First)],
        };
        let loss = ag_loss(&trace, &cfg, &batch_n2(), &HashSet::new(), usize::MAX).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ag_loss_lambda_zero_is_zero() {
        let trace = trace_one_layer(vec![uniform_h(2), uniform_h(2)]);
        let cfg = GuidanceConfig::new(2, 0.0, 1.0, 10);
        assert_eq!(ag_loss(&trace, &cfg, &batch_n2(), &HashSet::new(), usize::MAX).unwrap(), 0.0);
    }

    #[test]
    fn ag_loss_ignores_labels() {
        let trace = trace_one_layer(vec![uniform_h(2)]);
        let cfg = GuidanceConfig {
            lambda: 0.5,
            alpha0: 1.0,
            horizon: 10,
            assignment: vec![(0, PatternKind::Next)],
        };
        let mut batch = batch_n2();
        let a = ag_loss(&trace, &cfg, &batch, &HashSet::new(), usize::MAX).unwrap();
        batch.labels = vec![vec![99, 98]];
        let b = ag_loss(&trace, &cfg, &batch, &HashSet::new(), usize::MAX).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn taped_and_value_routes_agree() {
        let mut tape = Tape::<f64>::new();
        let h0 = tape.leaf(uniform_h(3));
        let h1 = tape.leaf(Tensor::new(vec![3, 3], vec![0.5, 0.3, 0.2, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4]).unwrap());
        let attention = vec![vec![vec![h0], vec![h1]]];
        let batch = MaskedBatch {
            input_ids: vec![vec![2, 7, 3]],
            labels: vec![vec![2, 7, 3]],
            mask_sets: vec![vec![]],
            valid_len: vec![3],
        };
        let cfg = GuidanceConfig {
            lambda: 1.0,
            alpha0: 1.0,
            horizon: 10,
            assignment: vec![(0, PatternKind::Next), (1, PatternKind::Delim)],
        };
        let delims: HashSet<usize> = [2, 3].into_iter().collect();
        let taped = ag_loss_taped(&mut tape, &attention, &cfg, &batch, &delims, usize::MAX)
            .unwrap()
            .unwrap();
        let taped_val = tape.scalar_value(taped);
        let trace = trace_one_layer(vec![tape.value(h0).clone(), tape.value(h1).clone()]);
        let value = ag_loss(&trace, &cfg, &batch, &delims, usize::MAX).unwrap();
        assert!((taped_val - value).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_arithmetic() {
        // alpha0 = 10 at t = 0, mlm = 2.0, ag = 0.3 -> total = 5.0
        let total = 2.0 + 10.0 * 0.3;
        assert_eq!(total, 5.0);
        // and through the tape:
        let mut tape = Tape::<f64>::new();
        let mlm = tape.leaf(Tensor::scalar(2.0).requires_grad(true));
        let ag = tape.leaf(Tensor::scalar(0.3).requires_grad(true));
        let weighted = tape.scale(ag, 10.0);
        let t = tape.sum_scalars(&[mlm, weighted]).unwrap();
        assert_eq!(tape.scalar_value(t), 5.0);
    }

    #[test]
    fn mlm_loss_weights_sequences_by_mask_counts() {
        // two sequences, per-position oracle
        let mut tape = Tape::<f64>::new();
        let l0 = tape.leaf(Tensor::new(vec![3, 4], vec![
            0.0, 0.0, 0.0, 0.0, //
            1.0, -1.0, 0.5, 0.0, //
            2.0, 0.0, 0.0, -2.0,
        ]).unwrap());
        let l1 = tape.leaf(Tensor::new(vec![3, 4], vec![
            0.3, 0.3, 0.3, 0.3, //
            0.0, 5.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ]).unwrap());
        let batch = MaskedBatch {
            input_ids: vec![vec![4, 4, 5], vec![5, 4, 6]],
            labels: vec![vec![1, 2, 0], vec![0, 1, 3]],
            mask_sets: vec![vec![0, 1], vec![1]],
            valid_len: vec![3, 3],
        };
        let loss = mlm_loss(&mut tape, &[l0, l1], &batch).unwrap();
        let got = tape.scalar_value(loss);
        let ce = |row: &[f64], label: usize| crate::kernels::log_sum_exp(row) - row[label];
        let expected = (ce(&[0.0, 0.0, 0.0, 0.0], 1)
            + ce(&[1.0, -1.0, 0.5, 0.0], 2)
            + ce(&[0.0, 5.0, 0.0, 0.0], 1))
            / 3.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_ignores_unmasked_labels() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.1, 0.9, 0.0, 0.4]).unwrap());
        let mk = |labels: Vec<usize>| MaskedBatch {
            input_ids: vec![vec![4, 7]],
            labels: vec![labels],
            mask_sets: vec![vec![0]],
            valid_len: vec![2],
        };
        let a = mlm_loss(&mut tape, &[logits], &mk(vec![1, 0])).unwrap();
        let b = mlm_loss(&mut tape, &[logits], &mk(vec![1, 2])).unwrap();
        assert_eq!(tape.scalar_value(a), tape.scalar_value(b));
    }

    #[test]
    fn mlm_loss_empty_batch_mask_errors() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 3]));
        let batch = MaskedBatch {
            input_ids: vec![vec![2, 3]],
            labels: vec![vec![2, 3]],
            mask_sets: vec![vec![]],
            valid_len: vec![2],
        };
        assert!(matches!(mlm_loss(&mut tape, &[logits], &batch), Err(Error::EmptyMask)));
    }
}
