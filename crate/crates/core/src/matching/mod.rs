//! Bipartite matching between predicted and gold expression sets, and the
//! resulting set loss.

mod hungarian;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equation::{Operand, Operator, Triple};
use crate::labels::LabelSet;

pub use hungarian::hungarian;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("cost matrix contains a non-finite entry")]
    NonFiniteCost,
    #[error("cost matrix is not square")]
    NotSquare,
    #[error("operand {0} is outside the current operand vocabulary")]
    OperandNotInVocab(Operand),
    #[error("label set has {labels} slots but there are {preds} predictions")]
    KMismatch { labels: usize, preds: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Row-major K×K costs; rows are gold triples, columns predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    k: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchError> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(MatchError::NotSquare);
        }
        Ok(CostMatrix {
            k,
            data: rows.concat(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, gold: usize, pred: usize) -> f64 {
        self.data[gold * self.k + pred]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.k.max(1))
    }
}

/// β: gold index → prediction index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn identity(k: usize) -> Self {
        Assignment((0..k).collect())
    }

    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.0.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Matching {
    #[default]
    Bipartite,
    Sequence,
    Random,
}

impl Matching {
    pub fn name(self) -> &'static str {
        match self {
            Matching::Bipartite => "bipartite",
            Matching::Sequence => "sequence",
            Matching::Random => "random",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "bipartite" => Some(Matching::Bipartite),
            "sequence" => Some(Matching::Sequence),
            "random" => Some(Matching::Random),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossPolicy {
    pub matching: Matching,
    /// Train `None` rows to predict the reserved pad operand.
    pub operand_none_loss: bool,
    /// Score the operator of `None` rows.
    pub operator_none_loss: bool,
}

impl Default for LossPolicy {
    fn default() -> Self {
        LossPolicy {
            matching: Matching::Bipartite,
            operand_none_loss: false,
            operator_none_loss: true,
        }
    }
}

/// Column layout of the operand vocabulary: problem numbers, constants,
/// intermediate results, then the pad class when enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OperandSpace {
    pub n_constants: usize,
    pub n_numbers: usize,
    pub n_results: usize,
    pub pad: bool,
}

impl OperandSpace {
    pub fn width(&self) -> usize {
        self.n_constants + self.n_numbers + self.n_results + usize::from(self.pad)
    }

    pub fn column(&self, o: Operand) -> Option<usize> {
        match o {
            Operand::Number(i) if i < self.n_numbers => Some(i),
            Operand::Constant(i) if i < self.n_constants => Some(self.n_numbers + i),
            Operand::Result(i) if i < self.n_results => Some(self.n_constants + self.n_numbers + i),
            _ => None,
        }
    }

    pub fn operand(&self, col: usize) -> Option<Operand> {
        let (n, c, r) = (self.n_numbers, self.n_constants, self.n_results);
        if col < n {
            Some(Operand::Number(col))
        } else if col < n + c {
            Some(Operand::Constant(col - n))
        } else if col < n + c + r {
            Some(Operand::Result(col - n - c))
        } else {
            None
        }
    }

    pub fn pad_column(&self) -> Option<usize> {
        self.pad.then(|| self.width() - 1)
    }
}

/// Per-query log-probabilities for operator, left and right operand.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub op: Vec<Vec<f64>>,
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn from_log_probs(op: Vec<Vec<f64>>, left: Vec<Vec<f64>>, right: Vec<Vec<f64>>) -> Self {
        PredictionSet { op, left, right }
    }

    /// Checks each row is a distribution (non-negative, sums to 1).
    pub fn from_probs(op: &[Vec<f64>], left: &[Vec<f64>], right: &[Vec<f64>]) -> Result<Self, MatchError> {
        let logs = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>, MatchError> {
            rows.iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    if r.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-6 {
                        return Err(MatchError::InvalidDistribution(format!("{r:?}")));
                    }
                    Ok(r.iter().map(|p| p.ln()).collect())
                })
                .collect()
        };
        if op.iter().any(|r| r.len() != Operator::COUNT) {
            return Err(MatchError::InvalidDistribution("operator rows need one entry per operator".into()));
        }
        if op.len() != left.len() || op.len() != right.len() {
            return Err(MatchError::InvalidDistribution("head row counts differ".into()));
        }
        Ok(PredictionSet {
            op: logs(op)?,
            left: logs(left)?,
            right: logs(right)?,
        })
    }

    pub fn k(&self) -> usize {
        self.op.len()
    }
}

/// Matching cost of predicting `gold` with query `j`: zero for `None` gold,
/// otherwise the negated sum of the three probabilities.
pub fn match_cost(gold: &Triple, preds: &PredictionSet, j: usize, space: &OperandSpace) -> Result<f64, MatchError> {
    if gold.is_pad() {
        return Ok(0.0);
    }
    let (l, r) = operand_columns(gold, space, preds.left[j].len())?;
    let p_op = preds.op[j][gold.op.index()].exp();
    Ok(-(p_op + preds.left[j][l].exp() + preds.right[j][r].exp()))
}

fn operand_columns(gold: &Triple, space: &OperandSpace, width: usize) -> Result<(usize, usize), MatchError> {
    let col = |o: Option<Operand>| {
        let o = o.expect("non-pad triples have operands");
        space
            .column(o)
            .filter(|&c| c < width)
            .ok_or(MatchError::OperandNotInVocab(o))
    };
    Ok((col(gold.left)?, col(gold.right)?))
}

pub fn cost_matrix(labels: &LabelSet, preds: &PredictionSet, space: &OperandSpace) -> Result<CostMatrix, MatchError> {
    check_k(labels, preds)?;
    let k = labels.k();
    let mut data = Vec::with_capacity(k * k);
    for gold in &labels.triples {
        for j in 0..k {
            data.push(match_cost(gold, preds, j, space)?);
        }
    }
    Ok(CostMatrix { k, data })
}

fn check_k(labels: &LabelSet, preds: &PredictionSet) -> Result<(), MatchError> {
    if labels.k() != preds.k() {
        return Err(MatchError::KMismatch {
            labels: labels.k(),
            preds: preds.k(),
        });
    }
    Ok(())
}

/// β under the policy's matching mode. `Random` draws from `rng`.
pub fn assign<R: Rng + ?Sized>(
    labels: &LabelSet,
    preds: &PredictionSet,
    space: &OperandSpace,
    matching: Matching,
    rng: &mut R,
) -> Result<Assignment, MatchError> {
    check_k(labels, preds)?;
    match matching {
        Matching::Bipartite => hungarian(&cost_matrix(labels, preds, space)?),
        Matching::Sequence => Ok(Assignment::identity(labels.k())),
        Matching::Random => {
            let mut beta: Vec<usize> = (0..labels.k()).collect();
            beta.shuffle(rng);
            Ok(Assignment(beta))
        }
    }
}

/// Log-probability picks with weight −1, so `Σ w·logp` is the loss. Each
/// entry is `(query row, class column, weight)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTargets {
    pub op: Vec<(usize, usize, f64)>,
    pub left: Vec<(usize, usize, f64)>,
    pub right: Vec<(usize, usize, f64)>,
}

impl LossTargets {
    pub fn value(&self, preds: &PredictionSet) -> f64 {
        let pick = |rows: &[Vec<f64>], e: &[(usize, usize, f64)]| e.iter().map(|&(r, c, w)| w * rows[r][c]).sum::<f64>();
        pick(&preds.op, &self.op) + pick(&preds.left, &self.left) + pick(&preds.right, &self.right)
    }
}

/// Target classes for a fixed β.
pub fn loss_targets(
    labels: &LabelSet,
    beta: &Assignment,
    space: &OperandSpace,
    policy: &LossPolicy,
) -> Result<LossTargets, MatchError> {
    let mut t = LossTargets::default();
    let width = space.width();
    for (i, gold) in labels.triples.iter().enumerate() {
        let j = beta.0[i];
        if gold.is_pad() {
            if policy.operator_none_loss {
                t.op.push((j, Operator::Null.index(), -1.0));
            }
            if policy.operand_none_loss {
                let pad = space
                    .pad_column()
                    .ok_or_else(|| MatchError::InvalidDistribution("operand None loss needs a pad class".into()))?;
                t.left.push((j, pad, -1.0));
                t.right.push((j, pad, -1.0));
            }
        } else {
            let (l, r) = operand_columns(gold, space, width)?;
            t.op.push((j, gold.op.index(), -1.0));
            t.left.push((j, l, -1.0));
            t.right.push((j, r, -1.0));
        }
    }
    Ok(t)
}

/// Loss contributions of one gold row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RowTerms {
    pub op: f64,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetLoss {
    pub beta: Assignment,
    pub loss: f64,
    /// Indexed by gold row.
    pub rows: Vec<RowTerms>,
}

pub fn set_loss<R: Rng + ?Sized>(
    labels: &LabelSet,
    preds: &PredictionSet,
    space: &OperandSpace,
    policy: &LossPolicy,
    rng: &mut R,
) -> Result<SetLoss, MatchError> {
    let beta = assign(labels, preds, space, policy.matching, rng)?;
    set_loss_with(labels, preds, space, policy, beta)
}

/// Set loss for a given β.
pub fn set_loss_with(
    labels: &LabelSet,
    preds: &PredictionSet,
    space: &OperandSpace,
    policy: &LossPolicy,
    beta: Assignment,
) -> Result<SetLoss, MatchError> {
    check_k(labels, preds)?;
    if preds.left.iter().chain(&preds.right).any(|r| r.len() != space.width()) {
        return Err(MatchError::InvalidDistribution("operand rows do not match the operand space".into()));
    }
    let targets = loss_targets(labels, &beta, space, policy)?;
    let mut rows = vec![RowTerms::default(); labels.k()];
    let gold_of: Vec<usize> = {
        let mut inv = vec![0; beta.0.len()];
        for (i, &j) in beta.0.iter().enumerate() {
            inv[j] = i;
        }
        inv
    };
    for &(j, c, w) in &targets.op {
        rows[gold_of[j]].op += w * preds.op[j][c];
    }
    for &(j, c, w) in &targets.left {
        rows[gold_of[j]].left += w * preds.left[j][c];
    }
    for &(j, c, w) in &targets.right {
        rows[gold_of[j]].right += w * preds.right[j][c];
    }
    Ok(SetLoss {
        beta,
        loss: targets.value(preds),
        rows,
    })
}

/// Unweighted sum of per-layer losses.
pub fn total_loss(per_layer: &[f64]) -> f64 {
    per_layer.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SPACE: OperandSpace = OperandSpace {
        n_constants: 1,
        n_numbers: 4,
        n_results: 0,
        pad: false,
    };

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
    }

    fn labels(triples: Vec<Triple>) -> LabelSet {
        LabelSet { layer_index: 0, triples }
    }

    fn n(i: usize) -> Operand {
        Operand::Number(i)
    }

    /// One-hot predictions reproducing `gold`, in the given query order.
    fn exact_preds(gold: &[Triple], order: &[usize], space: &OperandSpace) -> PredictionSet {
        let w = space.width();
        let mut op = vec![];
        let mut l = vec![];
        let mut r = vec![];
        for &g in order {
            let t = &gold[g];
            op.push(one_hot(Operator::COUNT, t.op.index()));
            let lc = t.left.and_then(|o| space.column(o)).unwrap_or(0);
            let rc = t.right.and_then(|o| space.column(o)).unwrap_or(0);
            l.push(one_hot(w, lc));
            r.push(one_hot(w, rc));
        }
        PredictionSet::from_probs(&op, &l, &r).unwrap()
    }

    #[test]
    fn cost_of_exact_and_none() {
        let gold = Triple::new(n(0), Operator::Mul, n(1));
        let p = exact_preds(&[gold], &[0], &SPACE);
        assert_eq!(match_cost(&gold, &p, 0, &SPACE).unwrap(), -3.0);
        assert_eq!(match_cost(&Triple::PAD, &p, 0, &SPACE).unwrap(), 0.0);
    }

    #[test]
    fn cost_of_uniform() {
        let p = PredictionSet::from_probs(&[vec![1.0 / 6.0; 6]], &[vec![0.2; 5]], &[vec![0.2; 5]]).unwrap();
        let c = match_cost(&Triple::new(n(0), Operator::Add, n(2)), &p, 0, &SPACE).unwrap();
        assert!((c - -(1.0 / 6.0 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn unknown_operand() {
        let p = PredictionSet::from_probs(&[vec![1.0 / 6.0; 6]], &[vec![0.2; 5]], &[vec![0.2; 5]]).unwrap();
        let err = match_cost(&Triple::new(n(0), Operator::Add, Operand::Result(0)), &p, 0, &SPACE);
        assert_eq!(err, Err(MatchError::OperandNotInVocab(Operand::Result(0))));
    }

    #[test]
    fn exact_preds_have_zero_loss_in_any_order() {
        let gold = vec![
            Triple::new(n(0), Operator::Mul, n(1)),
            Triple::new(n(2), Operator::Mul, n(3)),
            Triple::PAD,
        ];
        let p = exact_preds(&gold, &[2, 0, 1], &SPACE);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = set_loss(&labels(gold.clone()), &p, &SPACE, &LossPolicy::default(), &mut rng).unwrap();
        assert_eq!(got.loss, 0.0);
        assert_eq!(got.beta.0, vec![1, 2, 0]);

        let seq = LossPolicy {
            matching: Matching::Sequence,
            ..LossPolicy::default()
        };
        let got = set_loss(&labels(gold), &p, &SPACE, &seq, &mut rng).unwrap();
        assert!(got.loss.is_infinite() || got.loss > 10.0);
    }

    #[test]
    fn pad_rows_score_only_operator() {
        let uni = PredictionSet::from_probs(&[vec![1.0 / 6.0; 6]], &[vec![0.2; 5]], &[vec![0.2; 5]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = set_loss(&labels(vec![Triple::PAD]), &uni, &SPACE, &LossPolicy::default(), &mut rng).unwrap();
        assert!((got.loss - 6f64.ln()).abs() < 1e-12);
        assert_eq!(got.rows[0].left, 0.0);

        let no_op = LossPolicy {
            operator_none_loss: false,
            ..LossPolicy::default()
        };
        let got = set_loss(&labels(vec![Triple::PAD]), &uni, &SPACE, &no_op, &mut rng).unwrap();
        assert_eq!(got.loss, 0.0);
    }

    #[test]
    fn operand_none_loss_uses_pad_class() {
        let space = OperandSpace { pad: true, ..SPACE };
        let uni = PredictionSet::from_probs(&[vec![1.0 / 6.0; 6]], &[vec![1.0 / 6.0; 6]], &[vec![1.0 / 6.0; 6]]).unwrap();
        let policy = LossPolicy {
            operand_none_loss: true,
            ..LossPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = set_loss(&labels(vec![Triple::PAD]), &uni, &space, &policy, &mut rng).unwrap();
        assert!((got.loss - 3.0 * 6f64.ln()).abs() < 1e-12);
        // Without a pad column the policy cannot be honoured.
        assert!(set_loss(&labels(vec![Triple::PAD]), &uni, &SPACE, &policy, &mut rng).is_err());
    }

    #[test]
    fn k_mismatch() {
        let uni = PredictionSet::from_probs(&[vec![1.0 / 6.0; 6]], &[vec![0.2; 5]], &[vec![0.2; 5]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = set_loss(&labels(vec![Triple::PAD; 2]), &uni, &SPACE, &LossPolicy::default(), &mut rng);
        assert_eq!(err.unwrap_err(), MatchError::KMismatch { labels: 2, preds: 1 });
    }

    #[test]
    fn total_loss_sums_layers() {
        assert_eq!(total_loss(&[1.5]), 1.5);
        assert_eq!(total_loss(&[1.5, 1.5]), 3.0);
        assert_eq!(total_loss(&[0.25, 1.0, 2.5]), 3.75);
    }

    #[test]
    fn random_matching_is_seeded() {
        let gold = vec![Triple::PAD; 6];
        let p = PredictionSet::from_probs(&vec![vec![1.0 / 6.0; 6]; 6], &vec![vec![0.2; 5]; 6], &vec![vec![0.2; 5]; 6]).unwrap();
        let a = assign(&labels(gold.clone()), &p, &SPACE, Matching::Random, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = assign(&labels(gold), &p, &SPACE, Matching::Random, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
