//! Gold equation trees to per-layer label sets, plus decoding-step statistics.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equation::{evaluate, EvalError, ExprTree, Operand, Triple, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("query count K must be at least 1")]
    ZeroK,
    #[error("empty corpus")]
    EmptyCorpus,
}

/// The K gold triples for one decoding layer, valid triples first, then `None` padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub layer_index: usize,
    pub triples: Vec<Triple>,
}

impl LabelSet {
    pub fn valid(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter().filter(|t| !t.is_pad())
    }

    pub fn valid_count(&self) -> usize {
        self.valid().count()
    }

    pub fn k(&self) -> usize {
        self.triples.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompiledLabels {
    pub layers: Vec<LabelSet>,
    /// One entry per round that had more ready nodes than K.
    pub warnings: Vec<String>,
}

impl CompiledLabels {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn triple_count(&self) -> usize {
        self.layers.iter().map(LabelSet::valid_count).sum()
    }

    pub fn overflowed(&self) -> bool {
        !self.warnings.is_empty()
    }
}

struct Internal {
    op: crate::equation::Operator,
    left: Child,
    right: Child,
}

enum Child {
    Leaf(Operand),
    Node(usize),
}

fn flatten(tree: &ExprTree, nodes: &mut Vec<Internal>) -> Child {
    match tree {
        ExprTree::Leaf(o) => Child::Leaf(*o),
        ExprTree::Node { op, left, right } => {
            let id = nodes.len();
            nodes.push(Internal {
                op: *op,
                left: Child::Leaf(Operand::Number(0)),
                right: Child::Leaf(Operand::Number(0)),
            });
            let l = flatten(left, nodes);
            let r = flatten(right, nodes);
            nodes[id].left = l;
            nodes[id].right = r;
            Child::Node(id)
        }
    }
}

/// Gathers ready internal nodes round by round into K-sized, None-padded sets.
///
/// Nodes are numbered in prefix order. A node is ready once both children are
/// leaves or were emitted in an earlier round. When more than K nodes are ready
/// the first K in prefix order are emitted and the rest wait for the next round.
/// Emitted nodes become `Operand::Result` with a global index in emission order.
pub fn compile_label_sets(tree: &ExprTree, k: usize) -> Result<CompiledLabels, LabelError> {
    if k == 0 {
        return Err(LabelError::ZeroK);
    }
    let mut nodes = Vec::new();
    flatten(tree, &mut nodes);
    let mut result_of: Vec<Option<usize>> = vec![None; nodes.len()];
    let mut emitted = 0usize;
    let mut layers = Vec::new();
    let mut warnings = Vec::new();

    let resolve = |c: &Child, result_of: &[Option<usize>]| -> Option<Operand> {
        match c {
            Child::Leaf(o) => Some(*o),
            Child::Node(id) => result_of[*id].map(Operand::Result),
        }
    };

    while emitted < nodes.len() {
        let ready: Vec<usize> = (0..nodes.len())
            .filter(|&id| {
                result_of[id].is_none()
                    && resolve(&nodes[id].left, &result_of).is_some()
                    && resolve(&nodes[id].right, &result_of).is_some()
            })
            .collect();
        debug_assert!(!ready.is_empty());
        if ready.len() > k {
            warnings.push(format!(
                "layer {}: {} ready expressions exceed K={k}; {} deferred",
                layers.len(),
                ready.len(),
                ready.len() - k
            ));
        }
        let take = &ready[..ready.len().min(k)];
        // Resolve every operand before assigning this round's results so that no
        // triple refers to a sibling from its own layer.
        let mut triples: Vec<Triple> = take
            .iter()
            .map(|&id| {
                let n = &nodes[id];
                Triple::new(
                    resolve(&n.left, &result_of).expect("ready"),
                    n.op,
                    resolve(&n.right, &result_of).expect("ready"),
                )
            })
            .collect();
        for &id in take {
            result_of[id] = Some(emitted);
            emitted += 1;
        }
        triples.resize(k, Triple::PAD);
        layers.push(LabelSet {
            layer_index: layers.len(),
            triples,
        });
    }
    Ok(CompiledLabels { layers, warnings })
}

/// Evaluates compiled layers in order; the value of the last created result.
pub fn replay(
    layers: &[LabelSet],
    numbers: &[Value],
    constants: &[Value],
) -> Result<Option<Value>, EvalError> {
    let mut results: Vec<Value> = Vec::new();
    for set in layers {
        let mut produced = Vec::new();
        for t in set.valid() {
            let expr = ExprTree::node(
                t.op,
                ExprTree::Leaf(t.left.expect("valid triple")),
                ExprTree::Leaf(t.right.expect("valid triple")),
            );
            produced.push(evaluate(&expr, numbers, constants, &results)?);
        }
        results.extend(produced);
    }
    Ok(results.last().copied())
}

/// Rebuilds the tree rooted at the last created result of a triple list.
pub fn triples_to_tree(triples: &[Triple]) -> Option<ExprTree> {
    let mut built: Vec<ExprTree> = Vec::with_capacity(triples.len());
    for t in triples.iter().filter(|t| !t.is_pad()) {
        let leaf = |o: Operand| match o {
            Operand::Result(i) => built.get(i).cloned(),
            other => Some(ExprTree::Leaf(other)),
        };
        let l = leaf(t.left?)?;
        let r = leaf(t.right?)?;
        built.push(ExprTree::node(t.op, l, r));
    }
    built.pop()
}

/// Decoding-step counts of one equation for four generation families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStats {
    /// Infix tokens, parentheses included.
    pub seq2seq_steps: usize,
    /// Prefix tokens.
    pub seq2tree_steps: usize,
    /// Expressions (internal nodes).
    pub seq2exp_steps: usize,
    /// Non-empty layers.
    pub exprtree_steps: usize,
}

pub fn step_stats(tree: &ExprTree, k: usize) -> Result<StepStats, LabelError> {
    Ok(StepStats {
        seq2seq_steps: tree.to_infix().len(),
        seq2tree_steps: tree.to_prefix().len(),
        seq2exp_steps: tree.internal_count(),
        exprtree_steps: compile_label_sets(tree, k)?.layer_count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub method: String,
    pub avg: f64,
    pub std: f64,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub instances: usize,
    pub rows: Vec<StepRow>,
}

impl StepReport {
    pub fn row(&self, method: &str) -> Option<&StepRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,avg,std,max\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.4},{:.4},{}\n", r.method, r.avg, r.std, r.max));
        }
        s
    }
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>9} {:>9} {:>6}", "method", "avg", "std", "max")?;
        for r in &self.rows {
            writeln!(f, "{:<10} {:>9.3} {:>9.3} {:>6}", r.method, r.avg, r.std, r.max)?;
        }
        write!(f, "({} instances)", self.instances)
    }
}

pub const STEP_METHODS: [&str; 4] = ["seq2seq", "seq2tree", "seq2exp", "exprtree"];

/// Mean, population standard deviation and max per method family.
pub fn corpus_step_report<'a>(
    trees: impl IntoIterator<Item = &'a ExprTree>,
    k: usize,
) -> Result<StepReport, LabelError> {
    let stats: Vec<StepStats> = trees
        .into_iter()
        .map(|t| step_stats(t, k))
        .collect::<Result<_, _>>()?;
    if stats.is_empty() {
        return Err(LabelError::EmptyCorpus);
    }
    let columns: [Vec<usize>; 4] = [
        stats.iter().map(|s| s.seq2seq_steps).collect(),
        stats.iter().map(|s| s.seq2tree_steps).collect(),
        stats.iter().map(|s| s.seq2exp_steps).collect(),
        stats.iter().map(|s| s.exprtree_steps).collect(),
    ];
    let rows = STEP_METHODS
        .iter()
        .zip(columns.iter())
        .map(|(name, col)| {
            let n = col.len() as f64;
            let avg = col.iter().sum::<usize>() as f64 / n;
            let var = col.iter().map(|&x| (x as f64 - avg).powi(2)).sum::<f64>() / n;
            StepRow {
                method: name.to_string(),
                avg,
                std: var.sqrt(),
                max: col.iter().copied().max().unwrap_or(0),
            }
        })
        .collect();
    Ok(StepReport {
        instances: stats.len(),
        rows,
    })
}
