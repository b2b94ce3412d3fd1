//! Templated arithmetic word problems over random expression trees.
//!
//! Trees are rendered in Polish order ("the sum of A and B"), so leaves appear
//! in the text left to right and `N<i>` numbering follows operand usage.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProblemInstance;
use crate::equation::{
    classify_structure, evaluate, ConstantTable, ExprTree, Operand, Operator, Structure, Value,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_instances: usize,
    pub max_internal_nodes: usize,
    /// Probability that a growth step may attach under any leaf (allowing
    /// two-branch parents) rather than extending a chain at the root.
    pub branch_bias: f64,
    pub number_min: i64,
    pub number_max: i64,
    pub seed: u64,
    /// Template family; 0 = plain, 1 = with scenario sentence and units.
    pub template_set: u32,
    /// Chance that a leaf is a constant (1 or 100) instead of a problem number.
    pub constant_prob: f64,
    pub pow_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_instances: 1000,
            max_internal_nodes: 4,
            branch_bias: 0.5,
            number_min: 2,
            number_max: 99,
            seed: 0,
            template_set: 1,
            constant_prob: 0.05,
            pow_prob: 0.04,
        }
    }
}

const NAMES: &[&str] = &[
    "tom", "anna", "lily", "ben", "maria", "sam", "kate", "leo", "nina", "omar", "ruth", "ivan",
    "zoe", "paul", "emma", "jack",
];
const ITEMS: &[&str] = &[
    "apples", "pens", "books", "coins", "cards", "stamps", "shells", "marbles", "cookies", "boxes",
    "tickets", "flowers", "stones", "bottles", "candles", "ribbons",
];
const VERBS: &[&str] = &["counts", "collects", "buys", "sorts", "sells", "packs", "finds", "keeps"];
const PLACES: &[&str] = &["at school", "at home", "in the shop", "in the park", "at the market", "on the farm"];
const QUESTIONS: &[&[&str]] = &[
    &["what", "is"],
    &["find"],
    &["compute"],
    &["how", "much", "is"],
    &["calculate"],
];

fn op_phrases(op: Operator) -> &'static [&'static [&'static str]] {
    match op {
        Operator::Add => &[&["the", "sum", "of"], &["the", "total", "of"], &["adding"]],
        Operator::Sub => &[&["the", "difference", "of"], &["the", "gap", "between"], &["subtracting", "from"]],
        Operator::Mul => &[&["the", "product", "of"], &["multiplying"], &["the", "product", "between"]],
        Operator::Div => &[&["the", "quotient", "of"], &["the", "ratio", "of"], &["dividing"]],
        Operator::Pow => &[&["the", "power", "of"], &["raising"]],
        Operator::Null => &[],
    }
}

/// Tree shape with operators; leaves filled in later.
#[derive(Clone, Debug)]
enum Shape {
    Leaf,
    Node(Operator, Box<Shape>, Box<Shape>),
}

impl Shape {
    fn leaves(&self) -> usize {
        match self {
            Shape::Leaf => 1,
            Shape::Node(_, l, r) => l.leaves() + r.leaves(),
        }
    }

    /// Replaces the `target`-th leaf (in-order) with a fresh internal node.
    fn expand_leaf(&mut self, target: &mut usize) -> bool {
        match self {
            Shape::Leaf => {
                if *target == 0 {
                    *self = Shape::Node(Operator::Add, Box::new(Shape::Leaf), Box::new(Shape::Leaf));
                    true
                } else {
                    *target -= 1;
                    false
                }
            }
            Shape::Node(_, l, r) => l.expand_leaf(target) || r.expand_leaf(target),
        }
    }

    fn assign_ops(&mut self, rng: &mut ChaCha8Rng, pow_prob: f64) {
        if let Shape::Node(op, l, r) = self {
            l.assign_ops(rng, pow_prob);
            r.assign_ops(rng, pow_prob);
            let right_leaf = matches!(**r, Shape::Leaf);
            *op = if right_leaf && rng.gen_bool(pow_prob) {
                Operator::Pow
            } else {
                *[Operator::Add, Operator::Sub, Operator::Mul, Operator::Div]
                    .choose(rng)
                    .expect("non-empty")
            };
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, internal: usize, branch_bias: f64) -> Shape {
    let mut shape = Shape::Node(Operator::Add, Box::new(Shape::Leaf), Box::new(Shape::Leaf));
    for _ in 1..internal {
        if rng.gen_bool(branch_bias) {
            let mut target = rng.gen_range(0..shape.leaves());
            shape.expand_leaf(&mut target);
        } else {
            // Chain growth: the current tree becomes one operand of a new root.
            let old = Box::new(shape);
            shape = if rng.gen_bool(0.5) {
                Shape::Node(Operator::Add, old, Box::new(Shape::Leaf))
            } else {
                Shape::Node(Operator::Add, Box::new(Shape::Leaf), old)
            };
        }
    }
    shape
}

enum LeafKind {
    Number(i64),
    Constant(usize),
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    spec: &'a SynthSpec,
    constants: &'a ConstantTable,
    numbers: Vec<Value>,
    words: Vec<String>,
    unit: &'static str,
}

impl Builder<'_> {
    fn leaf(&mut self, exponent: bool) -> ExprTree {
        let kind = if exponent {
            LeafKind::Number(self.rng.gen_range(2..=3))
        } else if self.rng.gen_bool(self.spec.constant_prob) {
            let name = if self.rng.gen_bool(0.5) { "1" } else { "100" };
            match self.constants.lookup(name) {
                Some(i) => LeafKind::Constant(i),
                None => LeafKind::Number(self.rng.gen_range(self.spec.number_min..=self.spec.number_max)),
            }
        } else {
            LeafKind::Number(self.rng.gen_range(self.spec.number_min..=self.spec.number_max))
        };
        match kind {
            LeafKind::Number(v) => {
                let i = self.numbers.len();
                self.numbers.push(Value::int(v as i128));
                self.words.push(format!("N{i}"));
                if self.spec.template_set > 0 && !exponent && self.rng.gen_bool(0.25) {
                    self.words.push(self.unit.to_string());
                }
                ExprTree::Leaf(Operand::Number(i))
            }
            LeafKind::Constant(i) => {
                let word = match self.constants.name(i) {
                    Some("1") => "one",
                    Some("100") => "hundred",
                    _ => "constant",
                };
                self.words.push(word.to_string());
                ExprTree::Leaf(Operand::Constant(i))
            }
        }
    }

    fn render(&mut self, shape: &Shape) -> ExprTree {
        match shape {
            Shape::Leaf => self.leaf(false),
            Shape::Node(op, l, r) => {
                let phrases = op_phrases(*op);
                let phrase = phrases[self.rng.gen_range(0..phrases.len())];
                self.words.extend(phrase.iter().map(|w| w.to_string()));
                let left = self.render(l);
                self.words.push("and".to_string());
                let right = if *op == Operator::Pow {
                    self.leaf(true)
                } else {
                    self.render(r)
                };
                ExprTree::node(*op, left, right)
            }
        }
    }
}

fn generate_one(rng: &mut ChaCha8Rng, spec: &SynthSpec, constants: &ConstantTable, id: String) -> ProblemInstance {
    let max_nodes = spec.max_internal_nodes.max(1);
    let internal = rng.gen_range(1..=max_nodes);
    let mut shape = random_shape(rng, internal, spec.branch_bias);
    shape.assign_ops(rng, spec.pow_prob);
    loop {
        let unit = *ITEMS.choose(rng).expect("non-empty");
        let mut b = Builder {
            rng,
            spec,
            constants,
            numbers: Vec::new(),
            words: Vec::new(),
            unit,
        };
        let tree = b.render(&shape);
        let (numbers, body) = (b.numbers, b.words);
        let Ok(answer) = evaluate(&tree, &numbers, &constants.values(), &[]) else {
            continue; // zero divisor; redraw the leaves
        };
        let mut text: Vec<String> = Vec::new();
        if spec.template_set > 0 {
            let name = *NAMES.choose(rng).expect("non-empty");
            let verb = *VERBS.choose(rng).expect("non-empty");
            text.extend([name, verb, unit].iter().map(|s| s.to_string()));
            if rng.gen_bool(0.5) {
                let place = *PLACES.choose(rng).expect("non-empty");
                text.extend(place.split(' ').map(str::to_string));
            }
            text.push(".".to_string());
        }
        let question = *QUESTIONS.choose(rng).expect("non-empty");
        text.extend(question.iter().map(|s| s.to_string()));
        text.extend(body);
        text.push("?".to_string());
        return ProblemInstance {
            id,
            text,
            numbers,
            equation: tree.infix_string(constants),
            answer,
        };
    }
}

/// Deterministic given `spec.seed`. Uses the default constant table.
pub fn synth_generate(spec: &SynthSpec) -> Vec<ProblemInstance> {
    let constants = ConstantTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_instances)
        .map(|i| generate_one(&mut rng, spec, &constants, format!("s{}-{i:05}", spec.seed)))
        .collect()
}

/// Fraction of instances per structure class.
pub fn structure_mix(instances: &[ProblemInstance]) -> BTreeMap<Structure, f64> {
    let mut counts: BTreeMap<Structure, usize> = Structure::ALL.iter().map(|s| (*s, 0)).collect();
    let mut constants = ConstantTable::default();
    for inst in instances {
        if let Ok(tree) = inst.tree(&mut constants) {
            *counts.entry(classify_structure(&tree)).or_default() += 1;
        }
    }
    let n = instances.len().max(1) as f64;
    counts.into_iter().map(|(k, v)| (k, v as f64 / n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, max_nodes: usize, bias: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n_instances: n,
            max_internal_nodes: max_nodes,
            branch_bias: bias,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn single_node_corpus_is_all_single() {
        let data = synth_generate(&spec(200, 1, 0.5, 1));
        assert_eq!(structure_mix(&data)[&Structure::Single], 1.0);
    }

    #[test]
    fn zero_branch_bias_has_no_trees() {
        let data = synth_generate(&spec(500, 4, 0.0, 2));
        assert_eq!(structure_mix(&data)[&Structure::Tree], 0.0);
        assert!(structure_mix(&data)[&Structure::Chain] > 0.0);
    }

    #[test]
    fn seeded_corpora_identical() {
        assert_eq!(synth_generate(&spec(100, 4, 0.5, 3)), synth_generate(&spec(100, 4, 0.5, 3)));
        assert_ne!(synth_generate(&spec(100, 4, 0.5, 3)), synth_generate(&spec(100, 4, 0.5, 4)));
    }

    #[test]
    fn generated_instances_validate() {
        let data = synth_generate(&spec(300, 4, 0.5, 5));
        let mut c = ConstantTable::default();
        for inst in &data {
            inst.validate(&mut c).unwrap();
            let placeholders = inst.text.iter().filter(|t| t.starts_with('N')).count();
            assert_eq!(placeholders, inst.numbers.len());
        }
    }

    #[test]
    fn all_structures_with_branching() {
        let data = synth_generate(&spec(1000, 4, 0.5, 6));
        let mix = structure_mix(&data);
        assert!(Structure::ALL.iter().all(|s| mix[s] > 0.0), "{mix:?}");
    }
}
