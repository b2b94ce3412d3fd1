//! Equation trees over problem numbers, constants and intermediate results.
//!
//! Infix grammar (whitespace insignificant):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?          (right associative)
//! atom    := 'N' digits | 'v' digits | literal | 'pi' | '(' expr ')'
//! ```
//!
//! Prefix form is the pre-order token list, space separated: `+ * N0 N1 * N2 N3`.

mod canonical;
mod eval;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use canonical::{canonical_equal, canonicalize, classify_structure, Structure};
pub use eval::{evaluate, EvalError, Value};
pub use parse::{parse_decimal, parse_infix, parse_prefix, ParseError};

pub type Rational = num_rational::Ratio<i128>;

/// Operator classes predicted by the decoder. `Null` is the padding / stop label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Null,
}

impl Operator {
    /// All six classes in embedding-row order.
    pub const ALL: [Operator; 6] = [
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Div,
        Operator::Pow,
        Operator::Null,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Operator> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Add => "+",
            Operator::Sub => "-",
            Operator::Mul => "*",
            Operator::Div => "/",
            Operator::Pow => "^",
            Operator::Null => "None",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Operator> {
        Some(match s {
            "+" => Operator::Add,
            "-" => Operator::Sub,
            "*" => Operator::Mul,
            "/" => Operator::Div,
            "^" => Operator::Pow,
            _ => return None,
        })
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, Operator::Add | Operator::Mul)
    }

    pub(crate) fn precedence(self) -> u8 {
        match self {
            Operator::Add | Operator::Sub => 1,
            Operator::Mul | Operator::Div => 2,
            Operator::Pow => 3,
            Operator::Null => 0,
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// A leaf value reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operand {
    /// 0-based index into the problem's numbers (`N<i>`).
    Number(usize),
    /// Index into the constant table.
    Constant(usize),
    /// Result of the i-th expression created so far (`v<i>`).
    Result(usize),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Number(i) => write!(f, "N{i}"),
            Operand::Constant(i) => write!(f, "C{i}"),
            Operand::Result(i) => write!(f, "v{i}"),
        }
    }
}

/// Named constants available to equations. Defaults to `{1, pi, 100}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantTable {
    entries: Vec<(String, Value)>,
}

impl Default for ConstantTable {
    fn default() -> Self {
        ConstantTable {
            entries: vec![
                ("1".to_string(), Value::Exact(Rational::from_integer(1))),
                ("pi".to_string(), Value::Real(std::f64::consts::PI)),
                ("100".to_string(), Value::Exact(Rational::from_integer(100))),
            ],
        }
    }
}

impl ConstantTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn empty() -> Self {
        ConstantTable { entries: vec![] }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> Option<&str> {
        self.entries.get(i).map(|(n, _)| n.as_str())
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Index of `name`, appending it when missing.
    pub fn intern(&mut self, name: &str, value: Value) -> usize {
        match self.lookup(name) {
            Some(i) => i,
            None => {
                self.entries.push((name.to_string(), value));
                self.entries.len() - 1
            }
        }
    }

    pub fn values(&self) -> Vec<Value> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Ensures the zero constant used for unary minus exists and returns its index.
    pub fn zero(&mut self) -> usize {
        self.intern("0", Value::Exact(Rational::from_integer(0)))
    }
}

/// Binary expression tree. Internal nodes never carry [`Operator::Null`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ExprTree {
    Leaf(Operand),
    Node {
        op: Operator,
        left: Box<ExprTree>,
        right: Box<ExprTree>,
    },
}

impl ExprTree {
    pub fn leaf(operand: Operand) -> Self {
        ExprTree::Leaf(operand)
    }

    pub fn num(i: usize) -> Self {
        ExprTree::Leaf(Operand::Number(i))
    }

    /// Builds an internal node. Panics on `Operator::Null`.
    pub fn node(op: Operator, left: ExprTree, right: ExprTree) -> Self {
        assert!(op != Operator::Null, "None cannot label a tree node");
        ExprTree::Node {
            op,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn internal_count(&self) -> usize {
        match self {
            ExprTree::Leaf(_) => 0,
            ExprTree::Node { left, right, .. } => 1 + left.internal_count() + right.internal_count(),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            ExprTree::Leaf(_) => 1,
            ExprTree::Node { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    /// Height counted in internal-node levels; a leaf has height 0.
    pub fn height(&self) -> usize {
        match self {
            ExprTree::Leaf(_) => 0,
            ExprTree::Node { left, right, .. } => 1 + left.height().max(right.height()),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, ExprTree::Leaf(_))
    }

    /// Pre-order token sequence.
    pub fn to_prefix(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(2 * self.internal_count() + 1);
        fn walk(t: &ExprTree, out: &mut Vec<Token>) {
            match t {
                ExprTree::Leaf(o) => out.push(Token::Operand(*o)),
                ExprTree::Node { op, left, right } => {
                    out.push(Token::Op(*op));
                    walk(left, out);
                    walk(right, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }

    /// Infix tokens with the minimal parentheses needed for an exact re-parse.
    pub fn to_infix(&self) -> Vec<Token> {
        let mut out = Vec::new();
        fn walk(t: &ExprTree, out: &mut Vec<Token>) {
            match t {
                ExprTree::Leaf(o) => out.push(Token::Operand(*o)),
                ExprTree::Node { op, left, right } => {
                    let p = op.precedence();
                    let right_assoc = *op == Operator::Pow;
                    let wrap_left = match &**left {
                        ExprTree::Node { op: lop, .. } => {
                            lop.precedence() < p || (right_assoc && lop.precedence() == p)
                        }
                        _ => false,
                    };
                    let wrap_right = match &**right {
                        ExprTree::Node { op: rop, .. } => {
                            rop.precedence() < p || (!right_assoc && rop.precedence() == p)
                        }
                        _ => false,
                    };
                    emit(left, wrap_left, out);
                    out.push(Token::Op(*op));
                    emit(right, wrap_right, out);
                }
            }
        }
        fn emit(t: &ExprTree, wrap: bool, out: &mut Vec<Token>) {
            if wrap {
                out.push(Token::LParen);
                walk(t, out);
                out.push(Token::RParen);
            } else {
                walk(t, out);
            }
        }
        walk(self, &mut out);
        out
    }

    /// Space-separated prefix string, constants rendered by table name.
    pub fn prefix_string(&self, constants: &ConstantTable) -> String {
        render(&self.to_prefix(), constants, " ")
    }

    /// Infix string, constants rendered by table name.
    pub fn infix_string(&self, constants: &ConstantTable) -> String {
        render(&self.to_infix(), constants, "")
    }

    /// Replaces `Result` leaves with the given subtrees.
    pub fn substitute_results(&self, results: &[ExprTree]) -> Option<ExprTree> {
        Some(match self {
            ExprTree::Leaf(Operand::Result(i)) => results.get(*i)?.clone(),
            ExprTree::Leaf(o) => ExprTree::Leaf(*o),
            ExprTree::Node { op, left, right } => ExprTree::node(
                *op,
                left.substitute_results(results)?,
                right.substitute_results(results)?,
            ),
        })
    }
}

/// Serialization token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Op(Operator),
    Operand(Operand),
    LParen,
    RParen,
}

impl Token {
    pub fn render(&self, constants: &ConstantTable) -> String {
        match self {
            Token::Op(op) => op.symbol().to_string(),
            Token::Operand(Operand::Constant(i)) => constants
                .name(*i)
                .map(str::to_string)
                .unwrap_or_else(|| format!("C{i}")),
            Token::Operand(o) => o.to_string(),
            Token::LParen => "(".to_string(),
            Token::RParen => ")".to_string(),
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Op(op) => write!(f, "{op}"),
            Token::Operand(o) => write!(f, "{o}"),
            Token::LParen => f.write_str("("),
            Token::RParen => f.write_str(")"),
        }
    }
}

fn render(tokens: &[Token], constants: &ConstantTable, sep: &str) -> String {
    tokens
        .iter()
        .map(|t| t.render(constants))
        .collect::<Vec<_>>()
        .join(sep)
}

/// One solving step `(left, op, right)`, or a padding step when `op` is `Null`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub left: Option<Operand>,
    pub op: Operator,
    pub right: Option<Operand>,
}

impl Triple {
    pub fn new(left: Operand, op: Operator, right: Operand) -> Self {
        assert!(op != Operator::Null);
        Triple {
            left: Some(left),
            op,
            right: Some(right),
        }
    }

    pub const PAD: Triple = Triple {
        left: None,
        op: Operator::Null,
        right: None,
    };

    pub fn is_pad(&self) -> bool {
        self.op == Operator::Null
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.left, self.right) {
            (Some(l), Some(r)) if !self.is_pad() => write!(f, "{l} {} {r}", self.op),
            _ => f.write_str("None"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> ExprTree {
        ExprTree::node(
            Operator::Add,
            ExprTree::node(Operator::Mul, ExprTree::num(0), ExprTree::num(1)),
            ExprTree::node(Operator::Mul, ExprTree::num(2), ExprTree::num(3)),
        )
    }

    #[test]
    fn prefix_of_two_products() {
        let c = ConstantTable::default();
        assert_eq!(fig1().prefix_string(&c), "+ * N0 N1 * N2 N3");
        assert_eq!(fig1().to_prefix().len(), 7);
    }

    #[test]
    fn prefix_of_leaf() {
        assert_eq!(ExprTree::num(0).to_prefix(), vec![Token::Operand(Operand::Number(0))]);
    }

    #[test]
    fn prefix_of_chain() {
        let t = ExprTree::node(
            Operator::Div,
            ExprTree::node(Operator::Sub, ExprTree::num(0), ExprTree::num(1)),
            ExprTree::num(2),
        );
        let c = ConstantTable::default();
        assert_eq!(t.prefix_string(&c), "/ - N0 N1 N2");
        assert_eq!(t.infix_string(&c), "(N0-N1)/N2");
        assert_eq!(t.to_infix().len(), 7);
    }

    #[test]
    fn infix_parens_for_right_nested_same_precedence() {
        let t = ExprTree::node(
            Operator::Add,
            ExprTree::num(0),
            ExprTree::node(Operator::Add, ExprTree::num(1), ExprTree::num(2)),
        );
        assert_eq!(t.infix_string(&ConstantTable::default()), "N0+(N1+N2)");
        let p = ExprTree::node(
            Operator::Pow,
            ExprTree::node(Operator::Pow, ExprTree::num(0), ExprTree::num(1)),
            ExprTree::num(2),
        );
        assert_eq!(p.infix_string(&ConstantTable::default()), "(N0^N1)^N2");
    }

    #[test]
    #[should_panic]
    fn null_operator_rejected_in_tree() {
        ExprTree::node(Operator::Null, ExprTree::num(0), ExprTree::num(1));
    }

    #[test]
    fn operator_table_has_six_rows() {
        assert_eq!(Operator::ALL.len(), Operator::COUNT);
        for (i, op) in Operator::ALL.iter().enumerate() {
            assert_eq!(op.index(), i);
        }
    }

    #[test]
    fn constant_table_zero_on_demand() {
        let mut c = ConstantTable::default();
        assert_eq!(c.len(), 3);
        let z = c.zero();
        assert_eq!(z, 3);
        assert_eq!(c.zero(), 3);
    }

    #[test]
    fn heights() {
        assert_eq!(ExprTree::num(0).height(), 0);
        assert_eq!(fig1().height(), 2);
        assert_eq!(fig1().internal_count(), 3);
        assert_eq!(fig1().leaf_count(), 4);
    }
}
