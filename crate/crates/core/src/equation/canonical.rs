use serde::{Deserialize, Serialize};

use super::ExprTree;

/// Equation shape classes used for the accuracy breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Structure {
    Single,
    Chain,
    Tree,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Single, Structure::Chain, Structure::Tree];

    pub fn name(self) -> &'static str {
        match self {
            Structure::Single => "single",
            Structure::Chain => "chain",
            Structure::Tree => "tree",
        }
    }
}

fn sort_key(t: &ExprTree) -> String {
    t.to_prefix()
        .iter()
        .map(|tok| tok.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sorts the children of every `+`/`*` node by their prefix serialization.
pub fn canonicalize(tree: &ExprTree) -> ExprTree {
    match tree {
        ExprTree::Leaf(o) => ExprTree::Leaf(*o),
        ExprTree::Node { op, left, right } => {
            let mut l = canonicalize(left);
            let mut r = canonicalize(right);
            if op.is_commutative() && sort_key(&r) < sort_key(&l) {
                std::mem::swap(&mut l, &mut r);
            }
            ExprTree::node(*op, l, r)
        }
    }
}

/// Structural equality modulo commutativity of addition and multiplication.
pub fn canonical_equal(a: &ExprTree, b: &ExprTree) -> bool {
    canonicalize(a) == canonicalize(b)
}

pub fn classify_structure(tree: &ExprTree) -> Structure {
    if tree.internal_count() <= 1 {
        return Structure::Single;
    }
    fn chain_like(t: &ExprTree) -> bool {
        match t {
            ExprTree::Leaf(_) => true,
            ExprTree::Node { left, right, .. } => {
                if !left.is_leaf() && !right.is_leaf() {
                    return false;
                }
                chain_like(left) && chain_like(right)
            }
        }
    }
    if chain_like(tree) {
        Structure::Chain
    } else {
        Structure::Tree
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equation::{parse_infix, ConstantTable};

    fn p(s: &str) -> ExprTree {
        parse_infix(s, 10, &mut ConstantTable::default()).unwrap()
    }

    #[test]
    fn commutative_swap() {
        assert!(canonical_equal(&p("N0+N1"), &p("N1+N0")));
        assert!(!canonical_equal(&p("N0-N1"), &p("N1-N0")));
        assert!(canonical_equal(&p("(N0*N1)+(N2*N3)"), &p("(N3*N2)+(N0*N1)")));
        assert!(!canonical_equal(&p("N0/N1*N2"), &p("N2*N1/N0")));
    }

    #[test]
    fn structures() {
        assert_eq!(classify_structure(&p("N0")), Structure::Single);
        assert_eq!(classify_structure(&p("N0+N1")), Structure::Single);
        assert_eq!(classify_structure(&p("(N0-N1)/N2")), Structure::Chain);
        assert_eq!(classify_structure(&p("N0*N1+N2*N3")), Structure::Tree);
        assert_eq!(classify_structure(&p("N0*(N1+(N2-N3))")), Structure::Chain);
    }
}
