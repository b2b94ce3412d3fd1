use proptest::prelude::*;

use exprtree::equation::{evaluate, parse_infix, parse_prefix, ConstantTable, ExprTree, Operand, Operator, Value};
use exprtree::labels::{compile_label_sets, replay};
use exprtree::matching::{hungarian, Assignment, CostMatrix};

const N_NUMBERS: usize = 6;

fn operand() -> impl Strategy<Value = Operand> {
    prop_oneof![
        4 => (0..N_NUMBERS).prop_map(Operand::Number),
        1 => prop_oneof![Just(Operand::Constant(0)), Just(Operand::Constant(2))],
    ]
}

fn tree(ops: &'static [Operator]) -> impl Strategy<Value = ExprTree> {
    operand().prop_map(ExprTree::Leaf).prop_recursive(5, 24, 2, move |inner| {
        (prop::sample::select(ops), inner.clone(), inner)
            .prop_map(|(op, l, r)| ExprTree::node(op, l, r))
    })
}

const FIELD_OPS: &[Operator] = &[Operator::Add, Operator::Sub, Operator::Mul];
const ALL_OPS: &[Operator] = &[Operator::Add, Operator::Sub, Operator::Mul, Operator::Div, Operator::Pow];

fn numbers() -> Vec<Value> {
    (0..N_NUMBERS as i128).map(|i| Value::int(3 * i + 2)).collect()
}

proptest! {
    #[test]
    fn prefix_round_trips(t in tree(ALL_OPS)) {
        let mut c = ConstantTable::default();
        let text = t.prefix_string(&c);
        prop_assert_eq!(parse_prefix(&text, N_NUMBERS, &mut c).unwrap(), t);
    }

    #[test]
    fn infix_preserves_value(t in tree(FIELD_OPS)) {
        let mut c = ConstantTable::default();
        let text = t.infix_string(&c);
        let back = parse_infix(&text, N_NUMBERS, &mut c).unwrap();
        let v = c.values();
        prop_assert_eq!(evaluate(&back, &numbers(), &v, &[]).unwrap(), evaluate(&t, &numbers(), &v, &[]).unwrap());
    }

    #[test]
    fn compiled_layers_replay_and_respect_order(t in tree(FIELD_OPS), k in 1usize..7) {
        prop_assume!(!t.is_leaf());
        let c = ConstantTable::default();
        let compiled = compile_label_sets(&t, k).unwrap();
        let v = c.values();
        prop_assert_eq!(
            replay(&compiled.layers, &numbers(), &v).unwrap(),
            Some(evaluate(&t, &numbers(), &v, &[]).unwrap())
        );
        prop_assert_eq!(compiled.triple_count(), t.internal_count());
        let mut created = 0;
        for set in &compiled.layers {
            prop_assert_eq!(set.k(), k);
            for tr in set.valid() {
                for o in [tr.left.unwrap(), tr.right.unwrap()] {
                    if let Operand::Result(i) = o {
                        prop_assert!(i < created, "result {} used in the layer that creates it", i);
                    }
                }
            }
            created += set.valid_count();
        }
    }

    #[test]
    fn more_queries_never_add_layers(t in tree(FIELD_OPS), k in 1usize..6) {
        prop_assume!(!t.is_leaf());
        let a = compile_label_sets(&t, k).unwrap().layer_count();
        let b = compile_label_sets(&t, k + 1).unwrap().layer_count();
        prop_assert!(b <= a);
        prop_assert!(a >= t.height());
    }

    #[test]
    fn hungarian_beats_any_permutation(
        k in 1usize..8,
        cells in prop::collection::vec(-10.0f64..10.0, 64),
        perm_seed in any::<u64>(),
    ) {
        let rows: Vec<Vec<f64>> = (0..k).map(|i| cells[i * 8..i * 8 + k].to_vec()).collect();
        let cost = CostMatrix::from_rows(&rows).unwrap();
        let best = hungarian(&cost).unwrap();
        let mut seen = best.0.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
        // A pseudo-random permutation by rotation and reversal.
        let shift = (perm_seed as usize) % k;
        let mut other: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
        if perm_seed & 1 == 1 {
            other.reverse();
        }
        prop_assert!(best.total(&cost) <= Assignment(other).total(&cost) + 1e-9);
    }
}
