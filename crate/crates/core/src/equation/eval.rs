use std::fmt;

use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ExprTree, Operand, Operator, Rational};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("unresolved operand {0}")]
    UnresolvedOperand(Operand),
}

/// Exact rational when possible, double otherwise (irrational constants,
/// fractional powers, overflow).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Value {
    Exact(Rational),
    Real(f64),
}

impl Value {
    pub fn int(n: i128) -> Self {
        Value::Exact(Rational::from_integer(n))
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Value::Exact(r) => ratio_to_f64(r),
            Value::Real(x) => *x,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Value::Exact(r) => r.is_zero(),
            Value::Real(x) => *x == 0.0,
        }
    }

    /// Equality at relative tolerance `rel`; exact values compare exactly.
    pub fn approx_eq(&self, other: &Value, rel: f64) -> bool {
        match (self, other) {
            (Value::Exact(a), Value::Exact(b)) => a == b,
            _ => {
                let (a, b) = (self.to_f64(), other.to_f64());
                if !a.is_finite() || !b.is_finite() {
                    return false;
                }
                (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
            }
        }
    }

    /// `num/den` for exact values, shortest round-trip decimal for reals.
    pub fn to_record_string(&self) -> String {
        match self {
            Value::Exact(r) if *r.denom() == 1 => r.numer().to_string(),
            Value::Exact(r) => format!("{}/{}", r.numer(), r.denom()),
            Value::Real(x) => format!("{x:?}"),
        }
    }

    /// Inverse of [`Value::to_record_string`]; decimal literals become exact.
    pub fn parse_record(s: &str) -> Option<Value> {
        if let Some(r) = super::parse::parse_decimal(s) {
            return Some(Value::Exact(r));
        }
        let x: f64 = s.trim().parse().ok()?;
        x.is_finite().then_some(Value::Real(x))
    }

    pub fn apply(op: Operator, a: Value, b: Value) -> Result<Value, EvalError> {
        if matches!(op, Operator::Div) && b.is_zero() {
            return Err(EvalError::DivisionByZero);
        }
        if let (Value::Exact(x), Value::Exact(y)) = (a, b) {
            let exact = match op {
                Operator::Add => x.checked_add(&y),
                Operator::Sub => x.checked_sub(&y),
                Operator::Mul => x.checked_mul(&y),
                Operator::Div => x.checked_div(&y),
                Operator::Pow => exact_pow(x, y)?,
                Operator::Null => unreachable!("None is never applied"),
            };
            if let Some(r) = exact {
                return Ok(Value::Exact(r));
            }
        }
        let (x, y) = (a.to_f64(), b.to_f64());
        let r = match op {
            Operator::Add => x + y,
            Operator::Sub => x - y,
            Operator::Mul => x * y,
            Operator::Div => x / y,
            Operator::Pow => {
                if x == 0.0 && y < 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                x.powf(y)
            }
            Operator::Null => unreachable!("None is never applied"),
        };
        Ok(Value::Real(r))
    }
}

fn ratio_to_f64(r: &Rational) -> f64 {
    r.to_f64()
        .unwrap_or_else(|| *r.numer() as f64 / *r.denom() as f64)
}

/// Integer exponents stay exact; `None` means "fall back to reals".
fn exact_pow(base: Rational, exp: Rational) -> Result<Option<Rational>, EvalError> {
    if *exp.denom() != 1 {
        return Ok(None);
    }
    let e = *exp.numer();
    if base.is_zero() && e < 0 {
        return Err(EvalError::DivisionByZero);
    }
    if e.unsigned_abs() > 256 {
        return Ok(None);
    }
    let mut acc = Rational::from_integer(1);
    for _ in 0..e.unsigned_abs() {
        match acc.checked_mul(&base) {
            Some(v) => acc = v,
            None => return Ok(None),
        }
    }
    Ok(Some(if e < 0 { acc.recip() } else { acc }))
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_record_string())
    }
}

impl From<Value> for String {
    fn from(v: Value) -> String {
        v.to_record_string()
    }
}

impl TryFrom<String> for Value {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Value::parse_record(&s).ok_or_else(|| format!("invalid number `{s}`"))
    }
}

impl From<Rational> for Value {
    fn from(r: Rational) -> Self {
        Value::Exact(r)
    }
}

/// Evaluates `tree` with operand lookups into the three tables.
pub fn evaluate(
    tree: &ExprTree,
    numbers: &[Value],
    constants: &[Value],
    results: &[Value],
) -> Result<Value, EvalError> {
    match tree {
        ExprTree::Leaf(o) => {
            let slot = match o {
                Operand::Number(i) => numbers.get(*i),
                Operand::Constant(i) => constants.get(*i),
                Operand::Result(i) => results.get(*i),
            };
            slot.copied().ok_or(EvalError::UnresolvedOperand(*o))
        }
        ExprTree::Node { op, left, right } => {
            let a = evaluate(left, numbers, constants, results)?;
            let b = evaluate(right, numbers, constants, results)?;
            Value::apply(*op, a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equation::{parse_infix, ConstantTable};

    fn ints(v: &[i128]) -> Vec<Value> {
        v.iter().map(|&n| Value::int(n)).collect()
    }

    #[test]
    fn worked_example_is_490() {
        let mut c = ConstantTable::default();
        let t = parse_infix("N0*N1+N2*N3", 4, &mut c).unwrap();
        let v = evaluate(&t, &ints(&[50, 5, 60, 4]), &c.values(), &[]).unwrap();
        assert_eq!(v, Value::int(490));
    }

    #[test]
    fn leaf_identity() {
        let v = evaluate(&ExprTree::num(0), &ints(&[7]), &[], &[]).unwrap();
        assert_eq!(v, Value::int(7));
    }

    #[test]
    fn rational_closure() {
        let nums = vec![Value::Exact(Rational::new(1, 3)), Value::Exact(Rational::new(1, 6))];
        let mut c = ConstantTable::default();
        let t = parse_infix("N0+N1", 2, &mut c).unwrap();
        assert_eq!(
            evaluate(&t, &nums, &[], &[]).unwrap(),
            Value::Exact(Rational::new(1, 2))
        );
    }

    #[test]
    fn division_by_zero() {
        let mut c = ConstantTable::default();
        let t = parse_infix("N0/(N1-N1)", 2, &mut c).unwrap();
        assert_eq!(
            evaluate(&t, &ints(&[1, 2]), &[], &[]),
            Err(EvalError::DivisionByZero)
        );
    }

    #[test]
    fn unresolved() {
        let t = ExprTree::num(3);
        assert_eq!(
            evaluate(&t, &ints(&[1]), &[], &[]),
            Err(EvalError::UnresolvedOperand(Operand::Number(3)))
        );
    }

    #[test]
    fn powers() {
        let mut c = ConstantTable::default();
        let t = parse_infix("N0^N1", 2, &mut c).unwrap();
        assert_eq!(evaluate(&t, &ints(&[2, 10]), &[], &[]).unwrap(), Value::int(1024));
        assert_eq!(
            evaluate(&t, &ints(&[2, -2]), &[], &[]).unwrap(),
            Value::Exact(Rational::new(1, 4))
        );
        let half = vec![Value::int(9), Value::Exact(Rational::new(1, 2))];
        match evaluate(&t, &half, &[], &[]).unwrap() {
            Value::Real(x) => assert!((x - 3.0).abs() < 1e-12),
            other => panic!("expected real, got {other:?}"),
        }
    }

    #[test]
    fn pi_is_real() {
        let mut c = ConstantTable::default();
        let t = parse_infix("N0*pi", 1, &mut c).unwrap();
        let v = evaluate(&t, &ints(&[2]), &c.values(), &[]).unwrap();
        assert!(matches!(v, Value::Real(_)));
        assert!((v.to_f64() - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn record_strings() {
        for s in ["490", "-3/4", "1/2"] {
            assert_eq!(Value::parse_record(s).unwrap().to_record_string(), s);
        }
        assert_eq!(Value::parse_record("0.25"), Some(Value::Exact(Rational::new(1, 4))));
        let r = Value::Real(0.1 + 0.2);
        assert_eq!(Value::parse_record(&r.to_record_string()).unwrap().to_f64(), r.to_f64());
        assert!(Value::int(3).approx_eq(&Value::Real(3.0000001), 1e-6));
        assert!(!Value::int(3).approx_eq(&Value::int(4), 1e-6));
    }
}
