use std::iter::Peekable;
use std::vec::IntoIter;

use thiserror::Error;

use super::{ConstantTable, ExprTree, Operand, Operator, Rational};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("empty equation")]
    EmptyInput,
    #[error("unbalanced parentheses")]
    UnbalancedParens,
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("number index N{index} out of range ({n_numbers} numbers)")]
    IndexOutOfRange { index: usize, n_numbers: usize },
    #[error("syntax error: {0}")]
    Syntax(String),
}

#[derive(Clone, Debug, PartialEq)]
enum Lex {
    Op(Operator),
    Leaf(Operand),
    LParen,
    RParen,
}

fn lex_word(
    word: &str,
    n_numbers: usize,
    constants: &mut ConstantTable,
) -> Result<Operand, ParseError> {
    let unknown = || ParseError::UnknownToken(word.to_string());
    if let Some(digits) = word.strip_prefix('N') {
        let index: usize = digits.parse().map_err(|_| unknown())?;
        if index >= n_numbers {
            return Err(ParseError::IndexOutOfRange { index, n_numbers });
        }
        return Ok(Operand::Number(index));
    }
    if let Some(digits) = word.strip_prefix('v') {
        let index: usize = digits.parse().map_err(|_| unknown())?;
        return Ok(Operand::Result(index));
    }
    if matches!(word, "pi" | "PI" | "π") {
        return constants.lookup("pi").map(Operand::Constant).ok_or_else(unknown);
    }
    if let Some(i) = constants.lookup(word) {
        return Ok(Operand::Constant(i));
    }
    // Match literals by value, e.g. `1.0` against the `1` entry.
    let value = parse_decimal(word).ok_or_else(unknown)?;
    if value == Rational::from_integer(0) {
        return Ok(Operand::Constant(constants.zero()));
    }
    let names: Vec<String> = constants.names().map(str::to_string).collect();
    for (i, name) in names.iter().enumerate() {
        if parse_decimal(name) == Some(value) {
            return Ok(Operand::Constant(i));
        }
    }
    Err(unknown())
}

/// Parses `12`, `-3`, `2.5` or `3/4` into an exact rational.
pub fn parse_decimal(s: &str) -> Option<Rational> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Some((n, d)) = s.split_once('/') {
        let n: i128 = n.trim().parse().ok()?;
        let d: i128 = d.trim().parse().ok()?;
        if d == 0 {
            return None;
        }
        return Some(Rational::new(n, d));
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    if frac_part.len() > 30 {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let numer: i128 = if digits.is_empty() { 0 } else { digits.parse().ok()? };
    let denom = 10i128.checked_pow(frac_part.len() as u32)?;
    let r = Rational::new(numer, denom);
    Some(if neg { -r } else { r })
}

fn lex(text: &str, n_numbers: usize, constants: &mut ConstantTable) -> Result<Vec<Lex>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '+' => Some(Lex::Op(Operator::Add)),
            '-' | '−' => Some(Lex::Op(Operator::Sub)),
            '*' | '×' => Some(Lex::Op(Operator::Mul)),
            '/' | '÷' => Some(Lex::Op(Operator::Div)),
            '^' => Some(Lex::Op(Operator::Pow)),
            '(' => Some(Lex::LParen),
            ')' => Some(Lex::RParen),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(tok);
            i += 1;
            continue;
        }
        if c.is_alphanumeric() || c == '.' || c == 'π' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '.' || chars[i] == 'π') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            out.push(Lex::Leaf(lex_word(&word, n_numbers, constants)?));
            continue;
        }
        return Err(ParseError::UnknownToken(c.to_string()));
    }
    Ok(out)
}

struct InfixParser<'c> {
    tokens: Peekable<IntoIter<Lex>>,
    constants: &'c mut ConstantTable,
}

impl InfixParser<'_> {
    fn expr(&mut self) -> Result<ExprTree, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Lex::Op(op @ (Operator::Add | Operator::Sub))) = self.tokens.peek().cloned() {
            self.tokens.next();
            let rhs = self.term()?;
            lhs = ExprTree::node(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<ExprTree, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Lex::Op(op @ (Operator::Mul | Operator::Div))) = self.tokens.peek().cloned() {
            self.tokens.next();
            let rhs = self.unary()?;
            lhs = ExprTree::node(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<ExprTree, ParseError> {
        if let Some(Lex::Op(Operator::Sub)) = self.tokens.peek() {
            self.tokens.next();
            let inner = self.unary()?;
            let zero = self.constants.zero();
            return Ok(ExprTree::node(
                Operator::Sub,
                ExprTree::Leaf(Operand::Constant(zero)),
                inner,
            ));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprTree, ParseError> {
        let base = self.atom()?;
        if let Some(Lex::Op(Operator::Pow)) = self.tokens.peek() {
            self.tokens.next();
            let exponent = self.unary()?;
            return Ok(ExprTree::node(Operator::Pow, base, exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprTree, ParseError> {
        match self.tokens.next() {
            Some(Lex::Leaf(o)) => Ok(ExprTree::Leaf(o)),
            Some(Lex::LParen) => {
                let inner = self.expr()?;
                match self.tokens.next() {
                    Some(Lex::RParen) => Ok(inner),
                    _ => Err(ParseError::UnbalancedParens),
                }
            }
            Some(Lex::RParen) => Err(ParseError::UnbalancedParens),
            Some(Lex::Op(op)) => Err(ParseError::Syntax(format!("unexpected operator `{op}`"))),
            None => Err(ParseError::Syntax("unexpected end of equation".into())),
        }
    }
}

/// Parses an infix equation over `N<i>` placeholders, constants and `+ - * / ^`.
///
/// Unary minus becomes `0 - x`; the zero constant is added to `constants` when
/// first needed.
pub fn parse_infix(
    text: &str,
    n_numbers: usize,
    constants: &mut ConstantTable,
) -> Result<ExprTree, ParseError> {
    let tokens = lex(text, n_numbers, constants)?;
    if tokens.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let depth = tokens.iter().try_fold(0i64, |d, t| {
        let d = match t {
            Lex::LParen => d + 1,
            Lex::RParen => d - 1,
            _ => d,
        };
        if d < 0 {
            None
        } else {
            Some(d)
        }
    });
    if depth != Some(0) {
        return Err(ParseError::UnbalancedParens);
    }
    let mut parser = InfixParser {
        tokens: tokens.into_iter().peekable(),
        constants,
    };
    let tree = parser.expr()?;
    match parser.tokens.next() {
        None => Ok(tree),
        Some(Lex::RParen) => Err(ParseError::UnbalancedParens),
        Some(other) => Err(ParseError::Syntax(format!("trailing token {other:?}"))),
    }
}

/// Parses a space-separated prefix token string such as `+ * N0 N1 N2`.
pub fn parse_prefix(
    text: &str,
    n_numbers: usize,
    constants: &mut ConstantTable,
) -> Result<ExprTree, ParseError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let mut pos = 0;
    fn walk(
        words: &[&str],
        pos: &mut usize,
        n_numbers: usize,
        constants: &mut ConstantTable,
    ) -> Result<ExprTree, ParseError> {
        let word = *words
            .get(*pos)
            .ok_or_else(|| ParseError::Syntax("prefix sequence ended early".into()))?;
        *pos += 1;
        if let Some(op) = Operator::from_symbol(word) {
            let left = walk(words, pos, n_numbers, constants)?;
            let right = walk(words, pos, n_numbers, constants)?;
            return Ok(ExprTree::node(op, left, right));
        }
        Ok(ExprTree::Leaf(lex_word(word, n_numbers, constants)?))
    }
    let tree = walk(&words, &mut pos, n_numbers, constants)?;
    if pos != words.len() {
        return Err(ParseError::Syntax("extra tokens after prefix expression".into()));
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str, n: usize) -> Result<ExprTree, ParseError> {
        parse_infix(s, n, &mut ConstantTable::default())
    }

    #[test]
    fn two_products_sum() {
        let t = parse("N0*N1+N2*N3", 4).unwrap();
        assert_eq!(
            t,
            ExprTree::node(
                Operator::Add,
                ExprTree::node(Operator::Mul, ExprTree::num(0), ExprTree::num(1)),
                ExprTree::node(Operator::Mul, ExprTree::num(2), ExprTree::num(3)),
            )
        );
    }

    #[test]
    fn single_token() {
        assert_eq!(parse("N0", 1).unwrap(), ExprTree::num(0));
    }

    #[test]
    fn parenthesized_chain() {
        assert_eq!(
            parse("(N0-N1)/N2", 3).unwrap(),
            ExprTree::node(
                Operator::Div,
                ExprTree::node(Operator::Sub, ExprTree::num(0), ExprTree::num(1)),
                ExprTree::num(2),
            )
        );
    }

    #[test]
    fn associativity() {
        assert_eq!(
            parse("N0-N1-N2", 3).unwrap(),
            ExprTree::node(
                Operator::Sub,
                ExprTree::node(Operator::Sub, ExprTree::num(0), ExprTree::num(1)),
                ExprTree::num(2),
            )
        );
        assert_eq!(
            parse("N0^N1^N2", 3).unwrap(),
            ExprTree::node(
                Operator::Pow,
                ExprTree::num(0),
                ExprTree::node(Operator::Pow, ExprTree::num(1), ExprTree::num(2)),
            )
        );
    }

    #[test]
    fn errors() {
        assert_eq!(parse("", 0), Err(ParseError::EmptyInput));
        assert_eq!(parse("   ", 0), Err(ParseError::EmptyInput));
        assert_eq!(parse("(N0+N1", 2), Err(ParseError::UnbalancedParens));
        assert_eq!(parse("N0+N1)", 2), Err(ParseError::UnbalancedParens));
        assert_eq!(
            parse("N0+N5", 3),
            Err(ParseError::IndexOutOfRange { index: 5, n_numbers: 3 })
        );
        assert!(matches!(parse("N0 $ N1", 2), Err(ParseError::UnknownToken(_))));
        assert!(matches!(parse("N0 + 7", 1), Err(ParseError::UnknownToken(_))));
        assert!(matches!(parse("N0 +", 1), Err(ParseError::Syntax(_))));
    }

    #[test]
    fn unary_minus_uses_zero_constant() {
        let mut c = ConstantTable::default();
        let t = parse_infix("-N0*N1", 2, &mut c).unwrap();
        let zero = c.lookup("0").unwrap();
        assert_eq!(
            t,
            ExprTree::node(
                Operator::Mul,
                ExprTree::node(
                    Operator::Sub,
                    ExprTree::Leaf(Operand::Constant(zero)),
                    ExprTree::num(0)
                ),
                ExprTree::num(1),
            )
        );
    }

    #[test]
    fn constants_by_name_and_value() {
        let mut c = ConstantTable::default();
        let t = parse_infix("N0/100*pi+1.0", 1, &mut c).unwrap();
        assert_eq!(t.infix_string(&c), "N0/100*pi+1");
    }

    #[test]
    fn prefix_parse() {
        let mut c = ConstantTable::default();
        let t = parse_prefix("+ * N0 N1 * N2 N3", 4, &mut c).unwrap();
        assert_eq!(t, parse("N0*N1+N2*N3", 4).unwrap());
        assert!(parse_prefix("+ N0", 1, &mut c).is_err());
        assert!(parse_prefix("N0 N1", 2, &mut c).is_err());
    }

    #[test]
    fn decimals() {
        assert_eq!(parse_decimal("2.5"), Some(Rational::new(5, 2)));
        assert_eq!(parse_decimal("3/6"), Some(Rational::new(1, 2)));
        assert_eq!(parse_decimal("-4"), Some(Rational::from_integer(-4)));
        assert_eq!(parse_decimal("x"), None);
        assert_eq!(parse_decimal("1/0"), None);
    }
}
