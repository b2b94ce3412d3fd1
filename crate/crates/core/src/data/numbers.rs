use std::sync::LazyLock;

use regex::Regex;

use crate::equation::{parse_decimal, Rational, Value};

static TOKEN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?P<num>\d+(?:\.\d+)?(?:/\d+)?%?)|(?P<word>[\p{L}_][\p{L}\p{N}_']*)|(?P<punct>\S)")
        .expect("token pattern")
});

/// Replaces numeric literals with `N<i>` placeholders in order of appearance.
///
/// Decimals and fractions become exact rationals; `p%` becomes `p/100`.
pub fn map_numbers(raw_text: &str) -> (Vec<String>, Vec<Value>) {
    let mut tokens = Vec::new();
    let mut numbers = Vec::new();
    for cap in TOKEN.captures_iter(raw_text) {
        if let Some(m) = cap.name("num") {
            let lit = m.as_str();
            let (body, percent) = match lit.strip_suffix('%') {
                Some(b) => (b, true),
                None => (lit, false),
            };
            let Some(mut value) = parse_decimal(body) else {
                tokens.push(lit.to_string());
                continue;
            };
            if percent {
                value /= Rational::from_integer(100);
            }
            tokens.push(format!("N{}", numbers.len()));
            numbers.push(Value::Exact(value));
        } else if let Some(m) = cap.name("word") {
            tokens.push(m.as_str().to_lowercase());
        } else if let Some(m) = cap.name("punct") {
            tokens.push(m.as_str().to_string());
        }
    }
    (tokens, numbers)
}
