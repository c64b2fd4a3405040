//! Kernel expressions as prefix token strings.

use std::fmt;

use crate::error::{Error, Result};

pub const NUM_TOKENS: usize = 16;
pub const NUM_PERIOD_BUCKETS: usize = 10;
/// Largest raw-parameter count of any terminal.
pub const MAX_PARAMS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Plus,
    Times,
    Const,
    WhiteNoise,
    SquaredExp,
    Linear,
    /// Periodic kernel in period bucket `1..=10`.
    Periodic(u8),
}

impl Token {
    pub fn index(self) -> usize {
        match self {
            Token::Plus => 0,
            Token::Times => 1,
            Token::Const => 2,
            Token::WhiteNoise => 3,
            Token::SquaredExp => 4,
            Token::Linear => 5,
            Token::Periodic(b) => 5 + b as usize,
        }
    }

    pub fn from_index(i: usize) -> Option<Token> {
        Some(match i {
            0 => Token::Plus,
            1 => Token::Times,
            2 => Token::Const,
            3 => Token::WhiteNoise,
            4 => Token::SquaredExp,
            5 => Token::Linear,
            6..=15 => Token::Periodic((i - 5) as u8),
            _ => return None,
        })
    }

    pub fn all() -> impl Iterator<Item = Token> {
        (0..NUM_TOKENS).map(|i| Token::from_index(i).expect("in range"))
    }

    pub fn arity(self) -> usize {
        match self {
            Token::Plus | Token::Times => 2,
            _ => 0,
        }
    }

    pub fn is_operator(self) -> bool {
        self.arity() > 0
    }

    /// Raw continuous parameters carried by the token.
    pub fn num_params(self) -> usize {
        match self {
            Token::Plus | Token::Times => 0,
            Token::Const | Token::WhiteNoise => 1,
            Token::SquaredExp | Token::Linear => 2,
            Token::Periodic(_) => 3,
        }
    }

    pub fn name(self) -> String {
        match self {
            Token::Plus => "PLUS".into(),
            Token::Times => "TIMES".into(),
            Token::Const => "C".into(),
            Token::WhiteNoise => "WN".into(),
            Token::SquaredExp => "SE".into(),
            Token::Linear => "LIN".into(),
            Token::Periodic(b) => format!("PER_{b}"),
        }
    }

    pub fn parse(s: &str) -> Result<Token> {
        Token::all()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown kernel token `{s}`")))
    }
}

/// Outcome of the prefix arity check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Validation {
    pub valid: bool,
    /// First offending position; `tokens.len()` when operands are missing at
    /// the end of the string.
    pub error_at: Option<usize>,
}

/// Operand-count check: starting from one required operand, operators add one
/// and terminals consume one; the count must reach zero exactly at the end.
pub fn validate_expr(tokens: &[Token], l_max: usize) -> Validation {
    let mut need = 1usize;
    for (i, t) in tokens.iter().enumerate() {
        if need == 0 || i >= l_max {
            return Validation {
                valid: false,
                error_at: Some(i),
            };
        }
        need = need + t.arity() - 1;
    }
    if need == 0 {
        Validation {
            valid: true,
            error_at: None,
        }
    } else {
        Validation {
            valid: false,
            error_at: Some(tokens.len()),
        }
    }
}

/// Whether an operator may be emitted at position `t` with `need` open operands.
pub fn operator_allowed(need: usize, t: usize, l_max: usize) -> bool {
    need + 1 + t < l_max
}

/// A valid kernel expression in prefix order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KernelExpr {
    tokens: Vec<Token>,
}

impl KernelExpr {
    pub fn new(tokens: Vec<Token>, l_max: usize) -> Result<Self> {
        let v = validate_expr(&tokens, l_max);
        if !v.valid {
            return Err(Error::Data(format!(
                "invalid kernel expression {:?} (error at position {})",
                tokens.iter().map(|t| t.name()).collect::<Vec<_>>(),
                v.error_at.unwrap_or(0)
            )));
        }
        Ok(KernelExpr { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Total raw-parameter count.
    pub fn num_params(&self) -> usize {
        self.tokens.iter().map(|t| t.num_params()).sum()
    }

    pub fn key(&self) -> Vec<u8> {
        self.tokens.iter().map(|t| t.index() as u8).collect()
    }

    pub fn from_key(key: &[u8], l_max: usize) -> Option<Self> {
        let tokens: Option<Vec<Token>> =
            key.iter().map(|&b| Token::from_index(b as usize)).collect();
        KernelExpr::new(tokens?, l_max).ok()
    }

    /// Space-separated prefix form, e.g. `PLUS SE WN`.
    pub fn prefix(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.name())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_prefix(s: &str, l_max: usize) -> Result<Self> {
        let tokens = s
            .split_whitespace()
            .map(Token::parse)
            .collect::<Result<Vec<_>>>()?;
        KernelExpr::new(tokens, l_max)
    }

    /// Infix rendering with the constrained parameter values of each terminal.
    pub fn describe(&self, constrained: &[Vec<f64>]) -> String {
        fn go(
            tokens: &[Token],
            pos: &mut usize,
            term: &mut usize,
            p: &[Vec<f64>],
            out: &mut String,
        ) {
            let t = tokens[*pos];
            *pos += 1;
            if t.is_operator() {
                out.push('(');
                go(tokens, pos, term, p, out);
                out.push_str(if t == Token::Plus { " + " } else { " × " });
                go(tokens, pos, term, p, out);
                out.push(')');
            } else {
                let vals: Vec<String> = p
                    .get(*term)
                    .map(|v| v.iter().map(|x| format!("{x:.2}")).collect())
                    .unwrap_or_default();
                *term += 1;
                out.push_str(&format!("{}({})", t.name(), vals.join(", ")));
            }
        }
        let mut out = String::new();
        go(&self.tokens, &mut 0, &mut 0, constrained, &mut out);
        out
    }
}

impl fmt::Display for KernelExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.prefix())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Token::*;

    #[test]
    fn arity_check_examples() {
        assert!(validate_expr(&[Plus, SquaredExp, WhiteNoise], 9).valid);
        assert_eq!(
            validate_expr(&[Times, WhiteNoise], 9),
            Validation {
                valid: false,
                error_at: Some(2)
            }
        );
        assert_eq!(
            validate_expr(&[SquaredExp, WhiteNoise], 9),
            Validation {
                valid: false,
                error_at: Some(1)
            }
        );
        assert!(!validate_expr(&[], 9).valid);
        assert!(!validate_expr(&[Plus, Const, Const], 2).valid);
    }

    #[test]
    fn token_indices_round_trip() {
        for (i, t) in Token::all().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(Token::parse(&t.name()).unwrap(), t);
        }
        assert_eq!(Token::from_index(16), None);
        assert_eq!(Periodic(10).index(), 15);
    }

    #[test]
    fn keys_distinguish_expressions() {
        let a = KernelExpr::new(vec![Plus, SquaredExp, WhiteNoise], 9).unwrap();
        let b = KernelExpr::new(vec![Plus, SquaredExp, WhiteNoise], 9).unwrap();
        let c = KernelExpr::new(vec![Plus, WhiteNoise, SquaredExp], 9).unwrap();
        assert_eq!(a.key(), b.key());
        assert_ne!(a.key(), c.key());
        assert_eq!(KernelExpr::from_key(&a.key(), 9), Some(a.clone()));
        assert_eq!(KernelExpr::parse_prefix("PLUS SE WN", 9).unwrap(), a);
        assert_eq!(a.num_params(), 3);
    }

    #[test]
    fn describe_is_infix() {
        let e = KernelExpr::new(vec![Times, SquaredExp, Periodic(3)], 9).unwrap();
        let s = e.describe(&[vec![0.49, 0.5], vec![0.5, 1.0, 0.5]]);
        assert_eq!(s, "(SE(0.49, 0.50) × PER_3(0.50, 1.00, 0.50))");
    }

    #[test]
    fn operator_budget() {
        // Nine slots: at t = 0 with one open operand, an operator leaves 8
        // positions for 2 operands.
        assert!(operator_allowed(1, 0, 9));
        assert!(!operator_allowed(1, 0, 1));
        assert!(!operator_allowed(4, 4, 9));
        assert!(operator_allowed(3, 4, 9));
    }
}
