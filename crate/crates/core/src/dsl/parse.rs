use super::{Expr, Func, Var};
use crate::error::{Error, Result};

const MAX_DEPTH: usize = 200;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => out.push((Tok::Plus, start)),
            b'-' => out.push((Tok::Minus, start)),
            b'*' => out.push((Tok::Star, start)),
            b'/' => out.push((Tok::Slash, start)),
            b'^' => out.push((Tok::Caret, start)),
            b'(' => out.push((Tok::LParen, start)),
            b')' => out.push((Tok::RParen, start)),
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &src[start..i];
                let value: f64 =
                    text.parse().map_err(|_| err(start, format!("malformed number `{text}`")))?;
                if !f64::is_finite(value) {
                    return Err(err(start, format!("number `{text}` out of range")));
                }
                out.push((Tok::Num(value), start));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
                continue;
            }
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                return Err(err(start, format!("unexpected character `{ch}`")));
            }
        }
        i += 1;
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek_at(&self, ahead: usize) -> &Tok {
        let k = (self.pos + ahead).min(self.toks.len() - 1);
        &self.toks[k].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn enter(&mut self) -> Result<()> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(err(self.offset(), "expression nested too deeply"));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if *self.peek() != Tok::Minus {
            return self.power();
        }
        self.enter()?;
        self.bump();
        // a literal directly after the sign is a negative literal, unless it
        // is the base of a power
        let out = match (self.peek().clone(), self.peek_at(1)) {
            (Tok::Num(x), next) if *next != Tok::Caret => {
                self.bump();
                Expr::Num(-x)
            }
            _ => Expr::Neg(Box::new(self.unary()?)),
        };
        self.depth -= 1;
        Ok(out)
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if *self.peek() != Tok::Caret {
            return Ok(base);
        }
        self.bump();
        let at = self.offset();
        self.enter()?;
        let exponent = self.unary()?;
        self.depth -= 1;
        let value = exponent
            .constant_value()
            .ok_or_else(|| err(at, "non-integer exponent: exponent must be a constant"))?;
        if value < 0.0 || value.fract() != 0.0 || value > i32::MAX as f64 {
            return Err(err(at, format!("non-integer exponent: `{value}` is not a non-negative integer")));
        }
        Ok(Expr::Pow(Box::new(base), value as u32))
    }

    fn atom(&mut self) -> Result<Expr> {
        let at = self.offset();
        match self.bump() {
            Tok::Num(x) => Ok(Expr::Num(x)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect_rparen(at)?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(f) = Func::from_name(&name) {
                    if *self.peek() != Tok::LParen {
                        return Err(err(self.offset(), format!("expected `(` after `{name}`")));
                    }
                    let open = self.offset();
                    self.bump();
                    let arg = self.expr()?;
                    self.expect_rparen(open)?;
                    Ok(Expr::Call(f, Box::new(arg)))
                } else if let Some(v) = Var::from_name(&name) {
                    if *self.peek() == Tok::LParen {
                        return Err(err(at, format!("`{name}` is a variable, not a function")));
                    }
                    Ok(Expr::Var(v))
                } else {
                    Err(err(at, format!("unknown identifier `{name}`")))
                }
            }
            Tok::End => Err(err(at, "unexpected end of input")),
            Tok::RParen => Err(err(at, "unbalanced parentheses: unexpected `)`")),
            other => Err(err(at, format!("unexpected token {other:?}"))),
        }
    }

    fn expect_rparen(&mut self, open: usize) -> Result<()> {
        if *self.peek() == Tok::RParen {
            self.bump();
            Ok(())
        } else {
            Err(err(open, "unbalanced parentheses: `(` is never closed"))
        }
    }
}

/// Parse a coefficient expression.
pub fn parse(src: &str) -> Result<Expr> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, depth: 0 };
    if *p.peek() == Tok::End {
        return Err(err(0, "empty expression"));
    }
    let e = p.expr()?;
    match p.peek() {
        Tok::End => Ok(e),
        Tok::RParen => Err(err(p.offset(), "unbalanced parentheses: unexpected `)`")),
        _ => Err(err(p.offset(), "unexpected trailing input")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: Var) -> Box<Expr> {
        Box::new(Expr::Var(x))
    }

    #[test]
    fn precedence_examples() {
        assert_eq!(
            parse("y + 2*zp").unwrap(),
            Expr::Add(v(Var::Y), Box::new(Expr::Mul(Box::new(Expr::Num(2.0)), v(Var::Zp))))
        );
        assert_eq!(parse("-y^2").unwrap(), Expr::Neg(Box::new(Expr::Pow(v(Var::Y), 2))));
        assert_eq!(
            parse("exp(-t)*(y - yp)").unwrap(),
            Expr::Mul(
                Box::new(Expr::Call(Func::Exp, Box::new(Expr::Neg(v(Var::T))))),
                Box::new(Expr::Sub(v(Var::Y), v(Var::Yp)))
            )
        );
    }

    #[test]
    fn associativity() {
        assert_eq!(parse("y - z - v").unwrap(), parse("(y - z) - v").unwrap());
        assert_eq!(parse("y / z * v").unwrap(), parse("(y / z) * v").unwrap());
        assert_eq!(parse("2^3^2").unwrap(), Expr::Pow(Box::new(Expr::Num(2.0)), 9));
        assert_eq!(parse("-2^2").unwrap(), Expr::Neg(Box::new(Expr::Pow(Box::new(Expr::Num(2.0)), 2))));
        assert_eq!(parse("-2").unwrap(), Expr::Num(-2.0));
        assert_eq!(parse(" y\t*\n2 ").unwrap(), parse("y*2").unwrap());
    }

    #[test]
    fn positioned_errors() {
        let offset = |s: &str| match parse(s) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("{s}: expected parse error, got {other:?}"),
        };
        assert_eq!(offset("y + foo"), 4);
        assert_eq!(offset("(y + 1"), 0);
        assert_eq!(offset("y + 1)"), 5);
        assert_eq!(offset("y^1.5"), 2);
        assert_eq!(offset("y^z"), 2);
        assert_eq!(offset("y^-1"), 2);
        assert_eq!(offset(""), 0);
        assert_eq!(offset("y +"), 3);
        assert_eq!(offset("y $ 2"), 2);
        assert_eq!(offset("exp y"), 4);
        assert_eq!(offset("y(2)"), 0);
    }

    #[test]
    fn deep_nesting_is_an_error_not_a_crash() {
        let src = "(".repeat(10_000) + "y" + &")".repeat(10_000);
        assert!(matches!(parse(&src), Err(Error::Parse { .. })));
        let src = "-".repeat(10_000) + "y";
        assert!(matches!(parse(&src), Err(Error::Parse { .. })));
    }

    #[test]
    fn numbers() {
        assert_eq!(parse("1.5e-3").unwrap(), Expr::Num(1.5e-3));
        assert_eq!(parse(".5").unwrap(), Expr::Num(0.5));
        assert!(parse("1.2.3").is_err());
    }
}
