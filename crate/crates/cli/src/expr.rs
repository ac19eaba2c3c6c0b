//! Arithmetic expressions over input entries, e.g. `(x[1,1] + x[1,2]) / 2`.
//!
//! Grammar, lowest precedence first:
//!
//! ```text
//! expr  := term (("+" | "-") term)*
//! term  := unary (("*" | "/") unary)*
//! unary := "-" unary | power
//! power := atom ("^" unary)?
//! atom  := number | "pi" | x[p,q] | name "(" expr ("," expr)* ")" | "(" expr ")"
//! ```
//!
//! Indices are 1-based and checked against the input shape at parse time.

use kst_core::{KstError, Matrix, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize, usize),
    Neg(Box<Expr>),
    Bin(Op, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Func {
    Min,
    Max,
    Abs,
    Sqrt,
    Exp,
    Sin,
    Cos,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "min" => Func::Min,
            "max" => Func::Max,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            _ => return None,
        })
    }

    fn variadic(self) -> bool {
        matches!(self, Func::Min | Func::Max)
    }
}

impl Expr {
    pub fn eval(&self, x: &Matrix<f64>) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(p, q) => *x.get(*p, *q),
            Expr::Neg(e) => -e.eval(x),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x), b.eval(x));
                match op {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    Op::Div => a / b,
                    Op::Pow => a.powf(b),
                }
            }
            Expr::Call(func, args) => {
                let mut vals = args.iter().map(|a| a.eval(x));
                match func {
                    Func::Min => vals.fold(f64::INFINITY, f64::min),
                    Func::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                    Func::Abs => vals.next().unwrap_or_default().abs(),
                    Func::Sqrt => vals.next().unwrap_or_default().sqrt(),
                    Func::Exp => vals.next().unwrap_or_default().exp(),
                    Func::Sin => vals.next().unwrap_or_default().sin(),
                    Func::Cos => vals.next().unwrap_or_default().cos(),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // Exponent suffix such as 1e-3.
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse().map_err(|_| KstError::Parse(format!("bad number `{text}`")))?;
            toks.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            toks.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),[]".contains(c) {
            toks.push(Tok::Sym(c));
            i += 1;
        } else {
            return Err(KstError::Parse(format!("unexpected character `{c}` in expression")));
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    d: usize,
    n: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(KstError::Parse(format!("expected `{c}` at token {}", self.pos + 1)))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                Op::Add
            } else if self.eat('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                Op::Mul
            } else if self.eat('/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(Expr::Bin(Op::Pow, Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn index(&mut self) -> Result<usize> {
        match self.toks.get(self.pos).cloned() {
            Some(Tok::Num(v)) if v.fract() == 0.0 && v >= 1.0 => {
                self.pos += 1;
                Ok(v as usize)
            }
            _ => Err(KstError::Parse("indices in x[p,q] are positive integers".into())),
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let tok = self.toks.get(self.pos).cloned().ok_or_else(|| KstError::Parse("expression ends early".into()))?;
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Sym('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) if name == "pi" => Ok(Expr::Num(std::f64::consts::PI)),
            Tok::Ident(name) if name == "x" => {
                self.expect('[')?;
                let p = self.index()?;
                self.expect(',')?;
                let q = self.index()?;
                self.expect(']')?;
                if p > self.d || q > self.n {
                    return Err(KstError::Parse(format!("x[{p},{q}] is outside a {}x{} input", self.d, self.n)));
                }
                Ok(Expr::Var(p - 1, q - 1))
            }
            Tok::Ident(name) => {
                let func = Func::from_name(&name).ok_or_else(|| KstError::Parse(format!("unknown name `{name}`")))?;
                self.expect('(')?;
                let mut args = vec![self.expr()?];
                while self.eat(',') {
                    args.push(self.expr()?);
                }
                self.expect(')')?;
                if !func.variadic() && args.len() != 1 {
                    return Err(KstError::Parse(format!("`{name}` takes one argument")));
                }
                Ok(Expr::Call(func, args))
            }
            Tok::Sym(c) => Err(KstError::Parse(format!("unexpected `{c}`"))),
        }
    }
}

pub fn parse_expr(src: &str, d: usize, n: usize) -> Result<Expr> {
    let mut parser = Parser { toks: tokenize(src)?, pos: 0, d, n };
    let e = parser.expr()?;
    if parser.pos != parser.toks.len() {
        return Err(KstError::Parse(format!("trailing input after token {}", parser.pos)));
    }
    Ok(e)
}
