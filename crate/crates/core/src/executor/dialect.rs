//! Lexer and parser for the portable kernel dialect: a small C-like
//! language with workgroup/lane intrinsics, shared-memory declarations and
//! barriers. Generated kernels are plain text in this dialect; errors carry
//! source positions so generated-code bugs stay diagnosable.

use crate::error::{Error, Result};

/// Source position (1-based line and column).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl Pos {
    pub fn err(self, msg: impl Into<String>) -> Error {
        Error::Dialect {
            line: self.line as usize,
            col: self.col as usize,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Real(f64),
    Kw(&'static str),
    Punct(&'static str),
    Eof,
}

const KEYWORDS: &[&str] = &[
    "kernel", "lanes", "f32", "f64", "global", "const", "real", "int", "shared", "static", "for",
    "to", "if", "else", "barrier",
];

struct Lexer<'a> {
    src: &'a [u8],
    at: usize,
    line: u32,
    col: u32,
}

struct Token {
    tok: Tok,
    pos: Pos,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            at: 0,
            line: 1,
            col: 1,
        }
    }

    fn peek_ch(&self) -> Option<u8> {
        self.src.get(self.at).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek_ch()?;
        self.at += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek_ch() {
                Some(c) if c.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'/') if self.src.get(self.at + 1) == Some(&b'/') => {
                    while let Some(c) = self.peek_ch() {
                        if c == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
    }

    fn next_token(&mut self) -> Result<Token> {
        self.skip_trivia();
        let pos = Pos {
            line: self.line,
            col: self.col,
        };
        let Some(c) = self.peek_ch() else {
            return Ok(Token { tok: Tok::Eof, pos });
        };
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = self.at;
            while let Some(c) = self.peek_ch() {
                if c.is_ascii_alphanumeric() || c == b'_' {
                    self.bump();
                } else {
                    break;
                }
            }
            let word = std::str::from_utf8(&self.src[start..self.at]).unwrap();
            let tok = match KEYWORDS.iter().find(|k| **k == word) {
                Some(k) => Tok::Kw(k),
                None => Tok::Ident(word.to_string()),
            };
            return Ok(Token { tok, pos });
        }
        if c.is_ascii_digit() {
            let start = self.at;
            let mut is_real = false;
            while let Some(c) = self.peek_ch() {
                if c.is_ascii_digit() {
                    self.bump();
                } else if c == b'.' {
                    is_real = true;
                    self.bump();
                } else if c == b'e' || c == b'E' {
                    is_real = true;
                    self.bump();
                    if matches!(self.peek_ch(), Some(b'+') | Some(b'-')) {
                        self.bump();
                    }
                } else {
                    break;
                }
            }
            let text = std::str::from_utf8(&self.src[start..self.at]).unwrap();
            let tok = if is_real {
                let v = text
                    .parse::<f64>()
                    .map_err(|e| pos.err(format!("bad real literal `{text}`: {e}")))?;
                if !v.is_finite() {
                    return Err(pos.err(format!("real literal `{text}` overflows")));
                }
                Tok::Real(v)
            } else {
                Tok::Int(
                    text.parse::<i64>()
                        .map_err(|e| pos.err(format!("bad integer literal `{text}`: {e}")))?,
                )
            };
            return Ok(Token { tok, pos });
        }
        // Punctuation, longest match first.
        const PUNCTS: &[&str] = &[
            "==", "!=", "<=", ">=", "&&", "||", "(", ")", "{", "}", "[", "]", ";", ",", "*",
            "=", "<", ">", "+", "-", "/", "%", "!",
        ];
        for p in PUNCTS {
            if self.src[self.at..].starts_with(p.as_bytes()) {
                for _ in 0..p.len() {
                    self.bump();
                }
                return Ok(Token {
                    tok: Tok::Punct(p),
                    pos,
                });
            }
        }
        Err(pos.err(format!("unexpected character `{}`", c as char)))
    }
}

/// Untyped expression tree with positions.
#[derive(Debug, Clone)]
pub enum UExpr {
    Ident(String, Pos),
    Index(String, Box<UExpr>, Pos),
    IntLit(i64, Pos),
    RealLit(f64, Pos),
    Un(&'static str, Box<UExpr>, Pos),
    Bin(&'static str, Box<UExpr>, Box<UExpr>, Pos),
    Call(String, Vec<UExpr>, Pos),
}

impl UExpr {
    pub fn pos(&self) -> Pos {
        match self {
            UExpr::Ident(_, p)
            | UExpr::Index(_, _, p)
            | UExpr::IntLit(_, p)
            | UExpr::RealLit(_, p)
            | UExpr::Un(_, _, p)
            | UExpr::Bin(_, _, _, p)
            | UExpr::Call(_, _, p) => *p,
        }
    }
}

/// Untyped statement tree.
#[derive(Debug, Clone)]
pub enum UStmt {
    Shared {
        name: String,
        size: i64,
        pos: Pos,
    },
    /// Read-only array of real constants baked into the kernel text.
    StaticReal {
        name: String,
        values: Vec<f64>,
        pos: Pos,
    },
    DeclReal {
        name: String,
        init: UExpr,
        pos: Pos,
    },
    DeclInt {
        name: String,
        init: UExpr,
        pos: Pos,
    },
    Assign {
        target: UExpr,
        value: UExpr,
        pos: Pos,
    },
    For {
        var: String,
        start: UExpr,
        end: UExpr,
        body: Vec<UStmt>,
        pos: Pos,
    },
    If {
        cond: UExpr,
        then_body: Vec<UStmt>,
        else_body: Vec<UStmt>,
        pos: Pos,
    },
    Barrier {
        pos: Pos,
    },
}

/// Kernel parameter kinds, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    RealBuf { constant: bool },
    IntBuf { constant: bool },
    IntScalar,
    RealScalar,
}

#[derive(Debug, Clone)]
pub struct UParam {
    pub name: String,
    pub kind: ParamKind,
    pub pos: Pos,
}

/// Parsed (still untyped) kernel.
#[derive(Debug, Clone)]
pub struct UKernel {
    pub name: String,
    pub params: Vec<UParam>,
    pub lanes: usize,
    pub single_precision: bool,
    pub body: Vec<UStmt>,
}

struct Parser<'a> {
    lex: Lexer<'a>,
    cur: Token,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self> {
        let mut lex = Lexer::new(src);
        let cur = lex.next_token()?;
        Ok(Parser { lex, cur })
    }

    fn advance(&mut self) -> Result<Token> {
        let next = self.lex.next_token()?;
        Ok(std::mem::replace(&mut self.cur, next))
    }

    fn expect_punct(&mut self, p: &'static str) -> Result<Pos> {
        if self.cur.tok == Tok::Punct(p) {
            Ok(self.advance()?.pos)
        } else {
            Err(self
                .cur
                .pos
                .err(format!("expected `{p}`, found {}", describe(&self.cur.tok))))
        }
    }

    fn expect_kw(&mut self, k: &'static str) -> Result<Pos> {
        if self.cur.tok == Tok::Kw(k) {
            Ok(self.advance()?.pos)
        } else {
            Err(self
                .cur
                .pos
                .err(format!("expected `{k}`, found {}", describe(&self.cur.tok))))
        }
    }

    fn eat_kw(&mut self, k: &'static str) -> Result<bool> {
        if self.cur.tok == Tok::Kw(k) {
            self.advance()?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn expect_ident(&mut self) -> Result<(String, Pos)> {
        match self.cur.tok.clone() {
            Tok::Ident(name) => {
                let pos = self.advance()?.pos;
                Ok((name, pos))
            }
            other => Err(self
                .cur
                .pos
                .err(format!("expected identifier, found {}", describe(&other)))),
        }
    }

    fn expect_int(&mut self) -> Result<(i64, Pos)> {
        match self.cur.tok {
            Tok::Int(v) => {
                let pos = self.advance()?.pos;
                Ok((v, pos))
            }
            ref other => Err(self
                .cur
                .pos
                .err(format!("expected integer, found {}", describe(other)))),
        }
    }

    fn parse_kernel(&mut self) -> Result<UKernel> {
        self.expect_kw("kernel")?;
        let (name, _) = self.expect_ident()?;
        self.expect_punct("(")?;
        let mut params = Vec::new();
        if self.cur.tok != Tok::Punct(")") {
            loop {
                params.push(self.parse_param()?);
                if self.cur.tok == Tok::Punct(",") {
                    self.advance()?;
                } else {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        self.expect_kw("lanes")?;
        let (lanes, lanes_pos) = self.expect_int()?;
        if lanes < 1 {
            return Err(lanes_pos.err("lane count must be at least 1"));
        }
        let single_precision = if self.eat_kw("f32")? {
            true
        } else {
            self.expect_kw("f64")?;
            false
        };
        let body = self.parse_block()?;
        if self.cur.tok != Tok::Eof {
            return Err(self.cur.pos.err("trailing input after kernel body"));
        }
        Ok(UKernel {
            name,
            params,
            lanes: lanes as usize,
            single_precision,
            body,
        })
    }

    fn parse_param(&mut self) -> Result<UParam> {
        let pos = self.cur.pos;
        if self.eat_kw("global")? {
            let constant = self.eat_kw("const")?;
            let is_real = if self.eat_kw("real")? {
                true
            } else {
                self.expect_kw("int")?;
                false
            };
            self.expect_punct("*")?;
            let (name, _) = self.expect_ident()?;
            let kind = if is_real {
                ParamKind::RealBuf { constant }
            } else {
                ParamKind::IntBuf { constant }
            };
            Ok(UParam { name, kind, pos })
        } else if self.eat_kw("int")? {
            let (name, _) = self.expect_ident()?;
            Ok(UParam {
                name,
                kind: ParamKind::IntScalar,
                pos,
            })
        } else if self.eat_kw("real")? {
            let (name, _) = self.expect_ident()?;
            Ok(UParam {
                name,
                kind: ParamKind::RealScalar,
                pos,
            })
        } else {
            Err(pos.err(format!(
                "expected parameter declaration, found {}",
                describe(&self.cur.tok)
            )))
        }
    }

    fn parse_block(&mut self) -> Result<Vec<UStmt>> {
        self.expect_punct("{")?;
        let mut stmts = Vec::new();
        while self.cur.tok != Tok::Punct("}") {
            if self.cur.tok == Tok::Eof {
                return Err(self.cur.pos.err("unterminated block, expected `}`"));
            }
            stmts.push(self.parse_stmt()?);
        }
        self.advance()?;
        Ok(stmts)
    }

    fn parse_stmt(&mut self) -> Result<UStmt> {
        let pos = self.cur.pos;
        match self.cur.tok.clone() {
            Tok::Kw("shared") => {
                self.advance()?;
                self.expect_kw("real")?;
                let (name, _) = self.expect_ident()?;
                self.expect_punct("[")?;
                let (size, size_pos) = self.expect_int()?;
                if size < 1 {
                    return Err(size_pos.err("shared array size must be positive"));
                }
                self.expect_punct("]")?;
                self.expect_punct(";")?;
                Ok(UStmt::Shared { name, size, pos })
            }
            Tok::Kw("static") => {
                self.advance()?;
                self.expect_kw("real")?;
                let (name, _) = self.expect_ident()?;
                self.expect_punct("[")?;
                self.expect_punct("]")?;
                self.expect_punct("=")?;
                self.expect_punct("{")?;
                let mut values = Vec::new();
                loop {
                    let negative = if self.cur.tok == Tok::Punct("-") {
                        self.advance()?;
                        true
                    } else {
                        false
                    };
                    let vpos = self.cur.pos;
                    let v = match self.cur.tok {
                        Tok::Real(v) => v,
                        Tok::Int(v) => v as f64,
                        _ => return Err(vpos.err("expected a numeric constant")),
                    };
                    self.advance()?;
                    values.push(if negative { -v } else { v });
                    if self.cur.tok == Tok::Punct(",") {
                        self.advance()?;
                    } else {
                        break;
                    }
                }
                self.expect_punct("}")?;
                self.expect_punct(";")?;
                Ok(UStmt::StaticReal { name, values, pos })
            }
            Tok::Kw("real") => {
                self.advance()?;
                let (name, _) = self.expect_ident()?;
                self.expect_punct("=")?;
                let init = self.parse_expr()?;
                self.expect_punct(";")?;
                Ok(UStmt::DeclReal { name, init, pos })
            }
            Tok::Kw("int") => {
                self.advance()?;
                let (name, _) = self.expect_ident()?;
                self.expect_punct("=")?;
                let init = self.parse_expr()?;
                self.expect_punct(";")?;
                Ok(UStmt::DeclInt { name, init, pos })
            }
            Tok::Kw("for") => {
                self.advance()?;
                let (var, _) = self.expect_ident()?;
                self.expect_punct("=")?;
                let start = self.parse_expr()?;
                self.expect_kw("to")?;
                let end = self.parse_expr()?;
                let body = self.parse_block()?;
                Ok(UStmt::For {
                    var,
                    start,
                    end,
                    body,
                    pos,
                })
            }
            Tok::Kw("if") => {
                self.advance()?;
                self.expect_punct("(")?;
                let cond = self.parse_expr()?;
                self.expect_punct(")")?;
                let then_body = self.parse_block()?;
                let else_body = if self.eat_kw("else")? {
                    self.parse_block()?
                } else {
                    Vec::new()
                };
                Ok(UStmt::If {
                    cond,
                    then_body,
                    else_body,
                    pos,
                })
            }
            Tok::Kw("barrier") => {
                self.advance()?;
                self.expect_punct(";")?;
                Ok(UStmt::Barrier { pos })
            }
            Tok::Ident(_) => {
                let target = self.parse_primary()?;
                match target {
                    UExpr::Ident(..) | UExpr::Index(..) => {}
                    _ => return Err(pos.err("assignment target must be a name or element")),
                }
                self.expect_punct("=")?;
                let value = self.parse_expr()?;
                self.expect_punct(";")?;
                Ok(UStmt::Assign { target, value, pos })
            }
            other => Err(pos.err(format!("expected statement, found {}", describe(&other)))),
        }
    }

    fn parse_expr(&mut self) -> Result<UExpr> {
        self.parse_or()
    }

    fn parse_or(&mut self) -> Result<UExpr> {
        let mut lhs = self.parse_and()?;
        while self.cur.tok == Tok::Punct("||") {
            let pos = self.advance()?.pos;
            let rhs = self.parse_and()?;
            lhs = UExpr::Bin("||", Box::new(lhs), Box::new(rhs), pos);
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<UExpr> {
        let mut lhs = self.parse_cmp()?;
        while self.cur.tok == Tok::Punct("&&") {
            let pos = self.advance()?.pos;
            let rhs = self.parse_cmp()?;
            lhs = UExpr::Bin("&&", Box::new(lhs), Box::new(rhs), pos);
        }
        Ok(lhs)
    }

    fn parse_cmp(&mut self) -> Result<UExpr> {
        let lhs = self.parse_addsub()?;
        for op in ["==", "!=", "<=", ">=", "<", ">"] {
            if self.cur.tok == Tok::Punct(op) {
                let pos = self.advance()?.pos;
                let rhs = self.parse_addsub()?;
                return Ok(UExpr::Bin(op, Box::new(lhs), Box::new(rhs), pos));
            }
        }
        Ok(lhs)
    }

    fn parse_addsub(&mut self) -> Result<UExpr> {
        let mut lhs = self.parse_muldiv()?;
        loop {
            let op = match self.cur.tok {
                Tok::Punct("+") => "+",
                Tok::Punct("-") => "-",
                _ => break,
            };
            let pos = self.advance()?.pos;
            let rhs = self.parse_muldiv()?;
            lhs = UExpr::Bin(op, Box::new(lhs), Box::new(rhs), pos);
        }
        Ok(lhs)
    }

    fn parse_muldiv(&mut self) -> Result<UExpr> {
        let mut lhs = self.parse_unary()?;
        loop {
            let op = match self.cur.tok {
                Tok::Punct("*") => "*",
                Tok::Punct("/") => "/",
                Tok::Punct("%") => "%",
                _ => break,
            };
            let pos = self.advance()?.pos;
            let rhs = self.parse_unary()?;
            lhs = UExpr::Bin(op, Box::new(lhs), Box::new(rhs), pos);
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<UExpr> {
        match self.cur.tok {
            Tok::Punct("-") => {
                let pos = self.advance()?.pos;
                let inner = self.parse_unary()?;
                Ok(UExpr::Un("-", Box::new(inner), pos))
            }
            Tok::Punct("!") => {
                let pos = self.advance()?.pos;
                let inner = self.parse_unary()?;
                Ok(UExpr::Un("!", Box::new(inner), pos))
            }
            _ => self.parse_primary(),
        }
    }

    fn parse_primary(&mut self) -> Result<UExpr> {
        let pos = self.cur.pos;
        match self.cur.tok.clone() {
            Tok::Int(v) => {
                self.advance()?;
                Ok(UExpr::IntLit(v, pos))
            }
            Tok::Real(v) => {
                self.advance()?;
                Ok(UExpr::RealLit(v, pos))
            }
            Tok::Punct("(") => {
                self.advance()?;
                let inner = self.parse_expr()?;
                self.expect_punct(")")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.advance()?;
                match self.cur.tok {
                    Tok::Punct("[") => {
                        self.advance()?;
                        let idx = self.parse_expr()?;
                        self.expect_punct("]")?;
                        Ok(UExpr::Index(name, Box::new(idx), pos))
                    }
                    Tok::Punct("(") => {
                        self.advance()?;
                        let mut args = Vec::new();
                        if self.cur.tok != Tok::Punct(")") {
                            loop {
                                args.push(self.parse_expr()?);
                                if self.cur.tok == Tok::Punct(",") {
                                    self.advance()?;
                                } else {
                                    break;
                                }
                            }
                        }
                        self.expect_punct(")")?;
                        Ok(UExpr::Call(name, args, pos))
                    }
                    _ => Ok(UExpr::Ident(name, pos)),
                }
            }
            other => Err(pos.err(format!("expected expression, found {}", describe(&other)))),
        }
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Ident(s) => format!("identifier `{s}`"),
        Tok::Int(v) => format!("integer `{v}`"),
        Tok::Real(v) => format!("real `{v}`"),
        Tok::Kw(k) => format!("keyword `{k}`"),
        Tok::Punct(p) => format!("`{p}`"),
        Tok::Eof => "end of input".to_string(),
    }
}

/// Parse kernel source text into the untyped AST.
pub fn parse(src: &str) -> Result<UKernel> {
    Parser::new(src)?.parse_kernel()
}
