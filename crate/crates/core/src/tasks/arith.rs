//! Single-digit left-to-right arithmetic with two solution strategies.
//!
//! A question `Q x0 o1 x1 ... od xd =` is generated so that every running
//! value stays in `0..=9`. Two derivations solve it:
//!
//! * **direct**: `<direct> v1 v2 ... vd ANS vd EOS`, one running value per
//!   step. Each step needs the operator and operand still visible in the
//!   prompt, so it is computable by a policy whose window spans the prompt.
//! * **expanded**: `<expand>` followed by `lhs op x = v ;` for every step and
//!   then `ANS vd EOS`. Restating each step pushes the prompt out of a fixed
//!   window after the first step, so later operands must be guessed.
//!
//! The first generated token therefore commits the trajectory: that is the
//! lock-in structure the probes measure.

use rand::Rng;

use super::vocab::{sym, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn token(self) -> Token {
        match self {
            Op::Add => sym::PLUS,
            Op::Sub => sym::MINUS,
            Op::Mul => sym::TIMES,
        }
    }

    pub fn from_token(t: Token) -> Option<Op> {
        match t {
            sym::PLUS => Some(Op::Add),
            sym::MINUS => Some(Op::Sub),
            sym::TIMES => Some(Op::Mul),
            _ => None,
        }
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }
}

/// `operands[0] ops[0] operands[1] ops[1] ...`, evaluated left to right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expression {
    pub operands: Vec<u8>,
    pub ops: Vec<Op>,
}

fn digit_of(t: Token) -> Option<u8> {
    (t.0 < 10).then_some(t.0 as u8)
}

impl Expression {
    /// Draws an expression with `steps` operations whose running values all
    /// stay within `0..=9`.
    pub fn sample<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> Self {
        let mut acc: i64 = rng.gen_range(0..=9);
        let mut operands = vec![acc as u8];
        let mut ops = Vec::with_capacity(steps);
        let mut choices = Vec::with_capacity(30);
        for _ in 0..steps {
            choices.clear();
            for op in Op::ALL {
                for x in 0..=9i64 {
                    if (0..=9).contains(&op.apply(acc, x)) {
                        choices.push((op, x));
                    }
                }
            }
            // `+ 0` is always admissible, so `choices` is never empty.
            let (op, x) = choices[rng.gen_range(0..choices.len())];
            acc = op.apply(acc, x);
            operands.push(x as u8);
            ops.push(op);
        }
        Expression { operands, ops }
    }

    /// Parses `Q x0 o1 x1 ... =`.
    pub fn parse(prompt: &[Token]) -> Option<Self> {
        let body = prompt.strip_prefix(&[sym::QUESTION])?.strip_suffix(&[sym::EQUALS])?;
        if body.len() % 2 == 0 {
            return None;
        }
        let mut operands = vec![digit_of(body[0])?];
        let mut ops = Vec::new();
        for pair in body[1..].chunks(2) {
            ops.push(Op::from_token(pair[0])?);
            operands.push(digit_of(pair[1])?);
        }
        Some(Expression { operands, ops })
    }

    pub fn steps(&self) -> usize {
        self.ops.len()
    }

    /// Running values after each operation (excluding the first operand).
    pub fn running_values(&self) -> Vec<i64> {
        let mut acc = i64::from(self.operands[0]);
        self.ops
            .iter()
            .zip(&self.operands[1..])
            .map(|(op, &x)| {
                acc = op.apply(acc, i64::from(x));
                acc
            })
            .collect()
    }

    pub fn value(&self) -> i64 {
        self.running_values().last().copied().unwrap_or(i64::from(self.operands[0]))
    }

    pub fn prompt(&self) -> Vec<Token> {
        let mut p = vec![sym::QUESTION, sym::digit(self.operands[0])];
        for (op, &x) in self.ops.iter().zip(&self.operands[1..]) {
            p.push(op.token());
            p.push(sym::digit(x));
        }
        p.push(sym::EQUALS);
        p
    }

    /// Fully parenthesized text, e.g. `((3+4)-2)`.
    pub fn text(&self) -> String {
        let mut s = self.operands[0].to_string();
        for (op, x) in self.ops.iter().zip(&self.operands[1..]) {
            s = format!("({s}{}{x})", op.symbol());
        }
        s
    }

    pub fn direct_derivation(&self) -> Vec<Token> {
        let values = self.running_values();
        let mut out = vec![sym::DIRECT];
        out.extend(values.iter().map(|&v| sym::digit(v as u8)));
        let answer = sym::digit(self.value() as u8);
        out.extend([sym::ANSWER, answer, sym::EOS]);
        out
    }

    pub fn expanded_derivation(&self) -> Vec<Token> {
        let values = self.running_values();
        let mut out = vec![sym::EXPAND];
        let mut lhs = self.operands[0];
        for ((op, &x), &v) in self.ops.iter().zip(&self.operands[1..]).zip(&values) {
            out.extend([sym::digit(lhs), op.token(), sym::digit(x), sym::EQUALS]);
            out.push(sym::digit(v as u8));
            out.push(sym::SEP);
            lhs = v as u8;
        }
        out.extend([sym::ANSWER, sym::digit(self.value() as u8), sym::EOS]);
        out
    }
}

/// Smallest context order for which the direct derivation of a `steps`-step
/// question is a function of the visible window at every position.
pub fn min_context_order(steps: usize) -> usize {
    2 * steps + 3
}
