//! Two-operand addition with a fixed-width answer.
//!
//! Prompt: the decimal digits of `a`, `+`, the digits of `b`, `=`.
//! Response: `a + b` zero-padded to the width of the largest possible sum, then EOS.

use crate::vocab::TokenId;

pub const FIRST_DIGIT: TokenId = 2;
pub const PLUS: TokenId = 12;
pub const EQUALS: TokenId = 13;

pub fn digits(mut n: u32) -> Vec<TokenId> {
    let mut out = Vec::new();
    loop {
        out.push(FIRST_DIGIT + n % 10);
        n /= 10;
        if n == 0 {
            break;
        }
    }
    out.reverse();
    out
}

/// Width of the answer field for operands in `0..=max_operand`.
pub fn answer_width(max_operand: u32) -> usize {
    digits(2 * max_operand).len()
}

pub fn encode_prompt(a: u32, b: u32) -> Vec<TokenId> {
    let mut p = digits(a);
    p.push(PLUS);
    p.extend(digits(b));
    p.push(EQUALS);
    p
}

pub fn encode_answer(sum: u32, width: usize) -> Vec<TokenId> {
    let d = digits(sum);
    let mut out = vec![FIRST_DIGIT; width.saturating_sub(d.len())];
    out.extend(d);
    out
}
