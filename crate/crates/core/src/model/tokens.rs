//! Token sequences and the causal + query-column attention mask.

use crate::envcore::{Task, ENCODING_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Context,
    Query,
}

/// One element of a sequence layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Context step `t` of the task trajectory.
    Context(usize),
    /// Query token for node `n`.
    Query(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub width: usize,
    /// Row-major `len x width`.
    pub tokens: Vec<f32>,
    pub roles: Vec<Role>,
    pub query_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(width: usize) -> Self {
        TokenSequence {
            width,
            tokens: Vec::new(),
            roles: Vec::new(),
            query_positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.width..(i + 1) * self.width]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.tokens[i * self.width..(i + 1) * self.width]
    }

    pub fn push(&mut self, token: &[f32], role: Role) -> Result<()> {
        if token.len() != self.width {
            return Err(Error::WidthMismatch {
                expected: self.width,
                got: token.len(),
            });
        }
        if role == Role::Query {
            self.query_positions.push(self.roles.len());
        }
        self.tokens.extend_from_slice(token);
        self.roles.push(role);
        Ok(())
    }

    pub fn push_query_encoding(&mut self, encoding: &[f32]) -> Result<()> {
        let mut tok = vec![0.0f32; self.width];
        if encoding.len() != ENCODING_DIM {
            return Err(Error::WidthMismatch {
                expected: ENCODING_DIM,
                got: encoding.len(),
            });
        }
        tok[..ENCODING_DIM].copy_from_slice(encoding);
        self.push(&tok, Role::Query)
    }

    pub fn mask(&self) -> AttentionMask {
        build_attention_mask(&self.roles)
    }
}

/// Builds the token sequence for a layout over `task`.
pub fn tokenize(task: &Task, layout: &[Slot], width: usize) -> Result<TokenSequence> {
    let expected = crate::envcore::token_width(task.suite());
    if width != expected {
        return Err(Error::WidthMismatch {
            expected,
            got: width,
        });
    }
    let mut seq = TokenSequence::new(width);
    seq.tokens.reserve(layout.len() * width);
    let mut tok = vec![0.0f32; width];
    for slot in layout {
        match *slot {
            Slot::Context(t) => {
                if t >= task.steps.len() {
                    return Err(Error::invalid(format!("context step {t} out of range")));
                }
                task.write_token(t, &mut tok);
                seq.push(&tok, Role::Context)?;
            }
            Slot::Query(n) => {
                if n >= task.graph.node_count {
                    return Err(Error::invalid(format!("query node {n} out of range")));
                }
                seq.push_query_encoding(task.encoder.encode(n))?;
            }
        }
    }
    Ok(seq)
}

/// Context prefix of length `context_len` followed by one query token.
pub fn context_then_query(task: &Task, context_len: usize, query: usize) -> Result<TokenSequence> {
    let mut layout: Vec<Slot> = (0..context_len).map(Slot::Context).collect();
    layout.push(Slot::Query(query));
    tokenize(task, &layout, crate::envcore::token_width(task.suite()))
}

/// Boolean attention mask: `allowed[i * len + j]` is true where the additive
/// mask is 0 and false where it is minus infinity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub len: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.len..(i + 1) * self.len]
    }

    /// Additive form with entries in {0, -inf}.
    pub fn additive(&self) -> Vec<f32> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f32::NEG_INFINITY })
            .collect()
    }

    pub fn causal(len: usize) -> Self {
        build_attention_mask(&vec![Role::Context; len])
    }
}

/// Causal mask plus query-column mask: nothing attends to a query token
/// except that token itself.
pub fn build_attention_mask(roles: &[Role]) -> AttentionMask {
    let len = roles.len();
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            allowed[i * len + j] = j == i || roles[j] == Role::Context;
        }
    }
    AttentionMask { len, allowed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::{build_taskset, EnvConfig, Suite};
    use Role::{Context as C, Query as Q};

    #[test]
    fn all_context_is_causal() {
        let m = build_attention_mask(&[C, C, C]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.is_allowed(i, j), j <= i);
            }
        }
    }

    #[test]
    fn query_row_and_column() {
        let m = build_attention_mask(&[C, C, Q]);
        assert_eq!(m.row(2), &[true, true, true]);
        assert!(!m.is_allowed(0, 2) && !m.is_allowed(1, 2));
        let m = build_attention_mask(&[C, C, Q, C, Q]);
        assert!(!m.is_allowed(3, 2));
        assert!(!m.is_allowed(4, 2));
        assert!(m.is_allowed(4, 3) && m.is_allowed(4, 4));
        let add = m.additive();
        for i in 0..5 {
            assert_eq!(add[i * 5 + i], 0.0);
        }
    }

    #[test]
    fn tokenize_layout() {
        let cfg = EnvConfig {
            trajectory_len: 20,
            ..EnvConfig::gridworld()
        };
        let ts = build_taskset(10, 0, &cfg).unwrap();
        let task = &ts.tasks[0];
        let seq = tokenize(task, &[Slot::Context(0), Slot::Query(3)], 26).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.query_positions, vec![1]);
        assert_eq!(&seq.token(1)[..10], task.encoder.encode(3));
        assert!(seq.token(1)[10..].iter().all(|&v| v == 0.0));
        assert!(tokenize(task, &[Slot::Context(0)], 25).is_err());
        assert!(tokenize(task, &[Slot::Context(99)], 26).is_err());
        let _ = Suite::Tree;
    }
}
