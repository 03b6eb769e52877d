//! Scaled dot-product attention with axial rotary position encoding.

use super::graph::{Graph, Var};
use super::value::Real;
use super::TensorError;

/// Conventional rotary base.
pub const ROPE_BASE: f64 = 10_000.0;

/// Per-row rotation angles for an axial 2-D rotary encoding.
///
/// The head dimension is split in half: the first half rotates with the row
/// coordinate, the second with the column coordinate. Within each half, pair
/// `i` uses frequency `base^(-2i/half)`.
#[derive(Debug, Clone)]
pub struct RopeTable<T: Real> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
    pub rows: usize,
    pub dim: usize,
}

impl<T: Real> RopeTable<T> {
    pub fn new(positions: &[[f64; 2]], dim: usize, base: f64) -> Result<Self, TensorError> {
        if dim % 4 != 0 {
            return Err(TensorError::Shape {
                op: "rope_table",
                shapes: vec![vec![dim]],
            });
        }
        let half = dim / 2;
        let pairs = half / 2;
        let mut cos = Vec::with_capacity(positions.len() * dim / 2);
        let mut sin = Vec::with_capacity(positions.len() * dim / 2);
        for pos in positions {
            for axis in 0..2 {
                for i in 0..pairs {
                    let freq = base.powf(-2.0 * i as f64 / half as f64);
                    let angle = pos[axis] * freq;
                    cos.push(T::from_f64c(angle.cos()));
                    sin.push(T::from_f64c(angle.sin()));
                }
            }
        }
        Ok(Self {
            cos,
            sin,
            rows: positions.len(),
            dim,
        })
    }

    /// Positions of a row-major `side × side` token grid.
    pub fn grid(side: usize, dim: usize, base: f64) -> Result<Self, TensorError> {
        let pos: Vec<[f64; 2]> = (0..side * side)
            .map(|i| [(i / side) as f64, (i % side) as f64])
            .collect();
        Self::new(&pos, dim, base)
    }

    /// Stacks tables row-wise (keys drawn from several sources).
    pub fn stack(parts: &[&RopeTable<T>]) -> Result<Self, TensorError> {
        let dim = parts.first().map(|p| p.dim).unwrap_or(4);
        if parts.iter().any(|p| p.dim != dim) {
            return Err(TensorError::Shape {
                op: "rope_stack",
                shapes: parts.iter().map(|p| vec![p.rows, p.dim]).collect(),
            });
        }
        let mut out = Self {
            cos: Vec::new(),
            sin: Vec::new(),
            rows: 0,
            dim,
        };
        for p in parts {
            out.cos.extend_from_slice(&p.cos);
            out.sin.extend_from_slice(&p.sin);
            out.rows += p.rows;
        }
        Ok(out)
    }
}

/// Applies the rotary encoding to `x: [rows, dim]`.
pub fn apply_rope<T: Real>(g: &mut Graph<T>, x: Var, table: &RopeTable<T>) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != table.rows || s[1] != table.dim {
        return Err(TensorError::Shape {
            op: "rope",
            shapes: vec![s, vec![table.rows, table.dim]],
        });
    }
    g.rotate_pairs(x, table.cos.clone(), table.sin.clone())
}

/// Rotary tables for queries and keys.
pub struct Rope<'a, T: Real> {
    pub q: &'a RopeTable<T>,
    pub k: &'a RopeTable<T>,
}

/// `softmax(q kᵀ / √d) v` per head; `q: [n,d]`, `k: [m,d]`, `v: [m,e]`.
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    rope: Option<Rope<'_, T>>,
) -> Result<Var, TensorError> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let bad = sq.len() != 2
        || sk.len() != 2
        || sv.len() != 2
        || sq[1] != sk[1]
        || sk[0] != sv[0]
        || heads == 0
        || sq[1] % heads != 0
        || sv[1] % heads != 0;
    if bad {
        return Err(TensorError::Shape {
            op: "attention",
            shapes: vec![sq, sk, sv],
        });
    }
    let hd = sq[1] / heads;
    let vd = sv[1] / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (mut qh, mut kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.narrow(q, 1, h * hd, hd)?, g.narrow(k, 1, h * hd, hd)?, g.narrow(v, 1, h * vd, vd)?)
        };
        if let Some(r) = &rope {
            qh = apply_rope(g, qh, r.q)?;
            kh = apply_rope(g, kh, r.k)?;
        }
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax(scores);
        outs.push(g.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}
