//! Pre-norm transformer blocks whose key/value tokens come from a
//! resampled copy of the input grid.

use super::params::{Bound, ParamKind, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Where keys and values are computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvSource {
    /// The normalized input tokens themselves.
    Plain,
    /// Patch-merged `r x r` grid (encoder spatial reduction).
    Reduce(usize),
    /// Each token projected to `r x r` tokens (decoder spatial increment).
    Increase(usize),
}

impl KvSource {
    pub(crate) fn reduce(r: usize) -> Self {
        if r > 1 {
            Self::Reduce(r)
        } else {
            Self::Plain
        }
    }

    pub(crate) fn increase(r: usize) -> Self {
        if r > 1 {
            Self::Increase(r)
        } else {
            Self::Plain
        }
    }

    /// Number of key/value tokens for a `grid x grid` input.
    pub fn kv_len(self, grid: usize) -> usize {
        match self {
            Self::Plain => grid * grid,
            Self::Reduce(r) => (grid / r) * (grid / r),
            Self::Increase(r) => grid * grid * r * r,
        }
    }
}

pub(crate) fn register_linear<T: Scalar>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) {
    s.register(format!("{name}.w"), ParamKind::Weight, &[cin, cout]);
    s.register(format!("{name}.b"), ParamKind::Bias, &[cout]);
}

pub(crate) fn register_norm<T: Scalar>(s: &mut ParamStore<T>, name: &str, c: usize) {
    s.register(format!("{name}.g"), ParamKind::Gain, &[c]);
    s.register(format!("{name}.b"), ParamKind::Bias, &[c]);
}

pub(crate) fn register_attention<T: Scalar>(s: &mut ParamStore<T>, name: &str, c: usize, kv: KvSource) {
    register_linear(s, &format!("{name}.q"), c, c);
    match kv {
        KvSource::Plain => {}
        KvSource::Reduce(r) => {
            register_linear(s, &format!("{name}.kv_src"), r * r * c, c);
            register_norm(s, &format!("{name}.kv_norm"), c);
        }
        KvSource::Increase(r) => {
            register_linear(s, &format!("{name}.kv_src"), c, r * r * c);
            register_norm(s, &format!("{name}.kv_norm"), c);
        }
    }
    register_linear(s, &format!("{name}.k"), c, c);
    register_linear(s, &format!("{name}.v"), c, c);
    register_linear(s, &format!("{name}.o"), c, c);
}

pub(crate) fn register_block<T: Scalar>(s: &mut ParamStore<T>, name: &str, c: usize, mlp_ratio: usize, kv: KvSource) {
    register_norm(s, &format!("{name}.norm1"), c);
    register_attention(s, &format!("{name}.attn"), c, kv);
    register_norm(s, &format!("{name}.norm2"), c);
    register_linear(s, &format!("{name}.fc1"), c, mlp_ratio * c);
    register_linear(s, &format!("{name}.fc2"), mlp_ratio * c, c);
}

pub(crate) fn linear<'t, T: Scalar>(p: &Bound<'_, 't, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    x.linear(p.get(&format!("{name}.w")), Some(p.get(&format!("{name}.b"))))
}

pub(crate) fn norm<'t, T: Scalar>(p: &Bound<'_, 't, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    x.layer_norm(p.get(&format!("{name}.g")), p.get(&format!("{name}.b")), T::lit(LN_EPS))
}

/// Side of the square grid holding `len` tokens.
pub(crate) fn square_side(len: usize) -> Result<usize> {
    let g = (len as f64).sqrt().round() as usize;
    if g * g != len {
        return Err(Error::Shape(format!("{len} tokens do not form a square grid")));
    }
    Ok(g)
}

/// Multi-head attention over `x: [N, L, C]` with keys and values drawn
/// from `kv`. Returns `[N, L, C]`.
pub(crate) fn attention<'t, T: Scalar>(
    p: &Bound<'_, 't, T>,
    name: &str,
    x: Var<'t, T>,
    heads: usize,
    kv: KvSource,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("attention expects [N, L, C], got {shape:?}")));
    }
    let (n, l, c) = (shape[0], shape[1], shape[2]);
    if c % heads != 0 {
        return Err(Error::Shape(format!("width {c} not divisible by {heads} heads")));
    }
    let q = linear(p, &format!("{name}.q"), x);
    let src = match kv {
        KvSource::Plain => x,
        KvSource::Reduce(r) => {
            let g = square_side(l)?;
            if g % r != 0 {
                return Err(Error::Shape(format!("grid {g} not divisible by reduction {r}")));
            }
            let merged = x.reshape(&[n, g, g, c]).patchify(r).reshape(&[n, l / (r * r), r * r * c]);
            norm(p, &format!("{name}.kv_norm"), linear(p, &format!("{name}.kv_src"), merged))
        }
        KvSource::Increase(r) => {
            let g = square_side(l)?;
            let expanded = linear(p, &format!("{name}.kv_src"), x)
                .reshape(&[n, g, g, r * r * c])
                .unpatchify(r)
                .reshape(&[n, l * r * r, c]);
            norm(p, &format!("{name}.kv_norm"), expanded)
        }
    };
    let k = linear(p, &format!("{name}.k"), src);
    let v = linear(p, &format!("{name}.v"), src);
    Ok(linear(p, &format!("{name}.o"), Var::attention(q, k, v, heads)))
}

/// `x + attn(norm1(x))`, then `x + mlp(norm2(x))`.
pub(crate) fn block<'t, T: Scalar>(
    p: &Bound<'_, 't, T>,
    name: &str,
    x: Var<'t, T>,
    heads: usize,
    kv: KvSource,
) -> Result<Var<'t, T>> {
    let h = norm(p, &format!("{name}.norm1"), x);
    let x = x.add(attention(p, &format!("{name}.attn"), h, heads, kv)?);
    let h = norm(p, &format!("{name}.norm2"), x);
    let h = linear(p, &format!("{name}.fc1"), h).gelu();
    Ok(x.add(linear(p, &format!("{name}.fc2"), h)))
}
