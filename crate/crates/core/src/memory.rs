//! The append-only weighted key/value store and its read weightings.
//!
//! All weighting functions return a `[n]` weight node over the `n` stored
//! entries that is nonnegative and sums to one. Reads are linear smoothing of
//! the stored values under those weights.

use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Added to squared distances by the inverse-square weighting in training mode.
pub const INVERSE_SQUARE_EPS: f64 = 1e-12;

/// Ordered set of `(key, value, strength)` entries held as graph nodes.
///
/// Keys, values and strengths are kept stacked (`[n, d]`, `[n, m]`, `[n]`) so
/// a read touches a constant number of nodes regardless of `n`.
#[derive(Clone, Debug)]
pub struct MemoryStore {
    key_dim: usize,
    width: usize,
    len: usize,
    keys: Option<Var>,
    values: Option<Var>,
    strengths: Option<Var>,
}

impl MemoryStore {
    pub fn new(key_dim: usize, width: usize) -> Self {
        MemoryStore { key_dim, width, len: 0, keys: None, values: None, strengths: None }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[n, key_dim]` stacked keys, `None` when empty.
    pub fn keys(&self) -> Option<Var> {
        self.keys
    }

    pub fn values(&self) -> Option<Var> {
        self.values
    }

    pub fn strengths(&self) -> Option<Var> {
        self.strengths
    }

    /// Builds a store from plain entries, mostly for tests and tooling.
    pub fn from_entries<S: Scalar>(g: &mut Graph<S>, keys: &[Vec<S>], values: &[Vec<S>], strengths: &[S]) -> Result<Self> {
        let key_dim = keys.first().map_or(0, Vec::len);
        let width = values.first().map_or(0, Vec::len);
        let mut store = MemoryStore::new(key_dim, width);
        for ((k, v), &s) in keys.iter().zip(values).zip(strengths) {
            let k = g.vector(k.clone());
            let v = g.vector(v.clone());
            let s = g.scalar(s);
            store = append_write(g, &store, k, v, s)?;
        }
        Ok(store)
    }

    fn parts(&self) -> Result<(Var, Var, Var)> {
        match (self.keys, self.values, self.strengths) {
            (Some(k), Some(v), Some(s)) => Ok((k, v, s)),
            _ => Err(Error::InvalidArgument("read from an empty memory store".into())),
        }
    }
}

/// Appends `(key, value, strength)`; the input store is left untouched.
pub fn append_write<S: Scalar>(g: &mut Graph<S>, store: &MemoryStore, key: Var, value: Var, strength: Var) -> Result<MemoryStore> {
    if g.value(key).len() != store.key_dim || g.value(value).len() != store.width || g.value(strength).len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "write of key {:?} / value {:?} into store with key_dim {} and width {}",
            g.shape(key),
            g.shape(value),
            store.key_dim,
            store.width
        )));
    }
    let s = g.item(strength);
    if !(S::zero()..=S::one()).contains(&s) {
        return Err(Error::InvalidArgument(format!("strength {s} outside [0, 1]")));
    }
    let key_row = g.reshape(key, vec![1, store.key_dim])?;
    let value_row = g.reshape(value, vec![1, store.width])?;
    let strength = g.reshape(strength, vec![1])?;
    let (keys, values, strengths) = match store.parts() {
        Ok((k, v, st)) => (g.concat(&[k, key_row])?, g.concat(&[v, value_row])?, g.concat(&[st, strength])?),
        Err(_) => (key_row, value_row, strength),
    };
    Ok(MemoryStore {
        key_dim: store.key_dim,
        width: store.width,
        len: store.len + 1,
        keys: Some(keys),
        values: Some(values),
        strengths: Some(strengths),
    })
}

/// `[n]` squared distances from `q` to every key.
pub fn squared_distances<S: Scalar>(g: &mut Graph<S>, q: Var, store: &MemoryStore) -> Result<Var> {
    let (keys, _, _) = store.parts()?;
    if g.value(q).len() != store.key_dim {
        return Err(Error::InvalidArgument("query dimension differs from key dimension".into()));
    }
    let diff = g.sub(keys, q)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum_last(sq)?)
}

/// Inverse-square weighting `s_i d_i^-2 / Σ_j s_j d_j^-2`.
///
/// Training mode adds [`INVERSE_SQUARE_EPS`] to every squared distance.
/// Exact mode returns the limit value when the head sits on one or more keys:
/// the mass goes to the coincident keys in proportion to their strengths.
/// If every strength is zero the weights are uniform over the nearest keys.
pub fn read_inverse_square<S: Scalar>(g: &mut Graph<S>, q: Var, store: &MemoryStore) -> Result<Var> {
    let (_, _, strengths) = store.parts()?;
    let d2 = squared_distances(g, q, store)?;
    let d2v = g.data(d2).to_vec();
    let sv = g.data(strengths).to_vec();

    if sv.iter().all(|&s| s == S::zero()) {
        return Ok(uniform_over_extreme(g, &d2v, false));
    }
    let unnormalized = match g.mode() {
        Mode::Train => {
            let shifted = g.add_const(d2, S::c(INVERSE_SQUARE_EPS))?;
            g.div(strengths, shifted)?
        }
        Mode::Exact => {
            if d2v.iter().any(|&d| d == S::zero()) {
                let hits: Vec<S> = d2v.iter().zip(&sv).map(|(&d, &s)| if d == S::zero() { s } else { S::zero() }).collect();
                let total: S = hits.iter().copied().sum();
                if total > S::zero() {
                    let w = hits.into_iter().map(|h| h / total).collect();
                    return Ok(g.constant(Tensor::vector(w)));
                }
                // coincident keys all have zero strength; the rest carry the limit
                let masked: Vec<S> = d2v.iter().map(|&d| if d == S::zero() { S::infinity() } else { d }).collect();
                let masked = g.vector(masked);
                let inv = g.powf(masked, -S::one())?;
                g.mul(strengths, inv)?
            } else {
                g.div(strengths, d2)?
            }
        }
    };
    normalize(g, unnormalized)
}

/// Annealed softmax weighting `s_i exp(-d_i²/T) / Σ_j s_j exp(-d_j²/T)`.
pub fn read_softmax<S: Scalar>(g: &mut Graph<S>, q: Var, store: &MemoryStore, temperature: Var) -> Result<Var> {
    let t = g.item(temperature);
    if g.value(temperature).len() != 1 || t <= S::zero() {
        return Err(Error::InvalidArgument(format!("temperature must be a positive scalar, got {t}")));
    }
    let d2 = squared_distances(g, q, store)?;
    let scaled = g.div(d2, temperature)?;
    let logits = g.neg(scaled)?;
    let (_, _, strengths) = store.parts()?;
    weighted_softmax(g, logits, strengths)
}

/// RAM weighting `s_i exp⟨q,k_i⟩ / Σ_j s_j exp⟨q,k_j⟩`.
pub fn read_ram<S: Scalar>(g: &mut Graph<S>, q: Var, store: &MemoryStore) -> Result<Var> {
    let (keys, _, strengths) = store.parts()?;
    if g.value(q).len() != store.key_dim {
        return Err(Error::InvalidArgument("pointer dimension differs from key dimension".into()));
    }
    let logits = g.matmul(keys, q)?;
    weighted_softmax(g, logits, strengths)
}

/// `s_i exp(z_i) / Σ_j s_j exp(z_j)` with max subtraction. All-zero strengths
/// fall back to uniform weights over the largest logits.
pub fn weighted_softmax<S: Scalar>(g: &mut Graph<S>, logits: Var, strengths: Var) -> Result<Var> {
    let z = g.data(logits).to_vec();
    if g.data(strengths).iter().all(|&s| s == S::zero()) {
        return Ok(uniform_over_extreme(g, &z, true));
    }
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    let shifted = g.add_const(logits, -max)?;
    let e = g.exp(shifted)?;
    let u = g.mul(strengths, e)?;
    normalize(g, u)
}

fn normalize<S: Scalar>(g: &mut Graph<S>, u: Var) -> Result<Var> {
    let total = g.sum(u)?;
    Ok(g.div(u, total)?)
}

fn uniform_over_extreme<S: Scalar>(g: &mut Graph<S>, scores: &[S], largest: bool) -> Var {
    let best = if largest {
        scores.iter().copied().fold(S::neg_infinity(), S::max)
    } else {
        scores.iter().copied().fold(S::infinity(), S::min)
    };
    let count = scores.iter().filter(|&&v| v == best).count();
    let w = scores.iter().map(|&v| if v == best { S::one() / S::c(count as f64) } else { S::zero() }).collect();
    g.constant(Tensor::vector(w))
}

/// Linear smoothing `Σ_i w_i v_i`; the zero vector for an empty store.
pub fn smooth<S: Scalar>(g: &mut Graph<S>, weights: Option<Var>, store: &MemoryStore) -> Result<Var> {
    let Some(w) = weights else {
        return Ok(g.zeros(&[store.width]));
    };
    if store.is_empty() {
        return Ok(g.zeros(&[store.width]));
    }
    let (_, values, _) = store.parts()?;
    if g.value(w).len() != store.len {
        return Err(Error::InvalidArgument(format!("{} weights for {} entries", g.value(w).len(), store.len)));
    }
    Ok(g.matmul(w, values)?)
}

/// Soft tape head move `q'_j = q_{j-1}K_{+1} + q_j K_0 + q_{j+1}K_{-1}`.
///
/// `kernel` is `(K_{-1}, K_0, K_{+1})`. Mass shifted past either end is lost
/// and the result is renormalized; losing everything is an error.
pub fn tape_shift<S: Scalar>(g: &mut Graph<S>, q: Var, kernel: Var) -> Result<Var> {
    let n = g.value(q).len();
    if g.value(kernel).len() != 3 {
        return Err(Error::InvalidArgument("tape kernel must have three entries".into()));
    }
    let k_left = g.slice(kernel, 0, 1)?;
    let k_stay = g.slice(kernel, 1, 1)?;
    let k_right = g.slice(kernel, 2, 1)?;
    let zero = g.zeros(&[1]);
    let (from_left, from_right) = if n == 1 {
        (zero, zero)
    } else {
        let head = g.slice(q, 0, n - 1)?;
        let tail = g.slice(q, 1, n - 1)?;
        (g.concat(&[zero, head])?, g.concat(&[tail, zero])?)
    };
    let a = g.mul(from_left, k_right)?;
    let b = g.mul(q, k_stay)?;
    let c = g.mul(from_right, k_left)?;
    let ab = g.add(a, b)?;
    let raw = g.add(ab, c)?;
    if g.data(raw).iter().all(|&v| v == S::zero()) {
        return Err(Error::TapeShiftDegenerate);
    }
    normalize(g, raw)
}

/// Neighbor keys `k_L = Σ_i w_{i+1} k_i` and `k_R = Σ_i w_{i-1} k_i`, with
/// out-of-range terms contributing nothing.
pub fn neighbor_keys<S: Scalar>(g: &mut Graph<S>, weights: Var, store: &MemoryStore) -> Result<(Var, Var)> {
    let n = store.len;
    if n < 2 {
        let zl = g.zeros(&[store.key_dim]);
        let zr = g.zeros(&[store.key_dim]);
        return Ok((zl, zr));
    }
    let (keys, _, _) = store.parts()?;
    let w_next = g.slice(weights, 1, n - 1)?;
    let w_prev = g.slice(weights, 0, n - 1)?;
    let first = g.slice_rows(keys, 0, n - 1)?;
    let rest = g.slice_rows(keys, 1, n - 1)?;
    let left = g.matmul(w_next, first)?;
    let right = g.matmul(w_prev, rest)?;
    Ok((left, right))
}

/// Sharpening `w_i^γ / Σ_j w_j^γ` for `γ ≥ 1`.
pub fn sharpen<S: Scalar>(g: &mut Graph<S>, weights: Var, gamma: Var) -> Result<Var> {
    let gv = g.item(gamma);
    if gv < S::one() {
        return Err(Error::InvalidArgument(format!("sharpening exponent {gv} < 1")));
    }
    let p = g.pow(weights, gamma)?;
    normalize(g, p)
}
