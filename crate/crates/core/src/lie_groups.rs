//! Key-space manifolds and the Lie group actions that move heads over them.
//!
//! Two key spaces are supported: the plane ℝ² acted on by translations, and
//! the unit sphere S² acted on by rotations in axis-angle form. Every
//! operation exists twice: on plain values ([`Key`], [`LieAction`]) and on
//! graph nodes ([`ActionVar`] and the `*_var` functions) for use inside the
//! differentiable read/write path.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cross3, dot_slice, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Offset added along `q` when a sphere interpolation lands on the origin in
/// training mode.
pub const DEGENERATE_NUDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manifold {
    Plane,
    Sphere,
}

impl Manifold {
    pub fn dim(self) -> usize {
        match self {
            Manifold::Plane => 2,
            Manifold::Sphere => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Key<S> {
    Plane([S; 2]),
    Sphere([S; 3]),
}

impl<S: Scalar> Key<S> {
    pub fn plane(x: S, y: S) -> Self {
        Key::Plane([x, y])
    }

    /// Sphere key, normalized on construction.
    pub fn sphere(v: [S; 3]) -> Result<Self> {
        let n = norm(&v);
        if n == S::zero() {
            return Err(Error::DegenerateInterpolation("zero vector has no direction"));
        }
        Ok(Key::Sphere([v[0] / n, v[1] / n, v[2] / n]))
    }

    pub fn coords(&self) -> &[S] {
        match self {
            Key::Plane(c) => c,
            Key::Sphere(c) => c,
        }
    }

    pub fn manifold(&self) -> Manifold {
        match self {
            Key::Plane(_) => Manifold::Plane,
            Key::Sphere(_) => Manifold::Sphere,
        }
    }

    /// Canonical starting position: the origin or the north pole.
    pub fn origin(manifold: Manifold) -> Self {
        match manifold {
            Manifold::Plane => Key::Plane([S::zero(); 2]),
            Manifold::Sphere => Key::Sphere([S::zero(), S::zero(), S::one()]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LieAction<S> {
    Shift { alpha: S, beta: S },
    Rotation { axis: [S; 3], angle: S },
}

impl<S: Scalar> LieAction<S> {
    pub fn identity(manifold: Manifold) -> Self {
        match manifold {
            Manifold::Plane => LieAction::Shift { alpha: S::zero(), beta: S::zero() },
            Manifold::Sphere => LieAction::Rotation { axis: [S::zero(), S::zero(), S::one()], angle: S::zero() },
        }
    }

    /// Rotation with the axis normalized.
    pub fn rotation(axis: [S; 3], angle: S) -> Result<Self> {
        let n = norm(&axis);
        if n == S::zero() {
            return Err(Error::DegenerateInterpolation("rotation axis is zero"));
        }
        Ok(LieAction::Rotation { axis: [axis[0] / n, axis[1] / n, axis[2] / n], angle })
    }

    pub fn inverse(&self) -> Self {
        match *self {
            LieAction::Shift { alpha, beta } => LieAction::Shift { alpha: -alpha, beta: -beta },
            LieAction::Rotation { axis, angle } => LieAction::Rotation { axis, angle: -angle },
        }
    }

    /// Acts on `key`.
    pub fn apply(&self, key: &Key<S>) -> Result<Key<S>> {
        match (self, key) {
            (LieAction::Shift { alpha, beta }, Key::Plane([x, y])) => Ok(Key::Plane([*x + *alpha, *y + *beta])),
            (LieAction::Rotation { axis, angle }, Key::Sphere(q)) => Ok(Key::Sphere(rodrigues(axis, *angle, q))),
            _ => Err(Error::VariantMismatch("shifts act on the plane, rotations on the sphere")),
        }
    }
}

/// Inverse of an action.
pub fn inverse<S: Scalar>(action: &LieAction<S>) -> LieAction<S> {
    action.inverse()
}

pub fn apply<S: Scalar>(action: &LieAction<S>, key: &Key<S>) -> Result<Key<S>> {
    action.apply(key)
}

/// Composition of two shifts; `apply(compose(a, b), k) == apply(a, apply(b, k))`.
pub fn compose_shifts<S: Scalar>(a: &LieAction<S>, b: &LieAction<S>) -> Result<LieAction<S>> {
    match (a, b) {
        (LieAction::Shift { alpha: a1, beta: b1 }, LieAction::Shift { alpha: a2, beta: b2 }) => {
            Ok(LieAction::Shift { alpha: *a1 + *a2, beta: *b1 + *b2 })
        }
        _ => Err(Error::VariantMismatch("compose_shifts takes two shifts")),
    }
}

/// Euclidean distance; chordal on the sphere.
pub fn distance<S: Scalar>(a: &Key<S>, b: &Key<S>) -> Result<S> {
    if a.manifold() != b.manifold() {
        return Err(Error::VariantMismatch("distance between different key spaces"));
    }
    let d: S = a.coords().iter().zip(b.coords()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(d.sqrt())
}

/// `t·q + (1−t)·q̃`, projected back onto the sphere for sphere keys.
pub fn interpolate_keys<S: Scalar>(t: S, q: &Key<S>, q_tilde: &Key<S>, mode: Mode) -> Result<Key<S>> {
    check_unit_interval(t, "t")?;
    let one_t = S::one() - t;
    match (q, q_tilde) {
        (Key::Plane(a), Key::Plane(b)) => Ok(Key::Plane([t * a[0] + one_t * b[0], t * a[1] + one_t * b[1]])),
        (Key::Sphere(a), Key::Sphere(b)) => {
            let mut m = [0, 1, 2].map(|i| t * a[i] + one_t * b[i]);
            if norm(&m) == S::zero() {
                match mode {
                    Mode::Exact => return Err(Error::DegenerateInterpolation("sphere interpolation hit the origin")),
                    Mode::Train => m = [0, 1, 2].map(|i| m[i] + S::c(DEGENERATE_NUDGE) * a[i]),
                }
            }
            Key::sphere(m)
        }
        _ => Err(Error::VariantMismatch("interpolating keys from different key spaces")),
    }
}

/// Blends a candidate action with the previous one through gate `r`.
pub fn interpolate_actions<S: Scalar>(r: S, candidate: &LieAction<S>, previous: &LieAction<S>) -> Result<LieAction<S>> {
    check_unit_interval(r, "r")?;
    let one_r = S::one() - r;
    match (candidate, previous) {
        (LieAction::Shift { alpha: a1, beta: b1 }, LieAction::Shift { alpha: a0, beta: b0 }) => {
            Ok(LieAction::Shift { alpha: r * *a1 + one_r * *a0, beta: r * *b1 + one_r * *b0 })
        }
        (LieAction::Rotation { axis: x1, angle: t1 }, LieAction::Rotation { axis: x0, angle: t0 }) => {
            let axis = [0, 1, 2].map(|i| r * x1[i] + one_r * x0[i]);
            if norm(&axis) == S::zero() {
                return Err(Error::DegenerateInterpolation("rotation axes cancel"));
            }
            LieAction::rotation(axis, r * *t1 + one_r * *t0)
        }
        _ => Err(Error::VariantMismatch("interpolating actions of different groups")),
    }
}

fn check_unit_interval<S: Scalar>(v: S, name: &str) -> Result<()> {
    if v >= S::zero() && v <= S::one() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")))
    }
}

fn norm<S: Scalar>(v: &[S]) -> S {
    dot_slice(v, v).sqrt()
}

fn rodrigues<S: Scalar>(axis: &[S; 3], angle: S, q: &[S; 3]) -> [S; 3] {
    let (s, c) = angle.sin_cos();
    let xq = cross3(axis, q);
    let along = dot_slice(axis, q) * (S::one() - c);
    [0, 1, 2].map(|i| q[i] * c + xq[i] * s + axis[i] * along)
}

// ---------------------------------------------------------------------------
// Differentiable forms

/// An action whose parameters live on a graph.
#[derive(Clone, Copy, Debug)]
pub enum ActionVar {
    /// `[2]` translation.
    Shift(Var),
    /// `[3]` unit axis and `[1]` angle.
    Rotation { axis: Var, angle: Var },
}

impl ActionVar {
    pub fn identity<S: Scalar>(g: &mut Graph<S>, manifold: Manifold) -> Self {
        match LieAction::<S>::identity(manifold) {
            LieAction::Shift { .. } => ActionVar::Shift(g.vector(vec![S::zero(); 2])),
            LieAction::Rotation { axis, angle } => {
                ActionVar::Rotation { axis: g.vector(axis.to_vec()), angle: g.vector(vec![angle]) }
            }
        }
    }

    /// Reads the current parameter values back as a plain action.
    pub fn value<S: Scalar>(&self, g: &Graph<S>) -> LieAction<S> {
        match *self {
            ActionVar::Shift(v) => {
                let d = g.data(v);
                LieAction::Shift { alpha: d[0], beta: d[1] }
            }
            ActionVar::Rotation { axis, angle } => {
                let a = g.data(axis);
                LieAction::Rotation { axis: [a[0], a[1], a[2]], angle: g.item(angle) }
            }
        }
    }
}

/// L2 normalization `x / ‖x‖`.
pub fn normalize_var<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let n = g.l2_norm(x)?;
    Ok(g.div(x, n)?)
}

/// Acts on a key node: translation on the plane, Rodrigues on the sphere.
pub fn apply_var<S: Scalar>(g: &mut Graph<S>, action: &ActionVar, key: Var) -> Result<Var> {
    match (*action, g.shape(key).len(), g.value(key).len()) {
        (ActionVar::Shift(s), 1, 2) => Ok(g.add(key, s)?),
        (ActionVar::Rotation { axis, angle }, 1, 3) => {
            let cos = g.cos(angle)?;
            let sin = g.sin(angle)?;
            let a = g.mul(key, cos)?;
            let xq = g.cross(axis, key)?;
            let b = g.mul(xq, sin)?;
            let proj = g.dot(axis, key)?;
            let one_minus_cos = g.one_minus(cos)?;
            let coef = g.mul(proj, one_minus_cos)?;
            let c = g.mul(axis, coef)?;
            let ab = g.add(a, b)?;
            Ok(g.add(ab, c)?)
        }
        _ => Err(Error::VariantMismatch("action does not match key dimension")),
    }
}

/// Graph form of [`interpolate_keys`]; `t` is a one-element node.
pub fn interpolate_keys_var<S: Scalar>(g: &mut Graph<S>, manifold: Manifold, t: Var, q: Var, q_tilde: Var) -> Result<Var> {
    let one_t = g.one_minus(t)?;
    let a = g.mul(q, t)?;
    let b = g.mul(q_tilde, one_t)?;
    let mut m = g.add(a, b)?;
    if manifold == Manifold::Plane {
        return Ok(m);
    }
    if g.value(m).norm_sq() == S::zero() {
        match g.mode() {
            Mode::Exact => return Err(Error::DegenerateInterpolation("sphere interpolation hit the origin")),
            Mode::Train => {
                let nudge = g.scale(q, S::c(DEGENERATE_NUDGE))?;
                m = g.add(m, nudge)?;
            }
        }
    }
    normalize_var(g, m)
}

/// Graph form of [`interpolate_actions`]; `r` is a one-element node.
pub fn interpolate_actions_var<S: Scalar>(
    g: &mut Graph<S>,
    r: Var,
    candidate: &ActionVar,
    previous: &ActionVar,
) -> Result<ActionVar> {
    let one_r = g.one_minus(r)?;
    let blend = |g: &mut Graph<S>, a: Var, b: Var| -> Result<Var> {
        let x = g.mul(a, r)?;
        let y = g.mul(b, one_r)?;
        Ok(g.add(x, y)?)
    };
    match (*candidate, *previous) {
        (ActionVar::Shift(a), ActionVar::Shift(b)) => Ok(ActionVar::Shift(blend(g, a, b)?)),
        (ActionVar::Rotation { axis: x1, angle: t1 }, ActionVar::Rotation { axis: x0, angle: t0 }) => {
            let axis = blend(g, x1, x0)?;
            if g.value(axis).norm_sq() == S::zero() {
                return Err(Error::DegenerateInterpolation("rotation axes cancel"));
            }
            let axis = normalize_var(g, axis)?;
            let angle = blend(g, t1, t0)?;
            Ok(ActionVar::Rotation { axis, angle })
        }
        _ => Err(Error::VariantMismatch("interpolating actions of different groups")),
    }
}

/// Squared Euclidean distance between two key nodes.
pub fn sq_distance_var<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    Ok(g.dot(d, d)?)
}
