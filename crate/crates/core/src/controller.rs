//! LSTM controller and the output heads that turn its hidden state into
//! memory commands.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::lie_groups::{normalize_var, ActionVar, Manifold};
use crate::models::{ModelConfig, ModelKind, TemperatureMode, Weighting};
use crate::params::{init_bound, BoundParams, InitScheme, Linear, ParamId, ParamSet};
use crate::scalar::Scalar;

/// Added under the square root of the shift norm so the bound scaling is
/// smooth at zero.
const SHIFT_NORM_EPS: f64 = 1e-12;
/// Lower bound of the emitted read temperature.
pub const TEMPERATURE_FLOOR: f64 = 0.1;

#[derive(Clone, Debug)]
struct LstmLayer {
    weight: ParamId,
    bias: ParamId,
    input: usize,
    hidden: usize,
}

/// Stacked LSTM; gate rows are ordered input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct Lstm {
    layers: Vec<LstmLayer>,
}

/// Per-layer `(h, c)`.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub layers: Vec<(Var, Var)>,
}

impl LstmState {
    pub fn top(&self) -> Var {
        self.layers.last().expect("at least one layer").0
    }
}

impl Lstm {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        input: usize,
        hidden: usize,
        layers: usize,
        init: InitScheme,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                let bound = init_bound(init, inp + hidden);
                let weight = params.add_uniform(format!("lstm.{l}.weight"), &[4 * hidden, inp + hidden], bound, rng);
                let bias = params.add_uniform(format!("lstm.{l}.bias"), &[4 * hidden], bound, rng);
                let b = params.get_mut(bias).data_mut();
                for v in &mut b[hidden..2 * hidden] {
                    *v = S::c(forget_bias);
                }
                LstmLayer { weight, bias, input: inp, hidden }
            })
            .collect();
        Lstm { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn initial_state<S: Scalar>(&self, g: &mut Graph<S>) -> LstmState {
        LstmState {
            layers: self
                .layers
                .iter()
                .map(|l| (g.zeros(&[l.hidden]), g.zeros(&[l.hidden])))
                .collect(),
        }
    }

    /// One time step. Returns the new state and the top layer's hidden vector.
    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, bound: &BoundParams, x: Var, state: &LstmState) -> Result<(LstmState, Var)> {
        if g.value(x).len() != self.input_size() {
            return Err(crate::Error::InvalidArgument(format!(
                "controller input width {} != {}",
                g.value(x).len(),
                self.input_size()
            )));
        }
        let mut input = x;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (layer, &(h, c)) in self.layers.iter().zip(&state.layers) {
            let (h2, c2) = lstm_cell(g, bound.get(layer.weight), bound.get(layer.bias), layer.hidden, input, h, c)?;
            layers.push((h2, c2));
            input = h2;
        }
        Ok((LstmState { layers }, input))
    }
}

/// Standard LSTM cell on explicit weight/bias nodes.
pub fn lstm_cell<S: Scalar>(g: &mut Graph<S>, weight: Var, bias: Var, hidden: usize, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let xh = g.concat(&[x, h])?;
    let z = g.matmul(weight, xh)?;
    let z = g.add(z, bias)?;
    let zi = g.slice(z, 0, hidden)?;
    let zf = g.slice(z, hidden, hidden)?;
    let zo = g.slice(z, 2 * hidden, hidden)?;
    let zg = g.slice(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let o = g.sigmoid(zo)?;
    let cand = g.tanh(zg)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c2 = g.add(keep, write)?;
    let squashed = g.tanh(c2)?;
    let h2 = g.mul(o, squashed)?;
    Ok((h2, c2))
}

/// Commands for one moving head (read or write) of a Lie-access model.
#[derive(Clone, Copy, Debug)]
pub struct MotionOutputs {
    /// Candidate action `a(h)`.
    pub action: ActionVar,
    /// Random-access key `q̃(h)`.
    pub random_key: Var,
    /// Interpolation gate `t(h)`; 1 keeps the current head.
    pub gate: Var,
    /// Action interpolation gate `r(h)` when enabled; 1 takes the candidate.
    pub action_gate: Option<Var>,
}

/// Everything the memory side needs from one controller step.
#[derive(Clone, Debug, Default)]
pub struct HeadOutputs {
    pub read: Option<MotionOutputs>,
    pub write: Option<MotionOutputs>,
    pub value: Option<Var>,
    pub strength: Option<Var>,
    pub temperature: Option<Var>,
    /// RAM read pointer / RAM-Tape random-access key.
    pub pointer: Option<Var>,
    /// RAM write key.
    pub write_key: Option<Var>,
    /// RAM-Tape 3-way selector over (random key, k_L, k_R).
    pub tape_gate: Option<Var>,
    pub sharpening: Option<Var>,
}

#[derive(Clone, Debug, Default)]
struct Offsets {
    read: Option<MotionOffsets>,
    write: Option<MotionOffsets>,
    value: usize,
    strength: usize,
    temperature: Option<usize>,
    pointer: Option<usize>,
    write_key: Option<usize>,
    tape_gate: Option<usize>,
    sharpening: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct MotionOffsets {
    action: usize,
    random_key: usize,
    gate: usize,
    action_gate: Option<usize>,
}

/// A single linear layer from `h` to every raw head output, sliced per head.
#[derive(Clone, Debug)]
pub struct Heads {
    linear: Linear,
    offsets: Offsets,
    manifold: Option<Manifold>,
    key_dim: usize,
    width: usize,
    angle_magnitude: Option<ParamId>,
}

impl Heads {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        config: &ModelConfig,
        hidden: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Option<Self> {
        let manifold = config.manifold();
        let key_dim = config.key_dim;
        let width = config.memory_width;
        let mut off = Offsets::default();
        let mut next = 0usize;
        let mut take = |n: usize| {
            let at = next;
            next += n;
            at
        };
        let mut biases: Vec<(usize, f64)> = Vec::new();
        match config.kind {
            ModelKind::Lstm => return None,
            ModelKind::Lantm | ModelKind::Slantm => {
                let action_len = if config.kind == ModelKind::Lantm { 2 } else { 4 };
                let mut motion = || {
                    let m = MotionOffsets {
                        action: take(action_len),
                        random_key: take(key_dim),
                        gate: take(1),
                        action_gate: config.action_interpolation.then(|| take(1)),
                    };
                    biases.push((m.gate, config.gate_bias));
                    if let Some(r) = m.action_gate {
                        biases.push((r, config.action_gate_bias));
                    }
                    m
                };
                off.read = Some(motion());
                off.write = Some(motion());
                if config.weighting == Weighting::Softmax && config.temperature == TemperatureMode::Emitted {
                    off.temperature = Some(take(1));
                }
            }
            ModelKind::Ram | ModelKind::RamTape => {
                off.pointer = Some(take(key_dim));
                off.write_key = Some(take(key_dim));
                if config.kind == ModelKind::RamTape {
                    off.tape_gate = Some(take(3));
                    if config.sharpen {
                        off.sharpening = Some(take(1));
                    }
                }
            }
        }
        off.value = take(width);
        off.strength = take(1);
        let linear = Linear::new(params, "heads", hidden, next, init, rng);
        {
            let b = params.get_mut(linear.bias).data_mut();
            for (at, v) in biases {
                b[at] = S::c(v);
            }
        }
        let angle_magnitude = (config.kind == ModelKind::Slantm && config.angle_bound)
            .then(|| params.add("heads.angle_magnitude", Tensor::scalar(S::c(config.angle_magnitude_init))));
        Some(Heads { linear, offsets: off, manifold, key_dim, width, angle_magnitude })
    }

    /// Number of raw outputs of the shared head layer.
    pub fn raw_size(&self) -> usize {
        self.linear.output
    }

    /// Maps `h` to head commands. The write head and the value/strength heads
    /// are skipped when `with_write` is false.
    pub fn emit<S: Scalar>(&self, g: &mut Graph<S>, bound: &BoundParams, h: Var, with_write: bool) -> Result<HeadOutputs> {
        let raw = self.linear.forward(g, bound, h)?;
        let o = &self.offsets;
        let mut out = HeadOutputs::default();
        if let Some(m) = o.read {
            out.read = Some(self.motion(g, bound, raw, m)?);
        }
        if with_write {
            if let Some(m) = o.write {
                out.write = Some(self.motion(g, bound, raw, m)?);
            }
            let v = g.slice(raw, o.value, self.width)?;
            out.value = Some(v);
            let s = g.slice(raw, o.strength, 1)?;
            out.strength = Some(g.sigmoid(s)?);
            if let Some(at) = o.write_key {
                out.write_key = Some(g.slice(raw, at, self.key_dim)?);
            }
        }
        if let Some(at) = o.temperature {
            let u = g.slice(raw, at, 1)?;
            let sp = g.softplus(u)?;
            out.temperature = Some(g.add_const(sp, S::c(TEMPERATURE_FLOOR))?);
        }
        if let Some(at) = o.pointer {
            out.pointer = Some(g.slice(raw, at, self.key_dim)?);
        }
        if let Some(at) = o.tape_gate {
            let u = g.slice(raw, at, 3)?;
            out.tape_gate = Some(g.softmax(u)?);
        }
        if let Some(at) = o.sharpening {
            let u = g.slice(raw, at, 1)?;
            let sp = g.softplus(u)?;
            out.sharpening = Some(g.add_const(sp, S::one())?);
        }
        Ok(out)
    }

    fn motion<S: Scalar>(&self, g: &mut Graph<S>, bound: &BoundParams, raw: Var, m: MotionOffsets) -> Result<MotionOutputs> {
        let action = match self.manifold {
            Some(Manifold::Plane) => {
                let u = g.slice(raw, m.action, 2)?;
                ActionVar::Shift(bounded_shift(g, u)?)
            }
            _ => {
                let u_axis = g.slice(raw, m.action, 3)?;
                let axis = normalize_var(g, u_axis)?;
                let u_angle = g.slice(raw, m.action + 3, 1)?;
                let angle = match self.angle_magnitude {
                    Some(p) => {
                        let t = g.tanh(u_angle)?;
                        g.mul(t, bound.get(p))?
                    }
                    None => u_angle,
                };
                ActionVar::Rotation { axis, angle }
            }
        };
        let mut random_key = g.slice(raw, m.random_key, self.key_dim)?;
        if self.manifold == Some(Manifold::Sphere) {
            random_key = normalize_var(g, random_key)?;
        }
        let t = g.slice(raw, m.gate, 1)?;
        let gate = g.sigmoid(t)?;
        let action_gate = match m.action_gate {
            Some(at) => {
                let r = g.slice(raw, at, 1)?;
                Some(g.sigmoid(r)?)
            }
            None => None,
        };
        Ok(MotionOutputs { action, random_key, gate, action_gate })
    }
}

/// `u · tanh(‖u‖) / ‖u‖`, which has norm below one and tends to 0 at `u = 0`.
pub fn bounded_shift<S: Scalar>(g: &mut Graph<S>, u: Var) -> Result<Var> {
    let sq = g.dot(u, u)?;
    let sq = g.add_const(sq, S::c(SHIFT_NORM_EPS))?;
    let n = g.powf(sq, S::c(0.5))?;
    let t = g.tanh(n)?;
    let factor = g.div(t, n)?;
    Ok(g.mul(u, factor)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_zero_input_gives_zero_hidden() {
        let mut g = Graph::<f64>::new();
        let w = g.zeros(&[8, 5]);
        let b = g.zeros(&[8]);
        let x = g.zeros(&[3]);
        let h = g.zeros(&[2]);
        let c = g.zeros(&[2]);
        let (h2, c2) = lstm_cell(&mut g, w, b, 2, x, h, c).unwrap();
        assert_eq!(g.data(h2), &[0.0, 0.0]);
        assert_eq!(g.data(c2), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut g = Graph::<f64>::new();
        let hidden = 2;
        let w = g.zeros(&[8, 3 + hidden]);
        // input gate -40, forget gate +40
        let b = g.vector(vec![-40.0, -40.0, 40.0, 40.0, 0.0, 0.0, 0.0, 0.0]);
        let x = g.vector(vec![0.3, -0.2, 0.9]);
        let h = g.zeros(&[hidden]);
        let c = g.vector(vec![0.7, -1.3]);
        let (_, c2) = lstm_cell(&mut g, w, b, hidden, x, h, c).unwrap();
        assert!((g.data(c2)[0] - 0.7).abs() < 1e-12);
        assert!((g.data(c2)[1] + 1.3).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::<f64>::new();
        let lstm = Lstm::new(&mut params, 4, 3, 1, InitScheme::FanIn, 1.0, &mut rng);
        let mut g = Graph::with_mode(Mode::Exact);
        let bound = params.bind(&mut g);
        let st = lstm.initial_state(&mut g);
        let x = g.zeros(&[5]);
        assert!(lstm.step(&mut g, &bound, x, &st).is_err());
    }

    #[test]
    fn forget_bias_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::<f32>::new();
        let _ = Lstm::new(&mut params, 4, 3, 2, InitScheme::Uniform1, 1.0, &mut rng);
        for l in 0..2 {
            let b = params.get(params.find(&format!("lstm.{l}.bias")).unwrap());
            assert_eq!(&b.data()[3..6], &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn shift_bound_at_zero_and_large() {
        let mut g = Graph::<f64>::new();
        let u = g.vector(vec![0.0, 0.0]);
        let a = bounded_shift(&mut g, u).unwrap();
        assert_eq!(g.data(a), &[0.0, 0.0]);
        let u = g.vector(vec![300.0, -400.0]);
        let a = bounded_shift(&mut g, u).unwrap();
        let n = g.value(a).norm_sq().sqrt();
        assert!(n <= 1.0 && n > 0.999);
    }
}
