//! Encoder-decoder models over the external memory: LANTM (plane keys,
//! shifts), SLANTM (sphere keys, rotations), RAM, RAM/Tape and a plain LSTM.
//!
//! The encoder consumes `<s> x_1 .. x_k </s>`, reading and then appending one
//! memory per step. The decoder is fed a fixed placeholder symbol, only reads,
//! and emits one distribution over content symbols plus end-of-output per step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::controller::{HeadOutputs, Heads, Lstm, LstmState, MotionOutputs};
use crate::error::{Error, Result};
use crate::lie_groups::{apply_var, interpolate_actions_var, interpolate_keys_var, ActionVar, Key, Manifold};
use crate::memory::{self, MemoryStore};
use crate::params::{BoundParams, InitScheme, Linear, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::trace::{HeadKind, Phase, TraceEvent};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lantm,
    Slantm,
    Ram,
    RamTape,
    Lstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lantm => "lantm",
            ModelKind::Slantm => "slantm",
            ModelKind::Ram => "ram",
            ModelKind::RamTape => "ram-tape",
            ModelKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ModelKind::Lantm, ModelKind::Slantm, ModelKind::Ram, ModelKind::RamTape, ModelKind::Lstm]
            .into_iter()
            .find(|k| k.name() == s || (s == "ram/tape" && *k == ModelKind::RamTape))
    }

    pub fn has_memory(self) -> bool {
        self != ModelKind::Lstm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    InverseSquare,
    Softmax,
}

/// Source of the softmax read temperature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TemperatureMode {
    /// Emitted by the controller every step, floored at 0.1.
    #[default]
    Emitted,
    /// `max(floor, initial · decay^update)` driven by the training loop.
    Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub weighting: Weighting,
    pub key_dim: usize,
    pub memory_width: usize,
    pub cells: usize,
    pub layers: usize,
    pub embed: usize,
    pub content_vocab: usize,
    pub angle_bound: bool,
    pub angle_magnitude_init: f64,
    pub action_interpolation: bool,
    pub sharpen: bool,
    pub forget_bias: f64,
    /// Initial bias of the random-access gate `t` (sigmoid(2) ≈ 0.88 favours the relative head).
    pub gate_bias: f64,
    /// Initial bias of the action gate `r` (negative favours the previous action).
    pub action_gate_bias: f64,
    pub temperature: TemperatureMode,
    pub temperature_initial: f64,
    pub temperature_decay: f64,
    pub temperature_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::preset(ModelKind::Lantm, 128)
    }
}

impl ModelConfig {
    /// Defaults for each model family: memory models use a 1×50 controller,
    /// embedding 14 and memory width 20; the LSTM baseline uses 1×256 with
    /// embedding 128.
    pub fn preset(kind: ModelKind, content_vocab: usize) -> Self {
        let mut c = ModelConfig {
            kind,
            weighting: Weighting::InverseSquare,
            key_dim: 2,
            memory_width: 20,
            cells: 50,
            layers: 1,
            embed: 14,
            content_vocab,
            angle_bound: false,
            angle_magnitude_init: std::f64::consts::FRAC_PI_2,
            action_interpolation: false,
            sharpen: false,
            forget_bias: 1.0,
            gate_bias: 2.0,
            action_gate_bias: -2.0,
            temperature: TemperatureMode::Emitted,
            temperature_initial: 1.0,
            temperature_decay: 0.999,
            temperature_floor: 0.1,
        };
        match kind {
            ModelKind::Slantm => c.key_dim = 3,
            ModelKind::Lstm => {
                c.cells = 256;
                c.embed = 128;
            }
            _ => {}
        }
        c
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.content_vocab)
    }

    pub fn manifold(&self) -> Option<Manifold> {
        match self.kind {
            ModelKind::Lantm => Some(Manifold::Plane),
            ModelKind::Slantm => Some(Manifold::Sphere),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.kind.name())));
        if self.cells == 0 || self.layers == 0 || self.embed == 0 || self.content_vocab == 0 {
            return bad("sizes must be positive");
        }
        match self.kind {
            ModelKind::Lantm if self.key_dim != 2 => return bad("plane keys are 2-dimensional"),
            ModelKind::Slantm if self.key_dim != 3 => return bad("sphere keys are 3-dimensional"),
            ModelKind::Ram | ModelKind::RamTape if self.key_dim == 0 => return bad("key_dim must be positive"),
            _ => {}
        }
        if self.kind.has_memory() && self.memory_width == 0 {
            return bad("memory_width must be positive");
        }
        if self.angle_bound && self.kind != ModelKind::Slantm {
            return bad("angle_bound only applies to slantm");
        }
        if self.sharpen && self.kind != ModelKind::RamTape {
            return bad("sharpen only applies to ram-tape");
        }
        if self.action_interpolation && !matches!(self.kind, ModelKind::Lantm | ModelKind::Slantm) {
            return bad("action_interpolation only applies to Lie-access models");
        }
        if self.temperature == TemperatureMode::Schedule && (self.temperature_initial <= 0.0 || self.temperature_floor <= 0.0) {
            return bad("temperature schedule must stay positive");
        }
        Ok(())
    }
}

/// Read/write head positions and the previous actions for action interpolation.
#[derive(Clone, Debug)]
pub struct HeadState {
    pub read: Var,
    pub write: Var,
    pub prev_read: ActionVar,
    pub prev_write: ActionVar,
    /// RAM/Tape neighbor keys `(k_L, k_R)` from the previous read.
    pub neighbors: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct StepState {
    pub lstm: LstmState,
    pub heads: Option<HeadState>,
    pub memory: MemoryStore,
    /// Last read vector ρ.
    pub read: Var,
}

/// What one memory step did, for traces.
#[derive(Clone, Debug, Default)]
pub struct StepRecord {
    pub read_key: Option<Var>,
    pub read_weights: Option<Var>,
    pub write_key: Option<Var>,
    pub write_strength: Option<Var>,
}

/// Decoder length policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decode {
    /// Exactly this many steps (training: `|target| + 1`).
    Steps(usize),
    /// Greedy until end-of-output or the cap.
    Greedy { max_steps: usize },
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `[output classes]` logits per decoder step.
    pub logits: Vec<Var>,
    /// Argmax class per decoder step.
    pub predictions: Vec<usize>,
    /// Greedy decoding emitted end-of-output.
    pub ended: bool,
    /// Greedy decoding hit the step cap.
    pub truncated: bool,
    /// Entries in memory after encoding.
    pub memory_len: usize,
    /// Memory size observed after every decoder step.
    pub decoder_memory_lens: Vec<usize>,
    pub trace: Vec<TraceEvent>,
}

/// Cap on greedy decoding for a target of the given length.
pub fn decode_cap(target_len: usize) -> usize {
    2 * target_len + 10
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    params: ParamSet<S>,
    embedding: ParamId,
    lstm: Lstm,
    heads: Option<Heads>,
    output: Linear,
    /// Parameter updates seen so far; drives the scheduled temperature.
    pub schedule_step: u64,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, init: InitScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let vocab = config.vocab();
        let embedding = params.add_uniform("embedding", &[vocab.input_size(), config.embed], 1.0, &mut rng);
        let input = config.embed + if config.kind.has_memory() { config.memory_width } else { 0 };
        let lstm = Lstm::new(&mut params, input, config.cells, config.layers, init, config.forget_bias, &mut rng);
        let heads = Heads::new(&mut params, &config, config.cells, init, &mut rng);
        let output = Linear::new(&mut params, "output", config.cells, vocab.output_size(), init, &mut rng);
        Ok(Model { config, params, embedding, lstm, heads, output, schedule_step: 0 })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match.
    pub fn with_params(config: ModelConfig, params: ParamSet<S>) -> Result<Self> {
        let mut model = Model::new(config, InitScheme::FanIn, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", model.params.len(), params.len())));
        }
        for id in model.params.ids() {
            let (name, t) = (model.params.name(id).to_string(), model.params.get(id));
            let other = params.find(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.get(other).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *model.params.get_mut(id) = params.get(other).clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn lstm(&self) -> &Lstm {
        &self.lstm
    }

    pub fn heads(&self) -> Option<&Heads> {
        self.heads.as_ref()
    }

    /// Temperature used when the schedule mode is active.
    pub fn scheduled_temperature(&self) -> f64 {
        let c = &self.config;
        (c.temperature_initial * c.temperature_decay.powf(self.schedule_step as f64)).max(c.temperature_floor)
    }

    pub fn initial_state(&self, g: &mut Graph<S>) -> StepState {
        let c = &self.config;
        let heads = self.config.manifold().map(|m| {
            let origin = Key::<S>::origin(m);
            HeadState {
                read: g.vector(origin.coords().to_vec()),
                write: g.vector(origin.coords().to_vec()),
                prev_read: ActionVar::identity(g, m),
                prev_write: ActionVar::identity(g, m),
                neighbors: None,
            }
        });
        let heads = match (heads, c.kind) {
            (None, ModelKind::RamTape) => Some(HeadState {
                read: g.zeros(&[c.key_dim]),
                write: g.zeros(&[c.key_dim]),
                prev_read: ActionVar::Shift(g.zeros(&[2])),
                prev_write: ActionVar::Shift(g.zeros(&[2])),
                neighbors: Some((g.zeros(&[c.key_dim]), g.zeros(&[c.key_dim]))),
            }),
            (h, _) => h,
        };
        StepState {
            lstm: self.lstm.initial_state(g),
            heads,
            memory: MemoryStore::new(c.key_dim, c.memory_width),
            read: g.zeros(&[c.memory_width]),
        }
    }

    fn embed(&self, g: &mut Graph<S>, bound: &BoundParams, token: usize) -> Result<Var> {
        let vocab = self.vocab();
        if token >= vocab.input_size() {
            return Err(Error::InvalidArgument(format!("token {token} outside vocabulary of {}", vocab.input_size())));
        }
        let e = self.config.embed;
        Ok(g.slice(bound.get(self.embedding), token * e, e)?)
    }

    /// Controller step followed by one memory read (and write when encoding).
    pub fn step(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        token: usize,
        state: StepState,
        write: bool,
    ) -> Result<(StepState, Var, StepRecord)> {
        let x = self.embed(g, bound, token)?;
        let x = if self.config.kind.has_memory() { g.concat(&[x, state.read])? } else { x };
        let (lstm, h) = self.lstm.step(g, bound, x, &state.lstm)?;
        let state = StepState { lstm, ..state };
        let Some(heads) = &self.heads else {
            return Ok((state, h, StepRecord::default()));
        };
        let mut out = heads.emit(g, bound, h, write)?;
        if self.config.temperature == TemperatureMode::Schedule && self.config.weighting == Weighting::Softmax {
            out.temperature = Some(g.scalar(S::c(self.scheduled_temperature())));
        }
        let (state, record) = match self.config.kind {
            ModelKind::Lantm | ModelKind::Slantm => lantm_step(g, &self.config, state, &out, write)?,
            ModelKind::Ram => ram_step(g, state, &out, write)?,
            ModelKind::RamTape => ram_tape_step(g, state, &out, write)?,
            ModelKind::Lstm => unreachable!("lstm has no heads"),
        };
        Ok((state, h, record))
    }

    /// Runs the encoder over `input` and the decoder per `decode`.
    pub fn encode_decode(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        input: &[usize],
        decode: Decode,
        trace: bool,
    ) -> Result<Forward> {
        let vocab = self.vocab();
        let mut events = Vec::new();
        let mut state = self.initial_state(g);
        let encoder_tokens = std::iter::once(vocab.start_input())
            .chain(input.iter().copied())
            .chain(std::iter::once(vocab.end_input()));
        for (step, token) in encoder_tokens.enumerate() {
            let (next, _, record) = self.step(g, bound, token, state, true)?;
            state = next;
            if trace {
                push_events(g, &mut events, Phase::Encode, step, token, &record);
            }
        }
        let memory_len = state.memory.len();
        let (steps, greedy) = match decode {
            Decode::Steps(n) => (n, false),
            Decode::Greedy { max_steps } => (max_steps, true),
        };
        let mut logits = Vec::with_capacity(steps);
        let mut predictions = Vec::with_capacity(steps);
        let mut decoder_memory_lens = Vec::with_capacity(steps);
        let mut ended = false;
        for step in 0..steps {
            let (next, h, record) = self.step(g, bound, vocab.placeholder(), state, false)?;
            state = next;
            decoder_memory_lens.push(state.memory.len());
            let y = self.output.forward(g, bound, h)?;
            let pred = argmax(g.data(y));
            logits.push(y);
            predictions.push(pred);
            if trace {
                push_events(g, &mut events, Phase::Decode, step, pred, &record);
            }
            if greedy && pred == vocab.end() {
                ended = true;
                break;
            }
        }
        Ok(Forward {
            logits,
            predictions,
            ended,
            truncated: greedy && !ended,
            memory_len,
            decoder_memory_lens,
            trace: events,
        })
    }
}

fn push_events<S: Scalar>(g: &Graph<S>, events: &mut Vec<TraceEvent>, phase: Phase, step: usize, token: usize, rec: &StepRecord) {
    let coords = |v: Var| g.value(v).to_f64_vec();
    if let Some(k) = rec.write_key {
        events.push(TraceEvent {
            phase,
            step,
            head: HeadKind::Write,
            key: coords(k),
            strength: rec.write_strength.map(|s| g.item(s).to_f64_lossy()),
            weights: None,
            token,
        });
    }
    if let Some(k) = rec.read_key {
        let weights = rec.read_weights.map(|w| TraceEvent::top_weights(&g.value(w).to_f64_vec()));
        events.push(TraceEvent { phase, step, head: HeadKind::Read, key: coords(k), strength: None, weights, token });
    }
}

pub(crate) fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn move_head<S: Scalar>(
    g: &mut Graph<S>,
    manifold: Manifold,
    head: Var,
    previous: &ActionVar,
    m: &MotionOutputs,
) -> Result<(Var, ActionVar)> {
    let start = interpolate_keys_var(g, manifold, m.gate, head, m.random_key)?;
    let action = match m.action_gate {
        Some(r) => interpolate_actions_var(g, r, &m.action, previous)?,
        None => m.action,
    };
    Ok((apply_var(g, &action, start)?, action))
}

fn read_with<S: Scalar>(g: &mut Graph<S>, weighting: Weighting, q: Var, store: &MemoryStore, out: &HeadOutputs) -> Result<Option<Var>> {
    if store.is_empty() {
        return Ok(None);
    }
    let w = match weighting {
        Weighting::InverseSquare => memory::read_inverse_square(g, q, store)?,
        Weighting::Softmax => {
            let t = out.temperature.ok_or_else(|| Error::InvalidArgument("softmax read without temperature".into()))?;
            memory::read_softmax(g, q, store, t)?
        }
    };
    Ok(Some(w))
}

fn require(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::InvalidArgument(format!("missing head output: {what}")))
}

/// Lie-access read/write step: move both heads, read by distance weighting,
/// then append at the write head when `write` is set.
pub fn lantm_step<S: Scalar>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    state: StepState,
    out: &HeadOutputs,
    write: bool,
) -> Result<(StepState, StepRecord)> {
    let manifold = config.manifold().ok_or(Error::VariantMismatch("lantm_step needs a Lie-access config"))?;
    let mut heads = state.heads.ok_or(Error::VariantMismatch("missing head state"))?;
    let read_cmd = out.read.as_ref().ok_or(Error::VariantMismatch("missing read head"))?;
    let (q, a) = move_head(g, manifold, heads.read, &heads.prev_read, read_cmd)?;
    heads.read = q;
    heads.prev_read = a;
    let w = read_with(g, config.weighting, q, &state.memory, out)?;
    let rho = memory::smooth(g, w, &state.memory)?;
    let mut record = StepRecord { read_key: Some(q), read_weights: w, ..Default::default() };
    let mut store = state.memory;
    if write {
        let write_cmd = out.write.as_ref().ok_or(Error::VariantMismatch("missing write head"))?;
        let (qw, aw) = move_head(g, manifold, heads.write, &heads.prev_write, write_cmd)?;
        heads.write = qw;
        heads.prev_write = aw;
        let (v, s) = (require(out.value, "value")?, require(out.strength, "strength")?);
        store = memory::append_write(g, &store, qw, v, s)?;
        record.write_key = Some(qw);
        record.write_strength = Some(s);
    }
    Ok((StepState { lstm: state.lstm, heads: Some(heads), memory: store, read: rho }, record))
}

/// Random-access step: exponential inner-product read at the emitted pointer.
pub fn ram_step<S: Scalar>(g: &mut Graph<S>, state: StepState, out: &HeadOutputs, write: bool) -> Result<(StepState, StepRecord)> {
    let q = require(out.pointer, "pointer")?;
    let w = if state.memory.is_empty() { None } else { Some(memory::read_ram(g, q, &state.memory)?) };
    let rho = memory::smooth(g, w, &state.memory)?;
    let mut record = StepRecord { read_key: Some(q), read_weights: w, ..Default::default() };
    let store = ram_write(g, state.memory, out, write, &mut record)?;
    Ok((StepState { lstm: state.lstm, heads: state.heads, memory: store, read: rho }, record))
}

fn ram_write<S: Scalar>(g: &mut Graph<S>, store: MemoryStore, out: &HeadOutputs, write: bool, record: &mut StepRecord) -> Result<MemoryStore> {
    if !write {
        return Ok(store);
    }
    let k = require(out.write_key, "write key")?;
    let (v, s) = (require(out.value, "value")?, require(out.strength, "strength")?);
    record.write_key = Some(k);
    record.write_strength = Some(s);
    memory::append_write(g, &store, k, v, s)
}

/// RAM plus tape neighbors: the query mixes the random key with the previous
/// step's `k_L`/`k_R`, the weights are optionally sharpened, and new
/// neighbors are computed from them.
pub fn ram_tape_step<S: Scalar>(g: &mut Graph<S>, state: StepState, out: &HeadOutputs, write: bool) -> Result<(StepState, StepRecord)> {
    let mut heads = state.heads.ok_or(Error::VariantMismatch("missing tape state"))?;
    let (k_left, k_right) = heads.neighbors.ok_or(Error::VariantMismatch("missing neighbor keys"))?;
    let gate = require(out.tape_gate, "tape gate")?;
    let random = require(out.pointer, "pointer")?;
    let g0 = g.slice(gate, 0, 1)?;
    let g1 = g.slice(gate, 1, 1)?;
    let g2 = g.slice(gate, 2, 1)?;
    let a = g.mul(random, g0)?;
    let b = g.mul(k_left, g1)?;
    let c = g.mul(k_right, g2)?;
    let ab = g.add(a, b)?;
    let query = g.add(ab, c)?;
    let w = if state.memory.is_empty() {
        None
    } else {
        let w = memory::read_ram(g, query, &state.memory)?;
        Some(match out.sharpening {
            Some(gamma) => memory::sharpen(g, w, gamma)?,
            None => w,
        })
    };
    let rho = memory::smooth(g, w, &state.memory)?;
    heads.neighbors = Some(match w {
        Some(w) => memory::neighbor_keys(g, w, &state.memory)?,
        None => (g.zeros(&[state.memory.key_dim()]), g.zeros(&[state.memory.key_dim()])),
    });
    heads.read = query;
    let mut record = StepRecord { read_key: Some(query), read_weights: w, ..Default::default() };
    let store = ram_write(g, state.memory, out, write, &mut record)?;
    Ok((StepState { lstm: state.lstm, heads: Some(heads), memory: store, read: rho }, record))
}
