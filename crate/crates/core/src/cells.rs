//! Recurrent cells (vanilla, GRU, LSTM) and stacks of them with optional
//! residual connections.
//!
//! Gate weights are fused: a cell with `G` gates owns an input matrix
//! `W: [in, G*units]`, a recurrent matrix `U: [units, G*units]` and a bias
//! `b: [G*units]`. The GRU candidate reads `r ⊙ h`, so its recurrent block is
//! kept as a separate `[units, units]` matrix and `U` covers only the two gates.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Init, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Vanilla,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Vanilla => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Vanilla => "vanilla",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(CellKind::Vanilla),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub input_dim: usize,
    pub units: usize,
    /// Initial bias of the state-preserving gate (LSTM forget gate, GRU update
    /// gate). Ignored by vanilla cells.
    pub forget_bias: f64,
}

impl CellSpec {
    pub fn new(kind: CellKind, input_dim: usize, units: usize) -> Self {
        CellSpec {
            kind,
            input_dim,
            units,
            forget_bias: 1.0,
        }
    }

    /// `(in + units + 1) * units * gates`.
    pub fn param_count(&self) -> usize {
        (self.input_dim + self.units + 1) * self.units * self.kind.gates()
    }
}

/// Recurrent state of one layer. `c` is present exactly for LSTM cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellState {
    pub h: NodeId,
    pub c: Option<NodeId>,
}

impl CellState {
    pub fn zeros<T: Real>(g: &mut Graph<'_, T>, kind: CellKind, batch: usize, units: usize) -> Result<Self> {
        let h = g.zeros(&[batch, units])?;
        let c = match kind {
            CellKind::Lstm => Some(g.zeros(&[batch, units])?),
            _ => None,
        };
        Ok(CellState { h, c })
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    spec: CellSpec,
    w: ParamId,
    u: ParamId,
    u_cand: Option<ParamId>,
    b: ParamId,
}

impl Cell {
    /// Register this cell's parameters under `prefix` (e.g. `encoder.fwd.l0`).
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: CellSpec,
        init_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if spec.units == 0 || spec.input_dim == 0 {
            return Err(Error::Config(format!("{prefix}: cell dimensions must be positive")));
        }
        let (units, gates) = (spec.units, spec.kind.gates());
        let init = Init::Uniform(init_scale);
        let w = store.add_init(format!("{prefix}.W"), &[spec.input_dim, gates * units], init, rng)?;
        let (u, u_cand) = match spec.kind {
            CellKind::Gru => (
                store.add_init(format!("{prefix}.U"), &[units, 2 * units], init, rng)?,
                Some(store.add_init(format!("{prefix}.Uc"), &[units, units], init, rng)?),
            ),
            _ => (store.add_init(format!("{prefix}.U"), &[units, gates * units], init, rng)?, None),
        };
        let mut bias = vec![T::zero(); gates * units];
        let forget = match spec.kind {
            CellKind::Vanilla => None,
            CellKind::Gru => Some(0..units),
            CellKind::Lstm => Some(units..2 * units),
        };
        if let Some(range) = forget {
            bias[range].fill(T::of(spec.forget_bias));
        }
        let b = store.add(format!("{prefix}.b"), Tensor::new(&[gates * units], bias)?)?;
        Ok(Cell { spec, w, u, u_cand, b })
    }

    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w, self.u];
        ids.extend(self.u_cand);
        ids.push(self.b);
        ids
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<'_, T>, batch: usize) -> Result<CellState> {
        CellState::zeros(g, self.spec.kind, batch, self.spec.units)
    }

    /// Advance one time step.
    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, state: &CellState) -> Result<CellState> {
        let (xs, hs) = (g.shape(x).to_vec(), g.shape(state.h).to_vec());
        if xs.len() != 2 || xs[1] != self.spec.input_dim {
            return Err(Error::shape("cell input", &xs, &[self.spec.input_dim]));
        }
        if hs != [xs[0], self.spec.units] {
            return Err(Error::shape("cell state", &hs, &[xs[0], self.spec.units]));
        }
        match self.spec.kind {
            CellKind::Vanilla => self.vanilla_step(g, x, state),
            CellKind::Gru => self.gru_step(g, x, state),
            CellKind::Lstm => self.lstm_step(g, x, state),
        }
    }

    /// `x W + b` plus `h U`, both `[batch, G*units]`.
    fn projections<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, h: NodeId) -> Result<(NodeId, NodeId)> {
        let (w, u, b) = (g.param(self.w), g.param(self.u), g.param(self.b));
        let xw = g.matmul(x, w)?;
        let xw = g.add(xw, b)?;
        let hu = g.matmul(h, u)?;
        Ok((xw, hu))
    }

    /// `h' = tanh(x W + h U + b)`.
    fn vanilla_step<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, state: &CellState) -> Result<CellState> {
        let (xw, hu) = self.projections(g, x, state.h)?;
        let pre = g.add(xw, hu)?;
        Ok(CellState {
            h: g.tanh(pre),
            c: None,
        })
    }

    /// `z, r = σ(..)`, `h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h)`,
    /// `h' = z ⊙ h + (1 - z) ⊙ h̃`.
    fn gru_step<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, state: &CellState) -> Result<CellState> {
        let units = self.spec.units;
        let (xw, hu) = self.projections(g, x, state.h)?;
        let x_gates = g.slice(xw, 0, 2 * units)?;
        let x_cand = g.slice(xw, 2 * units, units)?;
        let gates = g.add(x_gates, hu)?;
        let gates = g.sigmoid(gates);
        let z = g.slice(gates, 0, units)?;
        let r = g.slice(gates, units, units)?;

        let rh = g.mul(r, state.h)?;
        let u_cand = g.param(self.u_cand.expect("GRU owns a candidate matrix"));
        let rhu = g.matmul(rh, u_cand)?;
        let cand = g.add(x_cand, rhu)?;
        let cand = g.tanh(cand);

        let keep = g.mul(z, state.h)?;
        let one_minus_z = g.one_minus(z);
        let fresh = g.mul(one_minus_z, cand)?;
        Ok(CellState {
            h: g.add(keep, fresh)?,
            c: None,
        })
    }

    /// Gates laid out `[i | f | g | o]`; `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
    fn lstm_step<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, state: &CellState) -> Result<CellState> {
        let c = state
            .c
            .ok_or_else(|| Error::Config("LSTM step requires a cell state `c`".into()))?;
        let units = self.spec.units;
        let (xw, hu) = self.projections(g, x, state.h)?;
        let pre = g.add(xw, hu)?;
        let sig = g.slice(pre, 0, 2 * units)?;
        let sig = g.sigmoid(sig);
        let i = g.slice(sig, 0, units)?;
        let f = g.slice(sig, units, units)?;
        let cand = g.slice(pre, 2 * units, units)?;
        let cand = g.tanh(cand);
        let o = g.slice(pre, 3 * units, units)?;
        let o = g.sigmoid(o);

        let kept = g.mul(f, c)?;
        let written = g.mul(i, cand)?;
        let c_new = g.add(kept, written)?;
        let squashed = g.tanh(c_new);
        Ok(CellState {
            h: g.mul(o, squashed)?,
            c: Some(c_new),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ResidualMode {
    #[default]
    None,
    /// `x(l+1) = h(l) + x(l)`.
    Standard,
    /// `x(l+1) = h(l) + sum_{j<=l} x(j)`.
    Dense,
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualMode::None => "none",
            ResidualMode::Standard => "standard",
            ResidualMode::Dense => "dense",
        })
    }
}

impl FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ResidualMode::None),
            "standard" => Ok(ResidualMode::Standard),
            "dense" => Ok(ResidualMode::Dense),
            other => Err(Error::Config(format!("unknown residual mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackSpec {
    pub layers: Vec<CellSpec>,
    pub residual: ResidualMode,
    /// Dropout rate applied to every layer's input.
    pub dropout: f64,
}

impl StackSpec {
    /// `depth` layers of `kind`; the first reads `input_dim`, the rest `units`.
    pub fn uniform(kind: CellKind, input_dim: usize, units: usize, depth: usize, residual: ResidualMode, dropout: f64) -> Self {
        let layers = (0..depth)
            .map(|l| CellSpec::new(kind, if l == 0 { input_dim } else { units }, units))
            .collect();
        StackSpec {
            layers,
            residual,
            dropout,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(CellSpec::param_count).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.units)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("a stack needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidDropout(self.dropout));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[1].input_dim != pair[0].units {
                return Err(Error::Config(format!(
                    "layer {} reads {} inputs but layer {} emits {}",
                    l + 1,
                    pair[1].input_dim,
                    l,
                    pair[0].units
                )));
            }
        }
        if self.residual != ResidualMode::None {
            for (l, layer) in self.layers.iter().enumerate().skip(1) {
                if layer.input_dim != layer.units {
                    return Err(Error::Config(format!(
                        "{} residual connections need equal input/output dims, layer {l} maps {} -> {}",
                        self.residual, layer.input_dim, layer.units
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A stack of cells advanced together one time step at a time.
#[derive(Clone, Debug)]
pub struct Stack {
    spec: StackSpec,
    cells: Vec<Cell>,
}

impl Stack {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: StackSpec,
        init_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        spec.validate()?;
        let cells = spec
            .layers
            .iter()
            .enumerate()
            .map(|(l, cs)| Cell::build(store, &format!("{prefix}.l{l}"), cs.clone(), init_scale, rng))
            .collect::<Result<_>>()?;
        Ok(Stack { spec, cells })
    }

    pub fn spec(&self) -> &StackSpec {
        &self.spec
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn depth(&self) -> usize {
        self.cells.len()
    }

    pub fn zero_states<T: Real>(&self, g: &mut Graph<'_, T>, batch: usize) -> Result<Vec<CellState>> {
        self.cells.iter().map(|c| c.zero_state(g, batch)).collect()
    }

    /// One time step through every layer. Returns the top output and the new
    /// per-layer states.
    ///
    /// The stack input takes part in residual sums only when its width equals
    /// the first layer's unit count.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        states: &[CellState],
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(NodeId, Vec<CellState>)> {
        if states.len() != self.cells.len() {
            return Err(Error::Config(format!(
                "stack of depth {} given {} states",
                self.cells.len(),
                states.len()
            )));
        }
        let mut input = x;
        let mut dense_sum: Option<NodeId> = None;
        let mut next = Vec::with_capacity(states.len());
        for (cell, state) in self.cells.iter().zip(states) {
            let units = cell.spec.units;
            let joins_residual = g.shape(input).last() == Some(&units);
            if joins_residual && self.spec.residual == ResidualMode::Dense {
                dense_sum = Some(match dense_sum {
                    Some(acc) => g.add(acc, input)?,
                    None => input,
                });
            }
            let dropped = g.dropout(input, self.spec.dropout, rng.as_deref_mut())?;
            let new_state = cell.step(g, dropped, state)?;
            let h = new_state.h;
            next.push(new_state);
            input = match self.spec.residual {
                ResidualMode::None => h,
                ResidualMode::Standard if joins_residual => g.add(h, input)?,
                ResidualMode::Standard => h,
                ResidualMode::Dense => match dense_sum {
                    Some(acc) => g.add(h, acc)?,
                    None => h,
                },
            };
        }
        Ok((input, next))
    }
}
