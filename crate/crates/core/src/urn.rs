//! Urn dynamics.
//!
//! The urn starts with one ball of a chosen color at trial 0. At trial `n` a
//! color `c` is drawn with probability `w_c / (n + 1)` and row `c` of the
//! replacement matrix is added to `w`. Masses are real-valued.

use std::error::Error as StdError;
use std::io::Write;

use rand_core::RngCore;
use thiserror::Error;

use crate::rng;
use crate::spectral::{Eigenpair, ReplacementMatrix};

/// Projections are recomputed from `w` every 2^16 steps to bound drift.
pub const RESYNC_INTERVAL: u64 = 1 << 16;

pub type ObserverError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum UrnError {
    #[error("BadColor: initial color {color} is not in [0, {k})")]
    BadColor { color: usize, k: usize },
    #[error("dimension mismatch: urn has {urn} colors, matrix has {matrix}")]
    DimensionMismatch { urn: usize, matrix: usize },
    #[error("observer failed at trial {trial}: {source}")]
    Observer {
        trial: u64,
        #[source]
        source: ObserverError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UrnState {
    pub n: u64,
    pub w: Vec<f64>,
}

impl UrnState {
    pub fn new(color: usize, k: usize) -> Result<Self, UrnError> {
        if color >= k {
            return Err(UrnError::BadColor { color, k });
        }
        let mut w = vec![0.0; k];
        w[color] = 1.0;
        Ok(Self { n: 0, w })
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.w.iter().sum()
    }

    /// Probability of drawing color `c` at the next trial.
    pub fn probability(&self, c: usize) -> f64 {
        self.w[c] / (self.n + 1) as f64
    }

    /// Applies trial `n + 1` with draw `color`.
    #[inline]
    pub fn add_row(&mut self, r: &ReplacementMatrix, color: usize) {
        for (w, a) in self.w.iter_mut().zip(r.row(color)) {
            *w += a;
        }
        self.n += 1;
    }
}

/// Inverse-CDF color choice: the smallest index whose cumulative proportion
/// exceeds `u`. Masses are compared against `u·(n+1)` directly.
#[inline]
pub fn draw_color(w: &[f64], n: u64, u: f64) -> usize {
    let target = u * (n + 1) as f64;
    let mut acc = 0.0;
    for (c, &m) in w.iter().enumerate() {
        acc += m;
        if acc > target {
            return c;
        }
    }
    // round-off left the total a hair short of n+1: fall back to the last
    // color carrying mass
    w.iter().rposition(|&m| m > 0.0).unwrap_or(0)
}

/// One trial as a pure function of the state.
pub fn step(state: &UrnState, r: &ReplacementMatrix, u: f64) -> (UrnState, usize) {
    let color = draw_color(&state.w, state.n, u);
    let mut next = state.clone();
    next.add_row(r, color);
    (next, color)
}

/// What an observer sees after each trial.
#[derive(Debug, Clone, Copy)]
pub struct DrawRecord<'a> {
    /// Trial index before the draw.
    pub n: u64,
    pub color: usize,
    /// `W_n' ξ_i` for every tracked pair, before the draw.
    pub prev_projections: &'a [f64],
}

pub trait Observer {
    fn on_step(&mut self, record: &DrawRecord<'_>, state: &UrnState) -> Result<(), ObserverError>;
}

#[derive(Debug, Clone)]
struct Tracked {
    lambda: f64,
    xi: Vec<f64>,
}

/// An urn together with incrementally maintained projections `W_n' ξ_i`.
#[derive(Debug, Clone)]
pub struct Urn {
    state: UrnState,
    tracked: Vec<Tracked>,
    prev: Vec<f64>,
    cur: Vec<f64>,
}

impl Urn {
    pub fn new(state: UrnState, pairs: &[Eigenpair]) -> Self {
        let tracked: Vec<Tracked> = pairs
            .iter()
            .map(|p| Tracked {
                lambda: p.lambda,
                xi: p.xi.clone(),
            })
            .collect();
        let cur: Vec<f64> = pairs.iter().map(|p| p.project(&state.w)).collect();
        Self {
            state,
            prev: cur.clone(),
            cur,
            tracked,
        }
    }

    pub fn state(&self) -> &UrnState {
        &self.state
    }

    pub fn into_state(self) -> UrnState {
        self.state
    }

    pub fn projections(&self) -> &[f64] {
        &self.cur
    }

    #[inline]
    fn advance(&mut self, r: &ReplacementMatrix, u: f64) -> (u64, usize) {
        let n = self.state.n;
        let color = draw_color(&self.state.w, n, u);
        self.state.add_row(r, color);
        std::mem::swap(&mut self.prev, &mut self.cur);
        if self.state.n.is_multiple_of(RESYNC_INTERVAL) {
            for (c, t) in self.cur.iter_mut().zip(&self.tracked) {
                *c = t.xi.iter().zip(&self.state.w).map(|(a, b)| a * b).sum();
            }
        } else {
            for ((c, p), t) in self.cur.iter_mut().zip(&self.prev).zip(&self.tracked) {
                *c = p + t.lambda * t.xi[color];
            }
        }
        (n, color)
    }

    /// Draws and applies one trial, returning the record for it.
    pub fn step(&mut self, r: &ReplacementMatrix, u: f64) -> DrawRecord<'_> {
        let (n, color) = self.advance(r, u);
        DrawRecord {
            n,
            color,
            prev_projections: &self.prev,
        }
    }

    /// Runs `steps` trials, calling every observer after each one.
    pub fn evolve<G: RngCore + ?Sized>(
        &mut self,
        r: &ReplacementMatrix,
        steps: u64,
        rng: &mut G,
        observers: &mut [&mut dyn Observer],
    ) -> Result<(), UrnError> {
        if r.k() != self.state.k() {
            return Err(UrnError::DimensionMismatch {
                urn: self.state.k(),
                matrix: r.k(),
            });
        }
        for _ in 0..steps {
            let (n, color) = self.advance(r, rng::uniform(rng));
            let record = DrawRecord {
                n,
                color,
                prev_projections: &self.prev,
            };
            for obs in observers.iter_mut() {
                obs.on_step(&record, &self.state)
                    .map_err(|source| UrnError::Observer { trial: n + 1, source })?;
            }
        }
        Ok(())
    }
}

/// Writes `n,color,w_0..w_{k-1}` rows, one per trial (plus the initial state
/// with an empty color field).
pub struct TrajectoryCsv<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryCsv<W> {
    pub fn new(mut out: W, initial: &UrnState) -> std::io::Result<Self> {
        let cols: Vec<String> = (0..initial.k()).map(|i| format!("w_{i}")).collect();
        writeln!(out, "n,color,{}", cols.join(","))?;
        write!(out, "0,")?;
        for w in &initial.w {
            write!(out, ",{w}")?;
        }
        writeln!(out)?;
        Ok(Self { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> Observer for TrajectoryCsv<W> {
    fn on_step(&mut self, record: &DrawRecord<'_>, state: &UrnState) -> Result<(), ObserverError> {
        write!(self.out, "{},{}", state.n, record.color)?;
        for w in &state.w {
            write!(self.out, ",{w}")?;
        }
        writeln!(self.out)?;
        Ok(())
    }
}
