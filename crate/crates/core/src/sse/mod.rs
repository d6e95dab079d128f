//! Stochastic series expansion of `Tr_B e^{-βH}` with open imaginary-time
//! edges on region A.
//!
//! The configuration is the ket edge state at τ = 0 (A and B spins), the
//! operator string, and the bra edge of A at τ = β. B spins are identified
//! across the two edges; A spins are free, so the pair of A edges is a sample of
//! a reduced-density-matrix element `<C_A| Tr_B e^{-βH} |C'_A>`.
//!
//! Bonds are written as `H_b = |J| (1/4 ∓ S_i.S_j)` in the sublattice-rotated
//! basis, so every nonvanishing vertex has weight `|J|/2` and loops are built
//! with the deterministic rule: antiferromagnetic vertices pair legs on the
//! same side of the vertex, ferromagnetic vertices pair diagonally opposite
//! legs. Loops that reach an A edge stop there and flip that edge spin.

mod checkpoint;

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Bipartition, LatticeSpec, RotationMask};

pub use checkpoint::{checkpoint, restore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

const IDENTITY: u32 = u32::MAX;
const NONE: u32 = u32::MAX;
const TERMINAL: u32 = u32::MAX - 1;
const NOT_A: u32 = u32::MAX;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SseOptions {
    /// Initial operator-string length; grown automatically during thermalization.
    pub initial_cutoff: usize,
    /// Upper bound on loop-construction steps per sweep, as a multiple of the
    /// number of vertex legs. Exceeding it aborts the update and flags the run.
    pub loop_step_factor: usize,
    /// log₂ of the edge configurations recorded per sweep by open-loop
    /// averaging; 0 records only the sampled edges.
    pub edge_average: u32,
}

/// Largest supported `edge_average`.
pub const MAX_EDGE_AVERAGE: u32 = 16;
pub const DEFAULT_EDGE_AVERAGE: u32 = 6;

impl Default for SseOptions {
    fn default() -> Self {
        SseOptions {
            initial_cutoff: 32,
            loop_step_factor: 4,
            edge_average: DEFAULT_EDGE_AVERAGE,
        }
    }
}

/// Default inverse temperature for a chain/ring of length `l`.
pub fn default_beta(l: usize) -> f64 {
    (4 * l).max(100) as f64
}

/// Default number of thermalization sweeps for linear size `l`.
pub fn default_n_therm(l: usize) -> u64 {
    (10 * l as u64).max(10_000)
}

/// Packed A edges of one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySnapshot {
    /// A state at the τ = β edge (bra).
    pub c_a: u64,
    /// A state at the τ = 0 edge (ket).
    pub c_a_prime: u64,
    pub weight_sign: i8,
}

/// Consumer of boundary snapshots, e.g. an RDM accumulator.
pub trait SnapshotSink {
    /// One sweep, represented by its sampled edges alone.
    fn record(&mut self, snapshot: BoundarySnapshot) -> Result<()>;

    /// One sweep, represented by edge configurations with integer counts. The
    /// first entry is the sampled edge state; sinks without weights keep it.
    fn record_expanded(&mut self, configs: &[(BoundarySnapshot, u64)]) -> Result<()> {
        self.record(configs[0].0)
    }

    /// Sampling stops after the current snapshot once this turns true.
    fn done(&self) -> bool {
        false
    }
}

impl SnapshotSink for Vec<BoundarySnapshot> {
    fn record(&mut self, snapshot: BoundarySnapshot) -> Result<()> {
        self.push(snapshot);
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub insert_attempts: u64,
    pub insert_accepts: u64,
    pub remove_attempts: u64,
    pub remove_accepts: u64,
    pub sweeps: u64,
    pub safety_aborts: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStats {
    pub n_therm: u64,
    pub n_samples: u64,
    pub insert_acceptance: f64,
    pub remove_acceptance: f64,
    pub mean_n_ops: f64,
    pub final_cutoff: usize,
    pub safety_aborts: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct SimState {
    beta: f64,
    n_sites: usize,
    bonds: Vec<[u32; 2]>,
    couplings: Vec<f64>,
    ferro: Vec<bool>,
    /// β · N_b · |J_b|/2 per bond, the insertion numerator.
    insert_factor: Vec<f64>,
    a_sites: Vec<u32>,
    a_pos: Vec<u32>,
    spins: Vec<i8>,
    edge_bra: Vec<i8>,
    ops: Vec<u32>,
    n_ops: usize,
    cutoff_frozen: bool,
    seed: u64,
    rng: ChaCha8Rng,
    opts: SseOptions,
    counters: Counters,
    // scratch, rebuilt every sweep
    work: Vec<i8>,
    links: Vec<u32>,
    marks: Vec<u8>,
    /// Loop index of every leg from the last loop update.
    loop_of: Vec<u32>,
    first: Vec<u32>,
    last: Vec<u32>,
}

impl PartialEq for SimState {
    fn eq(&self, other: &Self) -> bool {
        self.beta.to_bits() == other.beta.to_bits()
            && self.n_sites == other.n_sites
            && self.bonds == other.bonds
            && self.couplings == other.couplings
            && self.a_sites == other.a_sites
            && self.spins == other.spins
            && self.edge_bra == other.edge_bra
            && self.ops == other.ops
            && self.n_ops == other.n_ops
            && self.cutoff_frozen == other.cutoff_frozen
            && self.seed == other.seed
            && self.rng == other.rng
            && self.opts.loop_step_factor == other.opts.loop_step_factor
            && self.opts.edge_average == other.opts.edge_average
    }
}

pub fn init_simulation(
    lattice: &LatticeSpec,
    bip: &Bipartition,
    mask: &RotationMask,
    beta: f64,
    seed: u64,
    opts: SseOptions,
) -> Result<SimState> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    if mask.flip.len() != lattice.n_sites {
        return Err(Error::InvalidParameter("rotation mask size mismatch".into()));
    }
    for b in &lattice.bonds {
        if (mask.flip[b.i] == mask.flip[b.j]) != b.is_ferro() {
            return Err(Error::SignProblemUnsupported(format!(
                "rotation mask does not make bond ({}, {}) sign-free",
                b.i, b.j
            )));
        }
    }
    if opts.edge_average > MAX_EDGE_AVERAGE {
        return Err(Error::InvalidParameter(format!(
            "edge_average {} exceeds {MAX_EDGE_AVERAGE}",
            opts.edge_average
        )));
    }
    if bip.a_sites.len() > 32 {
        return Err(Error::InvalidParameter(format!(
            "|A| = {} exceeds the 32-site limit of packed RDM keys",
            bip.a_sites.len()
        )));
    }
    let bonds = lattice.bonds.iter().map(|b| [b.i as u32, b.j as u32]).collect();
    let couplings: Vec<f64> = lattice.bonds.iter().map(|b| b.coupling).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spins: Vec<i8> = (0..lattice.n_sites)
        .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
        .collect();
    let state = SimState::assemble(
        beta,
        lattice.n_sites,
        bonds,
        couplings,
        bip.a_sites.iter().map(|&s| s as u32).collect(),
        spins,
        None,
        vec![IDENTITY; opts.initial_cutoff.max(4)],
        false,
        seed,
        rng,
        opts,
    )?;
    Ok(state)
}

impl SimState {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        beta: f64,
        n_sites: usize,
        bonds: Vec<[u32; 2]>,
        couplings: Vec<f64>,
        a_sites: Vec<u32>,
        spins: Vec<i8>,
        edge_bra: Option<Vec<i8>>,
        ops: Vec<u32>,
        cutoff_frozen: bool,
        seed: u64,
        rng: ChaCha8Rng,
        opts: SseOptions,
    ) -> Result<Self> {
        if bonds.is_empty() {
            return Err(Error::InvalidParameter("lattice has no bonds".into()));
        }
        let nb = bonds.len() as f64;
        let ferro = couplings.iter().map(|&j| j < 0.0).collect();
        let insert_factor = couplings.iter().map(|&j| beta * nb * j.abs() / 2.0).collect();
        let mut a_pos = vec![NOT_A; n_sites];
        for (p, &s) in a_sites.iter().enumerate() {
            a_pos[s as usize] = p as u32;
        }
        let edge_bra = edge_bra.unwrap_or_else(|| a_sites.iter().map(|&s| spins[s as usize]).collect());
        let n_ops = ops.iter().filter(|&&o| o != IDENTITY).count();
        let state = SimState {
            beta,
            n_sites,
            bonds,
            couplings,
            ferro,
            insert_factor,
            a_sites,
            a_pos,
            work: spins.clone(),
            spins,
            edge_bra,
            n_ops,
            links: Vec::new(),
            marks: Vec::new(),
            loop_of: Vec::new(),
            first: vec![NONE; n_sites],
            last: vec![NONE; n_sites],
            ops,
            cutoff_frozen,
            seed,
            rng,
            opts,
            counters: Counters::default(),
        };
        Ok(state)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_ops(&self) -> usize {
        self.n_ops
    }

    pub fn cutoff(&self) -> usize {
        self.ops.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_a(&self) -> usize {
        self.a_sites.len()
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Stops cutoff growth except when the string is completely full.
    pub fn freeze_cutoff(&mut self) {
        self.cutoff_frozen = true;
    }

    pub fn cutoff_frozen(&self) -> bool {
        self.cutoff_frozen
    }

    fn grow_cutoff(&mut self, new_len: usize) {
        if new_len > self.ops.len() {
            self.ops.resize(new_len, IDENTITY);
        }
    }

    /// Current A edges.
    pub fn snapshot(&self) -> BoundarySnapshot {
        let mut c_a = 0u64;
        let mut c_a_prime = 0u64;
        for (p, &s) in self.a_sites.iter().enumerate() {
            if self.edge_bra[p] > 0 {
                c_a |= 1 << p;
            }
            if self.spins[s as usize] > 0 {
                c_a_prime |= 1 << p;
            }
        }
        BoundarySnapshot {
            c_a,
            c_a_prime,
            weight_sign: 1,
        }
    }

    /// Insert/remove diagonal operators with Metropolis acceptance.
    pub fn diagonal_update(&mut self) {
        if self.n_ops >= self.ops.len() {
            let grown = (self.n_ops * 4 / 3).max(self.ops.len() + 1);
            self.grow_cutoff(grown);
        }
        let m = self.ops.len();
        let nb = self.bonds.len();
        self.work.copy_from_slice(&self.spins);
        for p in 0..m {
            let op = self.ops[p];
            if op == IDENTITY {
                let b = self.rng.gen_range(0..nb);
                let [i, j] = self.bonds[b];
                let parallel = self.work[i as usize] == self.work[j as usize];
                self.counters.insert_attempts += 1;
                if parallel == self.ferro[b] {
                    let acc = self.insert_factor[b] / (m - self.n_ops) as f64;
                    if acc >= 1.0 || self.rng.gen::<f64>() < acc {
                        self.ops[p] = (b as u32) << 1;
                        self.n_ops += 1;
                        self.counters.insert_accepts += 1;
                    }
                }
            } else if op & 1 == 0 {
                let b = (op >> 1) as usize;
                self.counters.remove_attempts += 1;
                let acc = (m - self.n_ops + 1) as f64 / self.insert_factor[b];
                if acc >= 1.0 || self.rng.gen::<f64>() < acc {
                    self.ops[p] = IDENTITY;
                    self.n_ops -= 1;
                    self.counters.remove_accepts += 1;
                }
            } else {
                let [i, j] = self.bonds[(op >> 1) as usize];
                debug_assert_ne!(self.work[i as usize], self.work[j as usize]);
                self.work[i as usize] = -self.work[i as usize];
                self.work[j as usize] = -self.work[j as usize];
            }
        }
        if !self.cutoff_frozen {
            let target = self.n_ops + self.n_ops / 3;
            self.grow_cutoff(target);
        }
    }

    fn build_links(&mut self) {
        let m = self.ops.len();
        self.links.clear();
        self.links.resize(4 * m, NONE);
        self.marks.clear();
        self.marks.resize(4 * m, 0);
        self.loop_of.clear();
        self.loop_of.resize(4 * m, NONE);
        self.first.fill(NONE);
        self.last.fill(NONE);
        for p in 0..m {
            let op = self.ops[p];
            if op == IDENTITY {
                continue;
            }
            let [i, j] = self.bonds[(op >> 1) as usize];
            let v0 = 4 * p as u32;
            for (leg, site) in [(v0, i as usize), (v0 + 1, j as usize)] {
                let prev = self.last[site];
                if prev == NONE {
                    self.first[site] = leg;
                } else {
                    self.links[leg as usize] = prev;
                    self.links[prev as usize] = leg;
                }
                self.last[site] = leg + 2;
            }
        }
        for s in 0..self.n_sites {
            let (f, l) = (self.first[s], self.last[s]);
            if f == NONE {
                continue;
            }
            if self.a_pos[s] == NOT_A {
                self.links[f as usize] = l;
                self.links[l as usize] = f;
            } else {
                self.links[f as usize] = TERMINAL;
                self.links[l as usize] = TERMINAL;
            }
        }
    }

    #[inline]
    fn partner(&self, leg: u32) -> u32 {
        let b = (self.ops[(leg >> 2) as usize] >> 1) as usize;
        if self.ferro[b] {
            leg ^ 3
        } else {
            leg ^ 1
        }
    }

    /// Flip every loop (closed, or open between two A edges) with probability 1/2.
    pub fn loop_update(&mut self) -> Result<()> {
        self.build_links();
        let m = self.ops.len();
        let cap = self.opts.loop_step_factor.max(1) * (4 * m + 4);
        let mut steps = 0usize;
        let mut n_loops = 0u32;
        for p in 0..m {
            if self.ops[p] == IDENTITY {
                continue;
            }
            for l in 0..4u32 {
                let v0 = 4 * p as u32 + l;
                if self.marks[v0 as usize] != 0 {
                    continue;
                }
                let id = n_loops;
                n_loops += 1;
                let flip = self.rng.gen::<bool>();
                let mark = if flip { 2 } else { 1 };
                let mut v = v0;
                let mut closed = false;
                loop {
                    let w = self.partner(v);
                    self.marks[v as usize] = mark;
                    self.marks[w as usize] = mark;
                    self.loop_of[v as usize] = id;
                    self.loop_of[w as usize] = id;
                    if flip {
                        self.ops[(v >> 2) as usize] ^= 1;
                    }
                    let next = self.links[w as usize];
                    steps += 1;
                    if next == TERMINAL {
                        break;
                    }
                    if next == v0 {
                        closed = true;
                        break;
                    }
                    v = next;
                    if steps > cap {
                        self.counters.safety_aborts += 1;
                        return Err(Error::WorldLine("loop construction exceeded step cap".into()));
                    }
                }
                if !closed {
                    let mut u = self.links[v0 as usize];
                    while u != TERMINAL {
                        let w = self.partner(u);
                        self.marks[u as usize] = mark;
                        self.marks[w as usize] = mark;
                        self.loop_of[u as usize] = id;
                        self.loop_of[w as usize] = id;
                        if flip {
                            self.ops[(u >> 2) as usize] ^= 1;
                        }
                        u = self.links[w as usize];
                        steps += 1;
                        if steps > cap {
                            self.counters.safety_aborts += 1;
                            return Err(Error::WorldLine("open loop construction exceeded step cap".into()));
                        }
                    }
                }
            }
        }
        for s in 0..self.n_sites {
            let pos = self.a_pos[s];
            let f = self.first[s];
            if f == NONE {
                if self.rng.gen::<bool>() {
                    self.spins[s] = -self.spins[s];
                    if pos != NOT_A {
                        self.edge_bra[pos as usize] = -self.edge_bra[pos as usize];
                    }
                }
                continue;
            }
            if self.marks[f as usize] == 2 {
                self.spins[s] = -self.spins[s];
            }
            if pos != NOT_A && self.marks[self.last[s] as usize] == 2 {
                self.edge_bra[pos as usize] = -self.edge_bra[pos as usize];
            }
        }
        Ok(())
    }

    /// Edge flips of the loops that end on A after the last loop update, as
    /// `(bra mask, ket mask)` pairs. Every combination of these flips has the
    /// same weight as the current configuration and was equally likely to be
    /// produced by the update.
    pub fn open_loops(&self) -> Vec<(u64, u64)> {
        let mut ids: Vec<u32> = Vec::new();
        let mut masks: Vec<(u64, u64)> = Vec::new();
        let mut add = |id: u32, bra: u64, ket: u64| match ids.iter().position(|&x| x == id) {
            Some(i) => {
                masks[i].0 |= bra;
                masks[i].1 |= ket;
            }
            None => {
                ids.push(id);
                masks.push((bra, ket));
            }
        };
        let mut free = u32::MAX - 2;
        for (p, &site) in self.a_sites.iter().enumerate() {
            let bit = 1u64 << p;
            let f = self.first[site as usize];
            if f == NONE {
                // A bare world line is its own loop joining both edges.
                free -= 1;
                add(free, bit, bit);
            } else {
                add(self.loop_of[f as usize], 0, bit);
                add(self.loop_of[self.last[site as usize] as usize], bit, 0);
            }
        }
        masks
    }

    /// Edge configurations of the current loop structure with counts summing
    /// to `2^edge_average`: all `2^K` flips of the K open loops when they fit,
    /// otherwise the sampled edges plus uniformly drawn flips. Either way each
    /// configuration's expected count is proportional to its conditional
    /// probability, so the ratio estimator stays unbiased.
    fn expand_edges(&mut self, out: &mut Vec<(BoundarySnapshot, u64)>) {
        out.clear();
        let base = self.snapshot();
        let r = self.opts.edge_average;
        if r == 0 {
            out.push((base, 1));
            return;
        }
        let loops = self.open_loops();
        let k = loops.len() as u32;
        let flip = |snap: &mut BoundarySnapshot, (bra, ket): (u64, u64)| {
            snap.c_a ^= bra;
            snap.c_a_prime ^= ket;
        };
        if k <= r {
            let count = 1u64 << (r - k);
            let mut snap = base;
            out.push((snap, count));
            // Gray-code walk: one loop flip per step.
            for c in 1..(1u64 << k) {
                flip(&mut snap, loops[c.trailing_zeros() as usize]);
                out.push((snap, count));
            }
        } else {
            out.push((base, 1));
            let all = if k == 64 { u64::MAX } else { (1u64 << k) - 1 };
            for _ in 1..(1u64 << r) {
                let subset = self.rng.gen::<u64>() & all;
                let mut snap = base;
                for (i, &l) in loops.iter().enumerate() {
                    if subset >> i & 1 == 1 {
                        flip(&mut snap, l);
                    }
                }
                out.push((snap, 1));
            }
        }
    }

    /// One sweep followed by open-loop expansion of the A edges.
    pub fn sweep_and_expand(&mut self, out: &mut Vec<(BoundarySnapshot, u64)>) -> Result<()> {
        self.diagonal_update();
        self.loop_update()?;
        self.counters.sweeps += 1;
        self.expand_edges(out);
        Ok(())
    }

    /// One diagonal update and one full loop pass, then read the A edges.
    pub fn sweep_and_snapshot(&mut self) -> Result<BoundarySnapshot> {
        self.diagonal_update();
        self.loop_update()?;
        self.counters.sweeps += 1;
        Ok(self.snapshot())
    }

    /// Propagates the ket edge through the operator string and checks every
    /// vertex and both edges.
    pub fn check_world_lines(&self) -> Result<()> {
        let mut s = self.spins.clone();
        for (p, &op) in self.ops.iter().enumerate() {
            if op == IDENTITY {
                continue;
            }
            let b = (op >> 1) as usize;
            if b >= self.bonds.len() {
                return Err(Error::WorldLine(format!("operator {p} references bond {b}")));
            }
            let [i, j] = self.bonds[b];
            let parallel = s[i as usize] == s[j as usize];
            if op & 1 == 0 {
                if parallel != self.ferro[b] {
                    return Err(Error::WorldLine(format!("zero-weight diagonal vertex at {p}")));
                }
            } else {
                if parallel {
                    return Err(Error::WorldLine(format!(
                        "off-diagonal vertex at {p} on parallel spins"
                    )));
                }
                s[i as usize] = -s[i as usize];
                s[j as usize] = -s[j as usize];
            }
        }
        for site in 0..self.n_sites {
            let pos = self.a_pos[site];
            let expected = if pos == NOT_A {
                self.spins[site]
            } else {
                self.edge_bra[pos as usize]
            };
            if s[site] != expected {
                return Err(Error::WorldLine(format!(
                    "site {site} propagates to {} but the τ=β edge holds {expected}",
                    s[site]
                )));
            }
        }
        let snap = self.snapshot();
        if snap.c_a.count_ones() != snap.c_a_prime.count_ones() {
            return Err(Error::WorldLine("A-edge magnetizations differ".into()));
        }
        if self.n_ops != self.ops.iter().filter(|&&o| o != IDENTITY).count() {
            return Err(Error::WorldLine("operator count out of sync".into()));
        }
        Ok(())
    }
}

/// Thermalizes for `n_therm` sweeps with cutoff growth, freezes the cutoff, then
/// records `n_samples` snapshots.
pub fn run<S: SnapshotSink>(state: &mut SimState, n_therm: u64, n_samples: u64, sink: &mut S) -> Result<RunStats> {
    if n_therm == 0 || n_samples == 0 {
        return Err(Error::InvalidParameter("n_therm and n_samples must be positive".into()));
    }
    let t0 = Instant::now();
    thermalize(state, n_therm)?;
    let before = state.counters.clone();
    let mut ops_sum = 0.0;
    let mut taken = 0u64;
    let mut configs = Vec::new();
    while taken < n_samples && !sink.done() {
        state.sweep_and_expand(&mut configs)?;
        ops_sum += state.n_ops as f64;
        sink.record_expanded(&configs)?;
        taken += 1;
    }
    let c = &state.counters;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(RunStats {
        n_therm,
        n_samples: taken,
        insert_acceptance: ratio(
            c.insert_accepts - before.insert_accepts,
            c.insert_attempts - before.insert_attempts,
        ),
        remove_acceptance: ratio(
            c.remove_accepts - before.remove_accepts,
            c.remove_attempts - before.remove_attempts,
        ),
        mean_n_ops: ops_sum / taken.max(1) as f64,
        final_cutoff: state.cutoff(),
        safety_aborts: c.safety_aborts,
        wall_time_s: t0.elapsed().as_secs_f64(),
    })
}

/// Equilibration sweeps followed by freezing the cutoff.
pub fn thermalize(state: &mut SimState, n_therm: u64) -> Result<()> {
    for _ in 0..n_therm {
        state.diagonal_update();
        state.loop_update()?;
        state.counters.sweeps += 1;
    }
    state.freeze_cutoff();
    Ok(())
}

/// Continues sampling an already thermalized state; returns the number of
/// snapshots recorded.
pub fn sample<S: SnapshotSink>(state: &mut SimState, n_samples: u64, sink: &mut S) -> Result<u64> {
    let mut taken = 0;
    let mut configs = Vec::new();
    while taken < n_samples && !sink.done() {
        state.sweep_and_expand(&mut configs)?;
        sink.record_expanded(&configs)?;
        taken += 1;
    }
    Ok(taken)
}
