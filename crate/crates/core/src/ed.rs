//! Exact diagonalization reference: Heisenberg ground states in a fixed
//! magnetization sector, reduced density matrices by explicit partial trace,
//! thermal reduced density matrices for small systems, and the spectral
//! function of `S^z(q)` in a complete eigenbasis.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lanczos::{eigsh, LanczosOptions, Which};
use crate::lattice::{Bipartition, LatticeSpec};
use crate::matrix::{fixed_weight_states, Binomial, BlockMatrix, Csr, SzBlock};

/// Largest system the oracle accepts.
pub const MAX_ED_SITES: usize = 24;
/// Largest |A| for which an explicit reduced density matrix is built.
pub const MAX_RDM_SITES: usize = 14;
/// Largest system for full (thermal) diagonalization.
pub const MAX_THERMAL_SITES: usize = 12;
const DENSE_SECTOR_LIMIT: usize = 600;

#[derive(Debug, Clone)]
pub struct SectorBasis {
    pub n_sites: usize,
    pub n_up: usize,
    pub states: Vec<u64>,
    binom: Binomial,
}

impl SectorBasis {
    pub fn new(n_sites: usize, n_up: usize) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_ED_SITES || n_up > n_sites {
            return Err(Error::TooLarge(format!(
                "sector ({n_sites} sites, {n_up} up) outside the oracle range"
            )));
        }
        Ok(SectorBasis {
            n_sites,
            n_up,
            states: fixed_weight_states(n_sites, n_up),
            binom: Binomial::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    #[inline]
    pub fn index(&self, state: u64) -> usize {
        self.binom.rank(state)
    }
}

/// `H = Σ_b J_b S_i·S_j` restricted to one magnetization sector.
pub struct SectorHamiltonian<'a> {
    basis: &'a SectorBasis,
    diag: Vec<f64>,
    flips: Vec<(u64, f64)>,
    /// Cached off-diagonal entries for sectors small enough to store them.
    csr: Option<Csr>,
}

/// Largest estimated off-diagonal count kept in memory (about 360 MB).
const CSR_ENTRY_LIMIT: usize = 30_000_000;

impl<'a> SectorHamiltonian<'a> {
    pub fn new(lattice: &LatticeSpec, basis: &'a SectorBasis) -> Result<Self> {
        if lattice.n_sites != basis.n_sites {
            return Err(Error::InvalidParameter("basis does not match lattice".into()));
        }
        let flips: Vec<(u64, f64)> = lattice
            .bonds
            .iter()
            .map(|b| ((1u64 << b.i) | (1u64 << b.j), b.coupling / 2.0))
            .collect();
        let diag = basis
            .states
            .iter()
            .map(|&s| {
                lattice
                    .bonds
                    .iter()
                    .map(|b| {
                        let parallel = ((s >> b.i) ^ (s >> b.j)) & 1 == 0;
                        if parallel {
                            b.coupling / 4.0
                        } else {
                            -b.coupling / 4.0
                        }
                    })
                    .sum()
            })
            .collect();
        let mut h = SectorHamiltonian {
            basis,
            diag,
            flips,
            csr: None,
        };
        if basis.dim() * h.flips.len() / 2 <= CSR_ENTRY_LIMIT {
            h.csr = Some(h.build_csr());
        }
        Ok(h)
    }

    /// Off-diagonal part as rows of (column, value).
    fn build_csr(&self) -> Csr {
        let n = self.basis.dim();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for &s in &self.basis.states {
            for &(mask, half_j) in &self.flips {
                let pair = s & mask;
                if pair != 0 && pair != mask {
                    cols.push(self.basis.index(s ^ mask) as u32);
                    vals.push(half_j);
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { n, row_ptr, cols, vals }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        if let Some(c) = &self.csr {
            for a in 0..c.n {
                let mut acc = self.diag[a] * x[a];
                for p in c.row_ptr[a]..c.row_ptr[a + 1] {
                    acc += c.vals[p] * x[c.cols[p] as usize];
                }
                y[a] = acc;
            }
            return;
        }
        for (a, &s) in self.basis.states.iter().enumerate() {
            let mut acc = self.diag[a] * x[a];
            for &(mask, half_j) in &self.flips {
                let pair = s & mask;
                if pair != 0 && pair != mask {
                    acc += half_j * x[self.basis.index(s ^ mask)];
                }
            }
            y[a] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.basis.dim();
        let mut h = DMatrix::zeros(n, n);
        for (a, &s) in self.basis.states.iter().enumerate() {
            h[(a, a)] += self.diag[a];
            for &(mask, half_j) in &self.flips {
                let pair = s & mask;
                if pair != 0 && pair != mask {
                    h[(self.basis.index(s ^ mask), a)] += half_j;
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct GroundState {
    pub energy: f64,
    pub amplitudes: Vec<f64>,
    pub basis: SectorBasis,
    /// Gap to the next level within the sector.
    pub gap: f64,
    pub degenerate: bool,
    pub residual: f64,
}

/// Lowest state of the total `S^z = 0` sector.
pub fn ground_state(lattice: &LatticeSpec) -> Result<GroundState> {
    let n = lattice.n_sites;
    if n > MAX_ED_SITES {
        return Err(Error::TooLarge(format!(
            "{n} sites exceed the oracle limit {MAX_ED_SITES}"
        )));
    }
    if !n.is_multiple_of(2) {
        return Err(Error::InvalidParameter(
            "S^z = 0 sector needs an even site count".into(),
        ));
    }
    let basis = SectorBasis::new(n, n / 2)?;
    let h = SectorHamiltonian::new(lattice, &basis)?;
    let dim = basis.dim();
    let (e0, e1, mut psi) = if dim <= DENSE_SECTOR_LIMIT {
        let eig = SymmetricEigen::new(h.to_dense());
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let e1 = if dim > 1 {
            eig.eigenvalues[order[1]]
        } else {
            f64::INFINITY
        };
        (
            eig.eigenvalues[order[0]],
            e1,
            eig.eigenvectors.column(order[0]).iter().cloned().collect::<Vec<_>>(),
        )
    } else {
        let opts = LanczosOptions {
            basis_size: 24,
            block_size: 2,
            ..LanczosOptions::default()
        };
        let r = eigsh(dim, 2, Which::Smallest, |x, y| h.matvec(x, y), &opts)?;
        (r.values[0], r.values[1], r.vectors.into_iter().next().unwrap())
    };
    let nrm = psi.iter().map(|x| x * x).sum::<f64>().sqrt();
    psi.iter_mut().for_each(|x| *x /= nrm);
    // Fix the overall sign: largest-magnitude amplitude positive.
    let imax = (0..dim).max_by(|&a, &b| psi[a].abs().total_cmp(&psi[b].abs())).unwrap();
    if psi[imax] < 0.0 {
        psi.iter_mut().for_each(|x| *x = -*x);
    }
    let mut hv = vec![0.0; dim];
    h.matvec(&psi, &mut hv);
    let residual = hv
        .iter()
        .zip(&psi)
        .map(|(a, b)| (a - e0 * b).powi(2))
        .sum::<f64>()
        .sqrt();
    let gap = e1 - e0;
    Ok(GroundState {
        energy: e0,
        amplitudes: psi,
        basis,
        gap,
        degenerate: gap < 1e-8 * e0.abs().max(1.0),
        residual,
    })
}

/// Reduced density matrix organized in A-magnetization blocks.
#[derive(Debug, Clone)]
pub struct ExactRdm {
    pub n_a: usize,
    pub blocks: Vec<SzBlock>,
}

impl ExactRdm {
    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.matrix.trace()).sum()
    }

    /// Element `<x|ρ|y>` for packed A states; zero across magnetizations.
    pub fn get(&self, x: u64, y: u64) -> f64 {
        if x.count_ones() != y.count_ones() {
            return 0.0;
        }
        let b = self
            .blocks
            .iter()
            .find(|b| b.n_up == x.count_ones() as usize)
            .expect("every magnetization has a block");
        match (b.index_of(x), b.index_of(y)) {
            (Some(i), Some(j)) => b.matrix.get(i, j),
            _ => 0.0,
        }
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        if self.n_a > 12 {
            return Err(Error::TooLarge(format!("dense 2^{} matrix", self.n_a)));
        }
        let d = 1usize << self.n_a;
        let mut m = DMatrix::zeros(d, d);
        for b in &self.blocks {
            for (i, j, v) in b.matrix.entries() {
                m[(b.states[i] as usize, b.states[j] as usize)] = v;
            }
        }
        Ok(m)
    }

    pub fn block(&self, n_up: usize) -> Option<&SzBlock> {
        self.blocks.iter().find(|b| b.n_up == n_up)
    }
}

fn check_rdm_size(bip: &Bipartition, n_sites: usize) -> Result<()> {
    if bip.a_sites.len() > MAX_RDM_SITES {
        return Err(Error::TooLarge(format!(
            "|A| = {} exceeds the explicit-RDM limit {MAX_RDM_SITES}",
            bip.a_sites.len()
        )));
    }
    if bip.a_sites.len() + bip.b_sites.len() != n_sites {
        return Err(Error::InvalidCut("bipartition does not match the lattice".into()));
    }
    Ok(())
}

/// `ρ_A = Tr_B |ψ><ψ|` for a state on one magnetization sector.
pub fn rdm_of_state(basis: &SectorBasis, psi: &[f64], bip: &Bipartition) -> Result<ExactRdm> {
    check_rdm_size(bip, basis.n_sites)?;
    let n_a = bip.a_sites.len();
    let n_b = bip.b_sites.len();
    let binom = Binomial::new();
    let mut psis: Vec<Option<DMatrix<f64>>> = vec![None; n_a + 1];
    for m in 0..=n_a {
        if m > basis.n_up || basis.n_up - m > n_b {
            continue;
        }
        psis[m] = Some(DMatrix::zeros(
            binom.get(n_a, m) as usize,
            binom.get(n_b, basis.n_up - m) as usize,
        ));
    }
    for (&s, &amp) in basis.states.iter().zip(psi) {
        let a = bip.pack_a(s);
        let b = bip.pack_b(s);
        let m = a.count_ones() as usize;
        psis[m].as_mut().unwrap()[(binom.rank(a), binom.rank(b))] = amp;
    }
    let blocks = (0..=n_a)
        .map(|m| {
            let states = fixed_weight_states(n_a, m);
            let matrix = match &psis[m] {
                Some(p) => p * p.transpose(),
                None => DMatrix::zeros(states.len(), states.len()),
            };
            SzBlock {
                n_a,
                n_up: m,
                states,
                matrix: BlockMatrix::Dense(matrix),
            }
        })
        .collect();
    Ok(ExactRdm { n_a, blocks })
}

/// Ground-state reduced density matrix.
pub fn exact_rdm(gs: &GroundState, bip: &Bipartition) -> Result<ExactRdm> {
    rdm_of_state(&gs.basis, &gs.amplitudes, bip)
}

/// Full spectrum of one magnetization sector by dense diagonalization.
pub fn sector_spectrum(lattice: &LatticeSpec, n_up: usize) -> Result<(SectorBasis, Vec<f64>, DMatrix<f64>)> {
    let basis = SectorBasis::new(lattice.n_sites, n_up)?;
    if basis.dim() > 5000 {
        return Err(Error::TooLarge(format!("dense sector of dimension {}", basis.dim())));
    }
    let h = SectorHamiltonian::new(lattice, &basis)?;
    let eig = SymmetricEigen::new(h.to_dense());
    let mut order: Vec<usize> = (0..basis.dim()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(basis.dim(), basis.dim(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((basis, values, vectors))
}

/// `ρ_A = Tr_B e^{-βH} / Z` by full diagonalization of every sector.
pub fn thermal_rdm(lattice: &LatticeSpec, bip: &Bipartition, beta: f64) -> Result<ExactRdm> {
    let n = lattice.n_sites;
    if n > MAX_THERMAL_SITES {
        return Err(Error::TooLarge(format!(
            "{n} sites exceed the thermal-oracle limit {MAX_THERMAL_SITES}"
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    check_rdm_size(bip, n)?;
    let n_a = bip.a_sites.len();
    let sectors = (0..=n)
        .map(|up| sector_spectrum(lattice, up))
        .collect::<Result<Vec<_>>>()?;
    let e_min = sectors
        .iter()
        .flat_map(|(_, e, _)| e.first().copied())
        .fold(f64::INFINITY, f64::min);
    let mut blocks: Vec<DMatrix<f64>> = (0..=n_a)
        .map(|m| {
            let d = fixed_weight_states(n_a, m).len();
            DMatrix::zeros(d, d)
        })
        .collect();
    let binom = Binomial::new();
    let mut z = 0.0;
    for (basis, energies, vecs) in &sectors {
        let w: Vec<f64> = energies.iter().map(|e| (-beta * (e - e_min)).exp()).collect();
        z += w.iter().sum::<f64>();
        let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |r, c| vecs[(r, c)] * w[c]);
        let rho = &scaled * vecs.transpose();
        let mut by_b: HashMap<u64, Vec<(usize, u64)>> = HashMap::new();
        for (i, &s) in basis.states.iter().enumerate() {
            by_b.entry(bip.pack_b(s)).or_default().push((i, bip.pack_a(s)));
        }
        for group in by_b.values() {
            for &(i, a) in group {
                let m = a.count_ones() as usize;
                let ra = binom.rank(a);
                for &(j, a2) in group {
                    blocks[m][(ra, binom.rank(a2))] += rho[(i, j)];
                }
            }
        }
    }
    let blocks = blocks
        .into_iter()
        .enumerate()
        .map(|(m, mat)| SzBlock {
            n_a,
            n_up: m,
            states: fixed_weight_states(n_a, m),
            matrix: BlockMatrix::Dense(mat / z),
        })
        .collect();
    Ok(ExactRdm { n_a, blocks })
}

/// Complete eigen-decomposition of a generator on one magnetization sector of
/// a chain of `n_sites` sites, with the reference state at index 0.
#[derive(Debug, Clone)]
pub struct Generator {
    pub n_sites: usize,
    pub states: Vec<u64>,
    /// Ascending.
    pub energies: Vec<f64>,
    /// Column `n` is the eigenvector of `energies[n]`.
    pub vectors: DMatrix<f64>,
    /// Eigenvectors kept for completeness but not emitted as poles.
    pub emitted: Vec<bool>,
}

/// Entanglement Hamiltonian `H_A = -ln ρ_A` on one block. Eigenvalues at or
/// below `lambda_floor` have no finite level; they stay in the basis for the
/// completeness check but produce no pole.
pub fn entanglement_generator(block: &SzBlock, lambda_floor: f64) -> Result<Generator> {
    block.check()?;
    let eig = SymmetricEigen::new(block.matrix.to_dense());
    let d = block.dim();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if eig.eigenvalues[order[0]] <= lambda_floor {
        return Err(Error::AllBelowFloor(lambda_floor));
    }
    let energies = order
        .iter()
        .map(|&i| {
            let l = eig.eigenvalues[i];
            if l > lambda_floor {
                -l.ln()
            } else {
                f64::INFINITY
            }
        })
        .collect::<Vec<_>>();
    let emitted = energies.iter().map(|e| e.is_finite()).collect();
    let vectors = DMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(Generator {
        n_sites: block.n_a,
        states: block.states.clone(),
        energies,
        vectors,
        emitted,
    })
}

/// Physical Hamiltonian of a chain-like lattice on the sector with `n_up` up spins.
pub fn hamiltonian_generator(lattice: &LatticeSpec, n_up: usize) -> Result<Generator> {
    let (basis, energies, vectors) = sector_spectrum(lattice, n_up)?;
    let d = basis.dim();
    Ok(Generator {
        n_sites: lattice.n_sites,
        states: basis.states,
        energies,
        vectors,
        emitted: vec![true; d],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pole {
    pub omega: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct SpectralCurve {
    pub q: f64,
    pub eta: f64,
    pub poles: Vec<Pole>,
    pub omega: Vec<f64>,
    pub s: Vec<f64>,
    /// `‖O|m>‖²`, the weight a complete basis must reproduce.
    pub norm_sq: f64,
    /// Weight carried by eigenvectors without a finite level.
    pub dropped_weight: f64,
}

impl SpectralCurve {
    pub fn total_pole_weight(&self) -> f64 {
        self.poles.iter().map(|p| p.weight).sum()
    }

    /// Pole of largest weight.
    pub fn dominant_pole(&self) -> Option<Pole> {
        self.poles.iter().copied().max_by(|a, b| a.weight.total_cmp(&b.weight))
    }

    /// Lowest pole whose weight is at least `fraction` of the total.
    pub fn lowest_significant_pole(&self, fraction: f64) -> Option<Pole> {
        let total = self.total_pole_weight();
        self.poles
            .iter()
            .copied()
            .filter(|p| p.weight >= fraction * total)
            .min_by(|a, b| a.omega.total_cmp(&b.omega))
    }
}

pub const DEFAULT_ETA: f64 = 0.05;

/// Zero-temperature spectral function of `O = S^z(q) = L^{-1/2} Σ_j e^{iqj} S^z_j`
/// from the reference state (index 0) of `generator`:
/// `S(ω) = (1/π) Σ_n |<n|O|m>|² η / ((ω − E_n + E_m)² + η²)`.
pub fn spectral_function(gen: &Generator, q: f64, eta: f64, omegas: &[f64]) -> Result<SpectralCurve> {
    let d = gen.states.len();
    if gen.vectors.nrows() != d || gen.vectors.ncols() != d || gen.energies.len() != d {
        return Err(Error::IncompleteBasis(format!(
            "{} eigenvectors for a {d}-dimensional sector",
            gen.vectors.ncols()
        )));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter("eta must be positive".into()));
    }
    let l = gen.n_sites;
    let phases: Vec<Complex64> = (0..l).map(|j| Complex64::from_polar(1.0, q * j as f64)).collect();
    let o_diag: Vec<Complex64> = gen
        .states
        .iter()
        .map(|&s| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, ph) in phases.iter().enumerate() {
                let sz = if (s >> j) & 1 == 1 { 0.5 } else { -0.5 };
                acc += ph * sz;
            }
            acc / (l as f64).sqrt()
        })
        .collect();
    let m = gen.vectors.column(0);
    let om: Vec<Complex64> = o_diag.iter().zip(m.iter()).map(|(o, &a)| o * a).collect();
    let norm_sq: f64 = om.iter().map(|z| z.norm_sqr()).sum();
    let e_m = gen.energies[0];
    let mut poles = Vec::new();
    let mut dropped = 0.0;
    let mut total = 0.0;
    for n in 0..d {
        let col = gen.vectors.column(n);
        let amp: Complex64 = col.iter().zip(&om).map(|(&v, z)| z * v).sum();
        let w = amp.norm_sqr();
        total += w;
        if gen.emitted[n] {
            poles.push(Pole {
                omega: gen.energies[n] - e_m,
                weight: w,
            });
        } else {
            dropped += w;
        }
    }
    if (total - norm_sq).abs() > 1e-10 * norm_sq.max(1.0) {
        return Err(Error::IncompleteBasis(format!(
            "matrix elements sum to {total}, expected {norm_sq}"
        )));
    }
    let s = omegas
        .iter()
        .map(|&w| {
            poles
                .iter()
                .map(|p| p.weight * eta / ((w - p.omega).powi(2) + eta * eta))
                .sum::<f64>()
                / std::f64::consts::PI
        })
        .collect();
    Ok(SpectralCurve {
        q,
        eta,
        poles,
        omega: omegas.to_vec(),
        s,
        norm_sq,
        dropped_weight: dropped,
    })
}

/// CSV with columns `k,omega,S`.
pub fn spectral_csv(curves: &[SpectralCurve]) -> String {
    let mut out = String::from("k,omega,S\n");
    for c in curves {
        for (w, s) in c.omega.iter().zip(&c.s) {
            let _ = writeln!(out, "{:.12},{:.12},{:.12e}", c.q, w, s);
        }
    }
    out
}

/// CSV with columns `k,omega,weight` listing every pole.
pub fn poles_csv(curves: &[SpectralCurve]) -> String {
    let mut out = String::from("k,omega,weight\n");
    for c in curves {
        for p in &c.poles {
            let _ = writeln!(out, "{:.12},{:.12},{:.12e}", c.q, p.omega, p.weight);
        }
    }
    out
}
