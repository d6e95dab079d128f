//! Entanglement spectra from reduced-density-matrix blocks: momentum
//! resolution under translations of A, dense or iterative diagonalization,
//! conversion to levels ξ = −ln λ, total-spin labels and jackknife errors.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lanczos::{eigsh, LanczosOptions, Which};
use crate::lattice::SymmetryMap;
use crate::matrix::{BlockMatrix, Csr, SzBlock};
use crate::rdm::{FinalizeOptions, RdmAccumulator, DENSE_THRESHOLD};

/// Residual tolerance for exactly computed matrices.
pub const EXACT_COMMUTATOR_TOL: f64 = 1e-10;
/// Spin labels further than this from a valid S are withheld.
pub const SPIN_QUALITY_GATE: f64 = 0.25;

/// Hermitian matrix on one momentum sector.
#[derive(Debug, Clone)]
pub enum SectorMatrix {
    Real(BlockMatrix),
    Complex(ComplexMatrix),
}

#[derive(Debug, Clone)]
pub enum ComplexMatrix {
    Dense(DMatrix<Complex64>),
    /// Both triangles, sorted by (row, col).
    Sparse {
        n: usize,
        entries: Vec<(u32, u32, Complex64)>,
    },
}

impl SectorMatrix {
    pub fn dim(&self) -> usize {
        match self {
            SectorMatrix::Real(m) => m.dim(),
            SectorMatrix::Complex(ComplexMatrix::Dense(d)) => d.nrows(),
            SectorMatrix::Complex(ComplexMatrix::Sparse { n, .. }) => *n,
        }
    }
}

/// Momentum basis of one magnetization block: orbit representatives with
/// their periods, and for every block state its orbit and shift.
#[derive(Debug, Clone)]
pub struct OrbitTable {
    pub order: usize,
    /// (block index of the representative, period)
    pub reps: Vec<(usize, usize)>,
    /// Per block state: (orbit number, j) with state = T^j(rep).
    pub position: Vec<(u32, u32)>,
}

impl OrbitTable {
    pub fn new(block: &SzBlock, sym: &SymmetryMap) -> Result<Self> {
        if sym.n_a() != block.n_a {
            return Err(Error::InvalidParameter("symmetry map does not match |A|".into()));
        }
        let g = sym.order;
        let mut position = vec![(u32::MAX, 0u32); block.dim()];
        let mut reps = Vec::new();
        for i in 0..block.dim() {
            if position[i].0 != u32::MAX {
                continue;
            }
            let orbit = reps.len() as u32;
            let r = block.states[i];
            let mut period = g;
            for j in 0..g {
                let t = sym.apply(j, r);
                if j > 0 && t == r {
                    period = j;
                    break;
                }
                let idx = block
                    .index_of(t)
                    .ok_or_else(|| Error::InvalidParameter("translation leaves the block".into()))?;
                position[idx] = (orbit, j as u32);
            }
            reps.push((i, period));
        }
        Ok(OrbitTable {
            order: g,
            reps,
            position,
        })
    }

    /// Momentum index n (k = 2πn/g) is allowed for an orbit of period p iff n·p ≡ 0 mod g.
    pub fn allowed(&self, n: usize, period: usize) -> bool {
        (n * period).is_multiple_of(self.order)
    }

    /// Orbits carrying momentum n, in representative order.
    pub fn sector_orbits(&self, n: usize) -> Vec<usize> {
        (0..self.reps.len())
            .filter(|&o| self.allowed(n, self.reps[o].1))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MomentumSector {
    /// k = 2π·k_index/order
    pub k_index: usize,
    pub orbits: Vec<usize>,
    pub matrix: SectorMatrix,
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub table: OrbitTable,
    pub sectors: Vec<MomentumSector>,
    /// max |ρ(Tx,Ty) − ρ(x,y)| over the block, in both directions.
    pub residual: f64,
}

/// Largest deviation from translation invariance of the block matrix.
pub fn commutator_residual(block: &SzBlock, sym: &SymmetryMap) -> f64 {
    if sym.order <= 1 {
        return 0.0;
    }
    let inv = sym.order - 1;
    let mut worst: f64 = 0.0;
    for (i, j, v) in block.matrix.entries() {
        for g in [1, inv] {
            let (x, y) = (sym.apply(g, block.states[i]), sym.apply(g, block.states[j]));
            let w = match (block.index_of(x), block.index_of(y)) {
                (Some(a), Some(b)) => block.matrix.get(a, b),
                _ => 0.0,
            };
            worst = worst.max((v - w).abs());
        }
    }
    worst
}

/// Splits a translation-invariant block into momentum sectors. Every sector
/// holds `P_k ρ P_k` in the orbit basis, so the union of sector spectra is the
/// block spectrum whenever ρ commutes with the translations.
pub fn momentum_project(block: &SzBlock, sym: &SymmetryMap, dense_threshold: usize) -> Result<Projection> {
    block.check()?;
    let table = OrbitTable::new(block, sym)?;
    let residual = commutator_residual(block, sym);
    let g = sym.order;
    let entries = block.matrix.entries();
    let mut sectors = Vec::new();
    for n in 0..g {
        let orbits = table.sector_orbits(n);
        if orbits.is_empty() {
            continue;
        }
        let mut local = vec![u32::MAX; table.reps.len()];
        for (a, &o) in orbits.iter().enumerate() {
            local[o] = a as u32;
        }
        let k = 2.0 * PI * n as f64 / g as f64;
        let real = g == 1 || 2 * n == g || n == 0;
        let mut acc: FxHashMap<(u32, u32), Complex64> = FxHashMap::default();
        for &(i, j, v) in &entries {
            let (oi, ji) = table.position[i];
            let (oj, jj) = table.position[j];
            let (a, b) = (local[oi as usize], local[oj as usize]);
            if a == u32::MAX || b == u32::MAX {
                continue;
            }
            let pi = table.reps[oi as usize].1 as f64;
            let pj = table.reps[oj as usize].1 as f64;
            // |r,k> = p^{-1/2} Σ_j e^{-ikj} T^j|r>, each state of the orbit
            // appears g/p times in the full group sum; the period sum is used.
            let phase = Complex64::from_polar(1.0, k * (ji as f64 - jj as f64));
            *acc.entry((a, b)).or_insert(Complex64::new(0.0, 0.0)) += phase * (v / (pi * pj).sqrt());
        }
        let dim = orbits.len();
        let mut trip: Vec<(u32, u32, Complex64)> = acc.into_iter().map(|((a, b), z)| (a, b, z)).collect();
        trip.sort_unstable_by_key(|&(a, b, _)| (a, b));
        let matrix = if real {
            let t: Vec<(u32, u32, f64)> = trip.into_iter().map(|(a, b, z)| (a, b, z.re)).collect();
            let csr = Csr::from_triplets(dim, t);
            SectorMatrix::Real(if dim <= dense_threshold {
                BlockMatrix::Dense(csr.to_dense())
            } else {
                BlockMatrix::Sparse(csr)
            })
        } else if dim <= dense_threshold {
            let mut d = DMatrix::from_element(dim, dim, Complex64::new(0.0, 0.0));
            for (a, b, z) in trip {
                d[(a as usize, b as usize)] = z;
            }
            SectorMatrix::Complex(ComplexMatrix::Dense(d))
        } else {
            SectorMatrix::Complex(ComplexMatrix::Sparse { n: dim, entries: trip })
        };
        sectors.push(MomentumSector {
            k_index: n,
            orbits,
            matrix,
        });
    }
    Ok(Projection {
        table,
        sectors,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigMode {
    Auto,
    Dense,
    Iterative,
}

/// Eigenpairs ordered by decreasing eigenvalue; vectors are columns.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Option<EigenVectors>,
    /// Sum of every eigenvalue of the matrix (its trace).
    pub trace: f64,
}

#[derive(Debug, Clone)]
pub enum EigenVectors {
    Real(Vec<Vec<f64>>),
    Complex(Vec<Vec<Complex64>>),
}

fn sorted_desc(values: &[f64]) -> Vec<usize> {
    let mut o: Vec<usize> = (0..values.len()).collect();
    o.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    o
}

fn use_dense(dim: usize, top_k: Option<usize>, mode: EigMode, dense_threshold: usize) -> bool {
    match mode {
        EigMode::Dense => true,
        EigMode::Iterative => top_k.is_none_or(|k| k >= dim),
        EigMode::Auto => dim <= dense_threshold || top_k.is_none_or(|k| k >= dim),
    }
}

/// Largest eigenpairs of a real symmetric block.
pub fn eig(
    matrix: &BlockMatrix,
    top_k: Option<usize>,
    mode: EigMode,
    want_vectors: bool,
    lanczos: &LanczosOptions,
) -> Result<EigenPairs> {
    let dim = matrix.dim();
    let trace = matrix.trace();
    if dim == 0 {
        return Ok(EigenPairs {
            values: vec![],
            vectors: None,
            trace,
        });
    }
    if use_dense(dim, top_k, mode, DENSE_THRESHOLD) {
        let e = SymmetricEigen::new(matrix.to_dense());
        let ev: Vec<f64> = e.eigenvalues.iter().cloned().collect();
        let order = sorted_desc(&ev);
        let k = top_k.unwrap_or(dim).min(dim);
        let values = order.iter().take(k).map(|&i| ev[i]).collect();
        let vectors = want_vectors.then(|| {
            EigenVectors::Real(
                order
                    .iter()
                    .take(k)
                    .map(|&i| e.eigenvectors.column(i).iter().cloned().collect())
                    .collect(),
            )
        });
        return Ok(EigenPairs { values, vectors, trace });
    }
    let k = top_k.unwrap().min(dim);
    let r = match matrix {
        BlockMatrix::Sparse(s) => eigsh(dim, k, Which::Largest, |x, y| s.matvec(x, y), lanczos)?,
        BlockMatrix::Dense(d) => eigsh(
            dim,
            k,
            Which::Largest,
            |x, y| {
                let v = d * nalgebra::DVectorView::from_slice(x, dim);
                y.copy_from_slice(v.as_slice());
            },
            lanczos,
        )?,
    };
    Ok(EigenPairs {
        values: r.values,
        vectors: want_vectors.then_some(EigenVectors::Real(r.vectors)),
        trace,
    })
}

/// Largest eigenpairs of a complex Hermitian sector matrix. The iterative
/// path works on the real 2n embedding `[[Re, −Im], [Im, Re]]`, whose
/// spectrum is that of the matrix with every eigenvalue doubled.
pub fn eig_complex(
    matrix: &ComplexMatrix,
    top_k: Option<usize>,
    mode: EigMode,
    want_vectors: bool,
    lanczos: &LanczosOptions,
) -> Result<EigenPairs> {
    let (dim, trace) = match matrix {
        ComplexMatrix::Dense(d) => (d.nrows(), d.diagonal().iter().map(|z| z.re).sum()),
        ComplexMatrix::Sparse { n, entries } => (
            *n,
            entries.iter().filter(|(a, b, _)| a == b).map(|(_, _, z)| z.re).sum(),
        ),
    };
    if dim == 0 {
        return Ok(EigenPairs {
            values: vec![],
            vectors: None,
            trace,
        });
    }
    if use_dense(dim, top_k, mode, DENSE_THRESHOLD) {
        let d = match matrix {
            ComplexMatrix::Dense(d) => d.clone(),
            ComplexMatrix::Sparse { n, entries } => {
                let mut d = DMatrix::from_element(*n, *n, Complex64::new(0.0, 0.0));
                for &(a, b, z) in entries {
                    d[(a as usize, b as usize)] = z;
                }
                d
            }
        };
        let e = SymmetricEigen::new(d);
        let ev: Vec<f64> = e.eigenvalues.iter().cloned().collect();
        let order = sorted_desc(&ev);
        let k = top_k.unwrap_or(dim).min(dim);
        let values = order.iter().take(k).map(|&i| ev[i]).collect();
        let vectors = want_vectors.then(|| {
            EigenVectors::Complex(
                order
                    .iter()
                    .take(k)
                    .map(|&i| e.eigenvectors.column(i).iter().cloned().collect())
                    .collect(),
            )
        });
        return Ok(EigenPairs { values, vectors, trace });
    }
    let k = top_k.unwrap().min(dim);
    let entries: Vec<(u32, u32, Complex64)> = match matrix {
        ComplexMatrix::Sparse { entries, .. } => entries.clone(),
        ComplexMatrix::Dense(d) => {
            let mut v = Vec::new();
            for j in 0..dim {
                for i in 0..dim {
                    if d[(i, j)] != Complex64::new(0.0, 0.0) {
                        v.push((i as u32, j as u32, d[(i, j)]));
                    }
                }
            }
            v
        }
    };
    let matvec = |x: &[f64], y: &mut [f64]| {
        y.iter_mut().for_each(|v| *v = 0.0);
        let (xr, xi) = x.split_at(dim);
        for &(a, b, z) in &entries {
            let (a, b) = (a as usize, b as usize);
            y[a] += z.re * xr[b] - z.im * xi[b];
            y[dim + a] += z.im * xr[b] + z.re * xi[b];
        }
    };
    let r = eigsh(2 * dim, (2 * k).min(2 * dim), Which::Largest, matvec, lanczos)?;
    let mut values = Vec::with_capacity(k);
    let mut vectors = Vec::with_capacity(k);
    let mut taken: Vec<Vec<Complex64>> = Vec::new();
    for (val, vec) in r.values.iter().zip(&r.vectors) {
        if values.len() == k {
            break;
        }
        // Map [x; y] to x + i y and keep it only if it is new in the complex sense.
        let mut z: Vec<Complex64> = (0..dim).map(|i| Complex64::new(vec[i], vec[dim + i])).collect();
        for t in &taken {
            let c: Complex64 = t.iter().zip(&z).map(|(a, b)| a.conj() * b).sum();
            for (zi, ti) in z.iter_mut().zip(t) {
                *zi -= c * ti;
            }
        }
        let nz = z.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if nz < 0.5 {
            continue;
        }
        z.iter_mut().for_each(|c| *c /= nz);
        taken.push(z.clone());
        values.push(*val);
        vectors.push(z);
    }
    Ok(EigenPairs {
        values,
        vectors: want_vectors.then_some(EigenVectors::Complex(vectors)),
        trace,
    })
}

/// `⟨v|S²|v⟩` for a vector on the block basis, via `S² = S⁻S⁺ + S_z(S_z+1)`.
pub fn s_squared(states: &[u64], n_a: usize, amplitudes: &[Complex64]) -> f64 {
    let mut raised: FxHashMap<u64, Complex64> = FxHashMap::default();
    let mut sz = 0.0;
    let mut norm = 0.0;
    for (&s, &a) in states.iter().zip(amplitudes) {
        if a == Complex64::new(0.0, 0.0) {
            continue;
        }
        norm += a.norm_sqr();
        sz = s.count_ones() as f64 - n_a as f64 / 2.0;
        for i in 0..n_a {
            if (s >> i) & 1 == 0 {
                *raised.entry(s | (1 << i)).or_insert(Complex64::new(0.0, 0.0)) += a;
            }
        }
    }
    if norm == 0.0 {
        return 0.0;
    }
    raised.values().map(|z| z.norm_sqr()).sum::<f64>() / norm + sz * (sz + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinLabel {
    /// Rounded total spin; `None` when the rounding distance fails the gate.
    pub s: Option<f64>,
    /// Continuous estimate from S(S+1) = ⟨S²⟩.
    pub s_raw: f64,
    pub quality: f64,
}

/// Nearest valid total spin for `⟨S²⟩` in a block with magnetization `sz`.
pub fn spin_label_from_s2(s2: f64, sz: f64) -> SpinLabel {
    let s_raw = (-1.0 + (1.0 + 4.0 * s2.max(0.0)).sqrt()) / 2.0;
    let half = sz.abs();
    // S ≥ |sz| and S − |sz| integer.
    let steps = ((s_raw - half).max(0.0)).round();
    let s = half + steps;
    let quality = (s_raw - s).abs();
    SpinLabel {
        s: (quality <= SPIN_QUALITY_GATE).then_some(s),
        s_raw,
        quality,
    }
}

/// Spin label of an eigenvector given on the block basis.
pub fn spin_label(states: &[u64], n_a: usize, n_up: usize, amplitudes: &[Complex64]) -> SpinLabel {
    let sz = n_up as f64 - n_a as f64 / 2.0;
    spin_label_from_s2(s_squared(states, n_a, amplitudes), sz)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub xi: f64,
    pub lambda: f64,
    /// Momentum index, k = 2π·k/order; absent without translation labels.
    pub k: Option<usize>,
    pub sz: f64,
    pub n_up: usize,
    pub spin: Option<SpinLabel>,
    pub multiplicity: usize,
    pub xi_error: Option<f64>,
    /// Rank of the level inside its (sz, k) sector, 0 = largest λ.
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntanglementSpectrum {
    /// Sorted by ξ, then sz, then k.
    pub levels: Vec<Level>,
    pub xi0: f64,
    pub lambda_floor: f64,
    pub dropped_count: usize,
    /// Trace weight not carried by retained levels.
    pub dropped_weight: f64,
    pub momentum_order: Option<usize>,
    pub projection_residual: f64,
    pub warnings: Vec<String>,
}

impl EntanglementSpectrum {
    pub fn schmidt_gap(&self) -> Option<f64> {
        let first = self.levels.first()?;
        if first.multiplicity > 1 {
            return Some(0.0);
        }
        self.levels.get(1).map(|l| l.xi - first.xi)
    }

    pub fn xi_values(&self) -> Vec<f64> {
        self.levels
            .iter()
            .flat_map(|l| std::iter::repeat_n(l.xi, l.multiplicity))
            .collect()
    }

    /// Lowest level with momentum index `k` and magnetization `sz`, if any.
    pub fn lowest(&self, k: Option<usize>, sz: Option<f64>) -> Option<&Level> {
        self.levels
            .iter()
            .find(|l| k.is_none_or(|k| l.k == Some(k)) && sz.is_none_or(|s| l.sz == s))
    }

    /// CSV with columns `k,sz,S,xi,xi_exc,err,mult`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,sz,S,xi,xi_exc,err,mult\n");
        for l in &self.levels {
            let k = l.k.map(|k| k.to_string()).unwrap_or_default();
            let s = l.spin.and_then(|s| s.s).map(|s| format!("{s}")).unwrap_or_default();
            let err = l.xi_error.map(|e| format!("{e:.6e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{k},{},{s},{:.12},{:.12},{err},{}",
                l.sz,
                l.xi,
                l.xi - self.xi0,
                l.multiplicity
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SpectrumOptions {
    /// Levels per (sz, k) sector; `None` keeps all (dense solve).
    pub top_k: Option<usize>,
    /// `None` applies `max(1e-12, 3 × median level error)` when errors exist.
    pub lambda_floor: Option<f64>,
    pub dense_threshold: usize,
    pub mode: EigMode,
    /// Largest tolerated `‖[ρ, T]‖_max` for momentum labels.
    pub commutator_tol: f64,
    pub spin_labels: bool,
    pub lanczos: LanczosOptions,
    /// Merge levels within a sector whose λ agree to this relative tolerance.
    pub degeneracy_tol: f64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            top_k: None,
            lambda_floor: None,
            dense_threshold: DENSE_THRESHOLD,
            mode: EigMode::Auto,
            commutator_tol: EXACT_COMMUTATOR_TOL,
            spin_labels: true,
            lanczos: LanczosOptions::default(),
            degeneracy_tol: 1e-9,
        }
    }
}

pub const DEFAULT_LAMBDA_FLOOR: f64 = 1e-12;

struct RawLevel {
    lambda: f64,
    k: Option<usize>,
    n_up: usize,
    n_a: usize,
    spin: Option<SpinLabel>,
    rank: usize,
}

fn sector_eig(m: &SectorMatrix, opts: &SpectrumOptions, want: bool) -> Result<EigenPairs> {
    match m {
        SectorMatrix::Real(b) => eig(b, opts.top_k, opts.mode, want, &opts.lanczos),
        SectorMatrix::Complex(c) => eig_complex(c, opts.top_k, opts.mode, want, &opts.lanczos),
    }
}

/// Lifts a momentum-sector vector back onto the block basis.
fn lift(table: &OrbitTable, block: &SzBlock, sector: &MomentumSector, v: &[Complex64]) -> Vec<Complex64> {
    let g = table.order as f64;
    let k = 2.0 * PI * sector.k_index as f64 / g;
    let mut out = vec![Complex64::new(0.0, 0.0); block.dim()];
    let mut local = FxHashMap::default();
    for (a, &o) in sector.orbits.iter().enumerate() {
        local.insert(o as u32, a);
    }
    for (i, &(o, j)) in table.position.iter().enumerate() {
        if let Some(&a) = local.get(&o) {
            let p = table.reps[o as usize].1 as f64;
            out[i] = v[a] * Complex64::from_polar(1.0 / p.sqrt(), -k * j as f64);
        }
    }
    out
}

fn as_complex(v: &[f64]) -> Vec<Complex64> {
    v.iter().map(|&x| Complex64::new(x, 0.0)).collect()
}

/// Diagonalizes every block (momentum-resolved when `sym` has order > 1 and the
/// blocks commute with it) and returns the sorted spectrum.
pub fn compute_spectrum(blocks: &[SzBlock], sym: &SymmetryMap, opts: &SpectrumOptions) -> Result<EntanglementSpectrum> {
    let mut raw = Vec::new();
    let mut warnings = Vec::new();
    let mut residual: f64 = 0.0;
    let mut total_trace = 0.0;
    let use_momentum = sym.order > 1;
    let mut momentum_ok = use_momentum;
    let mut projections = Vec::new();
    if use_momentum {
        for b in blocks {
            let p = momentum_project(b, sym, opts.dense_threshold)?;
            residual = residual.max(p.residual);
            projections.push(p);
        }
        if residual > opts.commutator_tol {
            momentum_ok = false;
            warnings.push(format!(
                "commutator residual {residual:.3e} exceeds {:.3e}; momentum labels withheld",
                opts.commutator_tol
            ));
        }
    }
    for (bi, b) in blocks.iter().enumerate() {
        b.check()?;
        if momentum_ok {
            let p = &projections[bi];
            for sector in &p.sectors {
                let pairs = sector_eig(&sector.matrix, opts, opts.spin_labels)?;
                total_trace += pairs.trace;
                for (r, &lambda) in pairs.values.iter().enumerate() {
                    let spin = match &pairs.vectors {
                        Some(EigenVectors::Real(v)) => {
                            let full = lift(&p.table, b, sector, &as_complex(&v[r]));
                            Some(spin_label(&b.states, b.n_a, b.n_up, &full))
                        }
                        Some(EigenVectors::Complex(v)) => {
                            let full = lift(&p.table, b, sector, &v[r]);
                            Some(spin_label(&b.states, b.n_a, b.n_up, &full))
                        }
                        None => None,
                    };
                    raw.push(RawLevel {
                        lambda,
                        k: Some(sector.k_index),
                        n_up: b.n_up,
                        n_a: b.n_a,
                        spin,
                        rank: r,
                    });
                }
            }
        } else {
            let pairs = eig(&b.matrix, opts.top_k, opts.mode, opts.spin_labels, &opts.lanczos)?;
            total_trace += pairs.trace;
            for (r, &lambda) in pairs.values.iter().enumerate() {
                let spin = match &pairs.vectors {
                    Some(EigenVectors::Real(v)) => Some(spin_label(&b.states, b.n_a, b.n_up, &as_complex(&v[r]))),
                    _ => None,
                };
                raw.push(RawLevel {
                    lambda,
                    k: None,
                    n_up: b.n_up,
                    n_a: b.n_a,
                    spin,
                    rank: r,
                });
            }
        }
    }
    let floor = opts.lambda_floor.unwrap_or(DEFAULT_LAMBDA_FLOOR);
    to_spectrum(
        raw,
        total_trace,
        floor,
        if momentum_ok { Some(sym.order) } else { None },
        residual,
        warnings,
        opts.degeneracy_tol,
    )
}

fn to_spectrum(
    raw: Vec<RawLevel>,
    total_trace: f64,
    floor: f64,
    momentum_order: Option<usize>,
    residual: f64,
    warnings: Vec<String>,
    degeneracy_tol: f64,
) -> Result<EntanglementSpectrum> {
    let mut kept = Vec::new();
    let mut dropped_count = 0;
    let mut retained = 0.0;
    for r in raw {
        if r.lambda > floor {
            retained += r.lambda;
            kept.push(r);
        } else {
            dropped_count += 1;
        }
    }
    if kept.is_empty() {
        return Err(Error::AllBelowFloor(floor));
    }
    // Merge exact degeneracies within one sector.
    let mut grouped: BTreeMap<(usize, Option<usize>), Vec<RawLevel>> = BTreeMap::new();
    for r in kept {
        grouped.entry((r.n_up, r.k)).or_default().push(r);
    }
    let mut levels = Vec::new();
    for (_, mut list) in grouped {
        list.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
        let mut i = 0;
        while i < list.len() {
            let mut j = i + 1;
            while j < list.len() && (list[i].lambda - list[j].lambda).abs() <= degeneracy_tol * list[i].lambda {
                j += 1;
            }
            let r = &list[i];
            levels.push(Level {
                xi: -r.lambda.ln(),
                lambda: r.lambda,
                k: r.k,
                sz: r.n_up as f64 - r.n_a as f64 / 2.0,
                n_up: r.n_up,
                spin: r.spin,
                multiplicity: j - i,
                xi_error: None,
                rank: r.rank,
            });
            i = j;
        }
    }
    levels.sort_by(|a, b| a.xi.total_cmp(&b.xi).then(a.sz.total_cmp(&b.sz)).then(a.k.cmp(&b.k)));
    let xi0 = levels[0].xi;
    Ok(EntanglementSpectrum {
        levels,
        xi0,
        lambda_floor: floor,
        dropped_count,
        dropped_weight: total_trace - retained,
        momentum_order,
        projection_residual: residual,
        warnings,
    })
}

/// Spectrum of a plain list of eigenvalues (no sector structure).
pub fn spectrum_from_eigenvalues(values: &[f64], floor: f64) -> Result<EntanglementSpectrum> {
    let raw = values
        .iter()
        .enumerate()
        .map(|(i, &lambda)| RawLevel {
            lambda,
            k: None,
            n_up: 0,
            n_a: 0,
            spin: None,
            rank: i,
        })
        .collect();
    let total = values.iter().sum();
    to_spectrum(raw, total, floor, None, 0.0, vec![], 1e-9)
}

/// Jackknife errors of every level over the accumulator bins: each replica
/// leaves one bin out and is diagonalized with the same options. Levels are
/// matched by (sz, k, rank).
pub fn attach_jackknife_errors(
    spectrum: &mut EntanglementSpectrum,
    acc: &RdmAccumulator,
    finalize: &FinalizeOptions,
    sym: &SymmetryMap,
    opts: &SpectrumOptions,
) -> Result<()> {
    let nb = acc.n_bins();
    if nb < crate::rdm::MIN_BINS {
        spectrum
            .warnings
            .push(format!("only {nb} bins; level errors not computed"));
        return Ok(());
    }
    let mut fin = finalize.clone();
    fin.element_errors = false;
    let mut rep_opts = opts.clone();
    rep_opts.spin_labels = false;
    rep_opts.degeneracy_tol = 0.0;
    rep_opts.lambda_floor = Some(0.0);
    // Replicas keep the momentum resolution of the full spectrum.
    rep_opts.commutator_tol = f64::INFINITY;
    let key = |sz: f64, k: Option<usize>, rank: usize| ((sz * 2.0) as i64, k, rank);
    let mut samples: FxHashMap<(i64, Option<usize>, usize), Vec<f64>> = FxHashMap::default();
    let sym_used = if spectrum.momentum_order.is_some() {
        sym.clone()
    } else {
        SymmetryMap::trivial(acc.n_a())
    };
    for b in 0..nb {
        let rdm = acc.finalize_excluding(&fin, Some(b))?;
        let rep = compute_spectrum(&rdm.blocks, &sym_used, &rep_opts)?;
        for l in &rep.levels {
            samples.entry(key(l.sz, l.k, l.rank)).or_default().push(l.xi);
        }
    }
    for l in &mut spectrum.levels {
        if let Some(v) = samples.get(&key(l.sz, l.k, l.rank)) {
            if v.len() == nb {
                let mean = v.iter().sum::<f64>() / nb as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() * (nb as f64 - 1.0) / nb as f64;
                l.xi_error = Some(var.sqrt());
            }
        }
    }
    Ok(())
}

/// `max(1e-12, 3 × median λ error)` over levels that carry an error; the λ
/// error of a level is `λ · σ_ξ`.
pub fn default_lambda_floor(spectrum: &EntanglementSpectrum) -> f64 {
    let mut errs: Vec<f64> = spectrum
        .levels
        .iter()
        .filter_map(|l| l.xi_error.map(|e| e * l.lambda))
        .collect();
    if errs.is_empty() {
        return DEFAULT_LAMBDA_FLOOR;
    }
    errs.sort_by(|a, b| a.total_cmp(b));
    (3.0 * errs[errs.len() / 2]).max(DEFAULT_LAMBDA_FLOOR)
}

/// Applies a floor after the fact, dropping levels with λ ≤ floor.
pub fn apply_floor(spectrum: &mut EntanglementSpectrum, floor: f64) {
    let before = spectrum.levels.len();
    let mut dropped = 0.0;
    spectrum.levels.retain(|l| {
        if l.lambda > floor {
            true
        } else {
            dropped += l.lambda * l.multiplicity as f64;
            false
        }
    });
    spectrum.dropped_count += before - spectrum.levels.len();
    spectrum.dropped_weight += dropped;
    spectrum.lambda_floor = spectrum.lambda_floor.max(floor);
    if let Some(l) = spectrum.levels.first() {
        spectrum.xi0 = l.xi;
    }
}
