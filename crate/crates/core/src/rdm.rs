//! Accumulation of boundary snapshots into a binned sparse count table, and
//! its reduction to a normalized, symmetrized reduced density matrix split in
//! magnetization blocks.
//!
//! Counts are kept per time-ordered bin so that any bin can be left out for
//! jackknife error estimates. The normalization divides by the total diagonal
//! count, which makes ρ independent of every constant in the sampled weight.

use std::fmt::Write as _;
use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Bipartition, LatticeSpec, RotationMask};
use crate::matrix::{fixed_weight_states, Binomial, BlockMatrix, Csr, SzBlock};
use crate::sse::{BoundarySnapshot, SnapshotSink};

pub const RDM_MAGIC: &[u8; 7] = b"SPRSRDM";
pub const RDM_VERSION: u32 = 2;
/// Blocks larger than this are stored sparse.
pub const DENSE_THRESHOLD: usize = 4096;
/// Element-wise errors are computed only up to this |A|.
pub const ELEMENT_ERROR_MAX_NA: usize = 12;
pub const MIN_BINS: usize = 32;
const MAX_BLOCK_DIM: u64 = 1 << 26;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdmMetadata {
    pub model: String,
    pub n_sites: usize,
    pub a_sites: Vec<usize>,
    pub beta: f64,
    /// Sublattice rotation restricted to A, packed like the A states.
    pub rotation_a: u64,
    pub bin_len: u64,
    /// Seeds of every chain merged into the accumulator, ascending.
    pub seeds: Vec<u64>,
    /// Total count contributed by one sweep (`2^edge_average`).
    #[serde(default = "one")]
    pub edge_weight: u64,
}

fn one() -> u64 {
    1
}

impl RdmMetadata {
    pub fn new(
        lattice: &LatticeSpec,
        bip: &Bipartition,
        mask: &RotationMask,
        beta: f64,
        bin_len: u64,
        seed: u64,
    ) -> Self {
        RdmMetadata {
            model: lattice.short_tag(),
            n_sites: lattice.n_sites,
            a_sites: bip.a_sites.clone(),
            beta,
            rotation_a: mask.a_mask(bip),
            bin_len: bin_len.max(1),
            seeds: vec![seed],
            edge_weight: 1,
        }
    }

    /// Metadata for a sampler recording `2^edge_average` configurations per sweep.
    pub fn with_edge_average(mut self, edge_average: u32) -> Self {
        self.edge_weight = 1 << edge_average;
        self
    }

    pub fn n_a(&self) -> usize {
        self.a_sites.len()
    }

    fn compatible(&self, other: &RdmMetadata) -> Result<()> {
        let same = self.model == other.model
            && self.n_sites == other.n_sites
            && self.a_sites == other.a_sites
            && self.beta.to_bits() == other.beta.to_bits()
            && self.rotation_a == other.rotation_a
            && self.bin_len == other.bin_len
            && self.edge_weight == other.edge_weight;
        if same {
            Ok(())
        } else {
            Err(Error::MetadataMismatch(format!(
                "cannot merge {} (β={}, bin {}, weight {}) with {} (β={}, bin {}, weight {})",
                self.model,
                self.beta,
                self.bin_len,
                self.edge_weight,
                other.model,
                other.beta,
                other.bin_len,
                other.edge_weight
            )))
        }
    }
}

/// Bin length giving about 64 bins for a planned number of samples.
pub fn default_bin_len(n_samples: u64) -> u64 {
    n_samples.div_ceil(64).max(1)
}

#[inline]
fn key(c_a: u64, c_a_prime: u64) -> u64 {
    (c_a << 32) | c_a_prime
}

#[inline]
fn unkey(k: u64) -> (u64, u64) {
    (k >> 32, k & 0xffff_ffff)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdmAccumulator {
    meta: RdmMetadata,
    bins: Vec<FxHashMap<u64, u64>>,
    n_total: u64,
}

impl RdmAccumulator {
    pub fn new(meta: RdmMetadata) -> Result<Self> {
        if meta.n_a() > 32 {
            return Err(Error::InvalidParameter(format!("|A| = {} exceeds 32", meta.n_a())));
        }
        let w = meta.edge_weight;
        if !w.is_power_of_two() || w > 1 << crate::sse::MAX_EDGE_AVERAGE {
            return Err(Error::InvalidParameter(format!("edge weight {w}")));
        }
        Ok(RdmAccumulator {
            meta,
            bins: Vec::new(),
            n_total: 0,
        })
    }

    pub fn metadata(&self) -> &RdmMetadata {
        &self.meta
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn n_a(&self) -> usize {
        self.meta.n_a()
    }

    /// Number of distinct observed (c_a, c_a') pairs.
    pub fn n_keys(&self) -> usize {
        self.totals().len()
    }

    fn check(&self, snap: &BoundarySnapshot) -> Result<()> {
        let limit = if self.n_a() == 32 {
            u64::MAX
        } else {
            (1u64 << self.n_a()) - 1
        };
        if snap.c_a > limit || snap.c_a_prime > limit {
            return Err(Error::CorruptedStream(format!(
                "snapshot ({:#x}, {:#x}) exceeds |A| = {}",
                snap.c_a,
                snap.c_a_prime,
                self.n_a()
            )));
        }
        if snap.c_a.count_ones() != snap.c_a_prime.count_ones() {
            return Err(Error::CorruptedStream(format!(
                "edge magnetizations differ in ({:#x}, {:#x})",
                snap.c_a, snap.c_a_prime
            )));
        }
        if snap.weight_sign != 1 {
            return Err(Error::CorruptedStream("negative-weight snapshot".into()));
        }
        Ok(())
    }

    fn current_bin(&mut self) -> &mut FxHashMap<u64, u64> {
        let bin = (self.n_total / self.meta.bin_len) as usize;
        if bin >= self.bins.len() {
            self.bins.push(FxHashMap::default());
        }
        &mut self.bins[bin]
    }

    /// One sweep carrying its full weight on the sampled edges.
    pub fn record(&mut self, snap: BoundarySnapshot) -> Result<()> {
        self.check(&snap)?;
        let w = self.meta.edge_weight;
        *self.current_bin().entry(key(snap.c_a, snap.c_a_prime)).or_insert(0) += w;
        self.n_total += 1;
        Ok(())
    }

    /// One sweep spread over edge configurations; counts must sum to the edge weight.
    pub fn record_expanded(&mut self, configs: &[(BoundarySnapshot, u64)]) -> Result<()> {
        let mut sum = 0u64;
        for (snap, c) in configs {
            self.check(snap)?;
            sum += c;
        }
        if sum != self.meta.edge_weight {
            return Err(Error::CorruptedStream(format!(
                "sweep counts sum to {sum}, expected {}",
                self.meta.edge_weight
            )));
        }
        let bin = self.current_bin();
        for (snap, c) in configs {
            *bin.entry(key(snap.c_a, snap.c_a_prime)).or_insert(0) += c;
        }
        self.n_total += 1;
        Ok(())
    }

    /// Bin-wise sum; the result carries the union of both seed sets.
    pub fn merge(&self, other: &RdmAccumulator) -> Result<RdmAccumulator> {
        self.meta.compatible(&other.meta)?;
        let n = self.bins.len().max(other.bins.len());
        let mut bins = vec![FxHashMap::default(); n];
        for src in [&self.bins, &other.bins] {
            for (i, b) in src.iter().enumerate() {
                for (&k, &c) in b {
                    *bins[i].entry(k).or_insert(0) += c;
                }
            }
        }
        let mut meta = self.meta.clone();
        meta.seeds.extend(&other.meta.seeds);
        meta.seeds.sort_unstable();
        meta.seeds.dedup();
        Ok(RdmAccumulator {
            meta,
            bins,
            n_total: self.n_total + other.n_total,
        })
    }

    fn totals(&self) -> FxHashMap<u64, u64> {
        let mut t = FxHashMap::default();
        for b in &self.bins {
            for (&k, &c) in b {
                *t.entry(k).or_insert(0) += c;
            }
        }
        t
    }

    /// Counts with bin `exclude` removed, sorted by key.
    fn counts_excluding(&self, exclude: Option<usize>) -> Vec<(u64, u64)> {
        let mut t = self.totals();
        if let Some(b) = exclude {
            for (k, c) in &self.bins[b] {
                let e = t.get_mut(k).unwrap();
                *e -= c;
            }
            t.retain(|_, c| *c > 0);
        }
        let mut v: Vec<(u64, u64)> = t.into_iter().collect();
        v.sort_unstable();
        v
    }

    /// Normalized, symmetrized, physical-frame ρ_A.
    pub fn finalize(&self, opts: &FinalizeOptions) -> Result<SampledRdm> {
        self.finalize_excluding(opts, None)
    }

    /// As `finalize`, with one bin left out (jackknife replica).
    pub fn finalize_excluding(&self, opts: &FinalizeOptions, exclude: Option<usize>) -> Result<SampledRdm> {
        if self.n_total == 0 {
            return Err(Error::EmptyAccumulator);
        }
        if let Some(b) = exclude {
            if b >= self.bins.len() {
                return Err(Error::InvalidParameter(format!("no bin {b}")));
            }
        }
        let counts = self.counts_excluding(exclude);
        let n_a = self.n_a();
        let trace_count: u64 = counts
            .iter()
            .filter(|(k, _)| {
                let (x, y) = unkey(*k);
                x == y
            })
            .map(|(_, c)| c)
            .sum();
        if trace_count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let wanted = |n_up: usize| opts.sectors.as_ref().is_none_or(|s| s.contains(&n_up));
        let binom = Binomial::new();
        for n_up in 0..=n_a {
            if wanted(n_up) && binom.get(n_a, n_up) > MAX_BLOCK_DIM {
                return Err(Error::TooLarge(format!(
                    "block |A|={n_a}, n_up={n_up} has {} states",
                    binom.get(n_a, n_up)
                )));
            }
        }
        let mut triplets: Vec<Vec<(u32, u32, f64)>> = vec![Vec::new(); n_a + 1];
        let norm = 2.0 * trace_count as f64;
        let rot = self.meta.rotation_a;
        for &(k, c) in &counts {
            let (x, y) = unkey(k);
            let n_up = x.count_ones() as usize;
            if !wanted(n_up) {
                continue;
            }
            let v = c as f64 / norm * RotationMask::sign(rot, x) * RotationMask::sign(rot, y);
            let (i, j) = (binom.rank(x) as u32, binom.rank(y) as u32);
            triplets[n_up].push((i, j, v));
            triplets[n_up].push((j, i, v));
        }
        let mut blocks = Vec::new();
        for (n_up, t) in triplets.into_iter().enumerate() {
            if !wanted(n_up) {
                continue;
            }
            let dim = binom.get(n_a, n_up) as usize;
            let csr = Csr::from_triplets(dim, t);
            let matrix = if dim <= opts.dense_threshold {
                BlockMatrix::Dense(csr.to_dense())
            } else {
                BlockMatrix::Sparse(csr)
            };
            blocks.push(SzBlock {
                n_a,
                n_up,
                states: fixed_weight_states(n_a, n_up),
                matrix,
            });
        }
        let element_errors = if opts.element_errors && exclude.is_none() {
            self.element_errors()
        } else {
            None
        };
        Ok(SampledRdm {
            meta: self.meta.clone(),
            n_a,
            n_total: self.n_total,
            trace_count,
            blocks,
            element_errors,
        })
    }

    /// Jackknife standard errors of every observed physical-frame element,
    /// keyed by (x, y) with x ≤ y. Requires at least `MIN_BINS` bins.
    fn element_errors(&self) -> Option<FxHashMap<(u64, u64), f64>> {
        let nb = self.bins.len();
        if nb < MIN_BINS || self.n_a() > ELEMENT_ERROR_MAX_NA {
            return None;
        }
        let fold = |b: &FxHashMap<u64, u64>| {
            let mut m: FxHashMap<(u64, u64), f64> = FxHashMap::default();
            let mut diag = 0.0;
            for (&k, &c) in b {
                let (x, y) = unkey(k);
                if x == y {
                    diag += c as f64;
                }
                *m.entry((x.min(y), x.max(y))).or_insert(0.0) += c as f64 * if x == y { 2.0 } else { 1.0 };
            }
            (m, diag)
        };
        let per_bin: Vec<_> = self.bins.iter().map(fold).collect();
        let (total, diag_total) = fold(&self.totals());
        let rot = self.meta.rotation_a;
        let mut out = FxHashMap::default();
        for (&(x, y), &c) in &total {
            let sign = RotationMask::sign(rot, x) * RotationMask::sign(rot, y);
            let replicas: Vec<f64> = per_bin
                .iter()
                .map(|(m, d)| {
                    let cb = m.get(&(x, y)).copied().unwrap_or(0.0);
                    sign * (c - cb) / (2.0 * (diag_total - d))
                })
                .collect();
            let mean = replicas.iter().sum::<f64>() / nb as f64;
            let var = replicas.iter().map(|r| (r - mean).powi(2)).sum::<f64>() * (nb as f64 - 1.0) / nb as f64;
            out.insert((x, y), var.sqrt());
        }
        Some(out)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(RDM_MAGIC)?;
        w.write_u32::<LE>(RDM_VERSION)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_u32::<LE>(meta.len() as u32)?;
        w.write_all(&meta)?;
        w.write_u64::<LE>(self.n_total)?;
        w.write_u32::<LE>(self.bins.len() as u32)?;
        for b in &self.bins {
            let mut entries: Vec<(u64, u64)> = b.iter().map(|(&k, &c)| (k, c)).collect();
            entries.sort_unstable();
            w.write_u64::<LE>(entries.len() as u64)?;
            for (k, c) in entries {
                w.write_u64::<LE>(k)?;
                w.write_u64::<LE>(c)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let rd = |e| Error::from_read(e, "RDM file");
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(rd)?;
        if &magic != RDM_MAGIC {
            return Err(Error::CorruptFile("bad RDM magic".into()));
        }
        let version = r.read_u32::<LE>().map_err(rd)?;
        if version != RDM_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: RDM_VERSION,
            });
        }
        let len = r.read_u32::<LE>().map_err(rd)? as usize;
        if len > 1 << 24 {
            return Err(Error::CorruptFile("metadata length".into()));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(rd)?;
        let meta: RdmMetadata =
            serde_json::from_slice(&buf).map_err(|e| Error::CorruptFile(format!("metadata: {e}")))?;
        let mut acc = RdmAccumulator::new(meta)?;
        let n_total = r.read_u64::<LE>().map_err(rd)?;
        let n_bins = r.read_u32::<LE>().map_err(rd)? as usize;
        let mut sum = 0u64;
        for _ in 0..n_bins {
            let n = r.read_u64::<LE>().map_err(rd)?;
            let mut bin = FxHashMap::default();
            for _ in 0..n {
                let k = r.read_u64::<LE>().map_err(rd)?;
                let c = r.read_u64::<LE>().map_err(rd)?;
                let (x, y) = unkey(k);
                if x.count_ones() != y.count_ones() || c == 0 {
                    return Err(Error::CorruptFile(format!("invalid entry {k:#x}")));
                }
                sum += c;
                bin.insert(k, c);
            }
            acc.bins.push(bin);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::CorruptFile("trailing bytes after RDM".into()));
        }
        if sum != n_total.saturating_mul(acc.meta.edge_weight) {
            return Err(Error::CorruptFile(format!(
                "counts sum to {sum}, header says {n_total} sweeps of weight {}",
                acc.meta.edge_weight
            )));
        }
        acc.n_total = n_total;
        Ok(acc)
    }

    /// JSON sidecar describing a binary export.
    pub fn sidecar_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            format_version: u32,
            metadata: &'a RdmMetadata,
            n_total: u64,
            n_bins: usize,
            n_keys: usize,
        }
        Ok(serde_json::to_string_pretty(&Sidecar {
            format_version: RDM_VERSION,
            metadata: &self.meta,
            n_total: self.n_total,
            n_bins: self.bins.len(),
            n_keys: self.n_keys(),
        })?)
    }
}

impl SnapshotSink for RdmAccumulator {
    fn record(&mut self, snapshot: BoundarySnapshot) -> Result<()> {
        RdmAccumulator::record(self, snapshot)
    }

    fn record_expanded(&mut self, configs: &[(BoundarySnapshot, u64)]) -> Result<()> {
        RdmAccumulator::record_expanded(self, configs)
    }
}

#[derive(Debug, Clone)]
pub struct FinalizeOptions {
    /// Restrict to these numbers of up spins in A; `None` keeps every block.
    pub sectors: Option<Vec<usize>>,
    pub dense_threshold: usize,
    pub element_errors: bool,
}

impl Default for FinalizeOptions {
    fn default() -> Self {
        FinalizeOptions {
            sectors: None,
            dense_threshold: DENSE_THRESHOLD,
            element_errors: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampledRdm {
    pub meta: RdmMetadata,
    pub n_a: usize,
    pub n_total: u64,
    pub trace_count: u64,
    pub blocks: Vec<SzBlock>,
    /// Standard errors for (x, y), x ≤ y; absent for large A or too few bins.
    pub element_errors: Option<FxHashMap<(u64, u64), f64>>,
}

impl SampledRdm {
    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.matrix.trace()).sum()
    }

    pub fn block(&self, n_up: usize) -> Option<&SzBlock> {
        self.blocks.iter().find(|b| b.n_up == n_up)
    }

    pub fn get(&self, x: u64, y: u64) -> f64 {
        if x.count_ones() != y.count_ones() {
            return 0.0;
        }
        match self.block(x.count_ones() as usize) {
            Some(b) => match (b.index_of(x), b.index_of(y)) {
                (Some(i), Some(j)) => b.matrix.get(i, j),
                _ => 0.0,
            },
            None => 0.0,
        }
    }

    pub fn error(&self, x: u64, y: u64) -> Option<f64> {
        let errs = self.element_errors.as_ref()?;
        Some(errs.get(&(x.min(y), x.max(y))).copied().unwrap_or(0.0))
    }

    pub fn max_error(&self) -> Option<f64> {
        self.element_errors
            .as_ref()
            .map(|e| e.values().cloned().fold(0.0, f64::max))
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

    /// Debug dump `key_a,key_a_prime,probability,std_error`, upper triangle
    /// including the diagonal, sorted by key.
    pub fn to_csv(&self) -> String {
        let mut rows = Vec::new();
        for b in &self.blocks {
            for (i, j, v) in b.matrix.entries() {
                let (x, y) = (b.states[i], b.states[j]);
                if x <= y && v != 0.0 {
                    rows.push((x, y, v));
                }
            }
        }
        rows.sort_by_key(|a| (a.0, a.1));
        let mut out = String::from("key_a,key_a_prime,probability,std_error\n");
        for (x, y, v) in rows {
            let err = self.error(x, y).map(|e| format!("{e:.6e}")).unwrap_or_default();
            let _ = writeln!(out, "{x},{y},{v:.12e},{err}");
        }
        out
    }

    /// Block dimensions in order of increasing `n_up`.
    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim()).collect()
    }
}
