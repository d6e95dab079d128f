//! End-to-end orchestration: resolve a run description into a lattice and a
//! cut, sample independent chains, merge them in seed order, diagonalize,
//! compare against exact diagonalization and fit.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ed::{exact_rdm, ground_state, thermal_rdm, ExactRdm, MAX_THERMAL_SITES};
use crate::error::{Error, Result};
use crate::fit::{fit_linear_abs, fit_quadratic, fit_sine_dispersion, fit_tos, FitPoint, FitResult, KWindow};
use crate::lattice::{
    build_ladder, build_square, ladder_couplings, make_bipartition, rotation_mask, translations_of_a, Bipartition, Cut,
    LatticeSpec, RotationMask, SymmetryMap,
};
use crate::matrix::SzBlock;
use crate::monitor::{GapPoint, MonitorOptions, SchmidtGapMonitor, StopRule};
use crate::rdm::{default_bin_len, FinalizeOptions, RdmAccumulator, RdmMetadata, SampledRdm};
use crate::spectrum::{
    apply_floor, attach_jackknife_errors, compute_spectrum, default_lambda_floor, EigMode, EntanglementSpectrum,
    SpectrumOptions, EXACT_COMMUTATOR_TOL,
};
use crate::sse::{default_beta, default_n_therm, init_simulation, run, RunStats, SseOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "geometry", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Either both couplings or the angle θ with `J_leg = cos θ`, `J_rung = sin θ`.
    Ladder {
        l: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        j_leg: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        j_rung: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        theta: Option<f64>,
    },
    Square {
        lx: usize,
        ly: usize,
        j: f64,
    },
}

impl ModelConfig {
    pub fn build(&self) -> Result<LatticeSpec> {
        match *self {
            ModelConfig::Ladder {
                l,
                j_leg,
                j_rung,
                theta,
            } => {
                let (leg, rung) = match (j_leg, j_rung, theta) {
                    (Some(a), Some(b), None) => (a, b),
                    (None, None, Some(t)) => ladder_couplings(t),
                    _ => {
                        return Err(Error::InvalidParameter(
                            "ladder needs either j_leg and j_rung, or theta alone".into(),
                        ))
                    }
                };
                build_ladder(l, leg, rung)
            }
            ModelConfig::Square { lx, ly, j } => build_square(lx, ly, j),
        }
    }

    /// Linear size entering finite-size fits.
    pub fn linear_size(&self) -> usize {
        match *self {
            ModelConfig::Ladder { l, .. } => l,
            ModelConfig::Square { lx, .. } => lx,
        }
    }

    pub fn dimension(&self) -> u32 {
        match self {
            ModelConfig::Ladder { .. } => 1,
            ModelConfig::Square { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Defaults to `max(4L, 100)`.
    pub beta: Option<f64>,
    /// One chain per seed; chains are merged in the listed order.
    pub seeds: Vec<u64>,
    /// Defaults to `max(10L, 10⁴)` per chain.
    pub n_therm: Option<u64>,
    /// Per chain.
    pub n_samples: u64,
    /// Defaults to `ceil(n_samples/64)`.
    pub bin_len: Option<u64>,
    #[serde(default = "default_loop_factor")]
    pub loop_step_factor: u64,
    /// log₂ of the edge configurations averaged per sweep over open-loop
    /// flips; 0 disables the averaging.
    #[serde(default = "default_edge_average")]
    pub edge_average: u32,
    /// Samples between Schmidt-gap checkpoints; 0 disables the monitor.
    #[serde(default)]
    pub monitor_period: u64,
    /// Optional sampling cut-off (needs a monitor period).
    pub stop: Option<StopRule>,
}

fn default_edge_average() -> u32 {
    crate::sse::DEFAULT_EDGE_AVERAGE
}

fn default_loop_factor() -> u64 {
    SseOptions::default().loop_step_factor as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Magnetizations of A to diagonalize; all when absent.
    pub sectors: Option<Vec<f64>>,
    /// Levels per (sz, k) sector; all when absent.
    pub top_k: Option<usize>,
    /// Explicit λ floor; defaults to `max(1e-12, 3 × median λ error)`.
    pub lambda_floor: Option<f64>,
    #[serde(default = "yes")]
    pub jackknife: bool,
    #[serde(default = "yes")]
    pub momentum: bool,
    #[serde(default = "yes")]
    pub spin_labels: bool,
    /// Tolerance on ‖[ρ, T]‖_max; sampled runs default to a noise estimate.
    pub commutator_tol: Option<f64>,
    #[serde(default = "auto_mode")]
    pub eig_mode: EigMode,
}

fn yes() -> bool {
    true
}

fn auto_mode() -> EigMode {
    EigMode::Auto
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            sectors: None,
            top_k: None,
            lambda_floor: None,
            jackknife: true,
            momentum: true,
            spin_labels: true,
            commutator_tol: None,
            eig_mode: EigMode::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    /// Thermal when the lattice is small enough, ground state otherwise.
    Auto,
    Ground,
    Thermal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FitSpec {
    /// `v |sin k|` through the lowest branch.
    Sine {
        #[serde(default)]
        window: KWindow,
    },
    /// `a k²` and `2 J_eff sin²(k/2)` through the lowest branch.
    Quadratic {
        #[serde(default)]
        window: KWindow,
    },
    /// `b |k|` through the lowest branch.
    Linear {
        #[serde(default)]
        window: KWindow,
    },
    /// Lowest level per total spin against `S(S+N−2)`.
    Tos {
        #[serde(default = "three")]
        n: u32,
    },
}

fn three() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub cut: Cut,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    #[serde(default)]
    pub fits: Vec<FitSpec>,
    #[serde(default = "auto_oracle")]
    pub oracle: OracleMode,
    #[serde(default = "default_output")]
    pub output: String,
}

fn auto_oracle() -> OracleMode {
    OracleMode::Auto
}

fn default_output() -> String {
    "out".into()
}

/// Everything a run needs, derived from a validated config.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub lattice: LatticeSpec,
    pub bip: Bipartition,
    pub mask: RotationMask,
    pub sym: SymmetryMap,
    pub beta: f64,
    pub n_therm: u64,
    pub bin_len: u64,
    /// Numbers of up spins in A for the requested sectors.
    pub sectors: Option<Vec<usize>>,
}

impl RunConfig {
    /// Fills every defaulted field so the echoed config reproduces the run.
    pub fn materialize(&mut self) {
        let l = self.model.linear_size();
        let s = &mut self.sampling;
        s.beta.get_or_insert(default_beta(l));
        s.n_therm.get_or_insert(default_n_therm(l));
        s.bin_len.get_or_insert(default_bin_len(s.n_samples));
    }

    /// Checks every precondition before any sampling.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut config = self.clone();
        config.materialize();
        let lattice = config.model.build().map_err(|e| e.in_stage("model"))?;
        let bip = make_bipartition(&lattice, config.cut.clone()).map_err(|e| e.in_stage("cut"))?;
        let mask = rotation_mask(&lattice).map_err(|e| e.in_stage("model"))?;
        let s = &config.sampling;
        let bad = |m: String| Error::InvalidParameter(m).in_stage("sampling");
        if s.seeds.is_empty() {
            return Err(bad("at least one seed is required".into()));
        }
        let mut sorted = s.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != s.seeds.len() {
            return Err(bad("seeds must be distinct".into()));
        }
        if s.n_samples == 0 || s.n_therm == Some(0) {
            return Err(bad("n_samples and n_therm must be positive".into()));
        }
        if s.stop.is_some() && s.monitor_period == 0 {
            return Err(bad("a stop rule needs monitor_period > 0".into()));
        }
        if s.loop_step_factor == 0 {
            return Err(bad("loop_step_factor must be positive".into()));
        }
        if s.edge_average > crate::sse::MAX_EDGE_AVERAGE {
            return Err(bad(format!(
                "edge_average must be at most {}",
                crate::sse::MAX_EDGE_AVERAGE
            )));
        }
        let beta = s.beta.unwrap();
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(bad(format!("beta must be positive, got {beta}")));
        }
        let n_a = bip.n_a();
        if n_a > 32 {
            return Err(Error::InvalidParameter(format!("|A| = {n_a} exceeds 32")).in_stage("cut"));
        }
        let sectors = match &config.spectrum.sectors {
            None => None,
            Some(list) => {
                let mut ups = Vec::new();
                for &sz in list {
                    let up = sz + n_a as f64 / 2.0;
                    if up < 0.0 || up > n_a as f64 || up.fract() != 0.0 {
                        return Err(
                            Error::InvalidParameter(format!("sector sz = {sz} impossible for |A| = {n_a}"))
                                .in_stage("spectrum"),
                        );
                    }
                    ups.push(up as usize);
                }
                ups.sort_unstable();
                ups.dedup();
                Some(ups)
            }
        };
        let sym = if config.spectrum.momentum {
            translations_of_a(&bip, &lattice)
        } else {
            SymmetryMap::trivial(n_a)
        };
        Ok(Resolved {
            n_therm: config.sampling.n_therm.unwrap(),
            bin_len: config.sampling.bin_len.unwrap(),
            config,
            lattice,
            bip,
            mask,
            sym,
            beta,
            sectors,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainReport {
    pub seed: u64,
    pub stats: RunStats,
    pub gap_series: Vec<GapPoint>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub acc: RdmAccumulator,
    pub chains: Vec<ChainReport>,
}

impl Resolved {
    fn finalize_options(&self, element_errors: bool) -> FinalizeOptions {
        FinalizeOptions {
            sectors: self.sectors.clone(),
            element_errors,
            ..FinalizeOptions::default()
        }
    }

    fn monitor_options(&self) -> MonitorOptions {
        let mut m = MonitorOptions::new(self.config.sampling.monitor_period);
        m.finalize.sectors = self.sectors.clone();
        m.spectrum.top_k = self.config.spectrum.top_k;
        m.spectrum.commutator_tol = f64::INFINITY;
        m.stop = self.config.sampling.stop;
        if let Some(rule) = m.stop {
            m.track = m.track.max(rule.top_k);
        }
        m
    }

    fn run_chain(&self, seed: u64) -> Result<(RdmAccumulator, ChainReport)> {
        let s = &self.config.sampling;
        let opts = SseOptions {
            loop_step_factor: s.loop_step_factor as usize,
            edge_average: s.edge_average,
            ..SseOptions::default()
        };
        let mut state = init_simulation(&self.lattice, &self.bip, &self.mask, self.beta, seed, opts)?;
        let meta = RdmMetadata::new(&self.lattice, &self.bip, &self.mask, self.beta, self.bin_len, seed)
            .with_edge_average(s.edge_average);
        let acc = RdmAccumulator::new(meta)?;
        if s.monitor_period > 0 {
            let mut mon = SchmidtGapMonitor::new(acc, self.sym.clone(), self.monitor_options());
            let stats = run(&mut state, self.n_therm, s.n_samples, &mut mon)?;
            let stopped_early = mon.stopped_early();
            let (acc, gap_series) = mon.into_parts();
            Ok((
                acc,
                ChainReport {
                    seed,
                    stats,
                    gap_series,
                    stopped_early,
                },
            ))
        } else {
            let mut acc = acc;
            let stats = run(&mut state, self.n_therm, s.n_samples, &mut acc)?;
            Ok((
                acc,
                ChainReport {
                    seed,
                    stats,
                    gap_series: vec![],
                    stopped_early: false,
                },
            ))
        }
    }

    /// Runs one chain per seed and merges the accumulators in seed order.
    pub fn simulate(&self) -> Result<Simulation> {
        let results: Vec<Result<(RdmAccumulator, ChainReport)>> = self
            .config
            .sampling
            .seeds
            .par_iter()
            .map(|&seed| self.run_chain(seed))
            .collect();
        let mut acc: Option<RdmAccumulator> = None;
        let mut chains = Vec::new();
        for r in results {
            let (a, report) = r.map_err(|e| e.in_stage("sampling"))?;
            acc = Some(match acc {
                None => a,
                Some(prev) => prev.merge(&a).map_err(|e| e.in_stage("merge"))?,
            });
            chains.push(report);
        }
        Ok(Simulation {
            acc: acc.unwrap(),
            chains,
        })
    }

    pub fn spectrum_options(&self, rdm: Option<&SampledRdm>) -> SpectrumOptions {
        let c = &self.config.spectrum;
        let tol = c.commutator_tol.unwrap_or_else(|| match rdm {
            Some(r) => sampled_commutator_tol(r),
            None => EXACT_COMMUTATOR_TOL,
        });
        SpectrumOptions {
            top_k: c.top_k,
            lambda_floor: None,
            mode: c.eig_mode,
            commutator_tol: tol,
            spin_labels: c.spin_labels,
            ..SpectrumOptions::default()
        }
    }

    /// Spectrum of the sampled matrix, with jackknife level errors when enabled.
    pub fn spectrum(&self, acc: &RdmAccumulator) -> Result<(SampledRdm, EntanglementSpectrum)> {
        let fin = self.finalize_options(acc.n_a() <= crate::rdm::ELEMENT_ERROR_MAX_NA);
        let rdm = acc.finalize(&fin).map_err(|e| e.in_stage("finalize"))?;
        let opts = self.spectrum_options(Some(&rdm));
        let mut es = compute_spectrum(&rdm.blocks, &self.sym, &opts).map_err(|e| e.in_stage("spectrum"))?;
        if self.config.spectrum.jackknife {
            attach_jackknife_errors(&mut es, acc, &fin, &self.sym, &opts).map_err(|e| e.in_stage("jackknife"))?;
        }
        let floor = self
            .config
            .spectrum
            .lambda_floor
            .unwrap_or_else(|| default_lambda_floor(&es));
        apply_floor(&mut es, floor);
        if es.levels.is_empty() {
            return Err(Error::AllBelowFloor(floor).in_stage("spectrum"));
        }
        Ok((rdm, es))
    }

    pub fn oracle_rdm(&self) -> Result<ExactRdm> {
        let thermal = match self.config.oracle {
            OracleMode::Thermal => true,
            OracleMode::Ground => false,
            OracleMode::Auto => self.lattice.n_sites <= MAX_THERMAL_SITES,
        };
        let r = if thermal {
            thermal_rdm(&self.lattice, &self.bip, self.beta)
        } else {
            ground_state(&self.lattice).and_then(|gs| exact_rdm(&gs, &self.bip))
        };
        r.map_err(|e| e.in_stage("oracle"))
    }

    /// Exact spectrum on the same sectors and symmetry as the sampled one.
    pub fn oracle_spectrum(&self) -> Result<EntanglementSpectrum> {
        let rdm = self.oracle_rdm()?;
        let blocks: Vec<SzBlock> = rdm
            .blocks
            .into_iter()
            .filter(|b| self.sectors.as_ref().is_none_or(|s| s.contains(&b.n_up)))
            .collect();
        let mut opts = self.spectrum_options(None);
        opts.lambda_floor = Some(
            self.config
                .spectrum
                .lambda_floor
                .unwrap_or(crate::spectrum::DEFAULT_LAMBDA_FLOOR),
        );
        compute_spectrum(&blocks, &self.sym, &opts).map_err(|e| e.in_stage("oracle"))
    }

    /// Runs the configured fits on a spectrum.
    pub fn fits(&self, es: &EntanglementSpectrum) -> Vec<(FitSpec, Result<FitResult>)> {
        self.config
            .fits
            .iter()
            .map(|f| {
                let r = match f {
                    FitSpec::Sine { window } => fit_sine_dispersion(&lowest_branch(es, true), *window),
                    FitSpec::Quadratic { window } => fit_quadratic(&lowest_branch(es, true), *window),
                    FitSpec::Linear { window } => fit_linear_abs(&lowest_branch(es, true), *window),
                    FitSpec::Tos { n } => fit_tos(
                        &tos_points(es),
                        self.config.model.linear_size() as f64,
                        self.config.model.dimension(),
                        *n,
                    ),
                };
                (f.clone(), r)
            })
            .collect()
    }
}

/// Noise-scale tolerance for the translation check of a sampled matrix:
/// twenty standard deviations of the largest element difference, counting
/// sweeps rather than averaged edge configurations.
pub fn sampled_commutator_tol(rdm: &SampledRdm) -> f64 {
    let rho_max = rdm
        .blocks
        .iter()
        .flat_map(|b| b.matrix.entries())
        .map(|(_, _, v)| v.abs())
        .fold(0.0, f64::max);
    let sweeps = (rdm.trace_count / rdm.meta.edge_weight).max(1) as f64;
    (20.0 * (rho_max / sweeps).sqrt()).max(EXACT_COMMUTATOR_TOL)
}

/// Momentum of index `n` measured from `n0`, folded into (−π, π].
pub fn relative_momentum(n: usize, n0: usize, order: usize) -> f64 {
    let d = (n + order - n0 % order) % order;
    let k = 2.0 * PI * d as f64 / order as f64;
    if k > PI + 1e-12 {
        k - 2.0 * PI
    } else {
        k
    }
}

/// Lowest level per momentum as `(k − k₀, ξ − ξ₀)`, with k₀ the momentum of
/// the ξ₀ level. Empty without momentum labels.
pub fn lowest_branch(es: &EntanglementSpectrum, include_zero: bool) -> Vec<FitPoint> {
    let (Some(order), Some(first)) = (es.momentum_order, es.levels.first()) else {
        return vec![];
    };
    let Some(n0) = first.k else { return vec![] };
    let mut best = vec![f64::INFINITY; order];
    for l in &es.levels {
        if let Some(k) = l.k {
            best[k] = best[k].min(l.xi);
        }
    }
    let mut pts: Vec<FitPoint> = best
        .iter()
        .enumerate()
        .filter(|(_, x)| x.is_finite())
        .map(|(n, &x)| FitPoint::new(relative_momentum(n, n0, order), x - es.xi0))
        .filter(|p| include_zero || p.x != 0.0)
        .collect();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x));
    pts
}

/// Lowest level per labelled total spin as `(S, ξ, jackknife error)`, ascending in S.
pub fn tos_levels(es: &EntanglementSpectrum) -> Vec<(f64, f64, Option<f64>)> {
    let mut best: Vec<(f64, f64, Option<f64>)> = Vec::new();
    for l in &es.levels {
        let Some(s) = l.spin.and_then(|s| s.s) else { continue };
        match best.iter_mut().find(|(t, _, _)| *t == s) {
            Some(b) if l.xi < b.1 => {
                b.1 = l.xi;
                b.2 = l.xi_error;
            }
            Some(_) => {}
            None => best.push((s, l.xi, l.xi_error)),
        }
    }
    best.sort_by(|a, b| a.0.total_cmp(&b.0));
    best
}

/// Unweighted `(S, ξ)` points of [`tos_levels`].
pub fn tos_points(es: &EntanglementSpectrum) -> Vec<FitPoint> {
    tos_levels(es)
        .into_iter()
        .map(|(s, x, _)| FitPoint::new(s, x))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub sz: f64,
    pub k: Option<usize>,
    /// Position within the (sz, k) sector, counting multiplicity.
    pub index: usize,
    pub xi_sampled: f64,
    pub xi_error: Option<f64>,
    pub xi_exact: f64,
    pub lambda_exact: f64,
}

impl CompareRow {
    pub fn deviation(&self) -> f64 {
        (self.xi_sampled - self.xi_exact).abs()
    }

    /// Deviation in units of the jackknife error.
    pub fn sigmas(&self) -> Option<f64> {
        self.xi_error
            .map(|e| if e > 0.0 { self.deviation() / e } else { f64::INFINITY })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    /// Exact levels with no sampled counterpart (typically below the floor).
    pub unmatched_exact: usize,
    pub max_deviation: f64,
    pub max_sigmas: Option<f64>,
}

impl CompareReport {
    /// CSV with columns `k,sz,index,xi_sampled,err,xi_exact,deviation,sigmas`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,sz,index,xi_sampled,err,xi_exact,deviation,sigmas\n");
        for r in &self.rows {
            let k = r.k.map(|k| k.to_string()).unwrap_or_default();
            let e = r.xi_error.map(|e| format!("{e:.6e}")).unwrap_or_default();
            let s = r.sigmas().map(|s| format!("{s:.3}")).unwrap_or_default();
            out.push_str(&format!(
                "{k},{},{},{:.12},{e},{:.12},{:.6e},{s}\n",
                r.sz,
                r.index,
                r.xi_sampled,
                r.xi_exact,
                r.deviation()
            ));
        }
        out
    }

    /// Rows whose exact λ exceeds `lambda_min`.
    pub fn above(&self, lambda_min: f64) -> impl Iterator<Item = &CompareRow> {
        self.rows.iter().filter(move |r| r.lambda_exact > lambda_min)
    }
}

fn expanded(es: &EntanglementSpectrum) -> Vec<((i64, Option<usize>), Vec<(f64, Option<f64>, f64)>)> {
    let mut map: std::collections::BTreeMap<(i64, Option<usize>), Vec<(f64, Option<f64>, f64)>> = Default::default();
    for l in &es.levels {
        let e = map.entry(((l.sz * 2.0).round() as i64, l.k)).or_default();
        for _ in 0..l.multiplicity {
            e.push((l.xi, l.xi_error, l.lambda));
        }
    }
    for v in map.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    map.into_iter().collect()
}

/// Pairs levels sector by sector in ascending ξ, expanding multiplicities.
pub fn compare(sampled: &EntanglementSpectrum, exact: &EntanglementSpectrum) -> CompareReport {
    let s = expanded(sampled);
    let e = expanded(exact);
    let mut rows = Vec::new();
    let mut unmatched = 0;
    for (key, ex) in &e {
        let sm = s
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[]);
        for (i, &(xi_e, _, lam)) in ex.iter().enumerate() {
            match sm.get(i) {
                Some(&(xi_s, err, _)) => rows.push(CompareRow {
                    sz: key.0 as f64 / 2.0,
                    k: key.1,
                    index: i,
                    xi_sampled: xi_s,
                    xi_error: err,
                    xi_exact: xi_e,
                    lambda_exact: lam,
                }),
                None => unmatched += 1,
            }
        }
    }
    rows.sort_by(|a, b| a.xi_exact.total_cmp(&b.xi_exact));
    let max_deviation = rows.iter().map(|r| r.deviation()).fold(0.0, f64::max);
    let max_sigmas = rows.iter().filter_map(|r| r.sigmas()).reduce(f64::max);
    CompareReport {
        rows,
        unmatched_exact: unmatched,
        max_deviation,
        max_sigmas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        RunConfig {
            model: ModelConfig::Ladder {
                l: 4,
                j_leg: Some(1.0),
                j_rung: Some(1.732),
                theta: None,
            },
            cut: Cut::LadderChain { leg: 0 },
            sampling: SamplingConfig {
                beta: Some(16.0),
                seeds: vec![1, 2],
                n_therm: Some(2000),
                n_samples: 20_000,
                bin_len: None,
                loop_step_factor: 4,
                edge_average: 6,
                monitor_period: 0,
                stop: None,
            },
            spectrum: SpectrumConfig::default(),
            fits: vec![FitSpec::Sine {
                window: KWindow::default(),
            }],
            oracle: OracleMode::Auto,
            output: "out".into(),
        }
    }

    #[test]
    fn materialize_fills_defaults() {
        let mut c = small_config();
        c.sampling.beta = None;
        c.sampling.bin_len = None;
        c.materialize();
        assert_eq!(c.sampling.beta, Some(100.0));
        assert_eq!(c.sampling.bin_len, Some(313));
    }

    #[test]
    fn invalid_cut_fails_before_sampling() {
        let mut c = small_config();
        c.cut = Cut::Ring2D { row: 0 };
        let e = c.resolve().unwrap_err();
        assert!(matches!(e, Error::Stage { stage: "cut", .. }), "{e}");
        let mut c = small_config();
        c.sampling.seeds = vec![3, 3];
        assert!(matches!(
            c.resolve().unwrap_err(),
            Error::Stage { stage: "sampling", .. }
        ));
        let mut c = small_config();
        c.model = ModelConfig::Ladder {
            l: 4,
            j_leg: Some(1.0),
            j_rung: None,
            theta: Some(1.0),
        };
        assert!(matches!(c.resolve().unwrap_err(), Error::Stage { stage: "model", .. }));
        let mut c = small_config();
        c.spectrum.sectors = Some(vec![0.5]);
        assert!(matches!(
            c.resolve().unwrap_err(),
            Error::Stage { stage: "spectrum", .. }
        ));
    }

    #[test]
    fn deterministic_and_close_to_oracle() {
        let r = small_config().resolve().unwrap();
        let a = r.simulate().unwrap();
        let b = r.simulate().unwrap();
        assert_eq!(a.acc, b.acc);
        assert_eq!(a.acc.n_total(), 40_000);
        assert_eq!(a.acc.metadata().seeds, vec![1, 2]);
        let (_, es) = r.spectrum(&a.acc).unwrap();
        let (_, es2) = r.spectrum(&b.acc).unwrap();
        assert_eq!(es.to_csv(), es2.to_csv());
        let exact = r.oracle_spectrum().unwrap();
        let rep = compare(&es, &exact);
        let low: Vec<&CompareRow> = rep.above(0.05).collect();
        assert!(!low.is_empty());
        assert!(low.iter().all(|row| row.deviation() < 0.1), "{}", rep.to_csv());
        let fits = r.fits(&es);
        assert!(fits[0].1.as_ref().unwrap().value("v") > 0.0);
    }

    #[test]
    fn momentum_folding() {
        assert_eq!(relative_momentum(0, 0, 8), 0.0);
        assert!((relative_momentum(4, 0, 8) - PI).abs() < 1e-15);
        assert!((relative_momentum(5, 0, 8) + 3.0 * PI / 4.0).abs() < 1e-15);
        assert!((relative_momentum(0, 4, 8) - PI).abs() < 1e-15);
        assert!((relative_momentum(3, 4, 8) + PI / 4.0).abs() < 1e-15);
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = small_config();
        let s = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let bad = s.replace("\"n_samples\"", "\"n_sample\"");
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }
}
