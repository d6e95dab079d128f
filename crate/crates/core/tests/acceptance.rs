//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion, with
//! indented detail lines, and exits nonzero when any criterion fails.
//!
//! Numeric arguments select criteria:
//! `cargo test --release -p entspec-core --test acceptance -- 4 5`.

use std::f64::consts::PI;
use std::time::Instant;

use entspec_core::ed::{entanglement_generator, exact_rdm, ground_state, spectral_function, ExactRdm, DEFAULT_ETA};
use entspec_core::fit::{
    chi_perp, extrapolate_velocity, fit_groundlevel_scaling, fit_linear_abs, fit_quadratic, fit_sine_dispersion,
    fit_tos, is_monotone_increasing, quadratic_linear_ratio, FitPoint, KWindow,
};
use entspec_core::lattice::{
    build_ladder, build_square, make_bipartition, rotation_mask, translations_of_a, Cut, LatticeSpec, SymmetryMap,
};
use entspec_core::matrix::SzBlock;
use entspec_core::pipeline::{
    compare, lowest_branch, tos_levels, tos_points, ModelConfig, OracleMode, Resolved, RunConfig, SamplingConfig,
    SpectrumConfig,
};
use entspec_core::rdm::{default_bin_len, FinalizeOptions, RdmAccumulator, RdmMetadata, ELEMENT_ERROR_MAX_NA};
use entspec_core::spectrum::{eig, eig_complex, momentum_project, EigMode, EntanglementSpectrum, SectorMatrix};
use entspec_core::sse::{init_simulation, sample, thermalize, SimState, SseOptions, DEFAULT_EDGE_AVERAGE};
use nalgebra::{DMatrix, SymmetricEigen};

const AFM: (f64, f64) = (1.0, 1.732);
const FM: (f64, f64) = (-1.0, 1.732);
const LADDER_BETA: f64 = 16.0;

struct Outcome {
    pass: bool,
    detail: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            pass: true,
            detail: Vec::new(),
        }
    }

    fn note(&mut self, line: String) {
        self.detail.push(line);
    }

    /// Records a sub-check; any failing sub-check fails the criterion.
    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.detail.push(format!("{} {line}", if ok { "ok  " } else { "BAD " }));
    }
}

/// One thermalized chain that can be advanced checkpoint by checkpoint.
struct Chain {
    res: Resolved,
    state: SimState,
    acc: RdmAccumulator,
}

impl Chain {
    fn new(cfg: RunConfig) -> Chain {
        let res = cfg.resolve().expect("acceptance config");
        let seed = res.config.sampling.seeds[0];
        let opts = SseOptions {
            loop_step_factor: res.config.sampling.loop_step_factor as usize,
            edge_average: res.config.sampling.edge_average,
            ..SseOptions::default()
        };
        let mut state = init_simulation(&res.lattice, &res.bip, &res.mask, res.beta, seed, opts).unwrap();
        thermalize(&mut state, res.n_therm).unwrap();
        let meta = RdmMetadata::new(&res.lattice, &res.bip, &res.mask, res.beta, res.bin_len, seed)
            .with_edge_average(res.config.sampling.edge_average);
        let acc = RdmAccumulator::new(meta).unwrap();
        Chain { res, state, acc }
    }

    fn advance_to(&mut self, n: u64) {
        let more = n.saturating_sub(self.acc.n_total());
        sample(&mut self.state, more, &mut self.acc).unwrap();
    }

    fn spectrum(&self) -> EntanglementSpectrum {
        self.res.spectrum(&self.acc).expect("sampled spectrum").1
    }
}

fn config(model: ModelConfig, cut: Cut, beta: f64, n_samples: u64, seed: u64) -> RunConfig {
    RunConfig {
        model,
        cut,
        sampling: SamplingConfig {
            beta: Some(beta),
            seeds: vec![seed],
            n_therm: None,
            n_samples,
            bin_len: None,
            loop_step_factor: 4,
            edge_average: DEFAULT_EDGE_AVERAGE,
            monitor_period: 0,
            stop: None,
        },
        spectrum: SpectrumConfig::default(),
        fits: vec![],
        oracle: OracleMode::Auto,
        output: String::new(),
    }
}

fn ladder(l: usize, (j_leg, j_rung): (f64, f64), n_samples: u64, seed: u64) -> RunConfig {
    let model = ModelConfig::Ladder {
        l,
        j_leg: Some(j_leg),
        j_rung: Some(j_rung),
        theta: None,
    };
    config(model, Cut::LadderChain { leg: 0 }, LADDER_BETA, n_samples, seed)
}

fn square(l: usize, cut: Cut, beta: f64, n_samples: u64, seed: u64) -> RunConfig {
    config(ModelConfig::Square { lx: l, ly: l, j: 1.0 }, cut, beta, n_samples, seed)
}

/// Runs a full chain to its configured sample count.
fn simulate(cfg: RunConfig, suite: &mut Suite, label: &str) -> Chain {
    let t = Instant::now();
    let n = cfg.sampling.n_samples;
    let mut chain = Chain::new(cfg);
    chain.advance_to(n);
    suite
        .timing
        .push(format!("{label}: {n} sweeps in {:.1} s", t.elapsed().as_secs_f64()));
    suite.audit(label, &chain);
    chain
}

/// Properties every finalized sampled matrix must have, collected across the
/// whole suite and reported together.
#[derive(Default)]
struct Suite {
    audits: Vec<(bool, String)>,
    timing: Vec<String>,
    afm8: Option<Chain>,
}

impl Suite {
    fn audit(&mut self, label: &str, chain: &Chain) {
        let n_a = chain.acc.n_a();
        let opts = FinalizeOptions {
            sectors: None,
            element_errors: n_a <= ELEMENT_ERROR_MAX_NA,
            ..FinalizeOptions::default()
        };
        let rdm = chain.acc.finalize(&opts).unwrap();
        let trace_err = (rdm.trace() - 1.0).abs();
        let asym = rdm.blocks.iter().map(|b| b.matrix.asymmetry()).fold(0.0, f64::max);
        let mut structure = rdm.blocks.len() == n_a + 1;
        let mut covered = 0usize;
        for (i, b) in rdm.blocks.iter().enumerate() {
            structure &= b.n_up == i && b.check().is_ok();
            structure &= b.states.iter().all(|s| s.count_ones() as usize == b.n_up);
            structure &= b.states.windows(2).all(|w| w[0] < w[1]);
            covered += b.dim();
        }
        structure &= covered == 1usize << n_a;
        let mut ok = trace_err < 1e-12 && asym == 0.0 && structure;
        let mut line = format!(
            "{label}: |tr−1| {trace_err:.1e}, asymmetry {asym:.1e}, blocks {}",
            if structure { "exact" } else { "BROKEN" }
        );
        match rdm.max_error() {
            Some(sigma) => {
                let min_eig = rdm
                    .blocks
                    .iter()
                    .map(|b| SymmetricEigen::new(b.matrix.to_dense()).eigenvalues.min())
                    .fold(f64::INFINITY, f64::min);
                ok &= min_eig >= -3.0 * sigma;
                line += &format!(", λ_min {min_eig:.2e} ≥ −3σ_max = {:.2e}", -3.0 * sigma);
            }
            None => line += ", λ_min unchecked (no element errors above |A| = 12)",
        }
        self.audits.push((ok, line));
    }

    /// The L = 8 antiferromagnetic chain is shared by the convergence, velocity
    /// and scaling criteria.
    fn afm8(&mut self) -> &Chain {
        if self.afm8.is_none() {
            let mut cfg = ladder(8, AFM, 1_000_000, 81);
            cfg.spectrum.jackknife = false;
            let chain = simulate(cfg, self, "AFM ladder L=8");
            self.afm8 = Some(chain);
        }
        self.afm8.as_ref().unwrap()
    }
}

// ---------------------------------------------------------------------------

fn oracle_equivalence(suite: &mut Suite) -> Outcome {
    let mut out = Outcome::new();
    for (l, sectors, n) in [(4, None, 1_000_000u64), (6, Some(vec![0.0]), 1_000_000)] {
        let mut cfg = ladder(l, AFM, n, 10 + l as u64);
        cfg.spectrum.sectors = sectors;
        let chain = simulate(cfg, suite, &format!("AFM ladder L={l}"));
        let sampled = chain.spectrum();
        let exact = chain.res.oracle_spectrum().unwrap();
        let report = compare(&sampled, &exact);
        let wanted: usize = exact
            .levels
            .iter()
            .filter(|v| v.lambda > 1e-3)
            .map(|v| v.multiplicity)
            .sum();
        let rows: Vec<_> = report.above(1e-3).collect();
        let max_dev = rows.iter().map(|r| r.deviation()).fold(0.0, f64::max);
        let max_sig = rows
            .iter()
            .map(|r| r.sigmas().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max);
        out.check(
            rows.len() == wanted && max_dev < 0.05 && max_sig <= 3.0,
            format!(
                "L={l} {}: {}/{wanted} levels with λ > 1e-3 matched, max |Δξ| {max_dev:.4}, max {max_sig:.2}σ, {n} sweeps",
                if l == 4 { "all sectors" } else { "Sz=0" },
                rows.len()
            ),
        );
    }
    out
}

fn convergence_ordering(suite: &mut Suite) -> Outcome {
    let mut out = Outcome::new();
    let t = Instant::now();
    let mut cfg = ladder(8, AFM, 1_000_000, 81);
    cfg.spectrum.jackknife = false;
    let mut chain = Chain::new(cfg);
    let exact = chain.res.oracle_spectrum().unwrap();
    // Lowest ten exact levels with multiplicity: (exact ξ, checkpoint reached).
    let mut needed: Vec<(f64, Option<u64>)> = Vec::new();
    let checkpoints = [100_000u64, 1_000_000, 10_000_000];
    // Finer resolution below the first checkpoint; informational only.
    for n in [1_000u64, 10_000] {
        chain.advance_to(n);
        let report = compare(&chain.spectrum(), &exact);
        let devs: Vec<String> = report
            .rows
            .iter()
            .take(10)
            .map(|r| format!("{:.3}", r.deviation()))
            .collect();
        out.note(format!("{n:>9} sweeps: |Δξ| = [{}]", devs.join(", ")));
    }
    for (c, &n) in checkpoints.iter().enumerate() {
        chain.advance_to(n);
        let report = compare(&chain.spectrum(), &exact);
        let rows: Vec<_> = report.rows.iter().take(10).collect();
        if needed.is_empty() {
            needed = rows.iter().map(|r| (r.xi_exact, None)).collect();
        }
        for (slot, r) in needed.iter_mut().zip(&rows) {
            if slot.1.is_none() && r.deviation() < 0.05 {
                slot.1 = Some(n);
            }
        }
        let devs: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.deviation())).collect();
        out.note(format!("{n:>9} sweeps: |Δξ| = [{}]", devs.join(", ")));
        if n == 1_000_000 {
            suite.audit("AFM ladder L=8", &chain);
        }
        if c >= 1 && needed.iter().all(|s| s.1.is_some()) {
            break;
        }
    }
    suite.timing.push(format!(
        "AFM ladder L=8 checkpoints: {} sweeps in {:.1} s",
        chain.acc.n_total(),
        t.elapsed().as_secs_f64()
    ));
    // Exactly degenerate levels have no intrinsic order; sort them by need.
    let key = |s: &(f64, Option<u64>)| s.1.unwrap_or(u64::MAX);
    needed.sort_by(|a, b| {
        if (a.0 - b.0).abs() < 1e-8 {
            key(a).cmp(&key(b))
        } else {
            a.0.total_cmp(&b.0)
        }
    });
    let counts: Vec<String> = needed
        .iter()
        .map(|s| s.1.map(|n| format!("{n:.0e}")).unwrap_or_else(|| ">1e7".into()))
        .collect();
    let ordered = needed.len() == 10 && needed.windows(2).all(|w| key(&w[0]) <= key(&w[1]));
    out.check(
        ordered,
        format!("sweeps needed per level, ascending ξ: [{}]", counts.join(", ")),
    );
    if chain.acc.n_total() >= 1_000_000 {
        // Reuse the chain at its current length for the velocity fits.
        suite.afm8 = Some(chain);
    }
    out
}

/// exp(a) by Taylor series with scaling and squaring.
fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.amax() * a.nrows() as f64;
    let s = (norm.max(1.0).log2().ceil() as i32 + 4).max(0);
    let scaled = a / 2f64.powi(s);
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

fn thermal_limit(suite: &mut Suite) -> Outcome {
    let mut out = Outcome::new();
    // Basis |s0 s1> with bit 0 = site 0, J = 1.
    let mut h = DMatrix::<f64>::zeros(4, 4);
    for (i, d) in [(0, 0.25), (1, -0.25), (2, -0.25), (3, 0.25)] {
        h[(i, i)] = d;
    }
    h[(1, 2)] = 0.5;
    h[(2, 1)] = 0.5;
    let lat = LatticeSpec::custom(2, &[(0, 1, 1.0)]).unwrap();
    let cut = Cut::Sites { sites: vec![0, 1] };
    for (i, beta) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let g = expm(&(&h * -beta));
        let g = &g / g.trace();
        let t = Instant::now();
        let (seed, n) = (30 + i as u64, 10_000_000u64);
        let bip = make_bipartition(&lat, cut.clone()).unwrap();
        let mask = rotation_mask(&lat).unwrap();
        let mut state = init_simulation(&lat, &bip, &mask, beta, seed, SseOptions::default()).unwrap();
        thermalize(&mut state, 1000).unwrap();
        let meta =
            RdmMetadata::new(&lat, &bip, &mask, beta, default_bin_len(n), seed).with_edge_average(DEFAULT_EDGE_AVERAGE);
        let mut acc = RdmAccumulator::new(meta).unwrap();
        sample(&mut state, n, &mut acc).unwrap();
        suite.timing.push(format!(
            "two sites β={beta}: {n} sweeps in {:.1} s",
            t.elapsed().as_secs_f64()
        ));
        let rdm = acc.finalize(&FinalizeOptions::default()).unwrap();
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for x in 0..4u64 {
            for y in 0..4u64 {
                let d = (rdm.get(x, y) - g[(x as usize, y as usize)]).abs();
                let sigma = rdm.error(x, y).unwrap_or(0.0);
                if sigma > 0.0 {
                    worst = worst.max(d / sigma);
                    ok &= d <= 3.0 * sigma;
                } else {
                    ok &= d < 1e-15;
                }
            }
        }
        out.check(ok, format!("β={beta}: 16 elements, worst {worst:.2}σ"));
        let (tr, asym) = (
            trace_dev(&rdm.blocks),
            rdm.blocks.iter().map(|b| b.matrix.asymmetry()).fold(0.0, f64::max),
        );
        suite.audits.push((
            tr < 1e-12 && asym == 0.0,
            format!("two sites β={beta}: |tr−1| {tr:.1e}, asymmetry {asym:.1e}"),
        ));
    }
    out
}

fn trace_dev(blocks: &[SzBlock]) -> f64 {
    (blocks.iter().map(|b| b.matrix.trace()).sum::<f64>() - 1.0).abs()
}

/// Spectrum restricted to Sz = 0 levels; ξ₀ stays the global minimum.
fn sz0(es: &EntanglementSpectrum) -> EntanglementSpectrum {
    let mut e = es.clone();
    e.levels.retain(|l| l.sz == 0.0);
    e
}

struct AfmData {
    v: Vec<FitPoint>,
    xi0: Vec<FitPoint>,
}

fn afm_series(suite: &mut Suite) -> AfmData {
    let mut v = Vec::new();
    let mut xi0 = Vec::new();
    for l in [8usize, 12, 16] {
        let es = if l == 8 {
            sz0(&suite.afm8().spectrum())
        } else {
            let mut cfg = ladder(l, AFM, 1_000_000, 80 + l as u64);
            cfg.spectrum.sectors = Some(vec![0.0]);
            cfg.spectrum.top_k = Some(2);
            cfg.spectrum.jackknife = false;
            cfg.spectrum.spin_labels = false;
            simulate(cfg, suite, &format!("AFM ladder L={l}")).spectrum()
        };
        let fit = fit_sine_dispersion(&lowest_branch(&es, true), KWindow::two_point(0.0)).unwrap();
        v.push(FitPoint::new(l as f64, fit.value("v")));
        xi0.push(FitPoint::new(l as f64, es.xi0));
    }
    AfmData { v, xi0 }
}

fn afm_velocity(data: &AfmData) -> (Outcome, f64) {
    let mut out = Outcome::new();
    for p in &data.v {
        out.note(format!("L={}: two-point v_L = {:.4}", p.x, p.y));
    }
    let fit = extrapolate_velocity(&data.v).unwrap();
    let v = fit.value("v_inf");
    let rel = (v - 2.41).abs() / 2.41;
    out.check(
        rel < 0.10,
        format!(
            "v_inf = {v:.4} ± {:.4}, {:.1}% from 2.41",
            fit.error("v_inf"),
            100.0 * rel
        ),
    );
    (out, v)
}

fn cft_consistency(data: &AfmData, v_disp: f64) -> Outcome {
    let mut out = Outcome::new();
    let fit = fit_groundlevel_scaling(&data.xi0).unwrap();
    let v = fit.value("v_cft");
    let rel = (v - v_disp).abs() / v_disp;
    out.note(format!("e0 = {:.5}, d1 = {:.4}", fit.value("e0"), fit.value("d1")));
    out.check(
        rel < 0.15,
        format!(
            "v_cft = {v:.4} vs dispersion v = {v_disp:.4}: {:.1}% apart",
            100.0 * rel
        ),
    );
    out
}

fn fm_negative(suite: &mut Suite) -> Outcome {
    let mut out = Outcome::new();
    let window = KWindow::up_to(PI / 2.0);
    for l in [12usize, 16] {
        let mut cfg = ladder(l, FM, 1_000_000, 120 + l as u64);
        cfg.spectrum.sectors = Some(vec![0.0]);
        cfg.spectrum.top_k = Some(2);
        cfg.spectrum.jackknife = false;
        cfg.spectrum.spin_labels = false;
        let es = simulate(cfg, suite, &format!("FM ladder L={l}")).spectrum();
        let (ratio, q, lin) = quadratic_linear_ratio(&lowest_branch(&es, true), window).unwrap();
        out.check(
            ratio > 2.0,
            format!("L={l}: RSS quadratic {:.4} / linear {:.4} = {ratio:.2}", q.rss, lin.rss),
        );
    }
    // Exact entanglement spectral function: peak locus at the smallest momenta.
    let l = 10;
    let lat = build_ladder(l, FM.0, FM.1).unwrap();
    let bip = make_bipartition(&lat, Cut::LadderChain { leg: 0 }).unwrap();
    let rdm = exact_rdm(&ground_state(&lat).unwrap(), &bip).unwrap();
    let block = rdm.block(l / 2).unwrap();
    let gen = entanglement_generator(block, 1e-14).unwrap();
    let mut locus = Vec::new();
    for n in 1..=l / 2 {
        let q = 2.0 * PI * n as f64 / l as f64;
        let curve = spectral_function(&gen, q, DEFAULT_ETA, &[]).unwrap();
        let peak = curve.dominant_pole().unwrap();
        locus.push(FitPoint::new(q, peak.omega));
    }
    let shown: Vec<String> = locus.iter().map(|p| format!("({:.3}, {:.3})", p.x, p.y)).collect();
    out.note(format!("ED L={l} peak locus (q, ω): {}", shown.join(" ")));
    let quad = fit_quadratic(&locus, window).unwrap();
    let lin = fit_linear_abs(&locus, window).unwrap();
    out.check(
        quad.value("a") > 0.0 && quad.rss < lin.rss,
        format!(
            "ED L={l}: ω = a q² with a = {:.3} (0.73 at L=20, qualitative), RSS quadratic {:.4} < linear {:.4}",
            quad.value("a"),
            quad.rss,
            lin.rss
        ),
    );
    out
}

/// Slope of an unweighted TOS fit and its error propagated from level errors.
fn slope_with_error(es: &EntanglementSpectrum, l: f64) -> (f64, f64) {
    let levels = tos_levels(es);
    let fit = fit_tos(&tos_points(es), l, 2, 3).unwrap();
    let x: Vec<f64> = levels.iter().map(|(s, _, _)| s * (s + 1.0)).collect();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let sxx: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let var: f64 = levels
        .iter()
        .zip(&x)
        .map(|((_, _, e), v)| ((v - mean) / sxx).powi(2) * e.unwrap_or(0.0).powi(2))
        .sum();
    (fit.value("slope"), var.sqrt())
}

fn tower_of_states(suite: &mut Suite) -> Outcome {
    let mut out = Outcome::new();
    let chi = chi_perp(0.38, 4.0, 2);
    out.check(
        (chi - 1.0 / (2.0 * 0.38 * 16.0)).abs() < 1e-15 && (chi - 0.08).abs() < 0.005,
        format!("χ⊥(slope 0.38, L=4, d=2) = {chi:.5}"),
    );
    let cases = [
        (4usize, Cut::Ring2D { row: 0 }, 16.0, 1_000_000u64),
        (
            4,
            Cut::Block2D {
                w: 2,
                h: 2,
                x0: 0,
                y0: 0,
            },
            16.0,
            1_000_000,
        ),
        (6, Cut::Ring2D { row: 0 }, 24.0, 400_000),
        (
            6,
            Cut::Block2D {
                w: 3,
                h: 3,
                x0: 0,
                y0: 0,
            },
            24.0,
            400_000,
        ),
    ];
    for (i, (l, cut, beta, n)) in cases.into_iter().enumerate() {
        let name = match cut {
            Cut::Ring2D { .. } => format!("{l}x{l} ring"),
            _ => format!("{l}x{l} block"),
        };
        let mut cfg = square(l, cut.clone(), beta, n, 40 + i as u64);
        let n_a = make_bipartition(&cfg.model.build().unwrap(), cut).unwrap().n_a();
        cfg.spectrum.sectors = Some(vec![if n_a.is_multiple_of(2) { 0.0 } else { 0.5 }]);
        let chain = simulate(cfg, suite, &format!("square {name}"));
        let es = chain.spectrum();
        let pts = tos_points(&es);
        let shown: Vec<String> = pts.iter().map(|p| format!("S={}: {:.3}", p.x, p.y)).collect();
        let (slope, sigma) = slope_with_error(&es, l as f64);
        out.check(
            pts.len() >= 3 && is_monotone_increasing(&pts) && slope > 0.0,
            format!("{name} QMC: [{}], slope {slope:.4} ± {sigma:.4}", shown.join(", ")),
        );
        if l == 4 {
            let exact = chain.res.oracle_spectrum().unwrap();
            let (slope_ed, _) = slope_with_error(&exact, l as f64);
            let dev = (slope - slope_ed).abs();
            out.check(
                dev <= 3.0 * sigma,
                format!("{name}: ED slope {slope_ed:.4}, QMC deviation {:.2}σ", dev / sigma),
            );
        }
    }
    out
}

/// Eigenvalues of each block against the union over its momentum sectors.
fn projection_preserves_spectrum(rdm: &ExactRdm, sym: &SymmetryMap) -> f64 {
    let mut worst: f64 = 0.0;
    for b in &rdm.blocks {
        let mut direct: Vec<f64> = SymmetricEigen::new(b.matrix.to_dense())
            .eigenvalues
            .iter()
            .cloned()
            .collect();
        let proj = momentum_project(b, sym, usize::MAX).unwrap();
        let lanczos = Default::default();
        let mut split: Vec<f64> = Vec::new();
        for s in &proj.sectors {
            let e = match &s.matrix {
                SectorMatrix::Real(m) => eig(m, None, EigMode::Dense, false, &lanczos),
                SectorMatrix::Complex(m) => eig_complex(m, None, EigMode::Dense, false, &lanczos),
            };
            split.extend(e.unwrap().values);
        }
        if split.len() != direct.len() {
            return f64::INFINITY;
        }
        direct.sort_by(|a, b| a.total_cmp(b));
        split.sort_by(|a, b| a.total_cmp(b));
        worst = direct
            .iter()
            .zip(&split)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    worst
}

fn rdm_properties(suite: &mut Suite) -> Outcome {
    let mut out = Outcome::new();
    for (ok, line) in &suite.audits {
        out.check(*ok, line.clone());
    }
    if suite.audits.is_empty() {
        let mut cfg = ladder(4, AFM, 200_000, 5);
        cfg.spectrum.jackknife = false;
        simulate(cfg, suite, "AFM ladder L=4");
        let (ok, line) = suite.audits.last().unwrap().clone();
        out.check(ok, line);
    }
    let oracles: Vec<(&str, LatticeSpec, Cut)> = vec![
        (
            "AFM ladder L=6",
            build_ladder(6, AFM.0, AFM.1).unwrap(),
            Cut::LadderChain { leg: 0 },
        ),
        (
            "FM ladder L=8",
            build_ladder(8, FM.0, FM.1).unwrap(),
            Cut::LadderChain { leg: 0 },
        ),
        (
            "AFM ladder L=10",
            build_ladder(10, AFM.0, AFM.1).unwrap(),
            Cut::LadderChain { leg: 0 },
        ),
        (
            "square 4x4 ring",
            build_square(4, 4, 1.0).unwrap(),
            Cut::Ring2D { row: 0 },
        ),
    ];
    for (name, lat, cut) in oracles {
        let bip = make_bipartition(&lat, cut).unwrap();
        let rdm = exact_rdm(&ground_state(&lat).unwrap(), &bip).unwrap();
        let worst = projection_preserves_spectrum(&rdm, &translations_of_a(&bip, &lat));
        out.check(
            worst < 1e-10,
            format!("{name} oracle: momentum-resolved eigenvalues match the block's to {worst:.1e}"),
        );
    }
    out
}

fn fit_regression() -> Outcome {
    let mut out = Outcome::new();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-10;
    let ks: Vec<f64> = (-7..=8).map(|n| 2.0 * PI * n as f64 / 16.0).collect();

    let sine: Vec<FitPoint> = ks.iter().map(|&k| FitPoint::new(k, 2.41 * k.sin().abs())).collect();
    let all = fit_sine_dispersion(&sine, KWindow::default()).unwrap().value("v");
    let two = fit_sine_dispersion(&sine, KWindow::two_point(0.0)).unwrap().value("v");
    out.check(
        close(all, 2.41) && close(two, 2.41),
        format!("sine: v = {all:.12}, two-point {two:.12}"),
    );

    let vl: Vec<FitPoint> = [8.0, 12.0, 16.0, 24.0]
        .iter()
        .map(|&l| FitPoint::new(l, 2.41 + 0.8 / l))
        .collect();
    let e = extrapolate_velocity(&vl).unwrap();
    out.check(
        close(e.value("v_inf"), 2.41) && close(e.value("b"), 0.8),
        format!(
            "extrapolation: v_inf = {:.12}, b = {:.12}",
            e.value("v_inf"),
            e.value("b")
        ),
    );

    let d1 = -PI * 2.41 / 6.0;
    let xi0: Vec<FitPoint> = [8.0, 12.0, 16.0, 24.0]
        .iter()
        .map(|&l| FitPoint::new(l, l * (0.4 + d1 / (l * l))))
        .collect();
    let g = fit_groundlevel_scaling(&xi0).unwrap();
    out.check(
        close(g.value("e0"), 0.4) && close(g.value("d1"), d1) && close(g.value("v_cft"), 2.41),
        format!(
            "ground-level scaling: e0 = {:.12}, d1 = {:.12}, v = {:.12}",
            g.value("e0"),
            g.value("d1"),
            g.value("v_cft")
        ),
    );

    let quad: Vec<FitPoint> = ks.iter().map(|&k| FitPoint::new(k, 0.73 * k * k)).collect();
    let a = fit_quadratic(&quad, KWindow::default()).unwrap().value("a");
    let mag: Vec<FitPoint> = ks
        .iter()
        .map(|&k| FitPoint::new(k, 2.0 * 0.6 * (k / 2.0).sin().powi(2)))
        .collect();
    let j = fit_quadratic(&mag, KWindow::default()).unwrap().value("J_eff");
    out.check(
        close(a, 0.73) && close(j, 0.6),
        format!("quadratic: a = {a:.12}, J_eff = {j:.12}"),
    );

    let lin: Vec<FitPoint> = ks.iter().map(|&k| FitPoint::new(k, 1.3 * k.abs())).collect();
    let b = fit_linear_abs(&lin, KWindow::default()).unwrap().value("b");
    out.check(close(b, 1.3), format!("linear: b = {b:.12}"));

    let tos: Vec<FitPoint> = (0..5)
        .map(|s| s as f64)
        .map(|s| FitPoint::new(s, 1.2 + 0.38 * s * (s + 1.0)))
        .collect();
    let t = fit_tos(&tos, 4.0, 2, 3).unwrap();
    out.check(
        close(t.value("xi0"), 1.2)
            && close(t.value("slope"), 0.38)
            && close(t.value("chi_perp"), 1.0 / (2.0 * 0.38 * 16.0)),
        format!(
            "tower of states: ξ0 = {:.12}, slope = {:.12}, χ⊥ = {:.12}",
            t.value("xi0"),
            t.value("slope"),
            t.value("chi_perp")
        ),
    );
    out
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut suite = Suite::default();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let start = Instant::now();

    if want(9) {
        results.push((9, "fit regression on exact synthetic data", fit_regression()));
    }
    if want(3) {
        results.push((3, "thermal limit: two-site Gibbs matrix", thermal_limit(&mut suite)));
    }
    if want(1) {
        results.push((
            1,
            "oracle equivalence: ladder L=4 and L=6",
            oracle_equivalence(&mut suite),
        ));
    }
    if want(2) {
        results.push((
            2,
            "convergence ordering: ladder L=8, lowest 10 levels",
            convergence_ordering(&mut suite),
        ));
    }
    if want(4) || want(5) {
        let data = afm_series(&mut suite);
        let (out, v) = afm_velocity(&data);
        if want(4) {
            results.push((4, "AFM velocity: two-point sine fits, L=8,12,16", out));
        }
        if want(5) {
            results.push((
                5,
                "CFT scaling of ξ0 against dispersion velocity",
                cft_consistency(&data, v),
            ));
        }
    }
    if want(6) {
        results.push((
            6,
            "FM ladder: no quadratic branch in the ES, quadratic spectral locus",
            fm_negative(&mut suite),
        ));
    }
    if want(7) {
        results.push((
            7,
            "tower of states: square 4x4 and 6x6, ring and block cuts",
            tower_of_states(&mut suite),
        ));
    }
    if want(8) {
        results.push((8, "RDM properties on every finalized run", rdm_properties(&mut suite)));
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, out) in &results {
        println!("{} [{id}] {name}", if out.pass { "PASS" } else { "FAIL" });
        for line in &out.detail {
            println!("       {line}");
        }
        failed += usize::from(!out.pass);
    }
    for line in &suite.timing {
        println!("  time: {line}");
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0} s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
