//! Command-line front end: sampling, spectra, exact references, fits and
//! comparisons, all driven by one TOML run description.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use entspec_core::ed::{entanglement_generator, poles_csv, spectral_csv, spectral_function, DEFAULT_ETA};
use entspec_core::fit::{
    extrapolate_velocity, fit_groundlevel_scaling, fit_linear_abs, fit_quadratic, fit_sine_dispersion, fit_tos,
    FitPoint, FitResult, KWindow,
};
use entspec_core::monitor::series_csv;
use entspec_core::pipeline::{compare, lowest_branch, tos_points, ChainReport, FitSpec, Resolved, RunConfig};
use entspec_core::rdm::RdmAccumulator;
use entspec_core::spectrum::EntanglementSpectrum;

const PRESETS: &[(&str, &str)] = &[
    ("afm-ladder", include_str!("../../../configs/afm-ladder.toml")),
    ("fm-ladder", include_str!("../../../configs/fm-ladder.toml")),
    ("square-ring", include_str!("../../../configs/square-ring.toml")),
    ("square-block", include_str!("../../../configs/square-block.toml")),
];

#[derive(Parser)]
#[command(
    name = "entspec",
    version,
    about = "Entanglement spectra from sampled reduced density matrices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Run description (TOML).
    #[arg(long, short, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in run description.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; overrides the config.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Replace the seed list with 1..=N.
    #[arg(long)]
    seeds: Option<u64>,
    /// Replace the per-chain sample count.
    #[arg(long)]
    samples: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample chains and write the merged sparse matrix.
    Simulate(ConfigArgs),
    /// Diagonalize a stored matrix into an entanglement spectrum.
    Spectrum {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Binary matrix written by `simulate`; defaults to `<out>/rdm.bin`.
        #[arg(long)]
        rdm: Option<PathBuf>,
    },
    /// Exact-diagonalization reference spectrum.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write the entanglement spectral function of the S^z_A = 0 block.
        #[arg(long)]
        spectral: bool,
        #[arg(long, default_value_t = DEFAULT_ETA)]
        eta: f64,
        /// Frequency grid points on [0, omega_max].
        #[arg(long, default_value_t = 401)]
        n_omega: usize,
        #[arg(long, default_value_t = 4.0)]
        omega_max: f64,
    },
    /// Level-by-level sampled vs exact report.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Sampled spectrum JSON; defaults to `<out>/spectrum.json`.
        #[arg(long)]
        sampled: Option<PathBuf>,
    },
    /// Fit a spectrum or a table of points.
    Fit(FitArgs),
    /// Full pipeline: simulate, spectrum, fits and, when feasible, comparison.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Skip the exact reference.
        #[arg(long)]
        no_oracle: bool,
    },
    /// Print a built-in run description.
    Preset { name: Option<String> },
    /// Bond list of the configured lattice as CSV.
    Bonds(ConfigArgs),
}

#[derive(Copy, Clone, ValueEnum, PartialEq, Eq, Debug)]
enum FitKind {
    Sine,
    Quadratic,
    Linear,
    Tos,
    Extrapolate,
    Groundlevel,
}

#[derive(clap::Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    kind: FitKind,
    /// Spectrum JSON (sine, quadratic, linear, tos).
    #[arg(long)]
    spectrum: Option<PathBuf>,
    /// CSV of `x,y[,err]` rows with a header (extrapolate: L,v; groundlevel: L,xi0; tos: S,xi).
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    k_min: f64,
    #[arg(long, default_value_t = std::f64::consts::PI)]
    k_max: f64,
    #[arg(long)]
    two_point: bool,
    /// Linear size for the tower-of-states fit.
    #[arg(long)]
    l: Option<f64>,
    #[arg(long, default_value_t = 2)]
    d: u32,
    #[arg(long, default_value_t = 3)]
    n: u32,
    /// Weight points by 1/err² when errors are present.
    #[arg(long)]
    weighted: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn preset(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| anyhow!("unknown preset {name:?}; known: {}", preset_names()))
}

fn preset_names() -> String {
    PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
}

/// Strict TOML parse: unknown keys are errors.
fn parse_config(text: &str) -> Result<RunConfig> {
    Ok(toml::from_str(text)?)
}

fn load(args: &ConfigArgs) -> Result<(Resolved, PathBuf)> {
    let mut config = match (&args.config, &args.preset) {
        (Some(p), None) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, Some(name)) => parse_config(preset(name)?).with_context(|| format!("parsing preset {name}"))?,
        _ => bail!("give --config FILE or --preset NAME"),
    };
    if let Some(n) = args.seeds {
        config.sampling.seeds = (1..=n).collect();
    }
    if let Some(n) = args.samples {
        config.sampling.n_samples = n;
        config.sampling.bin_len = None;
    }
    if let Some(o) = &args.out {
        config.output = o.display().to_string();
    }
    config.materialize();
    let resolved = config.resolve()?;
    let out = PathBuf::from(&resolved.config.output);
    Ok((resolved, out))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    write(dir, name, serde_json::to_string_pretty(value)? + "\n")
}

#[derive(Serialize)]
struct RunLog<'a> {
    program: &'static str,
    version: &'static str,
    model: String,
    n_sites: usize,
    a_sites: &'a [usize],
    beta: f64,
    seeds: &'a [u64],
    rng: &'static str,
    n_total: u64,
    distinct_keys: usize,
    chains: &'a [ChainReport],
}

fn simulate(r: &Resolved, out: &Path) -> Result<RdmAccumulator> {
    write(out, "config.toml", toml::to_string(&r.config)?)?;
    let sim = r.simulate()?;
    let f = fs::File::create(out.join("rdm.bin"))?;
    sim.acc.write_binary(BufWriter::new(f))?;
    write(out, "rdm.json", sim.acc.sidecar_json()? + "\n")?;
    let series: Vec<_> = sim.chains.iter().flat_map(|c| c.gap_series.iter().cloned()).collect();
    if !series.is_empty() {
        write(out, "gap_series.csv", series_csv(&series))?;
    }
    write_json(
        out,
        "run.json",
        &RunLog {
            program: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            model: r.lattice.short_tag(),
            n_sites: r.lattice.n_sites,
            a_sites: &r.bip.a_sites,
            beta: r.beta,
            seeds: &r.config.sampling.seeds,
            rng: "ChaCha8 seeded from u64",
            n_total: sim.acc.n_total(),
            distinct_keys: sim.acc.n_keys(),
            chains: &sim.chains,
        },
    )?;
    eprintln!(
        "sampled {} snapshots over {} chain(s); {} distinct keys",
        sim.acc.n_total(),
        sim.chains.len(),
        sim.acc.n_keys()
    );
    Ok(sim.acc)
}

fn read_acc(path: &Path) -> Result<RdmAccumulator> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(RdmAccumulator::read_binary(BufReader::new(f))?)
}

fn write_spectrum(out: &Path, stem: &str, es: &EntanglementSpectrum) -> Result<()> {
    write(out, &format!("{stem}.csv"), es.to_csv())?;
    write_json(out, &format!("{stem}.json"), es)?;
    for w in &es.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn spectrum(r: &Resolved, acc: &RdmAccumulator, out: &Path) -> Result<EntanglementSpectrum> {
    if acc.metadata().a_sites != r.bip.a_sites || acc.metadata().beta != r.beta {
        bail!("stored matrix does not belong to this configuration");
    }
    let (_, es) = r.spectrum(acc)?;
    write_spectrum(out, "spectrum", &es)?;
    Ok(es)
}

#[derive(Serialize)]
struct FitEntry {
    fit: FitSpec,
    result: Option<FitResult>,
    error: Option<String>,
}

fn run_fits(r: &Resolved, es: &EntanglementSpectrum, out: &Path) -> Result<()> {
    if r.config.fits.is_empty() {
        return Ok(());
    }
    let entries: Vec<FitEntry> = r
        .fits(es)
        .into_iter()
        .map(|(fit, res)| match res {
            Ok(f) => FitEntry {
                fit,
                result: Some(f),
                error: None,
            },
            Err(e) => FitEntry {
                fit,
                result: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    for e in &entries {
        match (&e.result, &e.error) {
            (Some(f), _) => {
                let params: Vec<String> = f
                    .params
                    .iter()
                    .map(|p| format!("{} = {:.6} ± {:.2e}", p.name, p.value, p.error))
                    .collect();
                eprintln!("fit {}: {}", f.model, params.join(", "));
            }
            (_, Some(msg)) => eprintln!("fit failed: {msg}"),
            _ => {}
        }
    }
    write_json(out, "fits.json", &entries)
}

fn oracle(r: &Resolved, out: &Path) -> Result<EntanglementSpectrum> {
    let es = r.oracle_spectrum()?;
    write_spectrum(out, "oracle_spectrum", &es)?;
    Ok(es)
}

fn oracle_spectral(r: &Resolved, out: &Path, eta: f64, n_omega: usize, omega_max: f64) -> Result<()> {
    let rdm = r.oracle_rdm()?;
    let n_a = rdm.n_a;
    if n_a % 2 != 0 {
        bail!("spectral function needs an even |A|");
    }
    let block = rdm.block(n_a / 2).ok_or_else(|| anyhow!("no S^z_A = 0 block"))?;
    let gen = entanglement_generator(block, entspec_core::spectrum::DEFAULT_LAMBDA_FLOOR)?;
    let omegas: Vec<f64> = (0..n_omega.max(2))
        .map(|i| omega_max * i as f64 / (n_omega.max(2) - 1) as f64)
        .collect();
    let curves = (0..n_a)
        .map(|n| spectral_function(&gen, 2.0 * std::f64::consts::PI * n as f64 / n_a as f64, eta, &omegas))
        .collect::<entspec_core::Result<Vec<_>>>()?;
    write(out, "spectral.csv", spectral_csv(&curves))?;
    write(out, "poles.csv", poles_csv(&curves))?;
    Ok(())
}

fn do_compare(r: &Resolved, sampled: &EntanglementSpectrum, out: &Path) -> Result<()> {
    let exact = oracle(r, out)?;
    let rep = compare(sampled, &exact);
    write(out, "compare.csv", rep.to_csv())?;
    write_json(out, "compare.json", &rep)?;
    eprintln!(
        "compared {} levels: max |Δξ| = {:.4}, max deviation in σ = {}",
        rep.rows.len(),
        rep.max_deviation,
        rep.max_sigmas
            .map(|s| format!("{s:.2}"))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn read_spectrum(path: &Path) -> Result<EntanglementSpectrum> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_points(path: &Path, weighted: bool) -> Result<Vec<FitPoint>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}:{}: not numeric", path.display(), i + 1))?;
        match (f.len(), weighted) {
            (2, _) | (3, false) => pts.push(FitPoint::new(f[0], f[1])),
            (3, true) => pts.push(FitPoint::with_error(f[0], f[1], f[2])),
            _ => bail!("{}:{}: expected 2 or 3 columns", path.display(), i + 1),
        }
    }
    Ok(pts)
}

fn fit_cmd(a: &FitArgs) -> Result<()> {
    let window = KWindow {
        k_min: a.k_min,
        k_max: a.k_max,
        two_point: a.two_point,
    };
    let needs_spectrum = matches!(a.kind, FitKind::Sine | FitKind::Quadratic | FitKind::Linear);
    let pts = match (&a.spectrum, &a.points) {
        (Some(s), None) => {
            let es = read_spectrum(s)?;
            if a.kind == FitKind::Tos {
                tos_points(&es)
            } else if needs_spectrum {
                lowest_branch(&es, true)
            } else {
                bail!("{:?} fits take --points", a.kind)
            }
        }
        (None, Some(p)) => read_points(p, a.weighted)?,
        _ => bail!("give exactly one of --spectrum or --points"),
    };
    let result = match a.kind {
        FitKind::Sine => fit_sine_dispersion(&pts, window)?,
        FitKind::Quadratic => fit_quadratic(&pts, window)?,
        FitKind::Linear => fit_linear_abs(&pts, window)?,
        FitKind::Tos => fit_tos(&pts, a.l.ok_or_else(|| anyhow!("--l is required for tos"))?, a.d, a.n)?,
        FitKind::Extrapolate => extrapolate_velocity(&pts)?,
        FitKind::Groundlevel => fit_groundlevel_scaling(&pts)?,
    };
    let json = serde_json::to_string_pretty(&result)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{json}"),
    }
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(cfg) => {
            let (r, out) = load(&cfg)?;
            simulate(&r, &out)?;
        }
        Command::Spectrum { cfg, rdm } => {
            let (r, out) = load(&cfg)?;
            let acc = read_acc(&rdm.unwrap_or_else(|| out.join("rdm.bin")))?;
            spectrum(&r, &acc, &out)?;
        }
        Command::Oracle {
            cfg,
            spectral,
            eta,
            n_omega,
            omega_max,
        } => {
            let (r, out) = load(&cfg)?;
            write(&out, "config.toml", toml::to_string(&r.config)?)?;
            oracle(&r, &out)?;
            if spectral {
                oracle_spectral(&r, &out, eta, n_omega, omega_max)?;
            }
        }
        Command::Compare { cfg, sampled } => {
            let (r, out) = load(&cfg)?;
            let es = read_spectrum(&sampled.unwrap_or_else(|| out.join("spectrum.json")))?;
            do_compare(&r, &es, &out)?;
        }
        Command::Fit(a) => fit_cmd(&a)?,
        Command::Run { cfg, no_oracle } => {
            let (r, out) = load(&cfg)?;
            let acc = simulate(&r, &out)?;
            let es = spectrum(&r, &acc, &out)?;
            run_fits(&r, &es, &out)?;
            if !no_oracle {
                if r.lattice.n_sites <= entspec_core::ed::MAX_ED_SITES && r.bip.n_a() <= entspec_core::ed::MAX_RDM_SITES
                {
                    do_compare(&r, &es, &out)?;
                } else {
                    eprintln!("exact reference skipped: system beyond the diagonalization limits");
                }
            }
        }
        Command::Preset { name } => match name {
            Some(n) => print!("{}", preset(&n)?),
            None => println!("{}", preset_names()),
        },
        Command::Bonds(cfg) => {
            let (r, _) = load(&cfg)?;
            print!("{}", r.lattice.bonds_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_resolve() {
        for (name, text) in PRESETS {
            let c = parse_config(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            c.resolve().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn presets_match_reference_parameters() {
        let afm = parse_config(preset("afm-ladder").unwrap()).unwrap();
        assert_eq!(afm.sampling.beta, Some(100.0));
        let r = afm.resolve().unwrap();
        assert_eq!(r.lattice.n_sites, 16);
        let fm = parse_config(preset("fm-ladder").unwrap()).unwrap().resolve().unwrap();
        assert!(fm.lattice.bonds.iter().any(|b| b.coupling == -1.0));
        assert!(fm.lattice.bonds.iter().any(|b| b.coupling == 1.732));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = preset("afm-ladder").unwrap().replace("n_samples", "n_sample");
        assert!(parse_config(&text).is_err());
        let text = format!("{}\nextra = 1\n", preset("afm-ladder").unwrap());
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn echoed_config_reparses_identically() {
        let mut c = parse_config(preset("square-ring").unwrap()).unwrap();
        c.materialize();
        let echoed = toml::to_string(&c).unwrap();
        assert_eq!(parse_config(&echoed).unwrap(), c);
    }
}
