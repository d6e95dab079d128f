//! Lattices, couplings, bipartitions and the symmetry data of region A.
//!
//! Sites of a ladder are numbered `leg * L + x`, sites of a square torus
//! `y * Lx + x`. Region A is always stored as an ordered site list; bit `p` of a
//! packed A configuration is the spin on `a_sites[p]` (1 = up).

use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest lattice accepted by the builders.
pub const MAX_SITES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    /// Exchange constant of `J S_i . S_j`; positive is antiferromagnetic.
    pub coupling: f64,
}

impl Bond {
    pub fn is_ferro(&self) -> bool {
        self.coupling < 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Geometry {
    Ladder { l: usize },
    Square { lx: usize, ly: usize },
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub n_sites: usize,
    pub bonds: Vec<Bond>,
    pub geometry: Geometry,
    /// Periodicity per lattice direction (legs for a ladder, x then y for a torus).
    pub periodic: Vec<bool>,
    /// Set when a periodic direction of length 2 produced the same site pair twice.
    pub doubled_bonds: bool,
}

impl LatticeSpec {
    /// An arbitrary bond list; used for small oracle systems (single bonds,
    /// open chains, frustrated test cases).
    pub fn custom(n_sites: usize, bonds: &[(usize, usize, f64)]) -> Result<Self> {
        let bonds = bonds
            .iter()
            .map(|&(i, j, coupling)| Bond { i, j, coupling })
            .collect::<Vec<_>>();
        let spec = LatticeSpec {
            n_sites,
            bonds,
            geometry: Geometry::Custom,
            periodic: Vec::new(),
            doubled_bonds: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.n_sites == 0 {
            return Err(Error::InvalidGeometry("lattice has no sites".into()));
        }
        if self.n_sites > MAX_SITES {
            return Err(Error::InvalidGeometry(format!(
                "{} sites exceed the limit of {MAX_SITES}",
                self.n_sites
            )));
        }
        let mut seen = HashSet::new();
        for b in &self.bonds {
            if b.i >= self.n_sites || b.j >= self.n_sites || b.i == b.j {
                return Err(Error::InvalidGeometry(format!(
                    "bond ({}, {}) is not a valid site pair",
                    b.i, b.j
                )));
            }
            if b.coupling == 0.0 || !b.coupling.is_finite() {
                return Err(Error::InvalidGeometry(format!(
                    "bond ({}, {}) has coupling {}",
                    b.i, b.j, b.coupling
                )));
            }
            let key = (b.i.min(b.j), b.i.max(b.j));
            if !seen.insert(key) && !self.doubled_bonds {
                return Err(Error::InvalidGeometry(format!("duplicate bond ({}, {})", key.0, key.1)));
            }
        }
        Ok(())
    }

    /// Debug export of the bond list.
    pub fn bonds_csv(&self) -> String {
        let mut out = String::from("site_i,site_j,J\n");
        for b in &self.bonds {
            let _ = writeln!(out, "{},{},{}", b.i, b.j, b.coupling);
        }
        out
    }

    pub fn short_tag(&self) -> String {
        match self.geometry {
            Geometry::Ladder { l } => {
                let (leg, rung) = (self.bonds[0].coupling, self.bonds[2 * l].coupling);
                format!("ladder-L{l}-Jleg{leg}-Jrung{rung}")
            }
            Geometry::Square { lx, ly } => format!("square-{lx}x{ly}-J{}", self.bonds[0].coupling),
            Geometry::Custom => format!("custom-{}sites-{}bonds", self.n_sites, self.bonds.len()),
        }
    }
}

/// (J_leg, J_rung) = (cos θ, sin θ).
pub fn ladder_couplings(theta: f64) -> (f64, f64) {
    (theta.cos(), theta.sin())
}

/// The θ-couplings rescaled so that |J_leg| = 1, e.g. θ = π/3 gives (1, 1.732).
pub fn rescaled_ladder_couplings(theta: f64) -> Result<(f64, f64)> {
    let (leg, rung) = ladder_couplings(theta);
    if leg.abs() < 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "θ = {theta} has no leg coupling to rescale by"
        )));
    }
    Ok((leg / leg.abs(), rung / leg.abs()))
}

/// Two-leg ladder with periodic legs: 2L leg bonds followed by L rung bonds.
pub fn build_ladder(l: usize, j_leg: f64, j_rung: f64) -> Result<LatticeSpec> {
    if l < 2 {
        return Err(Error::InvalidGeometry(format!("ladder length {l} < 2")));
    }
    if j_leg == 0.0 || j_rung == 0.0 {
        return Err(Error::InvalidGeometry("ladder couplings must be nonzero".into()));
    }
    let mut bonds = Vec::with_capacity(3 * l);
    for leg in 0..2 {
        for x in 0..l {
            bonds.push(Bond {
                i: leg * l + x,
                j: leg * l + (x + 1) % l,
                coupling: j_leg,
            });
        }
    }
    for x in 0..l {
        bonds.push(Bond {
            i: x,
            j: l + x,
            coupling: j_rung,
        });
    }
    let spec = LatticeSpec {
        n_sites: 2 * l,
        bonds,
        geometry: Geometry::Ladder { l },
        periodic: vec![true],
        doubled_bonds: l == 2,
    };
    spec.validate()?;
    Ok(spec)
}

/// Fully periodic Lx × Ly square lattice with uniform coupling.
pub fn build_square(lx: usize, ly: usize, j: f64) -> Result<LatticeSpec> {
    if lx < 2 || ly < 2 {
        return Err(Error::InvalidGeometry(format!(
            "square lattice {lx}x{ly} needs both sides >= 2"
        )));
    }
    if j == 0.0 {
        return Err(Error::InvalidGeometry("coupling must be nonzero".into()));
    }
    let site = |x: usize, y: usize| y * lx + x;
    let mut bonds = Vec::with_capacity(2 * lx * ly);
    for y in 0..ly {
        for x in 0..lx {
            bonds.push(Bond {
                i: site(x, y),
                j: site((x + 1) % lx, y),
                coupling: j,
            });
            bonds.push(Bond {
                i: site(x, y),
                j: site(x, (y + 1) % ly),
                coupling: j,
            });
        }
    }
    let spec = LatticeSpec {
        n_sites: lx * ly,
        bonds,
        geometry: Geometry::Square { lx, ly },
        periodic: vec![true, true],
        doubled_bonds: lx == 2 || ly == 2,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Cut {
    /// One full leg of a ladder.
    LadderChain { leg: usize },
    /// One full row of a torus.
    #[serde(rename = "ring")]
    Ring2D { row: usize },
    /// A contiguous w × h block with lower-left corner (x0, y0).
    #[serde(rename = "block")]
    Block2D {
        w: usize,
        h: usize,
        #[serde(default)]
        x0: usize,
        #[serde(default)]
        y0: usize,
    },
    /// Explicit ordered site list.
    Sites { sites: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bipartition {
    pub a_sites: Vec<usize>,
    pub b_sites: Vec<usize>,
    pub cut: Cut,
}

impl Bipartition {
    pub fn n_a(&self) -> usize {
        self.a_sites.len()
    }

    /// Dimension 2^|A| of the reduced density matrix.
    pub fn a_dim(&self) -> u128 {
        1u128 << self.a_sites.len()
    }

    /// Packs the A part of a full configuration word.
    pub fn pack_a(&self, full: u64) -> u64 {
        self.a_sites
            .iter()
            .enumerate()
            .fold(0, |acc, (p, &s)| acc | (((full >> s) & 1) << p))
    }

    pub fn pack_b(&self, full: u64) -> u64 {
        self.b_sites
            .iter()
            .enumerate()
            .fold(0, |acc, (p, &s)| acc | (((full >> s) & 1) << p))
    }
}

pub fn make_bipartition(lattice: &LatticeSpec, cut: Cut) -> Result<Bipartition> {
    let a_sites: Vec<usize> = match (&cut, lattice.geometry) {
        (Cut::LadderChain { leg }, Geometry::Ladder { l }) => {
            if *leg > 1 {
                return Err(Error::InvalidCut(format!("ladder has no leg {leg}")));
            }
            (0..l).map(|x| leg * l + x).collect()
        }
        (Cut::Ring2D { row }, Geometry::Square { lx, ly }) => {
            if *row >= ly {
                return Err(Error::InvalidCut(format!("ring row {row} out of range for Ly = {ly}")));
            }
            (0..lx).map(|x| row * lx + x).collect()
        }
        (Cut::Block2D { w, h, x0, y0 }, Geometry::Square { lx, ly }) => {
            if *w == 0 || *h == 0 || x0 + w > lx || y0 + h > ly {
                return Err(Error::InvalidCut(format!(
                    "block {w}x{h} at ({x0}, {y0}) exceeds the {lx}x{ly} lattice"
                )));
            }
            (*y0..y0 + h)
                .flat_map(|y| (*x0..x0 + w).map(move |x| y * lx + x))
                .collect()
        }
        (Cut::Sites { sites }, _) => {
            let mut seen = HashSet::new();
            for &s in sites {
                if s >= lattice.n_sites || !seen.insert(s) {
                    return Err(Error::InvalidCut(format!("bad or repeated site {s}")));
                }
            }
            if sites.is_empty() {
                return Err(Error::InvalidCut("region A is empty".into()));
            }
            sites.clone()
        }
        (cut, geometry) => {
            return Err(Error::InvalidCut(format!(
                "cut {cut:?} is incompatible with {geometry:?}"
            )))
        }
    };
    let in_a: HashSet<usize> = a_sites.iter().copied().collect();
    let b_sites = (0..lattice.n_sites).filter(|s| !in_a.contains(s)).collect();
    Ok(Bipartition { a_sites, b_sites, cut })
}

/// Sublattice π-rotation about z that makes every off-diagonal bond weight
/// of -H nonnegative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationMask {
    pub flip: Vec<bool>,
}

impl RotationMask {
    /// Flip pattern restricted to region A, as a packed A word.
    pub fn a_mask(&self, bip: &Bipartition) -> u64 {
        bip.a_sites
            .iter()
            .enumerate()
            .filter(|(_, &s)| self.flip[s])
            .fold(0, |acc, (p, _)| acc | (1 << p))
    }

    /// Diagonal sign of the rotation on a packed configuration: -1 per flipped
    /// site holding a down spin.
    pub fn sign(mask: u64, config: u64) -> f64 {
        if (!config & mask).count_ones().is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }
}

/// Two-colouring in which antiferromagnetic bonds join opposite colours and
/// ferromagnetic bonds join equal colours.
pub fn rotation_mask(lattice: &LatticeSpec) -> Result<RotationMask> {
    let mut adj = vec![Vec::new(); lattice.n_sites];
    for b in &lattice.bonds {
        let parity = !b.is_ferro();
        adj[b.i].push((b.j, parity));
        adj[b.j].push((b.i, parity));
    }
    let mut color: Vec<Option<bool>> = vec![None; lattice.n_sites];
    for start in 0..lattice.n_sites {
        if color[start].is_some() {
            continue;
        }
        color[start] = Some(false);
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            let cs = color[s].unwrap();
            for &(t, parity) in &adj[s] {
                let want = cs ^ parity;
                match color[t] {
                    None => {
                        color[t] = Some(want);
                        queue.push_back(t);
                    }
                    Some(ct) if ct != want => {
                        return Err(Error::SignProblemUnsupported(format!(
                            "bond signs around site {t} are frustrated"
                        )));
                    }
                    Some(_) => {}
                }
            }
        }
    }
    Ok(RotationMask {
        flip: color.into_iter().map(|c| c.unwrap()).collect(),
    })
}

/// Translation group of region A acting on packed A configurations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetryMap {
    /// `translations[g][p]` is the A position that position `p` is moved to by
    /// the g-th group element; element 0 is the identity.
    pub translations: Vec<Vec<usize>>,
    pub order: usize,
    /// The group is generated by a cyclic shift of the canonical A ordering.
    cyclic_shift: bool,
}

impl SymmetryMap {
    pub fn trivial(n_a: usize) -> Self {
        SymmetryMap {
            translations: vec![(0..n_a).collect()],
            order: 1,
            cyclic_shift: false,
        }
    }

    pub fn cyclic(n_a: usize) -> Self {
        let translations = (0..n_a).map(|g| (0..n_a).map(|p| (p + g) % n_a).collect()).collect();
        SymmetryMap {
            translations,
            order: n_a,
            cyclic_shift: true,
        }
    }

    pub fn n_a(&self) -> usize {
        self.translations[0].len()
    }

    /// Image of a packed configuration under the g-th group element.
    #[inline]
    pub fn apply(&self, g: usize, config: u64) -> u64 {
        let n = self.n_a();
        if g == 0 {
            return config;
        }
        if self.cyclic_shift {
            let mask = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
            return ((config << g) | (config >> (n - g))) & mask;
        }
        self.translations[g]
            .iter()
            .enumerate()
            .fold(0, |acc, (p, &q)| acc | (((config >> p) & 1) << q))
    }
}

/// Translations of A induced by lattice translations along the chain or ring.
pub fn translations_of_a(bip: &Bipartition, _lattice: &LatticeSpec) -> SymmetryMap {
    match bip.cut {
        Cut::LadderChain { .. } | Cut::Ring2D { .. } => SymmetryMap::cyclic(bip.n_a()),
        Cut::Block2D { .. } | Cut::Sites { .. } => SymmetryMap::trivial(bip.n_a()),
    }
}
