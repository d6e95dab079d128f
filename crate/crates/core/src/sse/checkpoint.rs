//! Binary checkpoint of a sampler state, little-endian throughout.
//!
//! Layout: magic, version, β, lattice bonds, A sites, edge states, cutoff flag,
//! sampler options, operator string, seed, and the ChaCha stream position. A restored state
//! continues the exact same Markov chain.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SimState, SseOptions, IDENTITY};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SSERDM1";
pub const CHECKPOINT_VERSION: u32 = 2;

const MAX_SITES: u32 = crate::lattice::MAX_SITES as u32;

pub fn checkpoint<W: Write>(state: &SimState, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LE>(CHECKPOINT_VERSION)?;
    w.write_f64::<LE>(state.beta)?;
    w.write_u32::<LE>(state.n_sites as u32)?;
    w.write_u32::<LE>(state.bonds.len() as u32)?;
    for (b, &[i, j]) in state.bonds.iter().enumerate() {
        w.write_u32::<LE>(i)?;
        w.write_u32::<LE>(j)?;
        w.write_f64::<LE>(state.couplings[b])?;
    }
    w.write_u32::<LE>(state.a_sites.len() as u32)?;
    for &s in &state.a_sites {
        w.write_u32::<LE>(s)?;
    }
    for &s in &state.spins {
        w.write_u8((s > 0) as u8)?;
    }
    for &s in &state.edge_bra {
        w.write_u8((s > 0) as u8)?;
    }
    w.write_u8(state.cutoff_frozen as u8)?;
    w.write_u64::<LE>(state.opts.loop_step_factor as u64)?;
    w.write_u32::<LE>(state.opts.edge_average)?;
    w.write_u64::<LE>(state.ops.len() as u64)?;
    for &op in &state.ops {
        w.write_u32::<LE>(op)?;
    }
    w.write_u64::<LE>(state.seed)?;
    w.write_all(&state.rng.get_seed())?;
    w.write_u64::<LE>(state.rng.get_stream())?;
    w.write_u128::<LE>(state.rng.get_word_pos())?;
    w.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

pub fn restore<R: Read>(mut r: R) -> Result<SimState> {
    let rd = |e| Error::from_read(e, "checkpoint");
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(rd)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("bad checkpoint magic"));
    }
    let version = r.read_u32::<LE>().map_err(rd)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let beta = r.read_f64::<LE>().map_err(rd)?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(corrupt("non-positive beta"));
    }
    let n_sites = r.read_u32::<LE>().map_err(rd)?;
    if n_sites == 0 || n_sites > MAX_SITES {
        return Err(corrupt(format!("site count {n_sites}")));
    }
    let n_bonds = r.read_u32::<LE>().map_err(rd)? as usize;
    if n_bonds == 0 || n_bonds > n_sites as usize * n_sites as usize {
        return Err(corrupt(format!("bond count {n_bonds}")));
    }
    let mut bonds = Vec::with_capacity(n_bonds);
    let mut couplings = Vec::with_capacity(n_bonds);
    for _ in 0..n_bonds {
        let i = r.read_u32::<LE>().map_err(rd)?;
        let j = r.read_u32::<LE>().map_err(rd)?;
        let c = r.read_f64::<LE>().map_err(rd)?;
        if i >= n_sites || j >= n_sites || i == j || c == 0.0 || !c.is_finite() {
            return Err(corrupt("invalid bond record"));
        }
        bonds.push([i, j]);
        couplings.push(c);
    }
    let n_a = r.read_u32::<LE>().map_err(rd)?;
    if n_a > n_sites.min(32) {
        return Err(corrupt(format!("A size {n_a}")));
    }
    let mut a_sites = Vec::with_capacity(n_a as usize);
    let mut seen = vec![false; n_sites as usize];
    for _ in 0..n_a {
        let s = r.read_u32::<LE>().map_err(rd)?;
        if s >= n_sites || seen[s as usize] {
            return Err(corrupt("invalid A site"));
        }
        seen[s as usize] = true;
        a_sites.push(s);
    }
    let read_spin = |r: &mut R| -> Result<i8> {
        match r.read_u8().map_err(rd)? {
            0 => Ok(-1),
            1 => Ok(1),
            x => Err(corrupt(format!("spin byte {x}"))),
        }
    };
    let spins = (0..n_sites).map(|_| read_spin(&mut r)).collect::<Result<Vec<_>>>()?;
    let edge_bra = (0..n_a).map(|_| read_spin(&mut r)).collect::<Result<Vec<_>>>()?;
    let frozen = match r.read_u8().map_err(rd)? {
        0 => false,
        1 => true,
        x => return Err(corrupt(format!("cutoff flag {x}"))),
    };
    let loop_step_factor = r.read_u64::<LE>().map_err(rd)? as usize;
    let edge_average = r.read_u32::<LE>().map_err(rd)?;
    if edge_average > super::MAX_EDGE_AVERAGE {
        return Err(corrupt(format!("edge average {edge_average}")));
    }
    let m = r.read_u64::<LE>().map_err(rd)?;
    if m == 0 || m > (1 << 32) {
        return Err(corrupt(format!("cutoff {m}")));
    }
    let mut ops = Vec::with_capacity(m.min(1 << 24) as usize);
    for _ in 0..m {
        let op = r.read_u32::<LE>().map_err(rd)?;
        if op != IDENTITY && (op >> 1) as usize >= n_bonds {
            return Err(corrupt(format!("operator {op} out of range")));
        }
        ops.push(op);
    }
    let seed = r.read_u64::<LE>().map_err(rd)?;
    let mut key = [0u8; 32];
    r.read_exact(&mut key).map_err(rd)?;
    let stream = r.read_u64::<LE>().map_err(rd)?;
    let word_pos = r.read_u128::<LE>().map_err(rd)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after checkpoint"));
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let state = SimState::assemble(
        beta,
        n_sites as usize,
        bonds,
        couplings,
        a_sites,
        spins,
        Some(edge_bra),
        ops,
        frozen,
        seed,
        rng,
        SseOptions {
            initial_cutoff: m as usize,
            loop_step_factor,
            edge_average,
        },
    )?;
    state
        .check_world_lines()
        .map_err(|e| corrupt(format!("restored configuration is invalid: {e}")))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_ladder, make_bipartition, rotation_mask, Cut};
    use crate::sse::init_simulation;

    fn warmed(seed: u64) -> SimState {
        let lat = build_ladder(6, 1.0, 1.732).unwrap();
        let bip = make_bipartition(&lat, Cut::LadderChain { leg: 0 }).unwrap();
        let mask = rotation_mask(&lat).unwrap();
        let mut s = init_simulation(&lat, &bip, &mask, 6.0, seed, SseOptions::default()).unwrap();
        for _ in 0..300 {
            s.sweep_and_snapshot().unwrap();
        }
        s
    }

    #[test]
    fn round_trip_continues_the_chain() {
        let mut a = warmed(21);
        let mut buf = Vec::new();
        checkpoint(&a, &mut buf).unwrap();
        let mut b = restore(buf.as_slice()).unwrap();
        assert_eq!(a, b);
        for _ in 0..200 {
            assert_eq!(a.sweep_and_snapshot().unwrap(), b.sweep_and_snapshot().unwrap());
        }
        assert_eq!(a, b);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let a = warmed(22);
        let mut buf = Vec::new();
        checkpoint(&a, &mut buf).unwrap();
        for cut in [0, 3, 7, 11, 19, buf.len() / 2, buf.len() - 1] {
            assert!(
                matches!(restore(&buf[..cut]), Err(Error::CorruptFile(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let a = warmed(23);
        let mut buf = Vec::new();
        checkpoint(&a, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(restore(bad.as_slice()), Err(Error::CorruptFile(_))));
        let mut bad = buf.clone();
        bad[7] = 9;
        assert!(matches!(
            restore(bad.as_slice()),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let mut bad = buf.clone();
        bad.push(0);
        assert!(matches!(restore(bad.as_slice()), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn flipped_spin_is_caught_by_world_line_check() {
        let a = warmed(24);
        let mut buf = Vec::new();
        checkpoint(&a, &mut buf).unwrap();
        // First spin byte follows magic, version, beta, n_sites, n_bonds, bonds,
        // n_a and the A sites.
        let off = 7 + 4 + 8 + 4 + 4 + a.bonds.len() * 16 + 4 + a.a_sites.len() * 4;
        let mut bad = buf.clone();
        bad[off] ^= 1;
        assert!(restore(bad.as_slice()).is_err());
    }
}
