//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes   "CIF1"
//! version u32       currently 1
//! N       u64       Gaussian count
//! K       u64       instance count
//! layers  u64       count M, then M pairs of u64 (in, out):
//!                   pair 0 = (position_frequencies, time_frequencies) of the
//!                   sinusoidal encoder, pairs 1.. = linear layers (trunk in
//!                   order, then position/rotation/scale heads)
//! params  f64 * L   packed parameters in `pack_parameters` order
//! iter    u64       optimization step counter
//! rng     32 bytes  master RNG seed
//! ```
//!
//! The dimension pairs pin the MLP architecture: the input width alone would
//! not determine the encoder frequency split.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::deform::{DeformConfig, DeformationField};
use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::params::{pack_parameters, unpack_parameters, ParamLayout};

/// File magic.
pub const MAGIC: [u8; 4] = *b"CIF1";
/// Current format version.
pub const VERSION: u32 = 1;

/// A complete optimization snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub set: GaussianSet,
    pub field: DeformationField,
    /// Global optimization step the snapshot was taken at.
    pub iteration: u64,
    /// Master RNG seed; stochastic phases derive per-phase streams from it.
    pub rng_seed: [u8; 32],
}

/// Serializes a checkpoint to bytes.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u64::<LittleEndian>(ckpt.set.len() as u64)?;
    out.write_u64::<LittleEndian>(ckpt.set.instance_count as u64)?;

    let cfg = &ckpt.field.config;
    let layer_dims: Vec<(u64, u64)> = std::iter::once((
        cfg.position_frequencies as u64,
        cfg.time_frequencies as u64,
    ))
    .chain(ckpt.field.layers().map(|l| (l.in_dim as u64, l.out_dim as u64)))
    .collect();
    out.write_u64::<LittleEndian>(layer_dims.len() as u64)?;
    for (i, o) in layer_dims {
        out.write_u64::<LittleEndian>(i)?;
        out.write_u64::<LittleEndian>(o)?;
    }

    for v in pack_parameters(&ckpt.set, &ckpt.field) {
        out.write_f64::<LittleEndian>(v)?;
    }
    out.write_u64::<LittleEndian>(ckpt.iteration)?;
    out.extend_from_slice(&ckpt.rng_seed);
    Ok(out)
}

/// Writes a checkpoint file.
pub fn save_checkpoint<P: AsRef<Path>>(path: P, ckpt: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_to_bytes(ckpt)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn truncated<T>(what: &str) -> Result<T> {
    Err(Error::TruncatedCheckpoint(what.to_string()))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    r.read_u64::<LittleEndian>().or_else(|_| truncated(what))
}

/// Deserializes a checkpoint from bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() {
        return truncated("magic");
    }
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = match r.read_u32::<LittleEndian>() {
        Ok(v) => v,
        Err(_) => return truncated("version"),
    };
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = read_u64(&mut r, "gaussian count")? as usize;
    let k = read_u64(&mut r, "instance count")? as usize;
    if k == 0 {
        return Err(Error::SceneFormat("checkpoint declares zero instances".into()));
    }
    let layer_count = read_u64(&mut r, "layer count")? as usize;
    if layer_count < 4 {
        return Err(Error::SceneFormat(format!(
            "checkpoint must describe the encoder and at least the three heads, got {layer_count} dim pairs"
        )));
    }
    let mut dims = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let a = read_u64(&mut r, &format!("layer {i} input dim"))? as usize;
        let b = read_u64(&mut r, &format!("layer {i} output dim"))? as usize;
        dims.push((a, b));
    }
    let (pos_freq, time_freq) = dims[0];
    let linear_dims = &dims[1..];
    let hidden: Vec<usize> = linear_dims[..linear_dims.len() - 3]
        .iter()
        .map(|&(_, o)| o)
        .collect();
    let config = DeformConfig {
        position_frequencies: pos_freq,
        time_frequencies: time_freq,
        hidden,
    };
    let field = DeformationField::zeros(&config);
    let described: Vec<(usize, usize)> = field.layers().map(|l| (l.in_dim, l.out_dim)).collect();
    if described != linear_dims {
        return Err(Error::SceneFormat(format!(
            "checkpoint layer dims {linear_dims:?} are inconsistent (expected {described:?} from the encoder split)"
        )));
    }

    let mut set = GaussianSet::empty(k);
    set.positions = vec![nalgebra::Vector3::zeros(); n];
    set.rotations = vec![[0.0; 4]; n];
    set.log_scales = vec![nalgebra::Vector3::zeros(); n];
    set.colors = vec![nalgebra::Vector3::zeros(); n];
    set.opacity_logits = vec![0.0; n];
    set.occupancy_logits = vec![0.0; n];
    set.base_identity = vec![0.0; n * k];
    set.calibration = vec![0.0; n * k];
    set.replica_counts = vec![0; n];

    let mut field = field;
    let layout = ParamLayout::of(&set, &field);
    let mut packed = vec![0.0; layout.total_len()];
    for (idx, v) in packed.iter_mut().enumerate() {
        *v = match r.read_f64::<LittleEndian>() {
            Ok(v) => v,
            Err(_) => return truncated(&format!("parameter {idx} of {}", layout.total_len())),
        };
    }
    unpack_parameters(&mut set, &mut field, &packed)?;

    let iteration = read_u64(&mut r, "iteration counter")?;
    let mut rng_seed = [0u8; 32];
    if r.read_exact(&mut rng_seed).is_err() {
        return truncated("rng seed state");
    }
    Ok(Checkpoint { set, field, iteration, rng_seed })
}

/// Reads a checkpoint file.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::DeformConfig;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = GaussianSet::empty(3);
        for _ in 0..9 {
            set.push(
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                crate::gaussians::random_unit_quaternion(&mut rng),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
        }
        for v in &mut set.calibration {
            *v = rng.gen_range(-0.5..0.5);
        }
        let field = DeformationField::seeded(&DeformConfig::small(), &mut rng);
        let mut rng_seed = [0u8; 32];
        rng.fill(&mut rng_seed);
        Checkpoint { set, field, iteration: 1234, rng_seed }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ckpt = sample_checkpoint(1);
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.set, back.set);
        assert_eq!(ckpt.field, back.field);
        assert_eq!(ckpt.iteration, back.iteration);
        assert_eq!(ckpt.rng_seed, back.rng_seed);
        // Re-serialization is byte-identical.
        assert_eq!(bytes, checkpoint_to_bytes(&back).unwrap());
    }

    #[test]
    fn bad_magic_is_distinct() {
        let ckpt = sample_checkpoint(2);
        let mut bytes = checkpoint_to_bytes(&ckpt).unwrap();
        bytes[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn future_version_is_rejected() {
        let ckpt = sample_checkpoint(3);
        let mut bytes = checkpoint_to_bytes(&ckpt).unwrap();
        bytes[4] = 9; // version u32 LE
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let ckpt = sample_checkpoint(4);
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        for cut in [3, 9, 20, 70, bytes.len() / 2, bytes.len() - 5] {
            let err = checkpoint_from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::TruncatedCheckpoint(_)),
                "cut at {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snapshot.cif");
        let ckpt = sample_checkpoint(5);
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.set, back.set);
        assert_eq!(ckpt.iteration, back.iteration);
    }
}
