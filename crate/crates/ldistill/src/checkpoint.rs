//! `DGEN` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | field                                         |
//! |--------------|-----------------------------------------------|
//! | 4            | magic `DGEN`                                  |
//! | u32          | format version (1)                            |
//! | u32          | generator kind (1 direct image, 2 symmetric)  |
//! | u32          | super-resolution stage (0 identity, 1 bilinear, 2 learnable) |
//! | u32          | latent dimension                              |
//! | u32 + 3·u32·n | shape table: count, then (C, H, W) per entry (low, high) |
//! | u64          | parameter count `n`                           |
//! | u64          | iteration                                     |
//! | u64          | run seed                                      |
//! | 4·u128       | RNG word positions (timestep, noise, latent, pose) |
//! | u64          | optimizer step count                          |
//! | f32·n        | parameters                                    |
//! | f32·n        | optimizer first moment                        |
//! | f32·n        | optimizer second moment                       |
//! | u32          | CRC32 of every preceding byte                 |

use std::io::Write;
use std::path::Path;

use ldistill_core::generator::{Generator, GeneratorKind, GeneratorParams, SuperRes};
use ldistill_core::optim::Adam;
use ldistill_core::trainer::{Trainer, TrainerState};
use ldistill_core::Shape;

pub const MAGIC: &[u8; 4] = b"DGEN";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid field `{field}`: {value}")]
    Field { field: &'static str, value: u64 },
    #[error("checkpoint does not fit this generator: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: GeneratorKind,
    pub super_res: SuperRes,
    pub latent_dim: usize,
    pub shapes: Vec<Shape>,
    pub seed: u64,
    pub state: TrainerState,
}

fn sr_code(sr: SuperRes) -> u32 {
    match sr {
        SuperRes::Identity => 0,
        SuperRes::Bilinear => 1,
        SuperRes::Learnable => 2,
    }
}

fn sr_from_code(c: u32) -> Option<SuperRes> {
    Some(match c {
        0 => SuperRes::Identity,
        1 => SuperRes::Bilinear,
        2 => SuperRes::Learnable,
        _ => return None,
    })
}

impl Checkpoint {
    pub fn capture<G: Generator>(trainer: &Trainer<G>) -> Self {
        let g = trainer.generator();
        Self {
            kind: g.kind(),
            super_res: g.super_res(),
            latent_dim: g.latent_dim(),
            shapes: vec![g.low_shape(), g.high_shape()],
            seed: trainer.seed(),
            state: trainer.state(),
        }
    }

    /// Errors unless `g` has the architecture this checkpoint was taken from.
    pub fn check_compatible<G: Generator>(&self, g: &G) -> Result<(), CheckpointError> {
        let want = (g.kind(), g.super_res(), g.latent_dim(), vec![g.low_shape(), g.high_shape()], g.param_len());
        let got = (self.kind, self.super_res, self.latent_dim, self.shapes.clone(), self.state.params.theta.len());
        if want != got {
            return Err(CheckpointError::Incompatible(format!("expected {want:?}, file holds {got:?}")));
        }
        Ok(())
    }

    pub fn params_f32_bytes(&self) -> Vec<u8> {
        f32_bytes(&self.state.params.theta)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let n = s.params.theta.len();
        let mut b = Vec::with_capacity(96 + 12 * n);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.kind.code().to_le_bytes());
        b.extend_from_slice(&sr_code(self.super_res).to_le_bytes());
        b.extend_from_slice(&(self.latent_dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.shapes.len() as u32).to_le_bytes());
        for sh in &self.shapes {
            for d in sh.as_array() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        b.extend_from_slice(&(n as u64).to_le_bytes());
        b.extend_from_slice(&s.iteration.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        for p in s.rng_positions {
            b.extend_from_slice(&p.to_le_bytes());
        }
        b.extend_from_slice(&s.adam.step_count().to_le_bytes());
        b.extend(f32_bytes(&s.params.theta));
        b.extend(f32_bytes(s.adam.first_moment()));
        b.extend(f32_bytes(s.adam.second_moment()));
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    /// Parses a checkpoint. `truncation_psi` is not stored and comes from the run config.
    pub fn from_bytes(bytes: &[u8], truncation_psi: f64) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(if bytes.starts_with(MAGIC) || bytes.len() < 4 {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { b: bytes, at: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { b: body, at: 8 };
        let kind_code = r.u32()?;
        let kind = GeneratorKind::from_code(kind_code).ok_or(CheckpointError::Field {
            field: "generator kind",
            value: kind_code as u64,
        })?;
        let sr = r.u32()?;
        let super_res = sr_from_code(sr).ok_or(CheckpointError::Field {
            field: "super-resolution stage",
            value: sr as u64,
        })?;
        let latent_dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        if count > 16 {
            return Err(CheckpointError::Field {
                field: "shape count",
                value: count as u64,
            });
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            shapes.push(Shape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize));
        }
        let n = r.u64()? as usize;
        if n.checked_mul(12).is_none_or(|need| need > body.len()) {
            return Err(CheckpointError::Truncated);
        }
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let mut rng_positions = [0u128; 4];
        for p in &mut rng_positions {
            *p = r.u128()?;
        }
        let step = r.u64()?;
        let theta = r.f32s(n)?;
        let m = r.f32s(n)?;
        let v = r.f32s(n)?;
        if r.at != body.len() {
            return Err(CheckpointError::Field {
                field: "trailing bytes",
                value: (body.len() - r.at) as u64,
            });
        }
        let adam = Adam::from_state(step, m, v).expect("moment lengths agree");
        Ok(Self {
            kind,
            super_res,
            latent_dim,
            shapes,
            seed,
            state: TrainerState {
                params: GeneratorParams {
                    theta,
                    latent_dim,
                    truncation_psi,
                },
                adam,
                iteration,
                rng_positions,
            },
        })
    }

    /// Writes through a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("dgen.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path, truncation_psi: f64) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, truncation_psi)
    }
}

pub fn f32_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect()
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let end = self.at.checked_add(N).ok_or(CheckpointError::Truncated)?;
        let s = self.b.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s.try_into().expect("slice of N bytes"))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        self.take().map(u64::from_le_bytes)
    }

    fn u128(&mut self) -> Result<u128, CheckpointError> {
        self.take().map(u128::from_le_bytes)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        (0..n).map(|_| self.take().map(|b| f32::from_le_bytes(b) as f64)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldistill_core::generator::{SymmetricToy, SymmetricToyConfig};
    use ldistill_core::schedule::NoiseSchedule;
    use ldistill_core::scores::{GaussianOracle, Target};
    use ldistill_core::trainer::TrainerConfig;

    fn trained() -> Trainer<SymmetricToy> {
        let g = SymmetricToy::new(SymmetricToyConfig { sr: SuperRes::Learnable, ..SymmetricToyConfig::default() }).unwrap();
        let cfg = TrainerConfig { iterations: 6, learning_rate: 1e-2, ..TrainerConfig::default() };
        let mut tr = Trainer::new(g, cfg, 11).unwrap();
        let mut o = GaussianOracle { target: Target::Constant(0.3), var0: 1.0 };
        for _ in 0..3 {
            tr.step(&mut o, &NoiseSchedule::default()).unwrap();
        }
        tr
    }

    #[test]
    fn roundtrip_is_exact_after_rounding() {
        let tr = trained();
        let ck = Checkpoint::capture(&tr);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"DGEN");
        let back = Checkpoint::from_bytes(&bytes, 0.8).unwrap();
        back.check_compatible(tr.generator()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state.iteration, 3);
        assert_eq!(back.state.rng_positions, tr.state().rng_positions);
        for (a, b) in back.state.params.theta.iter().zip(&tr.params().theta) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::capture(&trained()).to_bytes();
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped, 0.8), Err(CheckpointError::Checksum { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9], 0.8), Err(CheckpointError::Checksum { .. } | CheckpointError::Truncated)));
        assert!(matches!(Checkpoint::from_bytes(b"PNG\x00abcdefgh", 0.8), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2, 0.8), Err(CheckpointError::Version(2))));
        assert!(matches!(Checkpoint::from_bytes(b"DG", 0.8), Err(CheckpointError::Truncated)));
    }

    #[test]
    fn incompatible_generator_rejected() {
        let ck = Checkpoint::capture(&trained());
        let other = SymmetricToy::new(SymmetricToyConfig::default()).unwrap();
        assert!(matches!(ck.check_compatible(&other), Err(CheckpointError::Incompatible(_))));
    }
}
