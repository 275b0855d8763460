//! Binary model checkpoints.
//!
//! All integers and reals are little-endian; reals are IEEE-754 binary64.
//!
//! ```text
//! magic        8 bytes  "MCVOSCK1"
//! version      u32      1
//! layers       u32      L
//!   per layer: u32 outputs, u32 inputs,
//!              outputs·inputs f64 weights (row-major), outputs f64 bias
//! dropout      f64
//! loss         u8       0 = cross-entropy, 1 = logit-norm
//! tau          f64
//! beta         f64
//! seed         u64
//! has_vos      u8
//!   if 1:      u64 n_candidates, u64 bank_capacity, f64 energy_momentum,
//!              f64 energy_floor, u64 warmup_epochs, u8 convention
//!              (0 = ratio, 1 = inverse), u32 classes C, u32 dim d,
//!              u8 fitted; if 1, per class d f64 mean then d·d f64
//!              covariance (row-major, regularized);
//!              per class u8 seen then f64 running mean (0 when unseen)
//! ```
//!
//! The feature bank is not stored; Cholesky factors are recomputed on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mlp::{ClassLoss, Layer, MlpModel};
use crate::numerics::{GaussianParams, Matrix};
use crate::vos::{EnergyConvention, VosConfig, VosState};

pub const MAGIC: &[u8; 8] = b"MCVOSCK1";
pub const VERSION: u32 = 1;

/// Upper bound on any single stored dimension, to reject corrupt headers
/// before allocating.
const MAX_DIM: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub loss: ClassLoss,
    /// Logit-norm temperature as configured, also kept for cross-entropy runs.
    pub tau: f64,
    pub beta: f64,
    pub seed: u64,
    pub vos: Option<VosState>,
}

fn put_u8(w: &mut impl Write, v: u8) -> Result<()> {
    Ok(w.write_all(&[v])?)
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
        Ok(b)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Checkpoint(format!(
                "{what}: expected 0 or 1, got {v}"
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let v = u32::from_le_bytes(self.bytes(what)?) as usize;
        if v > MAX_DIM {
            return Err(Error::Checkpoint(format!(
                "{what} = {v} is implausibly large"
            )));
        }
        Ok(v)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn usize64(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} does not fit in usize")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u32(&mut w, self.model.layers().len())?;
        for layer in self.model.layers() {
            put_u32(&mut w, layer.outputs())?;
            put_u32(&mut w, layer.inputs())?;
            put_f64s(&mut w, layer.weights.as_slice())?;
            put_f64s(&mut w, &layer.bias)?;
        }
        put_f64s(&mut w, &[self.model.dropout()])?;
        put_u8(
            &mut w,
            match self.loss {
                ClassLoss::CrossEntropy => 0,
                ClassLoss::LogitNorm { .. } => 1,
            },
        )?;
        put_f64s(&mut w, &[self.tau, self.beta])?;
        put_u64(&mut w, self.seed)?;
        match &self.vos {
            None => put_u8(&mut w, 0)?,
            Some(v) => {
                put_u8(&mut w, 1)?;
                let c = &v.config;
                put_u64(&mut w, c.n_candidates as u64)?;
                put_u64(&mut w, c.bank_capacity as u64)?;
                put_f64s(&mut w, &[c.energy_momentum, c.energy_floor])?;
                put_u64(&mut w, c.warmup_epochs as u64)?;
                put_u8(
                    &mut w,
                    match c.convention {
                        EnergyConvention::Ratio => 0,
                        EnergyConvention::Inverse => 1,
                    },
                )?;
                put_u32(&mut w, v.num_classes())?;
                put_u32(&mut w, v.dim())?;
                put_u8(&mut w, u8::from(v.is_fitted()))?;
                for g in v.gaussians() {
                    put_f64s(&mut w, g.mean())?;
                    put_f64s(&mut w, g.covariance().as_slice())?;
                }
                for m in v.running_means() {
                    put_u8(&mut w, u8::from(m.is_some()))?;
                    put_f64s(&mut w, &[m.unwrap_or(0.0)])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Checkpoint> {
        let mut r = Reader { inner: r };
        if &r.bytes::<8>("magic")? != MAGIC {
            return Err(Error::Checkpoint(
                "not a model checkpoint (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(r.bytes("version")?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let n_layers = r.u32("layer count")?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let outputs = r.u32("layer outputs")?;
            let inputs = r.u32("layer inputs")?;
            let weights = r.f64s(outputs * inputs, "weights")?;
            let bias = r.f64s(outputs, "bias")?;
            layers.push(Layer {
                weights: Matrix::new(outputs, inputs, weights)
                    .map_err(|e| Error::Checkpoint(format!("weights: {e}")))?,
                bias,
            });
        }
        let dropout = r.f64("dropout")?;
        let model =
            MlpModel::new(layers, dropout).map_err(|e| Error::Checkpoint(format!("model: {e}")))?;
        let loss_kind = r.u8("loss")?;
        let tau = r.f64("tau")?;
        let beta = r.f64("beta")?;
        let loss = match loss_kind {
            0 => ClassLoss::CrossEntropy,
            1 => ClassLoss::LogitNorm { tau },
            v => return Err(Error::Checkpoint(format!("unknown loss kind {v}"))),
        };
        let seed = r.u64("seed")?;
        let vos = if r.flag("vos flag")? {
            let n_candidates = r.usize64("n_candidates")?;
            let bank_capacity = r.usize64("bank_capacity")?;
            let energy_momentum = r.f64("energy_momentum")?;
            let energy_floor = r.f64("energy_floor")?;
            let warmup_epochs = r.usize64("warmup_epochs")?;
            let convention = match r.u8("convention")? {
                0 => EnergyConvention::Ratio,
                1 => EnergyConvention::Inverse,
                v => return Err(Error::Checkpoint(format!("unknown energy convention {v}"))),
            };
            let classes = r.u32("VOS classes")?;
            let dim = r.u32("VOS dim")?;
            let mut gaussians = Vec::new();
            if r.flag("fitted flag")? {
                for _ in 0..classes {
                    let mean = r.f64s(dim, "class mean")?;
                    let cov = Matrix::new(dim, dim, r.f64s(dim * dim, "class covariance")?)
                        .map_err(|e| Error::Checkpoint(format!("covariance: {e}")))?;
                    gaussians.push(
                        GaussianParams::new(mean, cov)
                            .map_err(|e| Error::Checkpoint(format!("class Gaussian: {e}")))?,
                    );
                }
            }
            let mut running = Vec::with_capacity(classes);
            for _ in 0..classes {
                let seen = r.flag("running mean flag")?;
                let v = r.f64("running mean")?;
                running.push(seen.then_some(v));
            }
            let config = VosConfig {
                n_candidates,
                bank_capacity,
                energy_momentum,
                energy_floor,
                warmup_epochs,
                convention,
            };
            Some(
                VosState::from_parts(config, dim, gaussians, running)
                    .map_err(|e| Error::Checkpoint(format!("VOS state: {e}")))?,
            )
        } else {
            None
        };
        let mut trailing = [0u8; 1];
        if r.inner.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            model,
            loss,
            tau,
            beta,
            seed,
            vos,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Checkpoint::read(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn model() -> MlpModel {
        MlpModel::init(2, &[6, 4], 3, 0.2, &mut RngStream::new(4, 0)).unwrap()
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut out = Vec::new();
        c.write(&mut out).unwrap();
        out
    }

    #[test]
    fn plain_model_round_trips() {
        let c = Checkpoint {
            model: model(),
            loss: ClassLoss::LogitNorm { tau: 0.04 },
            tau: 0.04,
            beta: 0.1,
            seed: 99,
            vos: None,
        };
        let b = bytes(&c);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(Checkpoint::read(&b[..]).unwrap(), c);
    }

    #[test]
    fn vos_state_round_trips_without_bank() {
        let m = model();
        let config = VosConfig {
            convention: EnergyConvention::Inverse,
            ..VosConfig::default()
        };
        let mut v = VosState::new(config, 3, 4);
        let mut rng = RngStream::new(1, 1);
        for i in 0..30 {
            let f: Vec<f64> = (0..4).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            v.observe(i % 3, &f, -1.0 - i as f64).unwrap();
        }
        assert!(v.refit().unwrap());
        let c = Checkpoint {
            model: m,
            loss: ClassLoss::CrossEntropy,
            tau: 0.04,
            beta: 0.1,
            seed: 1,
            vos: Some(v.clone()),
        };
        let back = Checkpoint::read(&bytes(&c)[..]).unwrap();
        let bv = back.vos.unwrap();
        assert_eq!(bv.config, v.config);
        assert_eq!(bv.gaussians(), v.gaussians());
        assert_eq!(bv.running_means(), v.running_means());
        assert_eq!(bv.bank().count(0), 0);
        assert_eq!(back.model, c.model);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let c = Checkpoint {
            model: model(),
            loss: ClassLoss::CrossEntropy,
            tau: 0.04,
            beta: 0.0,
            seed: 0,
            vos: None,
        };
        let b = bytes(&c);
        assert!(matches!(
            Checkpoint::read(&b[..b.len() - 1]),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read(&bad[..]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::read(&extra[..]).is_err());
        let mut version = b;
        version[8] = 2;
        assert!(Checkpoint::read(&version[..]).is_err());
    }
}
