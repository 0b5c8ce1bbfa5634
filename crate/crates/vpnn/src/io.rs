//! Versioned binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! [0..4)    magic "VPNN"
//! [4..8)    u32  format version (currently 1)
//! [8..12)   u32  variant tag: 0 vpnn, 1 vpnn1.3, 2 vpnnt, 3 s-relu, 4 mixed1, 5 mixed2
//! [12..16)  u32  n_in
//! [16..20)  u32  n_out
//! [20..24)  u32  L (total layers, downsizer included)
//! [24..28)  u32  k (rotation/permutation factors per hidden layer)
//! [28..36)  u64  build seed
//! [36..44)  f64  activation guard epsilon
//! then L−1 layer blocks:
//!   u8 layer tag: 0 volume, 1 standard
//!   volume:   k/2 right factor blocks, n f64 diagonal params,
//!             k/2 left factor blocks, n f64 bias, activation block
//!             (factor block = n u32 permutation targets + n/2 f64 angles)
//!   standard: n*n f64 row-major weights, n f64 bias, activation block
//! activation block:
//!   u8 tag: 0 fixed Chebyshev (one f64 M follows),
//!           1 trainable Chebyshev (n/2 f64 follow), 2 ReLU
//! finally the downsizer: n_out*n_in f64 row-major. EOF is mandatory;
//! trailing bytes are a format error.
//! ```
//!
//! Loading validates structure first (magic, version, truncation — all
//! `Format` errors with the failing byte offset) and then model invariants
//! (bijective permutations, positive M, finite parameters, row-orthonormal
//! downsizer — `CorruptModel`). Parameters round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{
    Activation, Layer, Model, RotationPermutation, StandardLayer, Variant, VolumeLayer,
};
use crate::sublayers::{
    AffineParams, ChebMode, ChebyshevConfig, DiagonalParams, Downsizer, PermutationSpec,
    RotationParams,
};

pub const MAGIC: &[u8; 4] = b"VPNN";
pub const FORMAT_VERSION: u32 = 1;

const LAYER_VOLUME: u8 = 0;
const LAYER_STANDARD: u8 = 1;
const ACT_CHEB_FIXED: u8 = 0;
const ACT_CHEB_TRAINABLE: u8 = 1;
const ACT_RELU: u8 = 2;

struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    offset: self.offset,
                    what: "unexpected end of file".into(),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn finite_f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let v = self.f64_vec(n)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::CorruptModel(format!("non-finite value in {what}")));
        }
        Ok(v)
    }
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_activation(w: &mut impl Write, act: &Activation) -> Result<()> {
    match act {
        Activation::Relu => w.write_all(&[ACT_RELU])?,
        Activation::Chebyshev(c) => match c.mode() {
            ChebMode::Fixed(m) => {
                w.write_all(&[ACT_CHEB_FIXED])?;
                w.write_all(&m.to_le_bytes())?;
            }
            ChebMode::Trainable(ms) => {
                w.write_all(&[ACT_CHEB_TRAINABLE])?;
                write_f64s(w, ms)?;
            }
        },
    }
    Ok(())
}

fn write_factor(w: &mut impl Write, rp: &RotationPermutation) -> Result<()> {
    for &target in rp.permutation().map() {
        w.write_all(&(target as u32).to_le_bytes())?;
    }
    write_f64s(w, rp.rotation().thetas())
}

fn read_activation<R: Read>(
    r: &mut Reader<R>,
    n: usize,
    guard_epsilon: f64,
) -> Result<Activation> {
    let corrupt = |e: Error| match e {
        Error::InvalidConfig(msg) => Error::CorruptModel(msg),
        other => other,
    };
    match r.u8()? {
        ACT_RELU => Ok(Activation::Relu),
        ACT_CHEB_FIXED => {
            let m = r.f64()?;
            let cfg = ChebyshevConfig::fixed(m)
                .and_then(|c| c.with_guard(guard_epsilon))
                .map_err(corrupt)?;
            Ok(Activation::Chebyshev(cfg))
        }
        ACT_CHEB_TRAINABLE => {
            let ms = r.f64_vec(n / 2)?;
            let cfg = ChebyshevConfig::trainable(ms)
                .and_then(|c| c.with_guard(guard_epsilon))
                .map_err(corrupt)?;
            Ok(Activation::Chebyshev(cfg))
        }
        tag => Err(Error::Format {
            offset: r.offset - 1,
            what: format!("unknown activation tag {tag}"),
        }),
    }
}

fn read_factor<R: Read>(r: &mut Reader<R>, n: usize) -> Result<RotationPermutation> {
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(r.u32()? as usize);
    }
    let permutation = PermutationSpec::new(map)
        .map_err(|_| Error::CorruptModel("permutation map is not a bijection".into()))?;
    let thetas = r.finite_f64_vec(n / 2, "rotation angles")?;
    RotationPermutation::new(permutation, RotationParams::new(thetas))
}

impl Model {
    /// Writes the model in the versioned binary format above.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.variant.tag().to_le_bytes())?;
        w.write_all(&(self.n_in as u32).to_le_bytes())?;
        w.write_all(&(self.n_out as u32).to_le_bytes())?;
        w.write_all(&(self.depth() as u32).to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.guard_epsilon.to_le_bytes())?;
        for layer in &self.layers {
            match layer {
                Layer::Volume(v) => {
                    w.write_all(&[LAYER_VOLUME])?;
                    for rp in v.right() {
                        write_factor(&mut w, rp)?;
                    }
                    write_f64s(&mut w, v.diagonal().t())?;
                    for rp in v.left() {
                        write_factor(&mut w, rp)?;
                    }
                    write_f64s(&mut w, v.bias())?;
                    write_activation(&mut w, v.activation())?;
                }
                Layer::Standard(s) => {
                    w.write_all(&[LAYER_STANDARD])?;
                    write_f64s(&mut w, s.affine().weight().data())?;
                    write_f64s(&mut w, s.affine().bias())?;
                    write_activation(&mut w, s.activation())?;
                }
            }
        }
        write_f64s(&mut w, self.downsizer.matrix().data())?;
        w.flush()?;
        Ok(())
    }

    /// Loads and fully validates a model file; no partial model survives an
    /// error.
    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let mut r = Reader::new(BufReader::new(File::open(path)?));

        let mut magic = [0u8; 4];
        r.fill(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                what: format!("bad magic {magic:02x?}"),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                what: format!("unsupported format version {version}"),
            });
        }
        let variant = Variant::from_tag(r.u32()?).ok_or_else(|| Error::Format {
            offset: 8,
            what: "unknown variant tag".into(),
        })?;
        let n_in = r.u32()? as usize;
        let n_out = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let k = r.u32()? as usize;
        let seed = r.u64()?;
        let guard_epsilon = r.f64()?;
        if n_in == 0 || !n_in.is_multiple_of(2) || n_out == 0 || n_out > n_in || depth < 2 {
            return Err(Error::CorruptModel(format!(
                "invalid dimensions: n_in={n_in}, n_out={n_out}, layers={depth}"
            )));
        }
        if k < 2 || !k.is_multiple_of(2) {
            return Err(Error::CorruptModel(format!("invalid factor count k={k}")));
        }
        if guard_epsilon <= 0.0 || !guard_epsilon.is_finite() {
            return Err(Error::CorruptModel(format!(
                "invalid guard epsilon {guard_epsilon}"
            )));
        }

        let mut layers = Vec::with_capacity(depth - 1);
        for _ in 0..depth - 1 {
            let tag = r.u8()?;
            let layer = match tag {
                LAYER_VOLUME => {
                    if !variant.uses_volume_layers() {
                        return Err(Error::CorruptModel(format!(
                            "volume layer in a {} model",
                            variant.name()
                        )));
                    }
                    let right: Vec<_> = (0..k / 2)
                        .map(|_| read_factor(&mut r, n_in))
                        .collect::<Result<_>>()?;
                    let diag =
                        DiagonalParams::new(r.finite_f64_vec(n_in, "diagonal parameters")?);
                    let left: Vec<_> = (0..k / 2)
                        .map(|_| read_factor(&mut r, n_in))
                        .collect::<Result<_>>()?;
                    let bias = r.finite_f64_vec(n_in, "bias")?;
                    let activation = read_activation(&mut r, n_in, guard_epsilon)?;
                    Layer::Volume(VolumeLayer {
                        left,
                        diag,
                        right,
                        bias,
                        activation,
                    })
                }
                LAYER_STANDARD => {
                    if variant.uses_volume_layers() {
                        return Err(Error::CorruptModel(format!(
                            "standard layer in a {} model",
                            variant.name()
                        )));
                    }
                    let weight = Matrix::from_vec(
                        n_in,
                        n_in,
                        r.finite_f64_vec(n_in * n_in, "weights")?,
                    )?;
                    let bias = r.finite_f64_vec(n_in, "bias")?;
                    let affine = AffineParams::new(weight, bias)?;
                    let activation = read_activation(&mut r, n_in, guard_epsilon)?;
                    Layer::Standard(StandardLayer { affine, activation })
                }
                other => {
                    return Err(Error::Format {
                        offset: r.offset - 1,
                        what: format!("unknown layer tag {other}"),
                    })
                }
            };
            // Variant-specific activation consistency.
            let act_ok = match (&layer, variant) {
                (Layer::Volume(v), Variant::Vpnnt) => v
                    .activation()
                    .chebyshev()
                    .is_some_and(|c| c.is_trainable()),
                (Layer::Volume(v), Variant::Vpnn | Variant::Vpnn13) => v
                    .activation()
                    .chebyshev()
                    .is_some_and(|c| !c.is_trainable()),
                (Layer::Volume(v), Variant::Mixed2) => v.activation().chebyshev().is_none(),
                (Layer::Standard(s), Variant::SRelu) => s.activation().chebyshev().is_none(),
                (Layer::Standard(s), Variant::Mixed1) => s.activation().chebyshev().is_some(),
                _ => false,
            };
            if !act_ok {
                return Err(Error::CorruptModel(format!(
                    "activation does not match the {} variant",
                    variant.name()
                )));
            }
            layers.push(layer);
        }

        let z = Matrix::from_vec(
            n_out,
            n_in,
            r.finite_f64_vec(n_out * n_in, "downsizer")?,
        )?;
        let downsizer = Downsizer::from_matrix(z)
            .map_err(|_| Error::CorruptModel("downsizer rows are not orthonormal".into()))?;

        // Strict EOF: anything after the downsizer block is malformed.
        let mut trailing = [0u8; 1];
        match r.inner.read(&mut trailing)? {
            0 => {}
            _ => {
                return Err(Error::Format {
                    offset: r.offset,
                    what: "trailing bytes after model data".into(),
                })
            }
        }

        Ok(Model {
            variant,
            n_in,
            n_out,
            k,
            seed,
            guard_epsilon,
            layers,
            downsizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SeededRng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap().keep();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in Variant::ALL {
            let model = ModelConfig::new(variant, 8, 4, 3, 99).build().unwrap();
            let path = tmp("model.vpnn");
            model.save(&path).unwrap();
            let loaded = Model::load(&path).unwrap();

            assert_eq!(loaded.variant(), model.variant());
            assert_eq!(loaded.seed(), model.seed());
            assert_eq!(loaded.k(), model.k());
            let mut rng = SeededRng::new(7);
            for _ in 0..100 {
                let x: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let a = model.raw_output(&x).unwrap();
                let b = loaded.raw_output(&x).unwrap();
                assert_eq!(a, b, "outputs must be bit-identical after round trip");
            }
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let model = ModelConfig::new(Variant::Vpnn, 8, 4, 3, 1).build().unwrap();
        let path = tmp("model.vpnn");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = tmp("truncated.vpnn");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        match Model::load(&cut) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let path = tmp("junk.vpnn");
        std::fs::write(&path, b"NOPE and then some").unwrap();
        match Model::load(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected Format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn non_bijective_permutation_is_corrupt_model() {
        let model = ModelConfig::new(Variant::Vpnn, 8, 4, 3, 1).build().unwrap();
        let path = tmp("model.vpnn");
        model.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // First permutation target sits right after the 44-byte header and
        // the layer tag; overwrite the first two u32 targets with 0, 0.
        let base = 45;
        bytes[base..base + 4].copy_from_slice(&0u32.to_le_bytes());
        bytes[base + 4..base + 8].copy_from_slice(&0u32.to_le_bytes());
        let bad = tmp("bad.vpnn");
        std::fs::write(&bad, &bytes).unwrap();
        match Model::load(&bad) {
            Err(Error::CorruptModel(_)) => {}
            other => panic!("expected CorruptModel, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_format_error() {
        let model = ModelConfig::new(Variant::Vpnn, 8, 4, 3, 1).build().unwrap();
        let path = tmp("model.vpnn");
        model.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        let padded = tmp("padded.vpnn");
        std::fs::write(&padded, &bytes).unwrap();
        match Model::load(&padded) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected Format error, got {other:?}"),
        }
    }
}
