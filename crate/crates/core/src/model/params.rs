//! Named parameter storage and its on-disk format.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "MMFP"
//! version u32      currently 1
//! count   u32      number of tensors
//! repeated count times, in ascending name order:
//!   name_len u32, name (UTF-8 bytes)
//!   rank     u32, dims (rank × u64)
//!   values   product(dims) × f64, row-major
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"MMFP";
const VERSION: u32 = 1;

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|((ka, a), (kb, b))| ka != kb || a.shape() != b.shape())
        {
            return Err(Error::Format("parameter sets have different layouts".into()));
        }
        Ok(())
    }

    /// `self + other`, elementwise per name.
    pub fn add(&self, other: &ParamSet) -> Result<ParamSet> {
        self.check_same_layout(other)?;
        let mut out = self.clone();
        for (t, o) in out.tensors.values_mut().zip(other.tensors.values()) {
            t.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += b);
        }
        Ok(out)
    }

    /// `θ - lr·g` for every tensor whose name passes `filter`; the rest are
    /// copied unchanged. `lr == 0` returns a bit-identical copy (no `-0.0`
    /// sign flips).
    pub fn update(&self, grads: &ParamSet, lr: f64, filter: impl Fn(&str) -> bool) -> Result<ParamSet> {
        self.check_same_layout(grads)?;
        let mut out = self.clone();
        for ((name, t), g) in out.tensors.iter_mut().zip(grads.tensors.values()) {
            if lr != 0.0 && filter(name) {
                t.data_mut().iter_mut().zip(g.data()).for_each(|(p, d)| *p -= lr * d);
            }
        }
        Ok(out)
    }

    /// Concatenation of all tensors in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Same layout as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Format(format!(
                "flat vector has {} values, parameter set needs {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for t in out.tensors.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, t) in &self.tensors {
            eat(k.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every tensor as a leaf; `trainable(name)` decides which ones
    /// collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (k, t) in &self.tensors {
            vars.insert(k.clone(), tape.leaf(t.clone(), trainable(k))?);
        }
        Ok(Bound { vars })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<ParamSet> {
        let bad = |what: &str| Error::Format(format!("truncated or corrupt parameter file ({what})"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("magic"))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a parameter file".into()));
        }
        let mut u32_buf = [0u8; 4];
        let mut u64_buf = [0u8; 8];
        let mut read_u32 = |r: &mut R, what: &str| -> Result<u32> {
            r.read_exact(&mut u32_buf).map_err(|_| bad(what))?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported parameter file version {version}")));
        }
        let count = read_u32(&mut r, "count")?;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, "name length")? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name encoding"))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut u64_buf).map_err(|_| bad("dims"))?;
                shape.push(u64::from_le_bytes(u64_buf) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut u64_buf).map_err(|_| bad("values"))?;
                data.push(f64::from_le_bytes(u64_buf));
            }
            if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|_| bad("trailer"))? != 0 {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

/// A [`ParamSet`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps tape handles built elsewhere, e.g. views of one flat leaf.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("parameter {name} is not bound")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients after `backward`, zero-filled where none reached.
    pub fn grads(&self, tape: &Tape) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (k, &v) in &self.vars {
            let g = match tape.grad(v)? {
                Some(g) => g,
                None => Tensor::zeros(tape.value(v)?.shape()),
            };
            out.insert(k.clone(), g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        p.insert("b", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        p
    }

    #[test]
    fn clone_is_deep() {
        let p = sample();
        let mut q = p.clone();
        q.get_mut("b").unwrap().data_mut()[0] = 9.0;
        assert_ne!(p, q);
        assert_eq!(p.get("b").unwrap().data()[0], f64::MIN_POSITIVE);
    }

    #[test]
    fn update_respects_filter() {
        let p = sample();
        let g = p.zeros_like().with_flat(&[1.0; 7]).unwrap();
        let u = p.update(&g, 0.5, |n| n == "b").unwrap();
        assert_eq!(u.get("a.w"), p.get("a.w"));
        assert_eq!(u.get("b").unwrap().data()[2], 1e300 - 0.5);
    }

    #[test]
    fn rejects_corrupt_files() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(ParamSet::read_from(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(ParamSet::read_from(&extra[..]).is_err());
        assert!(ParamSet::read_from(&b"XXXX"[..]).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(
            values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            split in 0usize..40,
        ) {
            let split = split.min(values.len());
            let mut p = ParamSet::new();
            p.insert("x", Tensor::vector(values[..split].to_vec()));
            p.insert("layers.0.y", Tensor::new(vec![1, values.len() - split], values[split..].to_vec()).unwrap());
            let mut buf = Vec::new();
            p.write_to(&mut buf).unwrap();
            let q = ParamSet::read_from(&buf[..]).unwrap();
            prop_assert_eq!(p.checksum(), q.checksum());
            let bits = |s: &ParamSet| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&p), bits(&q));
        }
    }
}
