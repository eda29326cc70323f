//! Named parameter storage, the adaptive-moment optimizer with decoupled
//! weight decay, and the binary checkpoint container.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    pub frozen: bool,
}

/// Learnable tensors plus their gradients and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    step: u64,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            frozen: false,
        });
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?].value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.entries[id].value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?].grad)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub(crate) fn entry_mut(&mut self, id: usize) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let id = self.id(name)?;
        self.entries[id].frozen = frozen;
        Ok(())
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub(crate) fn accumulate_grad(&mut self, id: usize, g: &Tensor) {
        self.entries[id].grad.add_assign(g);
        self.grads_ready = true;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = Tensor::zeros(e.value.shape());
        }
        self.grads_ready = false;
    }

    /// Parameter values only, in registration order.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

/// Adaptive-moment update with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    /// Applies one update to every non-frozen parameter, bumps the step
    /// counter and clears the gradients.
    pub fn step(&self, store: &mut ParamStore, learning_rate: f64, weight_decay: f64) -> Result<()> {
        if !store.grads_ready {
            return Err(Error::Contract(
                "optimizer step requested before gradients were populated".into(),
            ));
        }
        store.step += 1;
        let t = store.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for e in &mut store.entries {
            if e.frozen {
                continue;
            }
            let g = e.grad.data();
            let m = e.first_moment.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = e.second_moment.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = e.first_moment.data();
            let v = e.second_moment.data();
            let theta = e.value.data_mut();
            for i in 0..theta.len() {
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let decay = learning_rate * weight_decay * theta[i];
                theta[i] -= learning_rate * m_hat / (v_hat.sqrt() + self.eps) + decay;
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// One optimizer step with the default moment constants.
pub fn optimizer_step(store: &mut ParamStore, learning_rate: f64, weight_decay: f64) -> Result<()> {
    AdamW::default().step(store, learning_rate, weight_decay)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PCLPCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialized parameters: a free-form metadata header (JSON by convention)
/// followed by `(name, shape, values)` triples and the optimizer step.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_blob(&mut out, self.metadata.as_bytes());
        out.extend_from_slice(&self.params.step.to_le_bytes());
        out.extend_from_slice(&(self.params.entries.len() as u32).to_le_bytes());
        for e in &self.params.entries {
            write_blob(&mut out, e.name.as_bytes());
            out.push(u8::from(e.frozen));
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let metadata = String::from_utf8(read_blob(&mut r)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let step = read_u64(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = String::from_utf8(read_blob(&mut r)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let mut flag = [0u8; 1];
            read_exact(&mut r, &mut flag)?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n)
                .map(|_| read_u64(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, values)
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            params.insert(name.clone(), value)?;
            params.set_frozen(&name, flag[0] != 0)?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        params.step = step;
        Ok(Checkpoint { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_blob(r: &mut &[u8]) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > r.len() {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value)).unwrap();
        s.accumulate_grad(0, &Tensor::scalar(grad));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = single(0.37, 0.0);
        optimizer_step(&mut s, 1e-3, 0.0).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.37]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // Step 1: m = 0.1, v = 0.001, m̂ = 1, v̂ = 1, so Δ = -lr/(1+eps) - lr·wd·θ.
        let lr = 1e-5;
        let wd = 1e-3;
        let mut s = single(0.0, 1.0);
        optimizer_step(&mut s, lr, wd).unwrap();
        let got = s.get("w").unwrap().data()[0];
        assert!((got - (-1.0e-5)).abs() < 1e-9);
        assert!((got - (-lr / (1.0 + 1e-8))).abs() < 1e-18);

        let mut s = single(1.0, 1.0);
        optimizer_step(&mut s, lr, wd).unwrap();
        let got = s.get("w").unwrap().data()[0];
        assert!((got - (1.0 - 1e-5 - 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn step_requires_gradients_and_clears_them() {
        let mut s = single(1.0, 2.0);
        optimizer_step(&mut s, 0.1, 0.0).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[0.0]);
        assert!(matches!(
            optimizer_step(&mut s, 0.1, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = single(1.0, 2.0);
        s.set_frozen("w", true).unwrap();
        optimizer_step(&mut s, 0.1, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert(
            "a",
            Tensor::new(vec![2, 3], vec![0.1, -2.5e-300, 3.0, 1.0 / 3.0, 7.0, -0.0]).unwrap(),
        )
        .unwrap();
        s.insert("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        s.set_frozen("b", true).unwrap();
        s.accumulate_grad(1, &Tensor::scalar(1.0));
        optimizer_step(&mut s, 0.0, 0.0).unwrap();
        let ck = Checkpoint {
            metadata: "{\"k\":1}".into(),
            params: s,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!(back.params.step(), 1);
        assert!(back.params.values_equal(&ck.params));
        assert!(back.params.entries()[1].frozen);
        assert_eq!(back.to_bytes(), bytes);

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
