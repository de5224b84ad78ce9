//! Versioned binary checkpoint container.
//!
//! Exact byte layout (all integers little-endian):
//!
//! ```text
//! offset size  field
//! 0      8     magic "CAELCKP1"
//! 8      4     u32: byte length C of the embedded config text
//! 12     C     UTF-8 config text (the effective `key = value` dump)
//! ..     4     u32: parameter count P
//! then, per parameter, in registry order:
//!        4     u32: name byte length
//!        *     parameter name, UTF-8
//!        4     u32: rank R
//!        8*R   u64 dims
//!        8*N   f64 values, N = product(dims)
//! then:
//!        1     u8: 1 if optimizer state follows, else 0
//! and, when present:
//!        8*5   f64: learning_rate, weight_decay, beta1, beta2, epsilon
//!        8     u64: step_count
//!        per parameter, in registry order:
//!        8*N   f64 first-moment values
//!        8*N   f64 second-moment values
//! ```

use crate::error::CaelError;
use crate::tensor::adam::AdamState;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 8] = b"CAELCKP1";

pub struct Checkpoint {
    pub config_text: String,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub adam: Option<AdamState>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CaelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, ckpt.config_text.len() as u32);
    buf.extend_from_slice(ckpt.config_text.as_bytes());
    put_u32(&mut buf, ckpt.names.len() as u32);
    for (name, t) in ckpt.names.iter().zip(&ckpt.tensors) {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape.len() as u32);
        for d in &t.shape {
            put_u64(&mut buf, *d as u64);
        }
        put_f64s(&mut buf, &t.data);
    }
    match &ckpt.adam {
        None => buf.push(0),
        Some(a) => {
            buf.push(1);
            put_f64s(
                &mut buf,
                &[a.learning_rate, a.weight_decay, a.beta1, a.beta2, a.epsilon],
            );
            put_u64(&mut buf, a.step_count);
            for (m, v) in a.first_moment.iter().zip(&a.second_moment) {
                put_f64s(&mut buf, m);
                put_f64s(&mut buf, v);
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| CaelError::io(path.display().to_string(), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CaelError> {
        if self.pos + n > self.buf.len() {
            return Err(CaelError::Checkpoint {
                path: self.path.clone(),
                reason: "truncated file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CaelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CaelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CaelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CaelError> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint, CaelError> {
    let bytes = std::fs::read(path).map_err(|e| CaelError::io(path.display().to_string(), e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let bad = |reason: &str| CaelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic (not a checkpoint or unsupported version)"));
    }
    let clen = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(clen)?.to_vec())
        .map_err(|_| bad("config text is not UTF-8"))?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        names.push(name);
        tensors.push(Tensor::new(data, shape).with_grad());
    }
    let has_adam = r.take(1)?[0];
    let adam = if has_adam == 1 {
        let learning_rate = r.f64()?;
        let weight_decay = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let epsilon = r.f64()?;
        let step_count = r.u64()?;
        let mut first = Vec::with_capacity(count);
        let mut second = Vec::with_capacity(count);
        for t in &tensors {
            first.push(r.f64s(t.numel())?);
            second.push(r.f64s(t.numel())?);
        }
        Some(AdamState {
            learning_rate,
            weight_decay,
            beta1,
            beta2,
            epsilon,
            step_count,
            first_moment: first,
            second_moment: second,
        })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after checkpoint payload"));
    }
    Ok(Checkpoint {
        config_text,
        names,
        tensors,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_adam() {
        let dir = std::env::temp_dir().join("cael_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        let tensors = vec![
            Tensor::new(vec![1.0, -2.0, 3.0, 0.25], vec![2, 2]).with_grad(),
            Tensor::new(vec![0.5; 3], vec![3]).with_grad(),
        ];
        let adam = AdamState {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 17,
            first_moment: vec![vec![0.1; 4], vec![0.2; 3]],
            second_moment: vec![vec![0.3; 4], vec![0.4; 3]],
        };
        let ckpt = Checkpoint {
            config_text: "seed = 1\n".into(),
            names: vec!["a.w".into(), "a.b".into()],
            tensors,
            adam: Some(adam),
        };
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config_text, ckpt.config_text);
        assert_eq!(back.names, ckpt.names);
        for (a, b) in back.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(a.shape, b.shape);
            assert_eq!(&**a.data, &**b.data);
        }
        let ba = back.adam.unwrap();
        assert_eq!(ba.step_count, 17);
        assert_eq!(ba.first_moment, vec![vec![0.1; 4], vec![0.2; 3]]);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = std::env::temp_dir().join("cael_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let make = || Checkpoint {
            config_text: "x = 1\n".into(),
            names: vec!["p".into()],
            tensors: vec![Tensor::new(vec![0.125, -7.5], vec![2])],
            adam: None,
        };
        let p1 = dir.join("d1.ckpt");
        let p2 = dir.join("d2.ckpt");
        save(&p1, &make()).unwrap();
        save(&p2, &make()).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join("cael_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
