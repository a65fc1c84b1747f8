//! Binary checkpoint format: named parameter tables for student and teacher,
//! optimizer moments, and the fitted calibrator.
//!
//! Everything is little-endian and round-trips bitwise, so a reloaded
//! checkpoint continues training or evaluation with identical numbers.

use std::io::{Read, Write};
use std::path::Path;

use crate::calibration::{CalibratorKind, CalibratorParams};
use crate::error::{CatError, Result};
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"CATCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Full training state at one epoch boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: u64,
    /// Student parameters, including batch-norm running statistics.
    pub model: ParamSet,
    /// Teacher parameters once phase 3 has begun.
    pub teacher: Option<ParamSet>,
    /// Adam moments keyed by parameter name.
    pub optimizer: Vec<(String, AdamState)>,
    pub calibrator: CalibratorParams,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_param_set(w: &mut impl Write, params: &ParamSet) -> Result<()> {
    write_u32(w, params.len() as u32)?;
    for p in params.iter() {
        write_str(w, &p.name)?;
        w.write_all(&[p.trainable as u8])?;
        write_tensor(w, &p.value)?;
    }
    Ok(())
}

struct Reader<'a, R: Read> {
    inner: &'a mut R,
    path: String,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| CatError::FileFormat {
                path: self.path.clone(),
                detail: "truncated checkpoint file".into(),
            })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| CatError::FileFormat {
                path: self.path.clone(),
                detail: "truncated checkpoint string".into(),
            })?;
        String::from_utf8(buf).map_err(|_| CatError::FileFormat {
            path: self.path.clone(),
            detail: "checkpoint string is not UTF-8".into(),
        })
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data)
    }

    fn param_set(&mut self) -> Result<ParamSet> {
        let count = self.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = self.string()?;
            let trainable = self.u8()? != 0;
            let value = self.tensor()?;
            if trainable {
                params.add(name, value);
            } else {
                params.add_buffer(name, value);
            }
        }
        Ok(params)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u64(&mut w, ckpt.epoch)?;
    write_param_set(&mut w, &ckpt.model)?;
    w.write_all(&[ckpt.teacher.is_some() as u8])?;
    if let Some(teacher) = &ckpt.teacher {
        write_param_set(&mut w, teacher)?;
    }
    write_u32(&mut w, ckpt.optimizer.len() as u32)?;
    for (name, state) in &ckpt.optimizer {
        write_str(&mut w, name)?;
        write_u64(&mut w, state.step_count)?;
        write_tensor(&mut w, &state.m)?;
        write_tensor(&mut w, &state.v)?;
    }
    write_str(&mut w, ckpt.calibrator.kind.as_str())?;
    w.write_all(&[ckpt.calibrator.fallback as u8])?;
    w.write_all(&ckpt.calibrator.t.to_le_bytes())?;
    w.write_all(&[ckpt.calibrator.w.is_some() as u8])?;
    if let Some(t) = &ckpt.calibrator.w {
        write_tensor(&mut w, t)?;
    }
    w.write_all(&[ckpt.calibrator.b.is_some() as u8])?;
    if let Some(t) = &ckpt.calibrator.b {
        write_tensor(&mut w, t)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut r = Reader {
        inner: &mut f,
        path: path.display().to_string(),
    };
    let magic: [u8; 8] = r.bytes()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CatError::FileFormat {
            path: r.path,
            detail: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CatError::FileFormat {
            path: r.path,
            detail: format!("unsupported checkpoint version {}", version),
        });
    }
    let epoch = r.u64()?;
    let model = r.param_set()?;
    let teacher = if r.u8()? != 0 {
        Some(r.param_set()?)
    } else {
        None
    };
    let n_opt = r.u32()? as usize;
    let mut optimizer = Vec::with_capacity(n_opt);
    for _ in 0..n_opt {
        let name = r.string()?;
        let step_count = r.u64()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        optimizer.push((name, AdamState { step_count, m, v }));
    }
    let kind = CalibratorKind::parse(&r.string()?)?;
    let fallback = r.u8()? != 0;
    let t = r.f64()?;
    let w = if r.u8()? != 0 { Some(r.tensor()?) } else { None };
    let b = if r.u8()? != 0 { Some(r.tensor()?) } else { None };
    Ok(Checkpoint {
        epoch,
        model,
        teacher,
        optimizer,
        calibrator: CalibratorParams {
            kind,
            t,
            w,
            b,
            fallback,
        },
    })
}

/// Copy saved values into an existing parameter set, matching by name.
/// Every destination parameter must be present with an identical shape.
pub fn restore_params(dst: &mut ParamSet, saved: &ParamSet) -> Result<()> {
    for id in dst.ids().collect::<Vec<_>>() {
        let name = dst.get(id).name.clone();
        let src_id = saved.find(&name).ok_or_else(|| {
            CatError::State(format!("checkpoint is missing parameter `{}`", name))
        })?;
        let src = saved.value(src_id);
        if !dst.value(id).same_shape(src) {
            return Err(CatError::Shape {
                op: "restore_params",
                detail: format!(
                    "parameter `{}`: model {:?}, checkpoint {:?}",
                    name,
                    dst.value(id).shape(),
                    src.shape()
                ),
            });
        }
        dst.get_mut(id).value.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = ParamSet::new();
        let fill = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let numel: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            )
            .unwrap()
        };
        let w = model.add("encoder.conv1.weight", fill(&[16, 1, 15], &mut rng));
        model.add_buffer("encoder.bn1.running_mean", fill(&[16], &mut rng));
        let mut teacher = ParamSet::new();
        teacher.add("teacher_encoder.conv1.weight", fill(&[16, 1, 15], &mut rng));
        let state = AdamState {
            step_count: 42,
            m: fill(&[16, 1, 15], &mut rng),
            v: fill(&[16, 1, 15], &mut rng),
        };
        let _ = w;
        Checkpoint {
            epoch: 17,
            model,
            teacher: Some(teacher),
            optimizer: vec![("encoder.conv1.weight".into(), state)],
            calibrator: CalibratorParams {
                kind: CalibratorKind::Vector,
                t: 1.0,
                w: Some(fill(&[3, 3], &mut rng)),
                b: Some(fill(&[3], &mut rng)),
                fallback: false,
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = std::env::temp_dir().join("catuda_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.epoch, 17);
        assert_eq!(loaded.model.len(), ckpt.model.len());
        for (a, b) in loaded.model.iter().zip(ckpt.model.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value.shape(), b.value.shape());
            assert_eq!(a.value.data(), b.value.data());
        }
        let t_loaded = loaded.teacher.as_ref().unwrap();
        let t_orig = ckpt.teacher.as_ref().unwrap();
        for (a, b) in t_loaded.iter().zip(t_orig.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(loaded.optimizer.len(), 1);
        assert_eq!(loaded.optimizer[0].0, "encoder.conv1.weight");
        assert_eq!(loaded.optimizer[0].1.step_count, 42);
        assert_eq!(loaded.optimizer[0].1.m.data(), ckpt.optimizer[0].1.m.data());
        assert_eq!(loaded.optimizer[0].1.v.data(), ckpt.optimizer[0].1.v.data());
        assert_eq!(loaded.calibrator.kind, CalibratorKind::Vector);
        assert_eq!(
            loaded.calibrator.w.as_ref().unwrap().data(),
            ckpt.calibrator.w.as_ref().unwrap().data()
        );
        assert_eq!(
            loaded.calibrator.b.as_ref().unwrap().data(),
            ckpt.calibrator.b.as_ref().unwrap().data()
        );
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = std::env::temp_dir().join("catuda_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CatError::FileFormat { .. })
        ));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn restore_matches_by_name_and_validates_shape() {
        let ckpt = sample_checkpoint();
        let mut dst = ParamSet::new();
        dst.add("encoder.conv1.weight", Tensor::zeros(&[16, 1, 15]));
        dst.add_buffer("encoder.bn1.running_mean", Tensor::zeros(&[16]));
        restore_params(&mut dst, &ckpt.model).unwrap();
        let id = dst.find("encoder.conv1.weight").unwrap();
        let src_id = ckpt.model.find("encoder.conv1.weight").unwrap();
        assert_eq!(dst.value(id).data(), ckpt.model.value(src_id).data());

        let mut missing = ParamSet::new();
        missing.add("unknown.weight", Tensor::zeros(&[2]));
        assert!(restore_params(&mut missing, &ckpt.model).is_err());

        let mut wrong_shape = ParamSet::new();
        wrong_shape.add("encoder.conv1.weight", Tensor::zeros(&[16, 1, 3]));
        assert!(restore_params(&mut wrong_shape, &ckpt.model).is_err());
    }
}
