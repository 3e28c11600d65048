//! Versioned binary containers with trailing sha-256 checksums.
//!
//! Layout is an 8-byte magic (7-byte family tag plus a version digit), a
//! fixed header, f64 little-endian payloads, then the sha-256 digest of
//! everything before it. Loads check magic and version first, then the
//! checksum, then parse. Saves are pure functions of their input, so
//! save -> load -> save produces byte-identical files.

use crate::denoiser::mlp::{D_C, D_T, HIDDEN};
use crate::denoiser::TrainedModel;
use crate::inversion::NullSchedule;
use crate::sampler::{Direction, Trajectory};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::{Error, Latent, Result};
use ndarray::{Array1, Array2, IxDyn};
use sha2::{Digest, Sha256};
use std::path::Path;

const TRAJ_MAGIC: &[u8; 8] = b"NMGTRAJ1";
const CKPT_MAGIC: &[u8; 8] = b"NMGCKPT1";
const NULL_MAGIC: &[u8; 8] = b"NMGNULL1";

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn finish(path: &Path, mut buf: Vec<u8>) -> Result<()> {
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Checks length, magic, version and checksum; returns the body after the
/// magic with the checksum stripped.
fn open_checked<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < magic.len() + 32 {
        return Err(fmt_err(path, format!("truncated {what} container")));
    }
    if bytes[..7] != magic[..7] {
        return Err(fmt_err(path, format!("not a {what} container")));
    }
    if bytes[7] != magic[7] {
        return Err(fmt_err(
            path,
            format!(
                "unsupported {what} container version {:?}",
                bytes[7] as char
            ),
        ));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != tail {
        return Err(fmt_err(path, "checksum mismatch, file is corrupt"));
    }
    Ok(&body[8..])
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader {
            bytes,
            pos: 0,
            path,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| fmt_err(self.path, "unexpected end of container body"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        // Counts are bounded by the body length, so corrupt headers fail
        // instead of attempting giant allocations.
        if n > (self.bytes.len() - self.pos) as u64 / 8 {
            return Err(fmt_err(
                self.path,
                format!("{what} count {n} exceeds container size"),
            ));
        }
        Ok(n as usize)
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let nbytes = n
            .checked_mul(8)
            .ok_or_else(|| fmt_err(self.path, "element count overflows"))?;
        let raw = self.take(nbytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(fmt_err(self.path, "trailing bytes after container body"));
        }
        Ok(())
    }
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64_slice(buf: &mut Vec<u8>, vs: impl IntoIterator<Item = f64>) {
    for v in vs {
        put_f64(buf, v);
    }
}

fn put_shape(buf: &mut Vec<u8>, shape: &[usize]) {
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        put_u64(buf, d as u64);
    }
}

fn read_shape(r: &mut Reader) -> Result<Vec<usize>> {
    let ndim = r.u32()? as usize;
    if ndim > 8 {
        return Err(fmt_err(r.path, format!("implausible rank {ndim}")));
    }
    (0..ndim).map(|_| Ok(r.u64()? as usize)).collect()
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let first = traj
        .latents
        .first()
        .ok_or_else(|| Error::Usage("cannot save an empty trajectory".into()))?;
    if traj.latents.iter().any(|z| z.shape() != first.shape()) {
        return Err(Error::Usage("trajectory latent shapes are not uniform".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(TRAJ_MAGIC);
    buf.push(match traj.direction {
        Direction::Forward => 0,
        Direction::Backward => 1,
    });
    put_shape(&mut buf, first.shape());
    put_u64(&mut buf, traj.latents.len() as u64);
    for z in &traj.latents {
        put_f64_slice(&mut buf, z.iter().copied());
    }
    finish(path, buf)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = std::fs::read(path)?;
    let body = open_checked(path, &bytes, TRAJ_MAGIC, "trajectory")?;
    let mut r = Reader::new(path, body);
    let direction = match r.u8()? {
        0 => Direction::Forward,
        1 => Direction::Backward,
        d => return Err(fmt_err(path, format!("unknown direction tag {d}"))),
    };
    let shape = read_shape(&mut r)?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .filter(|&n| n > 0)
        .ok_or_else(|| fmt_err(path, "bad latent shape"))?;
    let count = r.count("latent")?;
    let mut latents = Vec::with_capacity(count);
    for _ in 0..count {
        let vals = r.f64_vec(numel)?;
        let z = Latent::from_shape_vec(IxDyn(&shape), vals)
            .map_err(|_| fmt_err(path, "payload does not match shape"))?;
        latents.push(z);
    }
    r.done()?;
    if latents.is_empty() {
        return Err(fmt_err(path, "trajectory holds no latents"));
    }
    Ok(Trajectory { latents, direction })
}

fn put_matrix(buf: &mut Vec<u8>, m: &Array2<f64>) {
    put_u64(buf, m.len() as u64);
    put_f64_slice(buf, m.iter().copied());
}

fn put_vector(buf: &mut Vec<u8>, v: &Array1<f64>) {
    put_u64(buf, v.len() as u64);
    put_f64_slice(buf, v.iter().copied());
}

fn read_matrix(r: &mut Reader, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
    let n = r.count(what)?;
    if rows.checked_mul(cols) != Some(n) {
        return Err(fmt_err(
            r.path,
            format!("{what} holds {n} values, expected {rows}x{cols}"),
        ));
    }
    Ok(Array2::from_shape_vec((rows, cols), r.f64_vec(n)?).expect("length checked"))
}

fn read_vector(r: &mut Reader, len: usize, what: &str) -> Result<Array1<f64>> {
    let n = r.count(what)?;
    if n != len {
        return Err(fmt_err(
            r.path,
            format!("{what} holds {n} values, expected {len}"),
        ));
    }
    Ok(Array1::from_vec(r.f64_vec(n)?))
}

pub fn save_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    let p = model.schedule.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u64(&mut buf, p.train_steps as u64);
    put_u64(&mut buf, p.infer_steps as u64);
    put_f64(&mut buf, p.beta_lo);
    put_f64(&mut buf, p.beta_hi);
    put_shape(&mut buf, &model.latent_shape);
    put_u64(&mut buf, model.n_classes as u64);
    put_u64(&mut buf, D_T as u64);
    put_u64(&mut buf, D_C as u64);
    put_u64(&mut buf, HIDDEN as u64);
    put_matrix(&mut buf, &model.t_table);
    put_matrix(&mut buf, &model.class_table);
    put_matrix(&mut buf, &model.w1);
    put_vector(&mut buf, &model.b1);
    put_matrix(&mut buf, &model.w2);
    put_vector(&mut buf, &model.b2);
    put_matrix(&mut buf, &model.w3);
    put_vector(&mut buf, &model.b3);
    finish(path, buf)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path)?;
    let body = open_checked(path, &bytes, CKPT_MAGIC, "checkpoint")?;
    let mut r = Reader::new(path, body);
    let params = ScheduleParams {
        train_steps: r.u64()? as usize,
        infer_steps: r.u64()? as usize,
        beta_lo: r.f64()?,
        beta_hi: r.f64()?,
    };
    // The timestep table must fit in the body, which bounds the schedule
    // length before any allocation happens.
    if params.train_steps > body.len() / (8 * D_T) {
        return Err(fmt_err(path, "implausible schedule length"));
    }
    let schedule = NoiseSchedule::from_params(&params)?;
    let latent_shape = read_shape(&mut r)?;
    let d_z = latent_shape
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .filter(|&n| n > 0)
        .ok_or_else(|| fmt_err(path, "bad latent shape"))?;
    let n_classes = r.u64()? as usize;
    let (d_t, d_c, hidden) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
    if (d_t, d_c, hidden) != (D_T, D_C, HIDDEN) {
        return Err(fmt_err(
            path,
            format!("layer sizes {d_t}/{d_c}/{hidden} do not match this build"),
        ));
    }
    let d_in = d_z + D_T + D_C;
    let t_table = read_matrix(&mut r, params.train_steps + 1, D_T, "timestep table")?;
    let class_table = read_matrix(&mut r, n_classes + 1, D_C, "class table")?;
    let w1 = read_matrix(&mut r, HIDDEN, d_in, "w1")?;
    let b1 = read_vector(&mut r, HIDDEN, "b1")?;
    let w2 = read_matrix(&mut r, HIDDEN, HIDDEN, "w2")?;
    let b2 = read_vector(&mut r, HIDDEN, "b2")?;
    let w3 = read_matrix(&mut r, d_z, HIDDEN, "w3")?;
    let b3 = read_vector(&mut r, d_z, "b3")?;
    r.done()?;

    let model = TrainedModel {
        schedule,
        latent_shape,
        n_classes,
        t_table,
        class_table,
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
    };
    let finite = model
        .t_table
        .iter()
        .chain(model.class_table.iter())
        .chain(model.w1.iter())
        .chain(model.b1.iter())
        .chain(model.w2.iter())
        .chain(model.b2.iter())
        .chain(model.w3.iter())
        .chain(model.b3.iter())
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Validation(
            "checkpoint contains non-finite parameters".into(),
        ));
    }
    Ok(model)
}

pub fn save_null_schedule(path: &Path, ns: &NullSchedule) -> Result<()> {
    let dim = ns.embeddings().first().map_or(0, |e| e.len());
    let mut buf = Vec::new();
    buf.extend_from_slice(NULL_MAGIC);
    put_u64(&mut buf, ns.len() as u64);
    put_u64(&mut buf, dim as u64);
    for e in ns.embeddings() {
        put_f64_slice(&mut buf, e.iter().copied());
    }
    finish(path, buf)
}

pub fn load_null_schedule(path: &Path) -> Result<NullSchedule> {
    let bytes = std::fs::read(path)?;
    let body = open_checked(path, &bytes, NULL_MAGIC, "null schedule")?;
    let mut r = Reader::new(path, body);
    let rungs = r.count("rung")?;
    let dim = r.u64()? as usize;
    let mut embeddings = Vec::with_capacity(rungs);
    for _ in 0..rungs {
        embeddings.push(Array1::from_vec(r.f64_vec(dim)?));
    }
    r.done()?;
    NullSchedule::new(embeddings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Condition;
    use crate::rng::seed_stream;
    use crate::sampler::run_inversion;
    use crate::schedule::make_schedule;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sample_traj() -> Trajectory {
        let s = make_schedule(100, 10, 1e-4, 0.02).unwrap();
        let m = crate::denoiser::AnalyticModel::unit_gaussian(s.clone(), &[4, 3]);
        let mut rng = seed_stream(80, "container");
        let z0 = Latent::from_shape_simple_fn(IxDyn(&[4, 3]), || rng.sample(StandardNormal));
        run_inversion(&m, &s, &z0, &Condition::Null, 1.0).unwrap()
    }

    #[test]
    fn trajectory_roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.traj");
        let traj = sample_traj();
        save_trajectory(&path, &traj).unwrap();
        let back = load_trajectory(&path).unwrap();
        assert_eq!(back.direction, traj.direction);
        assert_eq!(back.latents, traj.latents);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.traj");
        let p2 = dir.path().join("b.traj");
        let traj = sample_traj();
        save_trajectory(&p1, &traj).unwrap();
        save_trajectory(&p2, &load_trajectory(&p1).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn flipped_version_byte_reports_version_not_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.traj");
        save_trajectory(&path, &sample_traj()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[7] = b'9';
        std::fs::write(&path, bytes).unwrap();
        match load_trajectory(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("version"), "{reason}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn flipped_payload_byte_reports_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.traj");
        save_trajectory(&path, &sample_traj()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        match load_trajectory(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("checksum"), "{reason}"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_family_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.traj");
        let traj = sample_traj();
        save_trajectory(&path, &traj).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match load_trajectory(&path) {
            Err(Error::Format { reason, .. }) => {
                assert!(reason.contains("not a trajectory"), "{reason}")
            }
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.traj");
        save_trajectory(&path, &sample_traj()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(load_trajectory(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_roundtrip_restores_the_model_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = make_schedule(60, 6, 1e-4, 0.02).unwrap();
        let model = TrainedModel::init(s, &[3, 2], 3, 5).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);

        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_with_non_finite_weights_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = make_schedule(60, 6, 1e-4, 0.02).unwrap();
        let mut model = TrainedModel::init(s, &[3], 2, 5).unwrap();
        model.w2[[0, 0]] = f64::NAN;
        save_checkpoint(&path, &model).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn null_schedule_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.null");
        let mut rng = seed_stream(81, "container");
        let embeddings: Vec<Array1<f64>> = (0..7)
            .map(|_| Array1::from_shape_simple_fn(16, || rng.sample(StandardNormal)))
            .collect();
        let ns = NullSchedule::new(embeddings).unwrap();
        save_null_schedule(&path, &ns).unwrap();
        let back = load_null_schedule(&path).unwrap();
        assert_eq!(back, ns);
    }

    #[test]
    fn containers_reject_each_other() {
        let dir = tempfile::tempdir().unwrap();
        let tpath = dir.path().join("t.traj");
        save_trajectory(&tpath, &sample_traj()).unwrap();
        assert!(matches!(load_checkpoint(&tpath), Err(Error::Format { .. })));
        assert!(matches!(
            load_null_schedule(&tpath),
            Err(Error::Format { .. })
        ));
    }
}
