//! Binary trajectory files.
//!
//! Layout (little-endian): magic `TERT`, version u16, flags u16, obs_dim u32,
//! act_dim u32, priv_dim u32, trajectory count u32; per trajectory: length
//! u32, terrain code u8, difficulty f32, four environment parameters f32,
//! then `length` records of observation, executed action, teacher action,
//! reward f32 and done u8. A CRC32 of everything before it closes the file.
//!
//! Flag bit 0 is set when some trajectory was driven by a student. The source
//! of each trajectory is not stored: a trajectory whose executed actions equal
//! the teacher labels everywhere reads back as a teacher rollout.

use std::path::Path;

use crate::distill::{Source, Trajectory, TrajectoryDataset};
use crate::sim::{EnvParams, TerrainKind, ACT_DIM, OBS_DIM, PRIV_DIM};

const MAGIC: &[u8; 4] = b"TERT";
pub const TRAJECTORY_VERSION: u16 = 1;
const FLAG_STUDENT: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 * 4;

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a trajectory file (bad magic)")]
    BadMagic,
    #[error("unsupported trajectory file version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("trajectory file truncated")]
    Truncated,
    #[error("trajectory file has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("trajectory file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("{what} dimension mismatch: expected {expected}, file has {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("malformed trajectory file: {0}")]
    Invalid(String),
}

/// Widths a reader expects; files declaring anything else are rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub obs: usize,
    pub act: usize,
    pub privileged: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            obs: OBS_DIM,
            act: ACT_DIM,
            privileged: PRIV_DIM,
        }
    }
}

pub fn trajectories_to_bytes(data: &TrajectoryDataset) -> Result<Vec<u8>, TrajectoryFileError> {
    let records = data.timesteps();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 + data.trajectories.len() * 21 + records * (4 * (OBS_DIM + 2 * ACT_DIM + 1) + 1));
    let student = data.trajectories.iter().any(|t| t.source == Source::StudentRollout);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TRAJECTORY_VERSION.to_le_bytes());
    out.extend_from_slice(&(if student { FLAG_STUDENT } else { 0 }).to_le_bytes());
    for d in [OBS_DIM, ACT_DIM, PRIV_DIM, data.trajectories.len()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in &data.trajectories {
        let n = t.len();
        if [t.actions.len(), t.teacher_actions.len(), t.rewards.len(), t.dones.len()].iter().any(|&l| l != n) {
            return Err(TrajectoryFileError::Invalid("trajectory fields differ in length".into()));
        }
        if t.dones.iter().take(n.saturating_sub(1)).any(|&d| d) {
            return Err(TrajectoryFileError::Invalid("done flag before the final record".into()));
        }
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.push(t.terrain.code());
        out.extend_from_slice(&t.difficulty.to_le_bytes());
        for p in t.params.to_array() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for i in 0..n {
            for v in t.obs[i].iter().chain(&t.actions[i]).chain(&t.teacher_actions[i]) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&t.rewards[i].to_le_bytes());
            out.push(u8::from(t.dones[i]));
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrajectoryFileError> {
        let end = self.at.checked_add(n).ok_or(TrajectoryFileError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(TrajectoryFileError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrajectoryFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TrajectoryFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TrajectoryFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, TrajectoryFileError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a trajectory file, checking structure, checksum and dimensions
/// (in that order) before building the dataset.
pub fn trajectories_from_bytes(bytes: &[u8], expected: Dims) -> Result<TrajectoryDataset, TrajectoryFileError> {
    let mut r = Reader { bytes, at: 0 };
    let head = &bytes[..bytes.len().min(4)];
    if head != &MAGIC[..head.len()] {
        return Err(TrajectoryFileError::BadMagic);
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != TRAJECTORY_VERSION {
        return Err(TrajectoryFileError::Version {
            found: version,
            expected: TRAJECTORY_VERSION,
        });
    }
    let flags = r.u16()?;
    let obs = r.u32()? as usize;
    let act = r.u32()? as usize;
    let privileged = r.u32()? as usize;
    let count = r.u32()? as usize;
    let record = 4usize
        .checked_mul(obs.saturating_add(2usize.saturating_mul(act)).saturating_add(1))
        .and_then(|b| b.checked_add(1))
        .ok_or(TrajectoryFileError::Truncated)?;

    // Walk the lengths first so truncation is reported as such.
    let body = r.at;
    let mut lengths = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = r.u32()? as usize;
        r.take(1 + 4 + 16)?;
        r.take(n.checked_mul(record).ok_or(TrajectoryFileError::Truncated)?)?;
        lengths.push(n);
    }
    let payload_end = r.at;
    let stored = r.u32()?;
    if r.at != bytes.len() {
        return Err(TrajectoryFileError::TrailingBytes(bytes.len() - r.at));
    }
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(TrajectoryFileError::Checksum { stored, computed });
    }
    for (what, want, got) in [
        ("observation", expected.obs, obs),
        ("action", expected.act, act),
        ("privileged", expected.privileged, privileged),
    ] {
        if want != got {
            return Err(TrajectoryFileError::Dimension {
                what,
                expected: want,
                got,
            });
        }
    }
    for (what, want, got) in [("observation", OBS_DIM, obs), ("action", ACT_DIM, act)] {
        if want != got {
            return Err(TrajectoryFileError::Dimension {
                what,
                expected: want,
                got,
            });
        }
    }
    if flags & !FLAG_STUDENT != 0 {
        return Err(TrajectoryFileError::Invalid(format!("unknown flags {flags:#06x}")));
    }

    r.at = body;
    let mut trajectories = Vec::with_capacity(count);
    for n in lengths {
        r.u32()?;
        let code = r.u8()?;
        let terrain = TerrainKind::from_code(code)
            .ok_or_else(|| TrajectoryFileError::Invalid(format!("unknown terrain code {code}")))?;
        let difficulty = r.f32()?;
        let params = EnvParams::from_array([r.f32()?, r.f32()?, r.f32()?, r.f32()?]);
        let mut t = Trajectory::new(Source::TeacherRollout, terrain, difficulty, params);
        for i in 0..n {
            let mut o = [0.0f32; OBS_DIM];
            let mut a = [0.0f32; ACT_DIM];
            let mut ta = [0.0f32; ACT_DIM];
            for v in o.iter_mut().chain(a.iter_mut()).chain(ta.iter_mut()) {
                *v = r.f32()?;
            }
            t.obs.push(o);
            t.actions.push(a);
            t.teacher_actions.push(ta);
            t.rewards.push(r.f32()?);
            let done = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(TrajectoryFileError::Invalid(format!("done byte {b}"))),
            };
            if done && i + 1 != n {
                return Err(TrajectoryFileError::Invalid("done flag before the final record".into()));
            }
            t.dones.push(done);
        }
        if t.actions != t.teacher_actions {
            if flags & FLAG_STUDENT == 0 {
                return Err(TrajectoryFileError::Invalid(
                    "teacher-only file with executed actions that differ from the labels".into(),
                ));
            }
            t.source = Source::StudentRollout;
        }
        trajectories.push(t);
    }
    Ok(TrajectoryDataset { trajectories })
}

pub fn write_trajectories(data: &TrajectoryDataset, path: &Path) -> Result<(), TrajectoryFileError> {
    let bytes = trajectories_to_bytes(data)?;
    super::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_trajectories(path: &Path, expected: Dims) -> Result<TrajectoryDataset, TrajectoryFileError> {
    trajectories_from_bytes(&std::fs::read(path)?, expected)
}
