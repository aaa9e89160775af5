//! Binary checkpoint: little-endian, `LGCL` magic, u32 version, u64 dims
//! (M, N, k, T, r), row-major f64 tables, Adam moments, step counter, RNG
//! state, and a length-prefixed UTF-8 config digest.

use std::path::{Path, PathBuf};

use crate::linalg::DenseMatrix;
use crate::model::{HyperParams, ModelState};
use crate::objective::OptimizerState;
use crate::rng::SplitMix64;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LGCL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint digest is not UTF-8")]
    BadDigest,
    #[error("checkpoint {what} is {found}, expected {expected}")]
    DimMismatch { what: &'static str, found: u64, expected: u64 },
}

/// Everything needed to restore a model and its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub optimizer: OptimizerState,
    pub svd_rank: usize,
    pub config_digest: String,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn dim(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| CheckpointError::Truncated(what))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &'static str) -> Result<DenseMatrix, CheckpointError> {
        let len = rows.checked_mul(cols).and_then(|x| x.checked_mul(8)).ok_or(CheckpointError::Truncated(what))?;
        let bytes = self.take(len, what)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(DenseMatrix::from_vec(rows, cols, data).expect("length checked above"))
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &DenseMatrix) {
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let (m, n, k) = (s.num_users(), s.num_items(), s.embed_dim());
        let mut out = Vec::with_capacity(64 + 24 * (m + n) * k + self.config_digest.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [m, n, k, s.layers, self.svd_rank] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_matrix(&mut out, &s.user_emb);
        put_matrix(&mut out, &s.item_emb);
        let o = &self.optimizer;
        for mat in [&o.m_user, &o.v_user, &o.m_item, &o.v_item] {
            put_matrix(&mut out, mat);
        }
        out.extend_from_slice(&o.step.to_le_bytes());
        out.extend_from_slice(&s.rng.state().to_le_bytes());
        out.extend_from_slice(&(self.config_digest.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_digest.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let m = r.dim("M")?;
        let n = r.dim("N")?;
        let k = r.dim("k")?;
        let layers = r.dim("T")?;
        let svd_rank = r.dim("r")?;
        let user_emb = r.matrix(m, k, "user table")?;
        let item_emb = r.matrix(n, k, "item table")?;
        let m_user = r.matrix(m, k, "user first moment")?;
        let v_user = r.matrix(m, k, "user second moment")?;
        let m_item = r.matrix(n, k, "item first moment")?;
        let v_item = r.matrix(n, k, "item second moment")?;
        let step = r.u64("step counter")?;
        let rng = SplitMix64::from_state(r.u64("rng state")?);
        let len = r.u32("digest length")? as usize;
        let digest = std::str::from_utf8(r.take(len, "digest")?).map_err(|_| CheckpointError::BadDigest)?.to_owned();
        if !r.buf.is_empty() {
            return Err(CheckpointError::TrailingBytes(r.buf.len()));
        }
        let state = ModelState { user_emb, item_emb, layers, rng };
        let mut optimizer = OptimizerState::new(&state);
        optimizer.m_user = m_user;
        optimizer.v_user = v_user;
        optimizer.m_item = m_item;
        optimizer.v_item = v_item;
        optimizer.step = step;
        Ok(Self { state, optimizer, svd_rank, config_digest: digest })
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|source| CheckpointError::Io { path: tmp.clone(), source })?;
        std::fs::rename(&tmp, path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Checks the stored dims against a dataset size and hyperparameters.
    pub fn check_compatible(&self, num_users: usize, num_items: usize, hp: &HyperParams) -> Result<(), CheckpointError> {
        let s = &self.state;
        let pairs = [
            ("user count", s.num_users(), num_users),
            ("item count", s.num_items(), num_items),
            ("embed_dim", s.embed_dim(), hp.embed_dim),
            ("layers", s.layers, hp.layers),
            ("svd_rank", self.svd_rank, hp.svd_rank),
        ];
        for (what, found, expected) in pairs {
            if found != expected {
                return Err(CheckpointError::DimMismatch { what, found: found as u64, expected: expected as u64 });
            }
        }
        Ok(())
    }
}
