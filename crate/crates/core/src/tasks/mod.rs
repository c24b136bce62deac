//! Multi-task problem suites.
//!
//! A [`TaskSuite`] holds train, validation, and test splits that share inputs
//! across tasks. Suites serialize to a small little-endian binary format:
//!
//! ```text
//! magic   b"MTSU"
//! version u32
//! name    u32 length + UTF-8 bytes
//! m       u32, then per task: loss u8 (0 ce, 1 mse, 2 l1), classes u32, scale f64
//! splits  train, val, test; each:
//!         rows u64, cols u64, rows*cols f64 inputs (row-major)
//!         per task: tag u8 (0 classes, 1 values)
//!                   classes: rows u64 labels
//!                   values:  cols u64, rows*cols f64
//! ```

pub mod idx;
pub mod synthetic;

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::net::{Batch, LossKind, Targets};

pub use idx::{load_multimnist, parse_idx_images, parse_idx_labels, IdxImages, MultiMnistConfig};
pub use synthetic::{
    make_blob_classification, make_conflicting_quadratics, make_scale_imbalanced_regression, BlobConfig,
    ConflictingQuadratics, RegressionConfig,
};

const MAGIC: &[u8; 4] = b"MTSU";
pub const SUITE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Per-task descriptive data.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInfo {
    pub loss: LossKind,
    /// Class count for classification tasks, 0 otherwise.
    pub classes: usize,
    /// Target scale factor applied by the generator (1 when unscaled).
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub name: String,
    pub tasks: Vec<TaskInfo>,
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

impl TaskSuite {
    pub fn new(name: impl Into<String>, tasks: Vec<TaskInfo>, train: Batch, val: Batch, test: Batch) -> Result<Self> {
        for split in [&train, &val, &test] {
            check_len(tasks.len(), split.task_count())?;
            check_len(train.inputs.ncols(), split.inputs.ncols())?;
            for (info, t) in tasks.iter().zip(&split.targets) {
                match (info.loss, t) {
                    (LossKind::CrossEntropy, Targets::Classes(c)) => {
                        if c.iter().any(|&c| c >= info.classes) {
                            return Err(Error::Validation("class label exceeds class count".into()));
                        }
                    }
                    (LossKind::Mse | LossKind::L1, Targets::Values(_)) => {}
                    _ => return Err(Error::Validation("targets do not match the task loss".into())),
                }
            }
        }
        Ok(TaskSuite {
            name: name.into(),
            tasks,
            train,
            val,
            test,
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train.inputs.ncols()
    }

    pub fn kinds(&self) -> Vec<LossKind> {
        self.tasks.iter().map(|t| t.loss).collect()
    }

    /// Head output width each task needs.
    pub fn output_dims(&self) -> Vec<usize> {
        self.tasks
            .iter()
            .zip(&self.train.targets)
            .map(|(info, t)| match t {
                Targets::Classes(_) => info.classes,
                Targets::Values(v) => v.ncols(),
            })
            .collect()
    }

    pub fn split(&self, which: SplitKind) -> &Batch {
        match which {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(SUITE_VERSION).unwrap();
        out.write_u32::<LE>(self.name.len() as u32).unwrap();
        out.extend_from_slice(self.name.as_bytes());
        out.write_u32::<LE>(self.tasks.len() as u32).unwrap();
        for t in &self.tasks {
            out.write_u8(loss_code(t.loss)).unwrap();
            out.write_u32::<LE>(t.classes as u32).unwrap();
            out.write_f64::<LE>(t.scale).unwrap();
        }
        for split in [&self.train, &self.val, &self.test] {
            write_batch(&mut out, split);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes, Path::new("<memory>"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?, path)
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            cur: Cursor::new(bytes),
            path,
        };
        let mut magic = [0u8; 4];
        r.exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(r.fail(0, "bad magic, not a task suite file"));
        }
        let version = r.u32()?;
        if version != SUITE_VERSION {
            return Err(r.fail(4, &format!("unsupported suite version {version}")));
        }
        let name_len = r.u32()? as usize;
        let mut name = vec![0u8; name_len];
        r.exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| r.fail(12, "suite name is not UTF-8"))?;
        let m = r.u32()? as usize;
        let mut tasks = Vec::with_capacity(m.min(1024));
        for _ in 0..m {
            let at = r.pos();
            let loss = match r.u8()? {
                0 => LossKind::CrossEntropy,
                1 => LossKind::Mse,
                2 => LossKind::L1,
                other => return Err(r.fail(at, &format!("unknown loss code {other}"))),
            };
            let classes = r.u32()? as usize;
            let scale = r.f64()?;
            tasks.push(TaskInfo { loss, classes, scale });
        }
        let train = r.batch(m)?;
        let val = r.batch(m)?;
        let test = r.batch(m)?;
        if (r.pos() as usize) != bytes.len() {
            return Err(r.fail(r.pos(), "trailing bytes after suite"));
        }
        TaskSuite::new(name, tasks, train, val, test)
    }
}

fn loss_code(kind: LossKind) -> u8 {
    match kind {
        LossKind::CrossEntropy => 0,
        LossKind::Mse => 1,
        LossKind::L1 => 2,
    }
}

fn write_batch(out: &mut Vec<u8>, b: &Batch) {
    out.write_u64::<LE>(b.inputs.nrows() as u64).unwrap();
    out.write_u64::<LE>(b.inputs.ncols() as u64).unwrap();
    for v in b.inputs.iter() {
        out.write_f64::<LE>(*v).unwrap();
    }
    for t in &b.targets {
        match t {
            Targets::Classes(c) => {
                out.write_u8(0).unwrap();
                for &c in c {
                    out.write_u64::<LE>(c as u64).unwrap();
                }
            }
            Targets::Values(v) => {
                out.write_u8(1).unwrap();
                out.write_u64::<LE>(v.ncols() as u64).unwrap();
                for x in v.iter() {
                    out.write_f64::<LE>(*x).unwrap();
                }
            }
        }
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn pos(&self) -> u64 {
        self.cur.position()
    }

    fn fail(&self, offset: u64, detail: &str) -> Error {
        Error::Ingestion {
            path: self.path.to_path_buf(),
            offset,
            detail: detail.to_string(),
        }
    }

    fn truncated(&self) -> Error {
        self.fail(self.pos(), "unexpected end of file")
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.cur.read_exact(buf).map_err(|_| self.truncated())
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.truncated())
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(|_| self.truncated())
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(|_| self.truncated())
    }

    fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LE>().map_err(|_| self.truncated())
    }

    fn remaining(&self) -> u64 {
        self.cur.get_ref().len() as u64 - self.pos()
    }

    fn matrix(&mut self, rows: u64, cols: u64) -> Result<Array2<f64>> {
        let at = self.pos();
        let n = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.remaining()));
        let Some(n) = n else {
            return Err(self.fail(at, &format!("{rows}x{cols} matrix exceeds the file")));
        };
        let mut data = Vec::with_capacity(n as usize);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Array2::from_shape_vec((rows as usize, cols as usize), data).map_err(|e| self.fail(at, &e.to_string()))
    }

    fn batch(&mut self, m: usize) -> Result<Batch> {
        let rows = self.u64()?;
        let cols = self.u64()?;
        let inputs = self.matrix(rows, cols)?;
        let mut targets = Vec::with_capacity(m);
        for _ in 0..m {
            let at = self.pos();
            match self.u8()? {
                0 => {
                    if rows.saturating_mul(8) > self.remaining() {
                        return Err(self.truncated());
                    }
                    let mut c = Vec::with_capacity(rows as usize);
                    for _ in 0..rows {
                        c.push(self.u64()? as usize);
                    }
                    targets.push(Targets::Classes(c));
                }
                1 => {
                    let cols = self.u64()?;
                    targets.push(Targets::Values(self.matrix(rows, cols)?));
                }
                other => return Err(self.fail(at, &format!("unknown target tag {other}"))),
            }
        }
        Batch::new(inputs, targets)
    }
}

/// Split `n` samples 70/15/15 into train, validation, and test counts.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    let test = n - train - val;
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Validation(format!("{n} samples cannot fill a 70/15/15 split")));
    }
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_suite() -> TaskSuite {
        let mk = |rows: usize| {
            let x = Array2::from_shape_fn((rows, 2), |(i, j)| (i * 2 + j) as f64 * 0.5 - 1.0);
            Batch::new(
                x,
                vec![
                    Targets::Classes((0..rows).map(|i| i % 3).collect()),
                    Targets::Values(Array2::from_shape_fn((rows, 1), |(i, _)| i as f64 * 1.25)),
                ],
            )
            .unwrap()
        };
        TaskSuite::new(
            "tiny",
            vec![
                TaskInfo {
                    loss: LossKind::CrossEntropy,
                    classes: 3,
                    scale: 1.0,
                },
                TaskInfo {
                    loss: LossKind::L1,
                    classes: 0,
                    scale: 2.5,
                },
            ],
            mk(5),
            mk(2),
            mk(3),
        )
        .unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let suite = tiny_suite();
        let bytes = suite.to_bytes();
        assert_eq!(TaskSuite::from_bytes(&bytes).unwrap(), suite);
        assert_eq!(suite.output_dims(), vec![3, 1]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("suite.bin");
        suite.save(&path).unwrap();
        assert_eq!(TaskSuite::load(&path).unwrap(), suite);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let bytes = tiny_suite().to_bytes();
        match TaskSuite::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Ingestion { offset, .. }) => assert!(offset > 0 && offset < bytes.len() as u64),
            other => panic!("expected ingestion error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TaskSuite::from_bytes(&bad), Err(Error::Ingestion { offset: 0, .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TaskSuite::from_bytes(&extra).is_err());
    }

    #[test]
    fn split_sizes_follow_70_15_15() {
        assert_eq!(split_sizes(100).unwrap(), (70, 15, 15));
        assert_eq!(split_sizes(1000).unwrap(), (700, 150, 150));
        assert!(split_sizes(5).is_err());
    }

    #[test]
    fn mismatched_targets_rejected() {
        let s = tiny_suite();
        let mut tasks = s.tasks.clone();
        tasks[1].loss = LossKind::CrossEntropy;
        assert!(TaskSuite::new("x", tasks, s.train.clone(), s.val.clone(), s.test.clone()).is_err());
    }
}
