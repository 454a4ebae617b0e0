//! Binary dump of generated task streams.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "FCLSTRM1"
//! u32 streams
//!   u32 client, u32 tasks
//!     u32 id, u32 classes, u32 class ids...
//!     3 splits (train, valid, test):
//!       u32 rows, u32 cols, f64 features (row-major), u32 labels, u64 ids
//! ```

use fcl_core::data::{Split, Task, TaskStream};
use fcl_core::Tensor2;

use crate::error::{FclError, Result};

pub const MAGIC: &[u8; 8] = b"FCLSTRM1";

fn bad(msg: impl Into<String>) -> FclError {
    FclError::StreamFile(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("count {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_split(out: &mut Vec<u8>, s: &Split) -> Result<()> {
    if s.labels.len() != s.x.rows() || s.ids.len() != s.x.rows() {
        return Err(bad("split rows, labels and ids disagree"));
    }
    put_u32(out, s.x.rows())?;
    put_u32(out, s.x.cols())?;
    s.x.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for &l in &s.labels {
        put_u32(out, l)?;
    }
    s.ids.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    Ok(())
}

pub fn encode(streams: &[TaskStream]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, streams.len())?;
    for s in streams {
        put_u32(&mut out, s.client as usize)?;
        put_u32(&mut out, s.tasks.len())?;
        for t in &s.tasks {
            put_u32(&mut out, t.id as usize)?;
            put_u32(&mut out, t.classes.len())?;
            for &c in &t.classes {
                put_u32(&mut out, c as usize)?;
            }
            for split in [&t.train, &t.valid, &t.test] {
                put_split(&mut out, split)?;
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    rest: &'a [u8],
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.rest.len() < N {
            return Err(bad("truncated"));
        }
        let (head, tail) = self.rest.split_at(N);
        self.rest = tail;
        Ok(head.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    /// A count whose elements need at least `unit` more bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(unit) > self.rest.len() {
            return Err(bad(format!("count {n} runs past the end")));
        }
        Ok(n)
    }

    fn split(&mut self, classes: usize) -> Result<Split> {
        let rows = self.count(12)?;
        let cols = self.u32()? as usize;
        if rows.saturating_mul(cols).saturating_mul(8) > self.rest.len() {
            return Err(bad(format!("{rows}x{cols} features run past the end")));
        }
        let data = (0..rows * cols)
            .map(|_| self.take().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature"));
        }
        let labels = (0..rows)
            .map(|_| {
                let l = self.u32()? as usize;
                if l < classes {
                    Ok(l)
                } else {
                    Err(bad(format!("label {l} outside {classes} classes")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = (0..rows)
            .map(|_| self.take().map(u64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor2::new(rows, cols, data).map_err(|e| bad(e.to_string()))?;
        Ok(Split { x, labels, ids })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<TaskStream>> {
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("bad magic"))?;
    let mut c = Cursor { rest };
    let n = c.count(8)?;
    let mut streams = Vec::with_capacity(n);
    for _ in 0..n {
        let client = c.u32()?;
        let tasks_len = c.count(8)?;
        let mut tasks = Vec::with_capacity(tasks_len);
        for _ in 0..tasks_len {
            let id = c.u32()?;
            let k = c.count(4)?;
            let classes = (0..k).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let train = c.split(k)?;
            let valid = c.split(k)?;
            let test = c.split(k)?;
            tasks.push(Task {
                id,
                classes,
                train,
                valid,
                test,
            });
        }
        streams.push(TaskStream { client, tasks });
    }
    if !c.rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", c.rest.len())));
    }
    Ok(streams)
}
