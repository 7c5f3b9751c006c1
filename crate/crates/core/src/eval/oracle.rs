//! Accuracy oracles: the pluggable "how good is this mask" query.
//!
//! The builtin oracle evaluates the network on a held-out subset in
//! process. The external oracle shells out to a user command that receives
//! the path of a serialized mask file as its final argument and must print
//! a single accuracy value in `[0, 1]` on stdout.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::net::{ChannelIndexing, NetworkSpec, PruningMask};

use super::{accuracy, Dataset, EvalError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle command exited with status {code}: {stderr}")]
    NonZeroExit { code: i32, stderr: String },
    #[error("oracle timed out after {0:?}")]
    Timeout(Duration),
    #[error("oracle printed {got:?}, expected a number")]
    NonNumeric { got: String },
    #[error("oracle accuracy {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("oracle command is empty")]
    EmptyCommand,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Maps a pruning mask to top-1 accuracy.
pub trait EvalOracle {
    fn top1(&self, mask: &PruningMask) -> Result<f64, OracleError>;
}

/// In-process evaluation of the owned network on a fixed subset.
pub struct BuiltinOracle {
    net: NetworkSpec,
    idx: ChannelIndexing,
    data: Dataset,
    batch: usize,
}

impl BuiltinOracle {
    pub fn new(net: NetworkSpec, data: Dataset, batch: usize) -> Result<Self, EvalError> {
        if data.is_empty() {
            return Err(EvalError::EmptyDataset);
        }
        let idx = crate::net::build_indexing(&net)?;
        Ok(Self { net, idx, data, batch })
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn indexing(&self) -> &ChannelIndexing {
        &self.idx
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }
}

impl EvalOracle for BuiltinOracle {
    fn top1(&self, mask: &PruningMask) -> Result<f64, OracleError> {
        Ok(accuracy(&self.net, &self.idx, Some(mask), &self.data, self.batch)?.top1)
    }
}

static MASK_FILE_SEQ: AtomicU64 = AtomicU64::new(0);

/// Subprocess-backed oracle.
pub struct ExternalOracle {
    command: Vec<String>,
    timeout: Duration,
}

impl ExternalOracle {
    pub fn new(command: Vec<String>, timeout: Duration) -> Result<Self, OracleError> {
        if command.is_empty() {
            return Err(OracleError::EmptyCommand);
        }
        Ok(Self { command, timeout })
    }

    fn scratch_path() -> PathBuf {
        let n = MASK_FILE_SEQ.fetch_add(1, Ordering::Relaxed);
        std::env::temp_dir().join(format!("gscc-mask-{}-{n}.gsccm", std::process::id()))
    }
}

impl EvalOracle for ExternalOracle {
    fn top1(&self, mask: &PruningMask) -> Result<f64, OracleError> {
        let path = Self::scratch_path();
        crate::io::write_mask(&path, mask).map_err(|e| match e {
            crate::io::IoError::Io(io) => OracleError::Io(io),
            other => OracleError::Io(std::io::Error::new(
                std::io::ErrorKind::Other,
                other.to_string(),
            )),
        })?;
        let result = self.run(&path);
        let _ = std::fs::remove_file(&path);
        result
    }
}

impl ExternalOracle {
    fn run(&self, mask_path: &std::path::Path) -> Result<f64, OracleError> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(mask_path)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(OracleError::Timeout(self.timeout));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let mut stdout = String::new();
        if let Some(mut h) = child.stdout.take() {
            h.read_to_string(&mut stdout)?;
        }
        if !status.success() {
            let mut stderr = String::new();
            if let Some(mut h) = child.stderr.take() {
                h.read_to_string(&mut stderr)?;
            }
            return Err(OracleError::NonZeroExit {
                code: status.code().unwrap_or(-1),
                stderr: stderr.trim().to_string(),
            });
        }
        let text = stdout.trim();
        let acc: f64 = text
            .parse()
            .map_err(|_| OracleError::NonNumeric { got: text.to_string() })?;
        if !(0.0..=1.0).contains(&acc) || !acc.is_finite() {
            return Err(OracleError::OutOfRange(acc));
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synth_dataset;
    use crate::toynets;

    fn sh(script: &str) -> ExternalOracle {
        ExternalOracle::new(
            vec!["sh".into(), "-c".into(), script.into(), "oracle".into()],
            Duration::from_secs(5),
        )
        .unwrap()
    }

    #[test]
    fn builtin_matches_direct_accuracy() {
                let net = toynets::chain_net(60);
        let data = synth_dataset(60, 4, 1, 16);
        let idx = crate::net::build_indexing(&net).unwrap();
        let mut mask = PruningMask::keep_all(idx.num_units());
        mask.set_pruned(3, true);
        let direct = accuracy(&net, &idx, Some(&mask), &data, 16).unwrap().top1;
        let oracle = BuiltinOracle::new(net, data, 16).unwrap();
        assert_eq!(oracle.top1(&mask).unwrap(), direct);
    }

    #[test]
    fn external_reads_the_mask_file() {
        // The command checks its argument is a non-empty file before
        // answering, so a broken hand-off fails loudly.
        let o = sh("test -s \"$1\" && echo 0.5");
        let mask = PruningMask::keep_all(9);
        assert_eq!(o.top1(&mask).unwrap(), 0.5);
    }

    #[test]
    fn external_error_paths() {
        let mask = PruningMask::keep_all(4);
        match sh("echo boom >&2; exit 3").top1(&mask) {
            Err(OracleError::NonZeroExit { code: 3, stderr }) => assert_eq!(stderr, "boom"),
            other => panic!("want NonZeroExit, got {other:?}"),
        }
        match sh("echo not-a-number").top1(&mask) {
            Err(OracleError::NonNumeric { got }) => assert_eq!(got, "not-a-number"),
            other => panic!("want NonNumeric, got {other:?}"),
        }
        match sh("echo 1.5").top1(&mask) {
            Err(OracleError::OutOfRange(v)) => assert_eq!(v, 1.5),
            other => panic!("want OutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn external_times_out() {
        let o = ExternalOracle::new(
            vec!["sh".into(), "-c".into(), "sleep 5".into()],
            Duration::from_millis(80),
        )
        .unwrap();
        match o.top1(&PruningMask::keep_all(2)) {
            Err(OracleError::Timeout(_)) => {}
            other => panic!("want Timeout, got {other:?}"),
        }
    }
}
