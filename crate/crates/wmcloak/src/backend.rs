//! Out-of-process imitation backends.
//!
//! Contract: `adapter <in.png> <out.png> --strength F --seed N [--prompt S]`,
//! exit status 0 on success, with the generated image written to `out.png`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use wmcloak_core::{Image, ImitationConfig};

use crate::error::{Error, Result};
use crate::io::{read_image_native, write_image};

/// One adapter executable plus fixed leading arguments. Calls through the
/// same instance are serialized.
#[derive(Debug)]
pub struct ExternalBackend {
    program: PathBuf,
    leading_args: Vec<String>,
    lock: Mutex<()>,
}

impl ExternalBackend {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ExternalBackend { program: program.into(), leading_args: Vec::new(), lock: Mutex::new(()) }
    }

    /// Parses `argv[0]` as the program and the rest as leading arguments.
    pub fn from_argv(argv: &[String]) -> Result<Self> {
        let (program, rest) =
            argv.split_first().ok_or_else(|| Error::Config("adapter command is empty".into()))?;
        Ok(ExternalBackend { leading_args: rest.to_vec(), ..Self::new(program) })
    }

    /// The argument vector passed after the leading arguments.
    pub fn contract_args(input: &Path, output: &Path, cfg: &ImitationConfig) -> Vec<String> {
        let mut args = vec![
            input.display().to_string(),
            output.display().to_string(),
            "--strength".into(),
            cfg.strength.to_string(),
            "--seed".into(),
            cfg.seed.to_string(),
        ];
        if let Some(p) = &cfg.prompt {
            args.push("--prompt".into());
            args.push(p.clone());
        }
        args
    }

    /// Runs the adapter on an existing file and reads back its output.
    pub fn run_file(&self, input: &Path, output: &Path, cfg: &ImitationConfig) -> Result<Image> {
        cfg.validate()?;
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        if output.exists() {
            std::fs::remove_file(output).map_err(crate::error::io_err(output))?;
        }
        let result = Command::new(&self.program)
            .args(&self.leading_args)
            .args(Self::contract_args(input, output, cfg))
            .output()
            .map_err(|e| Error::Backend {
                msg: format!("cannot start {}: {e}", self.program.display()),
                stderr: String::new(),
            })?;
        let stderr = String::from_utf8_lossy(&result.stderr).into_owned();
        if !result.status.success() {
            return Err(Error::Backend { msg: format!("{} exited with {}", self.program.display(), result.status), stderr });
        }
        if !output.is_file() {
            return Err(Error::Backend { msg: format!("adapter produced no file at {}", output.display()), stderr });
        }
        read_image_native(output).map_err(|e| Error::Backend { msg: format!("unreadable adapter output: {e}"), stderr })
    }

    /// Writes `x` to `work_dir/<stem>.in.png` and runs the adapter on it.
    pub fn run(&self, x: &Image, work_dir: &Path, stem: &str, cfg: &ImitationConfig) -> Result<Image> {
        let input = work_dir.join(format!("{stem}.in.png"));
        let output = work_dir.join(format!("{stem}.out.png"));
        write_image(x, &input)?;
        self.run_file(&input, &output, cfg)
    }
}

/// One-shot convenience around [`ExternalBackend::run_file`].
pub fn run_external_backend(adapter: &Path, input: &Path, output: &Path, cfg: &ImitationConfig) -> Result<Image> {
    ExternalBackend::new(adapter).run_file(input, output, cfg)
}
