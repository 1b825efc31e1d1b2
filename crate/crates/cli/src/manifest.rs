use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

/// Plain-text record of one command invocation.
pub struct RunManifest {
    command: &'static str,
    started: Instant,
    configs: Vec<PathBuf>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            configs: Vec::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, path: &Path) {
        self.configs.push(path.to_path_buf());
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn render(&self) -> std::io::Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        for c in &self.configs {
            let _ = writeln!(s, "config={}", c.display());
        }
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        for p in &self.inputs {
            let _ = writeln!(s, "input={}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output={}", p.display());
        }
        let _ = writeln!(s, "wall_clock_s={:.3}", self.started.elapsed().as_secs_f64());
        for p in &self.outputs {
            let _ = writeln!(s, "sha256 {} {}", sha256_file(p)?, p.display());
        }
        Ok(s)
    }

    /// Writes to `path`, or to stderr when no path is given.
    pub fn emit(&self, path: Option<&Path>) -> std::io::Result<()> {
        let text = self.render()?;
        match path {
            Some(p) => std::fs::write(p, text),
            None => {
                eprint!("{text}");
                Ok(())
            }
        }
    }
}
