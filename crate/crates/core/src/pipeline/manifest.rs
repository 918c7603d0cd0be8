use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Provenance record written next to every stage output as `<output>.manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Content hash per input path, relative to the stage root where possible.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Ran,
    /// Inputs, config and outputs matched the existing manifest.
    Skipped,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut p = output.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_manifest(output: &Path) -> Result<Option<Manifest>> {
    let p = manifest_path(output);
    match std::fs::read_to_string(&p) {
        Ok(text) => Ok(Some(serde_json::from_str(&text).map_err(|e| {
            Error::format("manifest", format!("{}: {e}", p.display()))
        })?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// One stage invocation: what it reads, what it writes, and the settings
/// that determine its result.
pub struct Stage<'a> {
    pub root: &'a Path,
    pub name: &'a str,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Stage<'_> {
    fn key(&self, path: &Path) -> String {
        path.strip_prefix(self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Hash every input, failing on a missing file or on one whose content
    /// no longer matches the manifest its producer wrote.
    fn hash_inputs(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for input in &self.inputs {
            if !input.exists() {
                return Err(Error::NotFound(format!(
                    "missing upstream artifact {}",
                    input.display()
                )));
            }
            let h = hash_file(input)?;
            if let Some(upstream) = read_manifest(input)? {
                let recorded = upstream.outputs.values().any(|v| *v == h);
                if !recorded {
                    return Err(Error::Mismatch(format!(
                        "{} does not match the hash recorded by stage {}",
                        input.display(),
                        upstream.stage
                    )));
                }
            }
            out.insert(self.key(input), h);
        }
        Ok(out)
    }

    fn up_to_date(&self, inputs: &BTreeMap<String, String>) -> Result<bool> {
        let Some(first) = self.outputs.first() else {
            return Ok(false);
        };
        let Some(m) = read_manifest(first)? else {
            return Ok(false);
        };
        if m.stage != self.name
            || m.seed != self.seed
            || m.config != self.config
            || m.inputs != *inputs
        {
            return Ok(false);
        }
        for out in &self.outputs {
            let recorded = m.outputs.get(&self.key(out));
            if !out.exists() || recorded != Some(&hash_file(out)?) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Run `body` unless the outputs are already current, then record the manifest.
    pub fn run(self, body: impl FnOnce() -> Result<()>) -> Result<StageOutcome> {
        let inputs = self.hash_inputs()?;
        if self.up_to_date(&inputs)? {
            return Ok(StageOutcome::Skipped);
        }
        for out in &self.outputs {
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
        }
        body()?;
        let mut outputs = BTreeMap::new();
        for out in &self.outputs {
            outputs.insert(self.key(out), hash_file(out)?);
        }
        let manifest = Manifest {
            stage: self.name.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            inputs,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        for out in &self.outputs {
            std::fs::write(manifest_path(out), &text)?;
        }
        Ok(StageOutcome::Ran)
    }
}
