use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, Project};
use crate::error::{io_err, CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the project root, `/`-separated.
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn relative(project: &Project, path: &Path) -> String {
    let rel = path.strip_prefix(&project.root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Collects the files a command reads and writes, hashing them at `finish`.
#[derive(Debug)]
pub struct ManifestBuilder<'p> {
    project: &'p Project,
    command: String,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeSet<PathBuf>,
    outputs: BTreeSet<PathBuf>,
    started: u64,
}

impl<'p> ManifestBuilder<'p> {
    pub fn new(project: &'p Project, command: impl Into<String>) -> Self {
        Self {
            project,
            command: command.into(),
            seeds: BTreeMap::new(),
            inputs: BTreeSet::new(),
            outputs: BTreeSet::new(),
            started: now_unix(),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.inputs.insert(path.into());
        self
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.outputs.insert(path.into());
        self
    }

    fn hash_all(&self, paths: &BTreeSet<PathBuf>) -> CliResult<Vec<FileHash>> {
        let mut out: Vec<FileHash> = paths
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: relative(self.project, p),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<CliResult<_>>()?;
        out.sort();
        Ok(out)
    }

    /// Hashes everything and writes the manifest to `path`.
    pub fn finish(&self, path: &Path) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.clone(),
            config_hash: self.project.config_hash.clone(),
            seeds: self.seeds.clone(),
            inputs: self.hash_all(&self.inputs)?,
            outputs: self.hash_all(&self.outputs)?,
            started_unix: self.started,
            finished_unix: now_unix(),
        };
        write_json(path, &manifest)?;
        Ok(manifest)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn manifests_under(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    if !dir.exists() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<CliResult<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            manifests_under(&p, out)?;
        } else if p.to_string_lossy().ends_with(MANIFEST_SUFFIX) {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub manifests: usize,
    pub files_checked: usize,
    pub problems: Vec<String>,
}

/// Rehashes every manifest's inputs and outputs, and checks that each input
/// living under the artifact directory was produced by some manifest with
/// the same content hash.
pub fn verify(project: &Project) -> CliResult<VerifyReport> {
    let mut paths = Vec::new();
    manifests_under(&project.artifacts(), &mut paths)?;
    let mut manifests = Vec::new();
    for p in &paths {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        manifests.push((p, m));
    }
    let produced: BTreeMap<&str, &str> = manifests
        .iter()
        .flat_map(|(_, m)| m.outputs.iter().map(|f| (f.path.as_str(), f.sha256.as_str())))
        .collect();
    let artifacts_rel = relative(project, &project.artifacts());
    let mut report = VerifyReport {
        manifests: manifests.len(),
        files_checked: 0,
        problems: Vec::new(),
    };
    for (mpath, m) in &manifests {
        let who = relative(project, mpath);
        if m.config_hash.len() != 64 {
            report.problems.push(format!("{who}: malformed config hash"));
        }
        for (role, files) in [("input", &m.inputs), ("output", &m.outputs)] {
            for f in files.iter() {
                report.files_checked += 1;
                let on_disk = project.root.join(&f.path);
                match sha256_file(&on_disk) {
                    Ok(h) if h == f.sha256 => {}
                    Ok(_) => report
                        .problems
                        .push(format!("{who}: {role} {} changed since the run", f.path)),
                    Err(_) => report
                        .problems
                        .push(format!("{who}: {role} {} is missing", f.path)),
                }
                let is_artifact = f.path.starts_with(&format!("{artifacts_rel}/"));
                if role == "input" && is_artifact {
                    match produced.get(f.path.as_str()) {
                        Some(&h) if h == f.sha256 => {}
                        Some(_) => report.problems.push(format!(
                            "{who}: input {} differs from the version its producer recorded",
                            f.path
                        )),
                        None => report
                            .problems
                            .push(format!("{who}: input {} has no producing manifest", f.path)),
                    }
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProjectConfig;

    fn project(dir: &Path) -> Project {
        Project::new(ProjectConfig::default(), dir.to_path_buf())
    }

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn chain_verifies_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let pr = project(dir.path());
        let src = dir.path().join("source.txt");
        std::fs::write(&src, "raw").unwrap();
        let a = pr.artifact("step1/a.txt").unwrap();
        std::fs::write(&a, "derived").unwrap();
        let mut m1 = ManifestBuilder::new(&pr, "one");
        m1.input(&src).output(&a);
        m1.finish(&pr.artifact("step1/one.manifest.json").unwrap()).unwrap();

        let b = pr.artifact("step2/b.txt").unwrap();
        std::fs::write(&b, "more").unwrap();
        let mut m2 = ManifestBuilder::new(&pr, "two");
        m2.seed("init", 7).input(&a).output(&b);
        let written = m2.finish(&pr.artifact("step2/two.manifest.json").unwrap()).unwrap();
        assert_eq!(written.inputs[0].path, "artifacts/step1/a.txt");

        let ok = verify(&pr).unwrap();
        assert_eq!((ok.manifests, ok.files_checked), (2, 4));
        assert!(ok.problems.is_empty(), "{:?}", ok.problems);

        std::fs::write(&a, "tampered").unwrap();
        let bad = verify(&pr).unwrap();
        assert_eq!(bad.problems.len(), 2, "{:?}", bad.problems);

        std::fs::write(&a, "derived").unwrap();
        std::fs::remove_file(dir.path().join("artifacts/step1/one.manifest.json")).unwrap();
        let orphan = verify(&pr).unwrap();
        assert!(orphan.problems[0].contains("no producing manifest"));
    }
}
