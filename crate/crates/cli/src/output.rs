//! Results are collected in memory and written only once a command has
//! finished, followed by the resolved config and a SHA-256 manifest.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use respmotion::evaluation::{write_dice_csv, OverlapReport};
use respmotion::io::{write_field, write_volume};
use respmotion::model::{save_model, MotionModel};
use respmotion::signal::{write_signal, SurrogateSignal};
use respmotion::{DisplacementField, Error, Result, ScalarVolume};

pub const MANIFEST: &str = "manifest.sha256";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

pub enum Artifact {
    Volume(ScalarVolume),
    Field(DisplacementField),
    Signal(SurrogateSignal),
    Model(MotionModel),
    Dice(Vec<OverlapReport>),
    Bytes(Vec<u8>),
}

#[derive(Default)]
pub struct Outputs {
    items: Vec<(String, Artifact)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl Outputs {
    /// `name` is the file name, including its extension.
    pub fn add(&mut self, name: impl Into<String>, artifact: Artifact) {
        self.items.push((name.into(), artifact));
    }

    pub fn text(&mut self, name: impl Into<String>, text: String) {
        self.add(name, Artifact::Bytes(text.into_bytes()));
    }

    /// Writes every artifact into `dir`, then the resolved config and the
    /// manifest. Returns the manifest path.
    pub fn write(self, dir: &Path, resolved_config: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files = Vec::new();
        for (name, artifact) in self.items {
            let path = dir.join(&name);
            match artifact {
                Artifact::Volume(v) => write_volume(&v, &path)?,
                Artifact::Field(f) => write_field(&f, &path)?,
                Artifact::Signal(s) => write_signal(&s, &path)?,
                Artifact::Model(m) => save_model(&m, &path)?,
                Artifact::Dice(r) => write_dice_csv(&r, &path)?,
                Artifact::Bytes(b) => std::fs::write(&path, b).map_err(io_err(&path))?,
            }
            if let Some(stem) = name.strip_suffix(".mhd") {
                files.push(format!("{stem}.raw"));
            }
            files.push(name);
        }
        let cfg_path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&cfg_path, resolved_config).map_err(io_err(&cfg_path))?;
        files.push(RESOLVED_CONFIG.into());
        files.sort();
        files.dedup();

        let mut manifest = String::new();
        for name in &files {
            let path = dir.join(name);
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            manifest.push_str(&format!("{}  {name}\n", hex::encode(Sha256::digest(&bytes))));
        }
        let path = dir.join(MANIFEST);
        std::fs::write(&path, manifest).map_err(io_err(&path))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use respmotion::GridDomain;

    #[test]
    fn manifest_lists_every_file_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let d = GridDomain::cube(2, 1.0).unwrap();
        let mut out = Outputs::default();
        out.text("b.txt", "x".into());
        out.add("a.mhd", Artifact::Volume(ScalarVolume::filled(d, 1.0, 0.0)));
        out.write(dir.path(), "seed = 0\n").unwrap();
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let names: Vec<&str> = manifest.lines().map(|l| l.split("  ").nth(1).unwrap()).collect();
        assert_eq!(names, ["a.mhd", "a.raw", "b.txt", RESOLVED_CONFIG]);
        let x = hex::encode(Sha256::digest(b"x"));
        assert!(manifest.contains(&format!("{x}  b.txt\n")));
    }
}
