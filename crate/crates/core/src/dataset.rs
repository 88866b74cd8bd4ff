//! On-disk dataset layout.
//!
//! `manifest.json` describes the episode count, sequence length, beam
//! count and one entry per modality; each modality lives in its own
//! `mod_<name>.bin` of little-endian f32 values shaped `[E, T, ...]`.
//! Labels are little-endian u16 and the presence mask is one byte per
//! (episode, step, modality).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const LABELS: &str = "labels.bin";
const MASK: &str = "mask.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityData {
    pub name: String,
    /// Shape of one step.
    pub shape: Vec<usize>,
    /// `[E, T, dim]`
    pub values: Vec<f32>,
}

impl ModalityData {
    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub episodes: usize,
    pub steps: usize,
    pub beams: usize,
    pub seed: u64,
    pub stream: u64,
    /// Loaded modalities; may be a subset of `mask_modalities`.
    pub modalities: Vec<ModalityData>,
    pub labels: Vec<u16>,
    /// `[E, T, mask_modalities.len()]`, 1 = present.
    pub mask: Vec<u8>,
    pub mask_modalities: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestModality {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(rename = "format-version")]
    format_version: u32,
    #[serde(rename = "E")]
    episodes: usize,
    #[serde(rename = "T")]
    steps: usize,
    #[serde(rename = "B")]
    beams: usize,
    seed: u64,
    stream: u64,
    modalities: Vec<ManifestModality>,
    mask_file: String,
    label_file: String,
}

pub fn modality_file(name: &str) -> String {
    format!("mod_{name}.bin")
}

fn read(path: &Path, log: &mut Vec<PathBuf>) -> Result<Vec<u8>> {
    log.push(path.to_path_buf());
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn modality(&self, name: &str) -> Result<&ModalityData> {
        self.modality_index(name)
            .map(|i| &self.modalities[i])
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    /// Features of one step.
    pub fn step(&self, modality: usize, episode: usize, t: usize) -> &[f32] {
        let m = &self.modalities[modality];
        let d = m.dim();
        let off = (episode * self.steps + t) * d;
        &m.values[off..off + d]
    }

    pub fn present(&self, name: &str, episode: usize, t: usize) -> bool {
        match self.mask_modalities.iter().position(|m| m == name) {
            Some(k) => self.mask[(episode * self.steps + t) * self.mask_modalities.len() + k] == 1,
            None => false,
        }
    }

    pub fn label(&self, episode: usize) -> usize {
        self.labels[episode] as usize
    }

    /// Episodes at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let t = self.steps;
        let mm = self.mask_modalities.len();
        let modalities = self
            .modalities
            .iter()
            .map(|m| {
                let per = t * m.dim();
                let mut values = Vec::with_capacity(indices.len() * per);
                for &i in indices {
                    values.extend_from_slice(&m.values[i * per..(i + 1) * per]);
                }
                ModalityData {
                    name: m.name.clone(),
                    shape: m.shape.clone(),
                    values,
                }
            })
            .collect();
        let mut mask = Vec::with_capacity(indices.len() * t * mm);
        for &i in indices {
            mask.extend_from_slice(&self.mask[i * t * mm..(i + 1) * t * mm]);
        }
        Dataset {
            episodes: indices.len(),
            steps: t,
            beams: self.beams,
            seed: self.seed,
            stream: self.stream,
            modalities,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            mask,
            mask_modalities: self.mask_modalities.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for m in &self.modalities {
            let file = modality_file(&m.name);
            let mut bytes = Vec::with_capacity(m.values.len() * 4);
            for v in &m.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            write(&dir.join(&file), &bytes)?;
            let mut shape = vec![self.episodes, self.steps];
            shape.extend_from_slice(&m.shape);
            entries.push(ManifestModality {
                name: m.name.clone(),
                shape,
                file,
            });
        }
        let labels: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        write(&dir.join(LABELS), &labels)?;
        write(&dir.join(MASK), &self.mask)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            episodes: self.episodes,
            steps: self.steps,
            beams: self.beams,
            seed: self.seed,
            stream: self.stream,
            modalities: entries,
            mask_file: MASK.into(),
            label_file: LABELS.into(),
        };
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        write(&dir.join(MANIFEST), json.as_bytes())
    }

    /// Loads the modalities named in `select` (all when `None`).
    pub fn load(dir: &Path, select: Option<&[&str]>) -> Result<Dataset> {
        Self::load_logged(dir, select, &mut Vec::new())
    }

    /// As [`Dataset::load`], appending every file opened to `log`.
    pub fn load_logged(dir: &Path, select: Option<&[&str]>, log: &mut Vec<PathBuf>) -> Result<Dataset> {
        let mpath = dir.join(MANIFEST);
        let raw = read(&mpath, log)?;
        let manifest: Manifest =
            serde_json::from_slice(&raw).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &mpath,
                format!("unsupported format-version {}", manifest.format_version),
            ));
        }
        let (e, t) = (manifest.episodes, manifest.steps);
        if let Some(sel) = select {
            for name in sel {
                if !manifest.modalities.iter().any(|m| m.name == *name) {
                    return Err(Error::UnknownModality(name.to_string()));
                }
            }
        }
        let mut modalities = Vec::new();
        for entry in &manifest.modalities {
            if let Some(sel) = select {
                if !sel.contains(&entry.name.as_str()) {
                    continue;
                }
            }
            if entry.shape.len() < 2 || entry.shape[0] != e || entry.shape[1] != t {
                return Err(Error::format(&mpath, format!("bad shape for {}", entry.name)));
            }
            let path = dir.join(&entry.file);
            let bytes = read(&path, log)?;
            let n: usize = entry.shape.iter().product();
            if bytes.len() != 4 * n {
                return Err(Error::format(&path, format!("expected {} bytes", 4 * n)));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            modalities.push(ModalityData {
                name: entry.name.clone(),
                shape: entry.shape[2..].to_vec(),
                values,
            });
        }
        let lpath = dir.join(&manifest.label_file);
        let lbytes = read(&lpath, log)?;
        if lbytes.len() != 2 * e {
            return Err(Error::format(&lpath, format!("expected {} bytes", 2 * e)));
        }
        let labels: Vec<u16> = lbytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= manifest.beams) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: manifest.beams,
            });
        }
        let kpath = dir.join(&manifest.mask_file);
        let mask = read(&kpath, log)?;
        let mm = manifest.modalities.len();
        if mask.len() != e * t * mm || mask.iter().any(|&b| b > 1) {
            return Err(Error::format(&kpath, "mask size or values invalid"));
        }
        Ok(Dataset {
            episodes: e,
            steps: t,
            beams: manifest.beams,
            seed: manifest.seed,
            stream: manifest.stream,
            modalities,
            labels,
            mask,
            mask_modalities: manifest.modalities.into_iter().map(|m| m.name).collect(),
        })
    }
}
