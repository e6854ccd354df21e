//! Dataset layout `root/{split}/HR/*.png`, `root/{split}/LR/x{s}/*.png`,
//! indexed by a plain-text file `root/{split}/index_x{s}.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use super::io::{read_raster, save_png, Raster8};
use super::pair::{crop_to_multiple, make_pair};
use crate::error::{Error, Result};

const INDEX_HEADER: &str = "# ssiu dataset index v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub hr: PathBuf,
    pub lr: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub scale: usize,
    pub entries: Vec<ManifestEntry>,
}

/// A decoded pair kept as 8-bit rasters.
#[derive(Clone, Debug)]
pub struct StoredPair {
    pub name: String,
    pub hr: Raster8,
    pub lr: Raster8,
    pub scale: usize,
}

fn is_png(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

impl DatasetManifest {
    pub fn split_dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }

    pub fn hr_dir(&self) -> PathBuf {
        self.split_dir().join("HR")
    }

    pub fn lr_dir(&self) -> PathBuf {
        self.split_dir().join("LR").join(format!("x{}", self.scale))
    }

    pub fn index_path(&self) -> PathBuf {
        self.split_dir().join(format!("index_x{}.txt", self.scale))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lists `HR/*.png` (sorted by name) and matches each to
    /// `LR/x{s}/{stem}.png` or `LR/x{s}/{stem}x{s}.png` when present.
    pub fn scan(root: &Path, split: &str, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::invalid("scale must be positive"));
        }
        let mut m = DatasetManifest {
            root: root.to_path_buf(),
            split: split.to_string(),
            scale,
            entries: Vec::new(),
        };
        let hr_dir = m.hr_dir();
        let listing = fs::read_dir(&hr_dir).map_err(|e| Error::io(&hr_dir, e))?;
        let mut hr: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_png(p))
            .collect();
        hr.sort();
        let lr_dir = m.lr_dir();
        for path in hr {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let lr = [format!("{stem}.png"), format!("{stem}x{scale}.png")]
                .into_iter()
                .map(|n| lr_dir.join(n))
                .find(|p| p.is_file());
            m.entries.push(ManifestEntry {
                name: stem,
                hr: path,
                lr,
            });
        }
        Ok(m)
    }

    /// Reads the cached index if present (and `rebuild` is false), otherwise
    /// scans and writes it. Always verifies that referenced files exist.
    pub fn open(root: &Path, split: &str, scale: usize, rebuild: bool) -> Result<Self> {
        let probe = DatasetManifest {
            root: root.to_path_buf(),
            split: split.to_string(),
            scale,
            entries: Vec::new(),
        };
        let index = probe.index_path();
        let m = if !rebuild && index.is_file() {
            Self::read_index(root, split, scale, &index)?
        } else {
            let m = Self::scan(root, split, scale)?;
            m.write_index()?;
            m
        };
        m.verify()?;
        Ok(m)
    }

    pub fn to_index_text(&self) -> String {
        let base = self.split_dir();
        let rel = |p: &Path| {
            p.strip_prefix(&base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut s = format!("{INDEX_HEADER}\nsplit\t{}\nscale\t{}\n", self.split, self.scale);
        for e in &self.entries {
            let lr = e.lr.as_deref().map(rel).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{}\t{}\t{}\n", e.name, rel(&e.hr), lr));
        }
        s
    }

    pub fn write_index(&self) -> Result<()> {
        let path = self.index_path();
        fs::write(&path, self.to_index_text()).map_err(|e| Error::io(&path, e))
    }

    fn read_index(root: &Path, split: &str, scale: usize, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Image {
            path: path.to_path_buf(),
            message: format!("malformed index: {msg}"),
        };
        let mut lines = text.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(bad("missing header"));
        }
        let expect = |line: Option<&str>, key: &str, value: &str| match line {
            Some(l) if l == format!("{key}\t{value}") => Ok(()),
            _ => Err(bad(&format!("expected {key} {value}"))),
        };
        expect(lines.next(), "split", split)?;
        expect(lines.next(), "scale", &scale.to_string())?;
        let base = root.join(split);
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(line));
            }
            entries.push(ManifestEntry {
                name: cols[0].to_string(),
                hr: base.join(cols[1]),
                lr: (cols[2] != "-").then(|| base.join(cols[2])),
            });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            split: split.to_string(),
            scale,
            entries,
        })
    }

    /// Every referenced file exists.
    pub fn verify(&self) -> Result<()> {
        let missing: Vec<PathBuf> = self
            .entries
            .iter()
            .flat_map(|e| std::iter::once(&e.hr).chain(e.lr.iter()))
            .filter(|p| !p.is_file())
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingFiles(missing))
        }
    }

    /// Synthesizes and writes every missing LR image, then rewrites the
    /// index. Returns how many were created.
    pub fn ensure_lr(&mut self) -> Result<usize> {
        let dir = self.lr_dir();
        let mut created = 0;
        for i in 0..self.entries.len() {
            if self.entries[i].lr.is_some() {
                continue;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (hr, _) = read_raster(&self.entries[i].hr)?;
            let pair = make_pair(&hr.to_image(), self.scale)?;
            let path = dir.join(format!("{}.png", self.entries[i].name));
            save_png(&pair.lr, &path)?;
            self.entries[i].lr = Some(path);
            created += 1;
        }
        if created > 0 {
            self.write_index()?;
        }
        Ok(created)
    }

    /// Decodes entry `i`; HR is centre-cropped to a multiple of the scale and
    /// must then be exactly `scale×` the LR image.
    pub fn load(&self, i: usize) -> Result<StoredPair> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| Error::invalid(format!("entry {i} out of range")))?;
        let lr_path = e.lr.as_ref().ok_or_else(|| Error::MissingFiles(vec![self.lr_dir().join(format!("{}.png", e.name))]))?;
        let (hr, _) = read_raster(&e.hr)?;
        let hr = if hr.height % self.scale == 0 && hr.width % self.scale == 0 {
            hr
        } else {
            Raster8::from_image(&crop_to_multiple(&hr.to_image(), self.scale)?)
        };
        let (lr, _) = read_raster(lr_path)?;
        if hr.height != lr.height * self.scale || hr.width != lr.width * self.scale {
            return Err(Error::Image {
                path: lr_path.clone(),
                message: format!(
                    "LR {}x{} does not match HR {}x{} at x{}",
                    lr.height, lr.width, hr.height, hr.width, self.scale
                ),
            });
        }
        Ok(StoredPair {
            name: e.name.clone(),
            hr,
            lr,
            scale: self.scale,
        })
    }

    pub fn load_all(&self) -> Result<Vec<StoredPair>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
