//! Instance-embedding bags and their on-disk formats.
//!
//! WSDB is a little-endian binary layout:
//!
//! ```text
//! magic "WSDB" | version u16 = 1 | label u16 | n u32 | d u32   (16 bytes)
//! n × (row i32, col i32)
//! n × d f32, row-major
//! ```
//!
//! The CSV layout has a `row,col,f0,...,f{d-1}` header and one instance per
//! line; its label comes from the dataset manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WSDB_MAGIC: &[u8; 4] = b"WSDB";
pub const WSDB_VERSION: u16 = 1;
pub const WSDB_HEADER_BYTES: usize = 16;

/// One slide: `n` instance embeddings of width `dim`, their patch-grid
/// positions, and the slide label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    /// Row-major `n × dim`.
    pub embeddings: Vec<f64>,
    pub dim: usize,
    /// Patch-grid `(row, col)` per instance.
    pub coords: Vec<(i32, i32)>,
    pub label: usize,
}

impl Bag {
    pub fn new(
        id: impl Into<String>,
        embeddings: Vec<f64>,
        dim: usize,
        coords: Vec<(i32, i32)>,
        label: usize,
    ) -> Result<Self> {
        let bag = Bag {
            id: id.into(),
            embeddings,
            dim,
            coords,
            label,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Checks n ≥ 1, finite values, consistent sizes and unique coordinates.
    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::Data(format!("bag {:?} has no instances", self.id)));
        }
        if self.dim == 0 {
            return Err(Error::Data(format!("bag {:?} has zero feature width", self.id)));
        }
        if self.embeddings.len() != self.coords.len() * self.dim {
            return Err(Error::Data(format!(
                "bag {:?}: {} values for {} instances of width {}",
                self.id,
                self.embeddings.len(),
                self.coords.len(),
                self.dim
            )));
        }
        if let Some(i) = self.embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "bag {:?}: non-finite value in instance {}",
                self.id,
                i / self.dim
            )));
        }
        let mut seen = HashSet::with_capacity(self.coords.len());
        for c in &self.coords {
            if !seen.insert(*c) {
                return Err(Error::Data(format!("bag {:?}: duplicate coordinate {c:?}", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BagFormat {
    Wsdb,
    Csv,
}

impl BagFormat {
    /// WSDB iff the content starts with the magic bytes. A CSV bag always
    /// starts with its `row,col` header, so it can never be taken for WSDB.
    pub fn sniff(bytes: &[u8]) -> Self {
        if bytes.starts_with(WSDB_MAGIC) {
            BagFormat::Wsdb
        } else {
            BagFormat::Csv
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            BagFormat::Wsdb => "wsdb",
            BagFormat::Csv => "csv",
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a bag, detecting the format from its first bytes. CSV bags get
/// label 0 until the manifest assigns one.
pub fn read_bag(path: impl AsRef<Path>) -> Result<Bag> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = stem(path);
    match BagFormat::sniff(&bytes) {
        BagFormat::Wsdb => decode_wsdb(id, &bytes),
        BagFormat::Csv => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| Error::Format(format!("{}: not UTF-8 CSV", path.display())))?;
            decode_csv(id, text)
        }
    }
}

pub fn write_bag(bag: &Bag, path: impl AsRef<Path>, format: BagFormat) -> Result<()> {
    let path = path.as_ref();
    bag.validate()?;
    let bytes = match format {
        BagFormat::Wsdb => encode_wsdb(bag)?,
        BagFormat::Csv => encode_csv(bag).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// WSDB encoding. Features are narrowed to f32.
pub fn encode_wsdb(bag: &Bag) -> Result<Vec<u8>> {
    let label = u16::try_from(bag.label)
        .map_err(|_| Error::Data(format!("label {} does not fit in u16", bag.label)))?;
    let n = u32::try_from(bag.len()).map_err(|_| Error::Data("too many instances".into()))?;
    let d = u32::try_from(bag.dim).map_err(|_| Error::Data("feature width too large".into()))?;
    let mut out = Vec::with_capacity(WSDB_HEADER_BYTES + bag.len() * 8 + bag.embeddings.len() * 4);
    out.extend_from_slice(WSDB_MAGIC);
    out.extend_from_slice(&WSDB_VERSION.to_le_bytes());
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for &(r, c) in &bag.coords {
        out.extend_from_slice(&r.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
    }
    for &v in &bag.embeddings {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_wsdb(id: impl Into<String>, bytes: &[u8]) -> Result<Bag> {
    if bytes.len() < WSDB_HEADER_BYTES || &bytes[..4] != WSDB_MAGIC {
        return Err(Error::Format("missing WSDB magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != WSDB_VERSION {
        return Err(Error::Format(format!("unsupported WSDB version {version}")));
    }
    let label = u16_at(6) as usize;
    let n = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let expected = n
        .checked_mul(8)
        .and_then(|c| n.checked_mul(d).and_then(|f| f.checked_mul(4)).map(|f| (c, f)))
        .and_then(|(c, f)| (WSDB_HEADER_BYTES + c).checked_add(f))
        .ok_or_else(|| Error::Format("WSDB header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "WSDB payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut coords = Vec::with_capacity(n);
    let mut o = WSDB_HEADER_BYTES;
    for _ in 0..n {
        let r = i32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let c = i32::from_le_bytes(bytes[o + 4..o + 8].try_into().expect("4 bytes"));
        coords.push((r, c));
        o += 8;
    }
    let embeddings = bytes[o..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Bag::new(id, embeddings, d, coords, label)
}

pub fn encode_csv(bag: &Bag) -> String {
    let mut s = String::from("row,col");
    for j in 0..bag.dim {
        s.push_str(&format!(",f{j}"));
    }
    s.push('\n');
    for (i, &(r, c)) in bag.coords.iter().enumerate() {
        s.push_str(&format!("{r},{c}"));
        for v in bag.row(i) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

pub fn decode_csv(id: impl Into<String>, text: &str) -> Result<Bag> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "row" || cols[1] != "col" {
        return Err(Error::Format(format!("bad CSV header {header:?}")));
    }
    let dim = cols.len() - 2;
    for (j, name) in cols[2..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Format(format!("bad CSV header column {name:?}, expected f{j}")));
        }
    }
    let mut coords = Vec::new();
    let mut embeddings = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(Error::Format(format!(
                "CSV line {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                dim + 2
            )));
        }
        let int = |s: &str| {
            s.parse::<i32>()
                .map_err(|_| Error::Format(format!("CSV line {}: bad coordinate {s:?}", lineno + 2)))
        };
        coords.push((int(fields[0])?, int(fields[1])?));
        for f in &fields[2..] {
            let v = f
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("CSV line {}: bad value {f:?}", lineno + 2)))?;
            embeddings.push(v);
        }
    }
    Bag::new(id, embeddings, dim, coords, 0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub bags: Vec<BagEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.bags.iter().map(|b| b.label).collect()
    }
}

/// Loads every bag named by the manifest, checking that each file exists,
/// its width matches `feature_dim`, and its label is in range. Labels come
/// from the manifest.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.num_classes < 2 {
        return Err(Error::Data("manifest needs num_classes >= 2".into()));
    }
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for entry in &manifest.bags {
        let path: PathBuf = base.join(&entry.path);
        let mut bag = read_bag(&path)?;
        if bag.dim != manifest.feature_dim {
            return Err(Error::Data(format!(
                "{}: feature width {} != manifest feature_dim {}",
                path.display(),
                bag.dim,
                manifest.feature_dim
            )));
        }
        if entry.label >= manifest.num_classes {
            return Err(Error::Data(format!(
                "{}: label {} >= num_classes {}",
                path.display(),
                entry.label,
                manifest.num_classes
            )));
        }
        bag.label = entry.label;
        bags.push(bag);
    }
    Ok(Dataset { manifest, bags })
}
