//! On-disk artifact layout under the output directory.
//!
//! ```text
//! <out>/data/            binary data container (+ csv/ export)
//! <out>/checkpoints/<id> checkpoint containers, named by id prefix
//! <out>/vectors/<id>     LoRA vector containers
//! <out>/refs.json        role name -> artifact id
//! <out>/eval/            evaluation records, one file per model and score
//! <out>/report/          tables and plots
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trustlora_core::arithmetic::LoraVector;
use trustlora_core::checkpoint::{load_vector, save_vector, Checkpoint, Provenance};
use trustlora_core::container::{write_atomic, MANIFEST_FILE};
use trustlora_core::pipeline::EvalRecord;
use trustlora_core::wildbench::WildBench;
use trustlora_core::{Error, Result};

const ID_PREFIX: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Checkpoint,
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ref {
    pub kind: Kind,
    pub id: String,
}

pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn dir_for(&self, kind: Kind) -> PathBuf {
        self.root.join(match kind {
            Kind::Checkpoint => "checkpoints",
            Kind::Vector => "vectors",
        })
    }

    fn refs_path(&self) -> PathBuf {
        self.root.join("refs.json")
    }

    pub fn refs(&self) -> Result<BTreeMap<String, Ref>> {
        let path = self.refs_path();
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn set_ref(&self, name: &str, kind: Kind, id: &str) -> Result<()> {
        let mut refs = self.refs()?;
        refs.insert(
            name.to_string(),
            Ref {
                kind,
                id: id.to_string(),
            },
        );
        let text = serde_json::to_string_pretty(&refs).expect("refs serialize") + "\n";
        write_atomic(&self.refs_path(), text.as_bytes())
    }

    pub fn load_data(&self) -> Result<WildBench> {
        WildBench::load(&self.data_dir())
    }

    pub fn save_checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<String> {
        let id = ckpt.id();
        ckpt.save(&self.dir_for(Kind::Checkpoint).join(&id[..ID_PREFIX]))?;
        self.set_ref(name, Kind::Checkpoint, &id)?;
        Ok(id)
    }

    pub fn save_vector(&self, name: &str, vector: &LoraVector, prov: &Provenance) -> Result<()> {
        save_vector(&self.dir_for(Kind::Vector).join(&vector.id[..ID_PREFIX]), vector, prov)?;
        self.set_ref(name, Kind::Vector, &vector.id)
    }

    /// A reference is a container path, a role name from `refs.json`, or a
    /// unique id prefix.
    fn resolve(&self, kind: Kind, reference: &str) -> Result<PathBuf> {
        let as_path = Path::new(reference);
        if as_path.join(MANIFEST_FILE).is_file() {
            return Ok(as_path.to_path_buf());
        }
        let id = match self.refs()?.get(reference) {
            Some(r) if r.kind == kind => r.id.clone(),
            _ => reference.to_string(),
        };
        let dir = self.dir_for(kind);
        let mut hits = Vec::new();
        if let Ok(entries) = std::fs::read_dir(&dir) {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                let key = &id[..id.len().min(name.len())];
                if !key.is_empty() && name.starts_with(key) {
                    hits.push(e.path());
                }
            }
        }
        match hits.len() {
            1 => Ok(hits.pop().unwrap()),
            0 => Err(Error::Unresolved(reference.to_string())),
            n => Err(Error::Unresolved(format!("{reference} (matches {n} artifacts)"))),
        }
    }

    pub fn checkpoint(&self, reference: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.resolve(Kind::Checkpoint, reference)?)
    }

    pub fn vector(&self, reference: &str) -> Result<(LoraVector, Provenance)> {
        load_vector(&self.resolve(Kind::Vector, reference)?)
    }

    pub fn save_records(&self, model: &str, score: &str, records: &[EvalRecord]) -> Result<PathBuf> {
        let path = self
            .eval_dir()
            .join(format!("{}.{score}.json", model.replace(['/', '\\'], "_")));
        let text = serde_json::to_string_pretty(records).expect("records serialize") + "\n";
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Every stored record, files in name order.
    pub fn records(&self) -> Result<Vec<EvalRecord>> {
        let dir = self.eval_dir();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let recs: Vec<EvalRecord> =
                serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", f.display())))?;
            out.extend(recs);
        }
        Ok(out)
    }
}
