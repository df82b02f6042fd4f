//! Synthetic wild benchmark: Gaussian-blob classes, graded corruptions,
//! held-out semantic classes and auxiliary outliers.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_atomic, write_container, ArrayCursor};
use crate::error::{Error, Result};
use crate::objectives::Augmenter;
use crate::rng::{derive_seed, index, seeded, standard_normal, uniform, uniform_in, SeededRng};
use crate::tensor::Matrix;

pub mod mixture;

pub use mixture::{build_wild_mixture, MixtureCounts, Source, WildMixture};

pub const DATA_FORMAT: &str = "trustlora-data-1";

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "additive-gaussian")]
    AdditiveGaussian,
    #[serde(rename = "rotation")]
    Rotation,
    #[serde(rename = "scale")]
    Scale,
    #[serde(rename = "mask")]
    Mask,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::AdditiveGaussian, Family::Rotation, Family::Scale, Family::Mask];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::AdditiveGaussian => "additive-gaussian",
            Family::Rotation => "rotation",
            Family::Scale => "scale",
            Family::Mask => "mask",
        }
    }

    /// Magnitude per severity 0..=5; strictly increasing, 0 is the identity.
    ///
    /// * additive-gaussian: noise standard deviation;
    /// * rotation: angle in degrees, applied to coordinate pairs (0,1), (2,3), ...;
    /// * scale: `factor - 1`;
    /// * mask: probability that each coordinate is zeroed.
    pub fn schedule(self) -> [f64; 6] {
        match self {
            Family::AdditiveGaussian => [0.0, 0.1, 0.2, 0.35, 0.5, 0.7],
            Family::Rotation => [0.0, 5.0, 10.0, 20.0, 30.0, 45.0],
            Family::Scale => [0.0, 0.1, 0.2, 0.35, 0.5, 0.7],
            Family::Mask => [0.0, 0.05, 0.1, 0.2, 0.3, 0.4],
        }
    }

    pub fn magnitude(self, severity: u8) -> Result<f64> {
        self.schedule()
            .get(severity as usize)
            .copied()
            .ok_or_else(|| Error::config(format!("severity {severity} outside 0..={MAX_SEVERITY}")))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown corruption family `{s}`")))
    }
}

fn corrupt_row(row: &mut [f64], family: Family, magnitude: f64, rng: &mut SeededRng) {
    match family {
        Family::AdditiveGaussian => {
            for v in row.iter_mut() {
                *v += magnitude * standard_normal(rng);
            }
        }
        Family::Rotation => {
            let (s, c) = magnitude.to_radians().sin_cos();
            for pair in row.chunks_exact_mut(2) {
                let (x, y) = (pair[0], pair[1]);
                pair[0] = c * x - s * y;
                pair[1] = s * x + c * y;
            }
        }
        Family::Scale => {
            for v in row.iter_mut() {
                *v *= 1.0 + magnitude;
            }
        }
        Family::Mask => {
            for v in row.iter_mut() {
                if uniform(rng) < magnitude {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Applies one corruption family at one severity to every row. Severity 0
/// returns an exact copy.
pub fn corrupt(x: &Matrix, family: Family, severity: u8, rng: &mut SeededRng) -> Result<Matrix> {
    let magnitude = family.magnitude(severity)?;
    let mut out = x.clone();
    if severity == 0 {
        return Ok(out);
    }
    for r in 0..out.rows() {
        corrupt_row(out.row_mut(r), family, magnitude, rng);
    }
    Ok(out)
}

/// Training-time augmenter: each row gets one corruption drawn uniformly
/// from `families` at a severity drawn uniformly from `1..=max_severity`.
#[derive(Clone, Debug)]
pub struct CorruptionAugmenter {
    pub families: Vec<Family>,
    pub max_severity: u8,
}

impl Augmenter for CorruptionAugmenter {
    fn augment(&self, x: &Matrix, rng: &mut SeededRng) -> Result<Matrix> {
        if self.families.is_empty() || self.max_severity == 0 || self.max_severity > MAX_SEVERITY {
            return Err(Error::data("augmenter needs families and a severity in 1..=5"));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            let family = self.families[index(rng, self.families.len())];
            let severity = 1 + index(rng, self.max_severity as usize) as u8;
            corrupt_row(out.row_mut(r), family, family.magnitude(severity)?, rng);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuxSource {
    /// Uniform draws from a box, excluding balls around the semantic centers.
    #[serde(rename = "uniform-box")]
    UniformBox,
    /// Blobs at centers far from both the known and the semantic centers.
    #[serde(rename = "disjoint-blobs")]
    DisjointBlobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WildBenchConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_sem: usize,
    pub n_aux: usize,
    /// Class centers are drawn uniformly from `[-center_box, center_box]^d`.
    pub center_box: f64,
    /// Minimum distance between two known-class centers.
    pub center_min_separation: f64,
    pub blob_std: f64,
    pub sem_classes: usize,
    /// Minimum distance from a semantic center to every known center.
    pub sem_min_distance: f64,
    /// Semantic centers are drawn from `[-sem_box, sem_box]^d`.
    pub sem_box: f64,
    pub families: Vec<Family>,
    pub severities: Vec<u8>,
    pub aux_source: AuxSource,
    /// Half-width of the auxiliary sampling box.
    pub aux_box: f64,
    /// Auxiliary samples stay at least this far from every semantic center.
    pub aux_exclusion: f64,
    /// Uniform-box auxiliary samples also stay this far from every known
    /// center; 0 lets them overlap the known classes.
    pub aux_id_exclusion: f64,
    pub aux_blobs: usize,
    pub seed: u64,
}

impl Default for WildBenchConfig {
    fn default() -> Self {
        WildBenchConfig {
            num_classes: 6,
            input_dim: 8,
            n_train: 8000,
            n_test: 2000,
            n_sem: 1000,
            n_aux: 2000,
            center_box: 1.5,
            center_min_separation: 1.0,
            blob_std: 1.0,
            sem_classes: 6,
            sem_min_distance: 1.25,
            sem_box: 1.5,
            families: Family::ALL.to_vec(),
            severities: vec![1, 2, 3],
            aux_source: AuxSource::UniformBox,
            aux_box: 3.0,
            aux_exclusion: 0.75,
            aux_id_exclusion: 0.0,
            aux_blobs: 4,
            seed: 0,
        }
    }
}

impl WildBenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.input_dim == 0 {
            return Err(Error::config("need at least 2 classes and 1 input dimension"));
        }
        if self.n_train == 0 || self.n_test == 0 || self.n_sem == 0 || self.n_aux == 0 || self.sem_classes == 0 {
            return Err(Error::config("every split needs at least one sample"));
        }
        if self.severities.iter().any(|&s| s > MAX_SEVERITY) {
            return Err(Error::config(format!("severities must lie in 0..={MAX_SEVERITY}")));
        }
        if !(self.blob_std > 0.0 && self.center_box > 0.0 && self.sem_box > 0.0 && self.aux_box > 0.0) {
            return Err(Error::config("blob_std and the box half-widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    IdTrain,
    IdTest,
    CovTest { family: Family, severity: u8 },
    SemTest,
    Aux,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::IdTrain => f.write_str("id-train"),
            Origin::IdTest => f.write_str("id-test"),
            Origin::CovTest { family, severity } => write!(f, "cov-test:{family}:{severity}"),
            Origin::SemTest => f.write_str("sem-test"),
            Origin::Aux => f.write_str("aux"),
        }
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "id-train" => Origin::IdTrain,
            "id-test" => Origin::IdTest,
            "sem-test" => Origin::SemTest,
            "aux" => Origin::Aux,
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                match parts.as_slice() {
                    ["cov-test", family, severity] => Origin::CovTest {
                        family: family.parse()?,
                        severity: severity
                            .parse()
                            .map_err(|_| Error::data(format!("bad severity in origin `{other}`")))?,
                    },
                    _ => return Err(Error::data(format!("unknown origin `{other}`"))),
                }
            }
        })
    }
}

/// Inputs with their labels; `None` marks a sample outside the known classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub origin: Origin,
    pub inputs: Matrix,
    pub labels: Vec<Option<usize>>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Class labels; fails if any sample lacks one.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| l.ok_or_else(|| Error::data(format!("{} contains unlabeled samples", self.origin))))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let d = self.inputs.cols();
        let mut out = String::new();
        for j in 0..d {
            out.push_str(&format!("x{j},"));
        }
        out.push_str("label,origin\n");
        for r in 0..self.len() {
            for v in self.inputs.row(r) {
                out.push_str(&format!("{v:.16e},"));
            }
            match self.labels[r] {
                Some(y) => out.push_str(&y.to_string()),
                None => out.push_str("ood"),
            }
            out.push(',');
            out.push_str(&self.origin.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<LabeledSet> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::data("empty CSV"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "origin" {
            return Err(Error::data("CSV header must be x0..xd,label,origin"));
        }
        let d = cols.len() - 2;
        for (j, c) in cols[..d].iter().enumerate() {
            if *c != format!("x{j}") {
                return Err(Error::data(format!("unexpected CSV column `{c}`")));
            }
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut origin = None;
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(Error::data(format!("CSV row {} has {} fields", n + 1, fields.len())));
            }
            for f in &fields[..d] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::data(format!("bad number `{f}` on CSV row {}", n + 1)))?,
                );
            }
            labels.push(match fields[d] {
                "ood" => None,
                y => Some(
                    y.parse()
                        .map_err(|_| Error::data(format!("bad label `{y}` on CSV row {}", n + 1)))?,
                ),
            });
            let o: Origin = fields[d + 1].parse()?;
            if *origin.get_or_insert(o) != o {
                return Err(Error::data("CSV mixes origins"));
            }
        }
        let origin = origin.ok_or_else(|| Error::data("CSV has no rows"))?;
        Ok(LabeledSet {
            origin,
            inputs: Matrix::from_vec(labels.len(), d, data)?,
            labels,
        })
    }
}

/// Every split of one generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct WildBench {
    pub config_hash: String,
    pub id_centers: Matrix,
    pub sem_centers: Matrix,
    pub id_train: LabeledSet,
    pub id_test: LabeledSet,
    /// One set per `(family, severity)`, families outer.
    pub cov_tests: Vec<LabeledSet>,
    pub sem_test: LabeledSet,
    pub aux: LabeledSet,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

fn place_centers(
    rng: &mut SeededRng,
    count: usize,
    d: usize,
    half: f64,
    accept: impl Fn(&[f64], &[Vec<f64>]) -> bool,
    what: &str,
) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while centers.len() < count {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::config(format!(
                "cannot place {count} {what} centers: placed {} after {PLACEMENT_ATTEMPTS} attempts in box half-width {half}",
                centers.len()
            )));
        }
        let c: Vec<f64> = (0..d).map(|_| uniform_in(rng, -half, half)).collect();
        if accept(&c, &centers) {
            centers.push(c);
        }
    }
    Ok(centers)
}

fn blob_samples(rng: &mut SeededRng, centers: &[Vec<f64>], n: usize, std: f64) -> (Matrix, Vec<usize>) {
    let d = centers[0].len();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = index(rng, centers.len());
        for &c in &centers[k] {
            data.push(c + std * standard_normal(rng));
        }
        labels.push(k);
    }
    (Matrix::from_vec(n, d, data).expect("finite samples"), labels)
}

fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).expect("finite centers")
}

pub fn config_hash(config: &WildBenchConfig) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    crate::container::sha256_hex(text.as_bytes())
}

/// Generates every split. Each split draws from its own derived seed.
pub fn generate(config: &WildBenchConfig) -> Result<WildBench> {
    config.validate()?;
    let d = config.input_dim;
    let mut geo = seeded(derive_seed(config.seed, "centers"));
    let sep = config.center_min_separation;
    let id_centers = place_centers(
        &mut geo,
        config.num_classes,
        d,
        config.center_box,
        |c, placed| placed.iter().all(|p| dist(c, p) >= sep),
        "known-class",
    )?;
    let delta = config.sem_min_distance;
    let sem_centers = place_centers(
        &mut geo,
        config.sem_classes,
        d,
        config.sem_box,
        |c, placed| id_centers.iter().all(|p| dist(c, p) >= delta) && placed.iter().all(|p| dist(c, p) >= sep),
        "semantic",
    )?;

    let labeled = |origin: Origin, (inputs, labels): (Matrix, Vec<usize>)| LabeledSet {
        origin,
        inputs,
        labels: labels.into_iter().map(Some).collect(),
    };
    let id_train = labeled(
        Origin::IdTrain,
        blob_samples(
            &mut seeded(derive_seed(config.seed, "id-train")),
            &id_centers,
            config.n_train,
            config.blob_std,
        ),
    );
    let id_test = labeled(
        Origin::IdTest,
        blob_samples(
            &mut seeded(derive_seed(config.seed, "id-test")),
            &id_centers,
            config.n_test,
            config.blob_std,
        ),
    );

    let mut cov_tests = Vec::new();
    for &family in &config.families {
        for &severity in &config.severities {
            let mut rng = seeded(derive_seed(config.seed, &format!("cov:{family}:{severity}")));
            cov_tests.push(LabeledSet {
                origin: Origin::CovTest { family, severity },
                inputs: corrupt(&id_test.inputs, family, severity, &mut rng)?,
                labels: id_test.labels.clone(),
            });
        }
    }

    let (sem_inputs, _) = blob_samples(
        &mut seeded(derive_seed(config.seed, "sem-test")),
        &sem_centers,
        config.n_sem,
        config.blob_std,
    );
    let sem_test = LabeledSet {
        origin: Origin::SemTest,
        inputs: sem_inputs,
        labels: vec![None; config.n_sem],
    };

    let mut aux_rng = seeded(derive_seed(config.seed, "aux"));
    let aux_inputs = match config.aux_source {
        AuxSource::UniformBox => {
            let mut data = Vec::with_capacity(config.n_aux * d);
            let mut kept = 0;
            let mut attempts = 0usize;
            while kept < config.n_aux {
                attempts += 1;
                if attempts > PLACEMENT_ATTEMPTS * config.n_aux.max(1) {
                    return Err(Error::config(format!(
                        "auxiliary box of half-width {} is covered by the semantic exclusion zones",
                        config.aux_box
                    )));
                }
                let p: Vec<f64> = (0..d)
                    .map(|_| uniform_in(&mut aux_rng, -config.aux_box, config.aux_box))
                    .collect();
                if sem_centers.iter().all(|c| dist(&p, c) >= config.aux_exclusion)
                    && id_centers.iter().all(|c| dist(&p, c) >= config.aux_id_exclusion)
                {
                    data.extend(p);
                    kept += 1;
                }
            }
            Matrix::from_vec(config.n_aux, d, data)?
        }
        AuxSource::DisjointBlobs => {
            let excl = config.aux_exclusion;
            let aux_centers = place_centers(
                &mut geo,
                config.aux_blobs.max(1),
                d,
                config.aux_box,
                |c, _| {
                    id_centers.iter().all(|p| dist(c, p) >= delta)
                        && sem_centers.iter().all(|p| dist(c, p) >= excl + delta)
                },
                "auxiliary",
            )?;
            blob_samples(&mut aux_rng, &aux_centers, config.n_aux, config.blob_std).0
        }
    };
    let aux = LabeledSet {
        origin: Origin::Aux,
        inputs: aux_inputs,
        labels: vec![None; config.n_aux],
    };

    Ok(WildBench {
        config_hash: config_hash(config),
        id_centers: to_matrix(&id_centers),
        sem_centers: to_matrix(&sem_centers),
        id_train,
        id_test,
        cov_tests,
        sem_test,
        aux,
    })
}

#[derive(Serialize, Deserialize)]
struct SetEntry {
    origin: String,
    labels: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct DataManifest {
    config_hash: String,
    sets: Vec<SetEntry>,
}

impl WildBench {
    pub fn sets(&self) -> Vec<&LabeledSet> {
        let mut out = vec![&self.id_train, &self.id_test];
        out.extend(self.cov_tests.iter());
        out.push(&self.sem_test);
        out.push(&self.aux);
        out
    }

    pub fn cov_test(&self, family: Family, severity: u8) -> Result<&LabeledSet> {
        self.cov_tests
            .iter()
            .find(|s| s.origin == Origin::CovTest { family, severity })
            .ok_or_else(|| Error::Unresolved(format!("cov-test:{family}:{severity}")))
    }

    /// Writes the binary container.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut arrays: Vec<(String, &Matrix)> = vec![
            ("id_centers".into(), &self.id_centers),
            ("sem_centers".into(), &self.sem_centers),
        ];
        let mut sets = Vec::new();
        for s in self.sets() {
            arrays.push((s.origin.to_string(), &s.inputs));
            sets.push(SetEntry {
                origin: s.origin.to_string(),
                labels: s.labels.iter().map(|l| l.map_or(-1, |y| y as i64)).collect(),
            });
        }
        let manifest = DataManifest {
            config_hash: self.config_hash.clone(),
            sets,
        };
        write_container(dir, DATA_FORMAT, &manifest, &arrays)
    }

    pub fn load(dir: &Path) -> Result<WildBench> {
        let (manifest, arrays): (DataManifest, _) = read_container(dir, DATA_FORMAT)?;
        let mut cursor = ArrayCursor::new(arrays);
        let id_centers = cursor.take("id_centers", None, "id_centers")?;
        let sem_centers = cursor.take("sem_centers", None, "sem_centers")?;
        let mut sets = Vec::new();
        for entry in manifest.sets {
            let inputs = cursor.take(&entry.origin, None, "sets")?;
            if inputs.rows() != entry.labels.len() {
                return Err(crate::error::LoadError::ManifestMismatch {
                    field: format!("sets[{}].labels", entry.origin),
                    expected: inputs.rows().to_string(),
                    found: entry.labels.len().to_string(),
                }
                .into());
            }
            sets.push(LabeledSet {
                origin: entry.origin.parse()?,
                inputs,
                labels: entry.labels.iter().map(|&y| (y >= 0).then_some(y as usize)).collect(),
            });
        }
        cursor.finish()?;
        WildBench::from_sets(manifest.config_hash, id_centers, sem_centers, sets)
    }

    fn from_sets(
        config_hash: String,
        id_centers: Matrix,
        sem_centers: Matrix,
        sets: Vec<LabeledSet>,
    ) -> Result<WildBench> {
        let mut id_train = None;
        let mut id_test = None;
        let mut sem_test = None;
        let mut aux = None;
        let mut cov_tests = Vec::new();
        for s in sets {
            match s.origin {
                Origin::IdTrain => id_train = Some(s),
                Origin::IdTest => id_test = Some(s),
                Origin::SemTest => sem_test = Some(s),
                Origin::Aux => aux = Some(s),
                Origin::CovTest { .. } => cov_tests.push(s),
            }
        }
        let missing = |name: &str| Error::data(format!("data container lacks the {name} split"));
        Ok(WildBench {
            config_hash,
            id_centers,
            sem_centers,
            id_train: id_train.ok_or_else(|| missing("id-train"))?,
            id_test: id_test.ok_or_else(|| missing("id-test"))?,
            cov_tests,
            sem_test: sem_test.ok_or_else(|| missing("sem-test"))?,
            aux: aux.ok_or_else(|| missing("aux"))?,
        })
    }

    /// Writes one CSV per split plus the centers, named by origin.
    pub fn save_csv(&self, dir: &Path) -> Result<()> {
        for s in self.sets() {
            let name = s.origin.to_string().replace(':', "_");
            write_atomic(&dir.join(format!("{name}.csv")), s.to_csv().as_bytes())?;
        }
        Ok(())
    }

    /// Reads the CSV export; centers are not part of it and load as empty.
    pub fn load_csv(dir: &Path, config_hash: &str) -> Result<WildBench> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        entries.sort();
        let mut sets = Vec::new();
        for p in entries {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            sets.push(LabeledSet::from_csv(&text)?);
        }
        // Restore generation order: families outer, severities inner.
        sets.sort_by_key(|s| s.origin);
        WildBench::from_sets(config_hash.to_string(), Matrix::zeros(0, 0), Matrix::zeros(0, 0), sets)
    }
}
