//! Descriptor database, exact nearest-neighbor search and Recall@k.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::embed::GlobalDescriptor;
use crate::error::{Error, Result};
use crate::metric::{PlaceRecord, Thresholds};

const MAGIC: &[u8; 4] = b"AEGD";
const VERSION: u32 = 1;
/// Descriptor length stored in database files.
pub const FILE_DESCRIPTOR_DIM: usize = 256;
/// Cut-offs reported by [`evaluate`].
pub const RECALL_KS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub record: PlaceRecord,
    /// Stored at file precision (values are exact `f32`s).
    pub descriptor: Vec<f64>,
}

/// Keyframe descriptors with their place records; ids are unique.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorDatabase {
    dim: usize,
    entries: Vec<DbEntry>,
    by_id: HashMap<u32, usize>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl DescriptorDatabase {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new(), by_id: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn get(&self, id: u32) -> Option<&DbEntry> {
        self.by_id.get(&id).map(|&i| &self.entries[i])
    }

    /// Add a unit-norm descriptor, rounded to file precision.
    pub fn insert(&mut self, record: PlaceRecord, descriptor: &GlobalDescriptor) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::dim(format!(
                "descriptor has {} values, database holds {}",
                descriptor.len(),
                self.dim
            )));
        }
        let norm = descriptor.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::usage(format!("descriptor of keyframe {} has norm {norm}", record.id)));
        }
        if self.by_id.contains_key(&record.id) {
            return Err(Error::usage(format!("duplicate keyframe id {}", record.id)));
        }
        self.by_id.insert(record.id, self.entries.len());
        let descriptor = descriptor.as_slice().iter().map(|&v| v as f32 as f64).collect();
        self.entries.push(DbEntry { record, descriptor });
        Ok(())
    }

    /// The `k` nearest entries by Euclidean distance, ascending, ties to the
    /// lower id.
    pub fn query_knn(&self, descriptor: &[f64], k: usize) -> Result<Vec<(u32, f64)>> {
        self.query_knn_excluding(descriptor, k, None)
    }

    pub fn query_knn_excluding(&self, descriptor: &[f64], k: usize, exclude: Option<u32>) -> Result<Vec<(u32, f64)>> {
        if self.entries.is_empty() {
            return Err(Error::usage("query against an empty database"));
        }
        if k == 0 {
            return Err(Error::usage("k must be at least 1"));
        }
        if descriptor.len() != self.dim {
            return Err(Error::dim(format!("query has {} values, database holds {}", descriptor.len(), self.dim)));
        }
        let mut hits: Vec<(u32, f64)> = self
            .entries
            .iter()
            .filter(|e| Some(e.record.id) != exclude)
            .map(|e| (e.record.id, dist(descriptor, &e.descriptor)))
            .collect();
        hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dim != FILE_DESCRIPTOR_DIM {
            return Err(Error::usage(format!(
                "database files hold {FILE_DESCRIPTOR_DIM}-value descriptors, this one has {}",
                self.dim
            )));
        }
        let mut w = Writer::default();
        w.raw(MAGIC);
        w.u32(VERSION);
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.u32(e.record.id);
            w.string(&e.record.room)?;
            for &c in &e.record.centroid {
                w.f32(c as f32);
            }
            for &v in &e.descriptor {
                w.f32(v as f32);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let count = r.u32("entry count")?;
        let mut db = Self::new(FILE_DESCRIPTOR_DIM);
        for _ in 0..count {
            let at = r.offset();
            let id = r.u32("keyframe id")?;
            let room = r.string("room id")?;
            let mut centroid = [0.0; 3];
            for c in &mut centroid {
                *c = r.f32("centroid")? as f64;
            }
            let mut descriptor = Vec::with_capacity(FILE_DESCRIPTOR_DIM);
            for _ in 0..FILE_DESCRIPTOR_DIM {
                descriptor.push(r.f32("descriptor")? as f64);
            }
            if centroid.iter().chain(&descriptor).any(|v| !v.is_finite()) {
                return Err(Error::format(at, format!("entry {id} holds non-finite values")));
            }
            if db.by_id.contains_key(&id) {
                return Err(Error::format(at, format!("duplicate keyframe id {id}")));
            }
            db.by_id.insert(id, db.entries.len());
            db.entries.push(DbEntry { record: PlaceRecord { id, room, centroid }, descriptor });
        }
        r.finish()?;
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Recall percentages at k = 1, 2, 3 with the retrieved ids of every query.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    pub recall: [f64; 3],
    pub n_queries: usize,
    /// (query id, top-3 retrieved ids) per query.
    pub top: Vec<(u32, Vec<u32>)>,
}

impl RecallReport {
    /// `R@1,R@2,R@3,n_queries`.
    pub fn line(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{}",
            self.recall[0], self.recall[1], self.recall[2], self.n_queries
        )
    }
}

impl fmt::Display for RecallReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>9}", "k", "recall %")?;
        for (k, r) in RECALL_KS.iter().zip(&self.recall) {
            writeln!(f, "{:<6} {:>9.2}", format!("R@{k}"), r)?;
        }
        write!(f, "queries {}", self.n_queries)
    }
}

/// Leave-self-out retrieval: each query searches the database without its
/// own entry and counts as recalled at k when any of the first k results is
/// a positive of the query.
pub fn evaluate(
    queries: &[(GlobalDescriptor, PlaceRecord)],
    db: &DescriptorDatabase,
    thresholds: &Thresholds,
) -> Result<RecallReport> {
    if queries.is_empty() {
        return Err(Error::usage("no queries to evaluate"));
    }
    let kmax = RECALL_KS[RECALL_KS.len() - 1];
    let mut hits = [0usize; 3];
    let mut top = Vec::with_capacity(queries.len());
    for (desc, rec) in queries {
        if db.get(rec.id).is_none() {
            return Err(Error::usage(format!("query keyframe {} is not in the database", rec.id)));
        }
        if db.len() < 2 {
            return Err(Error::usage(format!(
                "excluding keyframe {} leaves no candidates in the database",
                rec.id
            )));
        }
        let found = db.query_knn_excluding(desc.as_slice(), kmax, Some(rec.id))?;
        let first = found
            .iter()
            .position(|(id, _)| thresholds.is_positive(rec, &db.get(*id).expect("id from db").record));
        for (h, &k) in hits.iter_mut().zip(&RECALL_KS) {
            if first.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
        top.push((rec.id, found.iter().map(|(id, _)| *id).collect()));
    }
    let n = queries.len();
    Ok(RecallReport {
        recall: hits.map(|h| 100.0 * h as f64 / n as f64),
        n_queries: n,
        top,
    })
}

/// Use every database entry as a query against the rest of the database.
pub fn evaluate_database(db: &DescriptorDatabase, thresholds: &Thresholds) -> Result<RecallReport> {
    let queries: Vec<(GlobalDescriptor, PlaceRecord)> = db
        .entries()
        .iter()
        .map(|e| (GlobalDescriptor(e.descriptor.clone()), e.record.clone()))
        .collect();
    evaluate(&queries, db, thresholds)
}
