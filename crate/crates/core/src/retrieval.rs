//! Image database, exhaustive nearest-neighbor search and classifier re-ranking.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::event_io::{GeoTag, Modality, SampleRecord};
use crate::frame::{load_frame, ImageFrame};
use crate::model::{fingerprint_hex, Descriptors, Fingerprint, Model};

const DB_MAGIC: &[u8; 4] = b"XVDB";
const DB_VERSION: u8 = 1;
pub const DEFAULT_TOP_N: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub id: String,
    pub geotag: GeoTag,
    pub retrieval: Vec<f64>,
    pub cls: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaceDatabase {
    pub fingerprint: Fingerprint,
    pub entries: Vec<DbEntry>,
}

/// Loads the frame a record points to at the model's input size.
pub fn load_input(model: &Model, record: &SampleRecord) -> Result<ImageFrame> {
    load_frame(
        &record.path,
        Model::channels(record.modality),
        model.config.input_height,
        model.config.input_width,
    )
}

impl PlaceDatabase {
    pub fn new(fingerprint: Fingerprint) -> Self {
        Self {
            fingerprint,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        let found = model.fingerprint();
        if found != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: fingerprint_hex(&self.fingerprint),
                found: fingerprint_hex(&found),
            });
        }
        Ok(())
    }

    /// Appends the entries of a database built by the same checkpoint.
    pub fn extend(&mut self, other: PlaceDatabase) -> Result<()> {
        if other.fingerprint != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: fingerprint_hex(&self.fingerprint),
                found: fingerprint_hex(&other.fingerprint),
            });
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DB_MAGIC);
        w.u8(DB_VERSION);
        w.u64(self.entries.len() as u64);
        w.bytes(&self.fingerprint);
        for e in &self.entries {
            w.str(&e.id);
            w.f64(e.geotag.lat);
            w.f64(e.geotag.lon);
            w.f64s(&e.retrieval);
            w.f64s(&e.cls);
        }
        w.finish()
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        if r.bytes(4)? != DB_MAGIC {
            return Err(r.error("not a database file"));
        }
        let version = r.u8()?;
        if version != DB_VERSION {
            return Err(r.error(format!("unsupported database version {version}")));
        }
        let count = r.len(1)?;
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(r.bytes(32)?);
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.str()?;
            let (lat, lon) = (r.f64()?, r.f64()?);
            entries.push(DbEntry {
                id,
                geotag: GeoTag::new(lat, lon),
                retrieval: r.f64s()?,
                cls: r.f64s()?,
            });
        }
        r.expect_end()?;
        Ok(Self {
            fingerprint,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

/// Encodes every image record of the manifest, in manifest order.
pub fn build_db(records: &[SampleRecord], model: &Model) -> Result<PlaceDatabase> {
    let images: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| r.modality == Modality::Image)
        .collect();
    let entries = images
        .par_iter()
        .map(|r| {
            let frame = load_input(model, r)?;
            let Descriptors { retrieval, cls } = model.describe(&frame, Modality::Image)?;
            Ok(DbEntry {
                id: r.id.clone(),
                geotag: r.geotag,
                retrieval,
                cls,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PlaceDatabase {
        fingerprint: model.fingerprint(),
        entries,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Position in the database.
    pub index: usize,
    pub id: String,
    pub distance: f64,
    /// Classifier similarity, present after re-ranking.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query_id: String,
    /// Final ranking, best first.
    pub candidates: Vec<Candidate>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The `top_n` nearest entries by Euclidean distance, nearest first; ties
/// resolve by id, then by database position.
pub fn search(db: &PlaceDatabase, query: &[f64], top_n: usize) -> Result<Vec<Candidate>> {
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    let mut scored = Vec::with_capacity(db.len());
    for (i, e) in db.entries.iter().enumerate() {
        if e.retrieval.len() != query.len() {
            return Err(Error::shape(
                "search",
                format!(
                    "query length {}, entry {} has {}",
                    query.len(),
                    e.id,
                    e.retrieval.len()
                ),
            ));
        }
        scored.push((euclidean(query, &e.retrieval), i));
    }
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| db.entries[a.1].id.cmp(&db.entries[b.1].id))
            .then(a.1.cmp(&b.1))
    });
    Ok(scored
        .into_iter()
        .take(top_n)
        .map(|(distance, index)| Candidate {
            index,
            id: db.entries[index].id.clone(),
            distance,
            score: None,
        })
        .collect())
}

fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    let (sa, sb) = (a.score.unwrap_or(f64::NAN), b.score.unwrap_or(f64::NAN));
    sb.total_cmp(&sa)
        .then(a.distance.total_cmp(&b.distance))
        .then_with(|| a.id.cmp(&b.id))
}

/// Scores every candidate with the pair classifier and orders them by score
/// descending, then distance ascending, then id.
pub fn rerank(
    db: &PlaceDatabase,
    model: &Model,
    query_cls: &[f64],
    candidates: Vec<Candidate>,
) -> Result<Vec<Candidate>> {
    db.check_model(model)?;
    let mut scored = candidates
        .into_iter()
        .map(|mut c| {
            let entry = db.entries.get(c.index).ok_or_else(|| {
                Error::invalid(format!("candidate {} is not in the database", c.id))
            })?;
            c.score = Some(model.score(query_cls, &entry.cls)?);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(rank_order);
    Ok(scored)
}

/// Encode, search and optionally re-rank one query frame.
pub fn query(
    db: &PlaceDatabase,
    model: &Model,
    query_id: &str,
    frame: &ImageFrame,
    modality: Modality,
    top_n: usize,
    rerank_candidates: bool,
) -> Result<QueryResult> {
    db.check_model(model)?;
    let d = model.describe(frame, modality)?;
    let mut candidates = search(db, &d.retrieval, top_n)?;
    if rerank_candidates && !candidates.is_empty() {
        candidates = rerank(db, model, &d.cls, candidates)?;
    }
    Ok(QueryResult {
        query_id: query_id.to_string(),
        candidates,
    })
}

/// CSV `query_id,rank,candidate_id,distance,score`; rank starts at 1 and
/// the score column is empty for retrieval-only results.
pub fn format_results_csv(results: &[QueryResult]) -> String {
    let mut out = String::from("query_id,rank,candidate_id,distance,score\n");
    for r in results {
        for (i, c) in r.candidates.iter().enumerate() {
            let score = c.score.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.query_id,
                i + 1,
                c.id,
                c.distance,
                score
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    fn random_db(n: usize, seed: u64) -> PlaceDatabase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PlaceDatabase {
            fingerprint: [3; 32],
            entries: (0..n)
                .map(|i| DbEntry {
                    id: format!("img{i:04}"),
                    geotag: GeoTag::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    retrieval: unit(&mut rng, 8),
                    cls: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                })
                .collect(),
        }
    }

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            input_width: 8,
            input_height: 6,
            backbone_channels: vec![2],
            head_dim: 2,
            clusters: 4,
            cls_channels: 2,
            cls_dim: 4,
            sketch_dim: 8,
            classifier_hidden: [4, 3],
            signed_sqrt: true,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn database_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let db = random_db(10, 1);
        let p = dir.path().join("a.db");
        db.save(&p).unwrap();
        assert_eq!(PlaceDatabase::load(&p).unwrap(), db);
        let empty = PlaceDatabase::new([0; 32]);
        empty.save(&p).unwrap();
        assert!(PlaceDatabase::load(&p).unwrap().is_empty());
        let bytes = db.to_bytes();
        assert!(PlaceDatabase::from_bytes(&p, &bytes[..bytes.len() - 1]).is_err());
        let mut other = PlaceDatabase::new([9; 32]);
        assert!(other.extend(db.clone()).is_err());
    }

    #[test]
    fn search_cases() {
        let db = random_db(20, 2);
        let q = db.entries[7].retrieval.clone();
        let hits = search(&db, &q, 5).unwrap();
        assert_eq!(hits[0].id, "img0007");
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(search(&db, &q, 100).unwrap().len(), 20);
        assert!(search(&db, &q, 0).is_err());
        assert!(search(&PlaceDatabase::new([0; 32]), &q, 3)
            .unwrap()
            .is_empty());
        assert!(search(&db, &q[..3], 3).is_err());
    }

    #[test]
    fn search_matches_sort_oracle() {
        let db = random_db(1000, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let q = unit(&mut rng, 8);
        let got: Vec<usize> = search(&db, &q, 1000)
            .unwrap()
            .iter()
            .map(|c| c.index)
            .collect();
        let mut oracle: Vec<(f64, usize)> = db
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d: f64 = e
                    .retrieval
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                (d, i)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert_eq!(got, oracle.iter().map(|o| o.1).collect::<Vec<_>>());
    }

    #[test]
    fn rerank_orders_by_score_and_keeps_the_set() {
        let model = tiny_model();
        let mut db = random_db(20, 4);
        db.fingerprint = model.fingerprint();
        let q: Vec<f64> = vec![0.3, -0.2, 0.9, 0.1];
        let cands = search(&db, &db.entries[0].retrieval.clone(), 20).unwrap();
        let out = rerank(&db, &model, &q, cands.clone()).unwrap();
        let mut ids_in: Vec<_> = cands.iter().map(|c| c.id.clone()).collect();
        let mut ids_out: Vec<_> = out.iter().map(|c| c.id.clone()).collect();
        ids_in.sort();
        ids_out.sort();
        assert_eq!(ids_in, ids_out);
        let mut scores: Vec<f64> = out.iter().map(|c| c.score.unwrap()).collect();
        let got = scores.clone();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(got, scores);
        let one = rerank(&db, &model, &q, cands[..1].to_vec()).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn zero_classifier_falls_back_to_distance_order() {
        let mut model = tiny_model();
        for p in model.store.iter_mut() {
            if p.name.starts_with("classifier.") {
                p.value.fill(0.0);
            }
        }
        let mut db = random_db(15, 5);
        db.fingerprint = model.fingerprint();
        let cands = search(&db, &db.entries[3].retrieval.clone(), 15).unwrap();
        let out = rerank(&db, &model, &[1.0, 0.0, 0.0, 0.0], cands.clone()).unwrap();
        assert!(out.iter().all(|c| c.score == Some(0.5)));
        let a: Vec<_> = cands.iter().map(|c| &c.id).collect();
        let b: Vec<_> = out.iter().map(|c| &c.id).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let model = tiny_model();
        let db = random_db(3, 6);
        let r = rerank(
            &db,
            &model,
            &[0.0; 4],
            search(&db, &db.entries[0].retrieval, 2).unwrap(),
        );
        assert!(matches!(r, Err(Error::Fingerprint { .. })));
    }

    #[test]
    fn csv_layout() {
        let r = QueryResult {
            query_id: "q".into(),
            candidates: vec![Candidate {
                index: 0,
                id: "a".into(),
                distance: 0.5,
                score: Some(0.25),
            }],
        };
        assert_eq!(
            format_results_csv(&[r]),
            "query_id,rank,candidate_id,distance,score\nq,1,a,0.5,0.25\n"
        );
    }
}
