//! The two-branch encoder, the pair classifier and the checkpoint format.
//!
//! Each modality has its own convolutional backbone. Both share a retrieval
//! head (three convolutions followed by NetVLAD aggregation) and a
//! classification head (three convolutions and one dense layer). The
//! classifier scores a query/candidate pair of classification descriptors
//! after compact bilinear fusion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::event_io::Modality;
use crate::frame::{standardize, ImageFrame};
use crate::fusion::{fuse_on_tape, Classifier, CountSketch, SketchPair};
use crate::layers::{uniform_init, Conv, Dense};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"XVPR";
const CHECKPOINT_VERSION: u8 = 1;
const KMEANS_ITERATIONS: usize = 10;
/// Soft-assignment sharpness after k-means, relative to the mean squared
/// distance between local features and their nearest center.
const ASSIGN_SHARPNESS: f64 = 4.0;

pub type Fingerprint = [u8; 32];

pub fn fingerprint_hex(f: &Fingerprint) -> String {
    f.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// Output channels of each stride-2 backbone convolution.
    pub backbone_channels: Vec<usize>,
    /// Local feature dimension fed to NetVLAD.
    pub head_dim: usize,
    pub clusters: usize,
    pub cls_channels: usize,
    pub cls_dim: usize,
    /// Fused descriptor length; a power of two.
    pub sketch_dim: usize,
    pub classifier_hidden: [usize; 2],
    pub signed_sqrt: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_width: 48,
            input_height: 36,
            backbone_channels: vec![16, 32, 64],
            head_dim: 16,
            clusters: 8,
            cls_channels: 16,
            cls_dim: 128,
            sketch_dim: 1024,
            classifier_hidden: [64, 16],
            signed_sqrt: false,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_width", self.input_width),
            ("input_height", self.input_height),
            ("D", self.head_dim),
            ("K", self.clusters),
            ("cls_channels", self.cls_channels),
            ("cls_dim", self.cls_dim),
            (
                "classifier_hidden",
                self.classifier_hidden[0].min(self.classifier_hidden[1]),
            ),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::invalid(
                "backbone_channels must be a non-empty list of positive widths",
            ));
        }
        if !self.sketch_dim.is_power_of_two() {
            return Err(Error::FftLength(self.sketch_dim));
        }
        Ok(())
    }

    /// Spatial size `(height, width)` of the backbone output.
    pub fn feature_size(&self) -> (usize, usize) {
        let step = |n: usize| (n + 2 - 3) / 2 + 1;
        self.backbone_channels
            .iter()
            .fold((self.input_height, self.input_width), |(h, w), _| {
                (step(h), step(w))
            })
    }

    fn to_meta(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "input_width={}\ninput_height={}\nbackbone_channels={}\nD={}\nK={}\ncls_channels={}\ncls_dim={}\nsketch_dim={}\nclassifier_hidden={}\nsigned_sqrt={}\nseed={}\n",
            self.input_width,
            self.input_height,
            list(&self.backbone_channels),
            self.head_dim,
            self.clusters,
            self.cls_channels,
            self.cls_dim,
            self.sketch_dim,
            list(&self.classifier_hidden),
            self.signed_sqrt,
            self.seed,
        )
    }

    fn from_meta(text: &str) -> std::result::Result<Self, String> {
        let map: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| map.get(k).copied().ok_or_else(|| format!("missing {k}"));
        let num = |k: &str| -> std::result::Result<usize, String> {
            get(k)?.parse().map_err(|_| format!("bad {k}"))
        };
        let list = |k: &str| -> std::result::Result<Vec<usize>, String> {
            get(k)?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| format!("bad {k}")))
                .collect()
        };
        let hidden = list("classifier_hidden")?;
        if hidden.len() != 2 {
            return Err("classifier_hidden needs two widths".into());
        }
        Ok(Self {
            input_width: num("input_width")?,
            input_height: num("input_height")?,
            backbone_channels: list("backbone_channels")?,
            head_dim: num("D")?,
            clusters: num("K")?,
            cls_channels: num("cls_channels")?,
            cls_dim: num("cls_dim")?,
            sketch_dim: num("sketch_dim")?,
            classifier_hidden: [hidden[0], hidden[1]],
            signed_sqrt: get("signed_sqrt")?.parse().map_err(|_| "bad signed_sqrt")?,
            seed: get("seed")?.parse().map_err(|_| "bad seed")?,
        })
    }
}

/// Variables for one encoded frame.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub retrieval: Var,
    pub cls: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptors {
    pub retrieval: Vec<f64>,
    pub cls: Vec<f64>,
}

/// NetVLAD over `features` (`D x M`) given assignment logits (`K x M`) and
/// centers (`K x D`): soft-assigned residual sums, per-cluster then global
/// L2 normalization. Near-zero vectors normalize to zero.
pub fn netvlad(tape: &mut Tape, logits: Var, features: Var, centers: Var) -> Result<Var> {
    let (ls, fs, cs) = (
        tape.value(logits).shape().to_vec(),
        tape.value(features).shape().to_vec(),
        tape.value(centers).shape().to_vec(),
    );
    if ls.len() != 2 || fs.len() != 2 || cs.len() != 2 || ls[1] != fs[1] || cs != [ls[0], fs[0]] {
        return Err(Error::shape(
            "netvlad",
            format!("logits {ls:?}, features {fs:?}, centers {cs:?}"),
        ));
    }
    let (k, d) = (cs[0], cs[1]);
    let assign = tape.softmax(logits, 0)?;
    let weighted = tape.matmul_transposed(assign, features)?;
    let mass = tape.sum_rows(assign)?;
    let shift = tape.scale_rows(centers, mass)?;
    let residual = tape.sub(weighted, shift)?;
    let blocks = tape.l2_normalize_rows(residual)?;
    let flat = tape.reshape(blocks, &[k * d])?;
    Ok(tape.l2_normalize(flat))
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    event_backbone: Vec<Conv>,
    image_backbone: Vec<Conv>,
    retrieval_convs: [Conv; 3],
    assign: Conv,
    centers: ParamId,
    cls_convs: [Conv; 3],
    cls_fc: Dense,
    pub sketches: SketchPair,
    pub classifier: Classifier,
}

fn conv3(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    input: usize,
    output: usize,
) -> Result<[Conv; 3]> {
    Ok([
        Conv::new(store, rng, &format!("{name}.conv0"), input, output, 3, 1, 1)?,
        Conv::new(
            store,
            rng,
            &format!("{name}.conv1"),
            output,
            output,
            3,
            1,
            1,
        )?,
        Conv::new(
            store,
            rng,
            &format!("{name}.conv2"),
            output,
            output,
            3,
            1,
            1,
        )?,
    ])
}

fn backbone(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    input: usize,
    widths: &[usize],
) -> Result<Vec<Conv>> {
    let mut prev = input;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let c = Conv::new(store, rng, &format!("{name}.conv{i}"), prev, w, 3, 2, 1);
            prev = w;
            c
        })
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let event_backbone = backbone(&mut store, &mut rng, "event", 1, &config.backbone_channels)?;
        let image_backbone = backbone(&mut store, &mut rng, "image", 3, &config.backbone_channels)?;
        let trunk = *config.backbone_channels.last().unwrap();
        let (d, k) = (config.head_dim, config.clusters);
        let retrieval_convs = conv3(&mut store, &mut rng, "retrieval", trunk, d)?;
        let assign = Conv::new(&mut store, &mut rng, "retrieval.assign", d, k, 1, 1, 0)?;
        let centers = store.add("retrieval.centers", uniform_init(&mut rng, &[k, d], d))?;
        let cls_convs = conv3(&mut store, &mut rng, "cls", trunk, config.cls_channels)?;
        let (fh, fw) = config.feature_size();
        let cls_fc = Dense::new(
            &mut store,
            &mut rng,
            "cls.fc",
            config.cls_channels * fh * fw,
            config.cls_dim,
        )?;
        let classifier = Classifier::new(
            &mut store,
            &mut rng,
            config.sketch_dim,
            config.classifier_hidden,
        )?;
        let sketches = SketchPair::new(config.cls_dim, config.sketch_dim, config.seed)?;
        Ok(Self {
            config,
            store,
            event_backbone,
            image_backbone,
            retrieval_convs,
            assign,
            centers,
            cls_convs,
            cls_fc,
            sketches,
            classifier,
        })
    }

    pub fn channels(modality: Modality) -> usize {
        match modality {
            Modality::Event => 1,
            Modality::Image => 3,
        }
    }

    pub fn retrieval_dim(&self) -> usize {
        self.config.clusters * self.config.head_dim
    }

    pub fn check_input(&self, shape: &[usize], modality: Modality) -> Result<()> {
        let want = [
            Self::channels(modality),
            self.config.input_height,
            self.config.input_width,
        ];
        if shape != want {
            return Err(Error::shape(
                "encoder input",
                format!("{modality} frame {shape:?}, expected {want:?}"),
            ));
        }
        Ok(())
    }

    pub fn backbone(&self, tape: &mut Tape, input: Var, modality: Modality) -> Result<Var> {
        self.check_input(tape.value(input).shape(), modality)?;
        let layers = match modality {
            Modality::Event => &self.event_backbone,
            Modality::Image => &self.image_backbone,
        };
        let mut h = input;
        for conv in layers {
            h = conv.forward(tape, &self.store, h)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    fn conv_stack(&self, tape: &mut Tape, convs: &[Conv; 3], input: Var) -> Result<Var> {
        let mut h = input;
        for conv in convs {
            h = conv.forward(tape, &self.store, h)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// Local features after the retrieval convolutions, `D x H x W`.
    pub fn retrieval_local(&self, tape: &mut Tape, feature_map: Var) -> Result<Var> {
        self.conv_stack(tape, &self.retrieval_convs, feature_map)
    }

    /// Local features as a `D x M` matrix, each column scaled to unit length.
    pub fn local_descriptors(&self, tape: &mut Tape, feature_map: Var) -> Result<Var> {
        let local = self.retrieval_local(tape, feature_map)?;
        let shape = tape.value(local).shape().to_vec();
        let flat = tape.reshape(local, &[shape[0], shape[1] * shape[2]])?;
        let per_position = tape.transpose(flat)?;
        let unit = tape.l2_normalize_rows(per_position)?;
        tape.transpose(unit)
    }

    pub fn retrieval_head(&self, tape: &mut Tape, feature_map: Var) -> Result<Var> {
        let features = self.local_descriptors(tape, feature_map)?;
        let (d, m) = (self.config.head_dim, tape.value(features).shape()[1]);
        let grid = tape.reshape(features, &[d, 1, m])?;
        let logits = self.assign.forward(tape, &self.store, grid)?;
        let logits = tape.reshape(logits, &[self.config.clusters, m])?;
        let centers = tape.param(&self.store, self.centers);
        netvlad(tape, logits, features, centers)
    }

    /// Standardized copy of `frame` on the tape, after a shape check.
    pub fn input(&self, tape: &mut Tape, frame: &ImageFrame, modality: Modality) -> Result<Var> {
        self.check_input(&[frame.channels, frame.height, frame.width], modality)?;
        Ok(tape.input(standardize(frame).to_tensor()))
    }

    pub fn cls_head(&self, tape: &mut Tape, feature_map: Var) -> Result<Var> {
        let h = self.conv_stack(tape, &self.cls_convs, feature_map)?;
        let n = tape.value(h).len();
        let flat = tape.reshape(h, &[n])?;
        self.cls_fc.forward(tape, &self.store, flat)
    }

    pub fn encode(&self, tape: &mut Tape, input: Var, modality: Modality) -> Result<Encoded> {
        let fmap = self.backbone(tape, input, modality)?;
        Ok(Encoded {
            retrieval: self.retrieval_head(tape, fmap)?,
            cls: self.cls_head(tape, fmap)?,
        })
    }

    /// Similarity score in `(0, 1)` of a query/candidate pair.
    pub fn similarity(&self, tape: &mut Tape, query_cls: Var, candidate_cls: Var) -> Result<Var> {
        let fused = fuse_on_tape(
            tape,
            query_cls,
            candidate_cls,
            &self.sketches,
            self.config.signed_sqrt,
        )?;
        self.classifier.forward(tape, &self.store, fused)
    }

    pub fn describe(&self, frame: &ImageFrame, modality: Modality) -> Result<Descriptors> {
        let mut tape = Tape::new();
        let x = self.input(&mut tape, frame, modality)?;
        let e = self.encode(&mut tape, x, modality)?;
        Ok(Descriptors {
            retrieval: tape.value(e.retrieval).data().to_vec(),
            cls: tape.value(e.cls).data().to_vec(),
        })
    }

    pub fn score(&self, query_cls: &[f64], candidate_cls: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let q = tape.input(Tensor::vector(query_cls.to_vec()));
        let c = tape.input(Tensor::vector(candidate_cls.to_vec()));
        let s = self.similarity(&mut tape, q, c)?;
        Ok(tape.value(s).item())
    }

    /// Re-initializes the NetVLAD centers by k-means over the local features
    /// of a warm-up batch, and sets the assignment layer so its logits equal
    /// `-alpha * |x - c_k|^2` up to a per-feature constant.
    pub fn init_clusters(&mut self, batch: &[(ImageFrame, Modality)]) -> Result<()> {
        let (k, d) = (self.config.clusters, self.config.head_dim);
        let mut points: Vec<Vec<f64>> = Vec::new();
        for (frame, modality) in batch {
            let mut tape = Tape::new();
            let x = self.input(&mut tape, frame, *modality)?;
            let fmap = self.backbone(&mut tape, x, *modality)?;
            let local = self.local_descriptors(&mut tape, fmap)?;
            let t = tape.value(local);
            let m = t.len() / d;
            points.extend((0..m).map(|p| (0..d).map(|c| t.data()[c * m + p]).collect()));
        }
        if points.len() < k {
            return Err(Error::invalid(format!(
                "{} local features cannot seed {k} clusters",
                points.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x6b6d_6561_6e73);
        let (centers, spread) = kmeans(&points, k, KMEANS_ITERATIONS, &mut rng);
        let alpha = if spread > 1e-12 {
            ASSIGN_SHARPNESS / spread
        } else {
            1.0
        };
        let flat: Vec<f64> = centers.iter().flatten().copied().collect();
        let weight: Vec<f64> = flat.iter().map(|c| 2.0 * alpha * c).collect();
        let bias: Vec<f64> = centers
            .iter()
            .map(|c| -alpha * c.iter().map(|v| v * v).sum::<f64>())
            .collect();
        self.store.get_mut(self.centers).value = Tensor::new(&[k, d], flat)?;
        self.store.get_mut(self.assign.weight).value = Tensor::new(&[k, d, 1, 1], weight)?;
        self.store.get_mut(self.assign.bias).value = Tensor::new(&[k], bias)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u8(CHECKPOINT_VERSION);
        w.str(&self.config.to_meta());
        w.u64(self.store.len() as u64);
        for p in self.store.iter() {
            w.str(&p.name);
            w.u64(p.value.rank() as u64);
            for &s in p.value.shape() {
                w.u64(s as u64);
            }
            w.f64s(p.value.data());
        }
        for sketch in [&self.sketches.query, &self.sketches.candidate] {
            let index: Vec<f64> = sketch.index().iter().map(|&i| i as f64).collect();
            w.f64s(&index);
            w.f64s(sketch.sign());
        }
        w.finish()
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        if r.bytes(4)? != CHECKPOINT_MAGIC {
            return Err(r.error("not a checkpoint file"));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig::from_meta(&r.str()?).map_err(|m| r.error(m))?;
        let mut model = Model::new(config).map_err(|e| r.error(e.to_string()))?;
        let count = r.len(1)?;
        if count != model.store.len() {
            return Err(r.error(format!(
                "{count} parameters, architecture expects {}",
                model.store.len()
            )));
        }
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.len(8)?;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u64().map(|s| s as usize))
                .collect::<Result<_>>()?;
            let data = r.f64s()?;
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| r.error(format!("unknown parameter {name}")))?;
            let slot = &mut model.store.get_mut(id).value;
            if slot.shape() != shape.as_slice() {
                return Err(r.error(format!(
                    "parameter {name} has shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::new(&shape, data).map_err(|e| r.error(e.to_string()))?;
        }
        let mut sketches = Vec::with_capacity(2);
        for _ in 0..2 {
            let index: Vec<usize> = r.f64s()?.into_iter().map(|i| i as usize).collect();
            let sign = r.f64s()?;
            let s = CountSketch::from_parts(index, sign, model.config.sketch_dim)
                .map_err(|e| r.error(e.to_string()))?;
            if s.input_dim() != model.config.cls_dim {
                return Err(r.error("sketch input dimension does not match cls_dim"));
            }
            sketches.push(Arc::new(s));
        }
        r.expect_end()?;
        model.sketches = SketchPair {
            candidate: sketches.pop().unwrap(),
            query: sketches.pop().unwrap(),
        };
        Ok(model)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> Fingerprint {
        let digest = Sha256::digest(self.to_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
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

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(c, p)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

/// Lloyd iterations from `k` distinct seeded picks. Returns the centers and
/// the mean squared distance of points to their nearest center.
fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, f64) {
    let d = points[0].len();
    let mut centers: Vec<Vec<f64>> = sample(rng, points.len(), k)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let (c, _) = nearest(&centers, p);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let spread = points.iter().map(|p| nearest(&centers, p).1).sum::<f64>() / points.len() as f64;
    (centers, spread)
}
