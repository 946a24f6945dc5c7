//! Plain-text `key=value` run configuration.
//!
//! Values come from built-in defaults, then an optional config file, then
//! `--set key=value` overrides and the dedicated `--seed` / `--threads`
//! flags. Unknown keys are rejected at every layer.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use xvpr_core::evaluation::{EvalOptions, Mode, RECALL_NS};
use xvpr_core::event_frame::FrameParams;
use xvpr_core::event_io::SplitFractions;
use xvpr_core::model::ModelConfig;
use xvpr_core::synth::SynthConfig;
use xvpr_core::training::TrainConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn list<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Every recognized key with its default rendering.
fn defaults() -> Vec<(&'static str, String)> {
    let m = ModelConfig::default();
    let t = TrainConfig::default();
    let f = FrameParams::default();
    let s = SynthConfig::default();
    let split = SplitFractions::default();
    let e = EvalOptions::default();
    vec![
        ("seed", "42".into()),
        ("threads", "0".into()),
        // encoder and classifier
        ("input_width", m.input_width.to_string()),
        ("input_height", m.input_height.to_string()),
        ("backbone_channels", list(&m.backbone_channels)),
        ("D", m.head_dim.to_string()),
        ("K", m.clusters.to_string()),
        ("cls_channels", m.cls_channels.to_string()),
        ("cls_dim", m.cls_dim.to_string()),
        ("sketch_dim", m.sketch_dim.to_string()),
        ("classifier_hidden", list(&m.classifier_hidden)),
        ("signed_sqrt", m.signed_sqrt.to_string()),
        // training
        ("alpha", t.alpha.to_string()),
        ("lr", t.lr.to_string()),
        ("epochs", t.epochs.to_string()),
        ("batch", t.batch.to_string()),
        ("pos_radius_m", t.pos_radius_m.to_string()),
        ("neg_radius_m", t.neg_radius_m.to_string()),
        ("warmup", t.warmup.to_string()),
        ("negative_pool", t.negative_pool.to_string()),
        // event frames
        ("delta_t_us", s.delta_t_us.to_string()),
        ("d_max", f.d_max.to_string()),
        ("denoise_radius", f.denoise_radius.to_string()),
        ("min_neighbors", f.min_neighbors.to_string()),
        // splits
        ("split_train", split.train.to_string()),
        ("split_val", split.val.to_string()),
        ("split_test", split.test.to_string()),
        // retrieval and evaluation
        ("top_n", e.top_n.to_string()),
        ("radius_m", e.radius_m.to_string()),
        ("recall_ns", list(&RECALL_NS)),
        // synthetic benchmark
        ("places", s.places.to_string()),
        ("scenarios", s.scenarios.join(",")),
        ("synth_width", s.width.to_string()),
        ("synth_height", s.height.to_string()),
        ("synth_d_max", s.frame.d_max.to_string()),
        ("spacing_m", s.spacing_m.to_string()),
        ("threshold", s.threshold.to_string()),
        ("noise", s.noise.to_string()),
        ("motion_px", s.motion_px.to_string()),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: defaults()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, text: &str) -> Result<()> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("expected key=value, got {text:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies a config file: one `key=value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, origin: &str, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line)
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        self.apply_text(&path.display().to_string(), &text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a registered config key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| ConfigError(format!("config key {key}: cannot parse {raw:?}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| ConfigError(format!("config key {key}: cannot parse {s:?}")))
            })
            .collect()
    }

    fn positive(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(ConfigError(format!(
                "config key {key} must be positive, got {v}"
            )));
        }
        Ok(v)
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn threads(&self) -> Result<usize> {
        self.get("threads")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let hidden: Vec<usize> = self.list("classifier_hidden")?;
        if hidden.len() != 2 {
            return Err(ConfigError(
                "classifier_hidden needs exactly two widths".into(),
            ));
        }
        let cfg = ModelConfig {
            input_width: self.get("input_width")?,
            input_height: self.get("input_height")?,
            backbone_channels: self.list("backbone_channels")?,
            head_dim: self.get("D")?,
            clusters: self.get("K")?,
            cls_channels: self.get("cls_channels")?,
            cls_dim: self.get("cls_dim")?,
            sketch_dim: self.get("sketch_dim")?,
            classifier_hidden: [hidden[0], hidden[1]],
            signed_sqrt: self.get("signed_sqrt")?,
            seed: self.seed()?,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            alpha: self.positive("alpha")?,
            lr: self.get("lr")?,
            epochs: self.get("epochs")?,
            batch: self.get("batch")?,
            pos_radius_m: self.positive("pos_radius_m")?,
            neg_radius_m: self.positive("neg_radius_m")?,
            seed: self.seed()?,
            warmup: self.get("warmup")?,
            negative_pool: self.get("negative_pool")?,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn frame(&self) -> Result<FrameParams> {
        Ok(FrameParams {
            d_max: self.positive("d_max")?,
            denoise_radius: self.get("denoise_radius")?,
            min_neighbors: self.get("min_neighbors")?,
        })
    }

    pub fn delta_t(&self) -> Result<i64> {
        let v: i64 = self.get("delta_t_us")?;
        if v <= 0 {
            return Err(ConfigError(format!("delta_t_us must be positive, got {v}")));
        }
        Ok(v)
    }

    pub fn splits(&self) -> Result<SplitFractions> {
        SplitFractions::new(
            self.get("split_train")?,
            self.get("split_val")?,
            self.get("split_test")?,
        )
        .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn eval(&self, mode: Mode) -> Result<EvalOptions> {
        let ns: Vec<usize> = self.list("recall_ns")?;
        if ns.is_empty() || ns.contains(&0) {
            return Err(ConfigError("recall_ns must list positive ranks".into()));
        }
        Ok(EvalOptions {
            mode,
            ns,
            radius_m: self.positive("radius_m")?,
            top_n: self.get("top_n")?,
        })
    }

    /// Builds every section once so bad values surface before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.threads()?;
        self.model()?;
        self.train()?;
        self.splits()?;
        self.eval(Mode::Hybrid)?;
        self.synth()?;
        Ok(())
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            seed: self.seed()?,
            places: self.get("places")?,
            scenarios: self.list("scenarios")?,
            width: self.get("synth_width")?,
            height: self.get("synth_height")?,
            spacing_m: self.positive("spacing_m")?,
            delta_t_us: self.delta_t()?,
            threshold: self.positive("threshold")?,
            noise: self.get("noise")?,
            motion_px: self.positive("motion_px")?,
            frame: FrameParams {
                d_max: self.positive("synth_d_max")?,
                ..self.frame()?
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_every_section() {
        let c = RunConfig::default();
        assert_eq!(c.seed().unwrap(), 42);
        assert_eq!(c.model().unwrap(), ModelConfig::default());
        assert_eq!(c.train().unwrap(), TrainConfig::default());
        assert_eq!(c.frame().unwrap(), FrameParams::default());
        assert_eq!(c.splits().unwrap(), SplitFractions::default());
        c.validate().unwrap();
        let s = c.synth().unwrap();
        let d = SynthConfig::default();
        assert_eq!((s.places, s.width, s.frame), (d.places, d.width, d.frame));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.assign("learning_rate=0.1").is_err());
        let err = c.apply_text("x.conf", "lr=0.05\n\nbogus=1\n").unwrap_err();
        assert!(err.0.contains("x.conf:3"), "{err}");
    }

    #[test]
    fn later_layers_override_earlier() {
        let mut c = RunConfig::default();
        c.apply_text("f", "# comment\nlr = 0.05  # trailing\nseed=7\n")
            .unwrap();
        c.assign("seed=9").unwrap();
        assert_eq!(c.train().unwrap().lr, 0.05);
        assert_eq!(c.seed().unwrap(), 9);
        assert_eq!(c.model().unwrap().seed, 9);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "alpha=0",
            "neg_radius_m=10",
            "sketch_dim=100",
            "radius_m=-1",
            "classifier_hidden=4",
            "delta_t_us=0",
        ] {
            let mut c = RunConfig::default();
            c.assign(bad).unwrap();
            let ok = c.train().is_ok()
                && c.model().is_ok()
                && c.eval(Mode::Hybrid).is_ok()
                && c.delta_t().is_ok();
            assert!(!ok, "{bad} accepted");
            assert!(c.validate().is_err(), "{bad} passed validation");
        }
    }
}
