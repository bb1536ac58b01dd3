//! Model catalog, hyperparameters with a step-decay learning-rate
//! schedule, validation, and the plain `key = value` config text format.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPlan, OpRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "SSD")]
    Ssd,
    #[serde(rename = "FasterRCNN")]
    FasterRcnn,
    #[serde(rename = "RFCN")]
    Rfcn,
    #[serde(rename = "MaskRCNN")]
    MaskRcnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Backbone {
    MobileNetV1,
    MobileNetV2,
    InceptionV2,
    InceptionV3,
    ResNet50,
    ResNet101,
    ResNet152,
    InceptionResNetV2,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Self::Ssd, Self::FasterRcnn, Self::Rfcn, Self::MaskRcnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ssd => "SSD",
            Self::FasterRcnn => "FasterRCNN",
            Self::Rfcn => "RFCN",
            Self::MaskRcnn => "MaskRCNN",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Self::Ssd => "ssd",
            Self::FasterRcnn => "faster_rcnn",
            Self::Rfcn => "rfcn",
            Self::MaskRcnn => "mask_rcnn",
        }
    }
}

impl Backbone {
    pub const ALL: [Backbone; 8] = [
        Self::MobileNetV1,
        Self::MobileNetV2,
        Self::InceptionV2,
        Self::InceptionV3,
        Self::ResNet50,
        Self::ResNet101,
        Self::ResNet152,
        Self::InceptionResNetV2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MobileNetV1 => "MobileNetV1",
            Self::MobileNetV2 => "MobileNetV2",
            Self::InceptionV2 => "InceptionV2",
            Self::InceptionV3 => "InceptionV3",
            Self::ResNet50 => "ResNet50",
            Self::ResNet101 => "ResNet101",
            Self::ResNet152 => "ResNet152",
            Self::InceptionResNetV2 => "InceptionResNetV2",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Self::MobileNetV1 => "mobilenet_v1",
            Self::MobileNetV2 => "mobilenet_v2",
            Self::InceptionV2 => "inception_v2",
            Self::InceptionV3 => "inception_v3",
            Self::ResNet50 => "resnet50",
            Self::ResNet101 => "resnet101",
            Self::ResNet152 => "resnet152",
            Self::InceptionResNetV2 => "inception_resnet_v2",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown architecture `{s}`"))
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown backbone `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub backbone: Backbone,
}

impl ModelSpec {
    pub const fn new(architecture: Architecture, backbone: Backbone) -> Self {
        Self { architecture, backbone }
    }

    /// `ssd_mobilenet_v2` style identifier.
    pub fn identifier(&self) -> String {
        format!("{}_{}", self.architecture.slug(), self.backbone.slug())
    }

    pub fn in_catalog(&self) -> bool {
        CATALOG.contains(self)
    }
}

use Architecture::*;
use Backbone::*;

const CATALOG: [ModelSpec; 13] = [
    ModelSpec::new(Ssd, MobileNetV1),
    ModelSpec::new(Ssd, MobileNetV2),
    ModelSpec::new(Ssd, InceptionV2),
    ModelSpec::new(Ssd, ResNet50),
    ModelSpec::new(FasterRcnn, InceptionV2),
    ModelSpec::new(FasterRcnn, ResNet50),
    ModelSpec::new(FasterRcnn, ResNet101),
    ModelSpec::new(FasterRcnn, ResNet152),
    ModelSpec::new(FasterRcnn, InceptionResNetV2),
    ModelSpec::new(Rfcn, ResNet101),
    ModelSpec::new(MaskRcnn, InceptionV2),
    ModelSpec::new(MaskRcnn, ResNet101),
    ModelSpec::new(MaskRcnn, InceptionResNetV2),
];

/// Supported (architecture, backbone) pairs.
pub fn catalog() -> Vec<ModelSpec> {
    CATALOG.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub step: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_rate: f64,
    #[serde(default)]
    pub decay_points: Vec<DecayPoint>,
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            initial_rate: rate,
            decay_points: Vec::new(),
        }
    }

    pub fn step_decay(initial_rate: f64, points: &[(u64, f64)]) -> Self {
        Self {
            initial_rate,
            decay_points: points.iter().map(|&(step, rate)| DecayPoint { step, rate }).collect(),
        }
    }
}

/// The rate in effect at `step`: that of the last decay point at or
/// before `step`, otherwise the initial rate.
pub fn learning_rate_at(s: &LrSchedule, step: i64) -> Result<f64, ConfigError> {
    if step < 0 {
        return Err(ConfigError::invalid("step", format!("{step} is negative")));
    }
    let step = step as u64;
    Ok(s.decay_points
        .iter()
        .take_while(|p| p.step <= step)
        .last()
        .map_or(s.initial_rate, |p| p.rate))
}

fn default_batch_size() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub num_steps: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: u32,
    pub lr: LrSchedule,
    pub num_classes: u32,
    pub checkpoint_every: u64,
    #[serde(default)]
    pub augmentation: AugmentationPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub model: ModelSpec,
    pub hp: HyperParams,
    pub labelmap_path: String,
    pub train_record_path: String,
    pub eval_record_path: String,
    /// Trainer-specific keys passed through uninterpreted.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::Invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    pub fn field_errors(&self) -> &[FieldError] {
        match self {
            Self::Invalid(errs) => errs,
            Self::Parse { .. } => &[],
        }
    }
}

/// What validation needs to know about the workspace the config refers to.
pub trait ConfigEnvironment {
    fn file_exists(&self, rel_path: &str) -> bool;
    /// Number of entries in the labelmap at `rel_path`, if it parses.
    fn labelmap_len(&self, rel_path: &str) -> Option<usize>;
}

/// Checks everything that can be checked without a workspace.
pub fn check_intrinsic(cfg: &TrainingConfig) -> Vec<FieldError> {
    let mut errs = Vec::new();
    let mut push = |field: &str, message: String| {
        errs.push(FieldError {
            field: field.into(),
            message,
        })
    };
    if !cfg.model.in_catalog() {
        push(
            "model",
            format!("({}, {}) is not in the catalog", cfg.model.architecture, cfg.model.backbone),
        );
    }
    let hp = &cfg.hp;
    if hp.num_steps == 0 {
        push("hp.num_steps", "must be > 0".into());
    }
    if hp.batch_size == 0 {
        push("hp.batch_size", "must be >= 1".into());
    }
    if hp.num_classes == 0 {
        push("hp.num_classes", "must be >= 1".into());
    }
    if hp.checkpoint_every == 0 {
        push("hp.checkpoint_every", "must be > 0".into());
    } else if hp.num_steps > 0 && hp.checkpoint_every > hp.num_steps {
        push(
            "hp.checkpoint_every",
            format!("{} exceeds num_steps {}", hp.checkpoint_every, hp.num_steps),
        );
    }
    let positive = |r: f64| r > 0.0 && r.is_finite();
    if !positive(hp.lr.initial_rate) {
        push("hp.lr.initial_rate", format!("{} must be > 0", hp.lr.initial_rate));
    }
    let mut prev: Option<u64> = None;
    for (i, p) in hp.lr.decay_points.iter().enumerate() {
        if !positive(p.rate) {
            push(&format!("hp.lr.decay_points[{i}].rate"), format!("{} must be > 0", p.rate));
        }
        if prev.is_some_and(|s| p.step <= s) {
            push(&format!("hp.lr.decay_points[{i}].step"), "decay steps must strictly increase".into());
        } else if hp.num_steps > 0 && p.step >= hp.num_steps {
            push(
                &format!("hp.lr.decay_points[{i}].step"),
                format!("{} is not before num_steps {}", p.step, hp.num_steps),
            );
        }
        prev = Some(p.step);
    }
    for (field, message) in hp.augmentation.violations(&OpRegistry::builtin()) {
        push(&format!("hp.augmentation.{field}"), message);
    }
    for (field, path) in [
        ("labelmap_path", &cfg.labelmap_path),
        ("train_record_path", &cfg.train_record_path),
        ("eval_record_path", &cfg.eval_record_path),
    ] {
        if let Err(e) = crate::workspace::normalize_rel_path(path) {
            push(field, e.to_string());
        }
    }
    for (k, v) in &cfg.extra {
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            push(&format!("extra.{k}"), "keys may only use ASCII letters, digits, `_` and `.`".into());
        } else if v.contains(['\n', '\r']) || v.trim() != v {
            push(&format!("extra.{k}"), "values must be one line without surrounding whitespace".into());
        }
    }
    errs
}

/// Full validation: intrinsic ranges plus referenced files and the
/// labelmap size. All violations are collected.
pub fn validate(cfg: &TrainingConfig, env: &dyn ConfigEnvironment) -> Result<(), ConfigError> {
    let mut errs = check_intrinsic(cfg);
    for (field, path) in [
        ("labelmap_path", &cfg.labelmap_path),
        ("train_record_path", &cfg.train_record_path),
        ("eval_record_path", &cfg.eval_record_path),
    ] {
        if errs.iter().any(|e| e.field == field) {
            continue;
        }
        if !env.file_exists(path) {
            errs.push(FieldError {
                field: field.into(),
                message: format!("`{path}` does not exist"),
            });
        }
    }
    if !errs.iter().any(|e| e.field == "labelmap_path") && cfg.hp.num_classes > 0 {
        match env.labelmap_len(&cfg.labelmap_path) {
            Some(n) if n == cfg.hp.num_classes as usize => {}
            Some(n) => errs.push(FieldError {
                field: "hp.num_classes".into(),
                message: format!("{} but the labelmap has {n} entries", cfg.hp.num_classes),
            }),
            None => errs.push(FieldError {
                field: "labelmap_path".into(),
                message: "not a readable labelmap".into(),
            }),
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(errs))
    }
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Renders the config as `key = value` lines. Reals use the shortest
/// representation that parses back to the same value.
pub fn render_config(cfg: &TrainingConfig) -> String {
    let hp = &cfg.hp;
    let aug = &hp.augmentation;
    let mut lines = vec![
        "# detflow training config".to_string(),
        format!("model = {}", cfg.model.identifier()),
        format!("model.architecture = {}", cfg.model.architecture),
        format!("model.backbone = {}", cfg.model.backbone),
        format!("num_classes = {}", hp.num_classes),
        format!("batch_size = {}", hp.batch_size),
        format!("num_steps = {}", hp.num_steps),
        format!("checkpoint_every = {}", hp.checkpoint_every),
        format!("lr.initial_rate = {}", hp.lr.initial_rate),
        format!("lr.decay_steps = {}", join(hp.lr.decay_points.iter().map(|p| p.step))),
        format!(
            "lr.decay_rates = {}",
            join(hp.lr.decay_points.iter().map(|p| p.rate.to_string()))
        ),
        format!("labelmap_path = {}", cfg.labelmap_path),
        format!("train_record_path = {}", cfg.train_record_path),
        format!("eval_record_path = {}", cfg.eval_record_path),
        format!("augmentation.enabled_ops = {}", aug.enabled_ops.join(",")),
        format!("augmentation.fraction = {}", aug.fraction),
        format!("augmentation.seed = {}", aug.seed),
        format!("augmentation.brightness_delta = {}", aug.brightness_delta),
        format!("augmentation.contrast_factor = {}", aug.contrast_factor),
        format!("augmentation.saturation_factor = {}", aug.saturation_factor),
    ];
    for (k, v) in &cfg.extra {
        lines.push(format!("extra.{k} = {v}"));
    }
    lines.push(String::new());
    lines.join("\n")
}

fn split_list(v: &str) -> Vec<&str> {
    if v.is_empty() {
        Vec::new()
    } else {
        v.split(',').map(str::trim).collect()
    }
}

/// Inverse of [`render_config`]. Blank lines and lines starting with `#`
/// are skipped; every known key must appear exactly once.
pub fn parse_config(text: &str) -> Result<TrainingConfig, ConfigError> {
    let mut values: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut extra = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: line_no,
            message: "expected `key = value`".into(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if let Some(name) = k.strip_prefix("extra.") {
            if extra.insert(name.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("duplicate key `{k}`"),
                });
            }
        } else if values.insert(k, (line_no, v)).is_some() {
            return Err(ConfigError::Parse {
                line: line_no,
                message: format!("duplicate key `{k}`"),
            });
        }
    }

    let mut take = |key: &str| -> Result<(usize, &str), ConfigError> {
        values.remove(key).ok_or_else(|| ConfigError::Parse {
            line: 0,
            message: format!("missing key `{key}`"),
        })
    };
    fn num<T: FromStr>((line, v): (usize, &str), key: &str) -> Result<T, ConfigError> {
        v.parse().map_err(|_| ConfigError::Parse {
            line,
            message: format!("`{v}` is not a valid {key}"),
        })
    }
    fn list<T: FromStr>((line, v): (usize, &str), key: &str) -> Result<Vec<T>, ConfigError> {
        split_list(v).into_iter().map(|item| num((line, item), key)).collect()
    }

    let model_id = take("model")?;
    let architecture = num::<Architecture>(take("model.architecture")?, "architecture")?;
    let backbone = num::<Backbone>(take("model.backbone")?, "backbone")?;
    let model = ModelSpec::new(architecture, backbone);
    if model.identifier() != model_id.1 {
        return Err(ConfigError::Parse {
            line: model_id.0,
            message: format!("model `{}` disagrees with architecture and backbone", model_id.1),
        });
    }
    let num_classes = num(take("num_classes")?, "num_classes")?;
    let batch_size = num(take("batch_size")?, "batch_size")?;
    let num_steps = num(take("num_steps")?, "num_steps")?;
    let checkpoint_every = num(take("checkpoint_every")?, "checkpoint_every")?;
    let initial_rate = num(take("lr.initial_rate")?, "rate")?;
    let steps_at = take("lr.decay_steps")?;
    let steps: Vec<u64> = list(steps_at, "decay step")?;
    let rates: Vec<f64> = list(take("lr.decay_rates")?, "decay rate")?;
    if steps.len() != rates.len() {
        return Err(ConfigError::Parse {
            line: steps_at.0,
            message: format!("{} decay steps but {} decay rates", steps.len(), rates.len()),
        });
    }
    let labelmap_path = take("labelmap_path")?.1.to_string();
    let train_record_path = take("train_record_path")?.1.to_string();
    let eval_record_path = take("eval_record_path")?.1.to_string();
    let augmentation = AugmentationPlan {
        enabled_ops: split_list(take("augmentation.enabled_ops")?.1)
            .into_iter()
            .map(String::from)
            .collect(),
        fraction: num(take("augmentation.fraction")?, "fraction")?,
        seed: num(take("augmentation.seed")?, "seed")?,
        brightness_delta: num(take("augmentation.brightness_delta")?, "brightness_delta")?,
        contrast_factor: num(take("augmentation.contrast_factor")?, "contrast_factor")?,
        saturation_factor: num(take("augmentation.saturation_factor")?, "saturation_factor")?,
    };
    if let Some((key, (line, _))) = values.into_iter().next() {
        return Err(ConfigError::Parse {
            line,
            message: format!("unknown key `{key}`"),
        });
    }
    Ok(TrainingConfig {
        model,
        hp: HyperParams {
            num_steps,
            batch_size,
            lr: LrSchedule {
                initial_rate,
                decay_points: steps
                    .into_iter()
                    .zip(rates)
                    .map(|(step, rate)| DecayPoint { step, rate })
                    .collect(),
            },
            num_classes,
            checkpoint_every,
            augmentation,
        },
        labelmap_path,
        train_record_path,
        eval_record_path,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Env {
        files: Vec<&'static str>,
        classes: usize,
    }

    impl ConfigEnvironment for Env {
        fn file_exists(&self, p: &str) -> bool {
            self.files.contains(&p)
        }
        fn labelmap_len(&self, p: &str) -> Option<usize> {
            self.file_exists(p).then_some(self.classes)
        }
    }

    fn env() -> Env {
        Env {
            files: vec!["data/labelmap.pbtxt", "data/train.record", "data/eval.record"],
            classes: 90,
        }
    }

    fn long_run() -> TrainingConfig {
        TrainingConfig {
            model: ModelSpec::new(Ssd, MobileNetV2),
            hp: HyperParams {
                num_steps: 200_000,
                batch_size: 1,
                lr: LrSchedule::step_decay(0.0002, &[(150_000, 0.00002)]),
                num_classes: 90,
                checkpoint_every: 10_000,
                augmentation: AugmentationPlan {
                    enabled_ops: vec!["flip_h".into(), "brightness".into()],
                    ..Default::default()
                },
            },
            labelmap_path: "data/labelmap.pbtxt".into(),
            train_record_path: "data/train.record".into(),
            eval_record_path: "data/eval.record".into(),
            extra: BTreeMap::new(),
        }
    }

    fn fields(r: Result<(), ConfigError>) -> Vec<String> {
        r.unwrap_err().field_errors().iter().map(|e| e.field.clone()).collect()
    }

    #[test]
    fn catalog_has_required_pairs_and_not_others() {
        let c = catalog();
        for pair in [(Ssd, MobileNetV2), (FasterRcnn, ResNet101), (Rfcn, ResNet101), (MaskRcnn, ResNet101)] {
            assert!(c.contains(&ModelSpec::new(pair.0, pair.1)), "{pair:?}");
        }
        assert!(!c.contains(&ModelSpec::new(MaskRcnn, MobileNetV1)));
        let mut cfg = long_run();
        cfg.model = ModelSpec::new(MaskRcnn, MobileNetV1);
        assert_eq!(fields(validate(&cfg, &env())), ["model"]);
    }

    #[test]
    fn decay_boundary_is_inclusive() {
        let s = LrSchedule::step_decay(0.0002, &[(150_000, 0.00002)]);
        assert_eq!(learning_rate_at(&s, 0).unwrap(), 0.0002);
        assert_eq!(learning_rate_at(&s, 149_999).unwrap(), 0.0002);
        assert_eq!(learning_rate_at(&s, 150_000).unwrap(), 0.00002);
        assert!(learning_rate_at(&s, -1).is_err());
    }

    #[test]
    fn constant_between_decay_points() {
        let s = LrSchedule::step_decay(1.0, &[(10, 0.5), (20, 0.25)]);
        let rates: Vec<f64> = (0..30).map(|i| learning_rate_at(&s, i).unwrap()).collect();
        assert!(rates[..10].iter().all(|&r| r == 1.0));
        assert!(rates[10..20].iter().all(|&r| r == 0.5));
        assert!(rates[20..].iter().all(|&r| r == 0.25));
    }

    #[test]
    fn long_run_config_is_valid() {
        validate(&long_run(), &env()).unwrap();
    }

    #[test]
    fn each_single_mutation_reports_its_own_field() {
        type Mutation = (&'static str, fn(&mut TrainingConfig));
        let cases: [Mutation; 10] = [
            ("hp.num_steps", |c| c.hp.num_steps = 0),
            ("hp.batch_size", |c| c.hp.batch_size = 0),
            ("hp.num_classes", |c| c.hp.num_classes = 3),
            ("hp.checkpoint_every", |c| c.hp.checkpoint_every = 0),
            ("hp.lr.initial_rate", |c| c.hp.lr.initial_rate = 0.0),
            ("hp.lr.decay_points[0].step", |c| c.hp.lr.decay_points[0].step = 250_000),
            ("hp.lr.decay_points[0].rate", |c| c.hp.lr.decay_points[0].rate = -1.0),
            ("hp.augmentation.fraction", |c| c.hp.augmentation.fraction = 1.5),
            ("train_record_path", |c| c.train_record_path = "data/missing.record".into()),
            ("labelmap_path", |c| c.labelmap_path = "../escape".into()),
        ];
        for (field, mutate) in cases {
            let mut cfg = long_run();
            mutate(&mut cfg);
            assert_eq!(fields(validate(&cfg, &env())), [field], "mutating {field}");
        }
    }

    #[test]
    fn collects_every_error() {
        let mut cfg = long_run();
        cfg.hp.batch_size = 0;
        cfg.hp.lr.initial_rate = -1.0;
        cfg.eval_record_path = "nope".into();
        assert_eq!(fields(validate(&cfg, &env())).len(), 3);
    }

    #[test]
    fn render_is_deterministic_and_round_trips() {
        let mut cfg = long_run();
        cfg.extra.insert("optimizer.momentum".into(), "0.9".into());
        let text = render_config(&cfg);
        assert_eq!(text, render_config(&cfg));
        assert!(text.lines().any(|l| l == "num_steps = 200000"));
        assert!(text.lines().any(|l| l == "lr.decay_rates = 0.00002"));
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn parse_rejects_unknown_and_missing_keys() {
        let text = render_config(&long_run());
        assert!(matches!(
            parse_config(&format!("{text}bogus = 1\n")),
            Err(ConfigError::Parse { message, .. }) if message.contains("bogus")
        ));
        let without: String = text.lines().filter(|l| !l.starts_with("num_steps")).map(|l| format!("{l}\n")).collect();
        assert!(parse_config(&without).is_err());
    }

    #[test]
    fn empty_decay_list_and_ops() {
        let mut cfg = long_run();
        cfg.hp.lr = LrSchedule::constant(0.01);
        cfg.hp.augmentation.enabled_ops.clear();
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn json_defaults() {
        let json = r#"{"model":{"architecture":"SSD","backbone":"MobileNetV2"},
            "hp":{"num_steps":200,"lr":{"initial_rate":0.001},"num_classes":2,"checkpoint_every":50},
            "labelmap_path":"a","train_record_path":"b","eval_record_path":"c"}"#;
        let cfg: TrainingConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.hp.batch_size, 1);
        assert_eq!(cfg.hp.augmentation.fraction, 0.5);
    }

    proptest! {
        #[test]
        fn round_trip_random_values(
            steps in 1u64..1_000_000,
            rate in 1e-9f64..1.0,
            decay in proptest::collection::vec(1e-9f64..1.0, 0..4),
            fraction in 0.0f64..=1.0,
            delta in -1.0f64..=1.0,
        ) {
            let mut cfg = long_run();
            cfg.hp.num_steps = steps;
            cfg.hp.lr = LrSchedule {
                initial_rate: rate,
                decay_points: decay.iter().enumerate().map(|(i, &r)| DecayPoint { step: i as u64, rate: r }).collect(),
            };
            cfg.hp.augmentation.fraction = fraction;
            cfg.hp.augmentation.brightness_delta = delta;
            prop_assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
        }
    }
}
