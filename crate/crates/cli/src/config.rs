//! Run configuration: schema, validation and construction of data and parameters.

use std::path::{Path, PathBuf};

use implicit_eq::data::{load_idx, make_binary_split, make_binary_subset, normalize_rows, synthetic, LabelMode};
use implicit_eq::init::{deterministic_init_with, identity_init, random_init, scale_to_satisfy, Slack};
use implicit_eq::trainer::Mode;
use implicit_eq::{Dataset, Error, Params, SolveOptions};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, with = "kind_tagged")]
    pub data: Option<DataSpec>,
    #[serde(default, with = "kind_tagged")]
    pub init: Option<InitSpec>,
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub conditions: Conditions,
    pub sweep: Option<SweepSpec>,
    pub grad_check: Option<GradCheckSpec>,
    pub output_dir: Option<PathBuf>,
}

/// Reads `{"kind": "k", ...fields}` as the externally tagged `{"k": {...fields}}`. Serde's own
/// internal tagging buffers the fields and loses the path of a bad one.
mod kind_tagged {
    use serde::de::{DeserializeOwned, Error as _};
    use serde::ser::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::{Map, Value};

    pub fn deserialize<'de, D: Deserializer<'de>, T: DeserializeOwned>(d: D) -> Result<Option<T>, D::Error> {
        let Some(value) = Option::<Value>::deserialize(d)? else {
            return Ok(None);
        };
        let Value::Object(mut fields) = value else {
            return Err(D::Error::custom("expected an object with a \"kind\" key"));
        };
        let kind = match fields.remove("kind") {
            Some(Value::String(k)) => k,
            Some(_) => return Err(D::Error::custom("field `kind` must be a string")),
            None => return Err(D::Error::custom("missing field `kind`")),
        };
        let external = Value::Object(Map::from_iter([(kind.clone(), Value::Object(fields))]));
        serde_path_to_error::deserialize(external).map(Some).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            match path.strip_prefix(&kind).and_then(|p| p.strip_prefix('.')) {
                Some(field) => D::Error::custom(format!("field `{field}`: {inner}")),
                None => D::Error::custom(inner),
            }
        })
    }

    pub fn serialize<S: Serializer, T: Serialize>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        let Some(v) = v else {
            return s.serialize_none();
        };
        let value = serde_json::to_value(v).map_err(S::Error::custom)?;
        let Value::Object(outer) = value else {
            return Err(S::Error::custom("expected a struct variant"));
        };
        let (kind, fields) = outer.into_iter().next().ok_or_else(|| S::Error::custom("empty variant"))?;
        let mut out = Map::new();
        out.insert("kind".into(), Value::String(kind));
        if let Value::Object(fields) = fields {
            out.extend(fields);
        }
        Value::Object(out).serialize(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        n: usize,
        d: usize,
        #[serde(default = "default_label_mode")]
        label_mode: LabelMode,
        #[serde(default)]
        test_n: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        #[serde(default = "default_classes")]
        classes: [u8; 2],
        n_per_class: usize,
        #[serde(default)]
        test_per_class: usize,
    },
}

fn default_label_mode() -> LabelMode {
    LabelMode::Teacher
}

fn default_classes() -> [u8; 2] {
    [0, 1]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// `W ~ N(0, 1/m)`, `A = ||W|| I`, `b = 0`, scaled by `beta` (or the first passing power
    /// of two when `auto_scale`).
    Deterministic {
        width: usize,
        #[serde(default = "one")]
        beta: f64,
        #[serde(default)]
        auto_scale: bool,
        #[serde(default = "half")]
        gamma0: f64,
    },
    Random {
        width: usize,
    },
    Identity {
        width: usize,
        gamma: f64,
    },
    /// Parameters serialized as JSON.
    Files {
        path: PathBuf,
    },
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Value(f64),
    Named(EtaRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaRule {
    /// `1 / N`.
    InverseN,
    /// 0.99 of the certified bound.
    EtaMax,
    /// The certified bound divided by 100.
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub relative: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub eta: EtaSpec,
    pub epochs: usize,
    #[serde(default = "strict_mode")]
    pub mode: Mode,
    pub forward: Option<SolverSpec>,
    pub adjoint: Option<SolverSpec>,
    pub monitor_spectral: Option<bool>,
    #[serde(default = "one_usize")]
    pub monitor_every: usize,
    #[serde(default)]
    pub warm_start: bool,
}

fn strict_mode() -> Mode {
    Mode::Strict
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditions {
    #[serde(default = "one")]
    pub c1: f64,
    #[serde(default = "one")]
    pub c2: f64,
    #[serde(default = "one")]
    pub c3: f64,
}

impl Default for Conditions {
    fn default() -> Self {
        Self { c1: 1.0, c2: 1.0, c3: 1.0 }
    }
}

impl Conditions {
    pub fn slack(&self) -> Slack<f64> {
        Slack {
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub width: Vec<usize>,
    #[serde(default)]
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSpec {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub gamma0: f64,
    pub adjoint_tol: f64,
    pub zero_b: bool,
    pub fd_step: f64,
    pub kink_margin: f64,
    pub unroll_steps: usize,
    pub tolerance: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            n: 4,
            d: 3,
            m: 5,
            gamma0: 0.5,
            adjoint_tol: 1e-10,
            zero_b: false,
            fd_step: 1e-6,
            kink_margin: 1e-4,
            unroll_steps: 300,
            tolerance: 1e-5,
        }
    }
}

/// Largest `N * m` (and `d * m`) the gradient check accepts.
pub const GRAD_CHECK_LIMIT: usize = 400;

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn positive(key: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("must be a positive finite number, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<(), CliError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(bad(key, "must be at least 1"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Schema checks that do not need any data.
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.data {
            Some(DataSpec::Synthetic { n, d, .. }) => {
                at_least_one("data.n", *n)?;
                at_least_one("data.d", *d)?;
            }
            Some(DataSpec::Idx {
                classes,
                n_per_class,
                test_images,
                test_labels,
                ..
            }) => {
                at_least_one("data.n_per_class", *n_per_class)?;
                if classes[0] == classes[1] {
                    return Err(bad("data.classes", "the two classes must differ"));
                }
                if test_images.is_some() != test_labels.is_some() {
                    return Err(bad("data.test_images", "test_images and test_labels go together"));
                }
            }
            None => {}
        }
        match &self.init {
            Some(InitSpec::Deterministic { width, beta, .. }) => {
                at_least_one("init.width", *width)?;
                positive("init.beta", *beta)?;
            }
            Some(InitSpec::Random { width }) | Some(InitSpec::Identity { width, .. }) => at_least_one("init.width", *width)?,
            _ => {}
        }
        if let Some(t) = &self.train {
            at_least_one("train.epochs", t.epochs)?;
            at_least_one("train.monitor_every", t.monitor_every)?;
            if let EtaSpec::Value(v) = t.eta {
                positive("train.eta", v)?;
            }
            for (key, s) in [("train.forward", t.forward), ("train.adjoint", t.adjoint)] {
                if let Some(s) = s {
                    positive(&format!("{key}.tol"), s.tol)?;
                    at_least_one(&format!("{key}.max_iter"), s.max_iter)?;
                }
            }
        }
        for (key, v) in [("conditions.c1", self.conditions.c1), ("conditions.c2", self.conditions.c2), ("conditions.c3", self.conditions.c3)] {
            positive(key, v)?;
        }
        if let Some(s) = &self.sweep {
            let nonempty = [!s.gamma.is_empty(), !s.width.is_empty(), !s.eta.is_empty()];
            if nonempty.iter().filter(|&&b| b).count() != 1 {
                return Err(bad("sweep", "exactly one of gamma, width, eta must be non-empty"));
            }
            for &w in &s.width {
                at_least_one("sweep.width", w)?;
            }
            for &e in &s.eta {
                positive("sweep.eta", e)?;
            }
        }
        if let Some(g) = &self.grad_check {
            at_least_one("grad_check.n", g.n)?;
            at_least_one("grad_check.d", g.d)?;
            at_least_one("grad_check.m", g.m)?;
            at_least_one("grad_check.unroll_steps", g.unroll_steps)?;
            positive("grad_check.adjoint_tol", g.adjoint_tol)?;
            positive("grad_check.fd_step", g.fd_step)?;
            positive("grad_check.tolerance", g.tolerance)?;
            if !(g.kink_margin >= 0.0) {
                return Err(bad("grad_check.kink_margin", "must be nonnegative"));
            }
            if g.n * g.m > GRAD_CHECK_LIMIT || g.d * g.m > GRAD_CHECK_LIMIT {
                return Err(bad("grad_check", format!("desk scale only: N*m and d*m must not exceed {GRAD_CHECK_LIMIT}")));
            }
        }
        Ok(())
    }

    pub fn require_data(&self) -> Result<&DataSpec, CliError> {
        self.data.as_ref().ok_or_else(|| bad("data", "missing section"))
    }

    pub fn require_init(&self) -> Result<&InitSpec, CliError> {
        self.init.as_ref().ok_or_else(|| bad("init", "missing section"))
    }

    pub fn require_train(&self) -> Result<&TrainSpec, CliError> {
        self.train.as_ref().ok_or_else(|| bad("train", "missing section"))
    }
}

/// Training and optional test data. Rows are normalized to unit norm.
pub fn build_data(spec: &DataSpec, seed: u64) -> Result<(Dataset, Option<Dataset>), CliError> {
    match spec {
        DataSpec::Synthetic { n, d, label_mode, test_n } => {
            let all: Dataset = synthetic(n + test_n, *d, seed, *label_mode)?;
            if *test_n == 0 {
                return Ok((all, None));
            }
            let train = Dataset::new(all.x.rows(0, *n).into_owned(), all.y.rows(0, *n).into_owned())?;
            let test = Dataset::new(all.x.rows(*n, *test_n).into_owned(), all.y.rows(*n, *test_n).into_owned())?;
            Ok((train, Some(test)))
        }
        DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
            n_per_class,
            test_per_class,
        } => {
            let raw = load_idx(train_images, train_labels)?;
            let classes = (classes[0], classes[1]);
            let (mut train, mut test): (Dataset, Option<Dataset>) = match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let train = make_binary_subset(&raw, classes, *n_per_class, seed)?;
                    let test = if *test_per_class > 0 {
                        let raw_test = load_idx(ti, tl)?;
                        Some(make_binary_subset(&raw_test, classes, *test_per_class, seed.wrapping_add(1))?)
                    } else {
                        None
                    };
                    (train, test)
                }
                _ if *test_per_class > 0 => {
                    let (train, test) = make_binary_split(&raw, classes, *n_per_class, *test_per_class, seed)?;
                    (train, Some(test))
                }
                _ => (make_binary_subset(&raw, classes, *n_per_class, seed)?, None),
            };
            train.x = normalize_rows(&train.x)?;
            if let Some(t) = test.as_mut() {
                t.x = normalize_rows(&t.x)?;
            }
            Ok((train, test))
        }
    }
}

/// Parameters and the `beta` actually applied (1 unless auto-scaled).
pub fn build_params(
    spec: &InitSpec,
    data: &Dataset,
    seed: u64,
    conditions: &Conditions,
) -> Result<(Params, f64), CliError> {
    match spec {
        InitSpec::Deterministic {
            width,
            beta,
            auto_scale,
            gamma0,
        } => {
            let p = deterministic_init_with(&data.x, *width, *beta, seed, *gamma0, conditions.c2)?;
            if *auto_scale {
                let s = scale_to_satisfy(&p, data, &conditions.slack(), &SolveOptions::strict())?;
                Ok((s.params, beta * s.beta))
            } else {
                Ok((p, *beta))
            }
        }
        InitSpec::Random { width } => Ok((random_init(data.d(), *width, seed)?, 1.0)),
        InitSpec::Identity { width, gamma } => {
            if *gamma >= 1.0 {
                return Err(Error::GammaTooLarge { gamma0: *gamma }.into());
            }
            Ok((identity_init(data.d(), *width, *gamma, seed)?, 1.0))
        }
        InitSpec::Files { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("init.path: cannot read {}: {e}", path.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let p: Params = serde_path_to_error::deserialize(de).map_err(|e| {
                let path = e.path().to_string();
                CliError::Config(format!("init.path: {path}: {}", e.into_inner()))
            })?;
            p.validate()?;
            if p.d() != data.d() {
                return Err(CliError::Config(format!("init.path: parameters expect d = {}, data has {}", p.d(), data.d())));
            }
            Ok((p, 1.0))
        }
    }
}

impl SolverSpec {
    pub fn options(&self, mode: Mode) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            relative: self.relative,
            check_contraction: mode == Mode::Strict,
        }
    }
}

pub fn solver_for(spec: Option<SolverSpec>, mode: Mode) -> SolveOptions {
    match (spec, mode) {
        (Some(s), m) => s.options(m),
        (None, Mode::Strict) => SolveOptions::strict(),
        (None, Mode::Experiment) => SolveOptions::experiment(),
    }
}
