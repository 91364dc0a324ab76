//! Search spaces and deterministic configuration sampling.
//!
//! A [`SearchSpace`] is a flat list of named [`Dimension`]s. Sampling is
//! counter-based: the values of configuration `config_id` depend only on the
//! space, the experiment seed and the id, never on how many other
//! configurations were drawn before it.
//!
//! The on-disk form is TOML with one `[[dimension]]` table per dimension:
//!
//! ```toml
//! [[dimension]]
//! name = "learning_rate"
//! kind = "continuous-log"
//! lower = 1e-4
//! upper = 1e-1
//!
//! [[dimension]]
//! name = "optimizer"
//! kind = "categorical"
//! choices = ["sgd", "adam"]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// A single hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            // `{:?}` on f64 is the shortest representation that round-trips.
            ParamValue::Float(v) => write!(f, "{v:?}"),
            ParamValue::Str(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DimensionKind {
    #[serde(rename = "continuous-linear", alias = "linear")]
    Linear { lower: f64, upper: f64 },
    #[serde(rename = "continuous-log", alias = "log")]
    Log { lower: f64, upper: f64 },
    #[serde(rename = "integer-range", alias = "integer")]
    Integer { lower: i64, upper: i64 },
    #[serde(rename = "categorical")]
    Categorical { choices: Vec<ParamValue> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    #[serde(flatten)]
    pub kind: DimensionKind,
}

impl Dimension {
    pub fn linear(name: &str, lower: f64, upper: f64) -> Self {
        Self { name: name.to_owned(), kind: DimensionKind::Linear { lower, upper } }
    }

    pub fn log(name: &str, lower: f64, upper: f64) -> Self {
        Self { name: name.to_owned(), kind: DimensionKind::Log { lower, upper } }
    }

    pub fn integer(name: &str, lower: i64, upper: i64) -> Self {
        Self { name: name.to_owned(), kind: DimensionKind::Integer { lower, upper } }
    }

    pub fn categorical<I, V>(name: &str, choices: I) -> Self
    where
        I: IntoIterator<Item = V>,
        V: Into<ParamValue>,
    {
        Self {
            name: name.to_owned(),
            kind: DimensionKind::Categorical { choices: choices.into_iter().map(Into::into).collect() },
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> ParamValue {
        match &self.kind {
            DimensionKind::Linear { lower, upper } => ParamValue::Float(rng.random_range(*lower..*upper)),
            DimensionKind::Log { lower, upper } => {
                let x = rng.random_range(lower.ln()..upper.ln());
                // exp(ln(upper)) can land a hair outside the range.
                ParamValue::Float(x.exp().clamp(*lower, *upper))
            }
            DimensionKind::Integer { lower, upper } => ParamValue::Int(rng.random_range(*lower..=*upper)),
            DimensionKind::Categorical { choices } => choices[rng.random_range(0..choices.len())].clone(),
        }
    }

    /// Whether `value` is a legal value of this dimension.
    pub fn contains(&self, value: &ParamValue) -> bool {
        match (&self.kind, value) {
            (DimensionKind::Linear { lower, upper }, ParamValue::Float(v))
            | (DimensionKind::Log { lower, upper }, ParamValue::Float(v)) => v >= lower && v <= upper,
            (DimensionKind::Integer { lower, upper }, ParamValue::Int(v)) => v >= lower && v <= upper,
            (DimensionKind::Categorical { choices }, v) => choices.contains(v),
            _ => false,
        }
    }
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        ParamValue::Str(v.to_owned())
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Float(v)
    }
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        ParamValue::Int(v)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(rename = "dimension", default)]
    pub dimensions: Vec<Dimension>,
}

/// One broken dimension invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub dimension: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.dimension, self.message)
    }
}

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("invalid search space: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("cannot parse search space: {0}")]
    Parse(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// A concrete point of a search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub config_id: u64,
    pub values: BTreeMap<String, ParamValue>,
    pub sample_seed: u64,
}

impl SearchSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Self {
        Self { dimensions }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SpaceError> {
        toml::from_str(text).map_err(|e| SpaceError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("search space serializes to toml")
    }

    /// Returns every violated dimension invariant; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for dim in &self.dimensions {
            let mut bad = |message: &str| {
                out.push(Violation { dimension: dim.name.clone(), message: message.to_owned() })
            };
            if dim.name.is_empty() {
                bad("name must not be empty");
            }
            if !seen.insert(dim.name.as_str()) {
                bad("duplicate name");
            }
            match &dim.kind {
                DimensionKind::Linear { lower, upper } | DimensionKind::Log { lower, upper } => {
                    if !lower.is_finite() || !upper.is_finite() {
                        bad("bounds must be finite");
                    } else if lower >= upper {
                        bad("lower bound must be less than upper bound");
                    }
                    if matches!(dim.kind, DimensionKind::Log { .. }) && *lower <= 0.0 {
                        bad("log scale requires positive lower bound");
                    }
                }
                DimensionKind::Integer { lower, upper } => {
                    if lower >= upper {
                        bad("lower bound must be less than upper bound");
                    }
                }
                DimensionKind::Categorical { choices } => {
                    if choices.is_empty() {
                        bad("categorical dimension requires at least one choice");
                    }
                }
            }
        }
        out
    }

    pub fn check(&self) -> Result<(), SpaceError> {
        let v = self.validate();
        if v.is_empty() { Ok(()) } else { Err(SpaceError::Invalid(v)) }
    }

    /// Draws configuration `config_id` of the experiment seeded with `experiment_seed`.
    pub fn sample(&self, experiment_seed: u64, config_id: u64) -> Result<Configuration, SpaceError> {
        self.check()?;
        Ok(self.sample_unchecked(experiment_seed, config_id))
    }

    /// Like [`SearchSpace::sample`] for a space already known to be valid.
    pub fn sample_unchecked(&self, experiment_seed: u64, config_id: u64) -> Configuration {
        let sample_seed = sample_seed(experiment_seed, config_id);
        let mut rng = seed::rng_for(&[sample_seed]);
        let values = self
            .dimensions
            .iter()
            .map(|d| (d.name.clone(), d.draw(&mut rng)))
            .collect();
        Configuration { config_id, values, sample_seed }
    }

    /// Whether `config` assigns every dimension exactly one in-range value.
    pub fn admits(&self, config: &Configuration) -> bool {
        config.values.len() == self.dimensions.len()
            && self
                .dimensions
                .iter()
                .all(|d| config.values.get(&d.name).is_some_and(|v| d.contains(v)))
    }
}

pub fn sample_seed(experiment_seed: u64, config_id: u64) -> u64 {
    seed::derive(&[experiment_seed, config_id])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lr_space() -> SearchSpace {
        SearchSpace::new(vec![Dimension::log("lr", 1e-4, 1e-1)])
    }

    #[test]
    fn single_linear_dimension_is_valid() {
        let space = SearchSpace::new(vec![Dimension::linear("momentum", 0.1, 1.0)]);
        assert!(space.validate().is_empty());
    }

    #[test]
    fn log_with_zero_lower_bound_is_rejected() {
        let space = SearchSpace::new(vec![Dimension::log("lr", 0.0, 1.0)]);
        let v = space.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].dimension, "lr");
        assert_eq!(v[0].message, "log scale requires positive lower bound");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let space = SearchSpace::new(vec![Dimension::linear("lr", 0.0, 1.0), Dimension::linear("lr", 0.0, 2.0)]);
        let v = space.validate();
        assert_eq!(v, vec![Violation { dimension: "lr".into(), message: "duplicate name".into() }]);
    }

    #[test]
    fn reports_every_violation() {
        let space = SearchSpace::new(vec![
            Dimension::integer("layers", 5, 5),
            Dimension::categorical::<_, &str>("opt", []),
            Dimension::linear("wd", f64::NAN, 1.0),
        ]);
        let names: Vec<_> = space.validate().into_iter().map(|v| v.dimension).collect();
        assert_eq!(names, vec!["layers", "opt", "wd"]);
    }

    #[test]
    fn single_choice_categorical_is_constant() {
        let space = SearchSpace::new(vec![Dimension::categorical("opt", ["sgd"])]);
        for seed in 0..50 {
            let c = space.sample(seed, seed * 3).unwrap();
            assert_eq!(c.values["opt"], ParamValue::Str("sgd".into()));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_bounds() {
        let space = SearchSpace::new(vec![
            Dimension::log("lr", 1e-4, 1e-1),
            Dimension::linear("momentum", 0.5, 0.99),
            Dimension::integer("layers", 1, 8),
            Dimension::categorical("act", ["relu", "tanh"]),
        ]);
        for id in 0..200 {
            let a = space.sample(42, id).unwrap();
            let b = space.sample(42, id).unwrap();
            assert_eq!(a, b);
            assert!(space.admits(&a));
        }
        assert_ne!(space.sample(42, 0).unwrap().values, space.sample(43, 0).unwrap().values);
    }

    #[test]
    fn sampling_an_invalid_space_fails() {
        let space = SearchSpace::new(vec![Dimension::log("lr", -1.0, 1.0)]);
        assert!(matches!(space.sample(1, 0), Err(SpaceError::Invalid(_))));
    }

    #[test]
    fn log_uniform_first_decade_fraction() {
        // Direct Monte-Carlo: a log-uniform draw on [1e-4, 1e-1] spans three
        // decades, so the first decade receives a third of the mass.
        let space = lr_space();
        let n = 100_000;
        let hits = (0..n)
            .filter(|&id| match space.sample_unchecked(9, id).values["lr"] {
                ParamValue::Float(v) => v <= 1e-3,
                _ => unreachable!(),
            })
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 1.0 / 3.0).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
[[dimension]]
name = "lr"
kind = "continuous-log"
lower = 1e-4
upper = 0.1

[[dimension]]
name = "layers"
kind = "integer-range"
lower = 1
upper = 4

[[dimension]]
name = "opt"
kind = "categorical"
choices = ["sgd", "adam"]
"#;
        let space = SearchSpace::from_toml_str(text).unwrap();
        assert_eq!(space.dimensions.len(), 3);
        assert!(space.validate().is_empty());
        let again = SearchSpace::from_toml_str(&space.to_toml_string()).unwrap();
        assert_eq!(space, again);
    }

    #[test]
    fn float_values_round_trip_through_json() {
        let space = lr_space();
        for id in 0..100 {
            let c = space.sample_unchecked(5, id);
            let text = serde_json::to_string(&c).unwrap();
            let back: Configuration = serde_json::from_str(&text).unwrap();
            assert_eq!(c, back);
        }
    }
}
