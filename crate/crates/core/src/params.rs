//! Typed hyperparameter spaces: declarations with bounds, current values,
//! tuning ranges with optional log-scale sampling, and internal-tuning
//! markers.

use crate::error::{Error, Result};
use crate::rng::RngState;
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    IntList(Vec<i64>),
}

impl ParamValue {
    pub fn as_int(&self) -> Result<i64> {
        match self {
            ParamValue::Int(v) => Ok(*v),
            other => Err(Error::invalid(format!("expected int, got {other}"))),
        }
    }

    pub fn as_usize(&self) -> Result<usize> {
        let v = self.as_int()?;
        usize::try_from(v).map_err(|_| Error::invalid(format!("expected non-negative int, got {v}")))
    }

    pub fn as_float(&self) -> Result<f64> {
        match self {
            ParamValue::Float(v) => Ok(*v),
            ParamValue::Int(v) => Ok(*v as f64),
            other => Err(Error::invalid(format!("expected float, got {other}"))),
        }
    }

    pub fn as_str(&self) -> Result<&str> {
        match self {
            ParamValue::Str(v) => Ok(v),
            other => Err(Error::invalid(format!("expected string, got {other}"))),
        }
    }

    pub fn as_bool(&self) -> Result<bool> {
        match self {
            ParamValue::Bool(v) => Ok(*v),
            other => Err(Error::invalid(format!("expected bool, got {other}"))),
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Str(v) => write!(f, "{v}"),
            ParamValue::Bool(v) => write!(f, "{v}"),
            ParamValue::IntList(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "[{}]", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    Int { lo: i64, hi: i64 },
    Float { lo: f64, hi: f64 },
    Categorical { levels: Vec<String> },
    Bool,
    /// Free-form entries (identifier-like strings, lists).
    Untyped,
}

/// Tuning declaration for one entry.
#[derive(Debug, Clone, PartialEq)]
pub enum TuneSpec {
    None,
    IntRange { lo: i64, hi: i64 },
    /// Bounds on the original scale; `logscale` samples log-uniformly.
    FloatRange { lo: f64, hi: f64, logscale: bool },
    Categories(Vec<String>),
    /// Tuned inside a single training run (epoch count via early stopping);
    /// excluded from offline sampling.
    Internal { upper: i64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDesc {
    pub kind: ParamKind,
    pub tune: TuneSpec,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, ParamDesc)>,
    values: BTreeMap<String, ParamValue>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, kind: ParamKind) -> &mut Self {
        self.entries.push((name.into(), ParamDesc { kind, tune: TuneSpec::None }));
        self
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn desc(&self, name: &str) -> Result<&ParamDesc> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Param { param: name.into(), msg: "not declared".into() })
    }

    fn check(&self, name: &str, value: &ParamValue) -> Result<()> {
        let desc = self.desc(name)?;
        let bad = |msg: String| Error::Param { param: name.into(), msg };
        match (&desc.kind, value) {
            (ParamKind::Int { lo, hi }, ParamValue::Int(v)) => {
                if v < lo || v > hi {
                    return Err(bad(format!("{v} outside [{lo}, {hi}]")));
                }
            }
            (ParamKind::Float { lo, hi }, ParamValue::Float(v)) => {
                if v < lo || v > hi {
                    return Err(bad(format!("{v} outside [{lo}, {hi}]")));
                }
            }
            (ParamKind::Float { lo, hi }, ParamValue::Int(v)) => {
                let v = *v as f64;
                if v < *lo || v > *hi {
                    return Err(bad(format!("{v} outside [{lo}, {hi}]")));
                }
            }
            (ParamKind::Categorical { levels }, ParamValue::Str(v)) => {
                if !levels.contains(v) {
                    return Err(bad(format!("`{v}` not among {levels:?}")));
                }
            }
            (ParamKind::Bool, ParamValue::Bool(_)) | (ParamKind::Untyped, _) => {}
            (kind, value) => {
                return Err(bad(format!("value {value} does not fit kind {kind:?}")));
            }
        }
        Ok(())
    }

    /// Assign a value; rejected at set time when outside bounds/levels.
    pub fn set(&mut self, name: &str, value: ParamValue) -> Result<()> {
        self.check(name, &value)?;
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name)
    }

    pub fn values(&self) -> &BTreeMap<String, ParamValue> {
        &self.values
    }

    /// Declare how an entry is tuned. Log-scale demands positive float
    /// bounds.
    pub fn tune(&mut self, name: &str, spec: TuneSpec) -> Result<()> {
        if let TuneSpec::FloatRange { lo, hi, logscale } = &spec {
            if lo >= hi {
                return Err(Error::Param { param: name.into(), msg: "empty range".into() });
            }
            if *logscale && *lo <= 0.0 {
                return Err(Error::Param {
                    param: name.into(),
                    msg: "logscale requires positive bounds".into(),
                });
            }
        }
        let entry = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Param { param: name.into(), msg: "not declared".into() })?;
        entry.1.tune = spec;
        Ok(())
    }

    /// Entries with an offline tuning declaration.
    pub fn tunable(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, d)| !matches!(d.tune, TuneSpec::None | TuneSpec::Internal { .. }))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Entries tuned internally (by early stopping).
    pub fn internal(&self) -> Vec<(&str, i64)> {
        self.entries
            .iter()
            .filter_map(|(n, d)| match d.tune {
                TuneSpec::Internal { upper } => Some((n.as_str(), upper)),
                _ => None,
            })
            .collect()
    }

    /// Draw one configuration from every offline tuning range.
    pub fn sample(&self, rng: &mut RngState) -> BTreeMap<String, ParamValue> {
        let mut out = BTreeMap::new();
        for (name, desc) in &self.entries {
            let value = match &desc.tune {
                TuneSpec::None | TuneSpec::Internal { .. } => continue,
                TuneSpec::IntRange { lo, hi } => {
                    let span = (hi - lo + 1) as u64;
                    ParamValue::Int(lo + rng.below(span) as i64)
                }
                TuneSpec::FloatRange { lo, hi, logscale } => {
                    if *logscale {
                        ParamValue::Float(rng.uniform(lo.ln(), hi.ln()).exp())
                    } else {
                        ParamValue::Float(rng.uniform(*lo, *hi))
                    }
                }
                TuneSpec::Categories(levels) => {
                    ParamValue::Str(levels[rng.below(levels.len() as u64) as usize].clone())
                }
            };
            out.insert(name.clone(), value);
        }
        out
    }

    /// Union of prefixed sets; every entry lands under exactly one prefixed
    /// name, collisions are an error.
    pub fn prefixed_union(parts: &[(&str, &ParamSet)]) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (prefix, ps) in parts {
            for (name, desc) in &ps.entries {
                let full = if prefix.is_empty() {
                    name.clone()
                } else {
                    format!("{prefix}.{name}")
                };
                if out.contains(&full) {
                    return Err(Error::Param {
                        param: full,
                        msg: "prefix collision in merged parameter set".into(),
                    });
                }
                out.entries.push((full.clone(), desc.clone()));
                if let Some(v) = ps.values.get(name) {
                    out.values.insert(full, v.clone());
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.declare("n_blocks", ParamKind::Int { lo: 1, hi: 16 });
        ps.declare("lr", ParamKind::Float { lo: 0.0, hi: 1.0 });
        ps.declare(
            "activation",
            ParamKind::Categorical { levels: vec!["relu".into(), "sigmoid".into()] },
        );
        ps.declare("epochs", ParamKind::Int { lo: 0, hi: 10_000 });
        ps
    }

    #[test]
    fn set_rejects_out_of_bounds() {
        let mut ps = space();
        assert!(ps.set("n_blocks", ParamValue::Int(3)).is_ok());
        assert!(ps.set("n_blocks", ParamValue::Int(0)).is_err());
        assert!(ps.set("lr", ParamValue::Float(2.0)).is_err());
        assert!(ps.set("activation", ParamValue::Str("tanh".into())).is_err());
        assert!(ps.set("missing", ParamValue::Int(1)).is_err());
    }

    #[test]
    fn logscale_requires_positive_bounds() {
        let mut ps = space();
        assert!(ps
            .tune("lr", TuneSpec::FloatRange { lo: 0.0, hi: 0.1, logscale: true })
            .is_err());
        assert!(ps
            .tune("lr", TuneSpec::FloatRange { lo: 1e-4, hi: 1e-1, logscale: true })
            .is_ok());
    }

    #[test]
    fn int_sampling_frequencies_are_uniform() {
        let mut ps = space();
        ps.tune("n_blocks", TuneSpec::IntRange { lo: 1, hi: 5 }).unwrap();
        let mut rng = RngState::new(7);
        let mut counts = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            let config = ps.sample(&mut rng);
            let v = config["n_blocks"].as_int().unwrap();
            counts[(v - 1) as usize] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.2).abs() < 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn logscale_sampling_median_near_geometric_midpoint() {
        let mut ps = space();
        ps.tune("lr", TuneSpec::FloatRange { lo: 1e-4, hi: 1e-1, logscale: true }).unwrap();
        let mut rng = RngState::new(9);
        let mut draws: Vec<f64> = (0..10_000)
            .map(|_| ps.sample(&mut rng)["lr"].as_float().unwrap())
            .collect();
        assert!(draws.iter().all(|&v| (1e-4..=1e-1).contains(&v)));
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = draws[draws.len() / 2];
        let log_median = median.log10();
        assert!((log_median + 2.5).abs() < 0.5, "log10 median {log_median}");
    }

    #[test]
    fn categorical_sampling_stays_within_levels() {
        let mut ps = space();
        ps.tune("activation", TuneSpec::Categories(vec!["relu".into(), "sigmoid".into()]))
            .unwrap();
        let mut rng = RngState::new(3);
        for _ in 0..200 {
            let v = ps.sample(&mut rng)["activation"].clone();
            let s = v.as_str().unwrap().to_string();
            assert!(s == "relu" || s == "sigmoid");
        }
    }

    #[test]
    fn bounds_hold_over_many_draws() {
        let mut ps = space();
        ps.tune("n_blocks", TuneSpec::IntRange { lo: 1, hi: 5 }).unwrap();
        ps.tune("lr", TuneSpec::FloatRange { lo: 1e-4, hi: 1e-1, logscale: true }).unwrap();
        let mut rng = RngState::new(1);
        for _ in 0..100_000 {
            let c = ps.sample(&mut rng);
            let b = c["n_blocks"].as_int().unwrap();
            let lr = c["lr"].as_float().unwrap();
            assert!((1..=5).contains(&b));
            assert!((1e-4..=1e-1).contains(&lr));
        }
    }

    #[test]
    fn internal_entries_are_excluded_from_sampling() {
        let mut ps = space();
        ps.tune("epochs", TuneSpec::Internal { upper: 100 }).unwrap();
        ps.tune("n_blocks", TuneSpec::IntRange { lo: 1, hi: 5 }).unwrap();
        let mut rng = RngState::new(1);
        let config = ps.sample(&mut rng);
        assert!(!config.contains_key("epochs"));
        assert_eq!(ps.internal(), vec![("epochs", 100)]);
    }

    #[test]
    fn prefixed_union_partitions_names() {
        let mut a = ParamSet::new();
        a.declare("lr", ParamKind::Float { lo: 0.0, hi: 1.0 });
        a.set("lr", ParamValue::Float(0.5)).unwrap();
        let mut b = ParamSet::new();
        b.declare("p", ParamKind::Float { lo: 0.0, hi: 1.0 });
        let merged = ParamSet::prefixed_union(&[("opt", &a), ("loss", &b)]).unwrap();
        assert!(merged.contains("opt.lr"));
        assert!(merged.contains("loss.p"));
        assert_eq!(merged.get("opt.lr"), Some(&ParamValue::Float(0.5)));
        // Same prefix twice collides.
        assert!(ParamSet::prefixed_union(&[("opt", &a), ("opt", &a)]).is_err());
    }
}
