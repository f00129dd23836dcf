//! Experiment configuration: TOML file values, overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use ipsg_core::optimizers::{BaselineKind, BaselineParams, IpsgParams, Method, MethodId, StepSize};

/// File layout; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub agents: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub eps_tol: Option<f64>,
    pub window: Option<usize>,
    pub t_max: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub lazy_agents: Option<bool>,
    pub svg: Option<bool>,
    pub ipsg: Option<IpsgSection>,
    pub sgd: Option<BaselineSection>,
    pub adagrad: Option<BaselineSection>,
    pub adam: Option<BaselineSection>,
    pub amsgrad: Option<BaselineSection>,
}

#[derive(Debug, Default, Deserialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
pub struct IpsgSection {
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Default, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    /// A number or a schedule such as `"0.5/sqrt(t)"`.
    pub alpha: Option<StepValue>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Debug, Deserialize, Clone)]
#[serde(untagged)]
pub enum StepValue {
    Number(f64),
    Text(String),
}

impl StepValue {
    pub fn to_step(&self) -> Result<StepSize> {
        Ok(match self {
            StepValue::Number(v) => format!("{v}").parse()?,
            StepValue::Text(s) => s.parse()?,
        })
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn section(&self, id: MethodId) -> Option<BaselineSection> {
        match id {
            MethodId::Sgd => self.sgd.clone(),
            MethodId::AdaGrad => self.adagrad.clone(),
            MethodId::Adam => self.adam.clone(),
            MethodId::AmsGrad => self.amsgrad.clone(),
            MethodId::Ipsg => None,
        }
    }
}

/// Flag-level overrides for the step parameters.
#[derive(Debug, Default, Clone, Copy)]
pub struct ParamFlags {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub delta: Option<f64>,
}

/// Applies file sections and then flags on top of `base`.
pub fn resolve_method(base: Method, file: &ConfigFile, flags: ParamFlags) -> Result<Method> {
    let method = match base {
        Method::Ipsg(mut p) => {
            if let Some(s) = file.ipsg {
                apply_ipsg(&mut p, s);
            }
            apply_ipsg(&mut p, IpsgSection { alpha: flags.alpha, delta: flags.delta, beta: flags.beta });
            Method::Ipsg(p)
        }
        Method::Baseline(mut p) => {
            if let Some(s) = file.section(Method::Baseline(p).id()) {
                apply_baseline(&mut p, &s)?;
            }
            if let Some(a) = flags.alpha {
                p.step = match p.step {
                    StepSize::Constant(_) => StepSize::Constant(a),
                    StepSize::InvSqrt(_) => StepSize::InvSqrt(a),
                    StepSize::Inv(_) => StepSize::Inv(a),
                };
            }
            if p.kind != BaselineKind::Sgd && flags.beta.is_some() {
                bail!("--beta sets the IPSG regularizer; use beta1/beta2 in the config file for {}", Method::Baseline(p).id());
            }
            Method::Baseline(p)
        }
    };
    method.validate()?;
    Ok(method)
}

fn apply_ipsg(p: &mut IpsgParams, s: IpsgSection) {
    if let Some(v) = s.alpha {
        p.alpha = v;
    }
    if let Some(v) = s.delta {
        p.delta = v;
    }
    if let Some(v) = s.beta {
        p.beta = v;
    }
}

fn apply_baseline(p: &mut BaselineParams, s: &BaselineSection) -> Result<()> {
    if let Some(a) = &s.alpha {
        p.step = a.to_step()?;
    }
    if let Some(v) = s.beta1 {
        p.beta1 = v;
    }
    if let Some(v) = s.beta2 {
        p.beta2 = v;
    }
    if let Some(v) = s.eps {
        p.eps = v;
    }
    Ok(())
}

/// Parses `1,2,3` and `1..5` (inclusive) seed lists.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
            if b < a {
                bail!("empty seed range '{part}'");
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed '{part}'"))?);
        }
    }
    if out.is_empty() {
        bail!("no seeds given");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds() {
        assert_eq!(parse_seeds("1,2, 5").unwrap(), vec![1, 2, 5]);
        assert_eq!(parse_seeds("3..5").unwrap(), vec![3, 4, 5]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("5..3").is_err());
    }

    #[test]
    fn file_then_flags() {
        let file: ConfigFile = toml::from_str(
            "[ipsg]\nalpha = 0.2\nbeta = 3.0\n[adam]\nalpha = \"0.3/sqrt(t)\"\nbeta2 = 0.99\n",
        )
        .unwrap();
        let base = Method::Ipsg(IpsgParams { alpha: 0.1, delta: 1.0, beta: 1.0 });
        let flags = ParamFlags { delta: Some(0.5), ..Default::default() };
        match resolve_method(base, &file, flags).unwrap() {
            Method::Ipsg(p) => assert_eq!(p, IpsgParams { alpha: 0.2, delta: 0.5, beta: 3.0 }),
            _ => unreachable!(),
        }
        let base = Method::Baseline(BaselineParams::adam(StepSize::Constant(0.1), 0.9, 0.999, 1e-7));
        match resolve_method(base, &file, ParamFlags::default()).unwrap() {
            Method::Baseline(p) => {
                assert_eq!(p.step, StepSize::InvSqrt(0.3));
                assert_eq!(p.beta2, 0.99);
            }
            _ => unreachable!(),
        }
        assert!(toml::from_str::<ConfigFile>("bogus = 1").is_err());
    }
}
