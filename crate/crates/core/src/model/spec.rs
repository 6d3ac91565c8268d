//! Declarative model description and its configuration-file form.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::hyper::HyperPrior;
use super::partition::PartitionPlan;
use crate::error::{Error, Result};
use crate::gmrf::{EffectSpec, HyperRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Poisson,
    Gamma,
    Bernoulli,
    LgcpLattice,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Gamma => "gamma",
            Family::Bernoulli => "bernoulli",
            Family::LgcpLattice => "lgcp_lattice",
        }
    }

    pub fn canonical_link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Bernoulli => Link::Logit,
            _ => Link::Log,
        }
    }

    /// Whether the family carries its own precision-like hyperparameter.
    pub fn has_hyper(self) -> bool {
        matches!(self, Family::Gaussian | Family::Gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

/// One additive term of a linear predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Term {
    Intercept { intercept: String },
    Covariate { covariate: String, beta: String },
    Effect { effect: String, index: Vec<String> },
    Share { share: String, index: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodBlock {
    pub name: String,
    pub family: Family,
    pub link: Link,
    /// Name of the data table (file stem of the CSV).
    pub data: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<String>,
    /// Family hyperparameter: observation precision (gaussian) or shape (gamma).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<String>,
    pub predictor: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShareLink {
    pub source_effect: String,
    pub target_block: usize,
    pub alpha_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPrior {
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "default_fixed_precision")]
    pub precision: f64,
}

fn default_fixed_precision() -> f64 {
    0.001
}

impl Default for FixedPrior {
    fn default() -> Self {
        FixedPrior { mean: 0.0, precision: default_fixed_precision() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub effects: BTreeMap<String, EffectSpec>,
    #[serde(default)]
    pub fixed: BTreeMap<String, FixedPrior>,
    #[serde(default)]
    pub hyper_priors: BTreeMap<String, HyperPrior>,
    pub blocks: Vec<LikelihoodBlock>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shares: Vec<ShareLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionPlan>,
}

/// Parses and validates a model configuration document.
pub fn parse_model_config(text: &str) -> Result<ModelSpec> {
    let spec: ModelSpec = toml::from_str(text).map_err(|e| toml_error(text, &e, "document"))?;
    // `@` is reserved for the stand-ins created when partitioning
    if let Some(name) = spec.effects.keys().chain(spec.hyper_priors.keys()).find(|n| n.contains('@')) {
        return Err(Error::config(name.clone(), "names may not contain `@`"));
    }
    spec.validate()?;
    Ok(spec)
}

/// Config error located at the enclosing table header and the line and column of the offence.
pub(crate) fn toml_error(text: &str, e: &toml::de::Error, document: &str) -> Error {
    let Some(span) = e.span() else {
        return Error::config(document, e.message().to_string());
    };
    let before = &text[..span.start.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    let header = before.lines().rev().map(str::trim).find(|l| l.starts_with('[')).map(|h| h.trim_matches(|c| c == '[' || c == ']').to_string());
    let section = header.unwrap_or_else(|| document.to_string());
    Error::config(format!("[{section}] line {line}, column {col}"), e.message().to_string())
}

impl ModelSpec {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("document", e.to_string()))
    }

    /// The share link consumed by a `share` term of block `block`.
    pub fn share_for(&self, block: usize, source: &str) -> Option<&ShareLink> {
        self.shares.iter().find(|s| s.target_block == block && s.source_effect == source)
    }

    /// Every hyperparameter name with its role, in first-appearance order of blocks and effects.
    pub fn hyper_bindings(&self) -> Result<BTreeMap<String, HyperRole>> {
        let mut out: BTreeMap<String, HyperRole> = BTreeMap::new();
        let mut bind = |name: &str, role: HyperRole, loc: String| -> Result<()> {
            match out.get(name) {
                Some(r) if *r != role => Err(Error::config(
                    loc,
                    format!("hyperparameter `{name}` is used both as {r:?} and as {role:?}"),
                )),
                _ => {
                    out.insert(name.to_string(), role);
                    Ok(())
                }
            }
        };
        for (name, e) in &self.effects {
            for (h, role) in e.hyper_bindings() {
                bind(&h, role, format!("effects.{name}"))?;
            }
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if let Some(h) = &block.hyper {
                bind(h, HyperRole::Precision, format!("blocks[{b}].hyper"))?;
            }
        }
        for (k, s) in self.shares.iter().enumerate() {
            if s.fixed_alpha.is_none() {
                bind(&s.alpha_name, HyperRole::Scale, format!("shares[{k}].alpha_name"))?;
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in &self.effects {
            e.validate().map_err(|err| Error::config(format!("effects.{name}"), err.to_string()))?;
        }
        for (name, f) in &self.fixed {
            if !(f.precision > 0.0) || !f.mean.is_finite() {
                return Err(Error::config(format!("fixed.{name}"), "prior needs a finite mean and positive precision"));
            }
            if self.effects.contains_key(name) {
                return Err(Error::config(format!("fixed.{name}"), "name already used by an effect"));
            }
        }
        if self.blocks.is_empty() {
            return Err(Error::config("blocks", "at least one likelihood block is required"));
        }
        let mut block_names = BTreeSet::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let loc = |s: &str| format!("blocks[{b}]{s}");
            if !block_names.insert(block.name.as_str()) {
                return Err(Error::config(loc(".name"), format!("duplicate block name `{}`", block.name)));
            }
            if block.link != block.family.canonical_link() {
                return Err(Error::config(
                    loc(".link"),
                    format!("family {} cannot be used with link {:?}", block.family.name(), block.link),
                ));
            }
            match (block.family.has_hyper(), &block.hyper) {
                (true, None) => {
                    return Err(Error::config(loc(".hyper"), format!("family {} needs a hyperparameter name", block.family.name())))
                }
                (false, Some(_)) => {
                    return Err(Error::config(loc(".hyper"), format!("family {} has no hyperparameter", block.family.name())))
                }
                _ => {}
            }
            if block.family == Family::LgcpLattice && block.offset.is_none() {
                return Err(Error::config(loc(".offset"), "lgcp_lattice needs an offset column holding log cell areas"));
            }
            for (t, term) in block.predictor.iter().enumerate() {
                let tl = loc(&format!(".predictor[{t}]"));
                match term {
                    Term::Intercept { intercept: beta } | Term::Covariate { beta, .. } => {
                        if !self.fixed.contains_key(beta) {
                            return Err(Error::config(tl, format!("undeclared fixed effect `{beta}`")));
                        }
                    }
                    Term::Effect { effect, index } => {
                        let Some(e) = self.effects.get(effect) else {
                            return Err(Error::config(tl, format!("undeclared effect `{effect}`")));
                        };
                        if index.len() != e.index_arity() {
                            return Err(Error::config(tl, format!("effect `{effect}` needs {} index column(s)", e.index_arity())));
                        }
                    }
                    Term::Share { share, index } => {
                        let Some(e) = self.effects.get(share) else {
                            return Err(Error::config(tl, format!("undeclared effect `{share}`")));
                        };
                        if index.len() != e.index_arity() {
                            return Err(Error::config(tl, format!("effect `{share}` needs {} index column(s)", e.index_arity())));
                        }
                        let n = self.shares.iter().filter(|s| s.target_block == b && s.source_effect == *share).count();
                        if n != 1 {
                            return Err(Error::config(
                                tl,
                                format!("share of `{share}` needs exactly one share link targeting block {b}, found {n}"),
                            ));
                        }
                    }
                }
            }
        }
        let mut alpha_names = BTreeSet::new();
        for (k, s) in self.shares.iter().enumerate() {
            let loc = format!("shares[{k}]");
            if !self.effects.contains_key(&s.source_effect) {
                return Err(Error::config(loc, format!("undeclared effect `{}`", s.source_effect)));
            }
            if s.target_block >= self.blocks.len() {
                return Err(Error::config(loc, format!("target_block {} out of range", s.target_block)));
            }
            let used = self.blocks[s.target_block]
                .predictor
                .iter()
                .any(|t| matches!(t, Term::Share { share, .. } if *share == s.source_effect));
            if !used {
                return Err(Error::config(loc, format!("block {} has no share term for `{}`", s.target_block, s.source_effect)));
            }
            if !alpha_names.insert(s.alpha_name.as_str()) {
                return Err(Error::config(loc, format!("alpha name `{}` used by more than one share", s.alpha_name)));
            }
            match s.fixed_alpha {
                Some(a) if !a.is_finite() || a == 0.0 => {
                    return Err(Error::config(loc, "fixed_alpha must be finite and non-zero"));
                }
                Some(_) if self.hyper_priors.contains_key(&s.alpha_name) => {
                    return Err(Error::config(loc, format!("alpha `{}` is fixed and also has a prior", s.alpha_name)));
                }
                _ => {}
            }
        }
        let bindings = self.hyper_bindings()?;
        for name in bindings.keys() {
            if !self.hyper_priors.contains_key(name) {
                return Err(Error::config(format!("hyper_priors.{name}"), format!("hyperparameter `{name}` has no prior")));
            }
        }
        for (name, prior) in &self.hyper_priors {
            let Some(role) = bindings.get(name) else {
                return Err(Error::config(format!("hyper_priors.{name}"), format!("no hyperparameter named `{name}`")));
            };
            prior.validate(*role).map_err(|m| Error::config(format!("hyper_priors.{name}"), m))?;
        }
        if let Some(p) = &self.partition {
            p.validate(self)?;
        }
        Ok(())
    }

    /// Names of tables referenced by the blocks.
    pub fn tables(&self) -> BTreeSet<&str> {
        self.blocks.iter().map(|b| b.data.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[fixed.b0]

[hyper_priors.tau]
dist = "fixed"
value = 1.0

[[blocks]]
name = "obs"
family = "gaussian"
link = "identity"
data = "d"
response = "y"
hyper = "tau"
predictor = [{ intercept = "b0" }]
"#;

    #[test]
    fn minimal_gaussian_block() {
        let s = parse_model_config(MINIMAL).unwrap();
        assert_eq!(s.blocks.len(), 1);
        assert_eq!(s.effects.len(), 0);
        assert_eq!(s.fixed["b0"], FixedPrior { mean: 0.0, precision: 0.001 });
    }

    #[test]
    fn undeclared_effect_is_named() {
        let text = MINIMAL.replace(r#"[{ intercept = "b0" }]"#, r#"[{ intercept = "b0" }, { effect = "u2", index = ["i"] }]"#);
        let err = parse_model_config(&text).unwrap_err().to_string();
        assert!(err.contains("u2") && err.contains("blocks[0].predictor[1]"), "{err}");
    }

    #[test]
    fn unknown_family_reports_location() {
        let text = MINIMAL.replace("\"gaussian\"", "\"student\"");
        let err = parse_model_config(&text).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn bad_link_rejected() {
        let text = MINIMAL.replace("\"identity\"", "\"log\"");
        assert!(parse_model_config(&text).unwrap_err().to_string().contains("blocks[0].link"));
    }

    #[test]
    fn duplicate_prior_rejected() {
        let text = format!("{MINIMAL}\n[hyper_priors.tau]\ndist = \"flat\"\n");
        assert!(parse_model_config(&text).is_err());
    }

    #[test]
    fn missing_prior_rejected() {
        let text = MINIMAL.replace("[hyper_priors.tau]\ndist = \"fixed\"\nvalue = 1.0\n", "");
        let err = parse_model_config(&text).unwrap_err().to_string();
        assert!(err.contains("hyper_priors.tau"), "{err}");
    }

    #[test]
    fn round_trip() {
        let s = parse_model_config(MINIMAL).unwrap();
        let back = parse_model_config(&s.to_toml().unwrap()).unwrap();
        assert_eq!(s, back);
    }
}
