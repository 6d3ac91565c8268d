//! Splitting a model and its data into an ordered sequence of sub-models.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::spec::{ModelSpec, ShareLink, Term};
use crate::error::{Error, Result};
use crate::gmrf::{EffectKind, EffectSpec, HyperRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    ByLikelihoodGroup,
    ByRowBlocks,
    ByTimeBlocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    /// `by_likelihood_group`: block names of each partition, in processing order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<Vec<String>>,
    /// `by_row_blocks` / `by_time_blocks`: number of equal contiguous groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// `by_row_blocks`: column holding partition labels 1..n instead of an equal split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    /// `by_time_blocks`: column with the time-slice index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_column: Option<String>,
    /// `by_time_blocks`: explicit partition label (1..n) of every time slice; must be non-decreasing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub time_groups: Vec<usize>,
}

impl PartitionPlan {
    pub fn by_likelihood_group(groups: Vec<Vec<String>>) -> Self {
        PartitionPlan { mode: PartitionMode::ByLikelihoodGroup, groups, n: None, label_column: None, time_column: None, time_groups: vec![] }
    }

    pub fn by_row_blocks(n: usize) -> Self {
        PartitionPlan { mode: PartitionMode::ByRowBlocks, groups: vec![], n: Some(n), label_column: None, time_column: None, time_groups: vec![] }
    }

    pub fn by_time_blocks(time_column: &str, n: usize) -> Self {
        PartitionPlan {
            mode: PartitionMode::ByTimeBlocks,
            groups: vec![],
            n: Some(n),
            label_column: None,
            time_column: Some(time_column.into()),
            time_groups: vec![],
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let err = |m: String| Err(Error::config("partition", m));
        match self.mode {
            PartitionMode::ByLikelihoodGroup => {
                if self.groups.is_empty() || self.groups.iter().any(|g| g.is_empty()) {
                    return err("by_likelihood_group needs non-empty `groups`".into());
                }
                let mut seen = BTreeSet::new();
                for name in self.groups.iter().flatten() {
                    if !spec.blocks.iter().any(|b| &b.name == name) {
                        return err(format!("unknown block `{name}` in groups"));
                    }
                    if !seen.insert(name) {
                        return err(format!("block `{name}` appears in more than one group"));
                    }
                }
                if seen.len() != spec.blocks.len() {
                    return err("groups must cover every block".into());
                }
            }
            PartitionMode::ByRowBlocks => {
                if self.n.is_none() && self.label_column.is_none() {
                    return err("by_row_blocks needs `n` or `label_column`".into());
                }
                if self.n == Some(0) {
                    return err("`n` must be positive".into());
                }
            }
            PartitionMode::ByTimeBlocks => {
                if self.time_column.is_none() {
                    return err("by_time_blocks needs `time_column`".into());
                }
                if self.n.is_none() && self.time_groups.is_empty() {
                    return err("by_time_blocks needs `n` or `time_groups`".into());
                }
                if self.n == Some(0) {
                    return err("`n` must be positive".into());
                }
                if !self.time_groups.is_empty() {
                    let ok = self.time_groups[0] == 1 && self.time_groups.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1);
                    if !ok {
                        return err("time_groups must start at 1 and assign contiguous time slices".into());
                    }
                }
            }
        }
        Ok(())
    }
}

/// How an effect of a sub-model relates to the full model.
#[derive(Debug, Clone, PartialEq)]
pub enum EffectRole {
    /// Appears with identical nodes in at least two partitions; pooled by consensus.
    Shared,
    /// Only in this partition; `node_map[i]` is the global node of local node `i`.
    Local { node_map: Vec<usize> },
    /// Stand-in for an α-scaled share whose source is absent from this partition.
    Copy { source: String, alpha_name: String },
}

#[derive(Debug, Clone)]
pub struct Partition {
    /// 1-based position in the sequence.
    pub label: usize,
    pub spec: ModelSpec,
    pub data: Dataset,
    /// Original row indices of each sub-table.
    pub rows: BTreeMap<String, Vec<usize>>,
    pub effects: BTreeMap<String, EffectRole>,
}

#[derive(Debug, Clone)]
pub struct PartitionedModel {
    pub parts: Vec<Partition>,
    pub shared: BTreeSet<String>,
}

/// Name of the stand-in effect for `source` scaled by `alpha`.
pub fn copy_name(source: &str, alpha: &str) -> String {
    format!("{source}@{alpha}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slice {
    Whole,
    ChildA,
    ChildB,
}

fn term_index(t: &Term) -> Option<(&str, &[String])> {
    match t {
        Term::Effect { effect, index } => Some((effect, index)),
        Term::Share { share, index } => Some((share, index)),
        _ => None,
    }
}

/// Which effects (or kronecker children) are indexed by the time column, and the number of slices.
fn time_structure(spec: &ModelSpec, time_col: &str) -> Result<(Option<usize>, BTreeMap<String, Slice>)> {
    let mut found: BTreeMap<String, Slice> = BTreeMap::new();
    let mut slices: Option<usize> = None;
    for (b, block) in spec.blocks.iter().enumerate() {
        for (t, term) in block.predictor.iter().enumerate() {
            let Some((name, index)) = term_index(term) else { continue };
            let e = &spec.effects[name];
            let pos = index.iter().position(|c| c == time_col);
            let loc = format!("blocks[{b}].predictor[{t}]");
            let slice = match (pos, e.kind) {
                (None, _) => None,
                (Some(0), EffectKind::Kronecker) => Some((Slice::ChildA, e.a.as_deref().unwrap())),
                (Some(_), EffectKind::Kronecker) => Some((Slice::ChildB, e.b.as_deref().unwrap())),
                (Some(_), _) => Some((Slice::Whole, e)),
            };
            let prev = found.get(name).copied();
            match slice {
                None if prev.is_some() => {
                    return Err(Error::config(loc, format!("effect `{name}` is indexed by `{time_col}` elsewhere but not here")))
                }
                None => {}
                Some((s, child)) => {
                    if prev.is_some_and(|p| p != s) {
                        return Err(Error::config(loc, format!("effect `{name}` is indexed by time inconsistently")));
                    }
                    if !matches!(child.kind, EffectKind::Iid | EffectKind::Rw1 | EffectKind::Rw2 | EffectKind::Ar1) {
                        return Err(Error::config(loc, format!("time-indexed part of `{name}` is {} and cannot be sliced", child.kind.name())));
                    }
                    if child.constr == Some(true) && !child.kind.is_intrinsic() {
                        return Err(Error::config(loc, format!("effect `{name}` has a sum-to-zero constraint and cannot be sliced")));
                    }
                    let d = child.dim();
                    if slices.is_some_and(|s| s != d) {
                        return Err(Error::config(loc, "time-indexed effects disagree on the number of time slices"));
                    }
                    slices = Some(d);
                    found.insert(name.to_string(), s);
                }
            }
        }
    }
    // effects indexed by time in one term must be so in every term
    for (b, block) in spec.blocks.iter().enumerate() {
        for (t, term) in block.predictor.iter().enumerate() {
            if let Some((name, index)) = term_index(term) {
                if found.contains_key(name) && !index.iter().any(|c| c == time_col) {
                    return Err(Error::config(
                        format!("blocks[{b}].predictor[{t}]"),
                        format!("effect `{name}` is indexed by `{time_col}` elsewhere but not here"),
                    ));
                }
            }
        }
    }
    Ok((slices, found))
}

/// Contiguous split of `len` items into `n` groups with sizes differing by at most one.
fn equal_split(len: usize, n: usize) -> Vec<usize> {
    (0..len).map(|i| i * n / len.max(1)).collect()
}

fn sliced_spec(e: &EffectSpec, slice: Slice, len: usize) -> EffectSpec {
    let resize = |c: &EffectSpec| EffectSpec { n: Some(len), ..c.clone() };
    match slice {
        Slice::Whole => resize(e),
        Slice::ChildA => EffectSpec { a: Some(Box::new(resize(e.a.as_deref().unwrap()))), ..e.clone() },
        Slice::ChildB => EffectSpec { b: Some(Box::new(resize(e.b.as_deref().unwrap()))), ..e.clone() },
    }
}

fn slice_node_map(e: &EffectSpec, slice: Slice, start: usize, len: usize) -> Vec<usize> {
    match slice {
        Slice::Whole => (start..start + len).collect(),
        Slice::ChildA => {
            let nb = e.b.as_ref().unwrap().dim();
            (0..len * nb).map(|i| (start + i / nb) * nb + i % nb).collect()
        }
        Slice::ChildB => {
            let (na, nt) = (e.a.as_ref().unwrap().dim(), e.b.as_ref().unwrap().dim());
            (0..na * len).map(|i| (i / len) * nt + start + i % len).collect()
        }
    }
}

/// Splits `spec`/`data` according to `plan`.
pub fn partition_dataset(spec: &ModelSpec, data: &Dataset, plan: &PartitionPlan) -> Result<PartitionedModel> {
    plan.validate(spec)?;
    for t in spec.tables() {
        if !data.contains_key(t) {
            return Err(Error::Data(format!("no data table named `{t}`")));
        }
    }
    // partition blocks and row assignment per table
    let (n_parts, block_sets, assign, time_info) = match plan.mode {
        PartitionMode::ByLikelihoodGroup => {
            let sets: Vec<Vec<usize>> = plan
                .groups
                .iter()
                .map(|g| g.iter().map(|n| spec.blocks.iter().position(|b| &b.name == n).unwrap()).collect())
                .collect();
            (plan.groups.len(), sets, None, None)
        }
        PartitionMode::ByRowBlocks => {
            let mut assign = BTreeMap::new();
            let mut n_parts = plan.n.unwrap_or(0);
            if let Some(col) = &plan.label_column {
                for t in spec.tables() {
                    let labels = data[t].finite_column(col)?;
                    let m = labels.iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
                    n_parts = n_parts.max(m);
                }
            }
            for t in spec.tables() {
                let table = &data[t];
                let a: Vec<usize> = match &plan.label_column {
                    Some(col) => table
                        .finite_column(col)?
                        .iter()
                        .enumerate()
                        .map(|(r, &l)| {
                            if l.fract() != 0.0 || l < 1.0 || l as usize > n_parts {
                                Err(Error::Partition(format!("table `{t}` row {r}: partition label {l} outside 1..{n_parts}")))
                            } else {
                                Ok(l as usize - 1)
                            }
                        })
                        .collect::<Result<_>>()?,
                    None => equal_split(table.nrows(), n_parts),
                };
                assign.insert(t.to_string(), a);
            }
            (n_parts, vec![(0..spec.blocks.len()).collect(); n_parts], Some(assign), None)
        }
        PartitionMode::ByTimeBlocks => {
            let col = plan.time_column.as_deref().unwrap();
            let (slices, sliced) = time_structure(spec, col)?;
            let mut max_t = 0usize;
            for t in spec.tables() {
                for (r, &v) in data[t].finite_column(col)?.iter().enumerate() {
                    if v.fract() != 0.0 || v < 0.0 {
                        return Err(Error::Partition(format!("table `{t}` row {r}: time value {v} is not a slice index")));
                    }
                    max_t = max_t.max(v as usize);
                }
            }
            let n_slices = slices.unwrap_or(max_t + 1);
            if max_t >= n_slices {
                return Err(Error::Partition(format!("time value {max_t} outside the {n_slices} modelled slices")));
            }
            let slice_group: Vec<usize> = if plan.time_groups.is_empty() {
                let n = plan.n.unwrap();
                if n > n_slices {
                    return Err(Error::Partition(format!("cannot split {n_slices} time slices into {n} groups")));
                }
                equal_split(n_slices, n)
            } else {
                if plan.time_groups.len() != n_slices {
                    return Err(Error::Partition(format!(
                        "time_groups has {} entries for {n_slices} time slices",
                        plan.time_groups.len()
                    )));
                }
                plan.time_groups.iter().map(|g| g - 1).collect()
            };
            let n_parts = slice_group.last().map_or(0, |g| g + 1);
            let mut assign = BTreeMap::new();
            for t in spec.tables() {
                let a = data[t].column(col)?.iter().map(|&v| slice_group[v as usize]).collect();
                assign.insert(t.to_string(), a);
            }
            (n_parts, vec![(0..spec.blocks.len()).collect(); n_parts], Some(assign), Some((col.to_string(), slice_group, sliced)))
        }
    };
    if let Some((col, _, _)) = &time_info {
        for (b, block) in spec.blocks.iter().enumerate() {
            let misuse = block.response == *col
                || block.offset.as_deref() == Some(col)
                || block.predictor.iter().any(|t| matches!(t, Term::Covariate { covariate, .. } if covariate == col));
            if misuse {
                return Err(Error::config(format!("blocks[{b}]"), format!("time column `{col}` may only be used as an index")));
            }
        }
    }

    let mut parts = Vec::with_capacity(n_parts);
    for p in 0..n_parts {
        let blocks = &block_sets[p];
        let mut sub_data = Dataset::new();
        let mut rows = BTreeMap::new();
        for &b in blocks {
            let t = &spec.blocks[b].data;
            if sub_data.contains_key(t) {
                continue;
            }
            let table = &data[t];
            let idx: Vec<usize> = match &assign {
                Some(a) => (0..table.nrows()).filter(|&r| a[t][r] == p).collect(),
                None => (0..table.nrows()).collect(),
            };
            let mut sub = table.select_rows(&idx);
            if let Some((col, groups, _)) = &time_info {
                let start = groups.iter().position(|&g| g == p).unwrap_or(0) as f64;
                let shifted = sub.column(col)?.iter().map(|v| v - start).collect();
                sub.set_column(col, shifted)?;
            }
            rows.insert(t.clone(), idx);
            sub_data.insert(t.clone(), sub);
        }
        if rows.values().all(|r| r.is_empty()) {
            return Err(Error::Partition(format!("partition {} is empty", p + 1)));
        }
        let slice_range = time_info.as_ref().map(|(_, groups, sliced)| {
            let start = groups.iter().position(|&g| g == p).unwrap_or(0);
            let len = groups.iter().filter(|&&g| g == p).count();
            (start, len, sliced)
        });
        let (sub_spec, roles) = sub_model(spec, blocks, slice_range)?;
        parts.push(Partition { label: p + 1, spec: sub_spec, data: sub_data, rows, effects: roles });
    }

    // effects present in two or more partitions with identical node sets are shared
    let mut count: BTreeMap<String, usize> = BTreeMap::new();
    for part in &parts {
        for (name, role) in &part.effects {
            if matches!(role, EffectRole::Shared) {
                *count.entry(name.clone()).or_default() += 1;
            }
        }
    }
    let shared: BTreeSet<String> = count.into_iter().filter(|(_, c)| *c >= 2).map(|(n, _)| n).collect();
    for part in &mut parts {
        for (name, role) in part.effects.iter_mut() {
            if matches!(role, EffectRole::Shared) && !shared.contains(name) {
                let n = spec.effects[name].dim();
                *role = EffectRole::Local { node_map: (0..n).collect() };
            }
        }
    }
    Ok(PartitionedModel { parts, shared })
}

type SliceRange<'a> = Option<(usize, usize, &'a BTreeMap<String, Slice>)>;

/// Sub-model for the blocks `blocks`. Effect roles are provisional: un-sliced
/// effects are marked `Shared` and demoted by the caller if they occur only once.
fn sub_model(spec: &ModelSpec, blocks: &[usize], slice: SliceRange<'_>) -> Result<(ModelSpec, BTreeMap<String, EffectRole>)> {
    let present: BTreeSet<&str> = blocks
        .iter()
        .flat_map(|&b| spec.blocks[b].predictor.iter())
        .filter_map(|t| match t {
            Term::Effect { effect, .. } => Some(effect.as_str()),
            _ => None,
        })
        .collect();
    let mut sub = ModelSpec {
        effects: BTreeMap::new(),
        fixed: BTreeMap::new(),
        hyper_priors: BTreeMap::new(),
        blocks: vec![],
        shares: vec![],
        partition: None,
    };
    let mut roles = BTreeMap::new();
    let add_effect = |sub: &mut ModelSpec, roles: &mut BTreeMap<String, EffectRole>, name: &str| {
        if sub.effects.contains_key(name) {
            return;
        }
        let e = &spec.effects[name];
        match slice.and_then(|(start, len, m)| m.get(name).map(|s| (start, len, *s))) {
            Some((start, len, s)) => {
                sub.effects.insert(name.to_string(), sliced_spec(e, s, len));
                roles.insert(name.to_string(), EffectRole::Local { node_map: slice_node_map(e, s, start, len) });
            }
            None => {
                sub.effects.insert(name.to_string(), e.clone());
                roles.insert(name.to_string(), EffectRole::Shared);
            }
        }
    };
    for (new_b, &b) in blocks.iter().enumerate() {
        let mut block = spec.blocks[b].clone();
        for term in block.predictor.iter_mut() {
            match term.clone() {
                Term::Intercept { intercept: beta } | Term::Covariate { beta, .. } => {
                    sub.fixed.insert(beta.clone(), spec.fixed[&beta]);
                }
                Term::Effect { effect, .. } => add_effect(&mut sub, &mut roles, &effect),
                Term::Share { share, index } => {
                    let link = spec.share_for(b, &share).expect("validated share link");
                    if link.fixed_alpha == Some(1.0) {
                        *term = Term::Effect { effect: share.clone(), index };
                        add_effect(&mut sub, &mut roles, &share);
                    } else if present.contains(share.as_str()) || link.fixed_alpha.is_some() {
                        add_effect(&mut sub, &mut roles, &share);
                        sub.shares.push(ShareLink { target_block: new_b, ..link.clone() });
                    } else {
                        let name = copy_name(&share, &link.alpha_name);
                        let mut e = spec.effects[&share].clone();
                        rename_scale_hypers(&mut e, &link.alpha_name);
                        sub.effects.insert(name.clone(), e);
                        roles.insert(name.clone(), EffectRole::Copy { source: share.clone(), alpha_name: link.alpha_name.clone() });
                        *term = Term::Effect { effect: name, index };
                    }
                }
            }
        }
        sub.blocks.push(block);
    }
    // priors for every hyperparameter of the sub-model; renamed copies inherit the source prior
    let bindings = sub.hyper_bindings()?;
    for name in bindings.keys() {
        let base = name.split('@').next().unwrap_or(name);
        let prior = spec
            .hyper_priors
            .get(name)
            .or_else(|| spec.hyper_priors.get(base))
            .ok_or_else(|| Error::config(format!("hyper_priors.{name}"), format!("hyperparameter `{name}` has no prior")))?;
        sub.hyper_priors.insert(name.clone(), prior.clone());
    }
    sub.validate()?;
    Ok((sub, roles))
}

fn rename_scale_hypers(e: &mut EffectSpec, alpha: &str) {
    match e.kind {
        EffectKind::Kronecker => {
            if let Some(a) = e.a.as_mut() {
                rename_scale_hypers(a, alpha);
            }
            if let Some(b) = e.b.as_mut() {
                rename_scale_hypers(b, alpha);
            }
        }
        k => {
            for (h, role) in e.hyper.iter_mut().zip(k.hyper_roles()) {
                if matches!(role, HyperRole::Precision | HyperRole::LogSd) {
                    *h = format!("{h}@{alpha}");
                }
            }
        }
    }
}
