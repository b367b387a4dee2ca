//! Text form of descriptions in the restricted JSON profile.

use std::collections::BTreeSet;

use serde_json::{json, Value};

use super::{
    validate, Activation, ArchDescription, ArchError, Block, CellDescription, CellIndices, Combiner,
    ConvArch, ConvLayerSpec, SearchSpace, Violation,
};
use crate::profile::{self, as_usize, Obj, Path, ProfileError};

pub const FORMAT_VERSION: u64 = 1;

pub fn serialize(desc: &ArchDescription) -> String {
    profile::to_text(&to_value(desc))
}

pub(crate) fn to_value(desc: &ArchDescription) -> Value {
    let block = |b: &Block| json!({"combiner": b.combiner.name(), "activation": b.activation.name()});
    match desc {
        ArchDescription::Conv(arch) => json!({
            "version": FORMAT_VERSION,
            "family": "conv",
            "layers": arch.layers.iter().map(|l| json!({
                "filter_height": l.filter_height,
                "filter_width": l.filter_width,
                "stride_height": l.stride_height,
                "stride_width": l.stride_width,
                "num_filters": l.num_filters,
                "skip_inputs": l.skip_inputs.iter().collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        }),
        ArchDescription::Cell(cell) => json!({
            "version": FORMAT_VERSION,
            "family": "cell",
            "base": cell.base(),
            "nodes": cell.nodes.iter().map(block).collect::<Vec<_>>(),
            "inject": block(&cell.inject),
            "cell_indices": {"output": cell.indices.output, "target": cell.indices.target},
        }),
    }
}

/// Parses and validates against `space`. Syntax errors carry line and
/// column; membership errors carry field paths.
pub fn parse(text: &str, space: &SearchSpace) -> Result<ArchDescription, ArchError> {
    let value = profile::parse(text)?;
    let mut unknown = Vec::new();
    let desc = from_value(&value, &mut unknown)?;
    if let Some(v) = unknown.into_iter().next() {
        return Err(ArchError::Invalid(vec![v]));
    }
    let violations = validate(&desc, space);
    if violations.is_empty() {
        Ok(desc)
    } else {
        Err(ArchError::Invalid(violations))
    }
}

/// Parses without a space; only structure and op names are checked.
pub fn parse_any(text: &str) -> Result<ArchDescription, ArchError> {
    let value = profile::parse(text)?;
    let mut unknown = Vec::new();
    let desc = from_value(&value, &mut unknown)?;
    match unknown.into_iter().next() {
        Some(v) => Err(ArchError::Invalid(vec![v])),
        None => Ok(desc),
    }
}

pub(crate) fn from_value(value: &Value, unknown: &mut Vec<Violation>) -> Result<ArchDescription, ProfileError> {
    let mut o = Obj::new(value, Path::root())?;
    let version = o.u64("version")?;
    if version != FORMAT_VERSION {
        return Err(ProfileError::field(
            &Path::root().key("version"),
            format!("unsupported format version {version}"),
        ));
    }
    let family = o.str("family")?;
    let desc = match family {
        "conv" => ArchDescription::Conv(conv_from(&mut o)?),
        "cell" => ArchDescription::Cell(cell_from(&mut o, unknown)?),
        other => {
            return Err(ProfileError::field(
                &Path::root().key("family"),
                format!("unknown family \"{other}\""),
            ))
        }
    };
    o.finish()?;
    Ok(desc)
}

fn conv_from(o: &mut Obj<'_>) -> Result<ConvArch, ProfileError> {
    let (items, path) = o.array("layers")?;
    let mut layers = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let mut l = Obj::new(item, path.index(i))?;
        let (skips, skip_path) = l.array("skip_inputs")?;
        let mut skip_inputs = BTreeSet::new();
        for (k, s) in skips.iter().enumerate() {
            if !skip_inputs.insert(as_usize(s, &skip_path.index(k))?) {
                return Err(ProfileError::field(&skip_path.index(k), "duplicate skip input"));
            }
        }
        layers.push(ConvLayerSpec {
            filter_height: l.usize("filter_height")?,
            filter_width: l.usize("filter_width")?,
            stride_height: l.usize("stride_height")?,
            stride_width: l.usize("stride_width")?,
            num_filters: l.usize("num_filters")?,
            skip_inputs,
        });
        l.finish()?;
    }
    Ok(ConvArch { layers })
}

fn block_from(value: &Value, path: Path, unknown: &mut Vec<Violation>) -> Result<Block, ProfileError> {
    let mut o = Obj::new(value, path.clone())?;
    let c = o.str("combiner")?;
    let a = o.str("activation")?;
    o.finish()?;
    let combiner = c.parse::<Combiner>().unwrap_or_else(|_| {
        unknown.push(Violation {
            path: path.key("combiner").to_string(),
            value: c.to_string(),
            reason: "not in the search space".into(),
        });
        Combiner::Add
    });
    let activation = a.parse::<Activation>().unwrap_or_else(|_| {
        unknown.push(Violation {
            path: path.key("activation").to_string(),
            value: a.to_string(),
            reason: "not in the search space".into(),
        });
        Activation::Identity
    });
    Ok(Block { combiner, activation })
}

fn cell_from(o: &mut Obj<'_>, unknown: &mut Vec<Violation>) -> Result<CellDescription, ProfileError> {
    let base = o.usize("base")?;
    let (items, path) = o.array("nodes")?;
    if items.len() != 2 * base - 1 || base < 2 {
        return Err(ProfileError::field(
            &path,
            format!("base {base} needs {} node blocks, found {}", (2 * base).saturating_sub(1), items.len()),
        ));
    }
    let nodes = items
        .iter()
        .enumerate()
        .map(|(i, v)| block_from(v, path.index(i), unknown))
        .collect::<Result<Vec<_>, _>>()?;
    let (inject, inject_path) = o.required("inject")?;
    let inject = block_from(inject, inject_path, unknown)?;
    let (idx, idx_path) = o.required("cell_indices")?;
    let mut io = Obj::new(idx, idx_path)?;
    let indices = CellIndices {
        output: io.usize("output")?,
        target: io.usize("target")?,
    };
    io.finish()?;
    Ok(CellDescription { nodes, inject, indices })
}
