//! Model names and their resolution into kernel or network configurations.

use std::str::FromStr;

use gntk_core::dataset::{HyperParams, Task};
use gntk_core::gat::{gat_gp, gat_ntk, GatSpec, Placement};
use gntk_core::kernel::{compute_gp, compute_ntk, Architecture, KernelKind, ModelSpec};
use gntk_core::lab::NetSpec;
use gntk_core::{Activation, AdjacencyMode, AdjacencyOperator};
use nalgebra::DMatrix;

use crate::error::{config_err, CliError, CliResult};
use crate::settings::Settings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Fcn,
    Gnn,
    Skip,
    Gat,
}

impl FromStr for Family {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcn" | "mlp" => Ok(Family::Fcn),
            "gnn" | "gcn" => Ok(Family::Gnn),
            "skip-gnn" | "skip_gnn" | "skip" | "sgnn" | "s-gnn" => Ok(Family::Skip),
            "gat" | "gat*" => Ok(Family::Gat),
            other => Err(config_err(format!("unknown architecture '{other}'"))),
        }
    }
}

/// A closed-form kernel: architecture plus GP or NTK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelName {
    pub family: Family,
    pub kind: KernelKind,
}

impl FromStr for ModelName {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let lower = s.to_ascii_lowercase().replace(['_', '*'], "-");
        let (family, kind) = match lower.as_str() {
            "ntk" => (Family::Fcn, KernelKind::Ntk),
            "nngp" => (Family::Fcn, KernelKind::Gp),
            "gntk" => (Family::Gnn, KernelKind::Ntk),
            "gnngp" => (Family::Gnn, KernelKind::Gp),
            "skip-gntk" | "s-gntk" => (Family::Skip, KernelKind::Ntk),
            "skip-gnngp" | "s-gnngp" => (Family::Skip, KernelKind::Gp),
            "gat-ntk" | "gatntk" => (Family::Gat, KernelKind::Ntk),
            "gat-gp" | "gatgp" => (Family::Gat, KernelKind::Gp),
            _ => {
                return Err(config_err(format!(
                    "unknown model '{s}' (expected ntk, nngp, gntk, gnngp, skip-gntk, skip-gnngp, gat-ntk, gat-gp)"
                )))
            }
        };
        Ok(ModelName { family, kind })
    }
}

impl ModelName {
    /// Name used in result tables.
    pub fn label(&self) -> &'static str {
        match (self.family, self.kind) {
            (Family::Fcn, KernelKind::Ntk) => "NTK",
            (Family::Fcn, KernelKind::Gp) => "NNGP",
            (Family::Gnn, KernelKind::Ntk) => "GNTK",
            (Family::Gnn, KernelKind::Gp) => "GNNGP",
            (Family::Skip, KernelKind::Ntk) => "S-GNTK",
            (Family::Skip, KernelKind::Gp) => "S-GNNGP",
            (Family::Gat, KernelKind::Ntk) => "GAT*NTK",
            (Family::Gat, KernelKind::Gp) => "GAT*GP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    Plain(ModelSpec),
    Gat(GatSpec),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub model: Model,
    pub adjacency: AdjacencyMode,
}

fn default_depth(family: Family) -> usize {
    match family {
        Family::Skip => 3,
        _ => 2,
    }
}

fn default_adjacency(family: Family) -> AdjacencyMode {
    match family {
        Family::Fcn => AdjacencyMode::Identity,
        Family::Gnn | Family::Skip => AdjacencyMode::Kipf,
        Family::Gat => AdjacencyMode::SelfLoops,
    }
}

/// Fills every model setting from `settings` or its default.
pub fn resolve(settings: &Settings, family: Family, task: Task) -> CliResult<Resolved> {
    let depth = settings.get("depth")?.unwrap_or(default_depth(family));
    let adjacency = match family {
        Family::Fcn => AdjacencyMode::Identity,
        _ => settings.get("adjacency")?.unwrap_or(default_adjacency(family)),
    };
    let task_hp = HyperParams::for_task(task);
    let hp = HyperParams {
        sigma_w2: settings.get_or_default("sigma_w2")?,
        sigma_b2: settings.get("sigma_b2")?.unwrap_or(task_hp.sigma_b2),
        sigma_c2: settings.get_or_default("sigma_c2")?,
        normalize_input_by_d0: settings.get_or_default("normalize_input")?,
    };
    let activation: Activation = settings.get_or_default("activation")?;
    let model = match family {
        Family::Gat => {
            let spec = GatSpec {
                depth,
                hp,
                sigma1: settings.get_or_default("attention_activation")?,
                sigma2: activation,
                placement: settings.get_or_default::<Placement>("placement")?,
                bias: settings.get_or_default("gat_bias")?,
            };
            spec.validate()?;
            Model::Gat(spec)
        }
        _ => {
            let arch = match family {
                Family::Fcn => Architecture::Fcn,
                Family::Gnn => Architecture::Gnn,
                _ => Architecture::SkipGnn,
            };
            let spec = ModelSpec::new(arch, depth, activation).with_hp(hp);
            spec.validate()?;
            Model::Plain(spec)
        }
    };
    Ok(Resolved { model, adjacency })
}

pub fn compute_kernel(
    model: &Model,
    kind: KernelKind,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
) -> gntk_core::Result<DMatrix<f64>> {
    match (model, kind) {
        (Model::Plain(s), KernelKind::Gp) => compute_gp(s, a, x),
        (Model::Plain(s), KernelKind::Ntk) => compute_ntk(s, a, x),
        (Model::Gat(s), KernelKind::Gp) => gat_gp(s, a, x),
        (Model::Gat(s), KernelKind::Ntk) => gat_ntk(s, a, x),
    }
}

pub fn net_spec(model: &Model, heads: usize) -> NetSpec {
    match model {
        Model::Plain(s) => NetSpec::from_model(s),
        Model::Gat(s) => NetSpec::from_gat(s, heads),
    }
}

pub fn depth(model: &Model) -> usize {
    match model {
        Model::Plain(s) => s.depth,
        Model::Gat(s) => s.depth,
    }
}

/// Resolved settings written next to a kernel file.
pub fn describe(model: &Model, adjacency: AdjacencyMode) -> Vec<(&'static str, String)> {
    let mut out = vec![("adjacency", adjacency.name().to_string())];
    let hp = match model {
        Model::Plain(s) => {
            out.push(("architecture", s.architecture.name().to_string()));
            out.push(("depth", s.depth.to_string()));
            out.push(("activation", s.activation.name()));
            s.hp
        }
        Model::Gat(s) => {
            out.push(("architecture", "gat".to_string()));
            out.push(("depth", s.depth.to_string()));
            out.push(("activation", s.sigma2.name()));
            out.push(("attention_activation", s.sigma1.name()));
            let placement = match s.placement {
                Placement::Inside => "inside",
                Placement::HadamardFirst => "hadamard_first",
            };
            out.push(("placement", placement.to_string()));
            out.push(("gat_bias", s.bias.to_string()));
            s.hp
        }
    };
    out.push(("sigma_w2", hp.sigma_w2.to_string()));
    out.push(("sigma_b2", hp.sigma_b2.to_string()));
    out.push(("sigma_c2", hp.sigma_c2.to_string()));
    out.push(("normalize_input", hp.normalize_input_by_d0.to_string()));
    out
}
