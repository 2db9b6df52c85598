//! Named model configurations: the proposed architecture, baselines and
//! ablation rows.

use crate::context::{Conditioning, Grid};
use crate::error::{Error, Result};
use crate::model::{FlowModel, LayerDesc, ModelSpec};

pub const BASELINES: [&str; 6] = ["isotropic", "diagonal", "full_cov", "nlf", "noise_flow", "noise_flow_large"];

/// Display names of the ablation rows.
pub const ABLATION_ROWS: [&str; 16] = [
    // main ablation
    "CL",
    "CCS_iso_only×2",
    "CCS_camera_only×2",
    "CCS_clean_only×2",
    "CCS×2",
    "CL-CCS×2",
    "(CL-CCS×2)×2",
    "(CL-CCS×2)×4",
    // unconditional layers
    "SC×2-CL-CA_I-CSC×2",
    "CL-CA_I-CSC×2",
    "AC×2-CL-CA_I-CAC×2",
    "CL-CA_I-CAC×2",
    // clean-only layers and conditioning on everything
    "CL-CSC_clean_only×2-CAC×2",
    "CL-CSC×2",
    "CL-CA_{I,c,g}",
    "CAC_camera_iso×2-CA_{I,c,g}",
];

/// Extra depth variant of the last row family.
pub const DEPTH_ROWS: [&str; 1] = ["(CL-CA_{I,c,g})×4"];

const CL: LayerDesc = LayerDesc::CondLinear {
    cond: Conditioning::CAMERA_ISO,
    tied: false,
    bias: true,
};

fn cac(cond: Conditioning) -> LayerDesc {
    LayerDesc::CondAffineCoupling { cond }
}

fn csc(cond: Conditioning) -> LayerDesc {
    LayerDesc::CondSplineCoupling { cond }
}

/// `k` coupling steps, each a 1x1 convolution followed by `coupling`.
fn steps(k: usize, coupling: LayerDesc) -> Vec<LayerDesc> {
    (0..k).flat_map(|_| [LayerDesc::Conv1x1, coupling.clone()]).collect()
}

/// `[CL, (1x1 conv, CAC) x K] x S`.
pub fn proposed_spec(s: usize, k: usize, grid: Grid) -> Result<ModelSpec> {
    if s == 0 {
        return Err(Error::Config("proposed model needs S >= 1".into()));
    }
    let mut layers = Vec::new();
    for _ in 0..s {
        layers.push(CL);
        layers.extend(steps(k, cac(Conditioning::ALL)));
    }
    Ok(ModelSpec::new(format!("proposed_s{s}_k{k}"), grid, layers))
}

pub fn build_proposed(s: usize, k: usize, grid: Grid, seed: u64) -> Result<FlowModel> {
    FlowModel::new(proposed_spec(s, k, grid)?, seed)
}

pub fn baseline_spec(kind: &str, grid: Grid) -> Result<ModelSpec> {
    let layers = match kind {
        "isotropic" => vec![LayerDesc::CondLinear {
            cond: Conditioning::CAMERA_ISO,
            tied: true,
            bias: true,
        }],
        "diagonal" => vec![CL],
        "full_cov" => vec![
            LayerDesc::CondConv1x1 {
                cond: Conditioning::CAMERA_ISO,
            },
            CL,
        ],
        "nlf" => vec![signal_dependent()],
        "noise_flow" | "noise_flow_large" => {
            let mut l = vec![signal_dependent()];
            l.extend(steps(4, LayerDesc::AffineCoupling));
            l.push(LayerDesc::Gain);
            l.extend(steps(4, LayerDesc::AffineCoupling));
            l
        }
        other => return Err(Error::Config(format!("unknown baseline `{other}`"))),
    };
    let spec = ModelSpec::new(kind, grid, layers);
    Ok(match kind {
        "noise_flow" => spec.with_width(8),
        "noise_flow_large" => spec.with_width(16),
        _ => spec,
    })
}

fn signal_dependent() -> LayerDesc {
    LayerDesc::SignalDependent {
        cond: Conditioning::CAMERA_ISO,
        init_beta1: 1e-4,
        init_beta2: 1e-3,
    }
}

pub fn build_baseline(kind: &str, grid: Grid, seed: u64) -> Result<FlowModel> {
    FlowModel::new(baseline_spec(kind, grid)?, seed)
}

/// Canonical form of a row id: lowercase, `×` as `x`, and brackets,
/// separators and spaces removed.
pub fn normalize_row_id(id: &str) -> String {
    id.to_lowercase()
        .replace('×', "x")
        .chars()
        .filter(|c| !matches!(c, '(' | ')' | '{' | '}' | ',' | '_' | '-' | ' '))
        .collect()
}

pub fn ablation_spec(row_id: &str, grid: Grid) -> Result<ModelSpec> {
    let ca_i = LayerDesc::CondAffineClean;
    let ca_icg = LayerDesc::CondAffineFull { cond: Conditioning::ALL };
    let key = normalize_row_id(row_id);
    let layers: Vec<LayerDesc> = match key.as_str() {
        "cl" => vec![CL],
        "ccsisoonlyx2" => steps(2, cac(Conditioning::ISO_ONLY)),
        "ccscameraonlyx2" => steps(2, cac(Conditioning::CAMERA_ONLY)),
        "ccscleanonlyx2" | "ccscleanimageonlyx2" => steps(2, cac(Conditioning::CLEAN_ONLY)),
        "ccsx2" => steps(2, cac(Conditioning::ALL)),
        "clccsx2" | "clcacx2" => return proposed_spec(1, 2, grid).map(|s| rename(s, row_id)),
        "clccsx2x2" | "clcacx2x2" => return proposed_spec(2, 2, grid).map(|s| rename(s, row_id)),
        "clccsx2x4" | "clcacx2x4" => return proposed_spec(4, 2, grid).map(|s| rename(s, row_id)),
        "scx2clcaicscx2" => {
            let mut l = steps(2, LayerDesc::SplineCoupling);
            l.extend([CL, ca_i]);
            l.extend(steps(2, csc(Conditioning::ALL)));
            l
        }
        "clcaicscx2" => {
            let mut l = vec![CL, ca_i];
            l.extend(steps(2, csc(Conditioning::ALL)));
            l
        }
        "acx2clcaicacx2" => {
            let mut l = steps(2, LayerDesc::AffineCoupling);
            l.extend([CL, ca_i]);
            l.extend(steps(2, cac(Conditioning::ALL)));
            l
        }
        "clcaicacx2" => {
            let mut l = vec![CL, ca_i];
            l.extend(steps(2, cac(Conditioning::ALL)));
            l
        }
        "clcsccleanonlyx2cacx2" => {
            let mut l = vec![CL];
            l.extend(steps(2, csc(Conditioning::CLEAN_ONLY)));
            l.extend(steps(2, cac(Conditioning::ALL)));
            l
        }
        "clcscx2" => {
            let mut l = vec![CL];
            l.extend(steps(2, csc(Conditioning::ALL)));
            l
        }
        "clcaicg" => vec![CL, ca_icg.clone()],
        "caccameraisox2caicg" => {
            let mut l = steps(2, cac(Conditioning::CAMERA_ISO));
            l.push(ca_icg.clone());
            l
        }
        "clcaicgx4" => (0..4).flat_map(|_| [CL, ca_icg.clone()]).collect(),
        _ => return Err(Error::Config(format!("unknown ablation row `{row_id}`"))),
    };
    Ok(ModelSpec::new(row_id, grid, layers))
}

fn rename(mut spec: ModelSpec, name: &str) -> ModelSpec {
    spec.name = name.to_string();
    spec
}

pub fn build_ablation(row_id: &str, grid: Grid, seed: u64) -> Result<FlowModel> {
    FlowModel::new(ablation_spec(row_id, grid)?, seed)
}

/// Resolves any model name accepted by the command line: `proposed`,
/// `proposed_s{S}_k{K}`, a baseline kind or an ablation row.
pub fn model_spec(name: &str, grid: Grid) -> Result<ModelSpec> {
    if name == "proposed" {
        return proposed_spec(4, 2, grid).map(|s| rename(s, "proposed"));
    }
    if let Some(rest) = name.strip_prefix("proposed_s") {
        if let Some((s, k)) = rest.split_once("_k") {
            if let (Ok(s), Ok(k)) = (s.parse(), k.parse()) {
                return proposed_spec(s, k, grid);
            }
        }
    }
    if BASELINES.contains(&name) {
        return baseline_spec(name, grid);
    }
    ablation_spec(name, grid).map_err(|_| Error::Config(format!("unknown model `{name}`")))
}

/// Every name [`model_spec`] resolves, in a stable order.
pub fn model_names() -> Vec<String> {
    let mut v = vec!["proposed".to_string()];
    v.extend(BASELINES.iter().map(|s| s.to_string()));
    v.extend(ABLATION_ROWS.iter().chain(&DEPTH_ROWS).map(|s| s.to_string()));
    v
}
