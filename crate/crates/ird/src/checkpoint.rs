//! Parameter checkpoints: per-pixel fields as PFM, everything else in
//! `checkpoint.json`.

use std::path::{Path, PathBuf};

use ird_core::diff::Tensor;
use ird_core::geometry::RigidTransform;
use ird_core::ird::LightParams;
use ird_core::optimize::Parameters;
use ird_core::predictors::{
    DepthModel, DirectDepthField, DirectLight, DirectReflectanceField, PoseParams, PredictorKind, TinyConvPredictor,
};
use ird_core::ImageBuffer;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::{read_json, read_pfm, write_json, write_pfm};

pub const DOCUMENT: &str = "checkpoint.json";
pub const DEPTH_FIELD: &str = "depth_field.pfm";

pub fn reflectance_file(frame: usize) -> String {
    format!("reflectance_logits_{frame}.pfm")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDoc {
    pub predictor: PredictorKind,
    pub height: usize,
    pub width: usize,
    /// Network weights; absent for direct depth fields.
    pub conv: Option<TinyConvPredictor>,
    pub poses: Vec<RigidTransform>,
    /// Unconstrained light vectors, exact.
    pub light_raw: Vec<DirectLight>,
    /// The same lights on their physical ranges, for reading.
    pub lights: Vec<LightParams>,
}

/// Writes `params` into `dir` and returns the written paths.
pub fn save(dir: &Path, params: &Parameters) -> Result<Vec<PathBuf>> {
    let [height, width, _] = params.reflectance[0].r.shape();
    let mut written = Vec::new();
    let conv = match &params.depth {
        DepthModel::Direct(f) => {
            let path = dir.join(DEPTH_FIELD);
            write_pfm(&path, &f.z.to_image()?)?;
            written.push(path);
            None
        }
        DepthModel::Conv(c) => Some(c.clone()),
    };
    for (k, r) in params.reflectance.iter().enumerate() {
        let path = dir.join(reflectance_file(k));
        write_pfm(&path, &r.r.to_image()?)?;
        written.push(path);
    }
    let doc = CheckpointDoc {
        predictor: params.depth.kind(),
        height,
        width,
        conv,
        poses: params.poses.iter().map(PoseParams::transform).collect(),
        light_raw: params.light.clone(),
        lights: params.light.iter().map(DirectLight::params).collect(),
    };
    let path = dir.join(DOCUMENT);
    write_json(&path, &doc)?;
    written.push(path);
    Ok(written)
}

fn field(dir: &Path, name: &str, height: usize, width: usize, channels: usize) -> Result<Tensor> {
    let path = dir.join(name);
    let pfm = read_pfm(&path)?;
    if (pfm.height, pfm.width, pfm.channels) != (height, width, channels) {
        return Err(CliError::format(&path, "field shape does not match the checkpoint"));
    }
    let img: ImageBuffer = pfm.to_image().map_err(|e| CliError::format(&path, e.to_string()))?;
    Ok(img.into())
}

pub fn load(dir: &Path) -> Result<Parameters> {
    let doc_path = dir.join(DOCUMENT);
    let doc: CheckpointDoc = read_json(&doc_path)?;
    let (h, w) = (doc.height, doc.width);
    let depth = match (doc.predictor, doc.conv) {
        (PredictorKind::Direct, None) => DepthModel::Direct(DirectDepthField { z: field(dir, DEPTH_FIELD, h, w, 1)? }),
        (PredictorKind::Conv, Some(c)) => DepthModel::Conv(c),
        _ => return Err(CliError::format(&doc_path, "predictor kind and stored weights disagree")),
    };
    if doc.light_raw.len() != doc.poses.len() + 1 {
        return Err(CliError::format(&doc_path, "expected one light per frame"));
    }
    let reflectance = (0..doc.light_raw.len())
        .map(|k| Ok(DirectReflectanceField { r: field(dir, &reflectance_file(k), h, w, 3)? }))
        .collect::<Result<_>>()?;
    Ok(Parameters {
        depth,
        reflectance,
        light: doc.light_raw,
        poses: doc.poses.iter().map(PoseParams::from_transform).collect(),
    })
}
