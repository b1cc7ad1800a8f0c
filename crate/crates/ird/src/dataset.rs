//! On-disk scene layout:
//! `scene_k/{target.ppm, source_<i>.ppm, depth.pfm, reflectance.ppm,
//! light.json, pose_<i>.json, intrinsics.json, mask.pfm}`.

use std::path::{Path, PathBuf};

use ird_core::geometry::{Intrinsics, RigidTransform};
use ird_core::ird::LightParams;
use ird_core::optimize::Frames;
use ird_core::synth::{SceneTruth, Views};
use ird_core::ImageBuffer;

use crate::error::{CliError, Result};
use crate::formats::{read_json, read_pfm, read_ppm, write_json, write_pfm, write_ppm, PfmImage};

pub const TARGET: &str = "target.ppm";
pub const DEPTH: &str = "depth.pfm";
pub const REFLECTANCE: &str = "reflectance.ppm";
pub const LIGHT: &str = "light.json";
pub const INTRINSICS: &str = "intrinsics.json";
pub const MASK: &str = "mask.pfm";

pub fn source_file(i: usize) -> String {
    format!("source_{i}.ppm")
}

pub fn pose_file(i: usize) -> String {
    format!("pose_{i}.json")
}

pub fn scene_dir_name(k: usize) -> String {
    format!("scene_{k}")
}

/// Writes one rendered scene and returns the written paths in layout order.
pub fn write_scene(dir: &Path, truth: &SceneTruth, views: &Views) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let path = dir.join(name);
        write(&path)?;
        written.push(path);
        Ok(())
    };
    put(TARGET.into(), &|p| write_ppm(p, &views.target))?;
    for (i, s) in views.sources.iter().enumerate() {
        put(source_file(i), &|p| write_ppm(p, s))?;
    }
    put(DEPTH.into(), &|p| write_pfm(p, &truth.depth))?;
    put(REFLECTANCE.into(), &|p| write_ppm(p, &truth.reflectance))?;
    put(LIGHT.into(), &|p| write_json(p, &truth.light))?;
    for (i, pose) in truth.poses.iter().enumerate() {
        put(pose_file(i), &|p| write_json(p, pose))?;
    }
    put(INTRINSICS.into(), &|p| write_json(p, &truth.intrinsics))?;
    let (h, w) = (truth.depth.height(), truth.depth.width());
    let mask = ImageBuffer::new(h, w, 1, views.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    put(MASK.into(), &|p| write_pfm(p, &mask))?;
    Ok(written)
}

/// A scene read back from disk.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub frames: Frames,
    /// Ground-truth depth as stored; may hold non-finite labels.
    pub depth: PfmImage,
    pub reflectance: ImageBuffer,
    pub light: LightParams,
    pub poses: Vec<RigidTransform>,
    /// Target pixels seen by at least one source frame.
    pub mask: Vec<bool>,
}

/// Reads a scene directory; source frames are `source_0.ppm`,
/// `source_1.ppm`, ... up to the first missing index.
pub fn load_scene(dir: &Path) -> Result<SceneData> {
    if !dir.is_dir() {
        return Err(CliError::format(dir, "scene directory does not exist"));
    }
    let target = read_ppm(&dir.join(TARGET))?;
    let mut sources = Vec::new();
    let mut poses = Vec::new();
    while dir.join(source_file(sources.len())).exists() {
        let i = sources.len();
        sources.push(read_ppm(&dir.join(source_file(i)))?);
        let pose: RigidTransform = read_json(&dir.join(pose_file(i)))?;
        pose.validate()?;
        poses.push(pose);
    }
    if sources.is_empty() {
        return Err(CliError::format(dir, "scene has no source frames"));
    }
    let intrinsics: Intrinsics = read_json(&dir.join(INTRINSICS))?;
    intrinsics.validate()?;
    let light: LightParams = read_json(&dir.join(LIGHT))?;
    light.validate()?;
    let depth = read_pfm(&dir.join(DEPTH))?;
    let reflectance = read_ppm(&dir.join(REFLECTANCE))?;
    let mask_path = dir.join(MASK);
    let mask = read_pfm(&mask_path)?;
    let (h, w) = (target.height(), target.width());
    for (what, img) in [(DEPTH, &depth), (MASK, &mask)] {
        if (img.height, img.width, img.channels) != (h, w, 1) {
            return Err(CliError::format(&dir.join(what), "expected a single-channel map on the target grid"));
        }
    }
    let frames = Frames { target, sources, intrinsics };
    frames.validate()?;
    Ok(SceneData { frames, depth, reflectance, light, poses, mask: mask.data.iter().map(|&v| v > 0.5).collect() })
}
