//! The `synth`, `fit`, `eval`, `gradcheck` and `render` commands as library
//! functions. Each writes its artifacts under an output directory and
//! returns a summary.

use std::path::{Path, PathBuf};

use ird_core::diff::{finite_difference_check, Evaluation, GradientReport, Graph};
use ird_core::ird::illumination_map;
use ird_core::losses::LossBundle;
use ird_core::metrics::{
    align_median, apply_cap, dark_bright_breakdown, depth_metrics, error_map, heat_image, sanitize_ground_truth,
    Breakdown, DepthMetrics, RegionMetrics,
};
use ird_core::optimize::{
    build_step, build_step_with, decompose, joint_optimize_with, Constituent, Decomposition, Frames, Group, Parameters,
    RoutingTable, StepInputs, TraceRow,
};
use ird_core::synth::{generate_scene, render_views, SceneSpec};
use ird_core::ImageBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_scene, scene_dir_name, write_scene};
use crate::error::{CliError, Result};
use crate::formats::{gray_to_rgb, write_json, write_pfm, write_ppm, write_text};

pub const MANIFEST: &str = "manifest.json";
pub const TRACE: &str = "trace.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DECOMPOSITION_DIR: &str = "decomposition";
pub const EFFECTIVE_CONFIG: &str = "config.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const BREAKDOWN_CSV: &str = "breakdown.csv";
pub const ERROR_MAP: &str = "error_map.pfm";
pub const ERROR_HEAT: &str = "error_heat.ppm";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";

/// Progress output; silent with `--quiet`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Console {
    pub quiet: bool,
}

impl Console {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub scenes: Vec<ManifestEntry>,
}

type Slot = Option<Result<()>>;

/// Renders `count` scenes with seeds `scene.seed + k` into `out/scene_k`,
/// spread over a worker pool.
pub fn synth(cfg: &RunConfig, count: usize, out: &Path, console: Console) -> Result<Manifest> {
    if count == 0 {
        return Err(CliError::Usage("count must be at least 1".into()));
    }
    let specs: Vec<SceneSpec> =
        (0..count).map(|k| SceneSpec { seed: cfg.scene.seed.wrapping_add(k as u64), ..cfg.scene.clone() }).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count);
    let mut results: Vec<Option<Result<()>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|s| {
        let mut slots: Vec<Vec<(usize, &mut Slot)>> = (0..workers).map(|_| Vec::new()).collect();
        for (k, slot) in results.iter_mut().enumerate() {
            slots[k % workers].push((k, slot));
        }
        for chunk in slots {
            let specs = &specs;
            s.spawn(move || {
                for (k, slot) in chunk {
                    *slot = Some(synth_one(&specs[k], &out.join(scene_dir_name(k))));
                }
            });
        }
    });
    for r in results {
        r.expect("every scene visited")?;
    }
    let manifest = Manifest {
        count,
        scenes: specs.iter().enumerate().map(|(k, s)| ManifestEntry { dir: scene_dir_name(k), seed: s.seed }).collect(),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    console.say(serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
    Ok(manifest)
}

fn synth_one(spec: &SceneSpec, dir: &Path) -> Result<()> {
    let truth = generate_scene(spec)?;
    let views = render_views(&truth, spec.noise_sigma)?;
    write_scene(dir, &truth, &views)?;
    Ok(())
}

/// Frames from a scene directory, or rendered from the configured scene.
pub fn frames_for(cfg: &RunConfig, data: Option<&Path>) -> Result<Frames> {
    match data {
        Some(dir) => Ok(load_scene(dir)?.frames),
        None => {
            let truth = generate_scene(&cfg.scene)?;
            let views = render_views(&truth, cfg.scene.noise_sigma)?;
            Ok(Frames { target: views.target, sources: views.sources, intrinsics: truth.intrinsics })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub steps: usize,
    pub last: Option<LossBundle>,
    pub params: Parameters,
}

/// Joint optimization with trace, checkpoint and decomposition exports.
/// The trace is written even when a numerical failure aborts the run.
pub fn fit(cfg: &RunConfig, data: Option<&Path>, out: &Path, console: Console) -> Result<FitOutcome> {
    cfg.validate()?;
    let frames = frames_for(cfg, data)?;
    let init = Parameters::init(cfg.fit.predictor, &frames, cfg.fit.seed)?;
    write_json(&out.join(EFFECTIVE_CONFIG), cfg)?;
    let mut trace = format!("{}\n", TraceRow::CSV_HEADER);
    let mut last = None;
    let mut steps = 0;
    let result = joint_optimize_with(&frames, init, &cfg.fit, cfg.steps, &mut |row| {
        trace.push_str(&row.csv());
        trace.push('\n');
        steps += 1;
        last = Some(row.losses);
        if cfg.log_every > 0 && row.step % cfg.log_every == 0 {
            console.say(format!(
                "step {:>5}  lr {:.2e}  total {:.6}  pe_I {:.6}  rec {:.6}",
                row.step,
                row.lr,
                row.losses.total(),
                row.losses.pe_i,
                row.losses.rec
            ));
        }
    });
    write_text(&out.join(TRACE), &trace)?;
    let fitted = result?;
    checkpoint::save(&out.join(CHECKPOINT_DIR), &fitted.params)?;
    write_decomposition(&out.join(DECOMPOSITION_DIR), &decompose(&frames, &fitted.params, &cfg.fit)?)?;
    console.say(format!("fit: {steps} steps, outputs in {}", out.display()));
    Ok(FitOutcome { steps, last, params: fitted.params })
}

/// Writes `R`, `L`, `D` and the re-rendered target as PFM plus PPM previews.
pub fn write_decomposition(dir: &Path, d: &Decomposition) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let depth_max = d.depth.max().max(f64::MIN_POSITIVE);
    let depth_preview = d.depth.map(|v| v / depth_max)?;
    for (name, img, preview) in [
        ("reflectance", &d.reflectance, d.reflectance.clone()),
        ("illumination", &d.illumination, gray_to_rgb(&d.illumination)?),
        ("depth", &d.depth, gray_to_rgb(&depth_preview)?),
        ("rendered", &d.rendered, d.rendered.clone()),
    ] {
        let pfm = dir.join(format!("{name}.pfm"));
        let ppm = dir.join(format!("{name}.ppm"));
        write_pfm(&pfm, img)?;
        write_ppm(&ppm, &preview)?;
        written.extend([pfm, ppm]);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub metrics: DepthMetrics,
    pub valid_pixels: usize,
    pub breakdown: Option<Breakdown>,
}

/// Median-aligned metrics of a checkpoint's depth against a scene's ground
/// truth, with error maps and the optional dark/bright split.
pub fn eval(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path, console: Console) -> Result<EvalOutcome> {
    let scene = load_scene(data)?;
    let params = checkpoint::load(ckpt)?;
    let pred = decompose(&scene.frames, &params, &cfg.fit)?.depth;
    let (h, w) = (scene.depth.height, scene.depth.width);
    let raw: Vec<f64> = scene.depth.data.iter().map(|&v| f64::from(v)).collect();
    let (gt, mut mask) = sanitize_ground_truth(h, w, &raw)?;
    let mut pred = pred;
    if let Some(cap) = cfg.eval.cap {
        (pred, mask) = apply_cap(&pred, &gt, &mask, cap)?;
    }
    let aligned = align_median(&pred, &gt, Some(&mask))?;
    let metrics = depth_metrics(&aligned, &gt, Some(&mask))?;
    let err = error_map(&aligned, &gt, Some(&mask))?;
    let vmax = err.map.max().max(1e-12);
    write_pfm(&out.join(ERROR_MAP), &err.map)?;
    write_ppm(&out.join(ERROR_HEAT), &heat_image(&err, vmax)?)?;
    write_text(&out.join(METRICS_CSV), &format!("{}\n{}\n", DepthMetrics::CSV_HEADER, metrics.csv()))?;
    let breakdown = if cfg.eval.breakdown {
        let light = illumination_map(&scene.light, h, w)?;
        let b = dark_bright_breakdown(&pred, &gt, &light, Some(&mask))?;
        let row = |name: &str, r: &RegionMetrics| match &r.metrics {
            Some(m) => format!("{name},{},{}\n", r.pixels, m.csv()),
            None => format!("{name},0,,,,,,,\n"),
        };
        let text =
            format!("region,pixels,{}\n{}{}", DepthMetrics::CSV_HEADER, row("dark", &b.dark), row("bright", &b.bright));
        write_text(&out.join(BREAKDOWN_CSV), &text)?;
        Some(b)
    } else {
        None
    };
    let outcome = EvalOutcome { metrics, valid_pixels: mask.iter().filter(|&&m| m).count(), breakdown };
    write_json(&out.join(METRICS_JSON), &outcome)?;
    console.say(format!("{}\n{}", DepthMetrics::CSV_HEADER, metrics.csv()));
    Ok(outcome)
}

/// Re-exports the decomposition of a checkpoint on a scene.
pub fn render(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path, console: Console) -> Result<Vec<PathBuf>> {
    let scene = load_scene(data)?;
    let params = checkpoint::load(ckpt)?;
    let written = write_decomposition(out, &decompose(&scene.frames, &params, &cfg.fit)?)?;
    console.say(format!("render: {} files in {}", written.len(), out.display()));
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub loss: Constituent,
    pub group: Group,
    /// Index into the canonical parameter blocks.
    pub leaf: usize,
    pub report: GradientReport,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub rows: Vec<ProbeRow>,
    pub failed: usize,
}

pub const GRADCHECK_HEADER: &str = "loss,group,leaf,location,analytic,numeric,relative_error,passed";

impl ProbeRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{:e},{:e},{:e},{}",
            constituent_name(self.loss),
            self.group.name(),
            self.leaf,
            r.location,
            r.analytic,
            r.numeric,
            r.relative_error,
            self.passed
        )
    }
}

fn constituent_name(c: Constituent) -> &'static str {
    match c {
        Constituent::PeI => "pe_I",
        Constituent::PeR => "pe_R",
        Constituent::Edge => "edge",
        Constituent::Rec => "rec",
        Constituent::Ratio => "ratio",
        Constituent::Dg => "dg",
    }
}

/// Finite-difference audit of every active loss against every leaf it is
/// routed to, on a small scene at a jittered initial point. Detached inputs
/// (the degraded target, and the clean depth of one-sided `dg`) are held at
/// their base values.
pub fn gradcheck(cfg: &RunConfig, out: &Path, console: Console) -> Result<GradcheckOutcome> {
    cfg.validate()?;
    let opts = cfg.gradcheck;
    let spec = SceneSpec { height: opts.size, width: opts.size, ..cfg.scene.clone() };
    let frames = frames_for(&RunConfig { scene: spec, ..cfg.clone() }, None)?;
    let mut params = Parameters::init(cfg.fit.predictor, &frames, cfg.fit.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.fit.seed);
    for (_, block) in params.blocks_mut() {
        for v in block {
            *v += rng.random_range(-1.0..=1.0) * opts.jitter;
        }
    }
    let base = build_step(&frames, &params, &cfg.fit)?;
    let (pinned, pinned_clean) = (base.degraded.clone(), base.clean_depth.clone());
    let groups: Vec<Group> = base.leaves.iter().map(|&(g, _)| g).collect();

    let mut rows = Vec::new();
    for (leaf, &group) in groups.iter().enumerate() {
        for &loss in RoutingTable::constituents(group) {
            if base.weighted[loss.index()].is_none() {
                continue;
            }
            let x0 = params.clone().blocks_mut()[leaf].1.to_vec();
            let eval = |x: &[f64]| -> ird_core::Result<Evaluation> {
                let mut p = params.clone();
                p.blocks_mut()[leaf].1.copy_from_slice(x);
                let mut graph = Graph::new();
                if opts.corrupt_illumination_vjp {
                    graph.corrupt_illumination_vjp_for_testing();
                }
                let mut sg = build_step_with(
                    &frames,
                    &p,
                    &cfg.fit,
                    StepInputs { graph, degraded: pinned.clone(), clean_depth: pinned_clean.clone() },
                )?;
                let mut grads = sg.constituent_gradients(&[loss])?;
                Ok(Evaluation {
                    value: loss.value(&sg.bundle),
                    gradient: grads.swap_remove(leaf),
                    signature: sg.graph.signature(),
                })
            };
            let seed = cfg.fit.seed ^ ((leaf as u64) << 8) ^ loss.index() as u64;
            for report in finite_difference_check(eval, &x0, opts.step, opts.probes, seed)? {
                rows.push(ProbeRow { loss, group, leaf, report, passed: report.relative_error < opts.tolerance });
            }
        }
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    let mut text = format!("{GRADCHECK_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    write_text(&out.join(GRADCHECK_CSV), &text)?;
    for r in rows.iter().filter(|r| !r.passed) {
        console.say(format!("FAIL {}", r.csv()));
    }
    console.say(format!("gradcheck: {} probes, {failed} failed", rows.len()));
    if failed > 0 {
        return Err(CliError::GradcheckFailed { failed, total: rows.len() });
    }
    Ok(GradcheckOutcome { rows, failed })
}

/// Reads a decomposition export back (PFM files).
pub fn read_decomposition(dir: &Path) -> Result<Decomposition> {
    let read = |name: &str| -> Result<ImageBuffer> {
        let path = dir.join(format!("{name}.pfm"));
        crate::formats::read_pfm(&path)?.to_image().map_err(|e| CliError::format(&path, e.to_string()))
    };
    Ok(Decomposition {
        depth: read("depth")?,
        reflectance: read("reflectance")?,
        illumination: read("illumination")?,
        rendered: read("rendered")?,
    })
}
