//! Stage orchestration: the windowed, guided DDIM loop and the two-stage
//! render job built on top of it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::guidance::{apply_cfg, encode_prompts, PromptEmbedding};
use crate::models::{
    ControlKind, ControlSignal, DenoiseRequest, Denoiser, ModelBundle, TemporalMode,
};
use crate::rng::SeededRng;
use crate::scheduler::{
    add_noise, ddim_step, init_noise_tagged, plan_timesteps, NoiseSchedule, TimestepPlan,
    INIT_NOISE_TAG, RENOISE_TAG,
};
use crate::tensor::Tensor4;
use crate::video::{save_frames, FrameVideo};
use crate::windows::{
    enumerate_windows, residency_plan, OverlapAccumulator, ResidencyAction, WeightProfile,
    WindowPlan,
};

pub const INTERMEDIATE_DIR: &str = "intermediate";

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub height: u32,
    pub width: u32,
    pub cfg_scale: f64,
    pub strength: f64,
    pub inference_steps: usize,
    pub window_size: usize,
    pub window_stride: usize,
    /// Control pathways in evaluation order, each with its conditioning scale.
    pub controls: Vec<(ControlKind, f64)>,
    pub temporal_mode: TemporalMode,
    pub seed: u64,
    /// Hot-tier frame budget; `None` uses the window size.
    pub hot_capacity: Option<usize>,
}

impl StageConfig {
    pub fn main_defaults() -> Self {
        Self {
            height: 1536,
            width: 1536,
            cfg_scale: 7.0,
            strength: 1.0,
            inference_steps: 10,
            window_size: 16,
            window_stride: 8,
            controls: vec![(ControlKind::Outline, 0.5), (ControlKind::Color, 0.5)],
            temporal_mode: TemporalMode::MotionModules,
            seed: 0,
            hot_capacity: None,
        }
    }

    pub fn editing_defaults() -> Self {
        Self {
            height: 512,
            width: 512,
            cfg_scale: 7.0,
            strength: 0.9,
            inference_steps: 20,
            window_size: 8,
            window_stride: 4,
            controls: vec![(ControlKind::Depth, 0.5), (ControlKind::Softedge, 0.5)],
            temporal_mode: TemporalMode::CrossFrameAttention,
            seed: 0,
            hot_capacity: None,
        }
    }

    fn invalid(key: &str, message: String) -> Error {
        Error::Config {
            line: None,
            key: Some(key.into()),
            message,
        }
    }

    /// Checks that need no model: geometry, ranges and the stride rule.
    pub fn validate_static(&self) -> Result<()> {
        for (key, v) in [("frame_height", self.height), ("frame_width", self.width)] {
            if v == 0 || v % 8 != 0 {
                return Err(Self::invalid(
                    key,
                    format!("{key} = {v} must be a positive multiple of 8"),
                ));
            }
        }
        if !self.cfg_scale.is_finite() {
            return Err(Self::invalid(
                "cfg_scale",
                "cfg_scale must be finite".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Self::invalid(
                "denoising_strength",
                format!("denoising_strength = {} must be in [0, 1]", self.strength),
            ));
        }
        if self.inference_steps == 0 {
            return Err(Self::invalid(
                "inference_steps",
                "inference_steps must be positive".into(),
            ));
        }
        if self.window_size == 0 {
            return Err(Self::invalid(
                "window_size",
                "window_size must be positive".into(),
            ));
        }
        if self.window_stride == 0 || self.window_stride >= self.window_size {
            return Err(Self::invalid(
                "window_stride",
                format!(
                    "window_stride = {} must satisfy s<d with window_size = {}",
                    self.window_stride, self.window_size
                ),
            ));
        }
        for &(kind, scale) in &self.controls {
            if !(0.0..=1.0).contains(&scale) {
                return Err(Self::invalid(
                    &format!("conditioning_scale.{kind}"),
                    format!("conditioning_scale.{kind} = {scale} must be in [0, 1]"),
                ));
            }
        }
        if let Some(c) = self.hot_capacity {
            if c < self.window_size {
                return Err(Self::invalid(
                    "hot_capacity",
                    format!(
                        "hot_capacity = {c} cannot hold a window of {}",
                        self.window_size
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Full check against the models that will run the stage.
    pub fn validate(&self, max_window: usize, spatial_factor: usize) -> Result<()> {
        self.validate_static()?;
        if self.window_size > max_window {
            return Err(Self::invalid(
                "window_size",
                format!(
                    "window_size = {} exceeds the denoiser limit of {max_window}",
                    self.window_size
                ),
            ));
        }
        let f = spatial_factor as u32;
        if f == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::Geometry(format!(
                "{}x{} is not divisible by the latent factor {f}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Counters collected while a stage runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageStats {
    pub windows: usize,
    pub timesteps: usize,
    pub denoiser_calls: usize,
    pub peak_hot_frames: usize,
}

/// Everything a stage evaluates besides the latents themselves.
#[derive(Clone, Copy)]
pub struct StageContext<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub positive: &'a PromptEmbedding,
    pub negative: &'a PromptEmbedding,
    /// Full-length controls, one frame per latent frame.
    pub controls: &'a [ControlSignal],
}

/// Runs the sampler from fresh noise (strength 1) or from `latents0`
/// re-noised to the first planned timestep.
pub fn denoise_stage(
    latents0: Option<&Tensor4>,
    latent_shape: [usize; 4],
    ctx: &StageContext<'_>,
    config: &StageConfig,
) -> Result<(Tensor4, StageStats)> {
    config.validate_static()?;
    if config.window_size > ctx.denoiser.max_window() {
        return Err(StageConfig::invalid(
            "window_size",
            format!(
                "window_size = {} exceeds the denoiser limit of {}",
                config.window_size,
                ctx.denoiser.max_window()
            ),
        ));
    }
    let plan = plan_timesteps(ctx.schedule, config.inference_steps, config.strength)?;
    let rng = SeededRng::new(config.seed);
    let start = if config.strength >= 1.0 {
        init_noise_tagged(latent_shape, &rng, INIT_NOISE_TAG)?
    } else {
        let x0 = latents0.ok_or_else(|| {
            Error::Parameter(format!(
                "denoising strength {} needs starting latents",
                config.strength
            ))
        })?;
        if x0.shape() != latent_shape {
            return Err(Error::shape("denoise_stage", &x0.shape(), &latent_shape));
        }
        match plan.first() {
            None => return Ok((x0.clone(), StageStats::default())),
            Some(t) => {
                let noise = init_noise_tagged(latent_shape, &rng, RENOISE_TAG)?;
                add_noise(x0, &noise, Some(t), ctx.schedule)?
            }
        }
    };
    sample_from(start, &plan, ctx, config)
}

/// The guided, windowed DDIM loop starting at `x` for the steps in `plan`.
pub fn sample_from(
    mut x: Tensor4,
    plan: &TimestepPlan,
    ctx: &StageContext<'_>,
    config: &StageConfig,
) -> Result<(Tensor4, StageStats)> {
    let frames = x.frames();
    for c in ctx.controls {
        if c.frames() != frames {
            return Err(Error::Shape(format!(
                "{} control has {} frames, latents have {frames}",
                c.kind,
                c.frames()
            )));
        }
    }
    let windows = enumerate_windows(frames, config.window_size, config.window_stride)?;
    let capacity = config.hot_capacity.unwrap_or(windows.size());
    let actions = residency_plan(&windows, capacity)?;
    let profile = WeightProfile::default();

    let mut stats = StageStats {
        windows: windows.len(),
        ..StageStats::default()
    };
    for (t, t_prev) in plan.steps() {
        let (e_pos, e_neg) = guided_sides(
            &x, t, &windows, &actions, capacity, profile, ctx, config, &mut stats,
        )?;
        let e = apply_cfg(&e_pos, &e_neg, config.cfg_scale)?;
        x = ddim_step(&x, &e, t, t_prev, ctx.schedule)?;
        if !x.is_finite() {
            return Err(Error::Parameter(format!(
                "latents became non-finite at timestep {t}"
            )));
        }
        stats.timesteps += 1;
    }
    Ok((x, stats))
}

#[allow(clippy::too_many_arguments)]
fn guided_sides(
    x: &Tensor4,
    t: usize,
    windows: &WindowPlan,
    actions: &[ResidencyAction],
    capacity: usize,
    profile: WeightProfile,
    ctx: &StageContext<'_>,
    config: &StageConfig,
    stats: &mut StageStats,
) -> Result<(Tensor4, Tensor4)> {
    let dims = x.frame_dims();
    let mut pos = OverlapAccumulator::new(windows, profile, dims);
    let mut neg = OverlapAccumulator::new(windows, profile, dims);
    let mut hot: BTreeMap<usize, &[f32]> = BTreeMap::new();
    for action in actions {
        match *action {
            ResidencyAction::Load(i) => {
                hot.insert(i, x.frame(i - 1));
                if hot.len() > capacity {
                    return Err(Error::Residency(format!(
                        "{} hot frames exceed capacity {capacity}",
                        hot.len()
                    )));
                }
                stats.peak_hot_frames = stats.peak_hot_frames.max(hot.len());
            }
            ResidencyAction::Evict(i) => {
                hot.remove(&i);
            }
            ResidencyAction::Evaluate(k) => {
                let w = windows.windows()[k];
                let slices = w
                    .frames()
                    .map(|i| {
                        hot.get(&i).copied().ok_or_else(|| {
                            Error::Residency(format!("frame {i} of window {w} is cold"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let latents = Tensor4::stack_frames(dims, slices)?;
                let controls = ctx
                    .controls
                    .iter()
                    .map(|c| c.window(w))
                    .collect::<Result<Vec<_>>>()?;
                for (prompt, acc) in [(ctx.positive, &mut pos), (ctx.negative, &mut neg)] {
                    let request = DenoiseRequest {
                        window: w,
                        latents: &latents,
                        timestep: t,
                        prompt,
                        controls: &controls,
                        temporal_mode: config.temporal_mode,
                    };
                    let out = ctx
                        .denoiser
                        .denoise(&request)
                        .map_err(|e| e.with_plugin_context(format!("window {w}, timestep {t}")))?;
                    stats.denoiser_calls += 1;
                    if out.shape() != latents.shape() {
                        return Err(Error::Plugin {
                            plugin: ctx.denoiser.name().into(),
                            message: format!(
                                "window {w}, timestep {t}: returned {:?}, expected {:?}",
                                out.shape(),
                                latents.shape()
                            ),
                        });
                    }
                    acc.push(k, out)?;
                }
            }
        }
    }
    Ok((pos.finish()?, neg.finish()?))
}

/// Inputs and models for a full two-stage render.
#[derive(Debug, Clone)]
pub struct RenderJob {
    pub input: FrameVideo,
    pub config: PipelineConfig,
    pub main_models: ModelBundle,
    pub editing_models: ModelBundle,
    /// Enables the editing branch when set.
    pub edit_prompt: Option<String>,
}

impl RenderJob {
    pub fn new(input: FrameVideo, config: PipelineConfig, models: ModelBundle) -> Self {
        Self {
            input,
            config,
            main_models: models.clone(),
            editing_models: models,
            edit_prompt: None,
        }
    }

    pub fn with_edit_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.edit_prompt = Some(prompt.into());
        self
    }

    pub fn editing_enabled(&self) -> bool {
        self.edit_prompt.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub video: FrameVideo,
    pub stats: StageStats,
}

/// Main-stage result along with the control videos it consumed.
#[derive(Debug, Clone)]
pub struct MainOutput {
    pub video: FrameVideo,
    pub stats: StageStats,
    pub outline: Option<FrameVideo>,
    pub color: FrameVideo,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub video: FrameVideo,
    pub outline: Option<FrameVideo>,
    pub color: FrameVideo,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub frames: usize,
    pub editing: Option<StageStats>,
    pub main: StageStats,
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut out = format!("frames = {}\n", self.frames);
        let _ = writeln!(
            out,
            "editing = {}",
            if self.editing.is_some() {
                "enabled"
            } else {
                "disabled"
            }
        );
        let stages = self
            .editing
            .map(|s| ("editing", s))
            .into_iter()
            .chain([("main", self.main)]);
        for (name, s) in stages {
            let _ = writeln!(out, "{name}.windows = {}", s.windows);
            let _ = writeln!(out, "{name}.timesteps = {}", s.timesteps);
            let _ = writeln!(out, "{name}.denoiser_calls = {}", s.denoiser_calls);
            let _ = writeln!(out, "{name}.peak_hot_frames = {}", s.peak_hot_frames);
        }
        f.write_str(&out)
    }
}

fn at_size(video: &FrameVideo, stage: &StageConfig) -> Result<FrameVideo> {
    video.resize_bilinear(stage.width, stage.height)
}

fn stage_prompts(
    models: &ModelBundle,
    config: &PipelineConfig,
    stage: &StageConfig,
    text: &str,
) -> Result<(PromptEmbedding, PromptEmbedding)> {
    encode_prompts(
        models.text_encoder.as_ref(),
        text,
        config.io.negative_embedding.as_deref(),
        &config.guidance(stage),
    )
}

fn run_stage(
    models: &ModelBundle,
    stage: &StageConfig,
    latents0: Option<&Tensor4>,
    frames: usize,
    prompts: &(PromptEmbedding, PromptEmbedding),
    controls: &[ControlSignal],
) -> Result<(Tensor4, StageStats)> {
    stage.validate(models.denoiser.max_window(), models.codec.spatial_factor())?;
    let shape = models
        .codec
        .latent_shape(frames, stage.height, stage.width)?;
    let schedule = NoiseSchedule::default();
    let ctx = StageContext {
        denoiser: models.denoiser.as_ref(),
        schedule: &schedule,
        positive: &prompts.0,
        negative: &prompts.1,
        controls,
    };
    denoise_stage(latents0, shape, &ctx, stage)
}

/// Text-guided colour editing at the editing resolution. Returns the
/// post-processed colour video for the main stage.
pub fn run_editing(job: &RenderJob) -> Result<StageOutput> {
    let prompt = job
        .edit_prompt
        .as_deref()
        .ok_or_else(|| Error::Parameter("the editing branch needs an edit prompt".into()))?;
    let stage = &job.config.editing;
    let models = &job.editing_models;
    stage.validate(models.denoiser.max_window(), models.codec.spatial_factor())?;
    let input = at_size(&job.input, stage)?;
    let controls = stage
        .controls
        .iter()
        .map(|&(kind, scale)| {
            ControlSignal::new(kind, models.extractor(kind)?.extract(&input)?, scale)
        })
        .collect::<Result<Vec<_>>>()?;
    let latents0 = models.codec.encode(&input)?;
    let prompts = stage_prompts(models, &job.config, stage, prompt)?;
    let (latents, stats) = run_stage(
        models,
        stage,
        Some(&latents0),
        input.len(),
        &prompts,
        &controls,
    )?;
    let decoded = models.codec.decode(&latents, input.fps())?;
    let video = models
        .postprocessor
        .process(&decoded, &job.config.fastblend)?;
    if video.len() != decoded.len()
        || video.width() != decoded.width()
        || video.height() != decoded.height()
    {
        return Err(Error::Plugin {
            plugin: models.postprocessor.name().into(),
            message: "post-processor changed frame count or size".into(),
        });
    }
    Ok(StageOutput { video, stats })
}

/// Toon shading at the main resolution. `color_source` replaces the input
/// video as the colour signal; it is resampled to the main size.
pub fn run_main(job: &RenderJob, color_source: Option<&FrameVideo>) -> Result<MainOutput> {
    let stage = &job.config.main;
    let models = &job.main_models;
    stage.validate(models.denoiser.max_window(), models.codec.spatial_factor())?;
    let input = at_size(&job.input, stage)?;
    let color = match color_source {
        None => input.clone(),
        Some(v) => {
            if v.len() != input.len() {
                return Err(Error::Shape(format!(
                    "colour video has {} frames, input has {}",
                    v.len(),
                    input.len()
                )));
            }
            at_size(v, stage)?
        }
    };
    let mut outline = None;
    let mut controls = Vec::with_capacity(stage.controls.len());
    for &(kind, scale) in &stage.controls {
        let source = if kind == ControlKind::Color {
            &color
        } else {
            &input
        };
        let frames = models.extractor(kind)?.extract(source)?;
        if kind == ControlKind::Outline {
            outline = Some(FrameVideo::from_unit_tensor(&frames, input.fps())?);
        }
        controls.push(ControlSignal::new(kind, frames, scale)?);
    }
    let latents0 = if stage.strength < 1.0 {
        Some(models.codec.encode(&input)?)
    } else {
        None
    };
    let prompts = stage_prompts(models, &job.config, stage, &job.config.io.positive_prompt)?;
    drop(input);
    let (latents, stats) = run_stage(
        models,
        stage,
        latents0.as_ref(),
        color.len(),
        &prompts,
        &controls,
    )?;
    drop(controls);
    let video = models.codec.decode(&latents, color.fps())?;
    Ok(MainOutput {
        video,
        stats,
        outline,
        color,
    })
}

/// Editing branch (when enabled) feeding the main stage.
pub fn run_full(job: &RenderJob) -> Result<RenderOutput> {
    job.config.validate()?;
    let edited = if job.editing_enabled() {
        Some(run_editing(job)?)
    } else {
        None
    };
    let main = run_main(job, edited.as_ref().map(|e| &e.video))?;
    Ok(RenderOutput {
        summary: RunSummary {
            frames: main.video.len(),
            editing: edited.map(|e| e.stats),
            main: main.stats,
        },
        video: main.video,
        outline: main.outline,
        color: main.color,
    })
}

/// Writes output frames to `dir`, plus `intermediate/{outline,color}` when
/// asked.
pub fn save_render(output: &RenderOutput, dir: &Path, keep_intermediate: bool) -> Result<()> {
    save_frames(&output.video, dir)?;
    if keep_intermediate {
        let root = dir.join(INTERMEDIATE_DIR);
        if let Some(outline) = &output.outline {
            save_frames(outline, &root.join("outline"))?;
        }
        save_frames(&output.color, &root.join("color"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::EmbeddingSource;
    use crate::models::toy::{FrameLocalDenoiser, OracleDenoiser};
    use crate::scheduler::{add_noise, init_noise_tagged};

    fn prompts() -> (PromptEmbedding, PromptEmbedding) {
        (
            PromptEmbedding::new(vec![0.25; 8], 4, EmbeddingSource::PositiveText).unwrap(),
            PromptEmbedding::zeros(10, 4).unwrap(),
        )
    }

    fn small(window_size: usize, window_stride: usize, steps: usize, strength: f64) -> StageConfig {
        StageConfig {
            height: 16,
            width: 16,
            window_size,
            window_stride,
            inference_steps: steps,
            strength,
            controls: vec![],
            seed: 11,
            ..StageConfig::main_defaults()
        }
    }

    #[test]
    fn defaults_match_table() {
        let m = StageConfig::main_defaults();
        assert_eq!(
            (
                m.height,
                m.width,
                m.inference_steps,
                m.window_size,
                m.window_stride
            ),
            (1536, 1536, 10, 16, 8)
        );
        assert_eq!((m.cfg_scale, m.strength), (7.0, 1.0));
        let e = StageConfig::editing_defaults();
        assert_eq!(
            (
                e.height,
                e.width,
                e.inference_steps,
                e.window_size,
                e.window_stride
            ),
            (512, 512, 20, 8, 4)
        );
        assert_eq!((e.cfg_scale, e.strength), (7.0, 0.9));
        assert_eq!(e.temporal_mode, TemporalMode::CrossFrameAttention);
        m.validate_static().unwrap();
        e.validate_static().unwrap();
    }

    #[test]
    fn static_validation_names_keys() {
        let key_of = |c: StageConfig| match c.validate_static().unwrap_err() {
            Error::Config { key, .. } => key.unwrap(),
            other => panic!("{other}"),
        };
        assert_eq!(
            key_of(StageConfig {
                window_stride: 16,
                ..StageConfig::main_defaults()
            }),
            "window_stride"
        );
        assert_eq!(
            key_of(StageConfig {
                height: 100,
                ..StageConfig::main_defaults()
            }),
            "frame_height"
        );
        assert_eq!(
            key_of(StageConfig {
                strength: 1.5,
                ..StageConfig::main_defaults()
            }),
            "denoising_strength"
        );
        let err = StageConfig {
            window_stride: 20,
            ..StageConfig::main_defaults()
        }
        .validate_static()
        .unwrap_err();
        assert!(err.to_string().contains("s<d"), "{err}");
        assert!(StageConfig::main_defaults().validate(8, 8).is_err());
    }

    #[test]
    fn strength_zero_returns_input() {
        let (pos, neg) = prompts();
        let schedule = NoiseSchedule::default();
        let den = FrameLocalDenoiser::new(0.5, 0.1);
        let ctx = StageContext {
            denoiser: &den,
            schedule: &schedule,
            positive: &pos,
            negative: &neg,
            controls: &[],
        };
        let x0 = Tensor4::from_fn([5, 2, 2, 4], |i, y, x, k| (i + y + x + k) as f32 * 0.1).unwrap();
        let (out, stats) =
            denoise_stage(Some(&x0), x0.shape(), &ctx, &small(4, 2, 10, 0.0)).unwrap();
        assert_eq!(out, x0);
        assert_eq!(stats.denoiser_calls, 0);
    }

    #[test]
    fn partial_strength_needs_latents() {
        let (pos, neg) = prompts();
        let schedule = NoiseSchedule::default();
        let den = FrameLocalDenoiser::new(0.5, 0.1);
        let ctx = StageContext {
            denoiser: &den,
            schedule: &schedule,
            positive: &pos,
            negative: &neg,
            controls: &[],
        };
        let err = denoise_stage(None, [4, 2, 2, 4], &ctx, &small(4, 2, 10, 0.5)).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)), "{err}");
    }

    #[test]
    fn oracle_recovers_clean_latents() {
        let (pos, neg) = prompts();
        let schedule = NoiseSchedule::default();
        let shape = [12, 2, 2, 4];
        let x0 = init_noise_tagged(shape, &SeededRng::new(3), "x0").unwrap();
        let eps = init_noise_tagged(shape, &SeededRng::new(4), "eps").unwrap();
        let den = OracleDenoiser::new(eps.clone());
        let ctx = StageContext {
            denoiser: &den,
            schedule: &schedule,
            positive: &pos,
            negative: &neg,
            controls: &[],
        };
        let cfg = small(8, 4, 10, 1.0);
        let plan = plan_timesteps(&schedule, 10, 1.0).unwrap();
        let xt = add_noise(&x0, &eps, plan.first(), &schedule).unwrap();
        let (out, stats) = sample_from(xt, &plan, &ctx, &cfg).unwrap();
        assert!(out.max_abs_diff(&x0).unwrap() < 1e-4);
        assert_eq!(stats.timesteps, 10);
        assert_eq!(stats.denoiser_calls, stats.windows * 2 * 10);
        assert!(stats.peak_hot_frames <= 8);
    }

    #[test]
    fn plugin_errors_carry_loop_position() {
        let (pos, neg) = prompts();
        let schedule = NoiseSchedule::default();
        let den = OracleDenoiser::new(Tensor4::zeros([3, 2, 2, 4]).unwrap());
        let ctx = StageContext {
            denoiser: &den,
            schedule: &schedule,
            positive: &pos,
            negative: &neg,
            controls: &[],
        };
        let err = denoise_stage(None, [6, 2, 2, 4], &ctx, &small(4, 2, 10, 1.0)).unwrap_err();
        assert!(err.is_plugin());
        assert!(err.to_string().contains("timestep 999"), "{err}");
    }

    #[test]
    fn summary_lines_are_stable() {
        let s = RunSummary {
            frames: 24,
            editing: None,
            main: StageStats {
                windows: 3,
                timesteps: 10,
                denoiser_calls: 60,
                peak_hot_frames: 16,
            },
        };
        assert_eq!(
            s.to_string(),
            "frames = 24\nediting = disabled\nmain.windows = 3\nmain.timesteps = 10\nmain.denoiser_calls = 60\nmain.peak_hot_frames = 16\n"
        );
    }
}
