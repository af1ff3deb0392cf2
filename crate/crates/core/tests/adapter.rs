#![cfg(unix)]

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use toonshade::guidance::{EmbeddingSource, PromptEmbedding};
use toonshade::models::adapter::{
    AdapterCommand, PluginManifest, SubprocessDenoiser, SubprocessPostProcessor,
    SubprocessTextEncoder,
};
use toonshade::models::toy::FrameLocalDenoiser;
use toonshade::models::{Denoiser, EncoderOptions, FastBlendConfig, PostProcessor, TextEncoder};
use toonshade::pipeline::{denoise_stage, StageConfig, StageContext};
use toonshade::scheduler::NoiseSchedule;
use toonshade::video::{Fps, FrameVideo};
use toonshade::Error;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\nop=\"$1\"\ndir=\"$2\"\n{body}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn stage() -> StageConfig {
    StageConfig {
        height: 16,
        width: 16,
        window_size: 4,
        window_stride: 2,
        inference_steps: 3,
        controls: vec![],
        seed: 5,
        ..StageConfig::main_defaults()
    }
}

fn run(denoiser: &dyn Denoiser) -> toonshade::Result<toonshade::Tensor4> {
    let pos = PromptEmbedding::new(vec![0.5; 6], 3, EmbeddingSource::PositiveText).unwrap();
    let neg = PromptEmbedding::zeros(10, 3).unwrap();
    let schedule = NoiseSchedule::default();
    let ctx = StageContext {
        denoiser,
        schedule: &schedule,
        positive: &pos,
        negative: &neg,
        controls: &[],
    };
    denoise_stage(None, [6, 2, 2, 4], &ctx, &stage()).map(|(x, _)| x)
}

#[test]
fn identity_plugin_matches_in_process_denoiser() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(
        dir.path(),
        "identity.sh",
        r#"[ "$op" = denoise ] || exit 9
grep -q '^temporal_mode = motion-modules$' "$dir/manifest.txt" || exit 7
grep -q '^output = output.tnsr$' "$dir/manifest.txt" || exit 7
cp "$dir/latents.tnsr" "$dir/output.tnsr""#,
    );
    let plugin = SubprocessDenoiser::new(AdapterCommand::new(prog), 32);
    let via_plugin = run(&plugin).unwrap();
    let in_process = run(&FrameLocalDenoiser::new(1.0, 0.0)).unwrap();
    assert_eq!(via_plugin, in_process);
}

#[test]
fn failing_plugin_reports_stderr_and_position() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(
        dir.path(),
        "fail.sh",
        "echo 'device out of memory' >&2\nexit 1",
    );
    let err = run(&SubprocessDenoiser::new(AdapterCommand::new(prog), 32)).unwrap_err();
    assert!(err.is_plugin());
    let msg = err.to_string();
    assert!(msg.contains("device out of memory"), "{msg}");
    assert!(
        msg.contains("window [1, 4]") && msg.contains("timestep 999"),
        "{msg}"
    );
}

#[test]
fn wrong_output_shape_is_a_plugin_error() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(
        dir.path(),
        "prompt.sh",
        r#"cp "$dir/prompt.tnsr" "$dir/output.tnsr""#,
    );
    let err = run(&SubprocessDenoiser::new(AdapterCommand::new(prog), 32)).unwrap_err();
    assert!(matches!(err, Error::Plugin { .. }), "{err}");
}

#[test]
fn missing_program_is_a_plugin_error() {
    let err = run(&SubprocessDenoiser::new(
        AdapterCommand::new("/nonexistent/denoiser"),
        32,
    ))
    .unwrap_err();
    assert!(err.is_plugin());
}

#[test]
fn text_encoder_plugin_reads_embedding() {
    let dir = tempfile::tempdir().unwrap();
    // (1, 1, 1, 2) tensor of 1.0
    let prog = script(
        dir.path(),
        "enc.sh",
        r#"grep -q '^clip_skip_final_attention = true$' "$dir/manifest.txt" || exit 7
printf 'TNSR\004\000\000\000\001\000\000\000\001\000\000\000\001\000\000\000\002\000\000\000\000\000\200\077\000\000\200\077' > "$dir/output.tnsr""#,
    );
    let enc = SubprocessTextEncoder::new(AdapterCommand::new(&prog), 2);
    let e = enc
        .encode(
            "anime",
            &EncoderOptions {
                clip_skip_final_attention: true,
            },
        )
        .unwrap();
    assert_eq!(e.values(), &[1.0, 1.0]);
    let wrong_dim = SubprocessTextEncoder::new(AdapterCommand::new(prog), 3);
    assert!(wrong_dim
        .encode(
            "anime",
            &EncoderOptions {
                clip_skip_final_attention: true
            }
        )
        .is_err());
}

#[test]
fn postprocessor_plugin_round_trips_frames() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(
        dir.path(),
        "blend.sh",
        r#"grep -q '^sliding_window_size = 30$' "$dir/manifest.txt" || exit 7
mkdir "$dir/out" && cp "$dir"/frames/*.png "$dir/out/""#,
    );
    let frames = (0..3)
        .map(|i| image::RgbImage::from_pixel(8, 8, image::Rgb([i * 40, 7, 200])))
        .collect();
    let video = FrameVideo::new(frames, Fps { num: 24, den: 1 }).unwrap();
    let out = SubprocessPostProcessor::new(AdapterCommand::new(prog))
        .process(&video, &FastBlendConfig::default())
        .unwrap();
    assert_eq!(out, video);
}

#[test]
fn manifest_binds_declared_slots_only() {
    let text = "\
# external denoiser only
[denoiser]
command = bin/unet
args = --device cpu
max_window = 24

[extractor.outline]
command = /opt/lineart
";
    let m = PluginManifest::parse(text, Path::new("/srv/models")).unwrap();
    let (cmd, max_window, _) = m.denoiser.clone().unwrap();
    assert_eq!(cmd.program, PathBuf::from("/srv/models/bin/unet"));
    assert_eq!(cmd.args, vec!["--device", "cpu"]);
    assert_eq!(max_window, 24);
    let bundle = m.bundle();
    assert_eq!(bundle.denoiser.max_window(), 24);
    assert_eq!(bundle.codec.name(), "toy-codec");
    assert_eq!(
        bundle
            .extractor(toonshade::models::ControlKind::Outline)
            .unwrap()
            .name(),
        "subprocess-extractor"
    );
    assert_ne!(bundle.postprocessor.name(), "subprocess-postprocessor");

    assert!(PluginManifest::parse("[denoiser]\nmax_window = 4\n", Path::new(".")).is_err());
    assert!(
        PluginManifest::parse("[denoiser]\ncommand = x\nmax_window = 40\n", Path::new("."))
            .is_err()
    );
    let err = PluginManifest::parse("[vae]\ncommand = x\n", Path::new(".")).unwrap_err();
    assert!(err.to_string().contains("vae"), "{err}");
}
