//! Command-line front end.
//!
//! Subcommands: `tokenize`, `detokenize`, `generate`, `edit`, `train`,
//! `verify`, `spectra`, `bench`. All randomness flows from `--seed`; every
//! subcommand prints the effective seed it ran with.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mscale_core::attention::{build_mask, mask_bitmap, sequence_from_tag_string};
use mscale_core::generation::{GuidanceConfig, Pipeline};
use mscale_core::model::{init_params, init_teacher_params, ModelConfig};
use mscale_core::params::ParamSet;
use mscale_core::ppm::{read_ppm, write_ppm};
use mscale_core::tensor::resize_plain;
use mscale_core::tokenizer::{
    encode_multiscale, read_codes, write_codes, PixelLatentMap, Quantizer, ScaleSchedule,
};
use mscale_core::training::data::{caption_image_pairs, stage1_data, toy_unified_data};
use mscale_core::training::{build_toy_teacher, StageRunner, TrainPlan};
use mscale_core::verify::run_verify;

/// Seed of the fixed pixel↔latent projection shared by every subcommand.
const PIXEL_MAP_SEED: u64 = 7;

#[derive(Parser)]
#[command(name = "mscale", version, about = "Desk-scale unified multimodal decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model preset: desk, paper, or toy (the unified-training shape).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Checkpoint to load parameters from (seeded init otherwise).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl ModelArgs {
    fn config(&self) -> anyhow::Result<ModelConfig> {
        Ok(match self.preset.as_str() {
            "desk" => ModelConfig::desk_small(),
            "paper" => ModelConfig::paper_shaped(),
            "toy" => ModelConfig { max_scales: 4, ..ModelConfig::desk_small() },
            other => bail!("unknown preset `{other}` (expected desk, paper or toy)"),
        })
    }

    fn params(&self, config: &ModelConfig, seed: u64) -> anyhow::Result<ParamSet> {
        let mut params = init_params(config, seed);
        if let Some(path) = &self.checkpoint {
            params.load_into(path).with_context(|| format!("loading {}", path.display()))?;
        }
        Ok(params)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a PPM image into a multi-scale code file.
    Tokenize {
        #[arg(long)]
        image: PathBuf,
        /// Tabulated aspect ratio, e.g. 1.0 or 0.75.
        #[arg(long)]
        ratio: f64,
        /// Scale count K (1..=13).
        #[arg(long)]
        scales: usize,
        #[arg(long)]
        out: PathBuf,
        /// Latent channel count of the pixel map.
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode a code file back to a PPM image.
    Detokenize {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Text-to-image generation.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        #[arg(long, default_value_t = 4)]
        scales: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Text guidance scale λ_t.
        #[arg(long = "lambda-t", default_value_t = 20.0)]
        lambda_t: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Instruction-guided image editing from a reference image.
    Edit {
        /// Reference PPM; sides must divide by 28.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long = "lambda-i", default_value_t = 1.0)]
        lambda_i: f64,
        #[arg(long = "lambda-t", default_value_t = 3.0)]
        lambda_t: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        #[arg(long, default_value_t = 4)]
        scales: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run a training-stage analog on the built-in toy corpora.
    Train {
        #[arg(long)]
        stage: u8,
        /// Flat key=value config file overriding the stage defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training log (TSV, one line per optimizer step); stdout if omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run registered invariant checks (`all`, a module name, or `masks`).
    Verify {
        /// all | tensor | tokenizer | attention | moe | model | generation
        /// | training | harness | masks
        #[arg(default_value = "all")]
        selection: String,
        /// Tag string for `verify masks`, e.g. "TT UU G1 G2x4".
        #[arg(long)]
        tags: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump per-scale code maps and their DFT magnitude spectra as PPMs.
    Spectra {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Micro-benchmark: wall-clock prefill over sequence lengths (TSV).
    Bench {
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "64,128,256")]
        lengths: String,
        /// Also time a stand-in encoder stage ahead of the decoder.
        #[arg(long)]
        with_encoder: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Tokenize { image, ratio, scales, out, dim, seed } => {
            println!("effective seed: {seed}");
            let schedule = ScaleSchedule::builtin(ratio, scales)?;
            let (ph, pw) = schedule.pixel_size();
            let mut img = read_ppm(&image)?;
            if (img.shape()[1], img.shape()[2]) != (ph, pw) {
                println!(
                    "resizing {}×{} input to the schedule's {ph}×{pw}",
                    img.shape()[1],
                    img.shape()[2]
                );
                img = resize_plain(&img, (ph, pw))?;
            }
            let pixels = PixelLatentMap::new(dim, PIXEL_MAP_SEED);
            let latent = pixels.encode(&img)?;
            let codes = encode_multiscale(&latent, &schedule, Quantizer::Bsq)?;
            write_codes(&out, &codes)?;
            println!(
                "wrote {} scales, {} tokens, d={} to {}",
                codes.num_scales(),
                codes.total_tokens(),
                codes.dim,
                out.display()
            );
        }
        Cmd::Detokenize { codes, out, seed } => {
            println!("effective seed: {seed}");
            let codes = read_codes(&codes)?;
            let schedule = ScaleSchedule::from_sizes(codes.sizes())?;
            let latent = mscale_core::tokenizer::decode_multiscale(&codes, &schedule)?;
            let pixels = PixelLatentMap::new(codes.dim, PIXEL_MAP_SEED);
            let img = pixels.decode(&latent)?.map(|v| v.clamp(0.0, 1.0));
            write_ppm(&out, &img)?;
            println!("wrote {}×{} image to {}", img.shape()[1], img.shape()[2], out.display());
        }
        Cmd::Generate { prompt, ratio, scales, seed, out, lambda_t, temperature, model } => {
            println!("effective seed: {seed}");
            let config = model.config()?;
            let params = model.params(&config, seed)?;
            let pixels = PixelLatentMap::new(config.code_dim, PIXEL_MAP_SEED);
            let schedule = ScaleSchedule::builtin(ratio, scales)?;
            let guidance = GuidanceConfig {
                lambda_text: lambda_t,
                temperature,
                ..GuidanceConfig::t2i_default()
            };
            let pipe = Pipeline { params: &params, config: &config, pixels: &pixels };
            let img = pipe.run_t2i(&prompt, &schedule, &guidance, seed)?;
            write_ppm(&out, &img)?;
            println!("wrote {}×{} image to {}", img.shape()[1], img.shape()[2], out.display());
        }
        Cmd::Edit {
            reference,
            prompt,
            lambda_i,
            lambda_t,
            temperature,
            ratio,
            scales,
            seed,
            out,
            model,
        } => {
            println!("effective seed: {seed}");
            let config = model.config()?;
            let params = model.params(&config, seed)?;
            let pixels = PixelLatentMap::new(config.code_dim, PIXEL_MAP_SEED);
            let schedule = ScaleSchedule::builtin(ratio, scales)?;
            let reference = read_ppm(&reference)?;
            let guidance = GuidanceConfig {
                lambda_text: lambda_t,
                lambda_image: lambda_i,
                temperature,
                ..GuidanceConfig::edit_default()
            };
            let pipe = Pipeline { params: &params, config: &config, pixels: &pixels };
            let img = pipe.run_edit(&reference, &prompt, &schedule, &guidance, seed)?;
            write_ppm(&out, &img)?;
            println!("wrote {}×{} image to {}", img.shape()[1], img.shape()[2], out.display());
        }
        Cmd::Train { stage, config, seed, out, log } => {
            println!("effective seed: {seed}");
            let mut plan = match stage {
                1 => TrainPlan::stage1(30),
                2 => TrainPlan::stage2(200),
                3 => TrainPlan::stage3(200),
                other => bail!("unknown stage {other} (expected 1, 2 or 3)"),
            };
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                plan.apply_config_text(&text)?;
            }
            let model_config = if stage == 1 {
                ModelConfig::desk_small()
            } else {
                ModelConfig { max_scales: plan.num_scales, ..ModelConfig::desk_small() }
            };
            let params = init_params(&model_config, seed);
            let pixels = PixelLatentMap::new(model_config.code_dim, PIXEL_MAP_SEED);
            let (teacher, data) = if stage == 1 {
                let pairs = caption_image_pairs(32, 56);
                println!("training teacher connector (200 steps, 32 pairs)");
                let teacher = build_toy_teacher(&model_config, &params, &pairs, 200, seed)?;
                println!(
                    "teacher NTP {:.4} → {:.4}",
                    teacher.losses.first().unwrap(),
                    teacher.losses.last().unwrap()
                );
                (Some(teacher.params), stage1_data(&pixels, plan.num_scales, 8, 4)?)
            } else {
                (None, toy_unified_data(&pixels)?)
            };
            let steps = plan.steps;
            let mut runner =
                StageRunner::new(model_config, params, teacher, data, plan, seed)?;
            println!("accumulation counts (T,U,G): {:?}", runner.accumulation_counts());
            let mut log_text = String::new();
            for _ in 0..steps {
                let line = runner.step()?;
                log_text.push_str(&line.to_string());
                log_text.push('\n');
                if log.is_none() {
                    println!("{line}");
                }
            }
            if let Some(path) = &log {
                std::fs::write(path, log_text)?;
                println!("log written to {}", path.display());
            }
            runner.params.save(&out)?;
            println!("checkpoint written to {}", out.display());
        }
        Cmd::Verify { selection, tags, seed } => {
            println!("effective seed: {seed}");
            if selection == "masks" {
                let tags = tags.context("verify masks needs --tags \"TT UU G1 G2x4\"")?;
                let seq = sequence_from_tag_string(&tags)?;
                print!("{}", mask_bitmap(&build_mask(&seq)));
                return Ok(());
            }
            let results = run_verify(&selection)?;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{} {:44} measured {:>12.3e}  tolerance {:>9.3e}  {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.measured,
                    r.tolerance,
                    r.detail
                );
                if !r.passed {
                    failed += 1;
                }
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                std::process::exit(1);
            }
        }
        Cmd::Spectra { codes, out, seed } => {
            println!("effective seed: {seed}");
            let codes = read_codes(&codes)?;
            let written = mscale_core::spectra::dump_scale_spectra(&codes, &out)?;
            for path in &written {
                println!("wrote {}", path.display());
            }
        }
        Cmd::Bench { lengths, with_encoder, seed, model } => {
            println!("effective seed: {seed}");
            let config = model.config()?;
            let params = model.params(&config, seed)?;
            let lengths: Vec<usize> = lengths
                .split(',')
                .map(|s| s.trim().parse::<usize>().context("bad length list"))
                .collect::<anyhow::Result<_>>()?;
            bench_prefill(&config, &params, &lengths, with_encoder, seed)?;
        }
    }
    Ok(())
}

/// Median wall-clock prefill per sequence length, TSV on stdout. With the
/// encoder flag, a stand-in vision encoder (teacher embedding stack over a
/// 448² image) runs ahead of the decoder and its time adds to the
/// time-to-first-logit column.
fn bench_prefill(
    config: &ModelConfig,
    params: &ParamSet,
    lengths: &[usize],
    with_encoder: bool,
    seed: u64,
) -> anyhow::Result<()> {
    use mscale_core::attention::{ModalityTag, SampleTokens, TokenContent};
    use mscale_core::model::{forward, ForwardPath};
    use mscale_core::params::Binder;
    use mscale_core::tensor::{Tape, Tensor};

    let teacher = with_encoder.then(|| init_teacher_params(config, params, seed));
    if with_encoder {
        println!("seq_len\ttokens\tprefill_ms\tencoder_ms\tttfl_ms");
    } else {
        println!("seq_len\ttokens\tprefill_ms");
    }
    for &n in lengths {
        let mut sample = SampleTokens::default();
        for i in 0..n {
            sample.push(
                TokenContent::Text((i % 251) as u32),
                ModalityTag::Text,
            );
        }
        let seq = mscale_core::attention::TaggedSequence::single(&sample);
        let mut times = Vec::new();
        for _ in 0..3 {
            let t0 = Instant::now();
            let tape = Tape::new();
            let binder = Binder::new(&tape, params);
            let out = forward(&binder, &seq, config, ForwardPath::Student)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let _ = out.final_hidden.value();
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let prefill_ms = times[1];
        if let Some(teacher) = &teacher {
            // encoder stage: patchify a 448² image through the stand-in
            // ViT + connector (256 visual tokens)
            let image = Tensor::full(vec![3, 448, 448], 0.5);
            let tokens = mscale_core::model::image_to_patch_tokens(&image, config)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let mut enc_sample = SampleTokens::default();
            for px in tokens {
                enc_sample.push(TokenContent::Patch(px), ModalityTag::UndVision);
            }
            enc_sample.push(TokenContent::Text(0), ModalityTag::Text);
            let enc_seq = mscale_core::attention::TaggedSequence::single(&enc_sample);
            let mut enc_times = Vec::new();
            for _ in 0..3 {
                let t0 = Instant::now();
                let tape = Tape::new();
                let binder = Binder::new(&tape, teacher);
                let out = forward(&binder, &enc_seq, config, ForwardPath::Teacher)
                    .map_err(|e| anyhow::anyhow!("{e}"))?;
                let _ = out.final_hidden.value();
                enc_times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            enc_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let encoder_ms = enc_times[1];
            println!(
                "{n}\t{n}\t{prefill_ms:.3}\t{encoder_ms:.3}\t{:.3}",
                prefill_ms + encoder_ms
            );
        } else {
            println!("{n}\t{n}\t{prefill_ms:.3}");
        }
    }
    Ok(())
}
