use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flmm_core::attention::{build_attention_stack, kmeans_cluster, LayerSubset, MergeMode, StackConfig};
use flmm_core::checkpoint::Archive;
use flmm_core::datasets::{self, convert_res_file, synth_shapes, ImageRef, SynthConfig};
use flmm_core::decoder::BinaryMask;
use flmm_core::heads::{Heads, HeadsConfig};
use flmm_core::host::{HostModel, ToyLmm, ToyLmmConfig};
use flmm_core::image::ImageArray;
use flmm_core::metrics::default_thresholds;
use flmm_core::pipeline::{evaluate, Pipeline, DEFAULT_MARGIN};
use flmm_core::selector::keyword_spans;
use flmm_core::training::{fit, write_csv_log, TrainConfig};
use flmm_core::{selftest, Error, Result};

const CKPT_ENV: &str = "FLMM_CKPT_DIR";
const CKPT_FILE: &str = "heads.flmm";

#[derive(Parser)]
#[command(name = "flmm", version, about = "Ground a frozen multimodal transformer's answers in pixel masks")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct CkptArgs {
    /// Heads checkpoint. Defaults to `$FLMM_CKPT_DIR/heads.flmm`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Pre-computed refiner image embeddings (`image_embedding[<id>]` arrays).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Upsample decoder logits instead of running the refiner.
    #[arg(long)]
    no_refine: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the heads on a JSONL dataset.
    Train {
        /// Flat TOML of training options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Start from these heads instead of fresh ones.
        #[arg(long)]
        init: Option<PathBuf>,
        /// JSON heads config used for fresh heads.
        #[arg(long)]
        heads_config: Option<PathBuf>,
        /// Per-step CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a JSONL dataset.
    Eval {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Ground every keyword of an answer.
    Ground {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        image: PathBuf,
        /// User text.
        #[arg(long)]
        text: String,
        /// Use this answer instead of generating one.
        #[arg(long)]
        answer: Option<String>,
        /// Write the JSON record here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment a referring expression.
    Refer {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expr: String,
        /// Mask PNG output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ground the relevant object, crop it, and answer on the crop.
    Viscot {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long, default_value_t = DEFAULT_MARGIN)]
        margin: f64,
        /// Crop PNG output.
        #[arg(long)]
        crop_out: Option<PathBuf>,
    },
    /// K-Means clusters of the attention stack of each keyword.
    VizAttn {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        answer: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// `all`, `early`, `mid`, `late` or a comma list of indices.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value = "average")]
        merge: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Output directory for PNGs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert referring-expression records to grounded-caption samples.
    ConvertResToPng {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic shapes dataset.
    Synth {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suites.
    Selftest,
}

fn ckpt_path(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(CKPT_ENV)
        .map(|d| PathBuf::from(d).join(CKPT_FILE))
        .ok_or_else(|| Error::InvalidArgument(format!("no --ckpt given and {CKPT_ENV} is unset")))
}

fn load_heads(a: &CkptArgs) -> Result<(ToyLmm, Heads)> {
    let mut heads = Heads::load(&ckpt_path(a.ckpt.as_deref())?)?;
    if let Some(e) = &a.embeddings {
        heads.attach_external_embeddings(&Archive::load(e)?)?;
    }
    let host = ToyLmm::new(heads.cfg.host.clone())?;
    Ok((host, heads))
}

fn pipeline<'a>(host: &'a ToyLmm, heads: &'a Heads, a: &CkptArgs) -> Pipeline<'a> {
    let mut p = Pipeline::new(host, heads);
    p.cfg.bypass_refiner = a.no_refine;
    p
}

fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn mask_image(m: &BinaryMask) -> ImageArray {
    let mut img = ImageArray::filled(m.height, m.width, [0.0; 3]);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) {
                img.set_pixel(y, x, [1.0; 3]);
            }
        }
    }
    img
}

fn write_json(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.60, 0.90],
    [0.20, 0.80, 0.20],
    [0.95, 0.80, 0.10],
    [0.60, 0.20, 0.80],
    [0.95, 0.50, 0.10],
    [0.10, 0.80, 0.70],
    [0.50, 0.50, 0.50],
];

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            data,
            out,
            init,
            heads_config,
            log,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.seed = cli.seed;
            let samples = datasets::load_samples(&data)?;
            let mut heads = match (&init, &heads_config) {
                (Some(p), _) => Heads::load(p)?,
                (None, Some(p)) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let hc: HeadsConfig = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                    Heads::new(hc)?
                }
                (None, None) => Heads::new(HeadsConfig::desk(ToyLmmConfig::default(), cli.seed)?)?,
            };
            let host = ToyLmm::new(heads.cfg.host.clone())?;
            let report = fit(&host, &mut heads, &samples, &cfg, data.parent(), |l| {
                eprintln!(
                    "step {:>5}  lr {:.3e}  bce {:.4}  dice {:.4}  kw {:.4}  |g| {:.3}",
                    l.step, l.lr, l.bce, l.dice, l.selector_bce, l.grad_norm
                );
            })?;
            heads.save(&out)?;
            if let Some(p) = &log {
                write_csv_log(p, &report.logs)?;
            }
            eprintln!("{} steps, checkpoint written to {}", report.logs.len(), out.display());
            Ok(())
        }
        Cmd::Eval { ckpt, data, report } => {
            let (host, heads) = load_heads(&ckpt)?;
            let samples = datasets::load_samples(&data)?;
            let tally = evaluate(&pipeline(&host, &heads, &ckpt), &samples, data.parent())?;
            let r = tally.report(&default_thresholds());
            write_json(&serde_json::to_value(r).expect("report serialises"), report.as_deref())
        }
        Cmd::Ground {
            ckpt,
            image,
            text,
            answer,
            out,
        } => {
            let (host, heads) = load_heads(&ckpt)?;
            let img = ImageArray::load_png(&image)?;
            let id = image_id(&image);
            let g = pipeline(&host, &heads, &ckpt).ground_conversation(&img, &text, answer.as_deref(), Some(&id))?;
            let json = g.to_json(&id, ImageRef::Path(image.to_string_lossy().into_owned()));
            write_json(&json, out.as_deref())
        }
        Cmd::Refer { ckpt, image, expr, out } => {
            let (host, heads) = load_heads(&ckpt)?;
            let img = ImageArray::load_png(&image)?;
            let g = pipeline(&host, &heads, &ckpt).refer_segment(&img, &expr, Some(&image_id(&image)))?;
            println!(
                "{} pixels, prompt box {:?}{}",
                g.mask.count(),
                g.prompt_box,
                if g.box_fallback { " (fallback)" } else { "" }
            );
            if let Some(p) = out {
                mask_image(&g.mask).save_png(&p)?;
            }
            Ok(())
        }
        Cmd::Viscot {
            ckpt,
            image,
            question,
            margin,
            crop_out,
        } => {
            let (host, heads) = load_heads(&ckpt)?;
            let img = ImageArray::load_png(&image)?;
            let r = pipeline(&host, &heads, &ckpt).viscot(&img, &question, margin)?;
            let b = r.crop_box;
            let json = serde_json::json!({
                "object": r.object_text,
                "crop_box": [b.x0, b.y0, b.x1, b.y1],
                "crop_fallback": r.crop_fallback,
                "object_pixels": r.object_mask.as_ref().map(|g| g.mask.count()),
                "answer": r.answer,
            });
            if let Some(p) = crop_out {
                r.crop.save_png(&p)?;
            }
            write_json(&json, None)
        }
        Cmd::VizAttn {
            ckpt,
            image,
            text,
            answer,
            k,
            layers,
            merge,
            size,
            out,
        } => {
            let (host, heads) = load_heads(&ckpt)?;
            let img = ImageArray::load_png(&image)?;
            let cfg = StackConfig {
                target: (size, size),
                merge: merge.parse::<MergeMode>()?,
                layers: layers.parse::<LayerSubset>()?,
                ..StackConfig::default()
            };
            let conv = host.build_conversation(&text, &answer)?;
            let rec = host.forward_capture(&conv, &img)?;
            let scores = heads.selector.score_tokens(&rec.final_hidden)?;
            let spans = keyword_spans(&scores, &conv, &heads.cfg.selector);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, s) in spans.iter().enumerate() {
                let stack = build_attention_stack(&rec, s.tokens.clone(), &conv.image_span, host.spec().grid, &cfg)?;
                let labels = kmeans_cluster(&stack, k, cli.seed, 50)?;
                let mut vis = ImageArray::filled(labels.height, labels.width, [0.0; 3]);
                for y in 0..labels.height {
                    for x in 0..labels.width {
                        vis.set_pixel(y, x, PALETTE[labels.labels[y * labels.width + x] % PALETTE.len()]);
                    }
                }
                let path = out.join(format!("span{i}_kmeans.png"));
                vis.save_png(&path)?;
                let phrase: String = answer.chars().skip(s.chars.0).take(s.chars.1 - s.chars.0).collect();
                println!("{} `{phrase}` -> {}", i, path.display());
            }
            if spans.is_empty() {
                println!("no keywords selected");
            }
            Ok(())
        }
        Cmd::ConvertResToPng { input, out } => {
            let n = convert_res_file(&input, &out)?;
            println!("{n} records converted");
            Ok(())
        }
        Cmd::Synth { n, out } => {
            let samples = synth_shapes(cli.seed, n, &SynthConfig::default())?;
            datasets::save_samples(&samples, &out)?;
            println!("{} samples written to {}", samples.len(), out.display());
            Ok(())
        }
        Cmd::Selftest => {
            let lines = selftest::run_all(cli.seed)?;
            let mut ok = true;
            for l in &lines {
                println!("[{}] {}: {}", if l.passed { "pass" } else { "FAIL" }, l.name, l.detail);
                ok &= l.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(Error::Contract("selftest failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
