use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use diffaudio::checkpoint::{load_checkpoint, merge_teacher, save_checkpoint, split_teacher, Checkpoint};
use diffaudio::data::{features_of, infer_classes, load_examples, read_manifest, synthetic_examples};
use diffaudio::diagnostics::{gradient_suite, SuiteOptions, GRADCHECK_TOLERANCE};
use diffaudio::frontend::{compute_fbank, load_wav, write_fbank};
use diffaudio::model::{attention_maps, featurize, init_model, Features};
use diffaudio::synth::synth_clip;
use diffaudio::train::{evaluate, Example, Finetuner, Pretrainer, Task};
use diffaudio::{Error, ParamStore, Preset, Result, RunConfig};

#[derive(Parser)]
#[command(name = "diffaudio", version, about = "Masked teacher-student audio learner with differential attention")]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Built-in hyper-parameter set.
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// JSON run configuration (replaces the preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long = "mask-ratio", global = true, allow_negative_numbers = true)]
    mask_ratio: Option<f64>,
    #[arg(long, global = true)]
    clones: Option<usize>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct DataOpts {
    /// Manifest of WAV paths, optionally followed by comma-separated labels.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    manifest: Option<PathBuf>,
    /// Use the built-in synthetic clip generator.
    #[arg(long)]
    synthetic: bool,
    /// Seed for the synthetic generator (defaults to the run seed).
    #[arg(long)]
    data_seed: Option<u64>,
    /// Number of synthetic clips.
    #[arg(long)]
    clips: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining.
    Pretrain {
        #[command(flatten)]
        data: DataOpts,
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        /// JSONL metrics log (defaults to `<out>/metrics.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Supervised fine-tuning from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataOpts,
        #[arg(long)]
        steps: Option<usize>,
        /// Number of classes (defaults to one more than the largest label).
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        multi_label: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Scores a fine-tuned checkpoint and prints metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataOpts,
        #[arg(long)]
        multi_label: bool,
    },
    /// Writes the fbank of a WAV file in FBNK format.
    Featurize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference checks on a freshly initialised model.
    Gradcheck {
        /// Check every coordinate instead of a sample.
        #[arg(long)]
        full: bool,
        /// Coordinates sampled per tensor.
        #[arg(long, default_value_t = 48)]
        coords: usize,
    },
    /// Dumps attention maps of every head and layer.
    InspectAttn {
        /// Checkpoint to inspect (defaults to a fresh model).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "synthetic_class", required_unless_present = "synthetic_class")]
        input: Option<PathBuf>,
        /// Synthesise a clip of this class instead of reading a WAV.
        #[arg(long)]
        synthetic_class: Option<usize>,
        /// Output directory for `attention.json` and `attention.bin`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

impl GlobalOpts {
    fn base_config(&self) -> Result<RunConfig> {
        match (&self.config, self.preset) {
            (Some(_), Some(_)) => Err(Error::Config("--config and --preset are mutually exclusive".into())),
            (Some(p), None) => RunConfig::load(p),
            (None, p) => Ok(RunConfig::preset(p.unwrap_or(Preset::Desk))),
        }
    }

    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = self.lambda {
            cfg.encoder.lambda = l;
        }
        if let Some(a) = self.alpha {
            cfg.objective.alpha = a;
        }
        if let Some(r) = self.mask_ratio {
            cfg.masking.ratio = r;
        }
        if let Some(c) = self.clones {
            cfg.masking.clones = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> Result<RunConfig> {
        self.apply(self.base_config()?)
    }

    /// Loads a checkpoint; its config takes the place of the preset.
    fn checkpoint(&self, dir: &Path) -> Result<Checkpoint> {
        if self.config.is_some() || self.preset.is_some() {
            return Err(Error::Config("--config/--preset cannot be combined with a checkpoint".into()));
        }
        let mut ck = load_checkpoint(dir)?;
        ck.config = self.apply(ck.config)?;
        Ok(ck)
    }
}

fn dataset(d: &DataOpts, cfg: &mut RunConfig) -> Result<Vec<Example>> {
    if let Some(m) = &d.manifest {
        if d.clips.is_some() || d.data_seed.is_some() {
            return Err(Error::InvalidArgument("--clips/--data-seed apply to --synthetic only".into()));
        }
        let entries = read_manifest(m)?;
        if entries.is_empty() {
            return Err(Error::InvalidArgument(format!("{} lists no clips", m.display())));
        }
        return load_examples(&entries, cfg);
    }
    if let Some(n) = d.clips {
        cfg.synthetic.clips = n;
        cfg.validate()?;
    }
    synthetic_examples(cfg, d.data_seed.unwrap_or(cfg.seed))
}

fn log_writer(path: Option<&PathBuf>, out: &Path) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(out)?;
    let p = path.cloned().unwrap_or_else(|| out.join("metrics.jsonl"));
    Ok(BufWriter::new(File::create(p)?))
}

fn task(multi_label: bool) -> Task {
    if multi_label {
        Task::MultiLabel
    } else {
        Task::SingleLabel
    }
}

fn run(cli: Cli) -> Result<u8> {
    let g = &cli.opts;
    match cli.cmd {
        Command::Pretrain { data, steps, out, log } => {
            let mut cfg = g.config()?;
            let clips = features_of(dataset(&data, &mut cfg)?);
            let total = steps.unwrap_or_else(|| cfg.steps_for(clips.len()));
            let mut trainer = Pretrainer::new(cfg, total)?;
            let mut w = log_writer(log.as_ref(), &out)?;
            let mut io_err = None;
            trainer.run(&clips, |r| {
                if let Err(e) = writeln!(w, "{}", r.to_json_line()) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            w.flush()?;
            save_checkpoint(
                &out,
                &Checkpoint {
                    params: merge_teacher(&trainer.student, &trainer.teacher.params),
                    config: trainer.cfg.clone(),
                    step: trainer.step as u64,
                },
            )?;
            println!("{}", json!({"steps": trainer.step, "clips": clips.len(), "checkpoint": out}));
            Ok(0)
        }
        Command::Finetune {
            checkpoint,
            data,
            steps,
            classes,
            multi_label,
            out,
            log,
        } => {
            let ck = g.checkpoint(&checkpoint)?;
            let mut cfg = ck.config;
            let examples = dataset(&data, &mut cfg)?;
            let classes = match classes {
                Some(c) => c,
                None => infer_classes(&examples)?,
            };
            let total = steps.unwrap_or_else(|| cfg.steps_for(examples.len()));
            let (student, _) = split_teacher(&ck.params);
            let mut ft = Finetuner::new(cfg, &student, classes, task(multi_label), total)?;
            let mut w = log_writer(log.as_ref(), &out)?;
            let mut io_err = None;
            ft.run(&examples, |step, loss| {
                if let Err(e) = writeln!(w, "{}", json!({"step": step, "loss": loss})) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            w.flush()?;
            save_checkpoint(
                &out,
                &Checkpoint {
                    params: ft.params.clone(),
                    config: ft.cfg.clone(),
                    step: ft.step as u64,
                },
            )?;
            println!("{}", json!({"steps": ft.step, "classes": classes, "checkpoint": out}));
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            data,
            multi_label,
        } => {
            let ck = g.checkpoint(&checkpoint)?;
            let mut cfg = ck.config;
            let examples = dataset(&data, &mut cfg)?;
            let report = evaluate(&ck.params, &examples, &cfg, task(multi_label))?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(0)
        }
        Command::Featurize { input, output } => {
            let cfg = g.config()?;
            let spec = compute_fbank(&load_wav(&input)?, &cfg.frontend.fbank)?;
            let mut w = BufWriter::new(File::create(&output)?);
            write_fbank(&mut w, &spec)?;
            w.flush()?;
            println!("{}", json!({"frames": spec.num_frames(), "mels": spec.num_mels()}));
            Ok(0)
        }
        Command::Gradcheck { full, coords } => {
            let cfg = g.config()?;
            if !full && coords == 0 {
                return Err(Error::InvalidArgument("--coords must be positive".into()));
            }
            let opts = SuiteOptions {
                max_coords_per_input: (!full).then_some(coords),
                seed: cfg.seed,
                ..SuiteOptions::default()
            };
            let outcomes = gradient_suite(&cfg, &opts)?;
            let mut worst: f64 = 0.0;
            for o in &outcomes {
                println!(
                    "{:<22} max_rel_err {:.3e} over {} coords {}",
                    o.name,
                    o.max_relative_error,
                    o.coords_checked,
                    if o.passed() { "ok" } else { "FAIL" }
                );
                worst = worst.max(o.max_relative_error);
            }
            let passed = outcomes.iter().all(|o| o.passed());
            println!(
                "{}",
                json!({"max_relative_error": worst, "tolerance": GRADCHECK_TOLERANCE, "passed": passed})
            );
            Ok(if passed { 0 } else { 1 })
        }
        Command::InspectAttn {
            checkpoint,
            input,
            synthetic_class,
            out,
        } => {
            let (params, cfg) = match &checkpoint {
                Some(dir) => {
                    let ck = g.checkpoint(dir)?;
                    (split_teacher(&ck.params).0, ck.config)
                }
                None => {
                    let cfg = g.config()?;
                    (init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?, cfg)
                }
            };
            let wave = match (input, synthetic_class) {
                (Some(p), _) => load_wav(p)?,
                (None, Some(k)) => synth_clip(&[k], &cfg.synthetic, cfg.seed)?.wave,
                (None, None) => unreachable!("clap requires one source"),
            };
            let f = featurize(&wave, &cfg.frontend)?;
            dump_attention(&params, &f, &cfg, &out)?;
            Ok(0)
        }
    }
}

fn dump_attention(params: &ParamStore, f: &Features, cfg: &RunConfig, out: &Path) -> Result<()> {
    let maps = attention_maps(params, f, cfg)?;
    std::fs::create_dir_all(out)?;
    let mut blob = BufWriter::new(File::create(out.join("attention.bin"))?);
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (l, heads) in maps.iter().enumerate() {
        for (h, tr) in heads.iter().enumerate() {
            for (kind, t) in [("a1", &tr.a1), ("a2", &tr.a2), ("a", &tr.a)] {
                for v in t.to_f32_lossy() {
                    blob.write_all(&v.to_le_bytes())?;
                }
                let len = t.len() as u64 * 4;
                entries.push(json!({
                    "layer": l, "head": h, "kind": kind, "shape": t.shape(),
                    "dtype": "f32", "byte_offset": offset, "byte_len": len,
                }));
                offset += len;
            }
        }
    }
    blob.flush()?;
    let n = f.n_tokens() + 1;
    let manifest = json!({
        "tokens": n,
        "cls_index": cfg.encoder.cls_position.index(f.n_tokens()),
        "layers": maps.len(),
        "heads": cfg.encoder.heads,
        "lambda": cfg.encoder.lambda,
        "maps": entries,
    });
    std::fs::write(out.join("attention.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("{}", json!({"maps": manifest["maps"].as_array().map_or(0, |m| m.len()), "out": out}));
    Ok(())
}
