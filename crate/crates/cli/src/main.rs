use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use difftune::corpus::{gen_corpus, load_corpus, save_corpus, Scorer};
use difftune::harness::suite::{edit_succeeds, load_suite, outside_mse};
use difftune::harness::{self, EditJob, EditSpec, KvConfig, RunDir};
use difftune::imageio;
use difftune::trainer::{finetune, pretrain, FinetuneJob};
use difftune::Checkpoint;

#[derive(Parser)]
#[command(name = "difftune", about = "Single-image fine-tuning and guided editing with a tiny diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set t0=0.8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory root (default: $DIFFTUNE_RUN_DIR or ./runs).
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(KvConfig, RunDir)> {
        let mut cfg = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        let run = self.run_dir.clone().map_or_else(RunDir::from_env, RunDir::new);
        Ok((cfg, run))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the captioned corpus into <run>/corpus.
    GenCorpus(Common),
    /// Pretrain the denoiser on the corpus.
    Pretrain(Common),
    /// Train the alignment scorer on the corpus.
    TrainScorer(Common),
    /// Fine-tune the pretrained model on one base image.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
    },
    /// Edit one image, or every job of a suite directory.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "suite")]
        image: Option<PathBuf>,
        #[arg(long, required_unless_present = "suite")]
        prompt: Option<String>,
        /// Editable-region mask image (white = editable).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "edit")]
        id: String,
        /// Directory holding a jobs.tsv suite.
        #[arg(long, conflicts_with_all = ["image", "prompt", "mask"])]
        suite: Option<PathBuf>,
        /// Fine-tune base images whose checkpoints are missing.
        #[arg(long)]
        finetune_missing: bool,
    },
    /// Evaluate a fine-tune × t0 grid, or the `configs` list, for one image.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "sweep")]
        name: String,
    },
    /// Bucket edit results by the base image's alignment score.
    Bucket {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
}

fn load_or_generate_corpus(cfg: &KvConfig, run: &RunDir) -> Result<Vec<(difftune::Image, String)>> {
    let dir = run.corpus_dir();
    if dir.join(difftune::corpus::MANIFEST).exists() {
        return Ok(load_corpus(&dir)?);
    }
    let (seed, size) = cfg.corpus()?;
    Ok(gen_corpus(seed, size).into_iter().map(|c| (c.image, c.caption)).collect())
}

fn load_scorer(run: &RunDir) -> Result<Scorer> {
    let path = run.scorer();
    Scorer::load(&path).with_context(|| format!("loading the scorer; run `difftune train-scorer` first ({})", path.display()))
}

fn load_pretrained(run: &RunDir) -> Result<Checkpoint> {
    let path = run.latest_pretrained().context("no pretrained checkpoint; run `difftune pretrain` first")?;
    Ok(Checkpoint::load(path)?)
}

fn run_finetune(cfg: &KvConfig, run: &RunDir, image: &Path) -> Result<()> {
    let base_img = imageio::load_png(image)?;
    let base = load_pretrained(run)?;
    let rare = base.vocab.rare_tokens(cfg.rare_seed()?)?;
    let job = FinetuneJob {
        base: &base,
        image: &base_img,
        rare,
        config: cfg.finetune()?,
    };
    let out = finetune(&job)?;
    for ck in &out.checkpoints {
        let path = run.finetuned(&base_img, ck.step as usize);
        ck.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenCorpus(common) => {
            let (cfg, run) = common.load()?;
            let (seed, size) = cfg.corpus()?;
            let items = gen_corpus(seed, size);
            save_corpus(&items, &run.corpus_dir())?;
            println!("wrote {size} items to {}", run.corpus_dir().display());
        }
        Command::Pretrain(common) => {
            let (cfg, run) = common.load()?;
            let corpus = load_or_generate_corpus(&cfg, &run)?;
            let images: Vec<_> = corpus.iter().map(|c| &c.0).collect();
            let captions: Vec<_> = corpus.iter().map(|c| c.1.as_str()).collect();
            let train = cfg.pretrain()?;
            let out = pretrain(&images, &captions, cfg.arch()?, &train, |step, loss| {
                if step % 100 == 0 {
                    println!("step {step} loss {loss:.5}");
                }
            })?;
            let path = run.pretrained(train.steps);
            out.checkpoint.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::TrainScorer(common) => {
            let (cfg, run) = common.load()?;
            let corpus = load_or_generate_corpus(&cfg, &run)?;
            let images: Vec<_> = corpus.iter().map(|c| &c.0).collect();
            let captions: Vec<_> = corpus.iter().map(|c| c.1.as_str()).collect();
            let (scorer, acc) = Scorer::train(&images, &captions, &cfg.scorer()?)?;
            for (name, a) in difftune::corpus::SLOT_NAMES.iter().zip(acc.0) {
                println!("{name}: {a:.3}");
            }
            scorer.save(run.scorer())?;
            println!("wrote {}", run.scorer().display());
        }
        Command::Finetune { common, image } => {
            let (cfg, run) = common.load()?;
            run_finetune(&cfg, &run, &image)?;
        }
        Command::Edit {
            common,
            image,
            prompt,
            mask,
            id,
            suite,
            finetune_missing,
        } => {
            let (cfg, run) = common.load()?;
            let scorer = load_scorer(&run)?;
            let make_job = |id: String, base: PathBuf, prompt: String, mask: Option<PathBuf>| -> Result<EditJob> {
                Ok(EditJob {
                    id,
                    base,
                    prompt,
                    ft: cfg.ft()?,
                    sampler: cfg.sampler()?,
                    interp: cfg.interp()?,
                    mask,
                    seeds: cfg.seeds()?,
                })
            };
            let ensure = |job: &EditJob| -> Result<()> {
                let base = imageio::load_png(&job.base)?;
                if finetune_missing && job.ft > 0 && !run.finetuned(&base, job.ft).exists() {
                    run_finetune(&cfg, &run, &job.base)?;
                }
                Ok(())
            };
            if let Some(dir) = suite {
                let jobs = load_suite(&dir)?;
                let mut ok = 0;
                for sj in &jobs {
                    let job = make_job(sj.id.clone(), sj.base.clone(), sj.prompt.clone(), None)?;
                    ensure(&job)?;
                    let out = harness::run_edit(&job, &run, cfg.rare_seed()?, &scorer)?;
                    let base = sj.load_base()?;
                    let region = sj.load_region()?;
                    let success = edit_succeeds(&scorer, &out.selected, &base, &sj.prompt, &region, sj.threshold)?;
                    ok += success as usize;
                    println!(
                        "{}: outside mse {:.4} (threshold {:.4}) {}",
                        sj.id,
                        outside_mse(&out.selected, &base, &region)?,
                        sj.threshold,
                        if success { "success" } else { "fail" }
                    );
                }
                println!("{ok}/{} edits succeeded", jobs.len());
            } else {
                let job = make_job(id, image.expect("required"), prompt.expect("required"), mask)?;
                ensure(&job)?;
                let out = harness::run_edit(&job, &run, cfg.rare_seed()?, &scorer)?;
                for r in &out.records {
                    println!("{}", r.csv_row());
                }
                println!("wrote {}", run.edit_dir(&job.id).display());
            }
        }
        Command::Sweep { common, image, prompt, name } => {
            let (cfg, run) = common.load()?;
            let scorer = load_scorer(&run)?;
            let cells = match cfg.configs()? {
                Some(list) => list,
                None => cfg.sweep_grid()?.cells(),
            };
            let sampler = cfg.sampler()?;
            let interp = cfg.interp()?;
            let placeholder = difftune::Image::zeros(1, 1);
            let spec = EditSpec {
                base: &placeholder,
                prompt: &prompt,
                rare_seed: cfg.rare_seed()?,
                sampler: &sampler,
                interp: interp.as_ref(),
                mask: None,
                seeds: cfg.seeds()?,
            };
            let results = harness::run_sweep(&run, &name, &image, &cells, &spec, &scorer)?;
            print!("{}", harness::sweep_csv(&results));
            println!("wrote {}", run.sweep_dir(&name).display());
        }
        Command::Bucket { common, k } => {
            let (_, run) = common.load()?;
            let jobs = harness::load_summaries(&run)?;
            if jobs.is_empty() {
                bail!("no edit summaries under {}", run.root().join("edits").display());
            }
            let csv = harness::buckets_csv(&harness::bucket_analysis(&jobs, k)?);
            std::fs::write(run.root().join("buckets.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}
