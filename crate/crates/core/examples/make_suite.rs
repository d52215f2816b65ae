//! Write the edit suite with calibrated outside-region thresholds.
//!
//! Usage: `make_suite <pretrained.bin> <scorer.bin> <out-dir>`
//!
//! Each job is fine-tuned for 64 steps on its base. A no-op edit (the base's
//! own caption) is sampled at t0 = 0.9 with the default sampler over 8 seeds.
//! The threshold is twice the outside-region MSE of the selected best-of-8
//! no-op sample, floored at 0.01. The real edit is then run with the same
//! settings and its result printed.

use std::path::PathBuf;

use difftune::corpus::{render, Scorer};
use difftune::harness::suite::{edit_succeeds, edit_suite, outside_mse, write_suite};
use difftune::harness::{edit_candidates, EditSpec};
use difftune::sampler::SamplerConfig;
use difftune::trainer::{finetune, FinetuneJob, TrainConfig};
use difftune::Checkpoint;

const FT: usize = 64;
const SEEDS: usize = 8;
const MARGIN: f64 = 2.0;
const FLOOR: f64 = 0.01;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let [_, pre, scorer, out] = &args[..] else {
        eprintln!("usage: make_suite <pretrained.bin> <scorer.bin> <out-dir>");
        std::process::exit(2);
    };
    let pre = Checkpoint::load(pre).unwrap();
    let scorer = Scorer::load(scorer).unwrap();
    let out = PathBuf::from(out);
    std::fs::create_dir_all(&out).unwrap();
    let sampler = SamplerConfig::default();
    let jobs = edit_suite();
    let mut thresholds = Vec::new();
    let mut ok = 0;
    for job in &jobs {
        let base = render(&job.base_scene).unwrap();
        let config = TrainConfig { steps: FT, emission_steps: vec![FT], ..TrainConfig::finetune() };
        let rare = pre.vocab.rare_tokens(0).unwrap();
        let ckpt = finetune(&FinetuneJob { base: &pre, image: &base, rare, config }).unwrap().checkpoints.remove(0);
        let caption = job.base_scene.caption();
        let run = |prompt: &str| {
            let spec = EditSpec { base: &base, prompt, rare_seed: 0, sampler: &sampler, interp: None, mask: None, seeds: SEEDS };
            edit_candidates(&ckpt, &spec, &scorer).unwrap()
        };
        let noop = run(&caption);
        let th = (MARGIN * outside_mse(noop.winner(), &base, &job.region).unwrap()).max(FLOOR);
        thresholds.push(th);
        let edit = run(&job.prompt);
        let success = edit_succeeds(&scorer, edit.winner(), &base, &job.prompt, &job.region, th).unwrap();
        ok += success as usize;
        println!(
            "{}: threshold {th:.4}, outside mse {:.4}, slots {:?}, success {success}",
            job.id,
            outside_mse(edit.winner(), &base, &job.region).unwrap(),
            scorer.predict(edit.winner()).unwrap().to_string()
        );
    }
    write_suite(&out, &jobs, &thresholds).unwrap();
    println!("{ok}/{} succeed", jobs.len());
}
