use std::collections::BTreeMap;
use std::path::Path;

use difftune::corpus::{gen_corpus, Scorer, ScorerArch};
use difftune::denoiser::{ArchConfig, Denoiser};
use difftune::harness::{
    compute_metrics, edit_candidates, evaluate_cells, run_edit, run_sweep, sweep_csv, EditJob, EditSpec, RunDir, SweepGrid,
};
use difftune::imageio;
use difftune::sampler::{sample, SamplerConfig};
use difftune::text_cond::{EmbeddingTable, Vocabulary};
use difftune::{rng_stream, Checkpoint, Image, Provenance};

fn tiny_checkpoint(seed: u64) -> Checkpoint {
    let arch = ArchConfig { widths: [2, 4], blocks: 1, time_dim: 4, embed_dim: 8, ..Default::default() };
    let vocab = Vocabulary::default();
    Checkpoint {
        denoiser: Denoiser::new(arch, seed).unwrap(),
        embeddings: EmbeddingTable::random(vocab.size(), arch.cond_dim, seed),
        vocab,
        step: 0,
        provenance: Provenance::Pretrain,
    }
}

fn tiny_scorer() -> Scorer {
    Scorer::new(ScorerArch { widths: [2, 2, 2], hidden: 4 }, 5)
}

fn quick_sampler() -> SamplerConfig {
    SamplerConfig { steps: 4, ..Default::default() }
}

const PROMPT: &str = "a solid red circle on a blue background";

/// Run directory with a pretrained checkpoint and fine-tuned stand-ins at
/// steps 16 and 32 for `base`.
fn populated_run(dir: &Path, base: &Image) -> RunDir {
    let run = RunDir::new(dir);
    tiny_checkpoint(0).save(run.pretrained(5000)).unwrap();
    for (i, step) in [16usize, 32].into_iter().enumerate() {
        let mut ck = tiny_checkpoint(10 + i as u64);
        ck.step = step as u64;
        ck.save(run.finetuned(base, step)).unwrap();
    }
    run
}

#[test]
fn identical_images_give_zero_mse_and_unit_norm() {
    let base = &gen_corpus(3, 1)[0].image;
    let m = compute_metrics(base, base, PROMPT, &tiny_scorer()).unwrap();
    assert_eq!((m.mse, m.norm), (0.0, 1.0));
}

#[test]
fn negated_binary_image_has_mse_four() {
    let mut rng = rng_stream(1, 0);
    let mut x = Image::randn(32, 32, &mut rng);
    x.as_mut_slice().iter_mut().for_each(|v| *v = if *v < 0.0 { -1.0 } else { 1.0 });
    let neg = x.map(|v| -v);
    assert_eq!(compute_metrics(&x, &neg, PROMPT, &tiny_scorer()).unwrap().mse, 4.0);
}

#[test]
fn mse_matches_brute_force_oracle() {
    let mut rng = rng_stream(2, 0);
    let (a, b) = (Image::randn(32, 32, &mut rng), Image::randn(32, 32, &mut rng));
    let mut sum = 0.0;
    for y in 0..32 {
        for x in 0..32 {
            for c in 0..3 {
                sum += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
            }
        }
    }
    let got = compute_metrics(&a, &b, PROMPT, &tiny_scorer()).unwrap().mse;
    assert!((got - sum / 3072.0).abs() < 1e-12);
}

#[test]
fn best_of_n_selects_exactly_one_maximal_record() {
    let base = &gen_corpus(3, 1)[0].image;
    let sampler = quick_sampler();
    let spec = EditSpec { base, prompt: PROMPT, rare_seed: 0, sampler: &sampler, interp: None, mask: None, seeds: 8 };
    let c = edit_candidates(&tiny_checkpoint(0), &spec, &tiny_scorer()).unwrap();
    let records = c.records("job", "cfg");
    assert_eq!(records.len(), 8);
    assert_eq!(records.iter().filter(|r| r.selected).count(), 1);
    let best = records.iter().find(|r| r.selected).unwrap();
    assert!(records.iter().all(|r| r.align_score <= best.align_score));
    assert_eq!(records.iter().map(|r| r.seed).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
}

#[test]
fn edit_job_is_deterministic_and_persists_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let base = gen_corpus(3, 1)[0].image.clone();
    let base_path = dir.path().join("base.png");
    imageio::save_png(&base, &base_path).unwrap();
    let run = populated_run(&dir.path().join("runs"), &base);
    let job = EditJob {
        id: "j".into(),
        base: base_path,
        prompt: PROMPT.into(),
        ft: 16,
        sampler: quick_sampler(),
        interp: Some(Default::default()),
        mask: None,
        seeds: 3,
    };
    let scorer = tiny_scorer();
    let first = run_edit(&job, &run, 0, &scorer).unwrap();
    let csv1 = std::fs::read(run.edit_dir("j").join("metrics.csv")).unwrap();
    let second = run_edit(&job, &run, 0, &scorer).unwrap();
    let csv2 = std::fs::read(run.edit_dir("j").join("metrics.csv")).unwrap();
    assert_eq!(first.selected, second.selected);
    assert_eq!(csv1, csv2);
    for f in ["seed-0.png", "seed-2.png", "selected.png", "summary.csv"] {
        assert!(run.edit_dir("j").join(f).exists(), "{f}");
    }
    let summaries = difftune::harness::load_summaries(&run).unwrap();
    assert_eq!(summaries, vec![first.summary]);
}

#[test]
fn missing_checkpoint_names_the_fine_tune_command() {
    let dir = tempfile::tempdir().unwrap();
    let base = gen_corpus(3, 1)[0].image.clone();
    let base_path = dir.path().join("base.png");
    imageio::save_png(&base, &base_path).unwrap();
    let run = populated_run(&dir.path().join("runs"), &base);
    let err = run.load_checkpoints(&base, &base_path, &[0, 16, 64, 128]).unwrap_err().to_string();
    assert!(err.contains("ckpt_64.bin") && err.contains("ckpt_128.bin"), "{err}");
    assert!(err.contains("difftune finetune --image"), "{err}");
    assert!(!err.contains("ckpt_16.bin"), "{err}");
}

#[test]
fn sweep_writes_one_row_per_cell_and_the_composite() {
    let dir = tempfile::tempdir().unwrap();
    let base = gen_corpus(3, 1)[0].image.clone();
    let base_path = dir.path().join("base.png");
    imageio::save_png(&base, &base_path).unwrap();
    let run = populated_run(&dir.path().join("runs"), &base);
    let grid = SweepGrid { ft_steps: vec![0, 16, 32], t0s: vec![0.8, 1.0] };
    let sampler = quick_sampler();
    let spec = EditSpec { base: &base, prompt: PROMPT, rare_seed: 0, sampler: &sampler, interp: None, mask: None, seeds: 2 };
    let results = run_sweep(&run, "s", &base_path, &grid.cells(), &spec, &tiny_scorer()).unwrap();
    assert_eq!(results.len(), 6);
    let csv = std::fs::read_to_string(run.sweep_dir("s").join("cells.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let composite = imageio::load_png(&run.sweep_dir("s").join("grid.png")).unwrap();
    assert_eq!(composite.shape(), (2 * 33 + 1, 3 * 33 + 1));
    // The ft = 0 column is plain pretrained sampling.
    let pre = tiny_checkpoint(0);
    let cond = difftune::harness::edit_condition(&pre, 0, PROMPT).unwrap();
    let cell = results.iter().find(|r| r.ft == 0 && r.t0 == 0.8).unwrap();
    let direct = sample(&pre, &cond, &SamplerConfig { t0: 0.8, seed: cell.candidates.seeds[0], ..sampler.clone() }, Some(&base), None).unwrap();
    assert_eq!(cell.candidates.images[0], direct);
}

#[test]
fn unit_t0_cells_ignore_the_base_image() {
    let mut ckpts = BTreeMap::new();
    ckpts.insert(16, tiny_checkpoint(4));
    let sampler = quick_sampler();
    let items = gen_corpus(8, 2);
    let run_on = |base: &Image| {
        let spec = EditSpec { base, prompt: PROMPT, rare_seed: 0, sampler: &sampler, interp: None, mask: None, seeds: 2 };
        evaluate_cells(&ckpts, &[(16, 1.0)], &spec, &tiny_scorer()).unwrap()
    };
    let (a, b) = (run_on(&items[0].image), run_on(&items[1].image));
    assert_eq!(a[0].candidates.images, b[0].candidates.images);
    assert_eq!(sweep_csv(&a).lines().count(), 2);
}

#[test]
fn evaluate_cells_lists_every_missing_step() {
    let mut ckpts = BTreeMap::new();
    ckpts.insert(0, tiny_checkpoint(0));
    let base = &gen_corpus(3, 1)[0].image;
    let sampler = quick_sampler();
    let spec = EditSpec { base, prompt: PROMPT, rare_seed: 0, sampler: &sampler, interp: None, mask: None, seeds: 1 };
    let err = evaluate_cells(&ckpts, &SweepGrid::default().cells(), &spec, &tiny_scorer()).unwrap_err().to_string();
    assert!(err.contains("16, 32, 64, 128"), "{err}");
}
