//! Edit jobs, best-of-N selection, the fine-tune × `t₀` sweep, metrics and
//! score-bucketed summaries.
//!
//! In-memory functions ([`edit_candidates`], [`evaluate_cells`],
//! [`bucket_analysis`]) do the work; [`RunDir`] and the `run_*` functions add
//! file layout and persistence on top.

pub mod config;
pub mod suite;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::corpus::Scorer;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::imageio;
use crate::postprocess::{interpolate, InterpConfig};
use crate::sampler::{sample, Mask, SamplerConfig};
use crate::text_cond::{concat_condition, TokenSeq};
use crate::util::median;

pub use config::KvConfig;

/// Environment variable naming the run-directory root.
pub const RUN_DIR_ENV: &str = "DIFFTUNE_RUN_DIR";
pub const DEFAULT_RUN_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq)]
pub struct EditJob {
    pub id: String,
    pub base: PathBuf,
    pub prompt: String,
    /// Fine-tuning step of the checkpoint to edit with; 0 = pretrained.
    pub ft: usize,
    pub sampler: SamplerConfig,
    pub interp: Option<InterpConfig>,
    pub mask: Option<PathBuf>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub job_id: String,
    pub config_id: String,
    pub seed: u64,
    pub mse_to_base: f64,
    pub align_score: f64,
    pub norm_score: f64,
    pub selected: bool,
}

pub const CSV_HEADER: &str = "job,config,seed,mse_to_base,align_score,norm_score,selected";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.job_id, self.config_id, self.seed, self.mse_to_base, self.align_score, self.norm_score, self.selected as u8
        )
    }
}

pub fn records_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// MSE, alignment and normalized alignment of one output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub align: f64,
    pub norm: f64,
}

/// `norm = align(out) / align(base)`, both scored against `prompt`.
pub fn compute_metrics(x_b: &Image, x_out: &Image, prompt: &str, scorer: &Scorer) -> Result<Metrics> {
    let mse = x_out.mse(x_b)?;
    let align = scorer.score(x_out, prompt)?;
    let base = scorer.score(x_b, prompt)?;
    Ok(Metrics {
        mse,
        align,
        norm: align / base,
    })
}

/// Index of the highest score; ties go to the earliest index.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Condition `[rare tokens] prompt` for a checkpoint's vocabulary.
pub fn edit_condition(ckpt: &Checkpoint, rare_seed: u64, prompt: &str) -> Result<TokenSeq> {
    let rare = ckpt.vocab.rare_tokens(rare_seed)?;
    concat_condition(&rare, &ckpt.vocab.tokenize(prompt)?)
}

/// All candidates of one edit with their metrics and the selected index.
#[derive(Debug, Clone)]
pub struct EditCandidates {
    pub images: Vec<Image>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<Metrics>,
    pub selected: usize,
}

impl EditCandidates {
    pub fn winner(&self) -> &Image {
        &self.images[self.selected]
    }

    pub fn records(&self, job_id: &str, config_id: &str) -> Vec<MetricsRecord> {
        self.metrics
            .iter()
            .enumerate()
            .map(|(i, m)| MetricsRecord {
                job_id: job_id.to_string(),
                config_id: config_id.to_string(),
                seed: self.seeds[i],
                mse_to_base: m.mse,
                align_score: m.align,
                norm_score: m.norm,
                selected: i == self.selected,
            })
            .collect()
    }
}

/// Everything an edit needs besides the checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct EditSpec<'a> {
    pub base: &'a Image,
    pub prompt: &'a str,
    pub rare_seed: u64,
    pub sampler: &'a SamplerConfig,
    pub interp: Option<&'a InterpConfig>,
    pub mask: Option<&'a Mask>,
    pub seeds: usize,
}

/// Sample seeds `sampler.seed + i` for `i < seeds`, post-process, score and
/// select the best-aligned candidate.
pub fn edit_candidates(ckpt: &Checkpoint, spec: &EditSpec<'_>, scorer: &Scorer) -> Result<EditCandidates> {
    if spec.seeds == 0 {
        return Err(Error::Argument("at least one seed is required".into()));
    }
    let cond = edit_condition(ckpt, spec.rare_seed, spec.prompt)?;
    let mut images = Vec::with_capacity(spec.seeds);
    let mut seeds = Vec::with_capacity(spec.seeds);
    let mut metrics = Vec::with_capacity(spec.seeds);
    for i in 0..spec.seeds as u64 {
        let seed = spec.sampler.seed + i;
        let cfg = SamplerConfig { seed, ..spec.sampler.clone() };
        let mut img = sample(ckpt, &cond, &cfg, Some(spec.base), spec.mask)?;
        if let Some(interp_cfg) = spec.interp {
            img = interpolate(spec.base, &img, interp_cfg)?;
        }
        metrics.push(compute_metrics(spec.base, &img, spec.prompt, scorer)?);
        images.push(img);
        seeds.push(seed);
    }
    let scores: Vec<f64> = metrics.iter().map(|m| m.align).collect();
    let selected = select_best(&scores).expect("non-empty");
    Ok(EditCandidates {
        images,
        seeds,
        metrics,
        selected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub ft_steps: Vec<usize>,
    pub t0s: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            ft_steps: vec![0, 16, 32, 64, 128],
            t0s: vec![0.8, 0.85, 0.9, 0.95, 0.98, 1.0],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.ft_steps.is_empty() || self.t0s.is_empty() {
            return Err(Error::Config("sweep grid axes must be non-empty".into()));
        }
        if !self.ft_steps.windows(2).all(|w| w[0] < w[1]) || !self.t0s.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("sweep grid axes must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Cells in row-major order: one row per `t₀`, one column per ft.
    pub fn cells(&self) -> Vec<(usize, f64)> {
        self.t0s.iter().flat_map(|&t0| self.ft_steps.iter().map(move |&ft| (ft, t0))).collect()
    }
}

/// One evaluated `(ft, t₀)` cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub ft: usize,
    pub t0: f64,
    pub candidates: EditCandidates,
}

impl CellResult {
    pub fn config_id(&self) -> String {
        format!("ft{}_t{}", self.ft, self.t0)
    }

    pub fn median_mse(&self) -> f64 {
        median(&self.candidates.metrics.iter().map(|m| m.mse).collect::<Vec<_>>())
    }

    pub fn median_align(&self) -> f64 {
        median(&self.candidates.metrics.iter().map(|m| m.align).collect::<Vec<_>>())
    }
}

/// Evaluate each `(ft, t₀)` cell with the checkpoint `ckpts[ft]`. All missing
/// checkpoints are reported together.
pub fn evaluate_cells(
    ckpts: &BTreeMap<usize, Checkpoint>,
    cells: &[(usize, f64)],
    spec: &EditSpec<'_>,
    scorer: &Scorer,
) -> Result<Vec<CellResult>> {
    let mut missing: Vec<usize> = cells.iter().map(|c| c.0).filter(|ft| !ckpts.contains_key(ft)).collect();
    missing.dedup();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|ft| ft.to_string()).collect();
        return Err(Error::Config(format!("missing checkpoints for fine-tune steps {}", list.join(", "))));
    }
    cells
        .iter()
        .map(|&(ft, t0)| {
            let sampler = SamplerConfig { t0, ..spec.sampler.clone() };
            let candidates = edit_candidates(&ckpts[&ft], &EditSpec { sampler: &sampler, ..*spec }, scorer)?;
            Ok(CellResult { ft, t0, candidates })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "ft,t0,median_mse,median_align,selected_seed,selected_mse,selected_align";

pub fn sweep_csv(results: &[CellResult]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in results {
        let c = &r.candidates;
        let m = c.metrics[c.selected];
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.ft,
            r.t0,
            r.median_mse(),
            r.median_align(),
            c.seeds[c.selected],
            m.mse,
            m.align
        );
    }
    out
}

/// Selected images laid out with fine-tune steps along x and `t₀` along y.
pub fn sweep_composite(results: &[CellResult]) -> Image {
    let mut fts: Vec<usize> = results.iter().map(|r| r.ft).collect();
    fts.sort_unstable();
    fts.dedup();
    let mut t0s: Vec<f64> = results.iter().map(|r| r.t0).collect();
    t0s.sort_by(f64::total_cmp);
    t0s.dedup();
    let (h, w) = results.first().map_or((0, 0), |r| r.candidates.winner().shape());
    let rows: Vec<Vec<Option<&Image>>> = t0s
        .iter()
        .map(|&t0| {
            fts.iter()
                .map(|&ft| results.iter().find(|r| r.ft == ft && r.t0 == t0).map(|r| r.candidates.winner()))
                .collect()
        })
        .collect();
    imageio::grid(&rows, h, w)
}

/// Per-job summary feeding [`bucket_analysis`].
#[derive(Debug, Clone, PartialEq)]
pub struct JobSummary {
    pub job_id: String,
    pub base_align: f64,
    pub winner_seed: u64,
    pub winner_mse: f64,
    pub winner_align: f64,
    pub winner_norm: f64,
}

pub const SUMMARY_CSV_HEADER: &str = "job,base_align,winner_seed,winner_mse,winner_align,winner_norm";

impl JobSummary {
    pub fn from_candidates(job_id: &str, base_align: f64, c: &EditCandidates) -> Self {
        let m = c.metrics[c.selected];
        JobSummary {
            job_id: job_id.to_string(),
            base_align,
            winner_seed: c.seeds[c.selected],
            winner_mse: m.mse,
            winner_align: m.align,
            winner_norm: m.norm,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.job_id, self.base_align, self.winner_seed, self.winner_mse, self.winner_align, self.winner_norm
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Argument(format!("malformed summary row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(JobSummary {
            job_id: f[0].to_string(),
            base_align: num(f[1])?,
            winner_seed: f[2].parse().map_err(|_| bad())?,
            winner_mse: num(f[3])?,
            winner_align: num(f[4])?,
            winner_norm: num(f[5])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketSummary {
    pub size: usize,
    pub base_align_min: f64,
    pub base_align_max: f64,
    pub mean_winner_mse: f64,
    pub mean_winner_align: f64,
    pub mean_norm: f64,
}

/// Sizes of `k` buckets over `n` items: `n / k` each, with the remainder
/// given one apiece to the buckets nearest the middle (lower index first on
/// ties).
pub fn bucket_sizes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Argument(format!("cannot split {n} jobs into {k} buckets")));
    }
    let mut sizes = vec![n / k; k];
    let mut order: Vec<usize> = (0..k).collect();
    // Distance from the centre, in half-steps to stay in integers.
    order.sort_by_key(|&i| ((2 * i) as i64 - (k as i64 - 1)).abs());
    for &i in order.iter().take(n % k) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Sort jobs by base alignment (ascending, ties by id) and summarize `k`
/// consecutive buckets.
pub fn bucket_analysis(jobs: &[JobSummary], k: usize) -> Result<Vec<BucketSummary>> {
    let sizes = bucket_sizes(jobs.len(), k)?;
    let mut sorted: Vec<&JobSummary> = jobs.iter().collect();
    sorted.sort_by(|a, b| a.base_align.total_cmp(&b.base_align).then_with(|| a.job_id.cmp(&b.job_id)));
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for size in sizes {
        let b = &sorted[start..start + size];
        let mean = |f: fn(&JobSummary) -> f64| b.iter().map(|j| f(j)).sum::<f64>() / size as f64;
        out.push(BucketSummary {
            size,
            base_align_min: b[0].base_align,
            base_align_max: b[size - 1].base_align,
            mean_winner_mse: mean(|j| j.winner_mse),
            mean_winner_align: mean(|j| j.winner_align),
            mean_norm: mean(|j| j.winner_norm),
        });
        start += size;
    }
    Ok(out)
}

pub const BUCKET_CSV_HEADER: &str = "bucket,size,base_align_min,base_align_max,mean_winner_mse,mean_winner_align,mean_norm";

pub fn buckets_csv(buckets: &[BucketSummary]) -> String {
    let mut out = String::from(BUCKET_CSV_HEADER);
    out.push('\n');
    for (i, b) in buckets.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{}",
            b.size, b.base_align_min, b.base_align_max, b.mean_winner_mse, b.mean_winner_align, b.mean_norm
        );
    }
    out
}

/// File layout under the run-directory root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    /// Root from [`RUN_DIR_ENV`], else [`DEFAULT_RUN_DIR`].
    pub fn from_env() -> Self {
        RunDir::new(std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUN_DIR), PathBuf::from))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn pretrained(&self, step: usize) -> PathBuf {
        self.pretrain_dir().join(format!("ckpt_{step}.bin"))
    }

    /// The pretrained checkpoint with the highest step, if any.
    pub fn latest_pretrained(&self) -> Option<PathBuf> {
        let entries = std::fs::read_dir(self.pretrain_dir()).ok()?;
        entries
            .filter_map(|e| {
                let path = e.ok()?.path();
                let step: u64 = path.file_stem()?.to_str()?.strip_prefix("ckpt_")?.parse().ok()?;
                Some((step, path))
            })
            .max()
            .map(|(_, p)| p)
    }

    pub fn scorer(&self) -> PathBuf {
        self.root.join("scorer").join("scorer.bin")
    }

    /// Directory of the fine-tuned checkpoints of one base image.
    pub fn finetune_dir(&self, base: &Image) -> PathBuf {
        self.root.join(format!("finetune-{}", &base.content_hash()[..16]))
    }

    pub fn finetuned(&self, base: &Image, step: usize) -> PathBuf {
        self.finetune_dir(base).join(format!("ckpt_{step}.bin"))
    }

    pub fn edit_dir(&self, job_id: &str) -> PathBuf {
        self.root.join("edits").join(job_id)
    }

    pub fn sweep_dir(&self, name: &str) -> PathBuf {
        self.root.join("sweeps").join(name)
    }

    /// Checkpoint for editing `base` at fine-tune step `ft` (0 = pretrained).
    pub fn load_checkpoint(&self, base: &Image, base_path: &Path, ft: usize) -> Result<Checkpoint> {
        self.load_checkpoints(base, base_path, &[ft]).map(|mut m| m.remove(&ft).expect("loaded"))
    }

    /// Load every requested step, listing all missing files in one error.
    pub fn load_checkpoints(&self, base: &Image, base_path: &Path, fts: &[usize]) -> Result<BTreeMap<usize, Checkpoint>> {
        let pretrained = self.latest_pretrained();
        let path_of = |ft: usize| if ft == 0 { pretrained.clone() } else { Some(self.finetuned(base, ft)).filter(|p| p.exists()) };
        let mut missing = Vec::new();
        for &ft in fts {
            if path_of(ft).is_none() {
                missing.push(if ft == 0 {
                    format!("{}/ckpt_<step>.bin (run `difftune pretrain`)", self.pretrain_dir().display())
                } else {
                    format!("{} (run `difftune finetune --image {}`)", self.finetuned(base, ft).display(), base_path.display())
                });
            }
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing checkpoints: {}", missing.join("; "))));
        }
        fts.iter().map(|&ft| Ok((ft, Checkpoint::load(path_of(ft).expect("checked"))?))).collect()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Outcome of [`run_edit`].
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub selected: Image,
    pub records: Vec<MetricsRecord>,
    pub summary: JobSummary,
}

/// Run one edit job and write `seed-<s>.png`, `selected.png`, `metrics.csv`
/// and `summary.csv` into its edit directory.
pub fn run_edit(job: &EditJob, run: &RunDir, rare_seed: u64, scorer: &Scorer) -> Result<EditOutcome> {
    let base = imageio::load_png(&job.base)?;
    let mask = job.mask.as_deref().map(imageio::load_png).transpose()?.map(|m| Mask::from_image(&m));
    let ckpt = run.load_checkpoint(&base, &job.base, job.ft)?;
    let spec = EditSpec {
        base: &base,
        prompt: &job.prompt,
        rare_seed,
        sampler: &job.sampler,
        interp: job.interp.as_ref(),
        mask: mask.as_ref(),
        seeds: job.seeds,
    };
    let cands = edit_candidates(&ckpt, &spec, scorer)?;
    let config_id = format!("ft{}_t{}_w{}", job.ft, job.sampler.t0, job.sampler.cfg_weight);
    let records = cands.records(&job.id, &config_id);
    let summary = JobSummary::from_candidates(&job.id, scorer.score(&base, &job.prompt)?, &cands);
    let dir = run.edit_dir(&job.id);
    for (img, seed) in cands.images.iter().zip(&cands.seeds) {
        imageio::save_png(img, &dir.join(format!("seed-{seed}.png")))?;
    }
    imageio::save_png(cands.winner(), &dir.join("selected.png"))?;
    write_text(&dir.join("metrics.csv"), &records_csv(&records))?;
    write_text(&dir.join("summary.csv"), &format!("{SUMMARY_CSV_HEADER}\n{}\n", summary.csv_row()))?;
    Ok(EditOutcome {
        selected: cands.winner().clone(),
        records,
        summary,
    })
}

/// Run `cells` for one base image and write `cells.csv`, `metrics.csv`,
/// `grid.png` and one `cell-ft<ft>-t<t0>.png` per cell under `sweeps/<name>`.
pub fn run_sweep(
    run: &RunDir,
    name: &str,
    base_path: &Path,
    cells: &[(usize, f64)],
    spec_template: &EditSpec<'_>,
    scorer: &Scorer,
) -> Result<Vec<CellResult>> {
    let base = imageio::load_png(base_path)?;
    let mut fts: Vec<usize> = cells.iter().map(|c| c.0).collect();
    fts.sort_unstable();
    fts.dedup();
    let ckpts = run.load_checkpoints(&base, base_path, &fts)?;
    let spec = EditSpec { base: &base, ..*spec_template };
    let results = evaluate_cells(&ckpts, cells, &spec, scorer)?;
    let dir = run.sweep_dir(name);
    let mut records = Vec::new();
    for r in &results {
        imageio::save_png(r.candidates.winner(), &dir.join(format!("cell-ft{}-t{}.png", r.ft, r.t0)))?;
        records.extend(r.candidates.records(name, &r.config_id()));
    }
    write_text(&dir.join("cells.csv"), &sweep_csv(&results))?;
    write_text(&dir.join("metrics.csv"), &records_csv(&records))?;
    imageio::save_png(&sweep_composite(&results), &dir.join("grid.png"))?;
    Ok(results)
}

/// Read every `edits/*/summary.csv` under the run directory.
pub fn load_summaries(run: &RunDir) -> Result<Vec<JobSummary>> {
    let dir = run.root().join("edits");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path().join("summary.csv")))
        .filter(|p| p.exists())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            out.push(JobSummary::parse_row(line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn summary(id: &str, base: f64) -> JobSummary {
        JobSummary {
            job_id: id.into(),
            base_align: base,
            winner_seed: 0,
            winner_mse: base.abs(),
            winner_align: base,
            winner_norm: 1.0,
        }
    }

    #[test]
    fn selection_prefers_max_then_lowest_index() {
        assert_eq!(select_best(&[0.1, 0.5, 0.5, -1.0]), Some(1));
        assert_eq!(select_best(&[-3.0]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn bucket_sizes_put_remainder_in_the_middle() {
        assert_eq!(bucket_sizes(93, 3).unwrap(), vec![31, 31, 31]);
        assert_eq!(bucket_sizes(94, 3).unwrap(), vec![31, 32, 31]);
        assert_eq!(bucket_sizes(95, 3).unwrap(), vec![32, 32, 31]);
        assert_eq!(bucket_sizes(10, 4).unwrap(), vec![2, 3, 3, 2]);
        assert!(bucket_sizes(2, 3).is_err());
        assert!(bucket_sizes(2, 0).is_err());
    }

    #[test]
    fn identical_jobs_give_identical_buckets() {
        let jobs: Vec<JobSummary> = (0..9).map(|i| JobSummary { job_id: format!("j{i}"), ..summary("", -2.0) }).collect();
        let b = bucket_analysis(&jobs, 3).unwrap();
        assert!(b.iter().all(|x| *x == b[0]));
    }

    #[test]
    fn buckets_follow_base_alignment_order() {
        let jobs: Vec<JobSummary> = [-1.0, -5.0, -3.0, -2.0, -4.0, -6.0].iter().enumerate().map(|(i, &s)| summary(&format!("j{i}"), s)).collect();
        let b = bucket_analysis(&jobs, 3).unwrap();
        assert_eq!((b[0].base_align_min, b[0].base_align_max), (-6.0, -5.0));
        assert_eq!((b[2].base_align_min, b[2].base_align_max), (-2.0, -1.0));
        assert_eq!(b[1].mean_winner_mse, 3.5);
    }

    #[test]
    fn summary_rows_round_trip() {
        let s = JobSummary {
            job_id: "recolor-03".into(),
            base_align: -1.25,
            winner_seed: 5,
            winner_mse: 0.1 + 0.2,
            winner_align: -0.3,
            winner_norm: 0.24,
        };
        assert_eq!(JobSummary::parse_row(&s.csv_row()).unwrap(), s);
    }

    #[test]
    fn grid_cells_are_row_major_by_t0() {
        let g = SweepGrid { ft_steps: vec![0, 16], t0s: vec![0.8, 1.0] };
        assert_eq!(g.cells(), vec![(0, 0.8), (16, 0.8), (0, 1.0), (16, 1.0)]);
        assert!(SweepGrid { ft_steps: vec![16, 0], t0s: vec![1.0] }.validate().is_err());
        assert!(SweepGrid { ft_steps: vec![], t0s: vec![1.0] }.validate().is_err());
    }

    proptest! {
        #[test]
        fn bucket_sizes_partition_and_are_balanced(n in 1usize..200, k in 1usize..10) {
            prop_assume!(k <= n);
            let s = bucket_sizes(n, k).unwrap();
            prop_assert_eq!(s.iter().sum::<usize>(), n);
            prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
            let rev: Vec<usize> = s.iter().rev().copied().collect();
            // Symmetric whenever the remainder allows it.
            if (n % k) % 2 == k % 2 || n % k == 0 {
                prop_assert_eq!(&s, &rev);
            }
        }

        #[test]
        fn selected_score_is_maximal(scores in proptest::collection::vec(-10.0f64..0.0, 1..16)) {
            let i = select_best(&scores).unwrap();
            prop_assert!(scores.iter().all(|&s| s <= scores[i]));
            prop_assert!(scores[..i].iter().all(|&s| s < scores[i]));
        }
    }
}
