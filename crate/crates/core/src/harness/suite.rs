//! The shipped edit suite: single-object base scenes, one edit each, with the
//! region the edit is allowed to change and a calibrated fidelity threshold.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::{gen_corpus, render, shape_mask, slot_targets, CaptionAttrs, Color, SceneSpec, Scorer, ShapeKind, ShapeSpec, Style, CANVAS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::imageio;

/// Corpus seed the suite's base scenes are drawn from.
pub const SUITE_SEED: u64 = 9001;
pub const SUITE_SIZE: usize = 20;
pub const JOBS_FILE: &str = "jobs.tsv";
pub const JOBS_HEADER: &str = "id\tcategory\tbase\tregion\tthreshold\tprompt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditCategory {
    Recolor,
    Background,
    AddObject,
    ChangeShape,
}

impl EditCategory {
    pub const ALL: [EditCategory; 4] = [EditCategory::Recolor, EditCategory::Background, EditCategory::AddObject, EditCategory::ChangeShape];

    pub fn name(self) -> &'static str {
        match self {
            EditCategory::Recolor => "recolor",
            EditCategory::Background => "background",
            EditCategory::AddObject => "add-object",
            EditCategory::ChangeShape => "change-shape",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Whether the edit keeps the base layout (no new pixels must appear
    /// outside the edited object or background).
    pub fn aligned(self) -> bool {
        matches!(self, EditCategory::Recolor | EditCategory::Background)
    }
}

/// A suite job before calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteJob {
    pub id: String,
    pub category: EditCategory,
    pub base_scene: SceneSpec,
    pub prompt: String,
    /// Row-major `CANVAS²` mask, `true` where the edit may change pixels.
    pub region: Vec<bool>,
}

fn next_color(after: Color, avoid: &[Color]) -> Color {
    let start = after.index();
    (1..=Color::ALL.len())
        .map(|k| Color::ALL[(start + k) % Color::ALL.len()])
        .find(|c| !avoid.contains(c))
        .expect("8 colours leave a free one")
}

fn next_kind(after: ShapeKind) -> ShapeKind {
    ShapeKind::ALL[(after.index() + 1) % ShapeKind::ALL.len()]
}

/// Grow a mask by `r` pixels (Chebyshev distance).
pub fn dilate(mask: &[bool], r: usize) -> Vec<bool> {
    let n = CANVAS as isize;
    let r = r as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..n {
        for x in 0..n {
            out[(y * n + x) as usize] = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    (0..n).contains(&yy) && (0..n).contains(&xx) && mask[(yy * n + xx) as usize]
                })
            });
        }
    }
    out
}

fn union(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x || *y).collect()
}

fn bbox_mask(s: &ShapeSpec) -> Vec<bool> {
    let mut m = vec![false; CANVAS * CANVAS];
    for y in 0..CANVAS as i32 {
        for x in 0..CANVAS as i32 {
            m[(y as usize) * CANVAS + x as usize] = (x - s.cx).abs() <= s.size && (y - s.cy).abs() <= s.size;
        }
    }
    m
}

/// Build the edit of `category` on a single-object scene.
pub fn make_job(id: &str, category: EditCategory, base: &SceneSpec) -> Result<SuiteJob> {
    let [shape] = base.shapes[..] else {
        return Err(Error::Argument("suite bases have exactly one shape".into()));
    };
    let bg = base.background;
    let mut target = base.attributes();
    let region = match category {
        EditCategory::Recolor => {
            target.objects[0].1 = next_color(shape.color, &[shape.color, bg]);
            dilate(&shape_mask(&shape), 1)
        }
        EditCategory::Background => {
            target.background = next_color(bg, &[bg, shape.color]);
            shape_mask(&shape).iter().map(|v| !v).collect()
        }
        EditCategory::ChangeShape => {
            let kind = next_kind(shape.kind);
            target.objects[0].0 = kind;
            let swapped = ShapeSpec { kind, ..shape };
            dilate(&union(&shape_mask(&shape), &shape_mask(&swapped)), 1)
        }
        EditCategory::AddObject => {
            let kind = next_kind(shape.kind);
            let color = next_color(shape.color, &[shape.color, bg]);
            target.objects.push((kind, color, Style::Solid));
            dilate(&bbox_mask(&shape), 1).iter().map(|v| !v).collect()
        }
    };
    Ok(SuiteJob {
        id: id.to_string(),
        category,
        base_scene: base.clone(),
        prompt: target.to_string(),
        region,
    })
}

/// The 20 suite jobs: five per category over distinct held-out bases.
pub fn edit_suite() -> Vec<SuiteJob> {
    let bases = gen_corpus(SUITE_SEED, 200).into_iter().filter(|c| c.scene.shapes.len() == 1).take(SUITE_SIZE);
    bases
        .enumerate()
        .map(|(i, item)| {
            let category = EditCategory::ALL[i % EditCategory::ALL.len()];
            make_job(&format!("{}-{:02}", category.name(), i), category, &item.scene).expect("single-object base")
        })
        .collect()
}

/// A job as listed in a shipped `jobs.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShippedJob {
    pub id: String,
    pub category: EditCategory,
    pub base: PathBuf,
    pub region: PathBuf,
    pub threshold: f64,
    pub prompt: String,
}

impl ShippedJob {
    pub fn load_base(&self) -> Result<Image> {
        imageio::load_png(&self.base)
    }

    pub fn load_region(&self) -> Result<Vec<bool>> {
        region_from_image(&imageio::load_png(&self.region)?)
    }
}

pub fn region_to_image(region: &[bool]) -> Image {
    let mut img = Image::filled(CANVAS, CANVAS, -1.0);
    for (i, &r) in region.iter().enumerate() {
        if r {
            img.set_pixel(i / CANVAS, i % CANVAS, [1.0; 3]);
        }
    }
    img
}

/// White (any channel > 0) pixels form the region.
pub fn region_from_image(img: &Image) -> Result<Vec<bool>> {
    if img.shape() != (CANVAS, CANVAS) {
        return Err(Error::shape(format!("{CANVAS}x{CANVAS}"), format!("{}x{}", img.height(), img.width())));
    }
    Ok((0..CANVAS * CANVAS).map(|i| img.pixel(i / CANVAS, i % CANVAS).iter().any(|&v| v > 0.0)).collect())
}

/// Write base and region images plus `jobs.tsv` into `dir`.
pub fn write_suite(dir: &Path, jobs: &[SuiteJob], thresholds: &[f64]) -> Result<()> {
    if jobs.len() != thresholds.len() {
        return Err(Error::Argument("one threshold per job is required".into()));
    }
    let mut tsv = String::from(JOBS_HEADER);
    tsv.push('\n');
    for (job, th) in jobs.iter().zip(thresholds) {
        let base = format!("{}-base.png", job.id);
        let region = format!("{}-region.png", job.id);
        imageio::save_png(&render(&job.base_scene)?, &dir.join(&base))?;
        imageio::save_png(&region_to_image(&job.region), &dir.join(&region))?;
        let _ = writeln!(tsv, "{}\t{}\t{base}\t{region}\t{th}\t{}", job.id, job.category.name(), job.prompt);
    }
    std::fs::write(dir.join(JOBS_FILE), tsv).map_err(|e| Error::io(dir.join(JOBS_FILE), e))
}

/// Read `dir/jobs.tsv`; paths are resolved relative to `dir`.
pub fn load_suite(dir: &Path) -> Result<Vec<ShippedJob>> {
    let path = dir.join(JOBS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Config(format!("{}:{}: malformed job line", path.display(), n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        out.push(ShippedJob {
            id: f[0].to_string(),
            category: EditCategory::from_name(f[1]).ok_or_else(bad)?,
            base: dir.join(f[2]),
            region: dir.join(f[3]),
            threshold: f[4].parse().map_err(|_| bad())?,
            prompt: f[5].to_string(),
        });
    }
    Ok(out)
}

/// MSE to the base over pixels outside the edit region.
pub fn outside_mse(out: &Image, base: &Image, region: &[bool]) -> Result<f64> {
    let keep: Vec<bool> = region.iter().map(|v| !v).collect();
    out.masked_mse(base, &keep)
}

/// Whether the scorer reads every attribute slot of `prompt` from `img`.
pub fn attributes_match(scorer: &Scorer, img: &Image, prompt: &str) -> Result<bool> {
    Ok(scorer.predict_slots(img)? == slot_targets(&CaptionAttrs::parse(prompt)?))
}

/// An edit succeeds when its attributes match the prompt and it stays within
/// `threshold` of the base outside the edit region.
pub fn edit_succeeds(scorer: &Scorer, out: &Image, base: &Image, prompt: &str, region: &[bool], threshold: f64) -> Result<bool> {
    Ok(attributes_match(scorer, out, prompt)? && outside_mse(out, base, region)? < threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_five_jobs_per_category_with_valid_prompts() {
        let suite = edit_suite();
        assert_eq!(suite.len(), SUITE_SIZE);
        for c in EditCategory::ALL {
            assert_eq!(suite.iter().filter(|j| j.category == c).count(), 5);
        }
        for job in &suite {
            let target = CaptionAttrs::parse(&job.prompt).unwrap();
            assert_ne!(target, job.base_scene.attributes(), "{}", job.id);
            assert!(job.region.iter().any(|v| *v) && job.region.iter().any(|v| !v), "{}", job.id);
        }
    }

    #[test]
    fn recolor_changes_only_the_colour() {
        let scene = SceneSpec {
            background: Color::Red,
            shapes: vec![ShapeSpec { kind: ShapeKind::Circle, color: Color::Green, style: Style::Solid, cx: 15, cy: 15, size: 5 }],
        };
        let job = make_job("r", EditCategory::Recolor, &scene).unwrap();
        let t = CaptionAttrs::parse(&job.prompt).unwrap();
        assert_eq!(t.background, Color::Red);
        assert_eq!(t.objects.len(), 1);
        assert_eq!((t.objects[0].0, t.objects[0].2), (ShapeKind::Circle, Style::Solid));
        assert!(![Color::Green, Color::Red].contains(&t.objects[0].1));
        // The region is the circle grown by one pixel.
        assert!(job.region[15 * CANVAS + 15] && job.region[15 * CANVAS + 21] && !job.region[15 * CANVAS + 22]);
    }

    #[test]
    fn dilate_matches_brute_force() {
        let mut m = vec![false; CANVAS * CANVAS];
        m[0] = true;
        m[10 * CANVAS + 20] = true;
        let d = dilate(&m, 2);
        for y in 0..CANVAS as i32 {
            for x in 0..CANVAS as i32 {
                let want = (x.max(y) <= 2) || ((x - 20).abs() <= 2 && (y - 10).abs() <= 2);
                assert_eq!(d[(y * CANVAS as i32 + x) as usize], want, "({x}, {y})");
            }
        }
    }

    #[test]
    fn shipped_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let jobs = edit_suite();
        let th: Vec<f64> = (0..jobs.len()).map(|i| 0.01 * (i + 1) as f64).collect();
        write_suite(dir.path(), &jobs, &th).unwrap();
        let loaded = load_suite(dir.path()).unwrap();
        for ((s, j), t) in loaded.iter().zip(&jobs).zip(&th) {
            assert_eq!((&s.id, &s.prompt, s.category, s.threshold), (&j.id, &j.prompt, j.category, *t));
            assert_eq!(s.load_region().unwrap(), j.region);
            assert_eq!(s.load_base().unwrap(), render(&j.base_scene).unwrap());
        }
    }

    #[test]
    fn outside_mse_ignores_the_region() {
        let base = Image::zeros(CANVAS, CANVAS);
        let mut out = base.clone();
        out.set_pixel(0, 0, [1.0; 3]);
        let mut region = vec![false; CANVAS * CANVAS];
        region[0] = true;
        assert_eq!(outside_mse(&out, &base, &region).unwrap(), 0.0);
        region[0] = false;
        assert!(outside_mse(&out, &base, &region).unwrap() > 0.0);
    }
}
