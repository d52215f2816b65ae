//! Procedural captioned corpus and the caption-alignment scorer.
//!
//! Scenes are flat-colour shapes on a flat background, rendered at 32×32.
//! Every colour is a corner of the RGB cube, so rendered pixels are exactly
//! ±1 and survive 8-bit storage without loss.

mod scorer;

use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::imageio;
use crate::util::rng_stream;

pub use scorer::{attrs_from_slots, slot_targets, Scorer, ScorerArch, ScorerTrainConfig, SlotAccuracy, SLOT_COUNT, SLOT_NAMES};

pub const CANVAS: usize = 32;
pub const MIN_SIZE: i32 = 4;
pub const MAX_SIZE: i32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Black,
    White,
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Black,
        Color::White,
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
    ];

    /// Channel levels sit inside the gamut so that sampled images have
    /// headroom before dynamic thresholding rescales them.
    pub fn rgb8(self) -> [u8; 3] {
        const LO: u8 = 32;
        const HI: u8 = 223;
        match self {
            Color::Black => [LO, LO, LO],
            Color::White => [HI, HI, HI],
            Color::Red => [HI, LO, LO],
            Color::Green => [LO, HI, LO],
            Color::Blue => [LO, LO, HI],
            Color::Yellow => [HI, HI, LO],
            Color::Cyan => [LO, HI, HI],
            Color::Magenta => [HI, LO, HI],
        }
    }

    /// Linear map of the 8-bit colour onto `[-1, 1]`.
    pub fn pixel(self) -> [f64; 3] {
        self.rgb8().map(imageio::from_u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Black => "black",
            Color::White => "white",
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
        }
    }

    pub fn from_name(s: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<ShapeKind> {
        ShapeKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    Solid,
    Outlined,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::Solid, Style::Outlined];

    pub fn name(self) -> &'static str {
        match self {
            Style::Solid => "solid",
            Style::Outlined => "outlined",
        }
    }

    pub fn from_name(s: &str) -> Option<Style> {
        Style::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: Color,
    pub style: Style,
    /// Centre pixel (column, row).
    pub cx: i32,
    pub cy: i32,
    /// Radius for circles, half side for squares, half height for triangles.
    pub size: i32,
}

impl ShapeSpec {
    /// Whether pixel `(x, y)` is painted by this shape.
    pub fn covers(&self, x: i32, y: i32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.size;
        match (self.kind, self.style) {
            (ShapeKind::Circle, style) => {
                let d = ((dx * dx + dy * dy) as f64).sqrt();
                match style {
                    Style::Solid => d <= r as f64 + 0.5,
                    Style::Outlined => (d - r as f64).abs() <= 0.5,
                }
            }
            (ShapeKind::Square, style) => {
                let m = dx.abs().max(dy.abs());
                match style {
                    Style::Solid => m <= r,
                    Style::Outlined => m == r,
                }
            }
            (ShapeKind::Triangle, style) => {
                // Apex at the top row, base of width 2r+1 at the bottom row.
                let j = dy + r;
                if !(0..=2 * r).contains(&j) {
                    return false;
                }
                let half = j / 2;
                match style {
                    Style::Solid => dx.abs() <= half,
                    Style::Outlined => dx.abs() == half || (j == 2 * r && dx.abs() <= half),
                }
            }
        }
    }

    fn bbox(&self) -> (i32, i32, i32, i32) {
        (self.cx - self.size, self.cy - self.size, self.cx + self.size, self.cy + self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub background: Color,
    pub shapes: Vec<ShapeSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        // Background-only scenes are renderable but never generated.
        if self.shapes.len() > 2 {
            return Err(Error::Validation(format!("{} shapes (at most 2)", self.shapes.len())));
        }
        let max = CANVAS as i32 - 1;
        for s in &self.shapes {
            if !(MIN_SIZE..=MAX_SIZE).contains(&s.size) {
                return Err(Error::Validation(format!("size {} outside {MIN_SIZE}..={MAX_SIZE}", s.size)));
            }
            let (x0, y0, x1, y1) = s.bbox();
            if x0 < 0 || y0 < 0 || x1 > max || y1 > max {
                return Err(Error::Validation(format!("{} at ({}, {}) leaves the canvas", s.kind.name(), s.cx, s.cy)));
            }
            if s.color == self.background {
                return Err(Error::Validation(format!("{} has the background colour", s.kind.name())));
            }
        }
        if let [a, b] = self.shapes.as_slice() {
            if a.kind == b.kind {
                return Err(Error::Validation("two shapes of the same kind".into()));
            }
            let (ax0, ay0, ax1, ay1) = a.bbox();
            let (bx0, by0, bx1, by1) = b.bbox();
            let disjoint = ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0;
            if !disjoint {
                return Err(Error::Validation("shapes overlap".into()));
            }
        }
        Ok(())
    }

    pub fn caption(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.shapes.iter().enumerate() {
            if i > 0 {
                out.push_str(" and ");
            }
            out.push_str(&format!("a {} {} {}", s.style.name(), s.color.name(), s.kind.name()));
        }
        out.push_str(&format!(" on a {} background", self.background.name()));
        out
    }

    pub fn attributes(&self) -> CaptionAttrs {
        CaptionAttrs {
            background: self.background,
            objects: self.shapes.iter().map(|s| (s.kind, s.color, s.style)).collect(),
        }
    }

    /// Draw a random valid scene.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> SceneSpec {
        let background = Color::ALL[rng.random_range(0..8)];
        let two = rng.random_bool(0.5);
        let first_kind = ShapeKind::ALL[rng.random_range(0..3)];
        let mut kinds = vec![first_kind];
        if two {
            let others: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|k| *k != first_kind).collect();
            kinds.push(others[rng.random_range(0..2)]);
        }
        loop {
            let mut shapes = Vec::with_capacity(kinds.len());
            for &kind in &kinds {
                let max_size = if kinds.len() == 2 { 7 } else { MAX_SIZE };
                let size = rng.random_range(MIN_SIZE..=max_size);
                let colors: Vec<Color> = Color::ALL.into_iter().filter(|c| *c != background).collect();
                let shape = ShapeSpec {
                    kind,
                    color: colors[rng.random_range(0..colors.len())],
                    style: Style::ALL[rng.random_range(0..2)],
                    cx: rng.random_range(size..=CANVAS as i32 - 1 - size),
                    cy: rng.random_range(size..=CANVAS as i32 - 1 - size),
                    size,
                };
                shapes.push(shape);
            }
            let scene = SceneSpec { background, shapes };
            if scene.validate().is_ok() {
                return scene;
            }
        }
    }
}

/// Pixel mask (row-major, `true` = painted) of one shape on the canvas.
pub fn shape_mask(shape: &ShapeSpec) -> Vec<bool> {
    let mut m = vec![false; CANVAS * CANVAS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            m[y * CANVAS + x] = shape.covers(x as i32, y as i32);
        }
    }
    m
}

pub fn render(spec: &SceneSpec) -> Result<Image> {
    spec.validate()?;
    let mut img = Image::zeros(CANVAS, CANVAS);
    let bg = spec.background.pixel();
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let mut px = bg;
            for s in &spec.shapes {
                if s.covers(x as i32, y as i32) {
                    px = s.color.pixel();
                }
            }
            img.set_pixel(y, x, px);
        }
    }
    Ok(img)
}

/// Attribute content of a caption, independent of object order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionAttrs {
    pub background: Color,
    pub objects: Vec<(ShapeKind, Color, Style)>,
}

impl CaptionAttrs {
    /// Parse the caption grammar
    /// `a <style> <color> <shape> [and a <style> <color> <shape>] on a <color> background`.
    pub fn parse(caption: &str) -> Result<CaptionAttrs> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        let known = |w: &str| crate::text_cond::CAPTION_WORDS.contains(&w);
        let unknown: Vec<String> = words.iter().filter(|w| !known(w)).map(|w| w.to_string()).collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownToken(unknown));
        }
        let bad = || Error::Argument(format!("caption does not follow the scene grammar: {caption:?}"));
        let mut objects = Vec::new();
        let mut i = 0;
        loop {
            if words.get(i) != Some(&"a") {
                return Err(bad());
            }
            let style = words.get(i + 1).and_then(|w| Style::from_name(w)).ok_or_else(bad)?;
            let color = words.get(i + 2).and_then(|w| Color::from_name(w)).ok_or_else(bad)?;
            let kind = words.get(i + 3).and_then(|w| ShapeKind::from_name(w)).ok_or_else(bad)?;
            objects.push((kind, color, style));
            i += 4;
            match words.get(i) {
                Some(&"and") => i += 1,
                Some(&"on") => break,
                _ => return Err(bad()),
            }
        }
        if words.len() != i + 4 || words[i + 1] != "a" || words[i + 3] != "background" {
            return Err(bad());
        }
        let background = Color::from_name(words[i + 2]).ok_or_else(bad)?;
        if objects.len() > 2 || (objects.len() == 2 && objects[0].0 == objects[1].0) {
            return Err(bad());
        }
        Ok(CaptionAttrs { background, objects })
    }

    pub fn object(&self, kind: ShapeKind) -> Option<(Color, Style)> {
        self.objects.iter().find(|o| o.0 == kind).map(|o| (o.1, o.2))
    }
}

impl fmt::Display for CaptionAttrs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, c, s)) in self.objects.iter().enumerate() {
            if i > 0 {
                write!(f, " and ")?;
            }
            write!(f, "a {} {} {}", s.name(), c.name(), k.name())?;
        }
        write!(f, " on a {} background", self.background.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedImage {
    pub scene: SceneSpec,
    pub image: Image,
    pub caption: String,
}

/// `n` scenes; item `i` depends only on `(seed, i)`.
pub fn gen_corpus(seed: u64, n: usize) -> Vec<CaptionedImage> {
    (0..n)
        .map(|i| {
            let mut rng = rng_stream(seed, i as u64);
            let scene = SceneSpec::random(&mut rng);
            let image = render(&scene).expect("generated scenes are valid");
            let caption = scene.caption();
            CaptionedImage { scene, image, caption }
        })
        .collect()
}

pub const MANIFEST: &str = "captions.tsv";

/// Write `NNNNNN.png` files plus a `filename<TAB>caption` manifest.
pub fn save_corpus(items: &[CaptionedImage], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, item) in items.iter().enumerate() {
        let name = format!("{i:06}.png");
        imageio::save_png(&item.image, &dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{}\n", item.caption));
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Read a corpus directory back as `(image, caption)` pairs.
pub fn load_corpus(dir: &Path) -> Result<Vec<(Image, String)>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (file, caption) = line
                .split_once('\t')
                .ok_or_else(|| Error::Integrity(format!("manifest line without tab: {line:?}")))?;
            Ok((imageio::load_png(&dir.join(file))?, caption.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_cond::Vocabulary;

    fn shape(kind: ShapeKind, style: Style, size: i32) -> ShapeSpec {
        ShapeSpec {
            kind,
            color: Color::Red,
            style,
            cx: 15,
            cy: 16,
            size,
        }
    }

    #[test]
    fn generation_is_reproducible() {
        assert_eq!(gen_corpus(9, 50), gen_corpus(9, 50));
        assert_ne!(gen_corpus(9, 50), gen_corpus(10, 50));
        assert_eq!(gen_corpus(9, 50)[..20], gen_corpus(9, 20)[..]);
    }

    #[test]
    fn background_only_scene_is_constant() {
        let img = render(&SceneSpec {
            background: Color::Cyan,
            shapes: vec![],
        })
        .unwrap();
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                assert_eq!(img.pixel(y, x), Color::Cyan.pixel());
            }
        }
    }

    #[test]
    fn solid_circle_centre_has_shape_colour() {
        let s = shape(ShapeKind::Circle, Style::Solid, 6);
        let img = render(&SceneSpec {
            background: Color::Blue,
            shapes: vec![s],
        })
        .unwrap();
        let (hi, lo) = (223.0 / 127.5 - 1.0, 32.0 / 127.5 - 1.0);
        assert_eq!(img.pixel(16, 15), [hi, lo, lo]);
    }

    #[test]
    fn solid_square_is_an_axis_aligned_block() {
        let s = shape(ShapeKind::Square, Style::Solid, 5);
        let img = render(&SceneSpec {
            background: Color::Black,
            shapes: vec![s],
        })
        .unwrap();
        for y in 0..CANVAS as i32 {
            for x in 0..CANVAS as i32 {
                let inside = (10..=20).contains(&x) && (11..=21).contains(&y);
                let want = if inside { Color::Red } else { Color::Black }.pixel();
                assert_eq!(img.pixel(y as usize, x as usize), want);
            }
        }
    }

    #[test]
    fn outlined_circle_is_unit_width_ring() {
        let s = shape(ShapeKind::Circle, Style::Outlined, 8);
        let img = render(&SceneSpec {
            background: Color::White,
            shapes: vec![s],
        })
        .unwrap();
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let d = (((x as f64) - 15.0).powi(2) + ((y as f64) - 16.0).powi(2)).sqrt();
                let want = if (d - 8.0).abs() <= 0.5 { Color::Red } else { Color::White };
                assert_eq!(img.pixel(y, x), want.pixel(), "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn outlined_shapes_are_boundaries_of_solid_ones() {
        for kind in [ShapeKind::Square, ShapeKind::Triangle] {
            let solid = shape(kind, Style::Solid, 7);
            let outline = shape(kind, Style::Outlined, 7);
            for y in 0..CANVAS as i32 {
                for x in 0..CANVAS as i32 {
                    if outline.covers(x, y) {
                        assert!(solid.covers(x, y));
                        let interior = [(0, 1), (0, -1), (1, 0), (-1, 0)]
                            .iter()
                            .all(|(dx, dy)| solid.covers(x + dx, y + dy));
                        assert!(!interior || kind == ShapeKind::Triangle, "{kind:?} ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let mut s = shape(ShapeKind::Circle, Style::Solid, 6);
        s.cx = 2;
        let scene = SceneSpec {
            background: Color::Blue,
            shapes: vec![s],
        };
        assert!(matches!(render(&scene), Err(Error::Validation(_))));
        let same_colour = SceneSpec {
            background: Color::Red,
            shapes: vec![shape(ShapeKind::Circle, Style::Solid, 6)],
        };
        assert!(same_colour.validate().is_err());
        let overlap = SceneSpec {
            background: Color::Blue,
            shapes: vec![shape(ShapeKind::Circle, Style::Solid, 6), shape(ShapeKind::Square, Style::Solid, 4)],
        };
        assert!(overlap.validate().is_err());
    }

    #[test]
    fn captions_round_trip_through_the_parser() {
        for item in gen_corpus(3, 300) {
            let attrs = CaptionAttrs::parse(&item.caption).unwrap();
            assert_eq!(attrs, item.scene.attributes());
            assert_eq!(attrs.to_string(), item.caption);
        }
        assert!(matches!(
            CaptionAttrs::parse("a solid purple circle on a red background"),
            Err(Error::UnknownToken(_))
        ));
        assert!(matches!(CaptionAttrs::parse("a solid red circle"), Err(Error::Argument(_))));
    }

    #[test]
    fn captions_use_only_caption_words() {
        let v = Vocabulary::default();
        for item in gen_corpus(4, 2000) {
            let seq = v.tokenize(&item.caption).unwrap();
            assert!(seq.ids().iter().all(|&id| v.is_caption_id(id)));
            assert!(seq.len() <= crate::text_cond::MAX_TOKENS - crate::text_cond::RARE_TOKEN_COUNT);
        }
    }

    #[test]
    fn attribute_marginals_are_uniform() {
        let corpus = gen_corpus(2024, 10_000);
        let n = corpus.len() as f64;
        let p = 1.0 / 8.0;
        let sd = (p * (1.0 - p) / n).sqrt();
        for c in Color::ALL {
            let f = corpus.iter().filter(|i| i.scene.background == c).count() as f64 / n;
            assert!((f - p).abs() <= 3.0 * sd, "{c:?}: {f}");
        }
        let shapes: Vec<&ShapeSpec> = corpus.iter().flat_map(|i| &i.scene.shapes).collect();
        for k in ShapeKind::ALL {
            let f = shapes.iter().filter(|s| s.kind == k).count() as f64 / shapes.len() as f64;
            assert!((0.30..=0.37).contains(&f), "{k:?}: {f}");
        }
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = gen_corpus(5, 12);
        save_corpus(&items, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), 12);
        for (item, (img, cap)) in items.iter().zip(&back) {
            assert_eq!(&item.image, img);
            assert_eq!(&item.caption, cap);
        }
    }
}
