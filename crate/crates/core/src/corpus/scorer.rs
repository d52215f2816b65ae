//! Convolutional attribute classifier used as a caption-alignment score.
//!
//! One softmax head per attribute slot: background colour, and for each
//! shape kind its colour (or absent) and its style (or absent). A caption's
//! score for an image is the mean log-probability of the caption's slot
//! values, so it does not depend on the order objects are listed in.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{CaptionAttrs, Color, ShapeKind, Style, CANVAS};
use crate::checkpoint::{decode_container, encode_container, write_atomic, PayloadKind, Reader, Writer};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::nn::{self, Tensor};
use crate::trainer::AdamState;

pub const SLOT_COUNT: usize = 7;
const SLOT_SIZES: [usize; SLOT_COUNT] = [8, 9, 9, 9, 3, 3, 3];
const LOGITS: usize = 44;
const ABSENT_COLOR: usize = 8;
const ABSENT_STYLE: usize = 2;

pub const SLOT_NAMES: [&str; SLOT_COUNT] = [
    "background",
    "circle.color",
    "square.color",
    "triangle.color",
    "circle.style",
    "square.style",
    "triangle.style",
];

fn slot_offset(slot: usize) -> usize {
    SLOT_SIZES[..slot].iter().sum()
}

/// Class index per slot for a caption's attributes.
pub fn slot_targets(attrs: &CaptionAttrs) -> [usize; SLOT_COUNT] {
    let mut t = [0; SLOT_COUNT];
    t[0] = attrs.background.index();
    for kind in ShapeKind::ALL {
        let (c, s) = attrs
            .object(kind)
            .map_or((ABSENT_COLOR, ABSENT_STYLE), |(c, s)| (c.index(), s.index()));
        t[1 + kind.index()] = c;
        t[4 + kind.index()] = s;
    }
    t
}

/// Inverse of [`slot_targets`].
pub fn attrs_from_slots(slots: &[usize; SLOT_COUNT]) -> CaptionAttrs {
    let mut objects = Vec::new();
    for kind in ShapeKind::ALL {
        let c = slots[1 + kind.index()];
        if c != ABSENT_COLOR {
            let s = Style::ALL.get(slots[4 + kind.index()]).copied().unwrap_or(Style::Solid);
            objects.push((kind, Color::ALL[c], s));
        }
    }
    CaptionAttrs {
        background: Color::ALL[slots[0]],
        objects,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScorerArch {
    pub widths: [usize; 3],
    pub hidden: usize,
}

impl Default for ScorerArch {
    fn default() -> Self {
        ScorerArch {
            widths: [32, 64, 64],
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScorerTrainConfig {
    pub arch: ScorerArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Largest std of the Gaussian noise added to training images.
    pub noise_max: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        ScorerTrainConfig {
            arch: ScorerArch::default(),
            epochs: 12,
            batch_size: 32,
            lr: 2e-3,
            noise_max: 0.15,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Held-out accuracy of each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotAccuracy(pub [f64; SLOT_COUNT]);

impl SlotAccuracy {
    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

struct Cache {
    x: [Tensor; 3],
    cols: [Vec<f64>; 3],
    pre: [Tensor; 3],
    pool: [Vec<usize>; 3],
    flat: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    arch: ScorerArch,
    params: Vec<f64>,
}

struct Offsets {
    conv: [(std::ops::Range<usize>, std::ops::Range<usize>); 3],
    fc1: (std::ops::Range<usize>, std::ops::Range<usize>),
    fc2: (std::ops::Range<usize>, std::ops::Range<usize>),
    total: usize,
}

impl ScorerArch {
    fn flat_dim(&self) -> usize {
        (CANVAS / 8) * (CANVAS / 8) * self.widths[2]
    }

    fn offsets(&self) -> Offsets {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let cins = [CHANNELS, self.widths[0], self.widths[1]];
        let conv = [0, 1, 2].map(|i| (take(9 * cins[i] * self.widths[i]), take(self.widths[i])));
        let fc1 = (take(self.flat_dim() * self.hidden), take(self.hidden));
        let fc2 = (take(self.hidden * LOGITS), take(LOGITS));
        Offsets {
            conv,
            fc1,
            fc2,
            total: at,
        }
    }
}

impl Scorer {
    pub fn new(arch: ScorerArch, seed: u64) -> Self {
        let o = arch.offsets();
        let mut params = vec![0.0; o.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cins = [CHANNELS, arch.widths[0], arch.widths[1]];
        for (i, (w, _)) in o.conv.iter().enumerate() {
            nn::init_normal(&mut params[w.clone()], 9 * cins[i], 1.0, &mut rng);
        }
        nn::init_normal(&mut params[o.fc1.0.clone()], arch.flat_dim(), 1.0, &mut rng);
        nn::init_normal(&mut params[o.fc2.0.clone()], arch.hidden, 0.5, &mut rng);
        Scorer { arch, params }
    }

    pub fn arch(&self) -> &ScorerArch {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn forward(&self, images: &[&Image]) -> (Vec<f64>, Cache) {
        let o = self.arch.offsets();
        let n = images.len();
        let mut data = Vec::with_capacity(n * CANVAS * CANVAS * CHANNELS);
        for img in images {
            data.extend_from_slice(img.as_slice());
        }
        let mut h = Tensor::from_vec(n, CANVAS, CANVAS, CHANNELS, data);
        let mut xs = Vec::new();
        let mut cols = Vec::new();
        let mut pres = Vec::new();
        let mut pools = Vec::new();
        for (w, b) in &o.conv {
            let (pre, c) = nn::conv3x3(&h, &self.params[w.clone()], &self.params[b.clone()]);
            let act = nn::relu_tensor(&pre);
            xs.push(h);
            cols.push(c);
            let (pooled, arg) = nn::maxpool2(&act);
            h = pooled;
            pools.push(arg);
            pres.push(pre);
        }
        let flat = h.data;
        let hidden_pre = nn::linear(&flat, n, &self.params[o.fc1.0.clone()], &self.params[o.fc1.1.clone()]);
        let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
        let logits = nn::linear(&hidden, n, &self.params[o.fc2.0.clone()], &self.params[o.fc2.1.clone()]);
        let cache = Cache {
            x: xs.try_into().ok().expect("three layers"),
            cols: cols.try_into().ok().expect("three layers"),
            pre: pres.try_into().ok().expect("three layers"),
            pool: pools.try_into().ok().expect("three layers"),
            flat,
            hidden_pre,
            hidden,
        };
        (logits, cache)
    }

    fn backward(&self, dlogits: &[f64], cache: &Cache, n: usize) -> Vec<f64> {
        let o = self.arch.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let (g_lo, g_hi) = grad.split_at_mut(o.fc2.0.start);
        let (gw2, gb2) = g_hi[..o.fc2.1.end - o.fc2.0.start].split_at_mut(o.fc2.0.len());
        let mut dh = nn::linear_backward(dlogits, &cache.hidden, n, &self.params[o.fc2.0.clone()], gw2, gb2);
        nn::relu_backward(&mut dh, &cache.hidden_pre);
        let (gw1, gb1) = g_lo[o.fc1.0.start..o.fc1.1.end].split_at_mut(o.fc1.0.len());
        let dflat = nn::linear_backward(&dh, &cache.flat, n, &self.params[o.fc1.0.clone()], gw1, gb1);
        let s = CANVAS / 8;
        let mut d = Tensor::from_vec(n, s, s, self.arch.widths[2], dflat);
        for i in (0..3).rev() {
            let mut dpre = nn::maxpool2_backward(&d, &cache.pool[i]);
            nn::relu_backward(&mut dpre.data, &cache.pre[i].data);
            let (w, b) = &o.conv[i];
            let (gw, gb) = g_lo[w.start..b.end].split_at_mut(w.len());
            let cin = cache.x[i].c;
            match nn::conv3x3_backward(&dpre, &cache.cols[i], &self.params[w.clone()], gw, gb, cin, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        grad
    }

    /// Per-slot log-probabilities for one image.
    fn log_probs(&self, image: &Image) -> Result<Vec<f64>> {
        if image.shape() != (CANVAS, CANVAS) {
            return Err(Error::shape(format!("{CANVAS}x{CANVAS}x3"), format!("{}x{}x3", image.height(), image.width())));
        }
        let (logits, _) = self.forward(&[image]);
        Ok(log_softmax_slots(&logits))
    }

    /// Mean over slots of `log p(caption value | image)`; higher is better.
    pub fn score(&self, image: &Image, caption: &str) -> Result<f64> {
        let attrs = CaptionAttrs::parse(caption)?;
        self.score_attrs(image, &attrs)
    }

    pub fn score_attrs(&self, image: &Image, attrs: &CaptionAttrs) -> Result<f64> {
        let lp = self.log_probs(image)?;
        let targets = slot_targets(attrs);
        Ok((0..SLOT_COUNT).map(|s| lp[slot_offset(s) + targets[s]]).sum::<f64>() / SLOT_COUNT as f64)
    }

    /// Most likely value of every slot.
    pub fn predict_slots(&self, image: &Image) -> Result<[usize; SLOT_COUNT]> {
        let lp = self.log_probs(image)?;
        Ok(argmax_slots(&lp))
    }

    pub fn predict(&self, image: &Image) -> Result<CaptionAttrs> {
        Ok(attrs_from_slots(&self.predict_slots(image)?))
    }

    /// Held-out style accuracy of every slot on `(image, caption)` pairs.
    pub fn accuracy(&self, images: &[&Image], captions: &[&str]) -> Result<SlotAccuracy> {
        let mut correct = [0usize; SLOT_COUNT];
        for chunk in (0..images.len()).collect::<Vec<_>>().chunks(64) {
            let batch: Vec<&Image> = chunk.iter().map(|&i| images[i]).collect();
            let (logits, _) = self.forward(&batch);
            for (j, &i) in chunk.iter().enumerate() {
                let targets = slot_targets(&CaptionAttrs::parse(captions[i])?);
                let pred = argmax_slots(&logits[j * LOGITS..(j + 1) * LOGITS]);
                for s in 0..SLOT_COUNT {
                    correct[s] += (pred[s] == targets[s]) as usize;
                }
            }
        }
        let n = images.len().max(1) as f64;
        Ok(SlotAccuracy(correct.map(|c| c as f64 / n)))
    }

    /// Train on the first `1 - holdout_fraction` of the items and report
    /// accuracy on the rest.
    pub fn train(images: &[&Image], captions: &[&str], cfg: &ScorerTrainConfig) -> Result<(Scorer, SlotAccuracy)> {
        if images.len() != captions.len() {
            return Err(Error::Argument("images and captions differ in length".into()));
        }
        if images.len() < 1000 {
            return Err(Error::Config(format!(
                "scorer training needs at least 1000 items, got {}",
                images.len()
            )));
        }
        let targets = captions
            .iter()
            .map(|c| CaptionAttrs::parse(c).map(|a| slot_targets(&a)))
            .collect::<Result<Vec<_>>>()?;
        let split = ((1.0 - cfg.holdout_fraction) * images.len() as f64).round() as usize;
        let mut scorer = Scorer::new(cfg.arch, cfg.seed);
        let mut state = AdamState::new(scorer.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5c0e);
        let mut order: Vec<usize> = (0..split).collect();
        let total = cfg.epochs * split.div_ceil(cfg.batch_size);
        let mut done = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Image> = chunk
                    .iter()
                    .map(|&i| {
                        let std = rng.random_range(0.0..=cfg.noise_max);
                        let mut img = images[i].clone();
                        for v in img.as_mut_slice() {
                            *v += std * rng.sample::<f64, _>(StandardNormal);
                        }
                        img
                    })
                    .collect();
                let refs: Vec<&Image> = batch.iter().collect();
                let (logits, cache) = scorer.forward(&refs);
                let n = chunk.len();
                let lp = logits.chunks_exact(LOGITS).map(log_softmax_slots).collect::<Vec<_>>();
                let mut dlogits = vec![0.0; n * LOGITS];
                let scale = 1.0 / (n * SLOT_COUNT) as f64;
                for (j, &i) in chunk.iter().enumerate() {
                    for s in 0..SLOT_COUNT {
                        let off = slot_offset(s);
                        for k in 0..SLOT_SIZES[s] {
                            let p = lp[j][off + k].exp();
                            let y = (k == targets[i][s]) as u8 as f64;
                            dlogits[j * LOGITS + off + k] = scale * (p - y);
                        }
                    }
                }
                let grad = scorer.backward(&dlogits, &cache, n);
                // cosine decay to zero
                let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * done as f64 / total as f64).cos());
                done += 1;
                crate::trainer::optimizer_step(&mut scorer.params, &grad, &mut state, lr)?;
            }
        }
        let acc = scorer.accuracy(&images[split..], &captions[split..])?;
        Ok((scorer, acc))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        for v in [self.arch.widths[0], self.arch.widths[1], self.arch.widths[2], self.arch.hidden] {
            w.u32(v as u32);
        }
        w.f64s(&self.params);
        encode_container(PayloadKind::Scorer, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Scorer> {
        let body = decode_container(bytes, PayloadKind::Scorer)?;
        let mut r = Reader::new(body);
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let arch = ScorerArch {
            widths: [dims[0], dims[1], dims[2]],
            hidden: dims[3],
        };
        let params = r.f64s()?;
        r.finish()?;
        if params.len() != arch.offsets().total {
            return Err(Error::Integrity("scorer parameter count does not match its architecture".into()));
        }
        Ok(Scorer { arch, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scorer> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Scorer::from_bytes(&bytes)
    }
}

fn log_softmax_slots(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; LOGITS];
    for s in 0..SLOT_COUNT {
        let r = slot_offset(s)..slot_offset(s) + SLOT_SIZES[s];
        let max = logits[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits[r.clone()].iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for k in r {
            out[k] = logits[k] - lse;
        }
    }
    out
}

fn argmax_slots(values: &[f64]) -> [usize; SLOT_COUNT] {
    let mut out = [0; SLOT_COUNT];
    for s in 0..SLOT_COUNT {
        let off = slot_offset(s);
        let mut best = 0;
        for k in 1..SLOT_SIZES[s] {
            if values[off + k] > values[off + best] {
                best = k;
            }
        }
        out[s] = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_corpus;

    #[test]
    fn slot_layout_covers_all_logits() {
        assert_eq!(SLOT_SIZES.iter().sum::<usize>(), LOGITS);
        assert_eq!(slot_offset(SLOT_COUNT - 1) + SLOT_SIZES[SLOT_COUNT - 1], LOGITS);
    }

    #[test]
    fn slots_round_trip_attributes() {
        for item in gen_corpus(1, 200) {
            let mut attrs = item.scene.attributes();
            let back = attrs_from_slots(&slot_targets(&attrs));
            attrs.objects.sort();
            let mut got = back.objects.clone();
            got.sort();
            assert_eq!((attrs.background, attrs.objects), (back.background, got));
        }
    }

    #[test]
    fn score_ignores_object_order() {
        let scorer = Scorer::new(ScorerArch::default(), 3);
        let img = &gen_corpus(2, 1)[0].image;
        let a = scorer
            .score(img, "a solid red circle and a outlined blue square on a black background")
            .unwrap();
        let b = scorer
            .score(img, "a outlined blue square and a solid red circle on a black background")
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, scorer.score(&img.clone(), "a solid red circle and a outlined blue square on a black background").unwrap());
        assert!(matches!(
            scorer.score(img, "a solid purple circle on a black background"),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut scorer = Scorer::new(
            ScorerArch {
                widths: [2, 3, 2],
                hidden: 4,
            },
            5,
        );
        let items = gen_corpus(6, 2);
        let imgs: Vec<&Image> = items.iter().map(|i| &i.image).collect();
        let targets: Vec<_> = items.iter().map(|i| slot_targets(&i.scene.attributes())).collect();
        let loss = |s: &Scorer| -> f64 {
            let (logits, _) = s.forward(&imgs);
            let mut l = 0.0;
            for (j, t) in targets.iter().enumerate() {
                let lp = log_softmax_slots(&logits[j * LOGITS..(j + 1) * LOGITS]);
                for sl in 0..SLOT_COUNT {
                    l -= lp[slot_offset(sl) + t[sl]];
                }
            }
            l / (2 * SLOT_COUNT) as f64
        };
        let (logits, cache) = scorer.forward(&imgs);
        let mut dlogits = vec![0.0; 2 * LOGITS];
        for (j, t) in targets.iter().enumerate() {
            let lp = log_softmax_slots(&logits[j * LOGITS..(j + 1) * LOGITS]);
            for sl in 0..SLOT_COUNT {
                for k in 0..SLOT_SIZES[sl] {
                    let idx = slot_offset(sl) + k;
                    dlogits[j * LOGITS + idx] = (lp[idx].exp() - (k == t[sl]) as u8 as f64) / (2 * SLOT_COUNT) as f64;
                }
            }
        }
        let grad = scorer.backward(&dlogits, &cache, 2);
        let h = 1e-5;
        for i in (0..scorer.params.len()).step_by(7) {
            let orig = scorer.params[i];
            scorer.params[i] = orig + h;
            let lp = loss(&scorer);
            scorer.params[i] = orig - h;
            let lm = loss(&scorer);
            scorer.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            // ReLU kinks make a few coordinates non-differentiable; tolerate loosely.
            assert!((fd - grad[i]).abs() <= 1e-5 + 1e-3 * fd.abs(), "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn small_corpus_is_rejected() {
        let items = gen_corpus(0, 10);
        let imgs: Vec<&Image> = items.iter().map(|i| &i.image).collect();
        let caps: Vec<&str> = items.iter().map(|i| i.caption.as_str()).collect();
        assert!(matches!(
            Scorer::train(&imgs, &caps, &ScorerTrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn untrained_scorer_is_near_chance_on_background() {
        let items = gen_corpus(7, 400);
        let imgs: Vec<&Image> = items.iter().map(|i| &i.image).collect();
        let caps: Vec<&str> = items.iter().map(|i| i.caption.as_str()).collect();
        let acc = Scorer::new(ScorerArch::default(), 8).accuracy(&imgs, &caps).unwrap();
        assert!(acc.0[0] < 0.3, "{:?}", acc);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = Scorer::new(ScorerArch::default(), 9);
        assert_eq!(Scorer::from_bytes(&s.to_bytes()).unwrap(), s);
        let mut bad = s.to_bytes();
        bad[30] ^= 0xff;
        assert!(matches!(Scorer::from_bytes(&bad), Err(Error::Integrity(_))));
    }
}
