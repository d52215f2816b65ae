//! The ε-prediction network `f_θ(z_t, t, cond)`.
//!
//! A two-level convolutional U-Net. The input is first folded by
//! space-to-depth (factor [`ArchConfig::patch`]), then
//!
//! ```text
//! stem conv → blocks (level 1) ─────────────── skip ─┐
//!           → avgpool → conv → blocks (level 2) → upsample → concat → fuse conv
//!           → blocks (level 1) → silu → out conv → depth-to-space → F
//! ```
//!
//! The prediction is `ε̂ = a(t)⊙z + (1 + b(t))⊙F` with per-channel `a`, `b`
//! read linearly off the time embedding, so a zero network predicts zero.
//!
//! Each residual block is `h + conv(silu(film(conv(silu(h)))))`, where the
//! per-channel scale/shift comes from a linear map of
//! `silu([mlp(sinusoid(t)) | cond])`.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::nn::{self, Tensor};
use crate::text_cond::CondVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    /// Square image side in pixels.
    pub resolution: usize,
    /// Space-to-depth factor applied before the stem.
    pub patch: usize,
    /// Channel widths of the two levels.
    pub widths: [usize; 2],
    /// Residual blocks per level (encoder, bottleneck and decoder each).
    pub blocks: usize,
    /// Sinusoidal time-feature dimension (even).
    pub time_dim: usize,
    /// Hidden width of the time MLP.
    pub embed_dim: usize,
    pub cond_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            resolution: 32,
            patch: 2,
            widths: [16, 32],
            blocks: 2,
            time_dim: 32,
            embed_dim: 64,
            cond_dim: crate::text_cond::COND_DIM,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let inner = self.resolution / self.patch.max(1);
        if self.patch == 0
            || self.resolution % self.patch != 0
            || inner % 2 != 0
            || self.time_dim % 2 != 0
            || self.widths.contains(&0)
            || self.embed_dim == 0
            || self.cond_dim == 0
        {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    fn inner_res(&self) -> usize {
        self.resolution / self.patch
    }

    fn io_channels(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    fn emb_width(&self) -> usize {
        self.embed_dim + self.cond_dim
    }
}

#[derive(Debug, Clone)]
struct LinearIdx {
    w: Range<usize>,
    b: Range<usize>,
}

#[derive(Debug, Clone)]
struct ConvIdx {
    w: Range<usize>,
    b: Range<usize>,
    cin: usize,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    conv1: ConvIdx,
    conv2: ConvIdx,
    film: LinearIdx,
    channels: usize,
}

/// Named slices of the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    time1: LinearIdx,
    time2: LinearIdx,
    stem: ConvIdx,
    enc: Vec<BlockIdx>,
    down: ConvIdx,
    mid: Vec<BlockIdx>,
    fuse: ConvIdx,
    dec: Vec<BlockIdx>,
    out: ConvIdx,
    skip: LinearIdx,
    segments: Vec<(String, Range<usize>, usize, f64)>,
    total: usize,
}

struct LayoutBuilder {
    offset: usize,
    segments: Vec<(String, Range<usize>, usize, f64)>,
}

impl LayoutBuilder {
    fn take(&mut self, name: String, len: usize, fan_in: usize, gain: f64) -> Range<usize> {
        let r = self.offset..self.offset + len;
        self.offset += len;
        self.segments.push((name, r.clone(), fan_in, gain));
        r
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, gain: f64) -> LinearIdx {
        LinearIdx {
            w: self.take(format!("{name}.weight"), fin * fout, fin, gain),
            b: self.take(format!("{name}.bias"), fout, 0, 0.0),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, gain: f64) -> ConvIdx {
        ConvIdx {
            w: self.take(format!("{name}.weight"), 9 * cin * cout, 9 * cin, gain),
            b: self.take(format!("{name}.bias"), cout, 0, 0.0),
            cin,
        }
    }

    fn block(&mut self, name: &str, c: usize, emb: usize) -> BlockIdx {
        BlockIdx {
            conv1: self.conv(&format!("{name}.conv1"), c, c, 1.0),
            film: self.linear(&format!("{name}.film"), emb, 2 * c, 0.1),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 0.1),
            channels: c,
        }
    }
}

impl Layout {
    fn new(arch: &ArchConfig) -> Self {
        let mut b = LayoutBuilder {
            offset: 0,
            segments: Vec::new(),
        };
        let [c1, c2] = arch.widths;
        let emb = arch.emb_width();
        let time1 = b.linear("time.fc1", arch.time_dim, arch.embed_dim, 1.0);
        let time2 = b.linear("time.fc2", arch.embed_dim, arch.embed_dim, 1.0);
        let stem = b.conv("stem", arch.io_channels() + POS_CHANNELS, c1, 1.0);
        let enc = (0..arch.blocks).map(|i| b.block(&format!("enc{i}"), c1, emb)).collect();
        let down = b.conv("down", c1, c2, 1.0);
        let mid = (0..arch.blocks).map(|i| b.block(&format!("mid{i}"), c2, emb)).collect();
        let fuse = b.conv("fuse", c1 + c2, c1, 1.0);
        let dec = (0..arch.blocks).map(|i| b.block(&format!("dec{i}"), c1, emb)).collect();
        let out = b.conv("out", c1, arch.io_channels(), 0.1);
        let skip = b.linear("skip", arch.embed_dim, 2 * CHANNELS, 0.1);
        Layout {
            time1,
            time2,
            stem,
            enc,
            down,
            mid,
            fuse,
            dec,
            out,
            skip,
            total: b.offset,
            segments: b.segments,
        }
    }
}

/// One training example for [`Denoiser::loss_and_grad`].
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub z: Image,
    pub t: f64,
    pub cond: CondVector,
    pub eps: Image,
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// Same layout as [`Denoiser::params`].
    pub grad: Vec<f64>,
    /// `dL/d cond` for each sample, in batch order.
    pub cond_grads: Vec<Vec<f64>>,
}

struct BlockCache {
    h: Tensor,
    u: Tensor,
    v: Tensor,
    film: Vec<f64>,
    cols1: Vec<f64>,
    cols2: Vec<f64>,
}

struct ForwardCache {
    temb: Vec<f64>,
    e1_pre: Vec<f64>,
    e1: Vec<f64>,
    emb_pre: Vec<f64>,
    emb: Vec<f64>,
    cols_stem: Vec<f64>,
    enc: Vec<BlockCache>,
    cols_down: Vec<f64>,
    mid: Vec<BlockCache>,
    cols_fuse: Vec<f64>,
    dec: Vec<BlockCache>,
    g: Tensor,
    cols_out: Vec<f64>,
    z: Vec<f64>,
    f: Vec<f64>,
    gains: Vec<f64>,
    emb_time: Vec<f64>,
}

/// Network parameters θ together with their architecture.
#[derive(Debug, Clone)]
pub struct Denoiser {
    arch: ArchConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for Denoiser {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl Denoiser {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let mut net = Denoiser::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segments = net.layout.segments.clone();
        for (_, range, fan_in, gain) in segments {
            if fan_in > 0 {
                nn::init_normal(&mut net.params[range], fan_in, gain, &mut rng);
            }
        }
        Ok(net)
    }

    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let params = vec![0.0; layout.total];
        Ok(Denoiser {
            arch,
            layout,
            params,
        })
    }

    pub fn from_params(arch: ArchConfig, params: Vec<f64>) -> Result<Self> {
        let mut net = Denoiser::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(Error::shape(
                format!("{} parameters", net.params.len()),
                format!("{}", params.len()),
            ));
        }
        net.params = params;
        Ok(net)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(name, offset range)` of every parameter tensor.
    pub fn segments(&self) -> impl Iterator<Item = (&str, Range<usize>)> {
        self.layout.segments.iter().map(|(n, r, _, _)| (n.as_str(), r.clone()))
    }

    /// Index range of the output convolution's bias.
    pub fn output_bias_range(&self) -> Range<usize> {
        self.layout.out.b.clone()
    }

    fn check_inputs(&self, z: &Image, t: f64, cond: &CondVector) -> Result<()> {
        let r = self.arch.resolution;
        if z.shape() != (r, r) {
            return Err(Error::shape(format!("{r}x{r}x3"), format!("{}x{}x3", z.height(), z.width())));
        }
        if cond.dim() != self.arch.cond_dim {
            return Err(Error::shape(format!("cond dim {}", self.arch.cond_dim), cond.dim()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} is outside [0, 1]")));
        }
        if !z.is_finite() || !cond.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite denoiser input".into()));
        }
        Ok(())
    }

    /// ε̂ for a single latent.
    pub fn predict_eps(&self, z: &Image, t: f64, cond: &CondVector) -> Result<Image> {
        Ok(self.predict_batch(&[(z, t, cond)])?.pop().expect("one output"))
    }

    /// ε̂ for several `(z, t, cond)` triples in one pass.
    pub fn predict_batch(&self, inputs: &[(&Image, f64, &CondVector)]) -> Result<Vec<Image>> {
        for (z, t, c) in inputs {
            self.check_inputs(z, *t, c)?;
        }
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let (zs, ts, conds): (Vec<_>, Vec<_>, Vec<_>) = split3(inputs);
        let (out, _) = self.forward(&zs, &ts, &conds);
        let r = self.arch.resolution;
        Ok((0..out.n)
            .map(|i| Image::from_vec(r, r, out.sample(i).to_vec()).expect("output shape"))
            .collect())
    }

    /// Batch-mean denoising loss and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[TrainSample]) -> Result<LossGrad> {
        if batch.is_empty() {
            return Err(Error::Argument("loss_and_grad needs a non-empty batch".into()));
        }
        for s in batch {
            self.check_inputs(&s.z, s.t, &s.cond)?;
            s.z.ensure_same_shape(&s.eps)?;
        }
        let zs: Vec<&Image> = batch.iter().map(|s| &s.z).collect();
        let ts: Vec<f64> = batch.iter().map(|s| s.t).collect();
        let conds: Vec<&CondVector> = batch.iter().map(|s| &s.cond).collect();
        let (out, cache) = self.forward(&zs, &ts, &conds);

        let per_sample = out.len() / batch.len();
        let denom = out.len() as f64;
        let mut loss = 0.0;
        let mut dout = out.like();
        for (i, s) in batch.iter().enumerate() {
            let pred = out.sample(i);
            let d = dout.sample_mut(i);
            for j in 0..per_sample {
                let diff = pred[j] - s.eps.as_slice()[j];
                loss += diff * diff;
                d[j] = 2.0 * diff / denom;
            }
        }
        loss /= denom;
        let mut grad = vec![0.0; self.params.len()];
        let cond_grads = self.backward(&dout, &cache, &mut grad);
        Ok(LossGrad {
            loss,
            grad,
            cond_grads,
        })
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn time_features(&self, ts: &[f64]) -> Vec<f64> {
        let half = self.arch.time_dim / 2;
        let mut out = Vec::with_capacity(ts.len() * self.arch.time_dim);
        for &t in ts {
            let scaled = 1000.0 * t;
            let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
            let args: Vec<f64> = freqs.map(|f| scaled * f).collect();
            out.extend(args.iter().map(|a| a.sin()));
            out.extend(args.iter().map(|a| a.cos()));
        }
        out
    }

    fn forward(&self, zs: &[&Image], ts: &[f64], conds: &[&CondVector]) -> (Tensor, ForwardCache) {
        let a = &self.arch;
        let l = &self.layout;
        let n = zs.len();
        let r = a.resolution;

        let temb = self.time_features(ts);
        let e1_pre = nn::linear(&temb, n, self.p(&l.time1.w), self.p(&l.time1.b));
        let e1 = nn::silu_vec(&e1_pre);
        let e2 = nn::linear(&e1, n, self.p(&l.time2.w), self.p(&l.time2.b));
        let mut emb_pre = Vec::with_capacity(n * a.emb_width());
        for i in 0..n {
            emb_pre.extend_from_slice(&e2[i * a.embed_dim..(i + 1) * a.embed_dim]);
            emb_pre.extend_from_slice(conds[i].as_slice());
        }
        let emb = nn::silu_vec(&emb_pre);

        let mut data = Vec::with_capacity(n * r * r * CHANNELS);
        for z in zs {
            data.extend_from_slice(z.as_slice());
        }
        let x = nn::space_to_depth(&Tensor::from_vec(n, r, r, CHANNELS, data.clone()), a.patch);
        let x = nn::concat_channels(&x, &position_features(n, a.inner_res()));
        let (mut h, cols_stem) = nn::conv3x3(&x, self.p(&l.stem.w), self.p(&l.stem.b));
        let mut enc = Vec::with_capacity(a.blocks);
        for b in &l.enc {
            let (next, c) = self.block_forward(b, h, &emb);
            enc.push(c);
            h = next;
        }
        let skip = h;
        let pooled = nn::avgpool2(&skip);
        let (mut m, cols_down) = nn::conv3x3(&pooled, self.p(&l.down.w), self.p(&l.down.b));
        let mut mid = Vec::with_capacity(a.blocks);
        for b in &l.mid {
            let (next, c) = self.block_forward(b, m, &emb);
            mid.push(c);
            m = next;
        }
        let cat = nn::concat_channels(&skip, &nn::upsample2(&m));
        let (mut g, cols_fuse) = nn::conv3x3(&cat, self.p(&l.fuse.w), self.p(&l.fuse.b));
        let mut dec = Vec::with_capacity(a.blocks);
        for b in &l.dec {
            let (next, c) = self.block_forward(b, g, &emb);
            dec.push(c);
            g = next;
        }
        let gs = nn::silu_tensor(&g);
        let (o, cols_out) = nn::conv3x3(&gs, self.p(&l.out.w), self.p(&l.out.b));
        let f = nn::depth_to_space(&o, a.patch);
        let emb_time: Vec<f64> = emb.chunks_exact(a.emb_width()).flat_map(|row| &row[..a.embed_dim]).copied().collect();
        let gains = nn::linear(&emb_time, n, self.p(&l.skip.w), self.p(&l.skip.b));
        let per = r * r * CHANNELS;
        let mut y = f.like();
        for (idx, yv) in y.data.iter_mut().enumerate() {
            let k = idx / per * 2 * CHANNELS + idx % CHANNELS;
            *yv = gains[k] * data[idx] + (1.0 + gains[k + CHANNELS]) * f.data[idx];
        }
        (
            y,
            ForwardCache {
                temb,
                e1_pre,
                e1,
                emb_pre,
                emb,
                cols_stem,
                enc,
                cols_down,
                mid,
                cols_fuse,
                dec,
                g,
                cols_out,
                z: data,
                f: f.data,
                gains,
                emb_time,
            },
        )
    }

    fn block_forward(&self, b: &BlockIdx, h: Tensor, emb: &[f64]) -> (Tensor, BlockCache) {
        let c = b.channels;
        let n = h.n;
        let a = nn::silu_tensor(&h);
        let (u, cols1) = nn::conv3x3(&a, self.p(&b.conv1.w), self.p(&b.conv1.b));
        let film = nn::linear(emb, n, self.p(&b.film.w), self.p(&b.film.b));
        let mut v = u.clone();
        let hw = h.h * h.w;
        for i in 0..n {
            let (scale, shift) = film[i * 2 * c..(i + 1) * 2 * c].split_at(c);
            for px in v.data[i * hw * c..(i + 1) * hw * c].chunks_exact_mut(c) {
                for ch in 0..c {
                    px[ch] = px[ch] * (1.0 + scale[ch]) + shift[ch];
                }
            }
        }
        let s = nn::silu_tensor(&v);
        let (o, cols2) = nn::conv3x3(&s, self.p(&b.conv2.w), self.p(&b.conv2.b));
        let mut out = o;
        for (y, x) in out.data.iter_mut().zip(&h.data) {
            *y += x;
        }
        (
            out,
            BlockCache {
                h,
                u,
                v,
                film,
                cols1,
                cols2,
            },
        )
    }

    /// Returns `dL/dh`; accumulates parameter grads and `dL/demb`.
    fn block_backward(
        &self,
        b: &BlockIdx,
        dout: Tensor,
        cache: &BlockCache,
        emb: &[f64],
        grad: &mut [f64],
        demb: &mut [f64],
    ) -> Tensor {
        let c = b.channels;
        let n = dout.n;
        let hw = dout.h * dout.w;
        let mut ds = {
            let (gw, gb) = split_grads(grad, &b.conv2.w, &b.conv2.b);
            nn::conv3x3_backward(&dout, &cache.cols2, self.p(&b.conv2.w), gw, gb, c, true).expect("dx")
        };
        nn::silu_backward(&mut ds.data, &cache.v.data);
        let dv = ds;
        let mut dfilm = vec![0.0; n * 2 * c];
        let mut du = dv.clone();
        for i in 0..n {
            let scale = &cache.film[i * 2 * c..i * 2 * c + c];
            let (dscale, dshift) = dfilm[i * 2 * c..(i + 1) * 2 * c].split_at_mut(c);
            let range = i * hw * c..(i + 1) * hw * c;
            for ((dupx, dvpx), upx) in du.data[range.clone()]
                .chunks_exact_mut(c)
                .zip(dv.data[range.clone()].chunks_exact(c))
                .zip(cache.u.data[range].chunks_exact(c))
            {
                for ch in 0..c {
                    dupx[ch] = dvpx[ch] * (1.0 + scale[ch]);
                    dscale[ch] += dvpx[ch] * upx[ch];
                    dshift[ch] += dvpx[ch];
                }
            }
        }
        {
            let (gw, gb) = split_grads(grad, &b.film.w, &b.film.b);
            let d = nn::linear_backward(&dfilm, emb, n, self.p(&b.film.w), gw, gb);
            for (acc, v) in demb.iter_mut().zip(d) {
                *acc += v;
            }
        }
        let mut da = {
            let (gw, gb) = split_grads(grad, &b.conv1.w, &b.conv1.b);
            nn::conv3x3_backward(&du, &cache.cols1, self.p(&b.conv1.w), gw, gb, c, true).expect("dx")
        };
        nn::silu_backward(&mut da.data, &cache.h.data);
        let mut dh = dout;
        for (d, v) in dh.data.iter_mut().zip(&da.data) {
            *d += v;
        }
        dh
    }

    fn backward(&self, dy: &Tensor, cache: &ForwardCache, grad: &mut [f64]) -> Vec<Vec<f64>> {
        let a = &self.arch;
        let l = &self.layout;
        let n = dy.n;
        let emb = &cache.emb;
        let mut demb = vec![0.0; emb.len()];
        let per = dy.len() / n;
        let mut df = dy.like();
        {
            let mut dgain = vec![0.0; n * 2 * CHANNELS];
            for (idx, &d) in dy.data.iter().enumerate() {
                let k = idx / per * 2 * CHANNELS + idx % CHANNELS;
                dgain[k] += d * cache.z[idx];
                dgain[k + CHANNELS] += d * cache.f[idx];
                df.data[idx] = d * (1.0 + cache.gains[k + CHANNELS]);
            }
            let (gw, gb) = split_grads(grad, &l.skip.w, &l.skip.b);
            let de = nn::linear_backward(&dgain, &cache.emb_time, n, self.p(&l.skip.w), gw, gb);
            for i in 0..n {
                for k in 0..a.embed_dim {
                    demb[i * a.emb_width() + k] += de[i * a.embed_dim + k];
                }
            }
        }

        let d_o = nn::space_to_depth(&df, a.patch);
        let mut dg = {
            let (gw, gb) = split_grads(grad, &l.out.w, &l.out.b);
            nn::conv3x3_backward(&d_o, &cache.cols_out, self.p(&l.out.w), gw, gb, l.out.cin, true).expect("dx")
        };
        nn::silu_backward(&mut dg.data, &cache.g.data);
        for (b, c) in l.dec.iter().zip(&cache.dec).rev() {
            dg = self.block_backward(b, dg, c, emb, grad, &mut demb);
        }
        let dcat = {
            let (gw, gb) = split_grads(grad, &l.fuse.w, &l.fuse.b);
            nn::conv3x3_backward(&dg, &cache.cols_fuse, self.p(&l.fuse.w), gw, gb, l.fuse.cin, true).expect("dx")
        };
        let (mut dskip, dup) = nn::split_channels(&dcat, a.widths[0]);
        let mut dm = nn::upsample2_backward(&dup);
        for (b, c) in l.mid.iter().zip(&cache.mid).rev() {
            dm = self.block_backward(b, dm, c, emb, grad, &mut demb);
        }
        let dpool = {
            let (gw, gb) = split_grads(grad, &l.down.w, &l.down.b);
            nn::conv3x3_backward(&dm, &cache.cols_down, self.p(&l.down.w), gw, gb, l.down.cin, true).expect("dx")
        };
        for (d, v) in dskip.data.iter_mut().zip(nn::avgpool2_backward(&dpool).data) {
            *d += v;
        }
        let mut dh = dskip;
        for (b, c) in l.enc.iter().zip(&cache.enc).rev() {
            dh = self.block_backward(b, dh, c, emb, grad, &mut demb);
        }
        {
            let (gw, gb) = split_grads(grad, &l.stem.w, &l.stem.b);
            nn::conv3x3_backward(&dh, &cache.cols_stem, self.p(&l.stem.w), gw, gb, l.stem.cin, false);
        }

        nn::silu_backward(&mut demb, &cache.emb_pre);
        let ew = a.emb_width();
        let mut de2 = Vec::with_capacity(n * a.embed_dim);
        let mut cond_grads = Vec::with_capacity(n);
        for i in 0..n {
            let row = &demb[i * ew..(i + 1) * ew];
            de2.extend_from_slice(&row[..a.embed_dim]);
            cond_grads.push(row[a.embed_dim..].to_vec());
        }
        let mut de1 = {
            let (gw, gb) = split_grads(grad, &l.time2.w, &l.time2.b);
            nn::linear_backward(&de2, &cache.e1, n, self.p(&l.time2.w), gw, gb)
        };
        nn::silu_backward(&mut de1, &cache.e1_pre);
        {
            let (gw, gb) = split_grads(grad, &l.time1.w, &l.time1.b);
            nn::linear_backward(&de1, &cache.temb, n, self.p(&l.time1.w), gw, gb);
        }
        cond_grads
    }
}

/// Fixed coordinate channels appended to the stem input: `x`, `y` and
/// `sin`/`cos` of both at two frequencies.
pub const POS_CHANNELS: usize = 10;

fn position_features(n: usize, res: usize) -> Tensor {
    use std::f64::consts::PI;
    let mut data = Vec::with_capacity(n * res * res * POS_CHANNELS);
    let coord = |i: usize| (2 * i + 1) as f64 / res as f64 - 1.0;
    for _ in 0..n {
        for y in 0..res {
            for x in 0..res {
                let (u, v) = (coord(x), coord(y));
                data.extend_from_slice(&[u, v]);
                for f in [PI, 2.0 * PI] {
                    data.extend_from_slice(&[(f * u).sin(), (f * u).cos(), (f * v).sin(), (f * v).cos()]);
                }
            }
        }
    }
    Tensor::from_vec(n, res, res, POS_CHANNELS, data)
}

/// Disjoint mutable views of a weight and its bias (bias follows weight).
fn split_grads<'a>(grad: &'a mut [f64], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (head, tail) = grad[w.start..b.end].split_at_mut(w.len());
    (head, tail)
}

fn split3<'a>(
    inputs: &[(&'a Image, f64, &'a CondVector)],
) -> (Vec<&'a Image>, Vec<f64>, Vec<&'a CondVector>) {
    let mut zs = Vec::with_capacity(inputs.len());
    let mut ts = Vec::with_capacity(inputs.len());
    let mut cs = Vec::with_capacity(inputs.len());
    for &(z, t, c) in inputs {
        zs.push(z);
        ts.push(t);
        cs.push(c);
    }
    (zs, ts, cs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Small configuration (under 2k parameters) for exhaustive gradient checks.
    pub(crate) fn tiny_arch() -> ArchConfig {
        ArchConfig {
            resolution: 8,
            patch: 2,
            widths: [2, 4],
            blocks: 1,
            time_dim: 4,
            embed_dim: 4,
            cond_dim: 3,
        }
    }

    fn cond(dim: usize, rng: &mut impl Rng) -> CondVector {
        CondVector((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn batch(net: &Denoiser, n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = rng_stream(seed, 0);
        let r = net.arch().resolution;
        (0..n)
            .map(|_| TrainSample {
                z: Image::randn(r, r, &mut rng),
                t: rng.random_range(0.0..1.0),
                cond: cond(net.arch().cond_dim, &mut rng),
                eps: Image::randn(r, r, &mut rng),
            })
            .collect()
    }

    #[test]
    fn tiny_arch_fits_gradient_check_budget() {
        let net = Denoiser::zeros(tiny_arch()).unwrap();
        assert!((800..=2000).contains(&net.num_params()), "{}", net.num_params());
    }

    #[test]
    fn predictions_are_deterministic_and_shaped() {
        let net = Denoiser::new(tiny_arch(), 3).unwrap();
        let mut rng = rng_stream(4, 0);
        let z = Image::randn(8, 8, &mut rng);
        let c = cond(3, &mut rng);
        let a = net.predict_eps(&z, 0.3, &c).unwrap();
        let b = net.predict_eps(&z, 0.3, &c).unwrap();
        assert_eq!(a.shape(), (8, 8));
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.is_finite());
    }

    #[test]
    fn bias_only_network_is_constant() {
        let mut net = Denoiser::zeros(tiny_arch()).unwrap();
        let bias = [0.25, -0.5, 0.75];
        let range = net.output_bias_range();
        for (i, v) in net.params_mut()[range].iter_mut().enumerate() {
            *v = bias[i % 3];
        }
        let mut rng = rng_stream(5, 0);
        let z = Image::randn(8, 8, &mut rng);
        let out = net.predict_eps(&z, 0.7, &cond(3, &mut rng)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.pixel(y, x), bias);
            }
        }
    }

    #[test]
    fn input_errors() {
        let net = Denoiser::new(tiny_arch(), 0).unwrap();
        let c = CondVector(vec![0.0; 3]);
        assert!(matches!(net.predict_eps(&Image::zeros(4, 4), 0.5, &c), Err(Error::Shape { .. })));
        let nan = Image::filled(8, 8, f64::NAN);
        assert!(matches!(net.predict_eps(&nan, 0.5, &c), Err(Error::Numeric(_))));
        assert!(matches!(net.loss_and_grad(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_network_with_zero_targets_has_zero_loss_and_grad() {
        let net = Denoiser::zeros(tiny_arch()).unwrap();
        let mut b = batch(&net, 3, 6);
        for s in &mut b {
            s.eps = Image::zeros(8, 8);
        }
        let lg = net.loss_and_grad(&b).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad.iter().all(|&g| g == 0.0));
        assert!(lg.cond_grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_is_quadratic_in_the_error() {
        let net = Denoiser::new(tiny_arch(), 8).unwrap();
        let b = batch(&net, 2, 9);
        let preds: Vec<Image> = b.iter().map(|s| net.predict_eps(&s.z, s.t, &s.cond).unwrap()).collect();
        let base = net.loss_and_grad(&b).unwrap().loss;
        // Move every target so that each error doubles.
        let scaled: Vec<TrainSample> = b
            .iter()
            .zip(&preds)
            .map(|(s, p)| {
                let eps = Image::from_vec(
                    8,
                    8,
                    p.as_slice().iter().zip(s.eps.as_slice()).map(|(p, e)| p - 2.0 * (p - e)).collect(),
                )
                .unwrap();
                TrainSample { eps, ..s.clone() }
            })
            .collect();
        let doubled = net.loss_and_grad(&scaled).unwrap().loss;
        assert!((doubled / base - 4.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let net = Denoiser::new(tiny_arch(), 10).unwrap();
        let b = batch(&net, 2, 11);
        let analytic = net.loss_and_grad(&b).unwrap();
        let mut rng = rng_stream(12, 0);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let i = rng.random_range(0..net.num_params());
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (plus.loss_and_grad(&b).unwrap().loss - minus.loss_and_grad(&b).unwrap().loss) / (2.0 * h);
            let g = analytic.grad[i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn cond_gradient_matches_central_differences() {
        let net = Denoiser::new(tiny_arch(), 13).unwrap();
        let b = batch(&net, 2, 14);
        let analytic = net.loss_and_grad(&b).unwrap();
        let h = 1e-5;
        for s in 0..2 {
            for d in 0..3 {
                let mut plus = b.clone();
                plus[s].cond.0[d] += h;
                let mut minus = b.clone();
                minus[s].cond.0[d] -= h;
                let fd = (net.loss_and_grad(&plus).unwrap().loss - net.loss_and_grad(&minus).unwrap().loss) / (2.0 * h);
                let g = analytic.cond_grads[s][d];
                assert!((g - fd).abs() <= 1e-6 * g.abs().max(1e-3), "{g} vs {fd}");
            }
        }
    }

    #[test]
    fn output_moves_smoothly_with_condition() {
        let net = Denoiser::new(ArchConfig::default(), 15).unwrap();
        let mut rng = rng_stream(16, 0);
        let z = Image::randn(32, 32, &mut rng);
        let c = cond(64, &mut rng);
        let dir = cond(64, &mut rng);
        let base = net.predict_eps(&z, 0.5, &c).unwrap();
        let mut changes = Vec::new();
        for scale in [1e-3, 1e-2, 1e-1] {
            let moved = CondVector(c.0.iter().zip(&dir.0).map(|(a, b)| a + scale * b).collect());
            let out = net.predict_eps(&z, 0.5, &moved).unwrap();
            changes.push(out.mse(&base).unwrap().sqrt());
        }
        assert!(changes[0] < changes[1] && changes[1] < changes[2], "{changes:?}");
        assert!(changes[0] < 1e-2);
    }
}
