//! Frame sampling and clip-consistent augmentation, and the (2+1)D residual
//! video encoder.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::VideoClip;
use crate::error::{Error, Result};
use crate::nn::layers::{linear, LN_EPS};
use crate::nn::params::trunc_normal;
use crate::nn::{Bindings, Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoAugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub max_rotation_deg: f64,
    /// Random crop position in training; center crop otherwise.
    pub random_crop: bool,
}

impl Default for VideoAugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.3,
            vflip_prob: 0.3,
            max_rotation_deg: 30.0,
            random_crop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoEncoderConfig {
    pub frames_per_clip: usize,
    pub resize: usize,
    pub crop: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Spatial kernel of the stem.
    pub stem_kernel: usize,
    pub embed_dim: usize,
    pub augment: VideoAugmentConfig,
}

impl Default for VideoEncoderConfig {
    fn default() -> Self {
        Self {
            frames_per_clip: 8,
            resize: 224,
            crop: 180,
            widths: vec![64, 128, 256, 512],
            blocks: vec![2, 2, 2, 2],
            stem_kernel: 7,
            embed_dim: 768,
            augment: VideoAugmentConfig::default(),
        }
    }
}

impl VideoEncoderConfig {
    pub fn toy() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            embed_dim: 192,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { key: "video".into(), msg });
        if self.frames_per_clip == 0 {
            return bad("frames_per_clip must be positive".into());
        }
        if self.crop == 0 || self.crop > self.resize {
            return bad(format!("crop {} must be in 1..={}", self.crop, self.resize));
        }
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() || self.widths.contains(&0) {
            return bad("widths and blocks must be non-empty, positive and of equal length".into());
        }
        if self.blocks.contains(&0) || self.stem_kernel % 2 == 0 || self.embed_dim == 0 {
            return bad("blocks must be positive, stem_kernel odd and embed_dim positive".into());
        }
        Ok(())
    }
}

/// Intermediate width of a (2+1)D factorization with a `t x d x d` budget.
pub fn mid_channels(n_in: usize, n_out: usize, t: usize, d: usize) -> usize {
    (t * d * d * n_in * n_out) / (d * d * n_in + t * n_out)
}

/// Random choices for one clip, shared by all of its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub indices: Vec<usize>,
    pub crop_y: usize,
    pub crop_x: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
}

impl AugmentPlan {
    /// Evenly spaced frames and a center crop.
    pub fn eval(frame_count: usize, cfg: &VideoEncoderConfig) -> Self {
        let k = cfg.frames_per_clip;
        let indices = (0..k).map(|i| ((2 * i + 1) * frame_count) / (2 * k)).collect();
        let off = (cfg.resize - cfg.crop) / 2;
        Self {
            indices,
            crop_y: off,
            crop_x: off,
            hflip: false,
            vflip: false,
            angle_deg: 0.0,
        }
    }

    pub fn train(frame_count: usize, cfg: &VideoEncoderConfig, rng: &mut Rng) -> Self {
        let mut indices = sample(rng, frame_count, cfg.frames_per_clip).into_vec();
        indices.sort_unstable();
        let a = &cfg.augment;
        let span = cfg.resize - cfg.crop;
        let (crop_y, crop_x) = if a.random_crop {
            (rng.random_range(0..=span), rng.random_range(0..=span))
        } else {
            (span / 2, span / 2)
        };
        let hflip = rng.random_bool(a.hflip_prob.clamp(0.0, 1.0));
        let vflip = rng.random_bool(a.vflip_prob.clamp(0.0, 1.0));
        let angle_deg = if a.max_rotation_deg > 0.0 {
            rng.random_range(-a.max_rotation_deg..=a.max_rotation_deg)
        } else {
            0.0
        };
        Self {
            indices,
            crop_y,
            crop_x,
            hflip,
            vflip,
            angle_deg,
        }
    }
}

/// Samples frames and applies the clip's augmentation; output is
/// `[frames, 3, crop, crop]` with values in `[0, 1]`.
pub fn sample_and_augment(clip: &VideoClip, cfg: &VideoEncoderConfig, train: bool, seed: u64) -> Result<Tensor> {
    if clip.frame_count < cfg.frames_per_clip {
        return Err(Error::InvalidArgument(format!(
            "clip has {} frames, need {}",
            clip.frame_count, cfg.frames_per_clip
        )));
    }
    let plan = if train {
        AugmentPlan::train(clip.frame_count, cfg, &mut rng::rng(seed))
    } else {
        AugmentPlan::eval(clip.frame_count, cfg)
    };
    apply_plan(clip, cfg, &plan)
}

pub fn apply_plan(clip: &VideoClip, cfg: &VideoEncoderConfig, plan: &AugmentPlan) -> Result<Tensor> {
    let (r, c) = (cfg.resize, cfg.crop);
    if plan.crop_y + c > r || plan.crop_x + c > r || plan.indices.iter().any(|&i| i >= clip.frame_count) {
        return Err(Error::InvalidArgument("augmentation plan out of range".into()));
    }
    let mut out = Vec::with_capacity(plan.indices.len() * 3 * c * c);
    let mut resized = vec![0f32; 3 * r * r];
    let mut cropped = vec![0f32; 3 * c * c];
    for &fi in &plan.indices {
        resize_bilinear(clip, fi, r, &mut resized);
        for ch in 0..3 {
            for y in 0..c {
                for x in 0..c {
                    let sy = if plan.vflip { c - 1 - y } else { y };
                    let sx = if plan.hflip { c - 1 - x } else { x };
                    cropped[(ch * c + y) * c + x] = resized[(ch * r + plan.crop_y + sy) * r + plan.crop_x + sx];
                }
            }
        }
        if plan.angle_deg != 0.0 {
            let rotated = rotate(&cropped, c, plan.angle_deg);
            out.extend_from_slice(&rotated);
        } else {
            out.extend_from_slice(&cropped);
        }
    }
    Tensor::new(vec![plan.indices.len(), 3, c, c], out)
}

/// Bilinear resize (half-pixel centers) of one frame to `size x size`,
/// channel-major, scaled to `[0, 1]`.
fn resize_bilinear(clip: &VideoClip, frame: usize, size: usize, out: &mut [f32]) {
    let (h, w) = (clip.height, clip.width);
    let src = clip.frame(frame);
    let coord = |o: usize, n_in: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * n_in as f64 / size as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    for y in 0..size {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..size {
            let (x0, x1, fx) = coord(x, w);
            for ch in 0..3 {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * 3 + ch] as f32;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * size + y) * size + x] = (top * (1.0 - fy) + bot * fy) / 255.0;
            }
        }
    }
}

/// Rotates a channel-major square image about its center; outside is zero.
fn rotate(img: &[f32], n: usize, angle_deg: f64) -> Vec<f32> {
    let (s, co) = angle_deg.to_radians().sin_cos();
    let center = (n as f64 - 1.0) / 2.0;
    let mut out = vec![0f32; img.len()];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - center, y as f64 - center);
            // Inverse mapping from output to source.
            let sx = co * dx + s * dy + center;
            let sy = -s * dx + co * dy + center;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for ch in 0..3 {
                let at = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= n as f64 || xx >= n as f64 {
                        0.0
                    } else {
                        img[(ch * n + yy as usize) * n + xx as usize] as f64
                    }
                };
                let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + at(y0, x0 + 1.0) * fx * (1.0 - fy)
                    + at(y0 + 1.0, x0) * (1.0 - fx) * fy
                    + at(y0 + 1.0, x0 + 1.0) * fx * fy;
                out[(ch * n + y) * n + x] = v as f32;
            }
        }
    }
    out
}

/// `[frames, 3, H, W]` to the encoder layout `[3, frames, H, W]`.
pub fn to_channel_major(frames: &Tensor) -> Result<Tensor> {
    let [t, c, h, w] = frames.shape[..] else {
        return Err(Error::shape("video frames", &frames.shape, &[0, 3, 0, 0]));
    };
    let mut data = vec![0f32; frames.data.len()];
    for ti in 0..t {
        for ci in 0..c {
            let src = &frames.data[(ti * c + ci) * h * w..(ti * c + ci + 1) * h * w];
            data[(ci * t + ti) * h * w..(ci * t + ti + 1) * h * w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![c, t, h, w], data)
}

fn init_factorized(store: &mut ParamStore, rng: &mut Rng, name: &str, n_in: usize, n_out: usize, k: usize) {
    let m = mid_channels(n_in, n_out, 3, k).max(1);
    store.init_conv(rng, &format!("{name}.spatial"), &[m, n_in, 1, k, k], false);
    store.init_layer_norm(&format!("{name}.mid_norm"), m);
    store.init_conv(rng, &format!("{name}.temporal"), &[n_out, m, 3, 1, 1], false);
}

/// Creates `video.*` parameters.
pub fn init_video_params(store: &mut ParamStore, rng: &mut Rng, cfg: &VideoEncoderConfig) -> Result<()> {
    cfg.validate()?;
    init_factorized(store, rng, "video.stem.conv", 3, cfg.widths[0], cfg.stem_kernel);
    store.init_layer_norm("video.stem.norm", cfg.widths[0]);
    let mut n_in = cfg.widths[0];
    for (s, (&width, &blocks)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
        for b in 0..blocks {
            let name = format!("video.l{s}.b{b}");
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            init_factorized(store, rng, &format!("{name}.conv1"), n_in, width, 3);
            store.init_layer_norm(&format!("{name}.norm1"), width);
            init_factorized(store, rng, &format!("{name}.conv2"), width, width, 3);
            store.init_layer_norm(&format!("{name}.norm2"), width);
            if stride != 1 || n_in != width {
                store.init_conv(rng, &format!("{name}.down"), &[width, n_in, 1, 1, 1], false);
                store.init_layer_norm(&format!("{name}.down_norm"), width);
            }
            n_in = width;
        }
    }
    store.insert("video.proj.weight", trunc_normal(rng, &[n_in, cfg.embed_dim], (1.0 / n_in as f64).sqrt()));
    store.insert("video.proj.bias", Tensor::zeros(&[cfg.embed_dim]));
    Ok(())
}

/// Spatial `1 x k x k` conv, channel norm, ReLU, temporal `3 x 1 x 1` conv.
pub fn factorized_conv<T: Scalar>(g: &mut Graph<T>, p: &Bindings, name: &str, x: Var, stride: usize, k: usize, spatial_stride: usize) -> Result<Var> {
    let pad = k / 2;
    let y = g.conv3d(x, p.get(&format!("{name}.spatial.weight"))?, [1, spatial_stride, spatial_stride], [0, pad, pad])?;
    let y = norm(g, p, &format!("{name}.mid_norm"), y)?;
    let y = g.relu(y);
    g.conv3d(y, p.get(&format!("{name}.temporal.weight"))?, [stride, 1, 1], [1, 0, 0])
}

/// Layer norm of each clip over `(C, T, H, W)` with a per-channel affine.
fn norm<T: Scalar>(g: &mut Graph<T>, p: &Bindings, name: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    g.layer_norm_sample(x, gamma, beta, LN_EPS)
}

/// Residual block of two (2+1)D convolutions.
pub fn r2plus1d_block<T: Scalar>(g: &mut Graph<T>, p: &Bindings, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = factorized_conv(g, p, &format!("{name}.conv1"), x, stride, 3, stride)?;
    let y = norm(g, p, &format!("{name}.norm1"), y)?;
    let y = g.relu(y);
    let y = factorized_conv(g, p, &format!("{name}.conv2"), y, 1, 3, 1)?;
    let y = norm(g, p, &format!("{name}.norm2"), y)?;
    let shortcut = match p.get(&format!("{name}.down.weight")) {
        Ok(w) => {
            let s = g.conv3d(x, w, [stride, stride, stride], [0, 0, 0])?;
            norm(g, p, &format!("{name}.down_norm"), s)?
        }
        Err(_) => x,
    };
    let y = g.add(y, shortcut)?;
    Ok(g.relu(y))
}

/// Encodes `[B, 3, T, H, W]` clips to `[B, embed_dim]`.
pub fn encode_video<T: Scalar>(g: &mut Graph<T>, p: &Bindings, cfg: &VideoEncoderConfig, x: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 5 || xs[1] != 3 || xs[0] == 0 {
        return Err(Error::shape("video input", &xs, &[0, 3, cfg.frames_per_clip, cfg.crop, cfg.crop]));
    }
    let b = xs[0];
    let y = factorized_conv(g, p, "video.stem.conv", x, 1, cfg.stem_kernel, 2)?;
    let y = norm(g, p, "video.stem.norm", y)?;
    let mut y = g.relu(y);
    g.check_finite(y, "video.stem")?;
    for (s, &blocks) in cfg.blocks.iter().enumerate() {
        for blk in 0..blocks {
            let stride = if blk == 0 && s > 0 { 2 } else { 1 };
            y = r2plus1d_block(g, p, &format!("video.l{s}.b{blk}"), y, stride)?;
        }
        g.check_finite(y, &format!("video.l{s}"))?;
    }
    let ys = g.shape(y).to_vec();
    let y = g.reshape(y, &[b, ys[1], ys[2] * ys[3] * ys[4]])?;
    let pooled = g.mean_axis(y, 2)?;
    let out = linear(g, p, "video.proj", pooled)?;
    g.check_finite(out, "video.proj")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mid_channel_rule() {
        assert_eq!(mid_channels(64, 64, 3, 3), 144);
    }

    #[test]
    fn eval_indices_are_spread_and_sorted() {
        let cfg = VideoEncoderConfig::default();
        let plan = AugmentPlan::eval(10, &cfg);
        assert_eq!(plan.indices.len(), 8);
        assert!(plan.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(*plan.indices.last().unwrap() < 10);
        assert_eq!((plan.crop_y, plan.crop_x), (22, 22));
    }
}
