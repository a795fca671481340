//! Hierarchical shifted-window transformer over log-mel patches.
//!
//! Tokens are kept as `[B, H * W, C]` with `H` along mel bands and `W` along
//! frames. Window partitioning, cyclic shifts and patch merging are gathers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{average_channels, MelTensor};
use crate::nn::layers::{index_map, init_attention, layer_norm, linear, window_attention};
use crate::nn::params::trunc_normal;
use crate::nn::{Bindings, Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng::Rng;

/// How multi-microphone log-mels enter the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioFusionMode {
    /// One channel (the first, if several are given).
    Single,
    /// Channel mean of the log-mels.
    AvgMel,
    /// Shared patch embedding per channel, summed.
    SumPe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioEncoderConfig {
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub patch_size: usize,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub mel_bands: usize,
    pub frames: usize,
    pub fusion_mode: AudioFusionMode,
    pub channels: usize,
    /// Log-mel standardization applied by [`prepare_input`]; see
    /// [`fit_input_norm`].
    pub input_mean: f32,
    pub input_std: f32,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            patch_size: 4,
            window_size: 8,
            mlp_ratio: 4,
            mel_bands: 64,
            frames: 256,
            fusion_mode: AudioFusionMode::Single,
            channels: 1,
            input_mean: 0.0,
            input_std: 1.0,
        }
    }
}

impl AudioEncoderConfig {
    pub fn toy() -> Self {
        Self {
            embed_dim: 24,
            heads: vec![1, 2, 4, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { key: "audio".into(), msg });
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad("depths and heads must be non-empty and of equal length".into());
        }
        if self.embed_dim == 0 || self.patch_size == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return bad("sizes must be positive".into());
        }
        if self.mel_bands == 0 || self.frames == 0 || self.channels == 0 {
            return bad("mel_bands, frames and channels must be positive".into());
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite() && self.input_mean.is_finite()) {
            return bad("input_std must be positive and finite".into());
        }
        for (s, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.stage_dim(s) % h != 0 {
                return bad(format!("stage {s} width {} is not divisible by {h} heads", self.stage_dim(s)));
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Embedding length, `D * 2^(groups - 1)`.
    pub fn output_dim(&self) -> usize {
        self.stage_dim(self.groups() - 1)
    }

    /// Both mel axes are padded to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        self.patch_size << (self.groups() - 1)
    }

    pub fn padded_bands(&self) -> usize {
        self.mel_bands.div_ceil(self.pad_multiple()) * self.pad_multiple()
    }

    pub fn padded_frames(&self) -> usize {
        self.frames.div_ceil(self.pad_multiple()) * self.pad_multiple()
    }

    /// Token grid `(H, W)` at each stage.
    pub fn stage_grids(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.padded_bands() / self.patch_size, self.padded_frames() / self.patch_size);
        (0..self.groups()).map(|s| (h >> s, w >> s)).collect()
    }

    /// Channels the prepared input tensor carries.
    pub fn input_channels(&self) -> usize {
        match self.fusion_mode {
            AudioFusionMode::SumPe => self.channels,
            _ => 1,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Window extent along an axis of `dim` tokens: the configured window, shrunk
/// to the axis length, or to a divisor of it when it does not tile.
pub fn effective_window(dim: usize, window: usize) -> usize {
    let w = window.min(dim);
    if dim % w == 0 {
        w
    } else {
        gcd(dim, w)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Turns a log-mel tensor into the encoder input `[C, F_pad, T_pad]`: channel
/// handling per fusion mode, frames cropped or reflect-extended to the
/// configured count, both axes reflect-padded to the tiling multiple, then
/// standardized with `input_mean` and `input_std`.
pub fn prepare_input(mel: &MelTensor, cfg: &AudioEncoderConfig) -> Result<Tensor> {
    if mel.mel_bands != cfg.mel_bands {
        return Err(Error::shape("audio input bands", &[mel.mel_bands], &[cfg.mel_bands]));
    }
    let mel = match cfg.fusion_mode {
        AudioFusionMode::Single => mel.select_channel(0)?,
        AudioFusionMode::AvgMel => average_channels(mel),
        // Weights are shared across channels, so any count is accepted.
        AudioFusionMode::SumPe => mel.clone(),
    };
    let (fp, tp) = (cfg.padded_bands(), cfg.padded_frames());
    let mut data = Vec::with_capacity(mel.channels * fp * tp);
    for c in 0..mel.channels {
        for f in 0..fp {
            let src_f = reflect(f as isize, mel.mel_bands);
            for t in 0..tp {
                // Fit to the configured length first, then pad.
                let fitted = reflect(t as isize, cfg.frames);
                let src_t = reflect(fitted as isize, mel.frames);
                data.push((mel.at(c, src_f, src_t) - cfg.input_mean) / cfg.input_std);
            }
        }
    }
    Tensor::new(vec![mel.channels, fp, tp], data)
}

/// Mean and standard deviation of every log-mel value in `mels`.
pub fn fit_input_norm<'a>(mels: impl IntoIterator<Item = &'a MelTensor>) -> Result<(f32, f32)> {
    let (mut n, mut sum, mut sq) = (0usize, 0f64, 0f64);
    for m in mels {
        for &v in &m.data {
            n += 1;
            sum += v as f64;
            sq += (v as f64).powi(2);
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no log-mel values to fit normalization".into()));
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt().max(1e-6);
    Ok((mean as f32, std as f32))
}

/// Creates `audio.*` parameters.
pub fn init_audio_params(store: &mut ParamStore, rng: &mut Rng, cfg: &AudioEncoderConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    store.init_conv(rng, "audio.patch", &[d, 1, 1, p, p], true);
    let (h, w) = cfg.stage_grids()[0];
    store.insert("audio.pos", trunc_normal(rng, &[h * w, d], 0.02));
    for (s, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
        let c = cfg.stage_dim(s);
        let (gh, gw) = cfg.stage_grids()[s];
        let (wh, ww) = (effective_window(gh, cfg.window_size), effective_window(gw, cfg.window_size));
        for b in 0..depth {
            let name = format!("audio.s{s}.b{b}");
            store.init_layer_norm(&format!("{name}.ln1"), c);
            init_attention(store, rng, &format!("{name}.attn"), c);
            store.insert(format!("{name}.rpb"), trunc_normal(rng, &[(2 * wh - 1) * (2 * ww - 1), heads], 0.02));
            store.init_layer_norm(&format!("{name}.ln2"), c);
            store.init_linear(rng, &format!("{name}.mlp.fc1"), c, c * cfg.mlp_ratio, true);
            store.init_linear(rng, &format!("{name}.mlp.fc2"), c * cfg.mlp_ratio, c, true);
        }
        if s + 1 < cfg.groups() {
            store.init_layer_norm(&format!("audio.s{s}.merge.ln"), 4 * c);
            store.init_linear(rng, &format!("audio.s{s}.merge.reduce"), 4 * c, 2 * c, false);
        }
    }
    store.init_layer_norm("audio.norm", cfg.output_dim());
    Ok(())
}

/// Graph outputs of one encoder pass.
#[derive(Debug, Clone)]
pub struct AudioEncoding {
    /// `[B, output_dim]`.
    pub embedding: Var,
    /// Tokens after each stage, `[B, H * W, C]`.
    pub stages: Vec<Var>,
}

/// Patch embedding before the positional term, `[B, H * W, D]`.
///
/// `x` is `[B, C, F_pad, T_pad]`. Each channel goes through the same
/// convolution and bias; channel outputs are summed.
pub fn patch_embed<T: Scalar>(g: &mut Graph<T>, p: &Bindings, cfg: &AudioEncoderConfig, x: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let channels_ok = xs.len() == 4 && (xs[1] == cfg.input_channels() || (cfg.fusion_mode == AudioFusionMode::SumPe && xs[1] > 0));
    if !channels_ok || xs[2] != cfg.padded_bands() || xs[3] != cfg.padded_frames() {
        return Err(Error::shape(
            "audio input",
            &xs,
            &[0, cfg.input_channels(), cfg.padded_bands(), cfg.padded_frames()],
        ));
    }
    let (b, c) = (xs[0], xs[1]);
    if b == 0 {
        return Err(Error::InvalidArgument("empty audio batch".into()));
    }
    let d = cfg.embed_dim;
    let (h, w) = cfg.stage_grids()[0];
    let ps = cfg.patch_size;
    let x = g.reshape(x, &[b * c, 1, 1, xs[2], xs[3]])?;
    let y = g.conv3d(x, p.get("audio.patch.weight")?, [1, ps, ps], [0, 0, 0])?;
    let y = g.add_axis_bias(y, p.get("audio.patch.bias")?, 1)?;
    let y = g.reshape(y, &[b, c, d * h * w])?;
    let y = if c == 1 {
        g.reshape(y, &[b, d * h * w])?
    } else {
        let m = g.mean_axis(y, 1)?;
        g.scale(m, c as f64)
    };
    let y = g.reshape(y, &[b, d, h * w])?;
    g.permute(y, &[0, 2, 1])
}

/// Runs the encoder on a prepared batch `[B, C, F_pad, T_pad]`.
pub fn encode_audio<T: Scalar>(g: &mut Graph<T>, p: &Bindings, cfg: &AudioEncoderConfig, x: Var) -> Result<AudioEncoding> {
    let b = g.shape(x)[0];
    let tokens = patch_embed(g, p, cfg, x)?;
    let mut x = g.add_bias(tokens, p.get("audio.pos")?)?;
    let grids = cfg.stage_grids();
    let mut stages = Vec::with_capacity(cfg.groups());
    for s in 0..cfg.groups() {
        let (h, w) = grids[s];
        let heads = cfg.heads[s];
        for blk in 0..cfg.depths[s] {
            let name = format!("audio.s{s}.b{blk}");
            let shifted = blk % 2 == 1;
            x = swin_block(g, p, &name, x, b, (h, w), cfg.window_size, heads, shifted)?;
            g.check_finite(x, &name)?;
        }
        stages.push(x);
        if s + 1 < cfg.groups() {
            x = patch_merge(g, p, &format!("audio.s{s}.merge"), x, b, (h, w))?;
        }
    }
    let x = layer_norm(g, p, "audio.norm", x)?;
    let embedding = g.mean_axis(x, 1)?;
    g.check_finite(embedding, "audio.norm")?;
    Ok(AudioEncoding { embedding, stages })
}

/// Window geometry for one block.
#[derive(Debug, Clone, Copy)]
struct WindowPlan {
    h: usize,
    w: usize,
    wh: usize,
    ww: usize,
    sh: usize,
    sw: usize,
}

impl WindowPlan {
    fn new((h, w): (usize, usize), window: usize, shifted: bool) -> Self {
        let (wh, ww) = (effective_window(h, window), effective_window(w, window));
        // Shift only along axes split into more than one window.
        let shift = |dim: usize, win: usize| if shifted && win < dim { win / 2 } else { 0 };
        Self {
            h,
            w,
            wh,
            ww,
            sh: shift(h, wh),
            sw: shift(w, ww),
        }
    }

    fn windows(&self) -> usize {
        (self.h / self.wh) * (self.w / self.ww)
    }

    fn tokens(&self) -> usize {
        self.wh * self.ww
    }

    /// Grid position of token `n` of window `win`, in the rolled frame.
    fn rolled_pos(&self, win: usize, n: usize) -> (usize, usize) {
        let per_row = self.w / self.ww;
        let (wi, wj) = (win / per_row, win % per_row);
        (wi * self.wh + n / self.ww, wj * self.ww + n % self.ww)
    }

    /// Flat token index in the original frame for a rolled position.
    fn source(&self, (i, j): (usize, usize)) -> usize {
        ((i + self.sh) % self.h) * self.w + (j + self.sw) % self.w
    }

    /// Gather index from `[B, H*W, C]` to `[B * nW, N, C]`.
    fn partition_index(&self, b: usize, c: usize) -> Arc<[u32]> {
        let (nw, n, hw) = (self.windows(), self.tokens(), self.h * self.w);
        index_map(b * nw * n * c, |i| {
            let ch = i % c;
            let tok = (i / c) % n;
            let win = (i / (c * n)) % nw;
            let bi = i / (c * n * nw);
            (bi * hw + self.source(self.rolled_pos(win, tok))) * c + ch
        })
    }

    /// Inverse of [`Self::partition_index`].
    fn merge_index(&self, b: usize, c: usize) -> Arc<[u32]> {
        let (nw, n, hw) = (self.windows(), self.tokens(), self.h * self.w);
        let mut inv = vec![0u32; b * hw * c];
        for win in 0..nw {
            for tok in 0..n {
                let src = self.source(self.rolled_pos(win, tok));
                for bi in 0..b {
                    for ch in 0..c {
                        inv[(bi * hw + src) * c + ch] = (((bi * nw + win) * n + tok) * c + ch) as u32;
                    }
                }
            }
        }
        inv.into()
    }

    /// Gather index from the bias table `[(2wh-1)(2ww-1), heads]` to `[heads, N, N]`.
    fn bias_index(&self, heads: usize) -> Arc<[u32]> {
        let n = self.tokens();
        let span = 2 * self.ww - 1;
        index_map(heads * n * n, |i| {
            let q = i % n;
            let pi = (i / n) % n;
            let head = i / (n * n);
            let (ph, pw) = (pi / self.ww, pi % self.ww);
            let (qh, qw) = (q / self.ww, q % self.ww);
            let rel = (ph + self.wh - 1 - qh) * span + (pw + self.ww - 1 - qw);
            rel * heads + head
        })
    }

    /// Additive mask `[B * nW, N, N]` keeping attention inside regions that
    /// were contiguous before the cyclic shift.
    fn mask<T: Scalar>(&self, b: usize) -> Option<Tensor<T>> {
        if self.sh == 0 && self.sw == 0 {
            return None;
        }
        let region = |x: usize, dim: usize, win: usize, shift: usize| -> usize {
            if shift == 0 || x < dim - win {
                0
            } else if x < dim - shift {
                1
            } else {
                2
            }
        };
        let (nw, n) = (self.windows(), self.tokens());
        let mut data = Vec::with_capacity(b * nw * n * n);
        let neg = T::from_f64(-100.0);
        for _ in 0..b {
            for win in 0..nw {
                let labels: Vec<usize> = (0..n)
                    .map(|t| {
                        let (i, j) = self.rolled_pos(win, t);
                        region(i, self.h, self.wh, self.sh) * 3 + region(j, self.w, self.ww, self.sw)
                    })
                    .collect();
                for p in 0..n {
                    for q in 0..n {
                        data.push(if labels[p] == labels[q] { T::zero() } else { neg });
                    }
                }
            }
        }
        Some(Tensor {
            shape: vec![b * nw, n, n],
            data,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn swin_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    name: &str,
    x: Var,
    b: usize,
    grid: (usize, usize),
    window: usize,
    heads: usize,
    shifted: bool,
) -> Result<Var> {
    let c = g.shape(x)[2];
    let plan = WindowPlan::new(grid, window, shifted);
    let (nw, n) = (plan.windows(), plan.tokens());
    let h = layer_norm(g, p, &format!("{name}.ln1"), x)?;
    let win = g.gather(h, plan.partition_index(b, c), &[b * nw, n, c])?;
    let bias = g.gather(p.get(&format!("{name}.rpb"))?, plan.bias_index(heads), &[heads, n, n])?;
    let mask = plan.mask::<T>(b);
    let att = window_attention(g, p, &format!("{name}.attn"), win, heads, Some(bias), mask.as_ref())?;
    let back = g.gather(att, plan.merge_index(b, c), &[b, grid.0 * grid.1, c])?;
    let x = g.add(x, back)?;
    let h = layer_norm(g, p, &format!("{name}.ln2"), x)?;
    let h = linear(g, p, &format!("{name}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{name}.mlp.fc2"), h)?;
    g.add(x, h)
}

/// 2x2 neighbourhood concatenation, layer norm and linear reduction to 2C.
fn patch_merge<T: Scalar>(g: &mut Graph<T>, p: &Bindings, name: &str, x: Var, b: usize, (h, w): (usize, usize)) -> Result<Var> {
    let c = g.shape(x)[2];
    let (h2, w2) = (h / 2, w / 2);
    // Concatenation order: (even, even), (odd, even), (even, odd), (odd, odd).
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let idx = index_map(b * h2 * w2 * 4 * c, |i| {
        let ch = i % c;
        let part = (i / c) % 4;
        let tok = (i / (4 * c)) % (h2 * w2);
        let bi = i / (4 * c * h2 * w2);
        let (di, dj) = OFFSETS[part];
        let (ti, tj) = (2 * (tok / w2) + di, 2 * (tok % w2) + dj);
        (bi * h * w + ti * w + tj) * c + ch
    });
    let y = g.gather(x, idx, &[b, h2 * w2, 4 * c])?;
    let y = layer_norm(g, p, &format!("{name}.ln"), y)?;
    linear(g, p, &format!("{name}.reduce"), y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn effective_windows() {
        assert_eq!(effective_window(16, 8), 8);
        assert_eq!(effective_window(2, 8), 2);
        assert_eq!(effective_window(12, 8), 4);
    }

    #[test]
    fn partition_and_merge_are_inverse() {
        for shifted in [false, true] {
            let plan = WindowPlan::new((8, 12), 4, shifted);
            let (b, c) = (2, 3);
            let part = plan.partition_index(b, c);
            let merge = plan.merge_index(b, c);
            // merge(partition(x)) == x
            for (i, &m) in merge.iter().enumerate() {
                assert_eq!(part[m as usize] as usize, i);
            }
        }
    }

    #[test]
    fn shifted_mask_blocks_wrapped_regions() {
        let plan = WindowPlan::new((8, 8), 4, true);
        assert_eq!((plan.sh, plan.sw), (2, 2));
        let mask = plan.mask::<f64>(1).unwrap();
        // Window 0 holds only unwrapped tokens.
        assert!(mask.data[..16 * 16].iter().all(|&v| v == 0.0));
        // The last window mixes four regions.
        let last = &mask.data[3 * 256..];
        assert_eq!(last.iter().filter(|&&v| v == 0.0).count(), 4 * 16);
        assert!(WindowPlan::new((8, 8), 8, true).mask::<f64>(1).is_none());
    }
}
