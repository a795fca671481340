use approx::assert_abs_diff_eq;
use mer_core::audio_encoder::{encode_audio, init_audio_params, patch_embed, prepare_input, AudioEncoderConfig, AudioFusionMode};
use mer_core::corpus::VideoClip;
use mer_core::frontend::MelTensor;
use mer_core::fusion::{argmax, classify, fuse, fuse_vectors, init_head_params, split_fused, FusionConfig, HeadMode};
use mer_core::model::{forward, ModelConfig, ModelInput};
use mer_core::nn::{grad_check, Bindings, GradCheckOptions, Graph, ParamStore, Tensor, Var};
use mer_core::rng::rng;
use mer_core::video::{
    apply_plan, encode_video, init_video_params, mid_channels, sample_and_augment, to_channel_major, AugmentPlan, VideoAugmentConfig,
    VideoEncoderConfig,
};
use rand::Rng as _;

fn rand_f64(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Gradient check over the input and every parameter of a model piece.
fn check_end_to_end(store: &ParamStore, input: Tensor<f64>, h: f64, tol: f64, f: impl Fn(&mut Graph<f64>, &Bindings, Var) -> mer_core::Result<Var>) {
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs = vec![input];
    inputs.extend(names.iter().map(|n| store.get(n).unwrap().cast::<f64>()));
    // Small steps keep the central difference away from ReLU kinks.
    let opts = GradCheckOptions {
        h,
        tol,
        max_coords: 6,
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        |g, vars| {
            let b = Bindings::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
            let y = f(g, &b, vars[0])?;
            let w = g.constant(rand_f64(77, g.shape(y)));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn micro_audio(mode: AudioFusionMode, channels: usize) -> AudioEncoderConfig {
    AudioEncoderConfig {
        embed_dim: 4,
        depths: vec![2, 1],
        heads: vec![1, 2],
        patch_size: 2,
        window_size: 2,
        mlp_ratio: 2,
        mel_bands: 8,
        frames: 8,
        fusion_mode: mode,
        channels,
        ..AudioEncoderConfig::default()
    }
}

fn micro_video() -> VideoEncoderConfig {
    VideoEncoderConfig {
        frames_per_clip: 2,
        resize: 16,
        crop: 16,
        widths: vec![4, 4, 4, 4],
        blocks: vec![1, 1, 1, 1],
        stem_kernel: 3,
        embed_dim: 8,
        augment: VideoAugmentConfig::default(),
    }
}

#[test]
fn audio_encoder_end_to_end_gradients() {
    for (mode, c) in [(AudioFusionMode::Single, 1), (AudioFusionMode::SumPe, 3)] {
        let cfg = micro_audio(mode, c);
        let mut store = ParamStore::new();
        init_audio_params(&mut store, &mut rng(3), &cfg).unwrap();
        let x = rand_f64(5, &[2, c, cfg.padded_bands(), cfg.padded_frames()]);
        check_end_to_end(&store, x, 1e-5, 1e-3, |g, b, x| Ok(encode_audio(g, b, &cfg, x)?.embedding));
    }
}

#[test]
fn video_encoder_end_to_end_gradients() {
    let cfg = micro_video();
    let mut store = ParamStore::new();
    init_video_params(&mut store, &mut rng(4), &cfg).unwrap();
    let x = rand_f64(6, &[2, 3, 2, 16, 16]);
    check_end_to_end(&store, x, 1e-6, 1e-3, |g, b, x| encode_video(g, b, &cfg, x));
}

#[test]
fn stage_grids_and_embedding_width_at_default_size() {
    let cfg = AudioEncoderConfig::default();
    assert_eq!(cfg.stage_grids(), vec![(16, 64), (8, 32), (4, 16), (2, 8)]);
    assert_eq!(cfg.output_dim(), 768);
    let head = FusionConfig::default();
    assert_eq!(head.input_dim(), 1536);
}

#[test]
fn toy_encoder_stage_outputs_have_expected_shapes() {
    let cfg = AudioEncoderConfig {
        mel_bands: 32,
        frames: 64,
        ..AudioEncoderConfig::toy()
    };
    let mut store = ParamStore::new();
    init_audio_params(&mut store, &mut rng(1), &cfg).unwrap();
    let mut g = Graph::<f32>::new();
    let b = store.bind_frozen(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 1, 32, 64]));
    let enc = encode_audio(&mut g, &b, &cfg, x).unwrap();
    let grids = cfg.stage_grids();
    for (s, &v) in enc.stages.iter().enumerate() {
        assert_eq!(g.shape(v), &[1, grids[s].0 * grids[s].1, cfg.stage_dim(s)]);
    }
    assert_eq!(g.shape(enc.embedding), &[1, 192]);
}

fn random_mel(seed: u64, c: usize, f: usize, t: usize) -> MelTensor {
    let mut r = rng(seed);
    MelTensor::new(c, f, t, (0..c * f * t).map(|_| r.random_range(-20.0..0.0)).collect()).unwrap()
}

fn replicate(mel: &MelTensor, c: usize) -> MelTensor {
    MelTensor::new(c, mel.mel_bands, mel.frames, mel.data.repeat(c)).unwrap()
}

#[test]
fn avg_mel_of_identical_channels_matches_single_bitwise() {
    let mono = random_mel(2, 1, 8, 8);
    let single = micro_audio(AudioFusionMode::Single, 1);
    let avg = micro_audio(AudioFusionMode::AvgMel, 3);
    let mut store = ParamStore::new();
    init_audio_params(&mut store, &mut rng(9), &single).unwrap();
    let run = |cfg: &AudioEncoderConfig, mel: &MelTensor| {
        let x = prepare_input(mel, cfg).unwrap();
        let mut g = Graph::<f32>::new();
        let b = store.bind_frozen(&mut g);
        let shape = [&[1][..], &x.shape[..]].concat();
        let x = g.constant(Tensor::new(shape, x.data).unwrap());
        let e = encode_audio(&mut g, &b, cfg, x).unwrap().embedding;
        g.value(e).to_vec()
    };
    assert_eq!(run(&single, &mono), run(&avg, &replicate(&mono, 3)));
}

#[test]
fn sum_pe_of_identical_channels_scales_projection_and_bias() {
    let cfg1 = micro_audio(AudioFusionMode::SumPe, 1);
    let cfg3 = micro_audio(AudioFusionMode::SumPe, 3);
    let mut store = ParamStore::new();
    init_audio_params(&mut store, &mut rng(10), &cfg3).unwrap();
    // Nonzero bias so the bias term is exercised.
    for v in &mut store.get_mut("audio.patch.bias").unwrap().data {
        *v = 0.37;
    }
    let mono = random_mel(4, 1, 8, 8);
    let embed = |cfg: &AudioEncoderConfig, mel: &MelTensor| {
        let x = prepare_input(mel, cfg).unwrap();
        let mut g = Graph::<f32>::new();
        let b = store.bind_frozen(&mut g);
        let shape = [&[1][..], &x.shape[..]].concat();
        let x = g.constant(Tensor::new(shape, x.data).unwrap());
        let y = patch_embed(&mut g, &b, cfg, x).unwrap();
        g.value(y).to_vec()
    };
    let one = embed(&cfg1, &mono);
    let three = embed(&cfg3, &replicate(&mono, 3));
    for (a, b) in one.iter().zip(&three) {
        assert_abs_diff_eq!(3.0 * a, *b, epsilon = 1e-5);
    }
}

#[test]
fn patch_embed_of_zero_input_is_bias() {
    let cfg = micro_audio(AudioFusionMode::Single, 1);
    let mut store = ParamStore::new();
    init_audio_params(&mut store, &mut rng(11), &cfg).unwrap();
    let bias = store.get("audio.patch.bias").unwrap().data.clone();
    let mut g = Graph::<f32>::new();
    let b = store.bind_frozen(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let y = patch_embed(&mut g, &b, &cfg, x).unwrap();
    for token in g.value(y).chunks(cfg.embed_dim) {
        assert_eq!(token, &bias[..]);
    }
}

#[test]
fn stem_width_follows_parameter_budget() {
    assert_eq!(mid_channels(64, 64, 3, 3), 144);
    assert_eq!(mid_channels(3, 64, 3, 7), (3 * 49 * 3 * 64) / (49 * 3 + 3 * 64));
}

fn ramp_clip(frames: usize, h: usize, w: usize) -> VideoClip {
    let data = (0..frames * h * w * 3).map(|i| (i % 251) as u8).collect();
    VideoClip::new(frames, h, w, data).unwrap()
}

#[test]
fn eval_sampling_is_deterministic_center_crop() {
    let cfg = VideoEncoderConfig::default();
    let clip = ramp_clip(12, 30, 40);
    let a = sample_and_augment(&clip, &cfg, false, 1).unwrap();
    let b = sample_and_augment(&clip, &cfg, false, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape, vec![8, 3, 180, 180]);
    let plan = AugmentPlan::eval(12, &cfg);
    assert_eq!((plan.crop_y, plan.crop_x), (22, 22));
    assert_eq!(plan.crop_y + cfg.crop, 202);
}

#[test]
fn training_augmentation_is_seeded() {
    let cfg = VideoEncoderConfig {
        resize: 32,
        crop: 24,
        ..VideoEncoderConfig::default()
    };
    let clip = ramp_clip(10, 20, 20);
    assert_eq!(sample_and_augment(&clip, &cfg, true, 5).unwrap(), sample_and_augment(&clip, &cfg, true, 5).unwrap());
}

#[test]
fn flips_leave_constant_clip_unchanged() {
    let cfg = VideoEncoderConfig {
        resize: 16,
        crop: 12,
        ..VideoEncoderConfig::default()
    };
    let clip = VideoClip::new(8, 10, 10, vec![90; 8 * 10 * 10 * 3]).unwrap();
    let base = AugmentPlan::eval(8, &cfg);
    let flipped = AugmentPlan {
        hflip: true,
        vflip: true,
        ..base.clone()
    };
    assert_eq!(apply_plan(&clip, &cfg, &base).unwrap(), apply_plan(&clip, &cfg, &flipped).unwrap());
}

#[test]
fn channel_major_layout() {
    let t = Tensor::new(vec![2, 3, 1, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let c = to_channel_major(&t).unwrap();
    assert_eq!(c.shape, vec![3, 2, 1, 1]);
    assert_eq!(c.data, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
}

#[test]
fn fuse_orders_video_first_and_splits_back() {
    let v = [1.0, 2.0];
    let a = [3.0, 4.0, 5.0];
    let f = fuse_vectors(&v, &a);
    assert_eq!(f, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    let (v2, a2) = split_fused(&f, 2).unwrap();
    assert_eq!((v2, a2), (&v[..], &a[..]));
}

#[test]
fn fused_width_is_sum_of_embeddings() {
    let cfg = FusionConfig::default();
    let mut g = Graph::<f32>::new();
    let v = g.constant(Tensor::zeros(&[2, 768]));
    let a = g.constant(Tensor::full(&[2, 768], 1.0));
    let f = fuse(&mut g, &cfg, v, a).unwrap();
    assert_eq!(g.shape(f), &[2, 1536]);
    let vals = g.value(f);
    assert!(vals[..768].iter().all(|&x| x == 0.0));
    assert!(vals[768..1536].iter().all(|&x| x == 1.0));
}

#[test]
fn classify_matches_two_matmul_oracle() {
    let cfg = FusionConfig {
        audio_dim: 5,
        video_dim: 3,
        hidden_dim: 6,
        class_count: 8,
        mode: HeadMode::Multimodal,
    };
    let mut store = ParamStore::new();
    init_head_params(&mut store, &mut rng(2), &cfg).unwrap();
    for name in ["head.fc1.bias", "head.fc2.bias"] {
        let mut r = rng(name.len() as u64);
        for v in &mut store.get_mut(name).unwrap().data {
            *v = r.random_range(-0.5..0.5);
        }
    }
    let x: Vec<f32> = (0..8).map(|i| (i as f32 * 0.7).sin()).collect();
    let mut g = Graph::<f32>::new();
    let b = store.bind_frozen(&mut g);
    let xv = g.constant(Tensor::new(vec![1, 8], x.clone()).unwrap());
    let logits = classify(&mut g, &b, xv).unwrap();

    let get = |n: &str| store.get(n).unwrap().data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let (w1, b1, w2, b2) = (get("head.fc1.weight"), get("head.fc1.bias"), get("head.fc2.weight"), get("head.fc2.bias"));
    let h: Vec<f64> = (0..6).map(|j| (b1[j] + (0..8).map(|i| x[i] as f64 * w1[i * 6 + j]).sum::<f64>()).max(0.0)).collect();
    for k in 0..8 {
        let want = b2[k] + (0..6).map(|j| h[j] * w2[j * 8 + k]).sum::<f64>();
        assert_abs_diff_eq!(g.value(logits)[k] as f64, want, epsilon = 1e-5);
    }
}

#[test]
fn argmax_breaks_ties_low_and_ignores_scale() {
    assert_eq!(argmax(&[0.0f32; 8]), 0);
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    let l = [0.2, -1.0, 0.9, 0.4];
    let scaled: Vec<f64> = l.iter().map(|v| v * 7.5).collect();
    assert_eq!(argmax(&l), argmax(&scaled));
}

fn micro_model(mode: HeadMode) -> ModelConfig {
    ModelConfig::new(mode, Some(micro_audio(AudioFusionMode::Single, 1)), Some(micro_video()), 5, 4).unwrap()
}

#[test]
fn unimodal_heads_are_sized_to_one_embedding() {
    let multi = micro_model(HeadMode::Multimodal).init_params(0).unwrap();
    let audio = micro_model(HeadMode::AudioOnly).init_params(0).unwrap();
    let fc1 = |s: &ParamStore| s.get("head.fc1.weight").unwrap().shape.clone();
    assert_eq!(fc1(&multi), vec![16, 5]);
    assert_eq!(fc1(&audio), vec![8, 5]);
    assert!(!audio.names().any(|n| n.starts_with("video.")));
    let video = micro_model(HeadMode::VideoOnly).init_params(0).unwrap();
    let head = |input: usize| input * 5 + 5 + 5 * 4 + 4;
    assert_eq!(multi.count() - head(16), (audio.count() - head(8)) + (video.count() - head(8)));
}

#[test]
fn gradients_reach_both_encoders_through_fusion() {
    let cfg = micro_model(HeadMode::Multimodal);
    let mut store = cfg.init_params(1).unwrap();
    let mut g = Graph::<f32>::new();
    let b = store.bind(&mut g);
    let input = ModelInput {
        audio: Some(rand_f64(1, &[2, 1, 8, 8]).cast()),
        video: Some(rand_f64(2, &[2, 3, 4, 6, 6]).cast()),
    };
    let out = forward(&mut g, &b, &cfg, input).unwrap();
    let loss = g.cross_entropy(out.logits, &[0, 3]).unwrap();
    g.backward(loss).unwrap();
    store.collect_grads(&g, &b);
    let norm = |prefix: &str| {
        store
            .names()
            .filter(|n| n.starts_with(prefix))
            .map(|n| store.grad(n).unwrap().iter().map(|v| (*v as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
    };
    assert!(norm("audio.") > 0.0);
    assert!(norm("video.") > 0.0);
}

#[test]
fn classification_is_batch_permutation_equivariant() {
    let cfg = micro_model(HeadMode::Multimodal);
    let store = cfg.init_params(2).unwrap();
    let audio = rand_f64(3, &[3, 1, 8, 8]).cast::<f32>();
    let video = rand_f64(4, &[3, 3, 4, 6, 6]).cast::<f32>();
    let run = |a: Tensor, v: Tensor| {
        let mut g = Graph::<f32>::new();
        let b = store.bind_frozen(&mut g);
        let o = forward(&mut g, &b, &cfg, ModelInput { audio: Some(a), video: Some(v) }).unwrap();
        g.value(o.logits).to_vec()
    };
    let permute = |t: &Tensor, order: &[usize]| {
        let per = t.numel() / t.shape[0];
        let data = order.iter().flat_map(|&i| t.data[i * per..(i + 1) * per].iter().copied()).collect();
        Tensor::new(t.shape.clone(), data).unwrap()
    };
    let base = run(audio.clone(), video.clone());
    let order = [2, 0, 1];
    let perm = run(permute(&audio, &order), permute(&video, &order));
    for (row, &src) in order.iter().enumerate() {
        for k in 0..4 {
            assert_abs_diff_eq!(perm[row * 4 + k], base[src * 4 + k], epsilon = 1e-5);
        }
    }
}
