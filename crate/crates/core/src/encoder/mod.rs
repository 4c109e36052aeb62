//! Toy vision transformer with exact reverse-mode gradients.
//!
//! A transformer set is a stack of pre-norm self-attention blocks plus a
//! projection head. The first set of a cascade also owns a patch embedding
//! with separate positional tables for global and local views; later sets
//! consume pooled tokens and have no embedding of their own.

mod forward;
mod layers;
mod params;
mod views;

pub use forward::{
    backward, forward, patch_embed, patch_embed_backward, AttentionRecord, EmbedCache,
    EncoderOutput, ForwardCache, OutputGrad, PosTable, TokenGrad, TokenSequence,
};
pub use params::{
    BlockParams, EmbedParams, EncoderConfig, HeadParams, ModelParams, PatchConfig, INIT_STD,
};
pub use views::{multi_crop, CropConfig, ViewSet};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::numerics::{dot, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(side: usize, patch: usize, channels: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_hidden: 12,
            head_hidden: 10,
            proj_dim: 8,
            patch: Some(PatchConfig {
                patch_size: patch,
                channels,
                global_grid: (side / patch, side / patch),
                local_grid: (1, 1),
            }),
        }
    }

    fn random_image(side: usize, channels: usize, rng: &mut impl Rng) -> Image {
        let data = (0..side * side * channels).map(|_| rng.random::<f64>()).collect();
        Image::new(side, side, channels, data).unwrap()
    }

    /// Scales every tensor up so the audit exercises non-trivial curvature.
    fn perturbed(params: &ModelParams, rng: &mut impl Rng) -> ModelParams {
        let mut p = params.clone();
        let flat: Vec<f64> = p.flatten().iter().map(|v| v * 5.0 + rng.random_range(-0.1..0.1)).collect();
        p.assign_flat(&flat).unwrap();
        p
    }

    #[test]
    fn token_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (side, p, c, n) in [(8, 4, 1, 4), (32, 4, 3, 64), (224, 8, 3, 784)] {
            let mut cfg = tiny_config(side, p, c);
            cfg.depth = 1;
            let params = ModelParams::init(&cfg, &mut rng).unwrap();
            let img = Image::filled(side, side, &vec![0.5; c]);
            let (tokens, _) = patch_embed(&img, &params).unwrap();
            assert_eq!(tokens.len(), n);
            assert_eq!(tokens.grid, Some((side / p, side / p)));
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParams::init(&tiny_config(8, 4, 1), &mut rng).unwrap();
        let img = Image::filled(9, 8, &[0.0]);
        assert!(patch_embed(&img, &params).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let base = ModelParams::init(&tiny_config(6, 2, 1), &mut rng).unwrap();
            let params = perturbed(&base, &mut rng);
            let img = random_image(6, 1, &mut rng);
            let (tokens, _) = patch_embed(&img, &params).unwrap();
            let (out, _) = forward(&tokens, &params).unwrap();
            for i in 0..out.attention.full.rows() {
                let s: f64 = out.attention.full.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            let s: f64 = out.attention.cls_row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(out.attention.cls_row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn zeroed_residual_branches_pass_tokens_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParams::init(&tiny_config(8, 4, 1), &mut rng).unwrap();
        for b in params.blocks_mut() {
            b.proj_weight.scale(0.0);
            b.proj_bias.scale(0.0);
            b.fc2_weight.scale(0.0);
            b.fc2_bias.scale(0.0);
        }
        let img = random_image(8, 1, &mut rng);
        let (tokens, _) = patch_embed(&img, &params).unwrap();
        let (out, _) = forward(&tokens, &params).unwrap();
        assert_eq!(out.f_c, tokens.cls);
        assert_eq!(out.f_p, tokens.patches);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::init(&tiny_config(8, 4, 1), &mut rng).unwrap();
        let img = random_image(8, 1, &mut rng);
        let (tokens, _) = patch_embed(&img, &params).unwrap();
        let (a, _) = forward(&tokens, &params).unwrap();
        let (b, _) = forward(&tokens, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ModelParams::init(&tiny_config(8, 4, 1), &mut rng).unwrap();
        let img = random_image(8, 1, &mut rng);
        let (tokens, _) = patch_embed(&img, &params).unwrap();
        let (out, cache) = forward(&tokens, &params).unwrap();
        let (grads, tg) = backward(&OutputGrad::zeros_for(&out), &cache, &params).unwrap();
        assert!(grads.flatten().iter().all(|v| *v == 0.0));
        assert!(tg.cls.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn modified_params_invalidate_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ModelParams::init(&tiny_config(8, 4, 1), &mut rng).unwrap();
        let img = random_image(8, 1, &mut rng);
        let (tokens, _) = patch_embed(&img, &params).unwrap();
        let (out, cache) = forward(&tokens, &params).unwrap();
        let flat = params.flatten();
        params.assign_flat(&flat).unwrap();
        assert!(matches!(
            backward(&OutputGrad::zeros_for(&out), &cache, &params),
            Err(crate::Error::StaleCache)
        ));
        let other = params.clone();
        assert!(matches!(
            backward(&OutputGrad::zeros_for(&out), &cache, &other),
            Err(crate::Error::StaleCache)
        ));
    }

    struct Probe {
        f_c: Vec<f64>,
        f_p: Matrix,
        proj: Vec<f64>,
        cls: Vec<f64>,
    }

    impl Probe {
        fn value(&self, out: &EncoderOutput) -> f64 {
            dot(&self.f_c, &out.f_c)
                + dot(self.f_p.as_slice(), out.f_p.as_slice())
                + dot(&self.proj, &out.projection)
                + dot(&self.cls, &out.attention.cls_row)
        }
    }

    fn five_point(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = tiny_config(4, 2, 2);
        cfg.depth = 2;
        let base = ModelParams::init(&cfg, &mut rng).unwrap();
        let params = perturbed(&base, &mut rng);
        let img = random_image(4, 2, &mut rng);
        let mut gaussian = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let probe = Probe {
            f_c: gaussian(8),
            f_p: Matrix::from_vec(4, 8, gaussian(32)).unwrap(),
            proj: gaussian(8),
            cls: gaussian(4),
        };

        let (tokens, ecache) = patch_embed(&img, &params).unwrap();
        let (_, cache) = forward(&tokens, &params).unwrap();
        let upstream = OutputGrad {
            f_c: probe.f_c.clone(),
            f_p: probe.f_p.clone(),
            projection: probe.proj.clone(),
            cls_attention: probe.cls.clone(),
        };
        let (mut grads, tg) = backward(&upstream, &cache, &params).unwrap();
        patch_embed_backward(&ecache, &tg, &mut grads).unwrap();
        let analytic = grads.flatten();

        let flat = params.flatten();
        let mut worst = 0.0f64;
        for i in 0..flat.len() {
            let eval = |x: f64| {
                let mut p = params.clone();
                let mut v = flat.clone();
                v[i] = x;
                p.assign_flat(&v).unwrap();
                let (t, _) = patch_embed(&img, &p).unwrap();
                probe.value(&forward(&t, &p).unwrap().0)
            };
            let fd = five_point(eval, flat[i], 3e-4);
            worst = worst.max(rel_err(analytic[i], fd));
        }
        assert!(worst < 1e-5, "worst relative error {worst:e}");
    }
}
