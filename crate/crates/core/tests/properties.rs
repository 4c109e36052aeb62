use hctx_core::distill::{dino_loss, ema_update, DistillConfig, TeacherState};
use hctx_core::encoder::{forward, EncoderConfig, ModelParams, TokenSequence};
use hctx_core::fewshot::{cosine_classify, sample_episode, EvalReport, FeatureBank, Protocol};
use hctx_core::numerics::{symmetric_eig, Matrix};
use hctx_core::pipeline::{Checkpoint, TensorKind, TensorRecord};
use hctx_core::pooling::{
    average_pool, build_grid_adjacency, normalized_laplacian, pool_backward, pooling_affinity, spectral_pool,
    symmetrize_attention, ClusterAssignment, GradMode,
};
use hctx_core::surrogates::{
    accumulate_row, class_surrogate_loss_from_projection, patch_surrogate_loss, SurrogateKind, SurrogateTable,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rows: usize, cols: usize, r: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn random_attention(n: usize, r: &mut impl Rng) -> Matrix {
    let mut m = Matrix::from_fn(n, n, |_, _| r.random::<f64>() + 1e-3);
    for i in 0..n {
        let s: f64 = m.row(i).iter().sum();
        m.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    m
}

fn tiny_encoder(seed: u64) -> ModelParams {
    let cfg = EncoderConfig {
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_hidden: 8,
        head_hidden: 8,
        proj_dim: 6,
        patch: None,
    };
    ModelParams::init(&cfg, &mut rng(seed)).unwrap()
}

fn tokens(n: usize, r: &mut impl Rng) -> TokenSequence {
    let cls = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    TokenSequence::new(cls, random_matrix(n, 8, r), None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigenpairs_are_orthonormal_with_small_residual(n in 1usize..=32, seed: u64) {
        let mut r = rng(seed);
        let a = random_matrix(n, n, &mut r);
        let m = Matrix::from_fn(n, n, |i, j| a[(i, j)] + a[(j, i)]);
        let e = symmetric_eig(&m, n).unwrap();
        let scale = m.max_abs().max(f64::MIN_POSITIVE);
        prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        for j in 0..n {
            let u = e.vectors.column(j);
            for i in 0..n {
                let mu: f64 = (0..n).map(|k| m[(i, k)] * u[k]).sum();
                prop_assert!((mu - e.values[j] * u[i]).abs() <= 1e-6 * scale);
            }
            for k in 0..j {
                let d: f64 = u.iter().zip(e.vectors.column(k)).map(|(a, b)| a * b).sum();
                prop_assert!(d.abs() <= 1e-6);
            }
            let len: f64 = u.iter().map(|x| x * x).sum();
            prop_assert!((len - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_distributions(n in 1usize..10, seed: u64) {
        let params = tiny_encoder(seed);
        let (out, _) = forward(&tokens(n, &mut rng(seed ^ 1)), &params).unwrap();
        for i in 0..=n {
            let row = out.attention.full.row(i);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!((out.attention.cls_row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(out.projection.len(), 6);
    }

    #[test]
    fn forward_is_pure(n in 1usize..8, seed: u64) {
        let params = tiny_encoder(seed);
        let t = tokens(n, &mut rng(seed));
        let (a, _) = forward(&t, &params).unwrap();
        let (b, _) = forward(&t, &params).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn symmetrized_attention_is_symmetric_and_masked(h in 1usize..6, w in 1usize..6, seed: u64) {
        let adj = build_grid_adjacency(h, w);
        let n = h * w;
        let a = random_attention(n, &mut rng(seed));
        let s = symmetrize_attention(&a, &adj).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(s[(i, j)], s[(j, i)]);
                if !adj.is_edge(i, j) {
                    prop_assert_eq!(s[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn laplacian_is_psd(h in 1usize..5, w in 2usize..5, seed: u64) {
        let adj = build_grid_adjacency(h, w);
        let aff = pooling_affinity(&random_attention(h * w, &mut rng(seed)), &adj).unwrap();
        let l = normalized_laplacian(&aff).unwrap();
        let e = symmetric_eig(&l, h * w).unwrap();
        prop_assert!(e.values[0] >= -1e-9);
        prop_assert!(e.values.iter().all(|v| *v <= 2.0 + 1e-9));
        // A connected grid has exactly one zero eigenvalue.
        prop_assert!(e.values.iter().filter(|v| v.abs() < 1e-9).count() == 1);
    }

    #[test]
    fn pooling_assignments_are_valid_and_deterministic(side in 2usize..6, frac in 0.1f64..1.0, seed: u64) {
        let n = side * side;
        let k = ((n as f64 * frac).ceil() as usize).clamp(1, n);
        let mut r = rng(seed);
        let a = random_attention(n, &mut r);
        let x = random_matrix(n, 3, &mut r);
        let adj = build_grid_adjacency(side, side);
        let (p1, c1) = spectral_pool(&x, &a, &adj, k, &mut rng(seed)).unwrap();
        let (p2, c2) = spectral_pool(&x, &a, &adj, k, &mut rng(seed)).unwrap();
        prop_assert_eq!(&p1, &p2);
        prop_assert_eq!(&c1, &c2);
        prop_assert_eq!(p1.rows(), k);
        prop_assert!(c1.sizes.iter().all(|s| *s > 0));
        prop_assert_eq!(c1.sizes.iter().sum::<usize>(), n);
    }

    #[test]
    fn pooling_to_n_clusters_is_lossless(side in 1usize..5, seed: u64) {
        let n = side * side;
        let mut r = rng(seed);
        let x = random_matrix(n, 4, &mut r);
        let (p, _) = spectral_pool(&x, &random_attention(n, &mut r), &build_grid_adjacency(side, side), n, &mut r).unwrap();
        let mut a: Vec<Vec<u64>> = (0..n).map(|i| x.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut b: Vec<Vec<u64>> = (0..n).map(|i| p.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn adjoint_identity(labels in prop::collection::vec(0usize..5, 5..30), seed: u64) {
        let mut labels = labels;
        labels[..5].copy_from_slice(&[0, 1, 2, 3, 4]);
        let assignment = ClusterAssignment::from_labels(labels.clone(), 5).unwrap();
        let mut r = rng(seed);
        let x = random_matrix(labels.len(), 3, &mut r);
        let g = random_matrix(5, 3, &mut r);
        let lhs: f64 = average_pool(&x, &assignment).unwrap().as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
        let back = pool_backward(&g, &assignment, GradMode::Adjoint).unwrap();
        let rhs: f64 = x.as_slice().iter().zip(back.as_slice()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn surrogate_losses_touch_only_the_label_row(classes in 2usize..6, dim in 2usize..6, seed: u64) {
        let mut r = rng(seed);
        let y = r.random_range(0..classes);
        let class_table = SurrogateTable::from_descriptors(SurrogateKind::Class, random_matrix(classes, dim, &mut r)).unwrap();
        let patch_table = SurrogateTable::from_descriptors(SurrogateKind::Patch, random_matrix(classes, dim, &mut r)).unwrap();
        let (v0, v1): (Vec<f64>, Vec<f64>) = ((0..dim).map(|_| r.random()).collect(), (0..dim).map(|_| r.random()).collect());
        let c = class_surrogate_loss_from_projection([&v0, &v1], 0.1, &class_table, y).unwrap();
        let (f0, f1) = (random_matrix(4, dim, &mut r), random_matrix(4, dim, &mut r));
        let att = [0.1, 0.2, 0.3, 0.4];
        let p = patch_surrogate_loss([&f0, &f1], [&att, &att], &patch_table, y).unwrap();
        prop_assert!(c.loss >= 0.0 && p.loss >= 0.0);
        for row in [&c.grad_row, &p.grad_row] {
            let mut g = Matrix::zeros(classes, dim);
            accumulate_row(&mut g, y, row, 1.0).unwrap();
            for k in (0..classes).filter(|k| *k != y) {
                prop_assert!(g.row(k).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn dino_is_finite_and_counts_pairs(m in 0usize..9, seed: u64) {
        let mut r = rng(seed);
        let cfg = DistillConfig { local_views: m, ..DistillConfig::default() };
        let view = |r: &mut ChaCha8Rng| -> Vec<f64> { (0..6).map(|_| r.random_range(-50.0..50.0)).collect() };
        let teacher = [view(&mut r), view(&mut r)];
        let student: Vec<Vec<f64>> = (0..m + 2).map(|_| view(&mut r)).collect();
        let center = view(&mut r);
        let t: Vec<&[f64]> = teacher.iter().map(|v| v.as_slice()).collect();
        let s: Vec<&[f64]> = student.iter().map(|v| v.as_slice()).collect();
        let l = dino_loss(&t, &s, &center, &cfg).unwrap();
        prop_assert!(l.loss.is_finite());
        prop_assert_eq!(l.pairs, 2 * (m + 1));
    }

    #[test]
    fn ema_is_affine(lambda in 0.0f64..=1.0, seed: u64) {
        let student = tiny_encoder(seed);
        let mut teacher = TeacherState::from_student(&tiny_encoder(seed ^ 7));
        let before = teacher.params.flatten();
        ema_update(&mut teacher, &student, lambda).unwrap();
        for ((t, b), s) in teacher.params.flatten().iter().zip(before).zip(student.flatten()) {
            prop_assert!((t - (lambda * b + (1.0 - lambda) * s)).abs() <= 1e-15);
        }
    }

    #[test]
    fn episodes_never_leak_and_scale_does_not_matter(seed: u64, scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let features: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let labels = (0..60).map(|i| i % 6).collect();
        let bank = FeatureBank::new(features, labels).unwrap();
        let mut episode = sample_episode(&bank, 5, 2, 3, &mut r).unwrap();
        prop_assert_eq!(episode.support.len(), 10);
        prop_assert_eq!(episode.query.len(), 15);
        for q in &episode.query {
            prop_assert!(episode.support.iter().all(|s| s.source != q.source));
        }
        let before = cosine_classify(&episode).unwrap();
        let idx = r.random_range(0..episode.query.len());
        episode.query[idx].feature.iter_mut().for_each(|v| *v *= scale);
        prop_assert_eq!(cosine_classify(&episode).unwrap().predictions, before.predictions);
    }

    #[test]
    fn report_mean_is_the_episode_mean(acc in prop::collection::vec(0.0f64..=1.0, 1..200)) {
        let protocol = Protocol { episodes: acc.len(), ..Protocol::default() };
        let report = EvalReport::from_accuracies(protocol, acc.clone()).unwrap();
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        prop_assert!((report.mean - mean).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&report.mean) && report.ci95 >= 0.0);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed: u64) {
        let params = tiny_encoder(seed);
        let mut ckpt = Checkpoint::default();
        ckpt.metadata.push(("seed".into(), seed.to_string()));
        for (name, m) in params.tensors() {
            ckpt.tensors.push(TensorRecord { name, kind: TensorKind::Weights, data: m.clone() });
        }
        let bytes = ckpt.to_bytes();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
}
