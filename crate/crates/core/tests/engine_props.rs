use image::RgbImage;
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidguard_core::encoder::{glorot_matrix, ModelConfig, PatchEncoder};
use vidguard_core::engine::{
    attention_mask, attention_probs, dense_attention, pepe_attention, AttentionMode, AttentionPath, AttentionWorkspace,
    Engine, HeadQkv, NoopObserver, TokenLayout,
};

fn config(d_model: usize, n_layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model,
        n_heads: 2,
        n_layers,
        patch_size: 4,
        vocab_size: 128,
        seed,
        max_positions: 512,
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn layout_strategy() -> impl Strategy<Value = (usize, Vec<usize>, usize)> {
    (0usize..8, prop::collection::vec(3usize..8, 1..5), 0usize..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_kernel_matches_masked_dense((v, chunks, q) in layout_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TokenLayout::new(v, &chunks, q).unwrap();
        let n = layout.total_len();
        let ws = AttentionWorkspace {
            heads: (0..2).map(|_| HeadQkv { q: random(&mut rng, n, 4), k: random(&mut rng, n, 4), v: random(&mut rng, n, 4) }).collect(),
            positions: (0..n).collect(),
        };
        let mask = attention_mask(&layout, AttentionMode::Pepe);
        let blocked = pepe_attention(&ws, &layout).unwrap();
        prop_assert!(max_abs(&blocked, &dense_attention(&ws, &mask).unwrap()) < 1e-9);
        for head in &ws.heads {
            let p = attention_probs(head, &mask).unwrap();
            for (i, row) in p.rows().into_iter().enumerate() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().zip(mask.row(i)).all(|(&x, &m)| m || x == 0.0));
            }
        }
    }

    #[test]
    fn forward_paths_agree((v, chunks, q) in layout_strategy(), layers in 1usize..3, seed in any::<u64>()) {
        let engine = Engine::new(&config(16, layers, seed % 1000));
        let layout = TokenLayout::new(v, &chunks, q).unwrap();
        let x = random(&mut ChaCha8Rng::seed_from_u64(seed), layout.total_len(), 16);
        let a = engine.forward_with(&x, &layout, AttentionMode::Pepe, AttentionPath::Auto, &NoopObserver).unwrap();
        let b = engine.forward_with(&x, &layout, AttentionMode::Pepe, AttentionPath::Dense, &NoopObserver).unwrap();
        prop_assert!(max_abs(&a.hidden, &b.hidden) < 1e-9);
        let again = engine.forward(&x, &layout, AttentionMode::Pepe).unwrap();
        prop_assert_eq!(again.hidden, a.hidden);
    }

    #[test]
    fn chunk_outputs_follow_their_chunk(
        v in 1usize..6,
        chunks in prop::collection::vec(prop::collection::vec(3u32..120, 1..5), 2..5),
        seed in any::<u64>(),
    ) {
        let engine = Engine::new(&config(16, 2, 7));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = random(&mut rng, v, 16);
        let anchored: Vec<Vec<u32>> = chunks.iter().map(|c| [vec![1], c.clone(), vec![2]].concat()).collect();
        let query = vec![50, 51, 52];
        let (x, layout) = engine.assemble(&video, &anchored, &query).unwrap();
        let base = engine.forward(&x, &layout, AttentionMode::Pepe).unwrap();
        let order: Vec<usize> = (0..anchored.len()).rev().collect();
        let permuted: Vec<Vec<u32>> = order.iter().map(|&i| anchored[i].clone()).collect();
        let (xp, lp) = engine.assemble(&video, &permuted, &query).unwrap();
        let perm = engine.forward(&xp, &lp, AttentionMode::Pepe).unwrap();
        for (pos, &orig) in order.iter().enumerate() {
            let a = base.hidden.slice(s![layout.policies()[orig].clone(), ..]).to_owned();
            let b = perm.hidden.slice(s![lp.policies()[pos].clone(), ..]).to_owned();
            prop_assert!(max_abs(&a, &b) < 1e-9);
        }
        let qa = base.hidden.slice(s![layout.query(), ..]).to_owned();
        let qb = perm.hidden.slice(s![lp.query(), ..]).to_owned();
        prop_assert!(max_abs(&qa, &qb) < 1e-9);
    }

    #[test]
    fn token_count_is_frames_times_patches(frames in 1usize..5, wp in 1u32..4, hp in 1u32..4) {
        let cfg = config(16, 1, 3);
        let encoder = PatchEncoder::new(&cfg);
        let imgs = vec![RgbImage::from_pixel(4 * wp, 4 * hp, image::Rgb([9, 80, 200])); frames];
        let tokens = encoder.encode_video(&imgs).unwrap();
        prop_assert_eq!(tokens.len(), frames * (wp * hp) as usize);
        prop_assert_eq!(tokens.tokens.nrows(), tokens.len());
    }

    #[test]
    fn weights_are_pure_in_seed_and_shape(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let a = glorot_matrix(seed, "w", rows, cols);
        prop_assert_eq!(&a, &glorot_matrix(seed, "w", rows, cols));
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        prop_assert!(a.iter().all(|x| x.abs() <= bound));
    }
}

#[test]
fn sequential_mode_breaks_chunk_independence() {
    let engine = Engine::new(&config(16, 1, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let video = random(&mut rng, 3, 16);
    let chunks = vec![vec![1, 10, 11, 2], vec![1, 20, 21, 22, 2]];
    let swapped = vec![chunks[1].clone(), chunks[0].clone()];
    let (x, layout) = engine.assemble(&video, &chunks, &[40]).unwrap();
    let (xs, ls) = engine.assemble(&video, &swapped, &[40]).unwrap();
    let a = engine.forward(&x, &layout, AttentionMode::Sequential).unwrap();
    let b = engine.forward(&xs, &ls, AttentionMode::Sequential).unwrap();
    let first = a.hidden.slice(s![layout.policies()[0].clone(), ..]).to_owned();
    let moved = b.hidden.slice(s![ls.policies()[1].clone(), ..]).to_owned();
    assert!(max_abs(&first, &moved) > 1e-6);
}
