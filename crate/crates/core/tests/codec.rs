use latefuse::aclm::{acoustic_generate, apply_delay, invert_delay, AcousticLm, AcousticLmConfig};
use latefuse::codec::acoustic::{AcousticGrid, Rvq};
use latefuse::codec::kmeans::{fit_kmeans, nearest, sq_dist, KMeansOptions, Points};
use latefuse::codec::{oracle_transcribe, read_wav, render, write_wav, Waveform};
use latefuse::numerics::Tensor;
use latefuse::rng::stream;
use latefuse::vocab::SYMBOLS;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, seed: u64, name: &str) -> Vec<f64> {
    let mut rng = stream(seed, name);
    (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Greedy residual k-means, fitted the same way the codec fits its RVQ.
fn fit_rvq(data: &[f64], d: usize, k: usize, stages: usize) -> Rvq {
    let mut residual = data.to_vec();
    let mut rng = stream(3, "rvq");
    let mut books = Vec::new();
    for _ in 0..stages {
        let opts = KMeansOptions {
            k,
            max_iters: 25,
            pin_zero: true,
        };
        let fit = fit_kmeans(&Points::new(&residual, d).unwrap(), &opts, &mut rng).unwrap();
        assert!(fit.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9), "k-means objective rose");
        for r in residual.chunks_exact_mut(d) {
            let (c, _) = nearest(&fit.centroids, d, r);
            for (ri, e) in r.iter_mut().zip(&fit.centroids[c * d..(c + 1) * d]) {
                *ri -= e;
            }
        }
        books.push(Tensor::new(vec![k, d], fit.centroids.iter().map(|&v| v as f32).collect()).unwrap());
    }
    Rvq::new(books).unwrap()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn residual_norms_never_grow() {
    let (d, k, s) = (8, 16, 4);
    let rvq = fit_rvq(&gaussian(2000, d, 1, "fit"), d, k, s);
    let probes = gaussian(1000, d, 2, "probe");
    for x in probes.chunks_exact(d) {
        let (_, residuals) = rvq.quantize_with_residuals(x, s).unwrap();
        for w in residuals.windows(2) {
            assert!(norm(&w[1]) <= norm(&w[0]) + 1e-12);
        }
    }
}

#[test]
fn distortion_is_non_increasing_in_stages() {
    let (d, k, s) = (8, 16, 4);
    let rvq = fit_rvq(&gaussian(2000, d, 4, "fit"), d, k, s);
    let probes = gaussian(1000, d, 5, "probe");
    let mut mse = vec![0.0; s + 1];
    for x in probes.chunks_exact(d) {
        let codes = rvq.quantize(x).unwrap();
        for (n, m) in mse.iter_mut().enumerate() {
            let rec = rvq.dequantize(&codes[..n]).unwrap();
            *m += sq_dist(x, &rec);
        }
    }
    for w in mse.windows(2) {
        assert!(w[1] <= w[0], "{mse:?}");
    }
    assert!(mse[s] < mse[0]);
}

/// Nearest entries found by scanning every entry, lowest index on ties.
fn scan(book: &[f64], d: usize, x: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..book.len() / d {
        if sq_dist(&book[c * d..(c + 1) * d], x) < sq_dist(&book[best * d..(best + 1) * d], x) {
            best = c;
        }
    }
    best
}

#[test]
fn nearest_matches_an_exhaustive_scan() {
    let d = 33;
    let book = gaussian(64, d, 6, "book");
    let probes = gaussian(500, d, 7, "probe");
    for x in probes.chunks_exact(d) {
        assert_eq!(nearest(&book, d, x).0, scan(&book, d, x));
    }
}

#[test]
fn two_stage_codes_match_brute_force() {
    let s1 = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, -1.0, -1.0];
    let s2 = [0.0, 0.0, 0.2, 0.0, 0.0, 0.2, -0.15, 0.15];
    let book = |v: &[f64]| Tensor::new(vec![4, 2], v.iter().map(|&x| x as f32).collect()).unwrap();
    let rvq = Rvq::new(vec![book(&s1), book(&s2)]).unwrap();
    let entry = |s: &[f64], i: usize| [s[2 * i], s[2 * i + 1]];
    let mut rng = stream(8, "probe");
    for a in 0..4 {
        for b in 0..4 {
            for _ in 0..25 {
                let (e1, e2) = (entry(&s1, a), entry(&s2, b));
                let x = [
                    e1[0] + e2[0] + rng.random_range(-0.03..0.03),
                    e1[1] + e2[1] + rng.random_range(-0.03..0.03),
                ];
                let mut best = (0, 0);
                let mut best_err = f64::INFINITY;
                for i in 0..4 {
                    for j in 0..4 {
                        let (p, q) = (entry(&s1, i), entry(&s2, j));
                        let err = sq_dist(&x, &[p[0] + q[0], p[1] + q[1]]);
                        if err < best_err {
                            best_err = err;
                            best = (i, j);
                        }
                    }
                }
                let codes = rvq.quantize(&x).unwrap();
                assert_eq!((codes[0], codes[1]), best, "x = {x:?}");
                let rec = rvq.dequantize(&codes).unwrap();
                assert!((sq_dist(&x, &rec) - best_err).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn rvq_requires_zero_first_entry() {
    let bad = Tensor::new(vec![2, 2], vec![0.1f32, 0.0, 1.0, 1.0]).unwrap();
    assert!(Rvq::new(vec![bad]).is_err());
}

fn random_grid(rng: &mut impl Rng) -> AcousticGrid {
    let s = rng.random_range(1..6);
    let t = rng.random_range(1..30);
    AcousticGrid::new((0..s).map(|_| (0..t).map(|_| rng.random_range(0..64)).collect()).collect()).unwrap()
}

#[test]
fn delay_round_trips_on_random_grids() {
    let mut rng = stream(9, "grids");
    for _ in 0..100 {
        let grid = random_grid(&mut rng);
        let delayed = apply_delay(&grid);
        assert_eq!(delayed.steps(), grid.frames() + grid.n_stages() - 1);
        assert_eq!(invert_delay(&delayed).unwrap(), grid);
    }
}

#[test]
fn malformed_delay_margins_are_rejected() {
    let grid = AcousticGrid::new(vec![vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
    let mut d = apply_delay(&grid);
    d.cells[1][0] = Some(7);
    assert!(invert_delay(&d).is_err());
    let mut d = apply_delay(&grid);
    d.cells[0][1] = None;
    assert!(invert_delay(&d).is_err());
}

#[test]
fn generated_grids_have_the_requested_shape() {
    let cfg = AcousticLmConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        n_stages: 4,
        codebook_size: 64,
        n_semantic: 64,
        max_frames: 48,
    };
    let model = AcousticLm::<f32>::new(cfg, &mut stream(10, "aclm")).unwrap();
    let mut rng = stream(11, "semantic");
    for t in [1, 4, 17, 48] {
        let semantic: Vec<usize> = (0..t).map(|_| rng.random_range(0..64)).collect();
        let grid = acoustic_generate(&model, &semantic).unwrap();
        assert_eq!(grid.n_stages(), 4);
        assert_eq!(grid.frames(), t);
        assert!(grid.codes.iter().flatten().all(|&c| c < 64));
    }
    let too_long = vec![0usize; 49];
    assert!(acoustic_generate(&model, &too_long).is_err());
}

#[test]
fn wav_round_trip_is_within_one_quantization_step() {
    let w = render("0a e").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    write_wav(&path, &w).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back.len(), w.len());
    for (a, b) in w.samples.iter().zip(&back.samples) {
        assert!((a - b).abs() <= 1.0 / 32767.0);
    }
    assert_eq!(oracle_transcribe(&back).unwrap(), "0a e");
}

#[test]
fn oracle_rejects_partial_blocks() {
    let w = render("01").unwrap();
    let cut = Waveform::new(w.samples[..w.len() - 1].to_vec());
    assert!(oracle_transcribe(&cut).is_err());
}

proptest! {
    #[test]
    fn oracle_inverts_render(idx in prop::collection::vec(0usize..16, 1..12)) {
        let text: String = idx.iter().map(|&i| SYMBOLS[i]).collect();
        prop_assert_eq!(oracle_transcribe(&render(&text).unwrap()).unwrap(), text);
    }
}
