use convograph::ppr::{ppr, top_indices, Personalization, PprConfig};
use convograph::sparse::{CsrMatrix, SymmetricBuilder};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, density: f64, seed: u64) -> CsrMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = SymmetricBuilder::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                b.add(i, j, rng.random_range(0.1..5.0), 1);
            }
        }
    }
    b.build()
}

/// Solves `(I − (1−α)M) r = α p` densely, where `M` is `A·D⁻¹` with dangling
/// columns replaced by the normalized personalization.
fn dense_oracle(a: &CsrMatrix, p: &[f64], alpha: f64) -> Vec<f64> {
    let n = a.dim();
    let mut dense = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for (j, w, _) in a.row(i) {
            dense[(i, j)] = w;
        }
    }
    let mass: f64 = p.iter().sum();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let deg: f64 = dense.column(j).sum();
        for i in 0..n {
            m[(i, j)] = if deg > 0.0 { dense[(i, j)] / deg } else { p[i] / mass };
        }
    }
    let lhs = DMatrix::<f64>::identity(n, n) - m * (1.0 - alpha);
    let rhs = DVector::from_iterator(n, p.iter().map(|v| v * alpha));
    lhs.lu().solve(&rhs).expect("nonsingular").iter().copied().collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn seeds_personalization(n: usize, seeds: &[usize]) -> Personalization {
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    Personalization::uniform(n, &s, 1.0 / s.len() as f64).unwrap()
}

const TIGHT: PprConfig = PprConfig {
    alpha: 0.15,
    tol: 1e-10,
    max_iter: 1000,
};

#[test]
fn power_iteration_matches_dense_solve_on_random_graphs() {
    for seed in 0..10 {
        let a = random_graph(50, 0.08, seed);
        let p = seeds_personalization(50, &[seed as usize, (seed as usize * 7 + 3) % 50]);
        let got = ppr(&a, &p, &TIGHT).unwrap();
        assert!(got.converged);
        let want = dense_oracle(&a, &p.to_dense(), TIGHT.alpha);
        let err = l1(&got.r, &want);
        assert!(err < 1e-8, "graph {seed}: L1 error {err}");
    }
}

#[test]
fn graphs_with_dangling_nodes_match_the_oracle() {
    let mut b = SymmetricBuilder::new(6);
    b.add(0, 1, 1.0, 1);
    b.add(1, 2, 2.0, 1);
    b.add(2, 0, 1.0, 1);
    b.add(3, 4, 1.0, 1);
    let a = b.build();
    let p = Personalization::from_weights(6, &[(0, 0.5), (5, 0.5)]).unwrap();
    let got = ppr(&a, &p, &TIGHT).unwrap();
    let want = dense_oracle(&a, &p.to_dense(), TIGHT.alpha);
    assert!(l1(&got.r, &want) < 1e-9);
    assert_eq!(got.r[3], 0.0);
    assert_eq!(got.r[4], 0.0);
}

#[test]
fn alpha_near_one_returns_personalization() {
    let a = random_graph(40, 0.1, 99);
    let p = seeds_personalization(40, &[1, 5, 9]);
    let cfg = PprConfig {
        alpha: 1.0 - 1e-7,
        ..TIGHT
    };
    let r = ppr(&a, &p, &cfg).unwrap().r;
    assert!(l1(&r, &p.to_dense()) < 1e-5);
}

#[test]
fn identical_inputs_give_bitwise_identical_scores() {
    let a = random_graph(60, 0.05, 3);
    let p = seeds_personalization(60, &[0, 10, 20]);
    let x = ppr(&a, &p, &PprConfig::default()).unwrap();
    let y = ppr(&a, &p, &PprConfig::default()).unwrap();
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x.r), bits(&y.r));
}

/// Two random components joined into one node range; `split` is the first
/// node of the second component.
fn two_components(n1: usize, n2: usize, seed: u64) -> (CsrMatrix, usize) {
    let left = random_graph(n1, 0.3, seed);
    let right = random_graph(n2, 0.3, seed ^ 0xabc);
    let mut b = SymmetricBuilder::new(n1 + n2);
    for (g, offset) in [(&left, 0), (&right, n1)] {
        for i in 0..g.dim() {
            for (j, w, t) in g.row(i) {
                if i < j {
                    b.add(i + offset, j + offset, w, t);
                }
            }
        }
    }
    (b.build(), n1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_is_conserved(seed in 0u64..10_000, n in 2usize..60, density in 0.0f64..0.4, s in 0usize..60) {
        let a = random_graph(n, density, seed);
        let p = seeds_personalization(n, &[s % n]);
        let out = ppr(&a, &p, &PprConfig::default()).unwrap();
        let total: f64 = out.r.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9, "sum {}", total);
        prop_assert!(out.r.iter().all(|&v| v >= 0.0));
        prop_assert!(out.converged || out.iterations == PprConfig::default().max_iter);
        prop_assert!(out.residuals_monotone(), "{:?}", out.residuals);
    }

    #[test]
    fn mass_stays_in_the_seeded_component(seed in 0u64..10_000, n1 in 1usize..20, n2 in 1usize..20, s in 0usize..20) {
        let (a, split) = two_components(n1, n2, seed);
        let p = seeds_personalization(n1 + n2, &[s % n1]);
        let r = ppr(&a, &p, &PprConfig::default()).unwrap().r;
        prop_assert!(r[split..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_personalization_keeps_rankings(seed in 0u64..10_000, c in 0.01f64..100.0, k in 1usize..20) {
        let n = 40;
        let a = random_graph(n, 0.1, seed);
        let seeds = [seed as usize % n, (seed as usize / 7) % n, (seed as usize / 49) % n];
        let normalized = seeds_personalization(n, &seeds);
        let scaled = Personalization::from_weights(
            n,
            &normalized.entries().iter().map(|&(i, w)| (i, w * c)).collect::<Vec<_>>(),
        ).unwrap();
        let cfg = PprConfig { tol: 1e-12, max_iter: 2000, ..PprConfig::default() };
        let r1 = ppr(&a, &normalized, &cfg).unwrap().r;
        let r2 = ppr(&a, &scaled, &PprConfig { tol: cfg.tol * c, ..cfg }).unwrap().r;
        prop_assert_eq!(top_indices(&r1, k, |_| true), top_indices(&r2, k, |_| true));
    }
}
