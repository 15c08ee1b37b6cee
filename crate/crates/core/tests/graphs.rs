use std::collections::HashSet;

use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vesseldiff::graph::{load_graph, save_graph, DatasetNormalization, SpatialGraph};
use vesseldiff::metrics::{betti1, edge_statistics, evaluate_sets, histogram_kl, set_statistics};
use vesseldiff::rng::stream;
use vesseldiff::synth::{generate, generate_set, SynthConfig};

fn arb_graph() -> impl Strategy<Value = SpatialGraph> {
    (1usize..14, 2usize..6, any::<u64>()).prop_map(|(n, c, seed)| {
        let mut rng = stream(seed, &[]);
        let coords = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1e3..1e3))).collect();
        let mut list = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.3 {
                    list.push((i, j, rng.random_range(1..c) as u8));
                }
            }
        }
        SpatialGraph::from_edge_list(coords, &list, c).unwrap()
    })
}

fn without_edges(g: &SpatialGraph) -> SpatialGraph {
    SpatialGraph::empty(g.coords().to_vec(), g.num_classes())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_round_trip(g in arb_graph()) {
        let dir = tempfile::tempdir().unwrap();
        save_graph(&g, dir.path()).unwrap();
        let back = load_graph(dir.path(), g.num_classes()).unwrap();
        prop_assert_eq!(back.edges(), g.edges());
        for (a, b) in back.coords().iter().flatten().zip(g.coords().iter().flatten()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn normalization_maps_into_unit_box_and_back(gs in prop::collection::vec(arb_graph(), 1..5)) {
        let norm = DatasetNormalization::fit(&gs).unwrap();
        for g in &gs {
            let n = norm.normalize(g);
            prop_assert!(n.coords().iter().flatten().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            let back = norm.denormalize(&n);
            for (a, b) in back.coords().iter().flatten().zip(g.coords().iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>(), len in 1usize..80) {
        let mut rng = stream(seed, &[]);
        let a: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..5.0)).collect();
        let b: Vec<f64> = (0..len + 3).map(|_| rng.random_range(-1.0..4.0)).collect();
        let kl = histogram_kl(&a, &b, 50).unwrap();
        prop_assert!(kl >= 0.0 && kl.is_finite());
    }

    #[test]
    fn angles_ignore_translation_and_edge_order(g in arb_graph(), shift in prop::array::uniform3(-50.0f64..50.0)) {
        let moved = g.with_coords(g.coords().iter().map(|p| std::array::from_fn(|a| p[a] + shift[a])).collect());
        let relisted = {
            let mut list = g.edge_list();
            list.reverse();
            SpatialGraph::from_edge_list(g.coords().to_vec(), &list, g.num_classes()).unwrap()
        };
        let sorted = |g: &SpatialGraph| {
            let mut v = edge_statistics(g).angles;
            v.sort_by(f64::total_cmp);
            v
        };
        let base = sorted(&g);
        for other in [sorted(&moved), sorted(&relisted)] {
            prop_assert_eq!(other.len(), base.len());
            for (a, b) in other.iter().zip(&base) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn angles_match_double_loop_oracle() {
    let mut rng = stream(21, &[]);
    for _ in 0..20 {
        let n = 8;
        let coords: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let mut list = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.4 {
                    list.push((i, j, 1u8));
                }
            }
        }
        let g = SpatialGraph::from_edge_list(coords.clone(), &list, 2).unwrap();
        let mut want = Vec::new();
        for v in 0..n {
            for &(a0, a1, _) in &list {
                for &(b0, b1, _) in &list {
                    if (a0, a1) >= (b0, b1) {
                        continue;
                    }
                    let ua = if a0 == v { a1 } else if a1 == v { a0 } else { continue };
                    let ub = if b0 == v { b1 } else if b1 == v { b0 } else { continue };
                    let da: Vec<f64> = (0..3).map(|k| coords[ua][k] - coords[v][k]).collect();
                    let db: Vec<f64> = (0..3).map(|k| coords[ub][k] - coords[v][k]).collect();
                    let dot: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
                    let na = da.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = db.iter().map(|x| x * x).sum::<f64>().sqrt();
                    want.push((dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees());
                }
            }
        }
        let mut got = edge_statistics(&g).angles;
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn deleting_all_edges_moves_topology_but_not_coordinates() {
    let x = generate_set(&SynthConfig::capillary(3), 100).unwrap();
    let empty: Vec<SpatialGraph> = x.iter().map(without_edges).collect();
    let r = evaluate_sets(&x, &empty).unwrap();
    assert!(r.xyz <= 1e-9);
    for v in [r.deg, r.num_edges, r.betti0, r.betti1] {
        assert!(v > 0.5, "{r:?}");
    }
}

#[test]
fn capillary_patches_over_many_seeds() {
    let cfg = SynthConfig::capillary(5);
    let mut cyclic = 0;
    for i in 0..100 {
        let g = generate(&cfg, i).unwrap();
        assert!(g.is_valid());
        assert!((cfg.min_nodes..=cfg.max_nodes).contains(&g.num_nodes()));
        assert!(g.degrees().iter().all(|&d| d != 2));
        cyclic += usize::from(betti1(&g) >= 1);
    }
    assert!(cyclic >= 95, "{cyclic}");
}

#[test]
fn synthesis_is_deterministic_and_seed_sensitive() {
    let cfg = SynthConfig::capillary(8);
    assert_eq!(generate(&cfg, 3).unwrap(), generate(&cfg, 3).unwrap());
    let mut seen = HashSet::new();
    for seed in 0..1000 {
        let g = generate(&SynthConfig::capillary(seed), 0).unwrap();
        let key: Vec<u64> = g.coords().iter().flatten().map(|v| v.to_bits()).collect();
        seen.insert(key);
    }
    assert!(seen.len() >= 999);
}

#[test]
fn cow_orientation_is_not_uniform() {
    let set = generate_set(&SynthConfig::cow(4), 200).unwrap();
    let stats = set_statistics(&set);
    let bins = 9;
    for axis in &stats.edges.orientation {
        let mut counts = vec![0.0; bins];
        for &a in axis {
            counts[((a / 90.0 * bins as f64) as usize).min(bins - 1)] += 1.0;
        }
        let expected = axis.len() as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p < 0.01, "p = {p}");
    }
}
