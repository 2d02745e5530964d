use msgt_core::bottleneck::{values, ClampSet};
use msgt_core::concept_pool::{dedup, relevance};
use msgt_core::data_io::EmbeddingTable;
use msgt_core::metrics::{combine_views, f1, roc_auc};
use msgt_core::numerics::{cosine, Initializer, ParamStore, Tape, Tensor};
use msgt_core::sgt_moe::{LayerConfig, SgtLayer};
use proptest::prelude::*;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

/// One layer pass; returns output rows, per-head attention and gates.
fn run_layer(
    layer: &SgtLayer,
    store: &ParamStore,
    x: &Tensor,
    priors: Option<&[Tensor]>,
) -> (Tensor, Vec<Tensor>, Option<Tensor>) {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let v = tape.constant(x.clone());
    let priors = priors.map(|ps| ps.iter().map(|t| tape.constant(t.clone())).collect());
    let out = layer.forward(&mut tape, &p, v, &priors).unwrap();
    (
        tape.value(out.v_evo).clone(),
        out.attention.iter().map(|&a| tape.value(a).clone()).collect(),
        out.gates.map(|g| tape.value(g).clone()),
    )
}

fn layer(seed: u64, heads: usize, head_dim: usize, experts: usize) -> (SgtLayer, ParamStore) {
    let mut store = ParamStore::new();
    let config = LayerConfig::new(heads * head_dim, heads, experts, true);
    let layer = SgtLayer::new(&mut store, &mut Initializer::new(seed), "l", config).unwrap();
    (layer, store)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_rows(&perm.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap()
}

/// `P A Pᵀ` for a square matrix.
fn permute_both(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let mut out = Tensor::zeros(&[n, n]);
    for (a, &i) in perm.iter().enumerate() {
        for (b, &j) in perm.iter().enumerate() {
            out.set(a, b, t.get(i, j));
        }
    }
    out
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn layer_case() -> impl Strategy<Value = (u64, usize, usize, usize, Vec<usize>)> {
    (any::<u64>(), 1usize..=3, 1usize..=3, 1usize..=4, 1usize..=6).prop_flat_map(|(seed, h, dh, e, n)| {
        (
            Just(seed),
            Just(h),
            Just(dh),
            Just(e),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn attention_and_gates_are_distributions((seed, h, dh, e, perm) in layer_case()) {
        let n = perm.len();
        let (layer, store) = layer(seed, h, dh, e);
        let x = Initializer::new(seed ^ 1).uniform(&[n, h * dh], 3.0);
        let priors: Vec<Tensor> = (0..h).map(|k| Initializer::new(seed ^ (k as u64 + 2)).uniform(&[n, n], 4.0)).collect();
        let (_, attention, gates) = run_layer(&layer, &store, &x, Some(&priors));
        let gates = gates.unwrap();
        for m in attention.iter().chain(std::iter::once(&gates)) {
            for r in 0..m.rows() {
                let row = m.row_slice(r);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_is_permutation_equivariant((seed, h, dh, e, perm) in layer_case()) {
        let n = perm.len();
        let (layer, store) = layer(seed, h, dh, e);
        let x = Initializer::new(seed ^ 1).uniform(&[n, h * dh], 3.0);
        let priors: Vec<Tensor> = (0..h).map(|k| Initializer::new(seed ^ (k as u64 + 2)).uniform(&[n, n], 4.0)).collect();
        let (out, attention, _) = run_layer(&layer, &store, &x, Some(&priors));

        let px = permute_rows(&x, &perm);
        let pp: Vec<Tensor> = priors.iter().map(|t| permute_both(t, &perm)).collect();
        let (pout, pattention, _) = run_layer(&layer, &store, &px, Some(&pp));
        prop_assert!(max_diff(&pout, &permute_rows(&out, &perm)) <= 1e-10);
        for (a, pa) in attention.iter().zip(&pattention) {
            prop_assert!(max_diff(pa, &permute_both(a, &perm)) <= 1e-12);
        }
    }

    #[test]
    fn clamps_overwrite_exactly(
        p in prop::collection::vec(0.0f64..=1.0, 1..12),
        picks in prop::collection::vec((any::<prop::sample::Index>(), any::<bool>()), 0..6),
    ) {
        let mut clamps = ClampSet::new();
        for (i, v) in &picks {
            clamps.insert(i.index(p.len()), if *v { 1.0 } else { 0.0 }).unwrap();
        }
        let z = values::assemble_z(&p, &clamps).unwrap();
        for (i, (&zi, &pi)) in z.iter().zip(&p).enumerate() {
            match clamps.get(i) {
                Some(v) => prop_assert_eq!(zi, v),
                None => prop_assert_eq!(zi, pi),
            }
        }
        let mut out_of_range = clamps.clone();
        out_of_range.insert(p.len(), 1.0).unwrap();
        prop_assert!(values::assemble_z(&p, &out_of_range).is_err());
    }

    #[test]
    fn auc_matches_pairwise_count(
        data in prop::collection::vec((0u8..6, any::<bool>()), 2..40),
    ) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| f64::from(s) / 5.0).collect();
        let labels: Vec<bool> = data.iter().map(|&(_, l)| l).collect();
        let pos: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
        let neg: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
        let got = roc_auc(&scores, &labels).unwrap();
        if pos.is_empty() || neg.is_empty() {
            prop_assert_eq!(got, None);
        } else {
            let mut twice = 0u64;
            for a in &pos {
                for b in &neg {
                    twice += if a > b { 2 } else if a == b { 1 } else { 0 };
                }
            }
            let want = twice as f64 / (2 * pos.len() * neg.len()) as f64;
            prop_assert_eq!(got, Some(want));
            // order reversal and a strictly increasing map
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((roc_auc(&flipped, &labels).unwrap().unwrap() - (1.0 - want)).abs() <= 1e-12);
            let stretched: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&stretched, &labels).unwrap(), Some(want));
        }
    }

    #[test]
    fn f1_is_the_harmonic_mean(
        data in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..40),
    ) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| s).collect();
        let labels: Vec<bool> = data.iter().map(|&(_, l)| l).collect();
        let got = f1(&scores, &labels, 0.5).unwrap();
        let tp = data.iter().filter(|&&(s, l)| s >= 0.5 && l).count() as f64;
        let predicted = data.iter().filter(|&&(s, _)| s >= 0.5).count() as f64;
        let actual = labels.iter().filter(|&&l| l).count() as f64;
        prop_assert!((0.0..=1.0).contains(&got));
        if tp == 0.0 {
            prop_assert_eq!(got, 0.0);
        } else {
            let (p, r) = (tp / predicted, tp / actual);
            prop_assert!((got - 2.0 * p * r / (p + r)).abs() <= 1e-12);
        }
    }

    #[test]
    fn combined_views_are_the_upper_envelope(
        views in (1usize..5).prop_flat_map(|c| prop::collection::vec(prop::collection::vec(0.0f64..=1.0, c), 1..5)),
    ) {
        let out = combine_views(&views).unwrap();
        for (j, &o) in out.iter().enumerate() {
            prop_assert!(views.iter().all(|v| v[j] <= o));
            prop_assert!(views.iter().any(|v| v[j] == o));
        }
    }
}

fn table(rows: &[Vec<f64>], tag: &str) -> EmbeddingTable {
    let names = (0..rows.len()).map(|i| format!("{tag}{i}")).collect();
    EmbeddingTable::normalized_from(names, rows.to_vec(), rows[0].len()).unwrap()
}

fn vectors(dim: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3)),
        n,
    )
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn dedup_keeps_dissimilar_representatives(rows in vectors(3, 1..16), tau_c in 0.0f64..1.0) {
        let kept = dedup(&table(&rows, "c"), tau_c).unwrap();
        prop_assert!(!kept.is_empty());
        prop_assert_eq!(&kept.names()[0], "c0");
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                prop_assert!(cosine(kept.vector(i), kept.vector(j)) <= tau_c);
            }
        }
        let again = dedup(&kept, tau_c).unwrap();
        prop_assert_eq!(again.names(), kept.names());
    }

    #[test]
    fn relevance_ignores_label_order(
        concepts in vectors(4, 1..6),
        mut labels in vectors(4, 1..6),
        tau_r in -0.5f64..0.5,
    ) {
        let pool = table(&concepts, "c");
        let a = relevance(&pool, &table(&labels, "y"), tau_r).unwrap();
        labels.reverse();
        let b = relevance(&pool, &table(&labels, "y"), tau_r).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.mu - y.mu).abs() <= 1e-12);
            prop_assert!((x.sigma - y.sigma).abs() <= 1e-12);
            prop_assert!(x.sigma >= 0.0);
            prop_assert_eq!(x.relevance, if x.mu >= tau_r { x.sigma } else { 0.0 });
        }
    }
}
