use msgt_core::data_io::{pseudo_embed, TaskKind};
use msgt_core::model::{Model, ModelConfig, SampleInput};
use msgt_core::numerics::{finite_diff_check_params, Initializer, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn small(config: ModelConfig, task: TaskKind, seed: u64) -> Model {
    let d = 4;
    let names: Vec<String> = ["dark eye", "grey back", "white belly"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<f64>> = names.iter().map(|n| pseudo_embed(n, d, seed).unwrap()).collect();
    let labels = vec!["a".to_string(), "b".to_string()];
    let mut m = Model::new(config, task, names, Tensor::from_rows(&rows).unwrap(), labels, seed).unwrap();
    // zero-initialized prior tables would hide their gradient paths
    let mut init = Initializer::new(seed + 1);
    let ids: Vec<_> = m
        .store
        .ids()
        .filter(|&id| {
            let n = m.store.name(id);
            n == "graph.structural" || n.ends_with(".psi_sgt")
        })
        .collect();
    for id in ids {
        let shape = m.store.value(id).shape().to_vec();
        *m.store.value_mut(id) = init.uniform(&shape, 0.5);
    }
    m
}

fn base() -> ModelConfig {
    ModelConfig {
        heads: 2,
        experts: 2,
        context_layers: 1,
        reason_layers: 2,
        graph_concepts: 1,
        ..ModelConfig::default()
    }
}

fn check(m: &Model, views: usize, targets: &[f64]) -> f64 {
    let rows = (0..views).map(|i| pseudo_embed(&format!("view {i}"), 4, 3).unwrap()).collect();
    let input = SampleInput::from_views(rows);
    finite_diff_check_params(
        &m.store,
        |t, p| {
            let v = m.forward(t, p, &input)?;
            Ok(m.loss(t, p, &v, targets, 0.05, 0.5)?.total)
        },
        EPS,
    )
    .unwrap()
}

#[test]
fn multi_label_objective() {
    let m = small(base(), TaskKind::MultiLabel, 11);
    let err = check(&m, 1, &[1.0, 1.0]);
    assert!(err < TOL, "{err:e}");
}

#[test]
fn ablated_variants() {
    let variants = [
        ("no moe", ModelConfig { use_moe: false, ..base() }),
        ("no qa graph", ModelConfig { use_qa_graph: false, ..base() }),
        ("no structural prior", ModelConfig { use_structural_prior: false, ..base() }),
        ("no z in head", ModelConfig { use_z_in_classifier: false, ..base() }),
    ];
    for (i, (name, config)) in variants.into_iter().enumerate() {
        let m = small(config, TaskKind::SingleLabel, 20 + i as u64);
        let err = check(&m, 2, &[0.0, 1.0]);
        assert!(err < TOL, "{name}: {err:e}");
    }
}
