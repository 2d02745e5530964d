#![allow(dead_code)]

use msgt_cli::engine::Engine;
use msgt_core::checkpoint::Checkpoint;
use msgt_core::data_io::Dataset;
use msgt_core::fixture::{self, Fixture, FixtureSpec};
use msgt_core::trainer::{train, TrainConfig};

/// The synthetic fixture with annotations on `s1` and a stored hint on `s2`.
/// Hint text shares the concept seed so a concept name used as a hint
/// clamps that concept.
pub fn annotated_fixture() -> Fixture {
    let mut fx = fixture::synthetic(&FixtureSpec::default()).unwrap();
    let names = fx.pool.names();
    let mut manifest = fx.dataset.manifest.clone();
    manifest.concept_names = Some(names.clone());
    let mut codes = vec![None; names.len()];
    codes[1] = Some(1);
    codes[2] = Some(0);
    manifest.samples[1].concept_annotations = Some(codes);
    manifest.samples[2].hint_text = Some(names[4].clone());
    fx.dataset = Dataset::new(manifest, fx.dataset.views.clone()).unwrap();
    fx.config.model.text_seed = fx.spec.seed;
    fx
}

pub fn checkpoint(fx: &Fixture, epochs: usize) -> Checkpoint {
    let cfg = TrainConfig {
        epochs,
        ..fx.config.clone()
    };
    train(&cfg, &fx.dataset, &fx.pool).unwrap()
}

pub fn engine() -> Engine {
    let fx = annotated_fixture();
    let ck = checkpoint(&fx, 3);
    Engine::new(ck, fx.dataset, Some(fx.pool)).unwrap()
}
