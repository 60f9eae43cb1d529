use relcon::dataset::{render_prompt, Category, PromptMode, Relation, RelationSample};
use relcon::estimator::{build_lrc, estimate_jacobian, invert_lre, train_lre, RelationalModel};
use relcon::eval::ConceptCatalog;
use relcon::store::{load_world, save_world};
use relcon::synthworld::{
    generate, generate_for_relations, oracle_compare, SynthSpec, OBJECT_LAYER, SUBJECT_LAYER,
};
use relcon::Error;

#[test]
fn tiny_world_memorizes_all_samples() {
    let w = generate(&SynthSpec::new(1, 2, 3, 32, 8, 0.0, 1)).unwrap();
    assert_eq!(w.relations.len(), 1);
    assert_eq!(w.relations[0].samples.len(), 6);
    assert_eq!(w.memorization, 1.0);
}

#[test]
fn planted_map_is_the_local_jacobian() {
    let mut spec = SynthSpec::new(2, 3, 3, 32, 8, 0.2, 4);
    spec.cluster_jump = 2.0;
    spec.common_offset = 1.0;
    spec.multi_token_fraction = 0.5;
    let w = generate(&spec).unwrap();
    for rel in &w.relations {
        let truth = &w.true_affine[&rel.name].weight;
        for s in &rel.samples {
            let p = render_prompt(s, rel, PromptMode::FewShot, 2, 0, w.model.tokenizer()).unwrap();
            let j = estimate_jacobian(&w.model, &p, SUBJECT_LAYER, OBJECT_LAYER).unwrap();
            let rel_err = j.weight.sub(truth).unwrap().frobenius_norm() / truth.frobenius_norm();
            assert!(rel_err < 1e-4, "{}: {rel_err}", p.prompt_id);
        }
    }
}

/// Concepts from LREs trained on every sample of each relation.
fn full_data_catalog(
    w: &relcon::synthworld::SynthWorld,
    rel: &Relation,
    rank: usize,
) -> ConceptCatalog {
    let tok = w.model.tokenizer();
    let prompts: Vec<_> = rel
        .samples
        .iter()
        .map(|s| render_prompt(s, rel, PromptMode::FewShot, 2, 0, tok).unwrap())
        .collect();
    let js: Vec<_> = prompts
        .iter()
        .map(|p| estimate_jacobian(&w.model, p, SUBJECT_LAYER, OBJECT_LAYER).unwrap())
        .collect();
    let inv = invert_lre(
        &train_lre(&rel.name, SUBJECT_LAYER, OBJECT_LAYER, &js).unwrap(),
        rank,
    )
    .unwrap();
    let concepts = rel
        .objects()
        .iter()
        .map(|o| {
            let acts: Vec<_> = prompts
                .iter()
                .filter(|p| &p.object == o)
                .map(|p| {
                    w.model
                        .object_activation(p, OBJECT_LAYER, &p.object_token_positions)
                        .unwrap()
                })
                .collect();
            build_lrc(&inv, o, &acts, vec![]).unwrap()
        })
        .collect();
    ConceptCatalog::new(&rel.name, SUBJECT_LAYER, concepts).unwrap()
}

#[test]
fn oracle_cosine_does_not_grow_with_noise() {
    let levels = [0.0, 0.3, 0.6];
    let means: Vec<f64> = levels
        .iter()
        .map(|&noise| {
            let mut total = 0.0;
            let mut n = 0.0;
            for seed in 0..5 {
                let w = generate(&SynthSpec::new(1, 4, 4, 32, 8, noise, seed)).unwrap();
                let cat = full_data_catalog(&w, &w.relations[0], 8);
                for c in oracle_compare(&w, &cat).unwrap().values() {
                    total += c;
                    n += 1.0;
                }
            }
            total / n
        })
        .collect();
    assert!(means[0] > 0.99, "{means:?}");
    assert!(means.windows(2).all(|p| p[1] <= p[0]), "{means:?}");
}

#[test]
fn world_roundtrips_through_directory() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate(&SynthSpec::new(1, 2, 3, 16, 4, 0.1, 3)).unwrap();
    save_world(dir.path(), &w).unwrap();
    assert_eq!(load_world(dir.path()).unwrap(), w);
}

#[test]
fn planting_over_fixture_relations() {
    let rels = relcon::dataset::bundled_fixture();
    let w = generate_for_relations(&rels, &SynthSpec::fixture(42)).unwrap();
    assert!(w.memorization >= 0.95);
    assert_eq!(w.true_directions.len(), rels.len());
}

#[test]
fn subject_word_reused_elsewhere_is_rejected() {
    let rel = Relation {
        name: "r".into(),
        category: Category::Synthetic,
        fs_templates: vec!["{} is".into()],
        zs_templates: vec!["{} is".into()],
        samples: vec![
            RelationSample::new("is", "a"),
            RelationSample::new("b", "c"),
        ],
    };
    let spec = SynthSpec::new(0, 0, 0, 16, 4, 0.0, 0);
    assert!(matches!(
        generate_for_relations(&[rel], &spec),
        Err(Error::ModelConfig(_))
    ));
}

#[test]
fn invalid_specs() {
    assert!(generate(&SynthSpec::new(3, 4, 2, 16, 8, 0.0, 0)).is_err());
    assert!(generate(&SynthSpec::new(1, 4, 2, 16, 0, 0.0, 0)).is_err());
    assert!(generate(&SynthSpec::new(1, 4, 2, 16, 4, -1.0, 0)).is_err());
}
