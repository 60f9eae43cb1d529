use relcon::estimator::{estimate_jacobian, RelationalModel};
use relcon::eval::SweepAxis;
use relcon::pipeline::{build_catalog, prepare, run, sweep, JacobianCache, Method, PipelineConfig};
use relcon::store::{pipeline_from_dump, ActivationDump, DumpRecord};
use relcon::synthworld::{generate, SynthSpec};

fn small_world() -> relcon::synthworld::SynthWorld {
    let mut spec = SynthSpec::new(1, 3, 4, 16, 6, 0.1, 8);
    spec.multi_token_fraction = 0.34;
    generate(&spec).unwrap()
}

fn cfg() -> PipelineConfig {
    PipelineConfig {
        rank: 6,
        n_lre_samples: 100,
        beta: 0.5,
        methods: vec![
            Method::Lrc,
            Method::Svm,
            Method::Averaging,
            Method::LrcFirstTokenFinalLayer,
        ],
        ..Default::default()
    }
}

#[test]
fn dump_route_matches_in_process_route_bitwise() {
    let w = small_world();
    let cfg = cfg();
    let (prep, excluded) = prepare(&w.model, &w.relations, &cfg, 42).unwrap();
    assert!(excluded.is_empty(), "{excluded:?}");
    let mut cache = JacobianCache::new();
    let in_process = build_catalog(&w.model, &prep[0], Method::Lrc, &cfg, 42, &mut cache).unwrap();

    let records = prep[0]
        .train_prompts
        .iter()
        .map(|p| {
            let j = estimate_jacobian(&w.model, p, cfg.subject_layer, cfg.object_layer).unwrap();
            DumpRecord {
                prompt_id: p.prompt_id.clone(),
                relation: p.relation.clone(),
                subject: p.subject.clone(),
                object: p.object.clone(),
                subject_activation: w.model.subject_activation(p, cfg.subject_layer).unwrap(),
                object_mean_activation: w
                    .model
                    .object_activation(p, cfg.object_layer, &p.object_token_positions)
                    .unwrap(),
                jacobian: Some((j.weight, j.bias)),
            }
        })
        .rev()
        .collect();
    let dump = ActivationDump {
        model_name: "toy".into(),
        hidden_dim: 16,
        subject_layer: cfg.subject_layer,
        object_layer: cfg.object_layer,
        records,
    };
    let from_dump = pipeline_from_dump(&dump, cfg.rank).unwrap();
    assert_eq!(from_dump, vec![in_process]);
}

#[test]
fn run_is_deterministic_and_complete() {
    let w = small_world();
    let mut cache = JacobianCache::new();
    let a = run(&w.model, &w.relations, &cfg(), 7, &mut cache).unwrap();
    let b = run(&w.model, &w.relations, &cfg(), 7, &mut JacobianCache::new()).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a.methods.len(), 4);
    for m in &a.methods {
        let r = &m.per_relation[0];
        assert_eq!(r.n_test, m.pooled.trials);
        assert!(r.causality.is_some());
    }
}

#[test]
fn sweep_has_one_row_per_value_and_method() {
    let w = small_world();
    let c = PipelineConfig {
        methods: vec![Method::Lrc],
        causality: false,
        ..cfg()
    };
    let rows = sweep(
        &w.model,
        &w.relations,
        &c,
        SweepAxis::Rank,
        &[2.0, 6.0, 16.0],
        &[1, 2],
        &mut JacobianCache::new(),
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r.seeds == vec![1, 2] && r.causality.is_none()));
    assert!(sweep(
        &w.model,
        &w.relations,
        &c,
        SweepAxis::Rank,
        &[17.0],
        &[1],
        &mut JacobianCache::new()
    )
    .is_err());
}

#[test]
fn single_layer_edit_equals_replace_patch() {
    use relcon::dataset::{render_prompt, PromptMode};
    use relcon::eval::{edit_patches, EditConfig};
    use relcon::toymodel::PatchSpec;

    let w = small_world();
    let rel = &w.relations[0];
    let p = render_prompt(
        &rel.samples[0],
        rel,
        PromptMode::ZeroShot,
        0,
        0,
        w.model.tokenizer(),
    )
    .unwrap();
    let (v_old, v_new) = (vec![1.0; 16], vec![-0.5; 16]);
    for layer in 0..=w.model.final_layer() {
        let cfg = EditConfig {
            layers: Some(vec![layer]),
            ..EditConfig::new(0.3, 0)
        };
        let patches = edit_patches(&w.model, &p, &v_old, &v_new, &cfg).unwrap();
        let edited = w.model.forward(p.prompt_tokens(), &patches).unwrap();
        let clean = w.model.forward(p.prompt_tokens(), &[]).unwrap();
        let i = p.subject_index();
        let h = &clean.residuals[layer][i];
        let delta: Vec<f64> = v_new
            .iter()
            .zip(&v_old)
            .map(|(n, o)| 0.3 * h.norm() * (n - o))
            .collect();
        let replaced = w
            .model
            .forward(
                p.prompt_tokens(),
                &[PatchSpec::replace(layer, i, h.add(&delta))],
            )
            .unwrap();
        assert_eq!(edited.logits, replaced.logits, "layer {layer}");
    }
}
