//! The JSON schemas under `schemas/` list exactly the fields the code writes.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::Value;

use dagrpo_core::config::{TrainConfig, KEY_DOCS};
use dagrpo_core::metrics::METRIC_FIELDS;
use dagrpo_core::trainer::{files, run_experiment};

fn schema(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[test]
fn config_schema_matches_defaults() {
    let s = schema("train_config.schema.json");
    let defaults = serde_json::to_value(TrainConfig::default()).unwrap();
    assert_eq!(keys(&s["properties"]), keys(&defaults));
    for (k, v) in defaults.as_object().unwrap() {
        assert_eq!(&s["properties"][k]["default"], v, "{k}");
    }
    let documented: BTreeSet<String> = KEY_DOCS.iter().map(|(k, _)| k.to_string()).collect();
    assert_eq!(documented, keys(&defaults));
}

#[test]
fn record_schemas_match_written_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::resolve(
        None,
        &[("steps", "1"), ("prompts_per_step", "2"), ("eval_prompts_per_level", "4"), ("init", "format_prior"), ("pool_size", "4")]
            .map(|(k, v)| (k.to_string(), v.to_string())),
    )
    .unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    let first = |name: &str| -> Value {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        serde_json::from_str(text.lines().next().unwrap()).unwrap()
    };

    let metrics = first(files::METRICS);
    let m = schema("metrics.schema.json");
    assert_eq!(keys(&m["properties"]), keys(&metrics));
    let mut fields: BTreeSet<String> = METRIC_FIELDS.iter().map(|s| s.to_string()).collect();
    fields.insert("step".into());
    assert_eq!(fields, keys(&metrics));

    let eval = first(files::EVAL);
    let e = schema("eval_record.schema.json");
    assert_eq!(keys(&e["properties"]), keys(&eval));
    assert_eq!(keys(&e["$defs"]["level"]["properties"]), keys(&eval["levels"][0]));

    let dump = first(files::GROUPS);
    let g = schema("group_dump.schema.json");
    assert_eq!(keys(&g["properties"]), keys(&dump));
    assert_eq!(keys(&g["$defs"]["rollout"]["properties"]), keys(&dump["group"]["rollouts"][0]));
    assert_eq!(keys(&g["properties"]["masks"]["properties"]), keys(&dump["masks"]));
}
