mod common;

use std::path::Path;

use decision_engine::channel::{ModuleInstance, ModuleKind, ModuleSpec};
use decision_engine::config::{self, ConfigDocument, ConfigError, ModuleRegistry};
use decision_engine::service::validate_dir;
use decision_engine::sim::{SimHandle, SimWorld};
use proptest::prelude::*;

/// Keys that may be left out of a channel file.
const OPTIONAL: [&str; 6] = [
    "consumes",
    "produces",
    "params",
    "period_s",
    "source_retry_cap",
    "new_facts",
];

fn reference_text() -> String {
    std::fs::read_to_string(common::reference_config_dir().join("provisioning.toml")).unwrap()
}

/// Every key in the document as a path of table keys and array indices.
#[derive(Clone, Debug)]
enum Step {
    Key(String),
    Index(usize),
}

fn key_paths(v: &toml::Value, prefix: &mut Vec<Step>, out: &mut Vec<Vec<Step>>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                prefix.push(Step::Key(k.clone()));
                out.push(prefix.clone());
                // params contents are free-form
                if k != "params" {
                    key_paths(child, prefix, out);
                }
                prefix.pop();
            }
        }
        toml::Value::Array(a) => {
            for (i, child) in a.iter().enumerate() {
                if child.is_table() {
                    prefix.push(Step::Index(i));
                    key_paths(child, prefix, out);
                    prefix.pop();
                }
            }
        }
        _ => {}
    }
}

/// Removes the key at `path`; false when it is already gone.
fn delete(root: &mut toml::Value, path: &[Step]) -> bool {
    let (last, parents) = path.split_last().unwrap();
    let mut at = root;
    for s in parents {
        let next = match s {
            Step::Key(k) => at.get_mut(k.as_str()),
            Step::Index(i) => at.get_mut(*i),
        };
        match next {
            Some(v) => at = v,
            None => return false,
        }
    }
    match last {
        Step::Key(k) => at.as_table_mut().and_then(|t| t.remove(k)).is_some(),
        Step::Index(_) => unreachable!(),
    }
}

fn last_key(path: &[Step]) -> &str {
    match path.last() {
        Some(Step::Key(k)) => k,
        _ => unreachable!(),
    }
}

fn is_optional(path: &[Step]) -> bool {
    let in_channel = matches!(path.first(), Some(Step::Key(k)) if k == "channel");
    OPTIONAL.contains(&last_key(path)) && !(in_channel && last_key(path) == "period_s")
}

fn all_paths() -> (toml::Value, Vec<Vec<Step>>) {
    let root: toml::Value = toml::from_str(&reference_text()).unwrap();
    let mut out = Vec::new();
    key_paths(&root, &mut Vec::new(), &mut out);
    (root, out)
}

fn registry() -> ModuleRegistry {
    ModuleRegistry::with_simulation(&SimHandle::new(SimWorld::new(
        &common::reference_scenario(),
        0,
    )))
}

#[test]
fn deleting_any_required_key_is_one_schema_error() {
    let (root, paths) = all_paths();
    assert!(paths.len() > 40, "{} keys", paths.len());
    let reg = registry();
    let mut required = 0;
    for path in &paths {
        let mut doc = root.clone();
        assert!(delete(&mut doc, path));
        let text = toml::to_string(&doc).unwrap();
        let key = last_key(path);
        match ConfigDocument::parse(&text, Path::new("mutant.toml")) {
            Err(ConfigError::Schema {
                key_path, message, ..
            }) => {
                assert!(!is_optional(path), "optional `{key}` rejected: {message}");
                assert!(
                    message.contains(key),
                    "`{key}` missing but error says: {message}"
                );
                // the error names the table that lost the key
                let parent: Vec<String> = path[..path.len() - 1]
                    .iter()
                    .map(|s| match s {
                        Step::Key(k) => k.clone(),
                        Step::Index(i) => format!("[{i}]"),
                    })
                    .collect();
                let parent = parent.join(".").replace(".[", "[");
                let parent = if parent.is_empty() {
                    ".".to_string()
                } else {
                    parent
                };
                assert_eq!(key_path, parent, "deleting `{key}`");
                required += 1;
            }
            Err(other) => panic!("deleting `{key}`: unexpected {other}"),
            Ok(parsed) => {
                assert!(is_optional(path), "required `{key}` accepted");
                // may or may not assemble, but must not panic
                let _ = config::assemble(&parsed, &reg);
            }
        }
    }
    assert!(required > 30);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_deletions_never_panic(picks in proptest::collection::vec(any::<proptest::sample::Index>(), 1..6)) {
        let (mut doc, paths) = all_paths();
        let mut removed = Vec::new();
        for pick in picks {
            let path = &paths[pick.index(paths.len())];
            if delete(&mut doc, path) {
                removed.push(path.clone());
            }
        }
        let text = toml::to_string(&doc).unwrap();
        match ConfigDocument::parse(&text, Path::new("mutant.toml")) {
            Ok(parsed) => {
                prop_assert!(removed.iter().all(|p| is_optional(p)), "{:?}", removed);
                let _ = config::assemble(&parsed, &registry());
            }
            Err(e) => prop_assert!(matches!(e, ConfigError::Schema { .. }), "{}", e),
        }
    }
}

#[test]
fn reference_round_trips() {
    let doc = ConfigDocument::parse(&reference_text(), Path::new("p.toml")).unwrap();
    let again = ConfigDocument::parse(&doc.to_toml(), Path::new("p.toml")).unwrap();
    assert_eq!(doc, again);
    let channel = config::assemble(&again, &registry()).unwrap();
    assert_eq!(channel.spec().channel_id, "provisioning");
}

#[test]
fn registry_builds_job_queue_source() {
    let reg = registry();
    assert_eq!(reg.kind_of("sim_job_queue"), Some(ModuleKind::Source));
    let spec =
        ModuleSpec::new("job_queue", ModuleKind::Source, "sim_job_queue").produces(&["jobs"]);
    assert!(matches!(
        reg.build(&spec, "ch"),
        Some(Ok(ModuleInstance::Source(_)))
    ));
    assert!(ModuleRegistry::builtin().build(&spec, "ch").is_none());
}

#[test]
fn parse_errors_carry_line_and_column() {
    let text = "[channel]\nid = \"x\"\nperiod_s = = 3\n";
    match ConfigDocument::parse(text, Path::new("bad.toml")) {
        Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let text = reference_text().replace("period_s = 60", "period_s = \"sixty\"");
    match ConfigDocument::parse(&text, Path::new("bad.toml")) {
        Err(ConfigError::Schema { key_path, line, .. }) => {
            assert_eq!(key_path, "channel.period_s");
            assert_eq!(line, Some(6));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn directory_validation_reports_per_file() {
    let tmp = tempfile::tempdir().unwrap();
    let good = common::provisioning_config(
        "alpha",
        &common::provider_names(&common::reference_scenario()),
    );
    let bad = good
        .replace("alpha", "beta")
        .replace("[[transforms]]", "[[tranforms]]");
    common::write_config_dir(tmp.path(), &[("a.toml", &good), ("b.toml", &bad)]);
    let reports = validate_dir(tmp.path(), Some(&common::reference_scenario())).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports[0].problems.is_empty(), "{:?}", reports[0].problems);
    assert_eq!(reports[1].problems.len(), 1, "{:?}", reports[1].problems);
}
