use std::fmt;

use thiserror::Error;

use super::registry::ModuleRegistry;
use super::{ConfigDocument, ModuleEntry};
use crate::channel::{
    validate_channel, Channel, ChannelModules, ChannelSpec, Contract, ModuleInstance, ModuleKind,
    ModuleSpec, Violation, DEFAULT_SOURCE_RETRY_CAP,
};
use crate::logic::{ExpressionError, Fact, Rule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssemblyError {
    #[error("{module}: unknown {section} implementation `{implementation}`")]
    UnknownImplementation {
        module: String,
        section: ModuleKind,
        implementation: String,
    },
    #[error(
        "{module}: implementation `{implementation}` is a {registered}, listed under {section}s"
    )]
    KindMismatch {
        module: String,
        implementation: String,
        section: ModuleKind,
        registered: ModuleKind,
    },
    #[error("expression error in {0}")]
    Expression(ExpressionError),
    #[error("contract violation: {0}")]
    ContractViolation(Violation),
    #[error("{module}: cannot instantiate: {message}")]
    ModuleInit { module: String, message: String },
}

/// Every problem found while assembling one document.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct AssemblyErrors(pub Vec<AssemblyError>);

impl fmt::Display for AssemblyErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

fn module_spec(entry: &ModuleEntry, kind: ModuleKind) -> ModuleSpec {
    ModuleSpec {
        name: entry.name.clone(),
        kind,
        implementation: entry.implementation.clone(),
        consumes: entry.consumes.clone(),
        produces: entry.produces.clone(),
        params: entry.params.clone(),
        period_s: entry.period_s,
    }
}

fn undeclared_path_error(fact: &Fact, v: &Violation) -> AssemblyError {
    let path = v.message.trim_start_matches("path `").trim_end_matches('`');
    let column = fact
        .text
        .find(path)
        .map(|i| fact.text[..i].chars().count() + 1);
    AssemblyError::Expression(ExpressionError {
        entity: fact.name.clone(),
        text: fact.text.clone(),
        column,
        message: format!(
            "path `{path}` reads undeclared product `{}`",
            v.product.as_deref().unwrap_or("")
        ),
    })
}

/// Builds the channel spec without instantiating modules.
fn build_spec(
    doc: &ConfigDocument,
    registry: &ModuleRegistry,
    errors: &mut Vec<AssemblyError>,
) -> ChannelSpec {
    let mut spec = ChannelSpec::new(&doc.channel.id, doc.channel.period_s);
    spec.source_retry_cap = doc
        .channel
        .source_retry_cap
        .unwrap_or(DEFAULT_SOURCE_RETRY_CAP);
    for (kind, entries) in [
        (ModuleKind::Source, &doc.sources),
        (ModuleKind::Transform, &doc.transforms),
        (ModuleKind::Publisher, &doc.publishers),
    ] {
        for e in entries {
            match registry.kind_of(&e.implementation) {
                None => errors.push(AssemblyError::UnknownImplementation {
                    module: e.name.clone(),
                    section: kind,
                    implementation: e.implementation.clone(),
                }),
                Some(registered) if registered != kind => {
                    errors.push(AssemblyError::KindMismatch {
                        module: e.name.clone(),
                        implementation: e.implementation.clone(),
                        section: kind,
                        registered,
                    })
                }
                Some(_) => {}
            }
            let m = module_spec(e, kind);
            match kind {
                ModuleKind::Source => spec.sources.push(m),
                ModuleKind::Transform => spec.transforms.push(m),
                _ => spec.publishers.push(m),
            }
        }
    }
    for f in &doc.facts {
        match Fact::new(&f.name, &f.expression) {
            Ok(fact) => spec.facts.push(fact),
            Err(e) => errors.push(AssemblyError::Expression(e)),
        }
    }
    for r in &doc.rules {
        match Rule::new(
            &r.name,
            &r.condition,
            r.actions.clone(),
            r.new_facts.clone(),
        ) {
            Ok(rule) => spec.rules.push(rule),
            Err(e) => errors.push(AssemblyError::Expression(e)),
        }
    }
    spec
}

/// Resolves implementation keys, parses expressions and validates the
/// channel contracts without building any module.
pub fn check(
    doc: &ConfigDocument,
    registry: &ModuleRegistry,
) -> Result<ChannelSpec, AssemblyErrors> {
    let mut errors = Vec::new();
    let spec = build_spec(doc, registry, &mut errors);
    let facts_ok = spec.facts.len() == doc.facts.len();
    let unparsed: Vec<String> = doc
        .facts
        .iter()
        .filter(|f| !spec.facts.iter().any(|g| g.name == f.name))
        .map(|f| format!("`{}`", f.name))
        .collect();
    for v in validate_channel(&spec) {
        // rules citing a fact that failed to parse are not separately wrong
        if v.contract == Contract::UnknownFactReference && unparsed.contains(&v.message) {
            continue;
        }
        // a fact that failed to parse is already reported; don't also
        // report the channel as having no facts
        if v.contract == Contract::MinimumComplement
            && !facts_ok
            && !doc.facts.is_empty()
            && v.message.contains("fact")
        {
            continue;
        }
        if v.contract == Contract::UndeclaredProduct {
            if let Some(f) = spec.facts.iter().find(|f| f.name == v.entity) {
                errors.push(undeclared_path_error(f, &v));
                continue;
            }
        }
        errors.push(AssemblyError::ContractViolation(v));
    }
    if errors.is_empty() {
        Ok(spec)
    } else {
        Err(AssemblyErrors(errors))
    }
}

/// Resolves, checks and instantiates a channel. Either every module is
/// built and the channel is returned, or nothing is.
pub fn assemble(
    doc: &ConfigDocument,
    registry: &ModuleRegistry,
) -> Result<Channel, AssemblyErrors> {
    let spec = check(doc, registry)?;
    let mut errors = Vec::new();
    let mut modules = ChannelModules::default();
    for m in spec.modules() {
        let built = registry
            .build(m, &spec.channel_id)
            .expect("implementation resolved above");
        match built {
            Ok(ModuleInstance::Source(s)) => {
                modules.sources.insert(m.name.clone(), s);
            }
            Ok(ModuleInstance::Transform(t)) => {
                modules.transforms.insert(m.name.clone(), t);
            }
            Ok(ModuleInstance::Publisher(p)) => {
                modules.publishers.insert(m.name.clone(), p);
            }
            Err(e) => errors.push(AssemblyError::ModuleInit {
                module: m.name.clone(),
                message: e.0,
            }),
        }
    }
    if !errors.is_empty() {
        return Err(AssemblyErrors(errors));
    }
    Channel::new(spec, modules).map_err(|e| {
        AssemblyErrors(vec![AssemblyError::ModuleInit {
            module: doc.channel.id.clone(),
            message: e.to_string(),
        }])
    })
}
