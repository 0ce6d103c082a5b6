//! Versioned prompt templates, one per agent kind.
//!
//! Templates use `{{name}}` placeholders, substituted in a single pass so
//! that substituted text is never re-expanded.

use super::AgentKind;

pub const CONTEXT_GENERATOR: &str = include_str!("../../prompts/context_generator.md");
pub const RELEVANCY: &str = include_str!("../../prompts/relevancy.md");
pub const LAYOUT: &str = include_str!("../../prompts/layout.md");
pub const SOURCE_SCRUTINY: &str = include_str!("../../prompts/source_scrutiny.md");
pub const FACT_CHECK: &str = include_str!("../../prompts/fact_check.md");
pub const FACT_CHECK_MIN: &str = include_str!("../../prompts/fact_check_min.md");
pub const REMEDIATION_ANALYST: &str = include_str!("../../prompts/remediation_analyst.md");
pub const FACT_LOOKUP_EXTRACT: &str = include_str!("../../prompts/fact_lookup_extract.md");
pub const REMEDIATION_AUDIT: &str = include_str!("../../prompts/remediation_audit.md");
pub const DISCOVERY: &str = include_str!("../../prompts/discovery.md");
pub const INTEGRITY: &str = include_str!("../../prompts/integrity.md");
pub const MONOLITH: &str = include_str!("../../prompts/monolith.md");

pub fn template(kind: AgentKind) -> &'static str {
    match kind {
        AgentKind::ContextGenerator => CONTEXT_GENERATOR,
        AgentKind::Relevancy => RELEVANCY,
        AgentKind::Layout => LAYOUT,
        AgentKind::SourceScrutiny => SOURCE_SCRUTINY,
        AgentKind::FactCheck => FACT_CHECK,
        AgentKind::RemediationAnalyst => REMEDIATION_ANALYST,
        AgentKind::FactLookupExtract => FACT_LOOKUP_EXTRACT,
        AgentKind::RemediationAudit => REMEDIATION_AUDIT,
        AgentKind::Discovery => DISCOVERY,
        AgentKind::Integrity => INTEGRITY,
        AgentKind::Monolith => MONOLITH,
    }
}

/// Substitutes `{{name}}` placeholders. Unknown placeholders are left as-is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = &after[..end];
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push_str("{{");
                        out.push_str(name);
                        out.push_str("}}");
                    }
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn repair_prompt(original: &str, bad_reply: &str, error: &str) -> String {
    format!(
        "{original}\n\n---\nYour previous reply could not be parsed ({error}).\n\
         Previous reply:\n<<<REPLY\n{bad_reply}\nREPLY>>>\n\
         Reply again with exactly one fenced ```json block that satisfies the required fields."
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pass_substitution() {
        let out = render("a {{x}} b {{y}} {{z}}", &[("x", "{{y}}"), ("y", "2")]);
        assert_eq!(out, "a {{y}} b 2 {{z}}");
    }

    #[test]
    fn every_template_has_shape_placeholder() {
        for k in AgentKind::ALL {
            assert!(template(k).contains("{{shape}}"), "{k}");
        }
        assert!(FACT_CHECK_MIN.contains("{{shape}}"));
    }

    #[test]
    fn fact_check_template_orders_sections() {
        let pos = |s: &str| FACT_CHECK.find(s).unwrap();
        assert!(pos("{{row}}") < pos("{{hint}}"));
        assert!(pos("{{hint}}") < pos("{{context}}"));
        assert!(pos("{{context}}") < pos("Critical Semantic Audit"));
        assert!(pos("Critical Semantic Audit") < pos("{{page}}"));
        assert!(!FACT_CHECK_MIN.contains("Critical Semantic Audit"));
    }
}
