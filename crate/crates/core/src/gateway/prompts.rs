//! Versioned prompt templates. Requests reference templates by name and
//! version; the rendered wording never enters a request digest.

use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    source: &'static str,
}

macro_rules! template {
    ($name:ident, $file:literal) => {
        pub const $name: PromptTemplate = PromptTemplate {
            name: $file,
            source: include_str!(concat!("../../prompts/", $file, ".txt")),
        };
    };
}

template!(SCHEMA_INIT, "schema_init");
template!(SCHEMA_REFINE, "schema_refine");
template!(ASK_ALIGNMENT_CONFLICT, "ask_alignment_conflict");
template!(ASK_DISTRIBUTION_ANOMALY, "ask_distribution_anomaly");
template!(ASK_MISSING_RELATIONSHIP, "ask_missing_relationship");
template!(RESOLVE_QUESTION, "resolve_question");
template!(EXTRACT_TUPLES, "extract_tuples");
template!(COMMITTEE_EXTRACT, "committee_extract");
template!(DISAMBIGUATE, "disambiguate");
template!(COMPILE_PLAN, "compile_plan");
template!(SYNTHESIZE_ANSWER, "synthesize_answer");
template!(DIRECT_ANSWER, "direct_answer");

pub const ALL: [PromptTemplate; 12] = [
    SCHEMA_INIT,
    SCHEMA_REFINE,
    ASK_ALIGNMENT_CONFLICT,
    ASK_DISTRIBUTION_ANOMALY,
    ASK_MISSING_RELATIONSHIP,
    RESOLVE_QUESTION,
    EXTRACT_TUPLES,
    COMMITTEE_EXTRACT,
    DISAMBIGUATE,
    COMPILE_PLAN,
    SYNTHESIZE_ANSWER,
    DIRECT_ANSWER,
];

impl PromptTemplate {
    pub fn by_name(name: &str) -> Option<PromptTemplate> {
        ALL.iter().copied().find(|t| t.name == name)
    }

    pub fn version(&self) -> u32 {
        self.source
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("version:"))
            .and_then(|v| v.trim().parse().ok())
            .expect("template starts with a version line")
    }

    fn body(&self) -> &'static str {
        self.source.split_once('\n').map_or("", |(_, body)| body)
    }

    /// Substitutes `{{name}}` placeholders. Strings are inserted verbatim,
    /// other values as pretty JSON. Unknown placeholders are left in place.
    pub fn render(&self, variables: &Map<String, Value>) -> String {
        let mut out = self.body().to_string();
        for (name, value) in variables {
            let text = match value {
                Value::String(s) => s.clone(),
                other => serde_json::to_string_pretty(other).expect("json renders"),
            };
            out = out.replace(&format!("{{{{{name}}}}}"), &text);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_has_a_version() {
        for t in ALL {
            assert!(t.version() >= 1, "{}", t.name);
            assert!(!t.body().is_empty());
        }
    }

    #[test]
    fn render_substitutes() {
        let mut vars = Map::new();
        vars.insert("query".into(), Value::String("how many?".into()));
        vars.insert("sample".into(), serde_json::json!(["a"]));
        let text = SCHEMA_INIT.render(&vars);
        assert!(text.contains("how many?"));
        assert!(text.contains("[\n  \"a\"\n]"));
        assert!(!text.contains("version:"));
    }
}
