use actgraph::pipeline::RunConfig;

const REFERENCE: &str = include_str!("../../../book/src/config-reference.md");

fn json_block(md: &str) -> &str {
    let start = md.find("```json\n").expect("reference has a json block") + "```json\n".len();
    let len = md[start..].find("```").expect("json block is closed");
    &md[start..start + len]
}

#[test]
fn config_reference_matches_defaults() {
    assert_eq!(json_block(REFERENCE), RunConfig::default().to_json_pretty());
}

#[test]
fn config_reference_parses_to_defaults() {
    let cfg = RunConfig::from_json(json_block(REFERENCE), "config-reference.md").unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn every_top_level_key_is_documented() {
    let v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json_pretty()).unwrap();
    let table = &REFERENCE[REFERENCE.find("| key |").unwrap()..];
    for key in v.as_object().unwrap().keys() {
        assert!(table.contains(&format!("`{key}")), "{key} missing from the table");
    }
}
