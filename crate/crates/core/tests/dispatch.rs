use std::path::PathBuf;

use sqi_core::constraints::{compile_protocol, render_prompt, ConstraintSet, Stage};
use sqi_core::dispatch::{
    heuristic_profile, ConstraintFilter, HeuristicProfile, RuleTable, DIRECTIONAL_CONSISTENCY,
    SEGMENT_EXTENSION, SURFACE_ISOLATION,
};
use sqi_core::model::{IllusionQuery, ImageRef};
use sqi_core::{classify_query, QueryType};

fn sample_question(qt: QueryType) -> &'static str {
    match qt {
        QueryType::Alignment => "Are the red segments collinear behind the rectangle?",
        QueryType::Length => "Are the two horizontal lines the same length?",
        QueryType::Size => "Is circle A the same size as circle B?",
        QueryType::Color => "Are squares A and B the same color?",
        QueryType::Count => "How many dots are in the grid?",
        QueryType::Orientation => "Is the square tilted to the left?",
        QueryType::Curvature => "Are the two vertical lines curved?",
        QueryType::Other => "Is there an illusion in this picture?",
    }
}

#[test]
fn documented_classifications() {
    assert_eq!(
        classify_query("Are the red segments collinear behind the rectangle?"),
        QueryType::Alignment
    );
    assert_eq!(classify_query(""), QueryType::Other);
    assert_eq!(
        classify_query("Is circle A the same size as circle B?"),
        QueryType::Size
    );
    for qt in QueryType::ALL {
        assert_eq!(
            classify_query(sample_question(qt)),
            qt,
            "{}",
            sample_question(qt)
        );
    }
}

#[test]
fn no_builtin_profile_empties_a_stage() {
    let cs = ConstraintSet::bundled();
    for qt in QueryType::ALL {
        let protocol = compile_protocol(&cs, &heuristic_profile(qt)).unwrap();
        for stage in Stage::ORDER {
            assert!(protocol.directives(stage).next().is_some() || stage == Stage::AnswerFormat);
        }
    }
}

#[test]
fn named_specializations_land_in_the_decomposition_block() {
    let cs = ConstraintSet::bundled();
    let alignment = compile_protocol(&cs, &heuristic_profile(QueryType::Alignment)).unwrap();
    assert!(alignment
        .directives(Stage::Decomposition)
        .any(|d| d == DIRECTIONAL_CONSISTENCY));
    assert!(alignment
        .directives(Stage::Counterfactual)
        .any(|d| d == SEGMENT_EXTENSION));
    let color = compile_protocol(&cs, &heuristic_profile(QueryType::Color)).unwrap();
    assert!(color
        .directives(Stage::Decomposition)
        .any(|d| d == SURFACE_ISOLATION));
    assert!(!color
        .directives(Stage::Decomposition)
        .any(|d| d == DIRECTIONAL_CONSISTENCY));
}

#[test]
fn other_is_the_unspecialized_protocol() {
    let cs = ConstraintSet::bundled();
    let profile = heuristic_profile(QueryType::Other);
    assert!(profile.extra_directives.is_empty());
    let other = compile_protocol(&cs, &profile).unwrap();
    // exactly the records without an applicability list
    let unscoped = HeuristicProfile {
        query_type: QueryType::Other,
        extra_directives: Vec::new(),
        filters: vec![ConstraintFilter::ExcludeIds(
            cs.constraints()
                .iter()
                .filter(|c| c.applies_to_list().is_some())
                .map(|c| c.id().to_string())
                .collect(),
        )],
    };
    assert_eq!(other, compile_protocol(&cs, &unscoped).unwrap());
}

#[test]
fn scoped_constraints_follow_their_types() {
    let cs = ConstraintSet::bundled();
    let align = compile_protocol(&cs, &heuristic_profile(QueryType::Alignment)).unwrap();
    let length = compile_protocol(&cs, &heuristic_profile(QueryType::Length)).unwrap();
    let has = |p: &sqi_core::ConstraintProtocol, needle: &str| {
        p.directives(Stage::Decomposition)
            .any(|d| d.contains(needle))
    };
    assert!(has(&align, "occluder") && !has(&length, "treat it as an occluder"));
    assert!(has(&length, "arrowheads") && !has(&align, "arrowheads"));
}

#[test]
fn custom_rule_files_override_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rules");
    std::fs::write(
        &path,
        "# counts first\ncount := lines\nalignment := lines\n",
    )
    .unwrap();
    let rules = RuleTable::load(&path).unwrap();
    assert_eq!(rules.classify("Are the LINES straight?"), QueryType::Count);
    assert!(RuleTable::parse("shape := round").is_err());
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Rendered prompts are pinned per query type; set `UPDATE_GOLDEN=1` to
/// rewrite them after an intentional wording change.
#[test]
fn prompts_match_golden_files() {
    let image = ImageRef::from_path(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fixtures/poggendorff.png"
    ))
    .unwrap();
    let cs = ConstraintSet::bundled();
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut mismatched = Vec::new();
    for qt in QueryType::ALL {
        let q = IllusionQuery::new("golden", image.clone(), sample_question(qt), None).unwrap();
        let protocol = compile_protocol(&cs, &heuristic_profile(qt)).unwrap();
        let text = render_prompt(&protocol, &q).full_text() + "\n";
        let path = golden_dir().join(format!("{}.txt", qt.as_str()));
        if update {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&path, &text).unwrap();
        } else if std::fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            mismatched.push(path.display().to_string());
        }
    }
    assert!(
        mismatched.is_empty(),
        "golden prompts differ (rerun with UPDATE_GOLDEN=1): {mismatched:?}"
    );
}
