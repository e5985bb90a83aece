use std::path::Path;

use promptrec::data::{Catalog, DiversityTag, KnowledgeTags, NewsArticle, PopularityTag, TrainSample};
use promptrec::prompts::{render_sample, TemplateKind, Templates};

fn article(id: &str, category: &str, subcategory: &str, title: &str) -> NewsArticle {
    NewsArticle {
        news_id: id.into(),
        category: category.into(),
        subcategory: subcategory.into(),
        title: title.into(),
        abstract_text: None,
    }
}

fn catalog() -> Catalog {
    let mut c = Catalog::new();
    for a in [
        article("N1", "sports", "football", "Team Wins Final"),
        article("N2", "weather", "storms", "Storm Hits Coast"),
        article("N3", "sports", "tennis", "Open Champion Crowned"),
        article("N4", "movies", "cinema", "Sequel Breaks Records"),
        article("N5", "sports", "football", "Team wins final"),
    ] {
        c.insert(a).unwrap();
    }
    c
}

fn sample(history: &[&str], candidate: &str) -> TrainSample {
    TrainSample {
        impression_id: "1".into(),
        user_id: "U1".into(),
        timestamp: 0,
        history: history.iter().map(|s| s.to_string()).collect(),
        candidate: candidate.into(),
        label: true,
        tags: KnowledgeTags {
            diversity: Some(DiversityTag::Diverse),
            popularity: Some(PopularityTag::Popular),
        },
    }
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prompts").join(format!("{name}.txt"));
    std::fs::read_to_string(&path).unwrap().trim_end().to_string()
}

fn render(kind: &str, s: &TrainSample) -> String {
    let kind = TemplateKind::parse(kind).unwrap();
    render_sample(kind, &Templates::default(), &catalog(), s).unwrap().input_text
}

#[test]
fn every_template_kind_matches_its_fixture() {
    let s = sample(&["N1", "N2", "N3"], "N4");
    let kinds = TemplateKind::all();
    assert_eq!(kinds.len(), 8);
    for kind in kinds {
        let label = kind.label();
        assert_eq!(render(&label, &s), golden(&label), "template {label}");
    }
}

#[test]
fn empty_history_fixture() {
    assert_eq!(render("1-1", &sample(&[], "N4")), golden("1-1-empty"));
}

#[test]
fn shared_titles_are_disambiguated() {
    assert_eq!(render("1-1", &sample(&["N1", "N3"], "N5")), golden("1-1-shared-title"));
}

#[test]
fn target_is_yes_or_no() {
    let s = sample(&["N1"], "N4");
    let kind = TemplateKind::default();
    assert_eq!(render_sample(kind, &Templates::default(), &catalog(), &s).unwrap().target_text, "yes");
    let neg = TrainSample { label: false, ..s };
    assert_eq!(render_sample(kind, &Templates::default(), &catalog(), &neg).unwrap().target_text, "no");
}
