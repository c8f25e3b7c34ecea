mod support {
    pub mod prompt_fixture;
}

use bounty_core::triage::Setting;
use support::prompt_fixture::{read_golden, render};

#[test]
fn every_setting_matches_its_golden() {
    for setting in Setting::ALL {
        assert_eq!(render(setting), read_golden(setting), "setting {setting}");
    }
}

#[test]
fn only_invalid_references_are_annotated() {
    let prompt = render(Setting::WithTaxRag);
    assert_eq!(prompt.matches("Taxonomy type: ").count(), 1);
    assert!(!prompt.contains("Risk Assessment"));
}

#[test]
fn scope_settings_embed_the_legend() {
    for setting in Setting::ALL {
        let prompt = render(setting);
        assert_eq!(prompt.contains("Legend:"), setting.uses_scope(), "setting {setting}");
        assert_eq!(
            prompt.contains("- Asset name: legacy.example.com | Type: Domain | Coverage: False"),
            setting.uses_scope()
        );
    }
}
