mod common;

use std::fs;

use common::golden::{cases, config, render};
use proptest::prelude::*;
use troupe_core::config::PromptFormat;
use troupe_core::prompter::{apply_chat_template, mistral_turns, PromptData, PromptTurn, Role};

#[test]
fn rendered_prompts_match_golden_files() {
    let dir = common::fixtures().join("golden/v1");
    let bless = std::env::var_os("TROUPE_BLESS").is_some();
    let mut mismatches = Vec::new();
    for case in cases() {
        for (format, ext) in [
            (PromptFormat::Chatml, "chatml"),
            (PromptFormat::Mistral, "mistral"),
        ] {
            let (_, rendered) = render(&case, format);
            let path = dir.join(format!("{}.{ext}.txt", case.name));
            if bless {
                fs::write(&path, &rendered).unwrap();
                continue;
            }
            let golden =
                fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if golden != rendered {
                mismatches.push(format!(
                    "{}:\n--- golden\n{golden}\n--- rendered\n{rendered}",
                    path.display()
                ));
            }
        }
    }
    assert!(mismatches.is_empty(), "{}", mismatches.join("\n\n"));
}

#[test]
fn assembly_is_pure() {
    for case in cases() {
        assert_eq!(
            render(&case, PromptFormat::Chatml),
            render(&case, PromptFormat::Chatml)
        );
    }
}

#[test]
fn slot_order_and_epilogue_last() {
    let case = &cases()[4];
    let (prompt, _) = render(case, PromptFormat::Chatml);
    let s = &prompt.system_prompt;
    let pos = |needle: &str| {
        s.find(needle)
            .unwrap_or_else(|| panic!("{needle:?} missing from {s}"))
    };
    let order = [
        "You are Anders",
        "writers' room",
        "fishing village",
        "Measure twice",
        "USER TEXT=\"The boats stayed out.\"",
        "DEPUTY ANSWER=\"A limerick",
        "Share the DEPUTY ANSWER",
        "Current date and time: 2024-05-01 09:30",
    ];
    for pair in order.windows(2) {
        assert!(
            pos(pair[0]) < pos(pair[1]),
            "{:?} should precede {:?}",
            pair[0],
            pair[1]
        );
    }
    assert!(s.ends_with("Stay in character."));
}

#[test]
fn minimal_prompt_is_base_then_datetime() {
    let mut case = cases().remove(0);
    case.context.epilogue = "E".into();
    let (prompt, _) = render(&case, PromptFormat::Chatml);
    assert_eq!(
        prompt.system_prompt,
        format!(
            "{}\nCurrent date and time: 2024-05-01 09:30\nE",
            config("Nils").base_prompt
        )
    );
}

#[test]
fn locked_lines_never_appear_and_unlocked_appear_once() {
    for interactions in 0..=8 {
        let mut case = cases().remove(1);
        case.world = vec![("INTERACTIONS_Anders", interactions as f64)];
        let (prompt, _) = render(&case, PromptFormat::Chatml);
        let s = &prompt.system_prompt;
        for line in &config("Anders").knowledge {
            let unlocked = line
                .condition
                .as_ref()
                .is_none_or(|c| interactions as f64 >= c.value);
            assert_eq!(
                s.matches(line.line.as_str()).count(),
                usize::from(unlocked),
                "{} at {interactions}",
                line.line
            );
        }
    }
}

#[test]
fn each_decorator_tag_appears_at_most_once() {
    for case in cases() {
        let (prompt, _) = render(&case, PromptFormat::Chatml);
        for tag in ["USER TEXT=", "DEPUTY ANSWER=", "CHAT HISTORY="] {
            assert!(
                prompt.system_prompt.matches(tag).count() <= 1,
                "{} in {}",
                tag,
                case.name
            );
        }
    }
}

#[test]
fn history_roles_follow_the_speaker() {
    let (prompt, _) = render(&cases()[2], PromptFormat::Chatml);
    let roles: Vec<Role> = prompt.turns.iter().map(|t| t.role).collect();
    assert_eq!(
        roles,
        vec![Role::User, Role::User, Role::Assistant, Role::User]
    );
    assert_eq!(
        prompt.turns[1].content,
        "Greta: Darling, it was never yours."
    );
}

// Expected strings are written out by hand from the published chat templates
// of OpenHermes-2.5 (ChatML) and Mixtral-Instruct.
#[test]
fn two_turn_example_matches_published_templates() {
    let data = |format| PromptData {
        system_prompt: "You are a helpful assistant.".into(),
        turns: vec![
            PromptTurn::new(Role::User, "Hello!"),
            PromptTurn::new(Role::Assistant, "Hi there."),
            PromptTurn::new(Role::User, "How are you?"),
        ],
        format,
    };
    assert_eq!(
        apply_chat_template(&data(PromptFormat::Chatml)),
        "<|im_start|>system\nYou are a helpful assistant.<|im_end|>\n\
         <|im_start|>user\nHello!<|im_end|>\n\
         <|im_start|>assistant\nHi there.<|im_end|>\n\
         <|im_start|>user\nHow are you?<|im_end|>\n\
         <|im_start|>assistant\n"
    );
    assert_eq!(
        apply_chat_template(&data(PromptFormat::Mistral)),
        "<s>[INST] You are a helpful assistant.\n\nHello! [/INST] Hi there.</s>[INST] How are you? [/INST]"
    );
}

fn parse_chatml(rendered: &str) -> Vec<(String, String)> {
    let body = rendered
        .strip_suffix("<|im_start|>assistant\n")
        .expect("assistant opener");
    body.split("<|im_end|>\n")
        .filter(|s| !s.is_empty())
        .map(|block| {
            let block = block.strip_prefix("<|im_start|>").expect("turn start");
            let (role, content) = block.split_once('\n').expect("role line");
            (role.to_string(), content.to_string())
        })
        .collect()
}

fn parse_mistral(rendered: &str) -> Vec<(Role, String)> {
    let mut rest = rendered.strip_prefix("<s>").expect("bos");
    let mut out = Vec::new();
    while !rest.is_empty() {
        let r = rest.strip_prefix("[INST] ").expect("inst open");
        let (user, after) = r.split_once(" [/INST]").expect("inst close");
        out.push((Role::User, user.to_string()));
        rest = after;
        if let Some(a) = rest.strip_prefix(' ') {
            let (assistant, after) = a.split_once("</s>").expect("eos");
            out.push((Role::Assistant, assistant.to_string()));
            rest = after;
        }
    }
    out
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

fn turns_strategy() -> impl Strategy<Value = Vec<PromptTurn>> {
    prop::collection::vec(
        (prop::bool::ANY, "[a-zA-Z .,!?]{0,20}").prop_map(|(user, text)| {
            PromptTurn::new(if user { Role::User } else { Role::Assistant }, text)
        }),
        0..6,
    )
}

proptest! {
    #[test]
    fn chatml_round_trips(system in "[a-zA-Z .]{1,30}", turns in turns_strategy()) {
        let data = PromptData { system_prompt: system.clone(), turns: turns.clone(), format: PromptFormat::Chatml };
        let parsed = parse_chatml(&apply_chat_template(&data));
        let mut expected = vec![("system".to_string(), system)];
        expected.extend(turns.iter().map(|t| (role_name(t.role).to_string(), t.content.clone())));
        prop_assert_eq!(parsed, expected);
    }

    #[test]
    fn mistral_round_trips_to_alternating_turns(system in "[a-zA-Z.]{1,30}", turns in turns_strategy()) {
        let data = PromptData { system_prompt: system, turns, format: PromptFormat::Mistral };
        let merged = mistral_turns(&data);
        for pair in merged.windows(2) {
            prop_assert_ne!(pair[0].role, pair[1].role);
        }
        prop_assert_eq!(merged.first().map(|t| t.role), Some(Role::User));
        prop_assert_eq!(merged.last().map(|t| t.role), Some(Role::User));
        let parsed = parse_mistral(&apply_chat_template(&data));
        let expected: Vec<(Role, String)> = merged.into_iter().map(|t| (t.role, t.content)).collect();
        prop_assert_eq!(parsed, expected);
    }
}
