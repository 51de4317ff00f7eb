//! The six fixture prompt contexts behind the golden files.

use troupe_core::chat::{ChatMessage, MessageKind};
use troupe_core::companion::{ActiveMood, CompanionRuntime, RuntimeId};
use troupe_core::config::{CompanionConfig, ModelConfig, PromptFormat};
use troupe_core::prompter::{apply_chat_template, PromptData, PromptInput, Prompter};
use troupe_core::{Context, WorldState};

pub struct Case {
    pub name: &'static str,
    pub companion: &'static str,
    pub mood: Option<&'static str>,
    pub situation: &'static str,
    pub world: Vec<(&'static str, f64)>,
    pub context: Context,
    pub history: Vec<(&'static str, &'static str)>,
    pub motto_roll: f64,
}

pub fn msg(sender: &str, body: &str) -> ChatMessage {
    ChatMessage {
        sender: sender.into(),
        body: body.into(),
        kind: MessageKind::Message,
        conversation_id: "conv-0".into(),
        timestamp: super::start_time(),
    }
}

pub fn cases() -> Vec<Case> {
    let mut text_job = Context::new("conv-0");
    text_job.text = "The tide came in.\n\nThe boats stayed out.".into();
    text_job.job = "Rewrite the USER TEXT as a limerick.".into();
    text_job.companion_names = "Greta, Nils".into();

    let mut answer = Context::new("conv-0");
    answer.paragraph = "The boats stayed out.".into();
    answer.answer = "A limerick about boats that would not come home.".into();
    answer.job = "Share the DEPUTY ANSWER with the user in your own words.".into();
    answer.epilogue = "Stay in character.".into();

    let mut persona = Context::new("conv-0");
    persona.persona = "You are Greta, speaking as the ghost of Hamlet's father.".into();
    persona.mood = "nostalgic".into();
    persona.knowledge = "The user is rehearsing for an audition.".into();
    persona.companion_names = "Anders".into();

    vec![
        Case {
            name: "minimal",
            companion: "Nils",
            mood: None,
            situation: "",
            world: vec![],
            context: Context::new("conv-0"),
            history: vec![],
            motto_roll: 0.0,
        },
        Case {
            name: "mood_situation",
            companion: "Anders",
            mood: Some("grumpy"),
            situation: "writers-room",
            world: vec![],
            context: Context::new("conv-0"),
            history: vec![("User", "Morning, Anders.")],
            motto_roll: 0.0,
        },
        Case {
            name: "knowledge_unlocked",
            companion: "Anders",
            mood: Some("happy"),
            situation: "water-cooler",
            world: vec![("INTERACTIONS_Anders", 6.0)],
            context: Context::new("conv-0"),
            history: vec![
                ("User", "Anyone seen my stapler?"),
                ("Greta", "Darling, it was never yours."),
                ("Anders", "Second drawer."),
                ("User", "Thanks, both of you."),
            ],
            motto_roll: 0.9,
        },
        Case {
            name: "user_text_job",
            companion: "Anders",
            mood: None,
            situation: "writers-room",
            world: vec![("INTERACTIONS_Anders", 3.0)],
            context: text_job,
            history: vec![("User", "Can you make this funnier?")],
            motto_roll: 0.0,
        },
        Case {
            name: "deputy_answer",
            companion: "Anders",
            mood: None,
            situation: "writers-room",
            world: vec![],
            context: answer,
            history: vec![("User", "Limerick, please.")],
            motto_roll: 0.5,
        },
        Case {
            name: "persona_override",
            companion: "Greta",
            mood: None,
            situation: "water-cooler",
            world: vec![],
            context: persona,
            history: vec![
                ("Greta", "Remember me!"),
                ("User", "Again, with feeling."),
                ("Greta", "REMEMBER me!"),
            ],
            motto_roll: 0.0,
        },
    ]
}

pub fn config(name: &str) -> CompanionConfig {
    super::fixture_configs()
        .into_iter()
        .find(|c| c.name == name)
        .unwrap()
}

pub fn render(case: &Case, format: PromptFormat) -> (PromptData, String) {
    let model = ModelConfig {
        prompt_format: format,
        ..ModelConfig::default()
    };
    let mut runtime =
        CompanionRuntime::with_chain(RuntimeId(1), config(case.companion), model, vec![]);
    if let Some(m) = case.mood {
        runtime.set_mood(ActiveMood::Labelled(m.into()));
    }
    let mut world = WorldState::new();
    for (k, v) in &case.world {
        world.set(*k, *v).unwrap();
    }
    let history: Vec<ChatMessage> = case.history.iter().map(|(s, b)| msg(s, b)).collect();
    let prompt = Prompter::default().assemble(&PromptInput {
        context: &case.context,
        world: &world,
        companion: &runtime,
        history: &history,
        situation_id: case.situation,
        now: super::start_time(),
        motto_roll: case.motto_roll,
    });
    let rendered = apply_chat_template(&prompt);
    (prompt, rendered)
}
