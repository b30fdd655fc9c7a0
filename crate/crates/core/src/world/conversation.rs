//! Instruction/response templates grounded in concept scenes.

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::world::scene::{render_caption, ConceptScene};
use crate::world::vocab::{attribute_word, object_word, tokenize, TokenId, N_OBJECTS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub instruction: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub turns: Vec<Turn>,
}

/// Number of single-scene templates.
pub const TEMPLATE_COUNT: usize = 4;

pub const PROMPT_WHAT: &str = "what is shown ?";
pub const PROMPT_COLOR: &str = "what color is it ?";
pub const PROMPT_DESCRIBE: &str = "describe the object .";

fn turn(instruction: &str, response: &str) -> Turn {
    Turn {
        instruction: tokenize(instruction),
        response: tokenize(response),
    }
}

/// Template bank:
/// 0. caption: `what is shown ?` → `a {attr} {obj} .`
/// 1. caption, then `what color is it ?` → `it is {attr} .`
/// 2. yes/no probe: `is it a {obj'} ?` → `yes .` or `no .`
/// 3. description: `describe the object .` → `the {obj} is {attr} .`
pub fn make_conversation(
    scene: &ConceptScene,
    template: usize,
    rng: &mut Rng,
) -> Result<Conversation> {
    let caption = || Turn {
        instruction: tokenize(PROMPT_WHAT),
        response: render_caption(scene),
    };
    let obj = object_word(scene.object);
    let attr = attribute_word(scene.attribute);
    let turns = match template {
        0 => vec![caption()],
        1 => vec![caption(), turn(PROMPT_COLOR, &format!("it is {attr} ."))],
        2 => {
            let probe = if rng.bernoulli(0.5) {
                scene.object
            } else {
                (scene.object + 1 + rng.below(N_OBJECTS - 1)) % N_OBJECTS
            };
            let answer = if probe == scene.object {
                "yes ."
            } else {
                "no ."
            };
            vec![turn(&format!("is it a {} ?", object_word(probe)), answer)]
        }
        3 => vec![turn(PROMPT_DESCRIBE, &format!("the {obj} is {attr} ."))],
        other => return Err(Error::invalid(format!("unknown template {other}"))),
    };
    Ok(Conversation { turns })
}

/// Two-scene record for composed grounding: objects listed in ascending id order,
/// so the response does not depend on which scene came first.
pub fn make_composed_conversation(a: &ConceptScene, b: &ConceptScene) -> Result<Conversation> {
    if a.object == b.object {
        return Err(Error::invalid("composed scenes must have distinct objects"));
    }
    let (lo, hi) = (a.object.min(b.object), a.object.max(b.object));
    Ok(Conversation {
        turns: vec![turn(
            PROMPT_WHAT,
            &format!("a {} and a {} .", object_word(lo), object_word(hi)),
        )],
    })
}

/// Every instruction string the templates can emit.
pub fn template_strings() -> Vec<String> {
    let mut out = vec![
        PROMPT_WHAT.to_string(),
        PROMPT_COLOR.to_string(),
        PROMPT_DESCRIBE.to_string(),
    ];
    for o in 0..N_OBJECTS {
        out.push(format!("is it a {} ?", object_word(o)));
        for a in 0..crate::world::vocab::N_ATTRIBUTES {
            out.push(format!("a {} {} .", attribute_word(a), object_word(o)));
            out.push(format!("the {} is {} .", object_word(o), attribute_word(a)));
            out.push(format!("it is {} .", attribute_word(a)));
        }
        for p in o + 1..N_OBJECTS {
            out.push(format!("a {} and a {} .", object_word(o), object_word(p)));
        }
    }
    out.push("yes .".into());
    out.push("no .".into());
    out
}
