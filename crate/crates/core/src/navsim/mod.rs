//! Synthetic social-navigation scenes, rule-based ground-truth actions and
//! the multi-turn conversations the policy is trained on.

mod dataset;
mod scene;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    augment_records, build_dataset, derive_seed, read_records, write_records, Dataset,
    DatasetHeader, DatasetRecord, FORMAT_VERSION,
};
pub use scene::{
    generate_scene, Cell, Difficulty, Heading, Pedestrian, Scene, SceneFlags, Side,
    CORRIDOR_HALF_WIDTH, HORIZON, SIDE_STRIP,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Motion {
    ContinueStraight,
    SlightLeftTurn,
    SlightRightTurn,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speed {
    Slow,
    Moderate,
}

/// A motion instruction rendered as `"<motion> at <speed> speed"` or `"stop"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSentence {
    pub motion: Motion,
    pub speed: Option<Speed>,
}

impl ActionSentence {
    pub fn stop() -> Self {
        Self {
            motion: Motion::Stop,
            speed: None,
        }
    }

    pub fn render(&self) -> String {
        let motion = match self.motion {
            Motion::ContinueStraight => "continue straight",
            Motion::SlightLeftTurn => "slight left turn",
            Motion::SlightRightTurn => "slight right turn",
            Motion::Stop => return "stop".to_string(),
        };
        let speed = match self.speed.unwrap_or(Speed::Moderate) {
            Speed::Slow => "slow",
            Speed::Moderate => "moderate",
        };
        format!("{motion} at {speed} speed")
    }

    pub fn parse(text: &str) -> Option<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words == ["stop"] {
            return Some(Self::stop());
        }
        let (motion, rest) = match words.as_slice() {
            ["continue", "straight", rest @ ..] => (Motion::ContinueStraight, rest),
            ["slight", "left", "turn", rest @ ..] => (Motion::SlightLeftTurn, rest),
            ["slight", "right", "turn", rest @ ..] => (Motion::SlightRightTurn, rest),
            _ => return None,
        };
        let speed = match rest {
            ["at", "slow", "speed"] => Speed::Slow,
            ["at", "moderate", "speed"] => Speed::Moderate,
            _ => return None,
        };
        Some(Self {
            motion,
            speed: Some(speed),
        })
    }

    /// Every renderable action.
    pub fn all() -> Vec<Self> {
        let mut out = vec![Self::stop()];
        for motion in [
            Motion::ContinueStraight,
            Motion::SlightLeftTurn,
            Motion::SlightRightTurn,
        ] {
            for speed in [Speed::Slow, Speed::Moderate] {
                out.push(Self {
                    motion,
                    speed: Some(speed),
                });
            }
        }
        out
    }
}

/// Rule-based expert: crossing pedestrian → stop; stationary obstruction →
/// slow slight turn toward the free side (stop if neither side is free);
/// otherwise continue straight at moderate speed.
pub fn ground_truth_action(scene: &Scene) -> ActionSentence {
    let flags = scene.flags();
    if flags.crossing {
        return ActionSentence::stop();
    }
    if flags.blocked {
        let motion = match flags.free_side {
            Side::Left => Motion::SlightLeftTurn,
            Side::Right => Motion::SlightRightTurn,
            Side::None => return ActionSentence::stop(),
        };
        return ActionSentence {
            motion,
            speed: Some(Speed::Slow),
        };
    }
    ActionSentence {
        motion: Motion::ContinueStraight,
        speed: Some(Speed::Moderate),
    }
}

pub const LIGHTING: [&str; 4] = ["bright", "dim", "dark", "golden"];
pub const WEATHER: [&str; 5] = ["sunny", "rainy", "foggy", "snowy", "cloudy"];

/// Lighting and weather adjectives used to render a description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Style {
    pub lighting: usize,
    pub weather: usize,
}

impl Style {
    pub fn all() -> Vec<Style> {
        (0..LIGHTING.len())
            .flat_map(|lighting| (0..WEATHER.len()).map(move |weather| Style { lighting, weather }))
            .collect()
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            lighting: rng.gen_range(0..LIGHTING.len()),
            weather: rng.gen_range(0..WEATHER.len()),
        }
    }

    pub fn words(&self) -> [&'static str; 2] {
        [LIGHTING[self.lighting], WEATHER[self.weather]]
    }

    fn parse(a: &str, b: &str) -> Option<Self> {
        Some(Self {
            lighting: LIGHTING.iter().position(|w| *w == a)?,
            weather: WEATHER.iter().position(|w| *w == b)?,
        })
    }
}

/// Style-free part of a description: corridor status, crowd position and
/// pedestrian motion. The crowd is reported on the side it extends to,
/// which is the side opposite the free passage.
pub fn describe_geometry(scene: &Scene) -> String {
    let f = scene.flags();
    let path = if f.blocked { "blocked" } else { "clear" };
    let crowd = if !f.blocked {
        "no crowd".to_string()
    } else {
        match f.free_side.opposite() {
            Side::Left => "crowd on the left".into(),
            Side::Right => "crowd on the right".into(),
            Side::None => "crowd on both sides".into(),
        }
    };
    let crossing = if f.crossing {
        "person crossing"
    } else {
        "nobody crossing"
    };
    format!("path ahead {path} . {crowd} . {crossing} .")
}

pub fn describe_scene(scene: &Scene, style: Style) -> String {
    let [light, weather] = style.words();
    format!("{light} {weather} scene . {}", describe_geometry(scene))
}

/// Flags recovered from the text of a description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedDescription {
    pub style: Option<Style>,
    pub blocked: bool,
    /// Side the crowd extends to.
    pub crowd_side: Option<Side>,
    pub crossing: bool,
}

/// Parses a description (with or without the style prefix).
pub fn parse_description(text: &str) -> Option<ParsedDescription> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let (style, rest) = match words.as_slice() {
        [a, b, "scene", ".", rest @ ..] => (Some(Style::parse(a, b)?), rest),
        rest => (None, rest),
    };
    let (blocked, rest) = match rest {
        ["path", "ahead", "clear", ".", rest @ ..] => (false, rest),
        ["path", "ahead", "blocked", ".", rest @ ..] => (true, rest),
        _ => return None,
    };
    let (crowd_side, rest) = match rest {
        ["no", "crowd", ".", rest @ ..] => (None, rest),
        ["crowd", "on", "the", "left", ".", rest @ ..] => (Some(Side::Left), rest),
        ["crowd", "on", "the", "right", ".", rest @ ..] => (Some(Side::Right), rest),
        ["crowd", "on", "both", "sides", ".", rest @ ..] => (Some(Side::None), rest),
        _ => return None,
    };
    let crossing = match rest {
        ["person", "crossing", "."] => true,
        ["nobody", "crossing", "."] => false,
        _ => return None,
    };
    Some(ParsedDescription {
        style,
        blocked,
        crowd_side,
        crossing,
    })
}

pub const SUMMARY_QUESTION: &str = "describe the scene .";
pub const ACTION_QUESTION: &str = "what should the robot do ?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompt,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Alternating prompt/response turns starting with a prompt and ending with
/// a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Turn>", into = "Vec<Turn>")]
pub struct Conversation {
    turns: Vec<Turn>,
}

impl TryFrom<Vec<Turn>> for Conversation {
    type Error = Error;

    fn try_from(turns: Vec<Turn>) -> Result<Self> {
        Conversation::new(turns)
    }
}

impl From<Conversation> for Vec<Turn> {
    fn from(c: Conversation) -> Self {
        c.turns
    }
}

impl Conversation {
    pub fn new(turns: Vec<Turn>) -> Result<Self> {
        let well_formed = !turns.is_empty()
            && turns.len().is_multiple_of(2)
            && turns.iter().enumerate().all(|(i, t)| {
                t.role
                    == if i % 2 == 0 {
                        Role::Prompt
                    } else {
                        Role::Response
                    }
            });
        if !well_formed {
            return Err(Error::Contract(
                "conversation must alternate prompt/response, starting with a prompt".into(),
            ));
        }
        Ok(Self { turns })
    }

    /// Two-turn exchange: scene summary, then the next action.
    pub fn multi_turn(description: &str, action: &ActionSentence) -> Self {
        let summary = strip_style(description);
        let turn = |role, text: String| Turn { role, text };
        Self {
            turns: vec![
                turn(Role::Prompt, format!("{description} {SUMMARY_QUESTION}")),
                turn(Role::Response, summary),
                turn(Role::Prompt, ACTION_QUESTION.to_string()),
                turn(Role::Response, action.render()),
            ],
        }
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn final_response(&self) -> &str {
        &self.turns.last().expect("non-empty").text
    }

    pub(crate) fn pop_final_response(&mut self) {
        self.turns.pop();
    }

    /// Collapses the conversation to one exchange: the first and last
    /// prompts joined, answered by the final response. Intermediate
    /// responses and prompts are dropped.
    pub fn single_turn(&self) -> Self {
        let n = self.turns.len();
        if n == 2 {
            return self.clone();
        }
        let prompt = format!("{} {}", self.turns[0].text, self.turns[n - 2].text);
        Self {
            turns: vec![
                Turn {
                    role: Role::Prompt,
                    text: prompt,
                },
                self.turns[n - 1].clone(),
            ],
        }
    }

    /// Re-renders the scene description under a different lighting/weather
    /// style. Only the two style adjectives change.
    pub fn augment<R: Rng>(&self, rng: &mut R) -> Self {
        let mut out = self.clone();
        let first = &mut out.turns[0].text;
        let words: Vec<&str> = first.split_whitespace().collect();
        let Some(current) = words.get(0..2).and_then(|w| Style::parse(w[0], w[1])) else {
            return out;
        };
        let choices: Vec<Style> = Style::all().into_iter().filter(|s| *s != current).collect();
        let next = *choices.choose(rng).expect("more than one style");
        let [a, b] = next.words();
        let rest = words[2..].join(" ");
        *first = format!("{a} {b} {rest}");
        out
    }
}

fn strip_style(description: &str) -> String {
    let words: Vec<&str> = description.split_whitespace().collect();
    match words.as_slice() {
        [a, b, "scene", ".", rest @ ..] if Style::parse(a, b).is_some() => rest.join(" "),
        _ => description.to_string(),
    }
}

/// Every word the generator can emit.
pub fn lexicon() -> Vec<String> {
    let mut words: Vec<String> = LIGHTING
        .iter()
        .chain(WEATHER.iter())
        .map(|s| s.to_string())
        .collect();
    let templates = [
        "scene . path ahead clear blocked",
        "no crowd on the left right both sides",
        "person nobody crossing",
        SUMMARY_QUESTION,
        ACTION_QUESTION,
    ];
    for t in templates {
        words.extend(t.split_whitespace().map(str::to_string));
    }
    for a in ActionSentence::all() {
        words.extend(a.render().split_whitespace().map(str::to_string));
    }
    words.sort();
    words.dedup();
    words
}
