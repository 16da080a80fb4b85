use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{MetaAction, RelationEdge, RelationType, SceneState};

/// Response defect classes. The first five mirror the observed failure
/// modes E1..E5; `Malformed` is everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParseErrorKind {
    MissingField,
    InvalidAction,
    TupleOrderError,
    IllegalRelationType,
    MultipleActions,
    Malformed,
}

impl ParseErrorKind {
    pub const ALL: [ParseErrorKind; 6] = [
        ParseErrorKind::MissingField,
        ParseErrorKind::InvalidAction,
        ParseErrorKind::TupleOrderError,
        ParseErrorKind::IllegalRelationType,
        ParseErrorKind::MultipleActions,
        ParseErrorKind::Malformed,
    ];

    /// Lower rank wins when several defects coexist.
    fn precedence(self) -> u8 {
        match self {
            ParseErrorKind::MissingField => 0,
            ParseErrorKind::MultipleActions => 1,
            ParseErrorKind::InvalidAction => 2,
            ParseErrorKind::TupleOrderError => 3,
            ParseErrorKind::IllegalRelationType => 4,
            ParseErrorKind::Malformed => 5,
        }
    }

    /// `E1`..`E5` code, `None` for `Malformed`.
    pub fn code(self) -> Option<&'static str> {
        match self {
            ParseErrorKind::MissingField => Some("E1"),
            ParseErrorKind::InvalidAction => Some("E2"),
            ParseErrorKind::TupleOrderError => Some("E3"),
            ParseErrorKind::IllegalRelationType => Some("E4"),
            ParseErrorKind::MultipleActions => Some("E5"),
            ParseErrorKind::Malformed => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParseErrorKind::MissingField => "MissingField",
            ParseErrorKind::InvalidAction => "InvalidAction",
            ParseErrorKind::TupleOrderError => "TupleOrderError",
            ParseErrorKind::IllegalRelationType => "IllegalRelationType",
            ParseErrorKind::MultipleActions => "MultipleActions",
            ParseErrorKind::Malformed => "Malformed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub detail: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub action: MetaAction,
    pub relations: Vec<RelationEdge>,
    /// An alias or case normalization was needed to accept the response.
    pub normalized: bool,
}

/// Action spellings accepted besides the prompt vocabulary, after
/// upper-casing and mapping `-` and spaces to `_`.
const ACTION_ALIASES: [(&str, MetaAction); 9] = [
    ("IDLE", MetaAction::Idle),
    ("FASTER", MetaAction::Faster),
    ("ACCELERATE", MetaAction::Faster),
    ("SLOWER", MetaAction::Slower),
    ("DECELERATE", MetaAction::Slower),
    ("TURN_LEFT", MetaAction::TurnLeft),
    ("LANE_LEFT", MetaAction::TurnLeft),
    ("TURN_RIGHT", MetaAction::TurnRight),
    ("LANE_RIGHT", MetaAction::TurnRight),
];

/// Maps an action token to a [`MetaAction`]. The flag is true when the token
/// differs from the prompt spelling.
pub fn normalize_action(token: &str) -> Option<(MetaAction, bool)> {
    let token = token.trim();
    if let Some(a) = MetaAction::ALL.iter().find(|a| a.prompt_name() == token) {
        return Some((*a, false));
    }
    let key: String = token
        .chars()
        .map(|c| match c {
            '-' | ' ' => '_',
            c => c.to_ascii_uppercase(),
        })
        .collect();
    ACTION_ALIASES
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, a)| (*a, true))
}

fn normalize_relation(token: &str) -> Option<(RelationType, bool)> {
    if let Ok(r) = token.parse::<RelationType>() {
        return Some((r, false));
    }
    let squashed: String = token.chars().filter(|c| !matches!(c, '-' | '_' | ' ')).collect();
    RelationType::ALL
        .iter()
        .find(|r| r.name().eq_ignore_ascii_case(&squashed))
        .map(|r| (*r, true))
}

struct Defects {
    worst: Option<ParseError>,
}

impl Defects {
    fn add(&mut self, kind: ParseErrorKind, detail: String) {
        let replace = match &self.worst {
            None => true,
            Some(e) => kind.precedence() < e.kind.precedence(),
        };
        if replace {
            self.worst = Some(ParseError { kind, detail });
        }
    }
}

/// Splits `label: value` lines; the label is matched case-insensitively.
fn labelled<'a>(text: &'a str, labels: &[&str]) -> Vec<&'a str> {
    text.lines()
        .filter_map(|line| {
            let (label, value) = line.split_once(':')?;
            let label = label.trim();
            labels
                .iter()
                .any(|l| l.eq_ignore_ascii_case(label))
                .then_some(value.trim())
        })
        .collect()
}

fn split_actions(value: &str) -> Vec<&str> {
    value
        .split([',', '|', '/', ';', '&'])
        .flat_map(|part| part.split(" and "))
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Returns the parenthesised tuple bodies, or `None` if anything other than
/// separators appears between them.
fn tuple_bodies(list: &str) -> Option<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = list;
    loop {
        let trimmed = rest.trim_start_matches(|c: char| c.is_whitespace() || c == ',');
        if trimmed.is_empty() {
            return Some(out);
        }
        let body = trimmed.strip_prefix('(')?;
        let close = body.find(')')?;
        if body[..close].contains('(') {
            return None;
        }
        out.push(&body[..close]);
        rest = &body[close + 1..];
    }
}

/// Parses one oracle response against the scene it describes.
///
/// When several defects coexist the reported kind follows the precedence
/// `MissingField > MultipleActions > InvalidAction > TupleOrderError >
/// IllegalRelationType > Malformed`.
pub fn parse_response(text: &str, scene: &SceneState) -> Result<ParsedResponse, ParseError> {
    let mut defects = Defects { worst: None };
    let mut normalized = false;

    let action_lines = labelled(text, &["action"]);
    let relation_lines = labelled(text, &["relation", "relations"]);
    if action_lines.is_empty() {
        defects.add(ParseErrorKind::MissingField, "no `Action:` line".into());
    }
    if relation_lines.is_empty() {
        defects.add(ParseErrorKind::MissingField, "no `Relation:` line".into());
    }
    if action_lines.len() > 1 {
        defects.add(
            ParseErrorKind::MultipleActions,
            format!("{} `Action:` lines", action_lines.len()),
        );
    }
    if relation_lines.len() > 1 {
        defects.add(
            ParseErrorKind::Malformed,
            format!("{} `Relation:` lines", relation_lines.len()),
        );
    }

    let mut action = None;
    if let Some(value) = action_lines.first() {
        let tokens = split_actions(value);
        match tokens.len() {
            0 => defects.add(ParseErrorKind::MissingField, "empty action value".into()),
            1 => match normalize_action(tokens[0]) {
                Some((a, alias)) => {
                    action = Some(a);
                    normalized |= alias;
                }
                None => defects.add(
                    ParseErrorKind::InvalidAction,
                    format!("`{}` is not an allowed action", tokens[0]),
                ),
            },
            n => defects.add(
                ParseErrorKind::MultipleActions,
                format!("{n} actions in `{value}`"),
            ),
        }
    }

    let mut relations = Vec::new();
    if let Some(value) = relation_lines.first() {
        let inner = value
            .strip_prefix('[')
            .and_then(|v| v.strip_suffix(']'))
            .map(str::trim);
        match inner.and_then(tuple_bodies) {
            None => defects.add(
                ParseErrorKind::Malformed,
                format!("relation list `{value}` is not a bracketed tuple list"),
            ),
            Some(bodies) => {
                let mut seen = BTreeSet::new();
                for body in bodies {
                    let parts: Vec<&str> = body.split(',').map(str::trim).collect();
                    if parts.len() != 3 {
                        defects.add(
                            ParseErrorKind::Malformed,
                            format!("tuple `({body})` has arity {}", parts.len()),
                        );
                        continue;
                    }
                    let (Ok(first), Ok(second)) = (parts[0].parse::<u32>(), parts[1].parse::<u32>())
                    else {
                        defects.add(
                            ParseErrorKind::Malformed,
                            format!("tuple `({body})` has non-integer vehicle ids"),
                        );
                        continue;
                    };
                    let ego = scene.ego.id;
                    if first != ego {
                        if second == ego {
                            defects.add(
                                ParseErrorKind::TupleOrderError,
                                format!("tuple `({body})` lists the ego second"),
                            );
                        } else {
                            defects.add(
                                ParseErrorKind::Malformed,
                                format!("tuple `({body})` does not start with ego id {ego}"),
                            );
                        }
                    }
                    let relation = match normalize_relation(parts[2]) {
                        Some((r, alias)) => {
                            normalized |= alias;
                            Some(r)
                        }
                        None => {
                            defects.add(
                                ParseErrorKind::IllegalRelationType,
                                format!("`{}` is not a relation type", parts[2]),
                            );
                            None
                        }
                    };
                    if first != ego {
                        continue;
                    }
                    if !scene.others.iter().any(|o| o.id == second) {
                        defects.add(
                            ParseErrorKind::Malformed,
                            format!("unknown vehicle id {second}"),
                        );
                        continue;
                    }
                    if !seen.insert(second) {
                        defects.add(
                            ParseErrorKind::Malformed,
                            format!("vehicle {second} appears twice"),
                        );
                        continue;
                    }
                    if let Some(relation) = relation {
                        relations.push(RelationEdge {
                            ego_id: ego,
                            other_id: second,
                            relation,
                        });
                    }
                }
            }
        }
    }

    match (defects.worst, action) {
        (Some(e), _) => Err(e),
        (None, Some(action)) => Ok(ParsedResponse {
            action,
            relations,
            normalized,
        }),
        (None, None) => Err(ParseError {
            kind: ParseErrorKind::Malformed,
            detail: "no action recovered".into(),
        }),
    }
}
