//! Command grammars: actions, argument slots with finite value sets, and
//! surface templates.
//!
//! Text format, one declaration per line (`#` starts a comment):
//!
//! ```text
//! slot speed = slow fast
//! action approach(speed): approach $speed | come $speed
//! action stop: stop | halt now
//! ```
//!
//! Every template of an action must use each of its slots exactly once, so
//! the spoken form always determines the full intent.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Intent {
    pub action: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

impl Intent {
    pub fn new(action: &str, args: &[(&str, &str)]) -> Self {
        Intent {
            action: action.to_string(),
            args: args
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl std::fmt::Display for Intent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.action)?;
        for (k, v) in &self.args {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TemplateItem {
    Word(String),
    Hole(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Action {
    pub name: String,
    pub slots: Vec<String>,
    pub templates: Vec<Vec<TemplateItem>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandGrammar {
    pub slots: Vec<Slot>,
    pub actions: Vec<Action>,
}

const GRABO_LIKE: &str = "\
# Robot-arm commands: 8 actions, 23 argument values, 36 valid intents.
slot speed = slow fast
slot angle = left right around
slot direction = forward backward
slot distance = little medium far
slot position = left right up down
slot color = red green blue yellow white black
slot height = low middle high

action approach(speed): approach $speed | come closer $speed
action grab(speed): grab $speed | take it $speed
action lift(height): lift $height | raise it $height
action drop(height): drop $height | release it $height
action turn(angle, speed): turn $angle $speed | rotate $speed $angle
action move(direction, distance): move $direction $distance | walk $distance $direction
action pointer(color): pointer $color | show $color please
action shift(position, speed): shift $position $speed | slide $speed $position
";

impl CommandGrammar {
    /// Grabo-scale grammar used by the synthetic benchmarks.
    pub fn grabo_like() -> Self {
        Self::parse(GRABO_LIKE, "<builtin>").expect("builtin grammar parses")
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            file: file.to_string(),
            line,
            msg,
        };
        let mut slots: Vec<Slot> = Vec::new();
        let mut actions: Vec<Action> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("slot ") {
                let (name, values) = rest
                    .split_once('=')
                    .ok_or_else(|| err(ln, "expected `slot NAME = VALUE ...`".into()))?;
                let name = ident(name.trim()).map_err(|m| err(ln, m))?;
                let values: Vec<String> = values.split_whitespace().map(str::to_string).collect();
                if values.is_empty() {
                    return Err(err(ln, format!("slot `{name}` has no values")));
                }
                for v in &values {
                    ident(v).map_err(|m| err(ln, m))?;
                }
                if values.iter().collect::<BTreeSet<_>>().len() != values.len() {
                    return Err(err(ln, format!("slot `{name}` repeats a value")));
                }
                if slots.iter().any(|s| s.name == name) {
                    return Err(err(ln, format!("slot `{name}` declared twice")));
                }
                slots.push(Slot { name, values });
            } else if let Some(rest) = line.strip_prefix("action ") {
                let (head, body) = rest
                    .split_once(':')
                    .ok_or_else(|| err(ln, "expected `action NAME(SLOTS): TEMPLATE | ...`".into()))?;
                let head = head.trim();
                let (name, slot_names) = match head.split_once('(') {
                    Some((n, args)) => {
                        let args = args
                            .strip_suffix(')')
                            .ok_or_else(|| err(ln, "unclosed `(`".into()))?;
                        let names: Vec<String> = args
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(str::to_string)
                            .collect();
                        (n.trim(), names)
                    }
                    None => (head, Vec::new()),
                };
                let name = ident(name).map_err(|m| err(ln, m))?;
                if actions.iter().any(|a| a.name == name) {
                    return Err(err(ln, format!("action `{name}` declared twice")));
                }
                for s in &slot_names {
                    if !slots.iter().any(|d| &d.name == s) {
                        return Err(err(ln, format!("unknown slot `{s}`")));
                    }
                }
                if slot_names.iter().collect::<BTreeSet<_>>().len() != slot_names.len() {
                    return Err(err(ln, format!("action `{name}` repeats a slot")));
                }
                let mut templates = Vec::new();
                for tpl in body.split('|') {
                    let items: Vec<TemplateItem> = tpl
                        .split_whitespace()
                        .map(|w| match w.strip_prefix('$') {
                            Some(h) => TemplateItem::Hole(h.to_string()),
                            None => TemplateItem::Word(w.to_string()),
                        })
                        .collect();
                    if items.is_empty() {
                        return Err(err(ln, "empty template".into()));
                    }
                    for s in &slot_names {
                        let uses = items
                            .iter()
                            .filter(|it| matches!(it, TemplateItem::Hole(h) if h == s))
                            .count();
                        if uses != 1 {
                            return Err(err(
                                ln,
                                format!("template `{}` must use `${s}` exactly once", tpl.trim()),
                            ));
                        }
                    }
                    for it in &items {
                        match it {
                            TemplateItem::Hole(h) if !slot_names.contains(h) => {
                                return Err(err(ln, format!("`${h}` is not a slot of `{name}`")))
                            }
                            TemplateItem::Word(w) => {
                                ident(w).map_err(|m| err(ln, m))?;
                            }
                            _ => {}
                        }
                    }
                    templates.push(items);
                }
                actions.push(Action {
                    name,
                    slots: slot_names,
                    templates,
                });
            } else {
                return Err(err(ln, format!("unrecognised declaration `{line}`")));
            }
        }
        if actions.is_empty() {
            return Err(err(text.lines().count().max(1), "grammar declares no actions".into()));
        }
        Ok(CommandGrammar { slots, actions })
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn action(&self, name: &str) -> Option<&Action> {
        self.actions.iter().find(|a| a.name == name)
    }

    /// All (action, argument assignment) combinations in declaration order.
    pub fn valid_intents(&self) -> Vec<Intent> {
        let mut out = Vec::new();
        for a in &self.actions {
            let mut partial: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
            for s in &a.slots {
                let slot = self.slot(s).expect("validated at parse");
                partial = partial
                    .into_iter()
                    .flat_map(|m| {
                        slot.values.iter().map(move |v| {
                            let mut m = m.clone();
                            m.insert(s.clone(), v.clone());
                            m
                        })
                    })
                    .collect();
            }
            out.extend(partial.into_iter().map(|args| Intent {
                action: a.name.clone(),
                args,
            }));
        }
        out
    }

    /// Surface tokens of `intent` using template `template`.
    pub fn realize(&self, intent: &Intent, template: usize) -> Result<Vec<String>> {
        let a = self
            .action(&intent.action)
            .ok_or_else(|| Error::Intent(format!("unknown action `{}`", intent.action)))?;
        let tpl = a.templates.get(template).ok_or_else(|| {
            Error::InvalidArgument(format!("action `{}` has no template {template}", a.name))
        })?;
        tpl.iter()
            .map(|it| match it {
                TemplateItem::Word(w) => Ok(w.clone()),
                TemplateItem::Hole(h) => intent
                    .args
                    .get(h)
                    .cloned()
                    .ok_or_else(|| Error::Intent(format!("missing argument `{h}`"))),
            })
            .collect()
    }

    /// Every word that can appear in an utterance, sorted.
    pub fn words(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for a in &self.actions {
            for t in &a.templates {
                for it in t {
                    match it {
                        TemplateItem::Word(w) => {
                            set.insert(w.clone());
                        }
                        TemplateItem::Hole(h) => {
                            set.extend(self.slot(h).expect("validated").values.iter().cloned());
                        }
                    }
                }
            }
        }
        set.into_iter().collect()
    }
}

fn ident(s: &str) -> std::result::Result<String, String> {
    if !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '\'')
    {
        Ok(s.to_string())
    } else {
        Err(format!("invalid name `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_grammar_shape() {
        let g = CommandGrammar::grabo_like();
        assert_eq!(g.actions.len(), 8);
        assert_eq!(g.valid_intents().len(), 36);
        let bits = g.actions.len() + g.slots.iter().map(|s| s.values.len()).sum::<usize>();
        assert_eq!(bits, 31);
    }

    #[test]
    fn every_intent_realizes_with_every_template() {
        let g = CommandGrammar::grabo_like();
        let words: BTreeSet<_> = g.words().into_iter().collect();
        for intent in g.valid_intents() {
            let a = g.action(&intent.action).unwrap();
            for t in 0..a.templates.len() {
                let toks = g.realize(&intent, t).unwrap();
                assert!(toks.iter().all(|w| words.contains(w)));
                for v in intent.args.values() {
                    assert!(toks.contains(v));
                }
            }
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("slot a = x y\naction go($a): go\n", 2),
            ("slot a = x y\n\naction go(a): go $a $a\n", 3),
            ("slot a = x y\naction go(b): go $b\n", 2),
            ("# only comments\nbogus line\n", 2),
            ("slot a =\naction go: go\n", 1),
            ("slot a = x\n", 1),
        ];
        for (text, line) in cases {
            match CommandGrammar::parse(text, "g.txt") {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn actions_without_slots() {
        let g = CommandGrammar::parse("action stop: stop | halt now\n", "x").unwrap();
        assert_eq!(g.valid_intents(), vec![Intent::new("stop", &[])]);
        assert_eq!(g.realize(&Intent::new("stop", &[]), 1).unwrap(), vec!["halt", "now"]);
    }
}
