use std::fmt;
use std::str::FromStr;

use prosody_core::labels::{LabelKind, Level};

use crate::error::CliError;

pub const TARGET_GRAMMAR: &str = "valid targets: `ref-encoder`, `predictor:P+R`, `predictor:P+N`, \
`predictor:W+R`, `predictor:W+N`, `predictor:H(W+R,P+R)`, `predictor:H(W+R,P+N)`, \
`predictor:H(W+N,P+R)`, `predictor:H(W+N,P+N)`; a hierarchical target may also be written \
as the pair `W+x,P+y`, and the `predictor:` prefix is optional";

/// A predictor configuration: flat at one level, or word-then-phoneme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelTarget {
    Flat { level: Level, kind: LabelKind },
    Hier { word: LabelKind, phoneme: LabelKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    RefEncoder,
    Predictor(ModelTarget),
}

fn letter(kind: LabelKind) -> char {
    match kind {
        LabelKind::Rule => 'R',
        LabelKind::Neural => 'N',
    }
}

impl ModelTarget {
    pub const ALL: [ModelTarget; 8] = [
        ModelTarget::Flat { level: Level::Phoneme, kind: LabelKind::Rule },
        ModelTarget::Flat { level: Level::Phoneme, kind: LabelKind::Neural },
        ModelTarget::Flat { level: Level::Word, kind: LabelKind::Rule },
        ModelTarget::Flat { level: Level::Word, kind: LabelKind::Neural },
        ModelTarget::Hier { word: LabelKind::Rule, phoneme: LabelKind::Rule },
        ModelTarget::Hier { word: LabelKind::Rule, phoneme: LabelKind::Neural },
        ModelTarget::Hier { word: LabelKind::Neural, phoneme: LabelKind::Rule },
        ModelTarget::Hier { word: LabelKind::Neural, phoneme: LabelKind::Neural },
    ];

    /// Whether word features are an input.
    pub fn uses_words(&self) -> bool {
        !matches!(self, ModelTarget::Flat { level: Level::Phoneme, .. })
    }

    /// The label kind trained at each level.
    pub fn stages(&self) -> Vec<(Level, LabelKind)> {
        match *self {
            ModelTarget::Flat { level, kind } => vec![(level, kind)],
            ModelTarget::Hier { word, phoneme } => {
                vec![(Level::Word, word), (Level::Phoneme, phoneme)]
            }
        }
    }

    /// File stem for artifacts; word-feature models carry their source.
    pub fn slug(&self, source: Option<&str>) -> String {
        let base = match *self {
            ModelTarget::Flat { level, kind } => {
                format!("{}_{}", &level.to_string()[..1], letter(kind).to_ascii_lowercase())
            }
            ModelTarget::Hier { word, phoneme } => format!(
                "h_w{}_p{}",
                letter(word).to_ascii_lowercase(),
                letter(phoneme).to_ascii_lowercase()
            ),
        };
        match (self.uses_words(), source) {
            (true, Some(s)) => format!("{base}.{s}"),
            _ => base,
        }
    }
}

impl fmt::Display for ModelTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ModelTarget::Flat { level, kind } => {
                let l = if level == Level::Word { 'W' } else { 'P' };
                write!(f, "{l}+{}", letter(kind))
            }
            ModelTarget::Hier { word, phoneme } => {
                write!(f, "H(W+{},P+{})", letter(word), letter(phoneme))
            }
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::RefEncoder => f.write_str("ref-encoder"),
            Target::Predictor(m) => write!(f, "predictor:{m}"),
        }
    }
}

fn parse_kind(c: &str) -> Option<LabelKind> {
    match c {
        "R" => Some(LabelKind::Rule),
        "N" => Some(LabelKind::Neural),
        _ => None,
    }
}

fn parse_flat(s: &str) -> Option<ModelTarget> {
    let (l, k) = s.split_once('+')?;
    let level = match l {
        "P" => Level::Phoneme,
        "W" => Level::Word,
        _ => return None,
    };
    Some(ModelTarget::Flat {
        level,
        kind: parse_kind(k)?,
    })
}

impl FromStr for ModelTarget {
    type Err = CliError;

    fn from_str(raw: &str) -> Result<Self, CliError> {
        let s: String = raw.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_uppercase();
        let s = s.strip_prefix("PREDICTOR:").unwrap_or(&s);
        // `H(W+x,P+y)` or the bare pair `W+x,P+y`
        let pair = s
            .strip_prefix("H(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.contains(',').then_some(s));
        let parsed = match pair {
            Some(inner) => inner.split_once(',').and_then(|(w, p)| {
                match (parse_flat(w)?, parse_flat(p)?) {
                    (
                        ModelTarget::Flat { level: Level::Word, kind: word },
                        ModelTarget::Flat { level: Level::Phoneme, kind: phoneme },
                    ) => Some(ModelTarget::Hier { word, phoneme }),
                    _ => None,
                }
            }),
            None => parse_flat(s),
        };
        parsed.ok_or_else(|| CliError::Usage(format!("unknown target `{raw}`; {TARGET_GRAMMAR}")))
    }
}

impl FromStr for Target {
    type Err = CliError;

    fn from_str(raw: &str) -> Result<Self, CliError> {
        if raw.trim().eq_ignore_ascii_case("ref-encoder") {
            return Ok(Target::RefEncoder);
        }
        raw.parse().map(Target::Predictor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_target_round_trips() {
        for m in ModelTarget::ALL {
            let t = Target::Predictor(m);
            assert_eq!(t.to_string().parse::<Target>().unwrap(), t);
            assert_eq!(m.to_string().parse::<ModelTarget>().unwrap(), m);
        }
        assert_eq!("ref-encoder".parse::<Target>().unwrap(), Target::RefEncoder);
    }

    #[test]
    fn spacing_and_case_are_forgiving() {
        assert_eq!(
            "predictor:H(W+R, P+N)".parse::<ModelTarget>().unwrap(),
            ModelTarget::Hier { word: LabelKind::Rule, phoneme: LabelKind::Neural }
        );
        assert_eq!(
            "predictor:W+N,P+R".parse::<ModelTarget>().unwrap(),
            ModelTarget::Hier { word: LabelKind::Neural, phoneme: LabelKind::Rule }
        );
        assert_eq!(
            "w+r".parse::<ModelTarget>().unwrap(),
            ModelTarget::Flat { level: Level::Word, kind: LabelKind::Rule }
        );
    }

    #[test]
    fn bad_targets_list_the_grammar() {
        for bad in ["", "X+R", "P+Q", "H(P+R,W+R)", "H(W+R)", "predictor:", "P+N,W+R"] {
            let e = bad.parse::<Target>().unwrap_err();
            assert_eq!(e.exit_code(), 1);
            assert!(e.to_string().contains("valid targets"), "{bad}");
        }
    }

    #[test]
    fn slugs_are_distinct() {
        let mut seen = std::collections::BTreeSet::new();
        for m in ModelTarget::ALL {
            assert!(seen.insert(m.slug(Some("ft"))));
        }
        assert_eq!(ModelTarget::Flat { level: Level::Phoneme, kind: LabelKind::Rule }.slug(Some("ft")), "p_r");
        assert_eq!(ModelTarget::Hier { word: LabelKind::Rule, phoneme: LabelKind::Neural }.slug(Some("ft")), "h_wr_pn.ft");
    }
}
