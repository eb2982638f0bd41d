//! Converter for dictionaries written as Python literals:
//!
//! ```text
//! recovery_paths = {
//!   # comment
//!   "401_403_407": [
//!     {"from": "Assistant", "value": ("Thoughts: ... " "continued")},
//!     {"from": "function", "value": "Credentials checked."},
//!   ],
//! }
//! ```
//!
//! Each top-level key becomes a [`BranchSpec`] whose dialogue template is the
//! listed exchange and whose script is the built-in policy of its first kind.

use serde_json::{Map, Value};

use super::{default_script_for_kind, BankError, BranchSpec, DialogueTurn, DictionaryFile};
use crate::taxonomy::Catalog;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Str(String),
    Num(f64),
    Ident(String),
    Punct(char),
}

fn tokenize(src: &str) -> Result<Vec<Tok>, BankError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '{' | '}' | '[' | ']' | '(' | ')' | ':' | ',' | '=' => {
                out.push(Tok::Punct(c));
                i += 1;
            }
            '"' | '\'' => {
                let quote = c;
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(&ch) = chars.get(i) else {
                        return Err(BankError::Parse("unterminated string literal".into()));
                    };
                    i += 1;
                    match ch {
                        '\\' => {
                            let esc =
                                chars.get(i).copied().ok_or_else(|| BankError::Parse("dangling escape".into()))?;
                            i += 1;
                            s.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                'r' => '\r',
                                other => other,
                            });
                        }
                        ch if ch == quote => break,
                        ch => s.push(ch),
                    }
                }
                out.push(Tok::Str(s));
            }
            c if c.is_ascii_digit() || c == '-' => {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let n = text.parse::<f64>().map_err(|_| BankError::Parse(format!("bad number `{text}`")))?;
                out.push(Tok::Num(n));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Tok::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(BankError::Parse(format!("unexpected character `{other}`"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Result<Tok, BankError> {
        let tok = self.toks.get(self.pos).cloned().ok_or_else(|| BankError::Parse("unexpected end of input".into()))?;
        self.pos += 1;
        Ok(tok)
    }

    fn expect(&mut self, p: char) -> Result<(), BankError> {
        match self.next()? {
            Tok::Punct(c) if c == p => Ok(()),
            other => Err(BankError::Parse(format!("expected `{p}`, found {other:?}"))),
        }
    }

    fn eat(&mut self, p: char) -> bool {
        if self.peek() == Some(&Tok::Punct(p)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn value(&mut self) -> Result<Value, BankError> {
        match self.next()? {
            Tok::Str(mut s) => {
                // adjacent literals concatenate
                while let Some(Tok::Str(more)) = self.peek() {
                    s.push_str(more);
                    self.pos += 1;
                }
                Ok(Value::String(s))
            }
            Tok::Num(n) => Ok(serde_json::Number::from_f64(n).map(Value::Number).unwrap_or(Value::Null)),
            Tok::Ident(id) => match id.as_str() {
                "True" => Ok(Value::Bool(true)),
                "False" => Ok(Value::Bool(false)),
                "None" => Ok(Value::Null),
                other => Err(BankError::Parse(format!("unexpected identifier `{other}`"))),
            },
            Tok::Punct('{') => {
                let mut map = Map::new();
                while !self.eat('}') {
                    let key = match self.value()? {
                        Value::String(s) => s,
                        other => return Err(BankError::Parse(format!("non-string key {other}"))),
                    };
                    self.expect(':')?;
                    let v = self.value()?;
                    map.insert(key, v);
                    if !self.eat(',') {
                        self.expect('}')?;
                        break;
                    }
                }
                Ok(Value::Object(map))
            }
            Tok::Punct(open @ ('[' | '(')) => {
                let close = if open == '[' { ']' } else { ')' };
                let mut items = Vec::new();
                let mut saw_comma = false;
                while !self.eat(close) {
                    items.push(self.value()?);
                    if self.eat(',') {
                        saw_comma = true;
                    } else {
                        self.expect(close)?;
                        break;
                    }
                }
                if open == '(' && !saw_comma && items.len() == 1 {
                    return Ok(items.pop().unwrap_or(Value::Null));
                }
                Ok(Value::Array(items))
            }
            other => Err(BankError::Parse(format!("unexpected token {other:?}"))),
        }
    }
}

/// Parses a Python literal, optionally preceded by `name =`.
pub fn parse_python_literal(src: &str) -> Result<Value, BankError> {
    let toks = tokenize(src)?;
    let mut parser = Parser { toks, pos: 0 };
    if matches!(parser.peek(), Some(Tok::Ident(_))) && parser.toks.get(1) == Some(&Tok::Punct('=')) {
        parser.pos = 2;
    }
    let value = parser.value()?;
    if parser.pos != parser.toks.len() {
        return Err(BankError::Parse("trailing input after literal".into()));
    }
    Ok(value)
}

/// Converts a Python `recovery_paths` dictionary into branch entries.
pub fn convert_python_dictionary(src: &str, version: &str) -> Result<DictionaryFile, BankError> {
    let Value::Object(root) = parse_python_literal(src)? else {
        return Err(BankError::Parse("top-level literal must be a dict".into()));
    };
    let catalog = Catalog::shipped();
    let mut branches = Vec::with_capacity(root.len());
    for (key, turns) in root {
        let Value::Array(turns) = turns else {
            return Err(BankError::Parse(format!("branch `{key}` must be a list")));
        };
        let mut dialogue = Vec::with_capacity(turns.len());
        for turn in turns {
            let from = turn.get("from").and_then(Value::as_str);
            let value = turn.get("value").and_then(Value::as_str);
            match (from, value) {
                (Some(from), Some(value)) => {
                    dialogue.push(DialogueTurn { from: from.to_string(), value: value.to_string() })
                }
                _ => return Err(BankError::Parse(format!("branch `{key}` has a turn without from/value"))),
            }
        }
        let mut branch = BranchSpec {
            key: key.clone(),
            kinds: None,
            script: Vec::new(),
            rationale: String::new(),
            dialogue_template: Some(dialogue),
        };
        let kinds = match branch.member_kinds() {
            Ok(kinds) => kinds,
            Err(_) if catalog.get(&key).is_some() => {
                branch.kinds = Some(vec![key.clone()]);
                vec![key.clone()]
            }
            Err(e) => return Err(e),
        };
        branch.script = default_script_for_kind(&kinds[0]);
        branch.rationale = branch
            .dialogue_template
            .as_ref()
            .and_then(|d| d.iter().find(|t| t.from.eq_ignore_ascii_case("assistant")))
            .map(|t| first_sentence(&t.value))
            .unwrap_or_default();
        branches.push(branch);
    }
    Ok(DictionaryFile { version: version.to_string(), exemplars: Vec::new(), branches })
}

fn first_sentence(text: &str) -> String {
    let body = text.strip_prefix("Thoughts:").unwrap_or(text).trim();
    let end = body.find(". ").map(|i| i + 1).unwrap_or(body.len());
    body[..end].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
recovery_paths = {
  # Branch: auth
  "401_403_407": [
    {
      "from": "Assistant",
      "value": (
        "Thoughts: Credentials were rejected. Check them.\n\n"
        'Action: stop and report.'
      )
    },
    {"from": "function", "value": "Credentials checked."},
  ],
  "timeout": [{"from": "Assistant", "value": "Thoughts: Slow upstream. Retry."}],
}
"#;

    #[test]
    fn parses_literal_with_concatenation() {
        let v = parse_python_literal(SAMPLE).unwrap();
        let text = v["401_403_407"][0]["value"].as_str().unwrap();
        assert!(text.starts_with("Thoughts: Credentials were rejected."));
        assert!(text.ends_with("Action: stop and report."));
        assert_eq!(v["401_403_407"][1]["from"], "function");
    }

    #[test]
    fn converts_branches() {
        let file = convert_python_dictionary(SAMPLE, "t").unwrap();
        assert_eq!(file.branches.len(), 2);
        let auth = file.branches.iter().find(|b| b.key == "401_403_407").unwrap();
        assert_eq!(auth.member_kinds().unwrap().len(), 3);
        assert_eq!(auth.script, default_script_for_kind("http_401"));
        assert_eq!(auth.rationale, "Credentials were rejected.");
        let timeout = file.branches.iter().find(|b| b.key == "timeout").unwrap();
        assert_eq!(timeout.member_kinds().unwrap(), vec!["timeout"]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_python_literal("{\"a\": ").is_err());
        assert!(convert_python_dictionary("{\"nonsense_key\": []}", "t").is_err());
    }
}
