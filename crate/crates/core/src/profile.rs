//! The restricted JSON profile shared by architecture files and experiment
//! configs: objects, arrays, integers, booleans, and lowercase strings.
//! Floats and nulls are rejected; real-valued settings are written as
//! decimal strings such as `"0.0006"`.

use std::fmt;

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Field { path: String, message: String },
}

impl ProfileError {
    pub fn field(path: &Path, message: impl Into<String>) -> Self {
        ProfileError::Field {
            path: path.to_string(),
            message: message.into(),
        }
    }

    /// The field path for structural errors, `None` for syntax errors.
    pub fn path(&self) -> Option<&str> {
        match self {
            ProfileError::Field { path, .. } => Some(path),
            ProfileError::Syntax { .. } => None,
        }
    }
}

/// Dotted/indexed location inside a document, e.g. `layers[2].skip_inputs`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Path(Vec<Segment>);

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Key(String),
    Index(usize),
}

impl Path {
    pub fn root() -> Self {
        Path(Vec::new())
    }

    pub fn key(&self, key: &str) -> Path {
        let mut p = self.clone();
        p.0.push(Segment::Key(key.to_string()));
        p
    }

    pub fn index(&self, i: usize) -> Path {
        let mut p = self.clone();
        p.0.push(Segment::Index(i));
        p
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "<root>");
        }
        for (i, s) in self.0.iter().enumerate() {
            match s {
                Segment::Key(k) if i == 0 => write!(f, "{k}")?,
                Segment::Key(k) => write!(f, ".{k}")?,
                Segment::Index(n) => write!(f, "[{n}]")?,
            }
        }
        Ok(())
    }
}

/// Parses `text` and checks it against the profile.
pub fn parse(text: &str) -> Result<Value, ProfileError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ProfileError::Syntax {
        line: e.line(),
        column: e.column(),
        message: strip_position(&e.to_string()),
    })?;
    check(&value, &Path::root())?;
    Ok(value)
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

fn check(value: &Value, path: &Path) -> Result<(), ProfileError> {
    match value {
        Value::Null => Err(ProfileError::field(path, "null is not allowed")),
        Value::Bool(_) => Ok(()),
        Value::Number(n) if n.is_i64() || n.is_u64() => Ok(()),
        Value::Number(n) => Err(ProfileError::field(
            path,
            format!("non-integer number {n}; write reals as decimal strings"),
        )),
        Value::String(s) if s.chars().any(char::is_uppercase) => {
            Err(ProfileError::field(path, format!("string \"{s}\" must be lowercase")))
        }
        Value::String(_) => Ok(()),
        Value::Array(items) => items.iter().enumerate().try_for_each(|(i, v)| check(v, &path.index(i))),
        Value::Object(map) => map.iter().try_for_each(|(k, v)| check(v, &path.key(k))),
    }
}

/// Pretty-prints a value; keys come out sorted.
pub fn to_text(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("values always serialize");
    s.push('\n');
    s
}

/// Field-by-field reader over a profile object that rejects unknown keys.
pub struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: Path,
    seen: Vec<&'a str>,
}

impl<'a> Obj<'a> {
    pub fn new(value: &'a Value, path: Path) -> Result<Self, ProfileError> {
        match value {
            Value::Object(map) => Ok(Obj {
                map,
                path,
                seen: Vec::new(),
            }),
            _ => Err(ProfileError::field(&path, "expected an object")),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn optional(&mut self, key: &'a str) -> Option<(&'a Value, Path)> {
        self.seen.push(key);
        self.map.get(key).map(|v| (v, self.path.key(key)))
    }

    pub fn required(&mut self, key: &'a str) -> Result<(&'a Value, Path), ProfileError> {
        self.optional(key)
            .ok_or_else(|| ProfileError::field(&self.path.key(key), "missing field"))
    }

    pub fn usize(&mut self, key: &'a str) -> Result<usize, ProfileError> {
        let (v, p) = self.required(key)?;
        as_usize(v, &p)
    }

    pub fn u64(&mut self, key: &'a str) -> Result<u64, ProfileError> {
        let (v, p) = self.required(key)?;
        v.as_u64()
            .ok_or_else(|| ProfileError::field(&p, "expected a non-negative integer"))
    }

    pub fn str(&mut self, key: &'a str) -> Result<&'a str, ProfileError> {
        let (v, p) = self.required(key)?;
        as_str(v, &p)
    }

    pub fn bool(&mut self, key: &'a str) -> Result<bool, ProfileError> {
        let (v, p) = self.required(key)?;
        v.as_bool().ok_or_else(|| ProfileError::field(&p, "expected true or false"))
    }

    /// A real number written as a decimal string.
    pub fn real(&mut self, key: &'a str) -> Result<f64, ProfileError> {
        let (v, p) = self.required(key)?;
        as_real(v, &p)
    }

    pub fn array(&mut self, key: &'a str) -> Result<(&'a [Value], Path), ProfileError> {
        let (v, p) = self.required(key)?;
        match v {
            Value::Array(items) => Ok((items, p)),
            _ => Err(ProfileError::field(&p, "expected an array")),
        }
    }

    /// Fails on keys that were never asked for.
    pub fn finish(self) -> Result<(), ProfileError> {
        match self.map.keys().find(|k| !self.seen.contains(&k.as_str())) {
            Some(k) => Err(ProfileError::field(&self.path.key(k), "unknown field")),
            None => Ok(()),
        }
    }
}

pub fn as_usize(v: &Value, path: &Path) -> Result<usize, ProfileError> {
    v.as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| ProfileError::field(path, "expected a non-negative integer"))
}

pub fn as_str<'a>(v: &'a Value, path: &Path) -> Result<&'a str, ProfileError> {
    v.as_str().ok_or_else(|| ProfileError::field(path, "expected a string"))
}

pub fn as_real(v: &Value, path: &Path) -> Result<f64, ProfileError> {
    match v {
        Value::String(s) => s
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| ProfileError::field(path, format!("\"{s}\" is not a finite decimal"))),
        Value::Number(n) => n
            .as_i64()
            .map(|i| i as f64)
            .ok_or_else(|| ProfileError::field(path, "expected a decimal string")),
        _ => Err(ProfileError::field(path, "expected a decimal string")),
    }
}

/// Encodes a real so that it parses back to the identical value.
pub fn real(x: f64) -> Value {
    Value::String(format!("{x:?}"))
}
