//! Flat `key = value` configuration with dotted namespaces.
//!
//! ```text
//! # comment
//! model.n_1st = 4
//! train.lr = 1e-3
//! ```

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A struct whose fields can be listed and set by name.
pub trait Configurable {
    /// Every field as `(key, value)`, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Sets one field from its textual form. `Err` carries a message only;
    /// the caller attaches the location.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| format!("invalid value {value:?} for {key}: {e}"))
}

/// Parsed lines of a config file: `(line number, key, value)`.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            location: format!("{origin}:{}", i + 1),
            message: format!("expected key = value, got {line:?}"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config { location: format!("{origin}:{}", i + 1), message: "empty key".into() });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Renders `entries` under `prefix` as config lines.
pub fn render(prefix: &str, c: &dyn Configurable) -> String {
    let mut s = String::new();
    for (k, v) in c.entries() {
        s.push_str(&format!("{prefix}.{k} = {v}\n"));
    }
    s
}

/// Implements [`Configurable`] for a struct whose listed fields all
/// implement `Display` and `FromStr`.
#[macro_export]
macro_rules! configurable {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::config::Configurable for $ty {
            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.to_string())),*]
            }

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($field) => {
                        self.$field = $crate::config::parse_value(key, value)?;
                        Ok(())
                    })*
                    _ => Err(format!("unknown key {key:?}")),
                }
            }
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Demo {
        depth: usize,
        rate: f64,
    }
    configurable!(Demo { depth, rate });

    #[test]
    fn set_and_list() {
        let mut d = Demo::default();
        d.set("depth", "4").unwrap();
        d.set("rate", " 1e-3").unwrap();
        assert_eq!(d.entries(), vec![("depth", "4".to_string()), ("rate", "0.001".to_string())]);
        assert!(d.set("depth", "x").is_err());
        assert!(d.set("nope", "1").is_err());
    }

    #[test]
    fn line_diagnostics() {
        let lines = parse_lines("# c\na.b = 1\n\nc=2 # trailing\n", "f").unwrap();
        assert_eq!(lines, vec![(2, "a.b".into(), "1".into()), (4, "c".into(), "2".into())]);
        match parse_lines("a = 1\nbroken\n", "f.cfg") {
            Err(Error::Config { location, .. }) => assert_eq!(location, "f.cfg:2"),
            other => panic!("{other:?}"),
        }
    }
}
