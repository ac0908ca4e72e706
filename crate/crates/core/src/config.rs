//! Flat `section.key = value` configuration.
//!
//! Each configuration struct exposes its fields through [`KeyValues`], which
//! is what the config file parser, command-line overrides, the resolved-spec
//! echo and checkpoint metadata all go through.

use crate::error::{Error, Result};

/// A scalar or list that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    const EXPECTED: &'static str;
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($ty:ty => $name:literal),* $(,)?) => {$(
        impl ConfigValue for $ty {
            const EXPECTED: &'static str = $name;
            fn parse_value(s: &str) -> Option<Self> {
                s.trim().parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize => "a non-negative integer", u64 => "a non-negative integer", u32 => "a non-negative integer");

impl ConfigValue for f64 {
    const EXPECTED: &'static str = "a number";
    fn parse_value(s: &str) -> Option<Self> {
        s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
    }
    fn render(&self) -> String {
        // `{:?}` keeps enough digits to round-trip and always shows a dot.
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    const EXPECTED: &'static str = "a boolean (true/false/on/off)";
    fn parse_value(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "true" | "on" | "yes" | "1" => Some(true),
            "false" | "off" | "no" | "0" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Option<f64> {
    const EXPECTED: &'static str = "a number or `none`";
    fn parse_value(s: &str) -> Option<Self> {
        match s.trim() {
            "none" | "" => Some(None),
            v => f64::parse_value(v).map(Some),
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.render())
    }
}

macro_rules! integer_list_value {
    ($($ty:ty),*) => {$(
        impl ConfigValue for Vec<$ty> {
            const EXPECTED: &'static str = "a comma-separated list of integers";
            fn parse_value(s: &str) -> Option<Self> {
                let s = s.trim();
                if s.is_empty() || s == "none" {
                    return Some(Vec::new());
                }
                s.split(',').map(|p| p.trim().parse().ok()).collect()
            }
            fn render(&self) -> String {
                if self.is_empty() {
                    return "none".into();
                }
                self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            }
        }
    )*};
}

integer_list_value!(usize, u64);

impl ConfigValue for Vec<String> {
    const EXPECTED: &'static str = "a comma-separated list";
    fn parse_value(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Some(Vec::new());
        }
        Some(s.split(',').map(|p| p.trim().to_string()).collect())
    }
    fn render(&self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        self.join(",")
    }
}

/// Parses one value, mapping failure to a type error naming `key`.
pub fn parse_field<V: ConfigValue>(key: &str, value: &str) -> Result<V> {
    V::parse_value(value).ok_or_else(|| Error::Type {
        key: key.to_string(),
        expected: V::EXPECTED,
        value: value.to_string(),
    })
}

/// Closest known key by edit distance, if reasonably close.
pub fn suggest<'a>(key: &str, known: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let bare = key.rsplit('.').next().unwrap_or(key);
    known
        .into_iter()
        .map(|k| {
            let kb = k.rsplit('.').next().unwrap_or(k);
            let d = strsim::levenshtein(key, k).min(strsim::levenshtein(bare, kb));
            (d, k)
        })
        .filter(|&(d, k)| d <= 2.max(k.len() / 4))
        .min_by_key(|&(d, _)| d)
        .map(|(_, k)| k.to_string())
}

/// Field access by name for one configuration section.
pub trait KeyValues {
    const SECTION: &'static str;
    fn keys() -> &'static [&'static str];
    /// Renders every field as `(section.key, value)`.
    fn entries(&self) -> Vec<(String, String)>;
    /// Sets one field from its textual value; `key` is without the section.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn full_keys() -> Vec<String> {
        Self::keys()
            .iter()
            .map(|k| format!("{}.{k}", Self::SECTION))
            .collect()
    }

    fn unknown(key: &str) -> Error {
        let full = Self::full_keys();
        Error::UnknownKey {
            key: format!("{}.{key}", Self::SECTION),
            suggestion: suggest(key, full.iter().map(String::as_str)),
        }
    }

    /// Applies every `section.key` pair that belongs to this section.
    fn apply_entries<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            if let Some(rest) = k.strip_prefix(Self::SECTION).and_then(|r| r.strip_prefix('.')) {
                self.set(rest, v)?;
            }
        }
        Ok(())
    }
}

/// Implements [`KeyValues`] for a struct whose fields are [`ConfigValue`]s.
macro_rules! key_values {
    ($ty:ty, $section:literal, { $($key:literal => $field:ident),* $(,)? }) => {
        impl $crate::config::KeyValues for $ty {
            const SECTION: &'static str = $section;

            fn keys() -> &'static [&'static str] {
                &[$($key),*]
            }

            fn entries(&self) -> Vec<(String, String)> {
                vec![$((
                    format!("{}.{}", $section, $key),
                    $crate::config::ConfigValue::render(&self.$field),
                )),*]
            }

            fn set(&mut self, key: &str, value: &str) -> $crate::error::Result<()> {
                match key {
                    $($key => {
                        self.$field = $crate::config::parse_field(
                            &format!("{}.{}", $section, $key),
                            value,
                        )?;
                    })*
                    _ => return Err(<Self as $crate::config::KeyValues>::unknown(key)),
                }
                Ok(())
            }
        }
    };
}
pub(crate) use key_values;

key_values!(crate::env::EnvConfig, "env", {
    "field_width" => field_width,
    "field_height" => field_height,
    "ball_speed_x" => ball_speed_x,
    "ball_speed_y" => ball_speed_y,
    "ball_size" => ball_size,
    "paddle_height" => paddle_height,
    "paddle_width" => paddle_width,
    "paddle_speed" => paddle_speed,
    "paddle_margin" => paddle_margin,
    "opponent_paddle_height" => opponent_paddle_height,
    "opponent_paddle_speed" => opponent_paddle_speed,
    "max_score" => max_score,
    "frame_skip_fps" => frame_skip_fps,
    "stack_size" => stack_size,
    "obs_side" => obs_side,
    "rng_seed" => rng_seed,
    "max_steps" => max_steps,
});

key_values!(crate::gate::GateConfig, "gate", {
    "enabled" => enabled,
    "num_branches" => num_branches,
    "select_fraction" => select_fraction,
    "sigmoid_temp" => sigmoid_temp,
    "ema_decay" => ema_decay,
    "gain_strength" => gain_strength,
});
