//! JSON configs shared by every subcommand.
//!
//! Each command declares its keys once with [`command_config!`], which
//! generates the serde config struct (all keys defaulted, unknown keys
//! rejected) and a clap argument struct with one optional `--flag` per key.
//! Values resolve as defaults, then the `--config` file, then flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

/// Help text for a flag, ending in `[default: <json>]`.
pub fn help_with_default<T: Serialize>(text: &str, default: &T) -> String {
    let v = serde_json::to_string(default).expect("defaults serialize");
    format!("{} [default: {v}]", text.trim())
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
        file: path.to_path_buf(),
        field: e.path().to_string(),
        reason: e.inner().to_string(),
    })
}

/// Pretty JSON in declaration order with a trailing newline; reloading it
/// with [`load`] gives back the same config.
pub fn canonical<T: Serialize>(cfg: &T) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("configs serialize");
    s.push('\n');
    s
}

/// `name: ConfigType => FlagType = default`. The flag value converts into
/// the config type with `Into`, so `Option<T>` keys take a plain `T` flag.
#[macro_export]
macro_rules! command_config {
    (
        $(#[doc = $cdoc:literal])*
        $cfg:ident / $args:ident {
            $(
                $(#[doc = $doc:literal])+
                $(#[arg($($attr:tt)*)])?
                $field:ident : $ty:ty => $flag:ty = $default:expr
            ),* $(,)?
        }
    ) => {
        $(#[doc = $cdoc])*
        #[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $cfg {
            $( $(#[doc = $doc])+ pub $field: $ty, )*
        }

        impl Default for $cfg {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl $cfg {
            /// Config keys in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];
        }

        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct $args {
            /// JSON config file; flags override its values.
            #[arg(long)]
            pub config: Option<std::path::PathBuf>,
            $(
                #[arg(
                    long,
                    help = $crate::config::help_with_default(
                        concat!($($doc),+),
                        &<$cfg as Default>::default().$field,
                    )
                    $(, $($attr)*)?
                )]
                pub $field: Option<$flag>,
            )*
        }

        impl $args {
            pub fn resolve(&self) -> Result<$cfg, $crate::error::CliError> {
                let mut cfg = match &self.config {
                    Some(p) => $crate::config::load::<$cfg>(p)?,
                    None => <$cfg as Default>::default(),
                };
                $( if let Some(v) = &self.$field { cfg.$field = v.clone().into(); } )*
                Ok(cfg)
            }
        }
    };
}
