//! INI-style config files.
//!
//! ```text
//! # comment
//! [model]
//! modalities = 2
//! in_channels = 3,1
//! [train]
//! lr = 0.001
//! ```
//!
//! Every key has a fixed home section; keys may also appear before any
//! section header. Missing keys keep their defaults. If `modalities` is given
//! without `in_channels`, modality 0 gets 3 channels and the rest 1.

use std::collections::HashMap;
use std::path::Path;

use crate::config::{LrSchedule, ModelConfig, MAX_MODALITIES, NUM_STAGES};
use crate::error::{Error, Result};

const KEYS: &[(&str, &[&str])] = &[
    (
        "model",
        &["modalities", "in_channels", "image_size", "num_classes", "decoder_dim"],
    ),
    (
        "encoder",
        &[
            "channels",
            "depths",
            "heads",
            "sr_ratios",
            "patch_sizes",
            "patch_strides",
            "mlp_ratio",
        ],
    ),
    ("fusion", &["pool_bins", "conv_kernels", "ca_reduction"]),
    (
        "train",
        &[
            "lr",
            "lr_schedule",
            "batch_size",
            "epochs",
            "seed",
            "beta1",
            "beta2",
            "adam_eps",
            "freeze_encoders",
            "hflip",
            "rotate",
            "scale",
            "ignore_index",
        ],
    ),
    ("data", &["pad_to_32", "class_names"]),
];

fn home_section(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

struct Entry {
    line: usize,
    value: String,
}

fn line_err(line: usize, key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigLine {
        line,
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn scalar<T: std::str::FromStr>(e: &Entry, key: &str) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| line_err(e.line, key, format!("cannot parse `{}`", e.value)))
}

fn list<T: std::str::FromStr>(e: &Entry, key: &str) -> Result<Vec<T>> {
    if e.value.is_empty() {
        return Ok(vec![]);
    }
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| line_err(e.line, key, format!("cannot parse list item `{}`", s.trim())))
        })
        .collect()
}

fn stages(e: &Entry, key: &str) -> Result<[usize; NUM_STAGES]> {
    let v: Vec<usize> = list(e, key)?;
    v.try_into()
        .map_err(|v: Vec<usize>| line_err(e.line, key, format!("expected {NUM_STAGES} values, got {}", v.len())))
}

fn boolean(e: &Entry, key: &str) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(line_err(e.line, key, format!("`{other}` is not a boolean"))),
    }
}

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut entries: HashMap<String, Entry> = HashMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| line_err(line, content, "unterminated section header"))?
                .trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(line_err(line, name, "unknown section"));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| line_err(line, content, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let home = home_section(key).ok_or_else(|| line_err(line, key, "unknown key"))?;
        if let Some(s) = &section {
            if s != home {
                return Err(line_err(line, key, format!("key belongs in [{home}], not [{s}]")));
            }
        }
        if let Some(prev) = entries.get(key) {
            return Err(line_err(
                line,
                key,
                format!("duplicate key (first set on line {})", prev.line),
            ));
        }
        entries.insert(
            key.to_string(),
            Entry {
                line,
                value: value.to_string(),
            },
        );
    }

    let mut cfg = ModelConfig::default();
    let get = |k: &str| entries.get(k);

    let modalities: Option<usize> = get("modalities").map(|e| scalar(e, "modalities")).transpose()?;
    if let Some(m) = modalities.filter(|&m| m > MAX_MODALITIES) {
        let line = entries["modalities"].line;
        return Err(line_err(
            line,
            "modalities",
            format!("{m} modalities exceed the limit of {MAX_MODALITIES}"),
        ));
    }
    match (get("in_channels"), modalities) {
        (Some(e), m) => {
            cfg.in_channels = list(e, "in_channels")?;
            if let Some(m) = m {
                if m != cfg.in_channels.len() {
                    let line = entries["modalities"].line;
                    return Err(line_err(
                        line,
                        "modalities",
                        format!("{m} modalities but {} in_channels entries", cfg.in_channels.len()),
                    ));
                }
            }
        }
        (None, Some(m)) => cfg.in_channels = (0..m).map(|i| if i == 0 { 3 } else { 1 }).collect(),
        (None, None) => {}
    }
    if let Some(e) = get("image_size") {
        let v: Vec<usize> = list(e, "image_size")?;
        cfg.image_size = match v[..] {
            [s] => (s, s),
            [h, w] => (h, w),
            _ => return Err(line_err(e.line, "image_size", "expected `H,W` or a single size")),
        };
    }
    if let Some(e) = get("num_classes") {
        cfg.head.num_classes = scalar(e, "num_classes")?;
    }
    if let Some(e) = get("decoder_dim") {
        cfg.head.decoder_dim = scalar(e, "decoder_dim")?;
    }

    let enc = &mut cfg.encoder;
    for (key, field) in [
        ("channels", &mut enc.stage_channels),
        ("depths", &mut enc.stage_depths),
        ("heads", &mut enc.heads),
        ("sr_ratios", &mut enc.sr_ratios),
        ("patch_sizes", &mut enc.patch_sizes),
        ("patch_strides", &mut enc.patch_strides),
    ] {
        if let Some(e) = get(key) {
            *field = stages(e, key)?;
        }
    }
    if let Some(e) = get("mlp_ratio") {
        enc.mlp_ratio = scalar(e, "mlp_ratio")?;
    }

    if let Some(e) = get("pool_bins") {
        cfg.fusion.pool_bins = list(e, "pool_bins")?;
    }
    if let Some(e) = get("conv_kernels") {
        cfg.fusion.conv_kernels = list(e, "conv_kernels")?;
    }
    if let Some(e) = get("ca_reduction") {
        cfg.fusion.ca_reduction = scalar(e, "ca_reduction")?;
    }

    let tr = &mut cfg.train;
    for (key, field) in [
        ("lr", &mut tr.lr),
        ("beta1", &mut tr.beta1),
        ("beta2", &mut tr.beta2),
        ("adam_eps", &mut tr.adam_eps),
    ] {
        if let Some(e) = get(key) {
            *field = scalar(e, key)?;
        }
    }
    if let Some(e) = get("lr_schedule") {
        tr.lr_schedule = match e.value.as_str() {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine,
            other => {
                return Err(line_err(
                    e.line,
                    "lr_schedule",
                    format!("`{other}` is not constant|cosine"),
                ))
            }
        };
    }
    for (key, field) in [("batch_size", &mut tr.batch_size), ("epochs", &mut tr.epochs)] {
        if let Some(e) = get(key) {
            *field = scalar(e, key)?;
        }
    }
    if let Some(e) = get("seed") {
        tr.seed = scalar(e, "seed")?;
    }
    for (key, field) in [
        ("freeze_encoders", &mut tr.freeze_encoders),
        ("hflip", &mut tr.hflip),
        ("rotate", &mut tr.rotate),
        ("scale", &mut tr.scale),
    ] {
        if let Some(e) = get(key) {
            *field = boolean(e, key)?;
        }
    }
    if let Some(e) = get("ignore_index") {
        tr.ignore_index = scalar(e, "ignore_index")?;
    }

    if let Some(e) = get("pad_to_32") {
        cfg.data.pad_to_32 = boolean(e, "pad_to_32")?;
    }
    if let Some(e) = get("class_names") {
        cfg.data.class_names = e.value.split(',').map(|s| s.trim().to_string()).collect();
        if cfg.data.class_names.iter().any(String::is_empty) {
            return Err(line_err(e.line, "class_names", "empty class name"));
        }
    }

    if let Err((key, msg)) = cfg.check(cfg.image_size) {
        return Err(match entries.get(key) {
            Some(e) => line_err(e.line, key, msg),
            None => Error::Config(format!("{key}: {msg}")),
        });
    }
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Writes every key; `parse_config(&to_config_string(c)) == c` for any valid
/// config whose class names contain no `,` or `#`.
pub fn to_config_string(cfg: &ModelConfig) -> String {
    let e = &cfg.encoder;
    let t = &cfg.train;
    let schedule = match t.lr_schedule {
        LrSchedule::Constant => "constant",
        LrSchedule::Cosine => "cosine",
    };
    let mut s = String::new();
    s += "[model]\n";
    s += &format!("modalities = {}\n", cfg.modalities());
    s += &format!("in_channels = {}\n", join(&cfg.in_channels));
    s += &format!("image_size = {},{}\n", cfg.image_size.0, cfg.image_size.1);
    s += &format!("num_classes = {}\n", cfg.head.num_classes);
    s += &format!("decoder_dim = {}\n", cfg.head.decoder_dim);
    s += "\n[encoder]\n";
    s += &format!("channels = {}\n", join(&e.stage_channels));
    s += &format!("depths = {}\n", join(&e.stage_depths));
    s += &format!("heads = {}\n", join(&e.heads));
    s += &format!("sr_ratios = {}\n", join(&e.sr_ratios));
    s += &format!("patch_sizes = {}\n", join(&e.patch_sizes));
    s += &format!("patch_strides = {}\n", join(&e.patch_strides));
    s += &format!("mlp_ratio = {}\n", e.mlp_ratio);
    s += "\n[fusion]\n";
    s += &format!("pool_bins = {}\n", join(&cfg.fusion.pool_bins));
    s += &format!("conv_kernels = {}\n", join(&cfg.fusion.conv_kernels));
    s += &format!("ca_reduction = {}\n", cfg.fusion.ca_reduction);
    s += "\n[train]\n";
    s += &format!("lr = {}\n", t.lr);
    s += &format!("lr_schedule = {schedule}\n");
    s += &format!("batch_size = {}\n", t.batch_size);
    s += &format!("epochs = {}\n", t.epochs);
    s += &format!("seed = {}\n", t.seed);
    s += &format!("beta1 = {}\n", t.beta1);
    s += &format!("beta2 = {}\n", t.beta2);
    s += &format!("adam_eps = {}\n", t.adam_eps);
    s += &format!("freeze_encoders = {}\n", t.freeze_encoders);
    s += &format!("hflip = {}\n", t.hflip);
    s += &format!("rotate = {}\n", t.rotate);
    s += &format!("scale = {}\n", t.scale);
    s += &format!("ignore_index = {}\n", t.ignore_index);
    s += "\n[data]\n";
    s += &format!("pad_to_32 = {}\n", cfg.data.pad_to_32);
    if !cfg.data.class_names.is_empty() {
        s += &format!("class_names = {}\n", cfg.data.class_names.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ModelConfig::default());
        assert_eq!(cfg.modalities(), 1);
    }

    #[test]
    fn four_modalities() {
        let cfg = parse_config("modalities = 4\nin_channels = 3,1,1,3\n").unwrap();
        assert_eq!(cfg.modalities(), 4);
        assert_eq!(cfg.in_channels, vec![3, 1, 1, 3]);
        let cfg = parse_config("[model]\nmodalities=2").unwrap();
        assert_eq!(cfg.in_channels, vec![3, 1]);
    }

    #[test]
    fn unknown_key_cites_line() {
        let err = parse_config("[train]\nlr = 0.1\nlearning_rate = 2\n").unwrap_err();
        match err {
            Error::ConfigLine { line, key, .. } => assert_eq!((line, key.as_str()), (3, "learning_rate")),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn invalid_sr_ratio_cites_line() {
        let err = parse_config("# x\n[encoder]\nsr_ratios = 3,3,3,3\n").unwrap_err();
        match err {
            Error::ConfigLine { line, key, .. } => assert_eq!((line, key.as_str()), (3, "sr_ratios")),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_lines_rejected() {
        for bad in [
            "[bogus]\n",
            "[model\n",
            "num_classes\n",
            "num_classes = three\n",
            "channels = 1,2,3\n",
            "[train]\nnum_classes = 3\n",
            "lr = 0.1\nlr = 0.2\n",
            "hflip = maybe\n",
            "lr_schedule = step\n",
            "modalities = 3\nin_channels = 3,1\n",
            "modalities = 44556774\n",
            "in_channels = 1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1\n",
        ] {
            assert!(matches!(parse_config(bad), Err(Error::ConfigLine { .. })), "{bad}");
        }
    }

    #[test]
    fn serialization_roundtrips() {
        let mut cfg = ModelConfig::desk(vec![3, 1, 1], 4, (32, 64));
        cfg.train.lr = 1.0 / 3.0;
        cfg.train.lr_schedule = LrSchedule::Cosine;
        cfg.train.freeze_encoders = true;
        cfg.data.class_names = vec!["sky".into(), "road".into(), "car".into(), "person".into()];
        assert_eq!(parse_config(&to_config_string(&cfg)).unwrap(), cfg);
        let d = ModelConfig::default();
        assert_eq!(parse_config(&to_config_string(&d)).unwrap(), d);
    }
}
