//! Binary PGM images and `key = value` text files.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sim::ChainParams;
use crate::vision::{Image, BINARY_THRESHOLD};

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Gray8 {
    /// Binary image as 0/255.
    pub fn from_binary(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.data().iter().map(|&v| if v >= BINARY_THRESHOLD { 255 } else { 0 }).collect(),
        }
    }

    /// Grayscale image, rounded to the nearest of 256 levels.
    pub fn from_gray(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }

    /// Thresholded at mid-gray into a 0/1 image.
    pub fn to_binary(&self) -> Image {
        let data = self.data.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
        Image::from_vec(self.width, self.height, data).expect("values in range")
    }
}

pub fn write_pgm(path: &Path, img: &Gray8) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.data);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Gray8> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Gray8, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("unexpected end of header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} `{t}`"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(format!("only 8-bit PGM is supported (maxval {maxval})"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let n = width * height;
    if bytes.len() < start + n {
        return Err(format!("raster truncated: need {n} bytes, have {}", bytes.len().saturating_sub(start)));
    }
    Ok(Gray8 {
        width,
        height,
        data: bytes[start..start + n].to_vec(),
    })
}

/// Ordered `key = value` pairs. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{}`", i + 1, raw.trim())))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }

    /// Inserts or replaces, keeping the original position of an existing key.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("cannot parse `{key} = {v}`"))))
            .transpose()
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>().map_err(|_| Error::Config(format!("cannot parse `{s}` in `{key}`"))))
                    .collect()
            })
            .transpose()
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }
}

impl std::fmt::Display for KeyValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub fn join_list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Chain-parameter keys understood by [`apply_param_overrides`].
pub const PARAM_KEYS: [&str; 11] = [
    "n_links",
    "link_lengths",
    "link_masses",
    "actuated",
    "passive_stiffness",
    "passive_damping",
    "gravity",
    "floor_enabled",
    "floor_friction_coulomb",
    "tau_max",
    "tip_mass",
];

/// Overrides fields of `params` from `kv` and re-validates.
pub fn apply_param_overrides(params: &mut ChainParams, kv: &KeyValues) -> Result<()> {
    if let Some(n) = kv.get_parsed("n_links")? {
        params.n_links = n;
    }
    if let Some(v) = kv.get_list("link_lengths")? {
        params.link_lengths = v;
    }
    if let Some(v) = kv.get_list("link_masses")? {
        params.link_masses = v;
    }
    if let Some(v) = kv.get_list("actuated")? {
        params.actuated = v;
    }
    if let Some(v) = kv.get_list("passive_stiffness")? {
        params.passive_stiffness = v;
    }
    if let Some(v) = kv.get_list("passive_damping")? {
        params.passive_damping = v;
    }
    if let Some(v) = kv.get_parsed("gravity")? {
        params.gravity = v;
    }
    if let Some(v) = kv.get_parsed("floor_enabled")? {
        params.floor_enabled = v;
    }
    if let Some(v) = kv.get_list("floor_friction_coulomb")? {
        params.floor_friction_coulomb = v;
    }
    if let Some(v) = kv.get_parsed("tau_max")? {
        params.tau_max = v;
    }
    if let Some(v) = kv.get_parsed("tip_mass")? {
        params.tip_mass = v;
    }
    params.validate()
}

/// Writes every chain parameter into `kv` using the override keys.
pub fn record_params(kv: &mut KeyValues, params: &ChainParams) {
    kv.set("n_links", params.n_links);
    kv.set("link_lengths", join_list(&params.link_lengths));
    kv.set("link_masses", join_list(&params.link_masses));
    kv.set("actuated", join_list(&params.actuated));
    kv.set("passive_stiffness", join_list(&params.passive_stiffness));
    kv.set("passive_damping", join_list(&params.passive_damping));
    kv.set("gravity", params.gravity);
    kv.set("floor_enabled", params.floor_enabled);
    kv.set("floor_friction_coulomb", join_list(&params.floor_friction_coulomb));
    kv.set("tau_max", params.tau_max);
    kv.set("tip_mass", params.tip_mass);
}
