//! Run configuration, checkpoints, manifests and output-directory locking.
//!
//! Config files are line oriented: `section.key = value`, `#` starts a
//! comment. Keys mirror the [`RunConfig`] field tree; ranges accept either
//! `section.key.lo = ..` / `.hi = ..` or the shorthand `section.key = lo, hi`.
//! Unknown keys and malformed values are errors.
//!
//! Checkpoint layout (all little endian):
//!
//! | bytes      | field                                   |
//! |------------|-----------------------------------------|
//! | 8          | magic `DRIFTPPO`                        |
//! | 4 (u32)    | format version (1)                      |
//! | 4 (u32)    | observation dim                         |
//! | 4 (u32)    | action dim                              |
//! | 4 (u32)    | hidden layer count `h`                  |
//! | 4·h (u32)  | hidden widths                           |
//! | 8 (u64)    | parameter count `n`                     |
//! | 8·n (f64)  | flat parameter vector                   |

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::VehicleParams;
use crate::env::{EnvConfig, ACTION_DIM};
use crate::eval::{AblationConfig, AblationSpec, EvalOptions};
use crate::nn::{PolicyNet, HIDDEN};
use crate::ppo::TrainerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': {msg}")]
    Value { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

/// Which path the training environment drives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// `circle`, `eight`, `variable`, `rings`, `random` or a CSV file path.
    pub path: String,
    pub radius: f64,
    /// +1 counter-clockwise, -1 clockwise (circle only).
    pub direction: i32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            path: "circle".into(),
            radius: 1.0,
            direction: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub path: String,
    pub radius: f64,
    pub n_trials: usize,
    pub stochastic: bool,
    /// 0 derives the cap from the path length.
    pub max_steps: usize,
    pub complete_laps: bool,
    /// Randomize tires and disturbances within the training ranges; off
    /// evaluates the nominal vehicle (range midpoints, zero disturbance).
    pub randomize: bool,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            path: "eight".into(),
            radius: 1.0,
            n_trials: 6,
            stochastic: false,
            max_steps: 0,
            complete_laps: true,
            randomize: true,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    /// Comma-separated configuration names.
    pub configs: String,
    pub n_trials: usize,
    pub disturbance_scale: f64,
    pub tire_b: crate::env::Range,
    pub tire_c: crate::env::Range,
    pub tire_d: crate::env::Range,
    /// Training budget per configuration.
    pub total_env_steps: u64,
    /// Training path source. `random` and `families` are pools, so the
    /// trajectory flag has an effect; any single path makes it a no-op.
    pub train_path: String,
    /// Evaluation path.
    pub path: String,
    pub radius: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        let spec = AblationSpec::default();
        Self {
            configs: AblationConfig::ALL.map(|c| c.name()).join(","),
            n_trials: spec.n_trials,
            disturbance_scale: spec.disturbance_scale,
            tire_b: spec.tire_b,
            tire_c: spec.tire_c,
            tire_d: spec.tire_d,
            total_env_steps: 15_000_000,
            train_path: "families".into(),
            path: "eight".into(),
            radius: 1.0,
        }
    }
}

impl AblationSection {
    pub fn spec(&self) -> Result<AblationSpec, ConfigError> {
        let configs = self
            .configs
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                AblationConfig::parse(s).ok_or_else(|| ConfigError::Value {
                    key: "ablation.configs".into(),
                    msg: format!("unknown configuration '{s}'"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AblationSpec {
            configs,
            tire_b: self.tire_b,
            tire_c: self.tire_c,
            tire_d: self.tire_d,
            disturbance_scale: self.disturbance_scale,
            n_trials: self.n_trials,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
}

/// Everything a command needs, with documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub vehicle: VehicleParams,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub task: TaskConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection { seed: 0 },
            vehicle: VehicleParams::default(),
            env: EnvConfig::default(),
            trainer: TrainerConfig::default(),
            task: TaskConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

// Nested env sections are exposed at top level in the file format.
const HOISTED: [(&str, &str); 3] = [
    ("weights", "reward"),
    ("randomization", "randomization"),
    ("random_paths", "random_path"),
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut tree = self.to_tree();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected 'section.key = value', got '{line}'"),
            })?;
            let key = key.trim();
            if key.is_empty() || !key.contains('.') {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("key '{key}' must have the form section.key"),
                });
            }
            set_in_tree(&mut tree, key, value.trim())?;
        }
        *self = Self::from_tree(tree)?;
        Ok(())
    }

    /// Sets a single key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut tree = self.to_tree();
        set_in_tree(&mut tree, key, value)?;
        *self = Self::from_tree(tree)?;
        Ok(())
    }

    fn to_tree(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let root = v.as_object_mut().expect("object");
        let env = root.get_mut("env").and_then(Value::as_object_mut).expect("env section");
        let mut hoisted = Vec::new();
        for (inner, outer) in HOISTED {
            hoisted.push((outer, env.remove(inner).expect("nested env section")));
        }
        for (outer, val) in hoisted {
            root.insert(outer.to_string(), val);
        }
        v
    }

    fn from_tree(mut v: Value) -> Result<Self, ConfigError> {
        let root = v.as_object_mut().expect("object");
        let mut moved = Vec::new();
        for (inner, outer) in HOISTED {
            moved.push((inner, root.remove(outer).expect("hoisted section")));
        }
        let env = root.get_mut("env").and_then(Value::as_object_mut).expect("env section");
        for (inner, val) in moved {
            env.insert(inner.to_string(), val);
        }
        serde_json::from_value(v).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical `key = value` dump; parsing it reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let mut lines = Vec::new();
        flatten("", &self.to_tree(), &mut lines);
        let mut s = String::new();
        for (k, v) in lines {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.vehicle.validate().map_err(ConfigError::Invalid)?;
        self.env.validate().map_err(ConfigError::Invalid)?;
        self.trainer.validate().map_err(ConfigError::Invalid)?;
        if !(self.task.radius > 0.0) || !(self.eval.radius > 0.0) || !(self.ablation.radius > 0.0) {
            return Err(ConfigError::Invalid("path radii must be positive".into()));
        }
        if self.task.direction != 1 && self.task.direction != -1 {
            return Err(ConfigError::Invalid("task.direction must be 1 or -1".into()));
        }
        self.ablation
            .spec()?
            .validate(&self.env.randomization)
            .map_err(ConfigError::Invalid)
    }

    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        let mut o = EvalOptions::standard(self.eval.n_trials, seed, &self.env.randomization);
        o.stochastic = self.eval.stochastic;
        o.max_steps = (self.eval.max_steps > 0).then_some(self.eval.max_steps);
        o.complete_laps = self.eval.complete_laps;
        o.randomization.flags.tire &= self.eval.randomize;
        o.randomization.flags.disturbance &= self.eval.randomize;
        o
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, inner) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, inner, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn set_in_tree(tree: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    let bad = |msg: String| ConfigError::Value {
        key: key.to_string(),
        msg,
    };
    *node = match node {
        Value::Bool(_) => Value::Bool(match raw {
            "true" | "1" | "yes" | "on" => true,
            "false" | "0" | "no" | "off" => false,
            _ => return Err(bad(format!("expected a boolean, got '{raw}'"))),
        }),
        Value::Number(n) if n.is_u64() => Value::Number(
            raw.parse::<u64>()
                .map_err(|_| bad(format!("expected a non-negative integer, got '{raw}'")))?
                .into(),
        ),
        Value::Number(n) if n.is_i64() => Value::Number(
            raw.parse::<i64>()
                .map_err(|_| bad(format!("expected an integer, got '{raw}'")))?
                .into(),
        ),
        Value::Number(_) => parse_float(raw).map_err(bad)?,
        Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
        Value::Object(m) if m.contains_key("lo") && m.contains_key("hi") => {
            let (lo, hi) = raw
                .split_once(',')
                .ok_or_else(|| bad(format!("expected 'lo, hi', got '{raw}'")))?;
            let mut r = Map::new();
            r.insert("lo".into(), parse_float(lo.trim()).map_err(bad)?);
            r.insert("hi".into(), parse_float(hi.trim()).map_err(bad)?);
            Value::Object(r)
        }
        _ => return Err(bad("is a section, not a value".into())),
    };
    Ok(())
}

fn parse_float(raw: &str) -> Result<Value, String> {
    let f: f64 = raw.parse().map_err(|_| format!("expected a number, got '{raw}'"))?;
    Number::from_f64(f)
        .map(Value::Number)
        .ok_or_else(|| format!("non-finite number '{raw}'"))
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a policy checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated or has trailing bytes")]
    Length,
    #[error("checkpoint layer dims {found:?} do not match the expected {expected:?}")]
    Dims { found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint contains non-finite parameters")]
    NonFinite,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRIFTPPO";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(net: &PolicyNet) -> Vec<u8> {
    let mut b = Vec::with_capacity(40 + 8 * net.n_params());
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&(net.obs_dim() as u32).to_le_bytes());
    b.extend_from_slice(&(ACTION_DIM as u32).to_le_bytes());
    b.extend_from_slice(&(HIDDEN.len() as u32).to_le_bytes());
    for h in HIDDEN {
        b.extend_from_slice(&(h as u32).to_le_bytes());
    }
    b.extend_from_slice(&(net.n_params() as u64).to_le_bytes());
    for p in &net.params {
        b.extend_from_slice(&p.to_le_bytes());
    }
    b
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Length);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint, checking the layout against the fixed network shape
/// and, if given, the expected observation dimension.
pub fn decode_checkpoint(bytes: &[u8], expect_obs: Option<usize>) -> Result<PolicyNet, CheckpointError> {
    let mut r = Reader(bytes);
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let obs = r.u32()? as usize;
    let act = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    if n_hidden > 64 {
        return Err(CheckpointError::Length);
    }
    let mut found = vec![obs];
    for _ in 0..n_hidden {
        found.push(r.u32()? as usize);
    }
    found.push(act);
    let mut expected = vec![expect_obs.unwrap_or(obs)];
    expected.extend(HIDDEN);
    expected.push(ACTION_DIM);
    if found != expected {
        return Err(CheckpointError::Dims { found, expected });
    }
    let n = r.u64()? as usize;
    if r.0.len() != n.saturating_mul(8) {
        return Err(CheckpointError::Length);
    }
    let params: Vec<f64> =
        r.0.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(CheckpointError::NonFinite);
    }
    PolicyNet::from_params(obs, params).ok_or(CheckpointError::Length)
}

/// JSON stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub update: usize,
    pub env_steps: u64,
    pub trainer: TrainerConfig,
    pub config: RunConfig,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the checkpoint and its sidecar, each atomically.
pub fn save_checkpoint(path: &Path, net: &PolicyNet, meta: &CheckpointMeta) -> std::io::Result<()> {
    write_atomic(path, &encode_checkpoint(net))?;
    write_atomic(&sidecar_path(path), to_json_pretty(meta).as_bytes())
}

pub fn load_checkpoint(path: &Path, expect_obs: Option<usize>) -> Result<PolicyNet, CheckpointError> {
    decode_checkpoint(&fs::read(path)?, expect_obs)
}

pub fn load_checkpoint_meta(path: &Path) -> Option<CheckpointMeta> {
    let text = fs::read_to_string(sidecar_path(path)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: String,
    pub started: String,
    pub finished: String,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl RunManifest {
    /// Hashes `files` (relative to `dir`) and writes the manifest atomically.
    pub fn finish(mut self, dir: &Path, files: &[String], finished: String) -> std::io::Result<Self> {
        self.finished = finished;
        self.files = files
            .iter()
            .map(|rel| {
                let bytes = fs::read(dir.join(rel))?;
                Ok(FileEntry {
                    path: rel.clone(),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect::<std::io::Result<_>>()?;
        write_atomic(&dir.join(MANIFEST_NAME), to_json_pretty(&self).as_bytes())?;
        Ok(self)
    }

    /// Checks every listed file against its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<(), String> {
        for f in &self.files {
            let bytes = fs::read(dir.join(&f.path)).map_err(|e| format!("{}: {e}", f.path))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(format!("{}: hash mismatch", f.path));
            }
        }
        Ok(())
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

pub const LOCK_NAME: &str = ".driftsim.lock";

impl DirLock {
    pub fn acquire(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_NAME);
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    std::io::Error::new(
                        e.kind(),
                        format!(
                            "output directory {} is in use (remove {} if stale)",
                            dir.display(),
                            path.display()
                        ),
                    )
                } else {
                    e
                }
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.trainer.lr = 1.25e-4;
        cfg.env.randomization.tire_b.hi = 1.1;
        cfg.vehicle.drivetrain = crate::dynamics::Drivetrain::Rwd;
        let text = cfg.to_config_string();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("reward.drift = 1.6"));
        assert!(text.contains("vehicle.drivetrain = rwd"));
    }

    #[test]
    fn keys_and_ranges() {
        let cfg = RunConfig::parse(
            "# comment\ntrainer.n_envs = 64\nrandomization.tire_d = 0.25, 0.45\nrandomization.tire_b.lo = 0.7\nenv.scale_observations = true\n",
        )
        .unwrap();
        assert_eq!(cfg.trainer.n_envs, 64);
        assert_eq!(cfg.env.randomization.tire_d.lo, 0.25);
        assert_eq!(cfg.env.randomization.tire_b.lo, 0.7);
        assert!(cfg.env.scale_observations);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        assert!(matches!(
            RunConfig::parse("trainer.nope = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("trainer.n_envs = -3"),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            RunConfig::parse("trainer.lr = fast"),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            RunConfig::parse("just words"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            RunConfig::parse("trainer = 3"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            RunConfig::parse("vehicle.drivetrain = fwd"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let net = PolicyNet::init(56, -0.5, &mut rng);
        let bytes = encode_checkpoint(&net);
        let back = decode_checkpoint(&bytes, Some(56)).unwrap();
        assert_eq!(back.params, net.params);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, None), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], None),
            Err(CheckpointError::Length)
        ));
        assert!(matches!(
            decode_checkpoint(&bytes, Some(40)),
            Err(CheckpointError::Dims { .. })
        ));
        let mut v = bytes;
        v[8] = 9;
        assert!(matches!(decode_checkpoint(&v, None), Err(CheckpointError::Version(9))));
    }
}
