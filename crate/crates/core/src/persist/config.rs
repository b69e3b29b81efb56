use std::fmt::Write as _;
use std::path::Path;

use crate::candidates::OperationKind;
use crate::data::{load_tiny_image_batches, synth_generate, PatternFamily, SyntheticTaskSpec};
use crate::error::{NtaaError, Result};
use crate::oracle::OracleConfig;
use crate::pipeline::{RunConfig, TransferData};
use crate::selfsup::ContrastiveConfig;

/// Raw `key = value` lines with `#` comments, in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub entries: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                NtaaError::config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(NtaaError::config(format!("line {}: empty key", i + 1)));
            }
            entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(ConfigFile { entries })
    }

    /// A single `key=value` override as given on the command line.
    pub fn parse_override(s: &str) -> Result<(String, String)> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| NtaaError::config(format!("override `{s}` is not key=value")))?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }
}

trait ConfigValue: Sized {
    fn show(&self) -> String;
    fn read(s: &str) -> Option<Self>;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn read(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, bool);

impl ConfigValue for Vec<usize> {
    fn show(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
    fn read(s: &str) -> Option<Self> {
        s.split(',').map(|x| x.trim().parse().ok()).collect()
    }
}

impl ConfigValue for Vec<OperationKind> {
    fn show(&self) -> String {
        self.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
    }
    fn read(s: &str) -> Option<Self> {
        s.split(',').map(|x| x.trim().parse().ok()).collect()
    }
}

impl ConfigValue for PatternFamily {
    fn show(&self) -> String {
        self.name().to_string()
    }
    fn read(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl ConfigValue for Option<String> {
    fn show(&self) -> String {
        self.clone().unwrap_or_default()
    }
    fn read(s: &str) -> Option<Self> {
        Some((!s.is_empty()).then(|| s.to_string()))
    }
}

struct Field {
    key: &'static str,
    get: fn(&ExperimentConfig) -> String,
    set: fn(&mut ExperimentConfig, &str) -> Option<()>,
}

macro_rules! fields {
    ($($key:literal => ($($path:tt)+),)*) => {
        vec![$(Field {
            key: $key,
            get: |c| ConfigValue::show(&c.$($path)+),
            set: |c, v| {
                c.$($path)+ = ConfigValue::read(v)?;
                Some(())
            },
        }),*]
    };
}

/// Every tunable of a run, addressable as `section.key`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: SyntheticTaskSpec,
    /// Tiny-image batch files replacing the synthetic source / target training data.
    pub source_path: Option<String>,
    pub target_path: Option<String>,
    pub contrastive: ContrastiveConfig,
    pub oracle: OracleConfig,
}

fn all_fields() -> Vec<Field> {
    fields! {
        "run.seed" => (run.seed),
        "run.batch_size" => (run.batch_size),
        "run.pretrain_epochs" => (run.pretrain_epochs),
        "run.search_epochs" => (run.search_epochs),
        "run.finetune_epochs" => (run.finetune_epochs),
        "run.pretrain_lr" => (run.pretrain_lr),
        "run.search_lr" => (run.search_lr),
        "run.finetune_lr" => (run.finetune_lr),
        "run.momentum" => (run.momentum),
        "run.cosine" => (run.cosine),
        "run.lambda" => (run.lambda),
        "run.val_fraction" => (run.val_fraction),
        "run.augment" => (run.augment),
        "run.candidates" => (run.candidates),
        "backbone.widths" => (run.backbone.widths),
        "backbone.nodes" => (run.backbone.nodes),
        "backbone.alpha0" => (run.alpha0_ops),
        "data.seed" => (data.seed),
        "data.image_size" => (data.image_size),
        "data.channels" => (data.channels),
        "data.classes" => (data.num_classes),
        "data.family" => (data.family),
        "data.label_noise" => (data.label_noise),
        "data.source.blur" => (data.source_shift.blur_std),
        "data.source.noise" => (data.source_shift.noise_std),
        "data.source.scale" => (data.source_shift.scale),
        "data.source.train" => (data.source_train),
        "data.source.val" => (data.source_val),
        "data.source.path" => (source_path),
        "data.target.blur" => (data.target_shift.blur_std),
        "data.target.noise" => (data.target_shift.noise_std),
        "data.target.scale" => (data.target_shift.scale),
        "data.target.train" => (data.target_train),
        "data.target.val" => (data.target_val),
        "data.target.path" => (target_path),
        "contrastive.tau" => (contrastive.tau),
        "contrastive.queue" => (contrastive.queue_size),
        "contrastive.proj_hidden" => (contrastive.proj_hidden),
        "contrastive.proj_dim" => (contrastive.proj_dim),
        "contrastive.crop_min" => (contrastive.augment.crop_scale.0),
        "contrastive.crop_max" => (contrastive.augment.crop_scale.1),
        "contrastive.flip_prob" => (contrastive.augment.flip_prob),
        "contrastive.noise_std" => (contrastive.augment.noise_std),
        "contrastive.epochs" => (contrastive.epochs),
        "contrastive.lr" => (contrastive.lr),
        "contrastive.train_theta" => (contrastive.train_theta),
        "contrastive.linear_epochs" => (contrastive.linear_epochs),
        "contrastive.linear_lr" => (contrastive.linear_lr),
        "oracle.nodes" => (oracle.nodes),
        "oracle.width" => (oracle.width),
        "oracle.candidates" => (oracle.candidates),
        "oracle.epochs" => (oracle.epochs),
        "oracle.under_epochs" => (oracle.under_epochs),
        "oracle.search_epochs" => (oracle.search_epochs),
        "oracle.cap" => (oracle.cap),
        "oracle.random_n" => (oracle.random_n),
        "oracle.sizes" => (oracle.sizes),
    }
}

impl ExperimentConfig {
    pub fn keys() -> Vec<&'static str> {
        all_fields().iter().map(|f| f.key).collect()
    }

    /// Applies one assignment; unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let fields = all_fields();
        let f = fields
            .iter()
            .find(|f| f.key == key)
            .ok_or_else(|| NtaaError::config(format!("unknown key `{key}`")))?;
        (f.set)(self, value)
            .ok_or_else(|| NtaaError::config(format!("bad value `{value}` for `{key}`")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        all_fields().iter().find(|f| f.key == key).map(|f| (f.get)(self))
    }

    /// Defaults, then the file's entries, then `overrides`, then derived fields.
    pub fn from_entries(file: &ConfigFile, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (k, v) in file.entries.iter().chain(overrides) {
            c.set(k, v)?;
        }
        c.resolve()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&ConfigFile::parse(text)?, &[])
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_entries(&ConfigFile::parse(&std::fs::read_to_string(path)?)?, overrides)
    }

    /// Propagates data dimensions into the backbone, broadcasts a uniform alpha0 to the
    /// backbone's node count, validates.
    pub fn resolve(&mut self) -> Result<()> {
        self.run.backbone.in_channels = self.data.channels;
        self.run.backbone.num_classes = self.data.num_classes;
        let ops = &self.run.alpha0_ops;
        if !ops.is_empty() && ops.iter().all(|&o| o == ops[0]) {
            self.run.alpha0_ops = vec![self.run.alpha0_ops[0]; self.run.backbone.num_nodes()];
        }
        self.run.validate()?;
        self.data.validate()?;
        self.contrastive.validate(self.run.batch_size)?;
        Ok(())
    }

    /// Source and target splits: the synthetic generator, or tiny-image files where given.
    /// A file-backed split loses `run.val_fraction` of its records to validation (and, for
    /// the target, the same fraction again to the test set).
    pub fn transfer_data(&self) -> Result<TransferData> {
        let synth = match (&self.source_path, &self.target_path) {
            (Some(_), Some(_)) => None,
            _ => Some(synth_generate(&self.data)?),
        };
        let frac = self.run.val_fraction;
        let seed = self.data.seed;
        let (source_train, source_val) = match (&self.source_path, &synth) {
            (Some(p), _) => load_tiny_image_batches(p)?.split_validation(frac, seed)?,
            (None, Some(t)) => (t.source_train.clone(), t.source_val.clone()),
            (None, None) => unreachable!("synthetic task generated when a path is missing"),
        };
        let (target_train, target_test) = match (&self.target_path, synth) {
            (Some(p), _) => load_tiny_image_batches(p)?.split_validation(frac, seed ^ 1)?,
            (None, Some(t)) => (t.target_train, t.target_val),
            (None, None) => unreachable!("synthetic task generated when a path is missing"),
        };
        let data = TransferData::from_splits(
            source_train,
            source_val,
            target_train,
            target_test,
            frac,
            seed,
        )?;
        let [c, _, _] = data.target_train.sample_shape();
        if c != self.run.backbone.in_channels
            || data.target_train.num_classes != self.run.backbone.num_classes
        {
            return Err(NtaaError::config(format!(
                "data has {c} channels and {} classes; set data.channels and data.classes to match",
                data.target_train.num_classes
            )));
        }
        Ok(data)
    }

    /// Every key, one per line, in a fixed order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for f in all_fields() {
            let _ = writeln!(s, "{} = {}", f.key, (f.get)(self));
        }
        s
    }
}
