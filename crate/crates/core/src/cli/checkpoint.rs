//! Binary checkpoints: magic, format version, a JSON header, then named
//! little-endian `f64` arrays, each prefixed by its name and length.
//!
//! ```text
//! b"AFAGCKPT" | u32 version | u64 header_len | header JSON
//! u32 n_sections | { u32 name_len | name | u64 count | count x f64 }*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{PolicyBundle, SECTION_NAMES};

use super::{CliError, Result, RunConfig};

const MAGIC: &[u8; 8] = b"AFAGCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Which artefacts a checkpoint keeps. Eval checkpoints drop the critic
/// and the reference policy, which only training needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    /// Free-form training stage, e.g. "init", "sft" or "final".
    pub stage: String,
    pub iterations_done: usize,
    pub config_hash: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshot of `bundle`. The `sft` section holds the frozen trunk and
    /// heads; `velocity` (optional) is the optimizer state.
    pub fn from_bundle(
        bundle: &PolicyBundle,
        config: &RunConfig,
        kind: CheckpointKind,
        stage: &str,
        iterations_done: usize,
        velocity: Option<&[f64]>,
    ) -> Self {
        let mut sections = Vec::new();
        for name in SECTION_NAMES {
            if kind == CheckpointKind::Eval && name == "critic" {
                continue;
            }
            let s = bundle.section(name).expect("bundle has every section");
            sections.push((name.to_string(), bundle.params[s.range()].to_vec()));
        }
        if kind == CheckpointKind::Train {
            if let Some(sft) = &bundle.sft {
                sections.push(("sft".into(), sft[bundle.actor_range()].to_vec()));
            }
            if let Some(v) = velocity {
                sections.push(("velocity".into(), v.to_vec()));
            }
        }
        // The output location is not part of what was trained.
        let mut config = config.clone();
        config.out_dir = Default::default();
        Self {
            header: CheckpointHeader {
                kind,
                stage: stage.into(),
                iterations_done,
                config_hash: config.hash(),
                config,
            },
            sections,
        }
    }

    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Rebuilds a bundle from the embedded config and overwrites its
    /// parameters. Sections absent from an eval checkpoint keep their
    /// fresh-init values; a section whose length disagrees with the
    /// config is an error naming it.
    pub fn to_bundle(&self) -> Result<PolicyBundle> {
        let cfg = &self.header.config;
        let mut bundle = PolicyBundle::new(cfg.layout(), &cfg.policy, cfg.seed)?;
        for name in SECTION_NAMES {
            let range = bundle.section(name).expect("bundle has every section").range();
            match self.section(name) {
                Some(v) if v.len() == range.len() => bundle.params[range].copy_from_slice(v),
                Some(v) => return Err(mismatch(name, range.len(), v.len())),
                None if name == "critic" && self.header.kind == CheckpointKind::Eval => {}
                None => return Err(CliError::Checkpoint(format!("missing section {name}"))),
            }
        }
        if let Some(v) = self.section("sft") {
            let r = bundle.actor_range();
            if v.len() != r.len() {
                return Err(mismatch("sft", r.len(), v.len()));
            }
            let mut sft = bundle.params.clone();
            sft[r].copy_from_slice(v);
            bundle.sft = Some(sft);
        }
        Ok(bundle)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, data) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(CliError::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(take(&mut r)?) as usize;
        let header_bytes = take_slice(&mut r, hlen)?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| CliError::Checkpoint(format!("bad header: {e}")))?;
        let n = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut sections = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32::from_le_bytes(take(&mut r)?) as usize;
            let name = std::str::from_utf8(take_slice(&mut r, len)?)
                .map_err(|_| CliError::Checkpoint("section name is not utf-8".into()))?
                .to_string();
            let count = u64::from_le_bytes(take(&mut r)?) as usize;
            let raw = take_slice(&mut r, count.checked_mul(8).ok_or_else(truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections.push((name, data));
        }
        if !r.is_empty() {
            return Err(CliError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn mismatch(name: &str, expected: usize, found: usize) -> CliError {
    CliError::Checkpoint(format!(
        "section {name} has {found} values, config expects {expected}"
    ))
}

fn truncated() -> CliError {
    CliError::Checkpoint("truncated checkpoint".into())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn take_slice<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(truncated());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.synth.dim = 4;
        c.synth.num_labels = 4;
        c.synth.confusion_pairs = vec![(0, 1)];
        c.policy.trunk_hidden = 8;
        c.policy.critic_hidden = 8;
        c
    }

    #[test]
    fn train_checkpoint_round_trips_bit_exactly() {
        let cfg = small_config();
        let mut b = PolicyBundle::new(cfg.layout(), &cfg.policy, 1).unwrap();
        b.freeze_sft();
        b.params.iter_mut().for_each(|p| *p *= -1.5);
        let vel: Vec<f64> = (0..b.params.len()).map(|i| i as f64 * 1e-3).collect();
        let ck = Checkpoint::from_bundle(&b, &cfg, CheckpointKind::Train, "final", 3, Some(&vel));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let b2 = back.to_bundle().unwrap();
        assert_eq!(b2.params, b.params);
        assert_eq!(b2.sft_view(), b.sft_view());
        assert_eq!(back.section("velocity").unwrap(), &vel[..]);
    }

    #[test]
    fn eval_checkpoint_drops_critic_and_reference() {
        let cfg = small_config();
        let mut b = PolicyBundle::new(cfg.layout(), &cfg.policy, 1).unwrap();
        b.freeze_sft();
        let ck = Checkpoint::from_bundle(&b, &cfg, CheckpointKind::Eval, "final", 0, None);
        let names: Vec<_> = ck.sections.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["trunk", "heads", "raaf", "moe"]);
        let b2 = ck.to_bundle().unwrap();
        assert!(b2.sft.is_none());
        let r = b.actor_range();
        assert_eq!(b2.params[r.clone()], b.params[r]);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let cfg = small_config();
        let b = PolicyBundle::new(cfg.layout(), &cfg.policy, 1).unwrap();
        let bytes = Checkpoint::from_bundle(&b, &cfg, CheckpointKind::Train, "init", 0, None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn mismatched_config_names_the_section() {
        let cfg = small_config();
        let b = PolicyBundle::new(cfg.layout(), &cfg.policy, 1).unwrap();
        let mut ck = Checkpoint::from_bundle(&b, &cfg, CheckpointKind::Train, "init", 0, None);
        ck.header.config.policy.trunk_hidden = 9;
        let err = ck.to_bundle().unwrap_err().to_string();
        assert!(err.contains("trunk"), "{err}");
    }
}
