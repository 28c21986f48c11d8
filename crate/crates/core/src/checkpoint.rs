//! Checkpoint container: magic `USBC`, a version word, then named ".ubt"
//! blocks for the schedule tables, both models' parameters, optimizer
//! moments, the RNG state, and the step counter. Schedule tables are loaded
//! verbatim, never recomputed, so a resumed run is bit-stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::denoiser::{AdamState, ConvDenoiser};
use crate::rng::Stream;
use crate::schedule::NoiseSchedule;
use crate::ubt::{self, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"USBC";
pub const VERSION: u32 = 1;

/// Everything needed to resume or run inference.
#[derive(Clone)]
pub struct Checkpoint {
    pub schedule: NoiseSchedule,
    pub lesion: ConvDenoiser,
    pub brain: ConvDenoiser,
    pub lesion_opt: AdamState,
    pub brain_opt: AdamState,
    /// Base stream; per-step substreams derive from it.
    pub rng: Stream,
    pub step: u64,
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

fn join_u64(hi: f64, lo: f64) -> u64 {
    ((hi as u64) << 32) | (lo as u64)
}

fn adam_tensors(prefix: &str, opt: &AdamState) -> Vec<(String, Tensor)> {
    let mut out = opt.m.named_tensors(&format!("{prefix}.m"));
    out.extend(opt.v.named_tensors(&format!("{prefix}.v")));
    out.push((
        format!("{prefix}.step"),
        Tensor::from_vec(vec![opt.step as f64]),
    ));
    out
}

impl Checkpoint {
    fn blocks(&self) -> Vec<(String, Tensor)> {
        let mut blocks = self.schedule.to_tensors();
        blocks.extend(self.lesion.named_tensors("lesion"));
        blocks.extend(self.brain.named_tensors("brain"));
        blocks.extend(adam_tensors("opt.lesion", &self.lesion_opt));
        blocks.extend(adam_tensors("opt.brain", &self.brain_opt));
        let (key, counter) = self.rng.state();
        let mut rng_state = Vec::new();
        rng_state.extend_from_slice(&split_u64(key));
        rng_state.extend_from_slice(&split_u64(counter));
        blocks.push(("rng.state".into(), Tensor::from_vec(rng_state)));
        blocks.push(("train.step".into(), Tensor::from_vec(vec![self.step as f64])));
        blocks
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let blocks = self.blocks();
        let run = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(blocks.len() as u32).to_le_bytes())?;
            for (name, tensor) in &blocks {
                ubt::write_named(w, name, tensor)?;
            }
            w.flush()
        };
        run(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad checkpoint magic {magic:?}",
                path.display()
            )));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        r.read_exact(&mut word)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let count = u32::from_le_bytes(word) as usize;
        let mut blocks = std::collections::BTreeMap::new();
        for _ in 0..count {
            let (name, tensor) = ubt::read_named(&mut r)?;
            blocks.insert(name, tensor);
        }
        let take_vec = |name: &str| -> Result<Vec<f64>> {
            blocks
                .get(name)
                .map(|t| t.data.clone())
                .ok_or_else(|| Error::Format(format!("missing block {name}")))
        };
        let schedule = NoiseSchedule::from_tables(
            take_vec("schedule.beta")?,
            take_vec("schedule.alpha")?,
            take_vec("schedule.alpha_bar")?,
            take_vec("schedule.posterior_var")?,
        )?;
        let lookup = |name: &str| blocks.get(name).cloned();
        let lesion = ConvDenoiser::from_named_tensors("lesion", &lookup)?;
        let brain = ConvDenoiser::from_named_tensors("brain", &lookup)?;
        let load_opt = |prefix: &str| -> Result<AdamState> {
            Ok(AdamState {
                m: ConvDenoiser::from_named_tensors(&format!("{prefix}.m"), &lookup)?,
                v: ConvDenoiser::from_named_tensors(&format!("{prefix}.v"), &lookup)?,
                step: take_vec(&format!("{prefix}.step"))?[0] as u64,
            })
        };
        let lesion_opt = load_opt("opt.lesion")?;
        let brain_opt = load_opt("opt.brain")?;
        let rng_state = take_vec("rng.state")?;
        if rng_state.len() != 4 {
            return Err(Error::Format("rng.state must have 4 entries".into()));
        }
        let rng = Stream::from_state(
            join_u64(rng_state[0], rng_state[1]),
            join_u64(rng_state[2], rng_state[3]),
        );
        let step = take_vec("train.step")?[0] as u64;
        Ok(Checkpoint {
            schedule,
            lesion,
            brain,
            lesion_opt,
            brain_opt,
            rng,
            step,
        })
    }
}
