//! `LMVC` checkpoint container, little-endian:
//!
//! ```text
//! "LMVC"  u32 version  u32 section-count
//! per section: 4-byte tag  u64 length  payload
//! ```
//!
//! Sections, in order: `CONF` (run config as TOML), `STAT` (trainer state as
//! JSON: model layout, RNG, progress, freeze digests, reports and the event
//! log), `PARM` (the `LMVP` parameter stream).

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::param::CountingReader;
use crate::autodiff::ParamStore;
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::train::config::RunConfig;
use crate::train::run::{Model, Trainer, TrainerState};

const MAGIC: &[u8; 4] = b"LMVC";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainerState,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        Self {
            config: trainer.config().clone(),
            state: trainer.state().clone(),
            params: trainer.store().clone(),
        }
    }

    /// Resumes the run; `tasks` must be the datasets the run was built from.
    pub fn into_trainer(self, tasks: Vec<TaskDataset>) -> Result<Trainer> {
        Trainer::from_parts(self.config, tasks, self.params, self.state)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let sections: [(&[u8; 4], Vec<u8>); 3] = [
            (b"CONF", self.config.to_toml().into_bytes()),
            (b"STAT", serde_json::to_vec(&self.state)?),
            (b"PARM", self.params.to_bytes()),
        ];
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(sections.len() as u32).to_le_bytes())?;
        for (tag, body) in &sections {
            w.write_all(*tag)?;
            w.write_all(&(body.len() as u64).to_le_bytes())?;
            w.write_all(body)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut rd = CountingReader {
            inner: r,
            offset: 0,
        };
        if &rd.array::<4>()? != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(rd.array()?);
        if version != VERSION {
            return Err(Error::format(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let count = u32::from_le_bytes(rd.array()?);
        let (mut config, mut state, mut params) = (None, None, None);
        for _ in 0..count {
            let at = rd.offset;
            let tag = rd.array::<4>()?;
            let len = u64::from_le_bytes(rd.array()?);
            let len = usize::try_from(len).map_err(|_| Error::format(at, "section too large"))?;
            let body = rd.bytes(len)?;
            let bad = |e: &dyn std::fmt::Display| {
                Error::format(
                    at,
                    format!("section {}: {e}", String::from_utf8_lossy(&tag)),
                )
            };
            match &tag {
                b"CONF" => {
                    let text = String::from_utf8(body).map_err(|e| bad(&e))?;
                    config = Some(RunConfig::from_toml(&text)?);
                }
                b"STAT" => {
                    state =
                        Some(serde_json::from_slice::<TrainerState>(&body).map_err(|e| bad(&e))?)
                }
                b"PARM" => params = Some(ParamStore::from_bytes(&body)?),
                // Unknown sections are skipped so later versions can add some.
                _ => {}
            }
        }
        let missing =
            |name: &str| Error::format(rd.offset, format!("checkpoint lacks a {name} section"));
        Ok(Self {
            config: config.ok_or_else(|| missing("CONF"))?,
            state: state.ok_or_else(|| missing("STAT"))?,
            params: params.ok_or_else(|| missing("PARM"))?,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Human-readable summary of what the checkpoint holds.
    pub fn manifest(&self) -> String {
        let s = &self.state;
        let mut out = format!(
            "run {}\nversion {VERSION}\nmode {:?}\ncapacity {:?}\nseed {}\ntasks completed {}/{}\nsteps {}\nparameters {} tensors, {} values\nevent log offset {}\n",
            self.config.name,
            self.config.mode,
            self.config.capacity,
            self.config.seed,
            s.completed,
            self.config.tasks.len(),
            s.step,
            self.params.len(),
            self.params.ids().map(|id| self.params.value(id).len()).sum::<usize>(),
            s.log.len(),
        );
        match &s.model {
            Model::Mixture(m) => {
                out.push_str(&format!("experts {}\n", m.len()));
                for (i, e) in m.experts().iter().enumerate() {
                    out.push_str(&format!(
                        "  expert {i}: {} consumed {} digest {}\n",
                        if e.is_frozen() { "frozen" } else { "trainable" },
                        m.assignment()[i],
                        e.digest(&self.params)
                    ));
                }
            }
            Model::Expansion(p) => {
                out.push_str(&format!(
                    "expansion pool: {} experts, threshold {}, shared {}\n",
                    p.len(),
                    p.threshold(),
                    if p.shared_frozen() {
                        "frozen"
                    } else {
                        "trainable"
                    }
                ));
            }
        }
        for (t, k) in s.task_expert.iter().enumerate() {
            out.push_str(&format!("  task {t} -> expert {k}\n"));
        }
        out
    }
}
