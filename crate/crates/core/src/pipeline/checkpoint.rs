//! Model checkpoints: a text header with the config snapshot, then one f64
//! tensor block holding every parameter with its Adam moments and step.
//!
//! ```text
//! avfusion-checkpoint 1
//! kind <avbert|transducer>
//! step <n>
//! config <line count>
//! <config lines>
//! tensors ...
//! ```

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::asr::{ConformerConfig, Transducer};
use crate::avbert::{AvBert, AvBertConfig};
use crate::error::{Error, Result};
use crate::tensor::io::{read_block, read_line, write_block, DType};
use crate::tensor::{Parameter, ParameterSet, Tensor};

const MAGIC: &str = "avfusion-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    AvBert,
    Transducer,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::AvBert => "avbert",
            ModelKind::Transducer => "transducer",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Optimizer steps completed.
    pub step: u64,
    /// Config text the model was trained under.
    pub config: String,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn of_avbert(model: &AvBert, step: u64, config: impl Into<String>) -> Self {
        Self {
            kind: ModelKind::AvBert,
            step,
            config: config.into(),
            params: model.params.clone(),
        }
    }

    pub fn of_transducer(model: &Transducer, step: u64, config: impl Into<String>) -> Self {
        Self {
            kind: ModelKind::Transducer,
            step,
            config: config.into(),
            params: model.params.clone(),
        }
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Rebuilds an encoder; errors with a shape mismatch if `config` does
    /// not produce the stored layout.
    pub fn restore_avbert(&self, config: AvBertConfig) -> Result<AvBert> {
        self.expect(ModelKind::AvBert)?;
        AvBert::new(config, 0)?.with_params(self.params.clone())
    }

    pub fn restore_transducer(&self, config: ConformerConfig) -> Result<Transducer> {
        self.expect(ModelKind::Transducer)?;
        Transducer::new(config, 0)?.with_params(self.params.clone())
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let lines: Vec<&str> = ck.config.lines().collect();
    let mut out = format!("{MAGIC}\nkind {}\nstep {}\nconfig {}\n", ck.kind, ck.step, lines.len());
    for l in &lines {
        out.push_str(l);
        out.push('\n');
    }
    let mut owned = Vec::new();
    for (name, p) in ck.params.iter() {
        let shape = p.tensor.shape().to_vec();
        let moment = |v: &[f64]| Tensor::new(shape.clone(), v.to_vec()).expect("moment matches its parameter");
        owned.push((name.to_string(), p.tensor.clone()));
        owned.push((format!("{name}#m"), moment(&p.m)));
        owned.push((format!("{name}#v"), moment(&p.v)));
        owned.push((format!("{name}#step"), Tensor::scalar(p.step as f64)));
    }
    let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut bytes = out.into_bytes();
    write_block(&mut bytes, &refs, DType::F64).expect("writing to memory");
    bytes
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_checkpoint(ck))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |d: String| Error::corrupt(path, d);
    if read_line(&mut r, path)? != MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = read_line(&mut r, path)?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
    };
    let kind = match field("kind")?.as_str() {
        "avbert" => ModelKind::AvBert,
        "transducer" => ModelKind::Transducer,
        other => return Err(bad(format!("unknown model kind `{other}`"))),
    };
    let step = field("step")?.parse().map_err(|_| bad("bad step counter".into()))?;
    let n: usize = field("config")?.parse().map_err(|_| bad("bad config line count".into()))?;
    let mut config = String::new();
    for _ in 0..n {
        config.push_str(&read_line(&mut r, path)?);
        config.push('\n');
    }
    let mut tensors: std::collections::BTreeMap<String, Tensor> = read_block(&mut r, path)?.into_iter().collect();
    let names: Vec<String> = tensors.keys().filter(|k| !k.contains('#')).cloned().collect();
    let mut params = ParameterSet::new();
    for name in names {
        let mut take = |suffix: &str| {
            tensors
                .remove(&format!("{name}{suffix}"))
                .ok_or_else(|| bad(format!("missing `{name}{suffix}`")))
        };
        let tensor = take("")?;
        let (m, v, s) = (take("#m")?, take("#v")?, take("#step")?);
        if m.shape() != tensor.shape() || v.shape() != tensor.shape() || s.numel() != 1 {
            return Err(bad(format!("optimizer state of `{name}` has the wrong shape")));
        }
        let p = Parameter {
            tensor,
            m: m.into_data(),
            v: v.into_data(),
            step: s.item() as u64,
        };
        params.insert_parameter(name, p)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("orphan tensor `{extra}`")));
    }
    Ok(Checkpoint {
        kind,
        step,
        config,
        params,
    })
}
