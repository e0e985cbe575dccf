//! On-disk model snapshots: a `key = value` manifest plus one raw
//! little-endian blob per parameter (and per Adam moment when present).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{GradStore, HasParams};
use crate::error::{Error, Result};
use crate::kernel::{KernelConfig, KernelKind, RankChoice};
use crate::model::{check_config_shapes, Model, ModelConfig};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::train::OptState;

pub const FORMAT: &str = "longhorn-checkpoint-1";
const MANIFEST: &str = "manifest.txt";

/// Config fields as manifest lines.
pub fn config_pairs(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("vocab", cfg.vocab.to_string()),
        ("layers", cfg.layers.to_string()),
        ("d_model", cfg.d_model.to_string()),
        ("state_dim", cfg.state_dim.to_string()),
        ("expand", cfg.expand.to_string()),
        ("conv_width", cfg.conv_width.to_string()),
        ("context", cfg.context.to_string()),
        ("kernel", cfg.kernel.kind.to_string()),
        ("rank", cfg.kernel.rank.to_string()),
        ("retnet_gamma", format!("{:?}", cfg.kernel.retnet_gamma)),
        ("tie_embeddings", cfg.tie_embeddings.to_string()),
        ("norm_eps", format!("{:?}", cfg.norm_eps)),
        ("precision", cfg.precision.bits().to_string()),
        ("seed", cfg.seed.to_string()),
    ]
}

fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {key}")))
}

fn parse<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    get(kv, key)?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
}

pub fn config_from_pairs(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let bits: u32 = parse(kv, "precision")?;
    let cfg = ModelConfig {
        vocab: parse(kv, "vocab")?,
        layers: parse(kv, "layers")?,
        d_model: parse(kv, "d_model")?,
        state_dim: parse(kv, "state_dim")?,
        expand: parse(kv, "expand")?,
        conv_width: parse(kv, "conv_width")?,
        context: parse(kv, "context")?,
        kernel: KernelConfig {
            kind: get(kv, "kernel")?.parse::<KernelKind>()?,
            rank: get(kv, "rank")?.parse::<RankChoice>()?,
            retnet_gamma: parse(kv, "retnet_gamma")?,
        },
        tie_embeddings: parse(kv, "tie_embeddings")?,
        norm_eps: parse(kv, "norm_eps")?,
        precision: Precision::from_bits(bits).ok_or_else(|| Error::Checkpoint(format!("precision {bits}")))?,
        seed: parse(kv, "seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// The parsed manifest, readable without knowing the precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config: ModelConfig,
    pub step: usize,
    pub params: Vec<(String, Vec<usize>)>,
    pub optimizer_step: Option<u64>,
    /// Free-form `meta.*` entries.
    pub meta: BTreeMap<String, String>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut kv = BTreeMap::new();
    let mut params = Vec::new();
    let mut meta = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if let Some(name) = k.strip_prefix("param.") {
            let shape = v
                .split('x')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Checkpoint(format!("shape of {name}: {e}")))?;
            params.push((name.to_string(), shape));
        } else if let Some(key) = k.strip_prefix("meta.") {
            meta.insert(key.to_string(), v.to_string());
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    if get(&kv, "format")? != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {}", kv["format"])));
    }
    Ok(Manifest {
        config: config_from_pairs(&kv)?,
        step: parse(&kv, "step")?,
        params,
        optimizer_step: kv.get("optimizer_step").map(|_| parse(&kv, "optimizer_step")).transpose()?,
        meta,
    })
}

fn blob_name(param: &str, suffix: &str) -> String {
    format!("{param}{suffix}.bin")
}

fn write_blob<F: Scalar>(path: &Path, t: &Tensor<F>) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * (F::BITS as usize / 8));
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob<F: Scalar>(path: &Path, shape: &[usize]) -> Result<Tensor<F>> {
    let bytes = fs::read(path)?;
    let width = F::BITS as usize / 8;
    let n: usize = shape.iter().product();
    if bytes.len() != n * width {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            n * width
        )));
    }
    let data = bytes.chunks_exact(width).map(F::read_le).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Write `model` (and optimizer moments) to `dir`, creating it.
pub fn save<F: Scalar>(
    dir: &Path,
    model: &Model<F>,
    step: usize,
    opt: Option<&OptState<F>>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = format!("format = {FORMAT}\nstep = {step}\n");
    for (k, v) in config_pairs(&model.config) {
        text.push_str(&format!("{k} = {v}\n"));
    }
    if let Some(o) = opt {
        text.push_str(&format!("optimizer_step = {}\n", o.step));
    }
    for (k, v) in meta {
        text.push_str(&format!("meta.{k} = {v}\n"));
    }
    let names = model.param_names();
    let mut slot = 0;
    let mut result = Ok(());
    model.visit(&mut |p| {
        let name = &names[slot];
        let dims: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        text.push_str(&format!("param.{name} = {}\n", dims.join("x")));
        if result.is_ok() {
            result = write_blob(&dir.join(blob_name(name, "")), &p.value);
            if let (Some(o), true) = (opt, result.is_ok()) {
                result = write_blob(&dir.join(blob_name(name, ".adam_m")), &o.m.tensors()[slot])
                    .and_then(|_| write_blob(&dir.join(blob_name(name, ".adam_v")), &o.v.tensors()[slot]));
            }
        }
        slot += 1;
    });
    result?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub model: Model<F>,
    pub step: usize,
    pub opt: Option<OptState<F>>,
    pub meta: BTreeMap<String, String>,
}

/// Load a checkpoint written by [`save`]; the manifest's shapes must match
/// those implied by its config.
pub fn load<F: Scalar>(dir: &Path) -> Result<Checkpoint<F>> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::<F>::init(&manifest.config)?;
    check_config_shapes(&model, &manifest.params)?;
    let shapes = model.param_shapes().to_vec();
    let values = manifest
        .params
        .iter()
        .map(|(name, shape)| read_blob::<F>(&dir.join(blob_name(name, "")), shape))
        .collect::<Result<Vec<_>>>()?;
    let mut it = values.into_iter();
    model.visit_mut(&mut |p| p.value = it.next().expect("count checked"));
    let opt = match manifest.optimizer_step {
        None => None,
        Some(step) => {
            let mut m = GradStore::zeros(&shapes);
            let mut v = GradStore::zeros(&shapes);
            for (slot, (name, shape)) in manifest.params.iter().enumerate() {
                m.tensors_mut()[slot] = read_blob(&dir.join(blob_name(name, ".adam_m")), shape)?;
                v.tensors_mut()[slot] = read_blob(&dir.join(blob_name(name, ".adam_v")), shape)?;
            }
            Some(OptState { m, v, step })
        }
    };
    Ok(Checkpoint {
        model,
        step: manifest.step,
        opt,
        meta: manifest.meta,
    })
}
