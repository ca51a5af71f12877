//! FVTW tensor containers, stand-in language-model blocks, block import and
//! model checkpoints.
//!
//! # FVTW byte layout
//!
//! All integers are unsigned 32-bit little-endian, all payloads 32-bit
//! little-endian IEEE floats in row-major order.
//!
//! ```text
//! "FVTW"  version(=1)  entry_count
//! per entry:  name_len  name(UTF-8)  rank  dim_0 … dim_{rank-1}  payload(4·∏dims bytes)
//! ```
//!
//! Files are little-endian regardless of host; big-endian hosts would need a
//! byte-swapping reader.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Activation, BlockWeights, Init, Variant};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Stage};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"FVTW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered, uniquely named collection of f32 arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<Entry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate entry name {name:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "entry {name:?}: dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        self.entries.push(Entry {
            name,
            dims: dims.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let data = t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        self.push(name, t.shape(), data)
    }

    /// The named entry as a constant tensor.
    pub fn tensor<T: Real>(&self, name: &str) -> Option<Tensor<T>> {
        let e = self.get(name)?;
        Tensor::new(&e.dims, e.data.iter().map(|&v| T::of(v as f64)).collect()).ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|e| 16 + e.name.len() + 4 * (e.dims.len() + e.data.len())).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header")? != MAGIC {
            return Err(Error::Format("bad magic, not an FVTW container".into()));
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32("header")? as usize;
        let mut c = TensorContainer::new();
        for i in 0..count {
            let what = format!("entry #{i}");
            let name_len = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32(&name)? as usize;
            let dims = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("entry {name:?}: truncated payload")))?;
            let data = r
                .take(4 * n, &name)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if c.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate entry name {name:?}")));
            }
            c.entries.push(Entry { name, dims, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after last entry", r.remaining())));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!("{what}: truncated (need {n} bytes, {} left)", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {:?}", i + 1, k.trim())));
        }
    }
    Ok(out)
}

/// Deterministic random blocks standing in for pre-trained ones.
///
/// Projections are `N(0,1)/√fan_in` (so `/√dim`, and `/√hidden` for the
/// down projection), norm weights one, biases zero.
pub fn mock_llm<T: Real>(
    seed: u64,
    dim: usize,
    n_heads: usize,
    ffn_hidden: usize,
    variant: Variant,
    n_blocks: usize,
) -> Result<Vec<BlockWeights<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_blocks)
        .map(|_| {
            let mut b = BlockWeights::random(variant, dim, n_heads, ffn_hidden, Init::ScaledNormal, &mut rng)?;
            b.set_trainable(false);
            Ok(b)
        })
        .collect()
}

/// Stores `blocks` under `layers.{i}.{field}` names.
pub fn blocks_to_container<T: Real>(blocks: &[BlockWeights<T>]) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    for (i, b) in blocks.iter().enumerate() {
        for (name, t) in b.params() {
            c.push_tensor(format!("layers.{i}.{name}"), t)?;
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Matrices stored `[in, out]`, as used here.
    InOut,
    /// Matrices stored `[out, in]` (the usual layout of exported linear layers).
    OutIn,
}

/// Describes where each block field lives in a foreign container.
///
/// Text form, one `key=value` per line:
///
/// ```text
/// source=llama-7b
/// block_index=31
/// variant=llama
/// n_heads=32
/// layout=out_in
/// attn.wq=layers.{block}.attention.wq.weight
/// ...
/// ```
///
/// `{block}` in a source name is replaced by `block_index`. Optional keys:
/// `activation` (default gelu), `layout` (default in_out).
#[derive(Debug, Clone, PartialEq)]
pub struct ImportManifest {
    pub source: String,
    pub block_index: usize,
    pub variant: Variant,
    pub n_heads: usize,
    pub activation: Activation,
    pub layout: Layout,
    /// Block field → source tensor name.
    pub mapping: BTreeMap<String, String>,
}

impl ImportManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = parse_kv(text).map_err(|e| Error::Manifest(e.to_string()))?;
        let mut take = |k: &str| kv.remove(k).ok_or_else(|| Error::Manifest(format!("manifest is missing {k:?}")));
        let source = take("source")?;
        let block_index = take("block_index")?
            .parse()
            .map_err(|_| Error::Manifest("block_index must be an integer".into()))?;
        let variant: Variant = take("variant")?.parse().map_err(|e: Error| Error::Manifest(e.to_string()))?;
        let n_heads = take("n_heads")?
            .parse()
            .map_err(|_| Error::Manifest("n_heads must be an integer".into()))?;
        let activation = match kv.remove("activation") {
            Some(a) => a.parse().map_err(|e: Error| Error::Manifest(e.to_string()))?,
            None => Activation::Gelu,
        };
        let layout = match kv.remove("layout").as_deref() {
            None | Some("in_out") => Layout::InOut,
            Some("out_in") => Layout::OutIn,
            Some(other) => return Err(Error::Manifest(format!("unknown layout {other:?}"))),
        };
        let fields = variant.field_names();
        if let Some(extra) = kv.keys().find(|k| !fields.contains(&k.as_str())) {
            return Err(Error::Manifest(format!("{extra:?} is not a {variant} block field")));
        }
        Ok(ImportManifest {
            source,
            block_index,
            variant,
            n_heads,
            activation,
            layout,
            mapping: kv,
        })
    }

    pub fn to_text(&self) -> String {
        let layout = match self.layout {
            Layout::InOut => "in_out",
            Layout::OutIn => "out_in",
        };
        let mut s = format!(
            "source={}\nblock_index={}\nvariant={}\nn_heads={}\nactivation={}\nlayout={layout}\n",
            self.source, self.block_index, self.variant, self.n_heads, self.activation
        );
        for (k, v) in &self.mapping {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Identity mapping onto the `layers.{block}.{field}` names written by
    /// [`blocks_to_container`].
    pub fn for_mock(variant: Variant, n_heads: usize, block_index: usize) -> Self {
        ImportManifest {
            source: "mock".into(),
            block_index,
            variant,
            n_heads,
            activation: Activation::Gelu,
            layout: Layout::InOut,
            mapping: variant
                .field_names()
                .iter()
                .map(|f| (f.to_string(), format!("layers.{{block}}.{f}")))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Extracts one block from `container` as described by `manifest`. The block
/// width is whatever the tensors say; the result is frozen.
pub fn import_block<T: Real>(container: &TensorContainer, manifest: &ImportManifest) -> Result<BlockWeights<T>> {
    let fields = manifest.variant.field_names();
    if let Some(missing) = fields.iter().find(|f| !manifest.mapping.contains_key(**f)) {
        return Err(Error::Manifest(format!("manifest does not map block field {missing:?}")));
    }
    let mut seen = HashSet::new();
    for src in manifest.mapping.values() {
        if !seen.insert(src) {
            return Err(Error::Manifest(format!("source tensor {src:?} is mapped more than once")));
        }
    }
    let mut lookup_err = None;
    let block = BlockWeights::from_fields(manifest.variant, manifest.n_heads, manifest.activation, |field| {
        let src = manifest.mapping[field].replace("{block}", &manifest.block_index.to_string());
        let Some(t) = container.tensor::<T>(&src) else {
            lookup_err = Some(Error::Manifest(format!("field {field:?}: source tensor {src:?} not in container")));
            return None;
        };
        match (manifest.layout, t.rank()) {
            (Layout::OutIn, 2) => t.transpose().ok(),
            _ => Some(t),
        }
    });
    let mut block = match (block, lookup_err) {
        (_, Some(e)) => return Err(e),
        (Ok(b), None) => b,
        (Err(Error::Shape(m) | Error::Config(m)), None) => {
            return Err(Error::Manifest(format!("inconsistent block dimensions: {m}")))
        }
        (Err(e), None) => return Err(e),
    };
    block.set_trainable(false);
    Ok(block)
}

const CHECKPOINT_WEIGHTS: &str = "model.fvtw";
const CHECKPOINT_CONFIG: &str = "model.cfg";

pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(CHECKPOINT_WEIGHTS), dir.join(CHECKPOINT_CONFIG))
}

/// Writes every parameter, the config and the frozen flags into `dir`.
pub fn save_checkpoint<T: Real>(model: &Model<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut c = TensorContainer::new();
    for (name, t) in model.named_params() {
        c.push_tensor(name, t)?;
    }
    let frozen: Vec<String> = model.frozen_parameters().into_iter().map(|(n, _)| n).collect();
    let mut cfg = model.config.to_kv();
    cfg.push_str(&format!("stage={}\n", stage_kind(&model.stage)));
    cfg.push_str(&format!("frozen={}\n", frozen.join(",")));
    let (weights, sidecar) = checkpoint_paths(dir);
    c.save(&weights)?;
    write_atomic(&sidecar, cfg.as_bytes())
}

fn stage_kind<T: Real>(s: &Stage<T>) -> &'static str {
    match s {
        Stage::None => "none",
        Stage::Blocks { .. } => "blocks",
        Stage::Bridge { .. } => "bridge",
        Stage::Linearized { .. } => "linearized",
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let (weights, sidecar) = checkpoint_paths(dir);
    let mut kv = parse_kv(&fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?)?;
    let stage = kv.remove("stage").unwrap_or_else(|| "blocks".into());
    let frozen: Vec<String> = kv
        .remove("frozen")
        .map(|s| s.split(',').filter(|x| !x.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    let config = ModelConfig::from_kv(&kv)?;
    let container = TensorContainer::load(&weights)?;
    let tensors: HashMap<String, Tensor<f32>> = container
        .names()
        .filter_map(|n| container.tensor(n).map(|t| (n.to_string(), t)))
        .collect();

    // Build a skeleton of the right shape, then overwrite every parameter.
    let source = config
        .arm
        .needs_llm_source()
        .then(|| {
            mock_llm(0, config.llm_dim, config.llm_heads, config.llm_ffn_hidden, config.llm_variant, config.n_llm_blocks)
                .map(|mut v| {
                    v.iter_mut().for_each(|b| b.activation = config.llm_activation);
                    v
                })
        })
        .transpose()?;
    let mut model = Model::build(&config, source, 0)?;
    if stage == "linearized" {
        let map = tensors
            .get("linear_stage.map")
            .ok_or_else(|| Error::Format("linearized checkpoint lacks linear_stage.map".into()))?;
        model = model.with_linear_stage(map.clone())?;
    }
    model.load_named(&tensors, Some(&frozen))?;
    Ok(model)
}
