//! Self-describing binary checkpoints for bag weights and merged convolutions.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      "ERPF"
//! version    u32 = 1
//! config     u32 byte length + UTF-8 `key=value` lines
//! count      u32 number of tensors
//! tensor*    u16 name length + UTF-8 name
//!            u8 dtype (0 = f32, 1 = f64)
//!            u8 rank, rank x u32 dims
//!            raw element data
//! ```
//!
//! The config record always carries `form` (`weights` or `merged`) plus the
//! block configuration the tensors belong to.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::block::{BranchParams, HprfbConfig, HprfbWeights, RfType};
use crate::error::{Error, Result};
use crate::reparam::MergedConv;
use crate::tensor::{BnParams, Dtype, Kernel4, KernelDims, Real};

pub const MAGIC: &[u8; 4] = b"ERPF";
pub const VERSION: u32 = 1;

/// What a checkpoint holds, at one precision.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload<T> {
    Weights(HprfbWeights<T>),
    Merged {
        config: HprfbConfig,
        conv: MergedConv<T>,
    },
}

impl<T: Real> Payload<T> {
    pub fn config(&self) -> &HprfbConfig {
        match self {
            Payload::Weights(w) => w.config(),
            Payload::Merged { config, .. } => config,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    F32(Payload<f32>),
    F64(Payload<f64>),
}

impl Checkpoint {
    pub fn config(&self) -> &HprfbConfig {
        match self {
            Checkpoint::F32(p) => p.config(),
            Checkpoint::F64(p) => p.config(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Checkpoint::F32(_) => Dtype::F32,
            Checkpoint::F64(_) => Dtype::F64,
        }
    }

    pub fn is_merged(&self) -> bool {
        matches!(
            self,
            Checkpoint::F32(Payload::Merged { .. }) | Checkpoint::F64(Payload::Merged { .. })
        )
    }
}

impl From<HprfbWeights<f64>> for Checkpoint {
    fn from(w: HprfbWeights<f64>) -> Self {
        Checkpoint::F64(Payload::Weights(w))
    }
}

impl From<HprfbWeights<f32>> for Checkpoint {
    fn from(w: HprfbWeights<f32>) -> Self {
        Checkpoint::F32(Payload::Weights(w))
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

fn config_record(config: &HprfbConfig, form: &str) -> String {
    let types: Vec<&str> = config.rf_types.iter().map(|t| t.code()).collect();
    let scales: Vec<String> = config.scales.iter().map(usize::to_string).collect();
    format!(
        "form={form}\nscales={}\ntypes={}\nin_channels={}\nout_channels={}\ngroups={}\nstride={}\nbn_eps={}\n",
        scales.join(","),
        types.join(","),
        config.in_channels,
        config.out_channels,
        config.groups,
        config.stride,
        config.bn_eps
    )
}

fn push_tensor<T: Real>(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[T]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

fn branch_prefix(scale: usize, rf: RfType) -> String {
    format!("branch.{scale}.{}", rf.code())
}

fn encode_payload<T: Real>(p: &Payload<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (record, count) = match p {
        Payload::Weights(w) => (config_record(w.config(), "weights"), w.branches().len() * 6),
        Payload::Merged { config, .. } => (config_record(config, "merged"), 2),
    };
    out.extend_from_slice(&(record.len() as u32).to_le_bytes());
    out.extend_from_slice(record.as_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    match p {
        Payload::Weights(w) => {
            for b in w.branches() {
                let pre = branch_prefix(b.scale, b.rf_type);
                let kd = b.kernel.dims();
                let c = [b.bias.len()];
                push_tensor(&mut out, &format!("{pre}.kernel"), &[kd.cout, kd.cg, kd.kh, kd.kw], b.kernel.data());
                push_tensor(&mut out, &format!("{pre}.bias"), &c, &b.bias);
                push_tensor(&mut out, &format!("{pre}.bn.mean"), &c, &b.bn.mean);
                push_tensor(&mut out, &format!("{pre}.bn.var"), &c, &b.bn.var);
                push_tensor(&mut out, &format!("{pre}.bn.gamma"), &c, &b.bn.gamma);
                push_tensor(&mut out, &format!("{pre}.bn.beta"), &c, &b.bn.beta);
            }
        }
        Payload::Merged { conv, .. } => {
            let kd = conv.kernel.dims();
            push_tensor(&mut out, "merged.kernel", &[kd.cout, kd.cg, kd.kh, kd.kw], conv.kernel.data());
            push_tensor(&mut out, "merged.bias", &[conv.bias.len()], &conv.bias);
        }
    }
    out
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    match ckpt {
        Checkpoint::F32(p) => encode_payload(p),
        Checkpoint::F64(p) => encode_payload(p),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                what,
                format!(
                    "truncated at byte {}: need {n} more bytes, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

struct RawTensor {
    dtype: Dtype,
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl RawTensor {
    fn values<T: Real>(&self) -> Vec<T> {
        self.data.chunks_exact(T::DTYPE.size()).map(T::read_le).collect()
    }
}

fn parse_config(record: &str) -> Result<(String, HprfbConfig)> {
    let at = "config record";
    let mut fields = HashMap::new();
    for line in record.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(at, format!("malformed line `{line}`")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::parse(at, format!("missing `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|e| Error::parse(at, format!("`{k}`: {e}")))
    };
    let scales = get("scales")?
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::parse(at, format!("`scales`: {e}")))?;
    let rf_types = get("types")?
        .split(',')
        .map(str::parse::<RfType>)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::parse(at, e.to_string()))?;
    let bn_eps: f64 = get("bn_eps")?
        .parse()
        .map_err(|e| Error::parse(at, format!("`bn_eps`: {e}")))?;
    let config = HprfbConfig {
        scales,
        rf_types,
        in_channels: num("in_channels")?,
        out_channels: num("out_channels")?,
        groups: num("groups")?,
        stride: num("stride")?,
        bn_eps,
    };
    config
        .validate()
        .map_err(|e| Error::parse(at, e.to_string()))?;
    Ok((get("form")?.to_string(), config))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "header")? != MAGIC {
        return Err(Error::parse("header", "bad magic, expected `ERPF`"));
    }
    let version = cur.u32("header")?;
    if version != VERSION {
        return Err(Error::parse("header", format!("unsupported version {version}")));
    }
    let len = cur.u32("config record")? as usize;
    let record = std::str::from_utf8(cur.take(len, "config record")?)
        .map_err(|e| Error::parse("config record", e.to_string()))?;
    let (form, config) = parse_config(record)?;

    let count = cur.u32("tensor count")? as usize;
    let mut tensors: HashMap<String, RawTensor> = HashMap::with_capacity(count);
    let mut dtype = None;
    for i in 0..count {
        let at = format!("tensor #{i}");
        let name_len = cur.u16(&at)? as usize;
        let name = std::str::from_utf8(cur.take(name_len, &at)?)
            .map_err(|e| Error::parse(&at, e.to_string()))?
            .to_string();
        let at = format!("tensor #{i} `{name}`");
        let code = cur.u8(&at)?;
        let dt = Dtype::from_code(code)
            .ok_or_else(|| Error::parse(&at, format!("unknown dtype {code}")))?;
        if *dtype.get_or_insert(dt) != dt {
            return Err(Error::parse(&at, "mixed precisions in one checkpoint"));
        }
        let rank = cur.u8(&at)? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32(&at).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = cur.take(n * dt.size(), &at)?.to_vec();
        if tensors.insert(name.clone(), RawTensor { dtype: dt, dims, data }).is_some() {
            return Err(Error::parse(&at, "duplicate tensor name"));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - cur.pos),
        ));
    }
    match dtype.unwrap_or(Dtype::F64) {
        Dtype::F32 => Ok(Checkpoint::F32(assemble(&form, config, &tensors)?)),
        Dtype::F64 => Ok(Checkpoint::F64(assemble(&form, config, &tensors)?)),
    }
}

fn fetch<T: Real>(
    tensors: &HashMap<String, RawTensor>,
    name: &str,
    dims: &[usize],
) -> Result<Vec<T>> {
    let t = tensors
        .get(name)
        .ok_or_else(|| Error::parse(name, "missing tensor"))?;
    if t.dims != dims {
        return Err(Error::parse(
            name,
            format!("dims {:?}, expected {dims:?}", t.dims),
        ));
    }
    debug_assert_eq!(t.dtype, T::DTYPE);
    Ok(t.values())
}

fn assemble<T: Real>(
    form: &str,
    config: HprfbConfig,
    tensors: &HashMap<String, RawTensor>,
) -> Result<Payload<T>> {
    let cout = config.out_channels;
    match form {
        "weights" => {
            if tensors.len() != config.branch_count() * 6 {
                return Err(Error::parse(
                    "tensor count",
                    format!("{} tensors, config needs {}", tensors.len(), config.branch_count() * 6),
                ));
            }
            let eps = T::from_f64(config.bn_eps);
            let mut branches = Vec::with_capacity(config.branch_count());
            for (scale, rf) in config.branch_keys() {
                let pre = branch_prefix(scale, rf);
                let kd = config.kernel_dims(scale, rf)?;
                let kernel = Kernel4::new(
                    kd,
                    fetch(tensors, &format!("{pre}.kernel"), &[kd.cout, kd.cg, kd.kh, kd.kw])?,
                )?;
                let vec = |suffix: &str| fetch::<T>(tensors, &format!("{pre}.{suffix}"), &[cout]);
                let bn = BnParams {
                    mean: vec("bn.mean")?,
                    var: vec("bn.var")?,
                    gamma: vec("bn.gamma")?,
                    beta: vec("bn.beta")?,
                    eps,
                };
                bn.validate()
                    .map_err(|e| Error::parse(format!("{pre}.bn"), e.to_string()))?;
                branches.push(BranchParams {
                    scale,
                    rf_type: rf,
                    kernel,
                    bias: vec("bias")?,
                    bn,
                });
            }
            Ok(Payload::Weights(HprfbWeights::new(config, branches)?))
        }
        "merged" => {
            if tensors.len() != 2 {
                return Err(Error::parse(
                    "tensor count",
                    format!("{} tensors, merged form needs 2", tensors.len()),
                ));
            }
            let k = config.max_scale();
            let kd = KernelDims::new(cout, config.channels_per_group(), k, k);
            let kernel = Kernel4::new(
                kd,
                fetch(tensors, "merged.kernel", &[kd.cout, kd.cg, kd.kh, kd.kw])?,
            )?;
            let conv = MergedConv {
                kernel,
                bias: fetch(tensors, "merged.bias", &[cout])?,
                stride: config.stride,
                groups: config.groups,
            };
            conv.validate()
                .map_err(|e| Error::parse("merged.kernel", e.to_string()))?;
            Ok(Payload::Merged { config, conv })
        }
        other => Err(Error::parse("config record", format!("unknown form `{other}`"))),
    }
}
