//! Checkpoint files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "XCK1"
//! 4       4     u32 format version (1)
//! 8       8     u64 seed
//! 16      8     u64 optimizer step counter
//! 24      4     u32 table length L
//! 28      L     UTF-8 JSON layer table: input shape, class names, layers
//!               (name, kind, frozen, weight count, bias count)
//! 28+L    4*n   f32 parameters, layer by layer, weights then biases
//! ```
//!
//! All integers and floats are little-endian. Parameters are stored as f32 and
//! widened on load.

use super::{LayerSpec, Network, NnetError, Params, Result, Shape};
use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"XCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub class_names: Vec<String>,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    spec: LayerSpec,
    frozen: bool,
    weights: usize,
    bias: usize,
}

#[derive(Serialize, Deserialize)]
struct Table {
    input: Shape,
    class_names: Vec<String>,
    layers: Vec<LayerEntry>,
}

fn bad(msg: impl Into<String>) -> NnetError {
    NnetError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<()> {
    let net = &ckpt.network;
    let table = Table {
        input: net.input_shape(),
        class_names: ckpt.class_names.clone(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerEntry {
                spec: l.spec().clone(),
                frozen: l.is_frozen(),
                weights: l.params().map_or(0, |p| p.weights.len()),
                bias: l.params().map_or(0, |p| p.bias.len()),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&table).map_err(|e| bad(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u64::<LittleEndian>(net.seed())?;
    out.write_u64::<LittleEndian>(ckpt.step)?;
    out.write_u32::<LittleEndian>(json.len() as u32)?;
    out.write_all(&json)?;
    for p in net.layers().iter().filter_map(|l| l.params()) {
        let values: Vec<f32> = p.weights.iter().chain(&p.bias).map(|&v| v as f32).collect();
        let mut buf = vec![0u8; 4 * values.len()];
        LittleEndian::write_f32_into(&values, &mut buf);
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let seed = input.read_u64::<LittleEndian>()?;
    let step = input.read_u64::<LittleEndian>()?;
    let len = input.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let table: Table =
        serde_json::from_slice(&json).map_err(|e| bad(format!("layer table: {e}")))?;
    let specs = table.layers.iter().map(|e| e.spec.clone()).collect();
    let mut network = Network::new(table.input, specs, seed)?;
    for (idx, entry) in table.layers.iter().enumerate() {
        network.set_frozen(idx, entry.frozen);
        let expected = network
            .params(idx)
            .map_or((0, 0), |p| (p.weights.len(), p.bias.len()));
        if expected != (entry.weights, entry.bias) {
            return Err(bad(format!(
                "layer {:?} parameter counts do not match its kind",
                entry.spec.name
            )));
        }
        if entry.weights + entry.bias == 0 {
            continue;
        }
        let mut buf = vec![0u8; 4 * (entry.weights + entry.bias)];
        input
            .read_exact(&mut buf)
            .map_err(|_| bad("truncated parameter data"))?;
        let mut values = vec![0f32; entry.weights + entry.bias];
        LittleEndian::read_f32_into(&buf, &mut values);
        let widened: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        network.set_params(
            idx,
            Params {
                weights: widened[..entry.weights].to_vec(),
                bias: widened[entry.weights..].to_vec(),
            },
        )?;
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    if table.class_names.len() != network.output_shape().len() {
        return Err(bad(format!(
            "{} class names for {} outputs",
            table.class_names.len(),
            network.output_shape().len()
        )));
    }
    Ok(Checkpoint {
        network,
        class_names: table.class_names,
        step,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
