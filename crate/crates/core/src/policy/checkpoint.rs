//! Plain-text checkpoints.
//!
//! ```text
//! hybridrl-checkpoint v1
//! vocab 32
//! visual 16
//! encoder 16
//! context 24
//! history 12
//! hidden 48
//! seed 7
//! freeze adapter_only
//! step 120
//! tensor encoder.weight 16 16
//! <one line per row, space separated, shortest round-trip f64 form>
//! tensor adapter.encoder_projection 16 16
//! ...
//! end
//! ```
//!
//! Tensors appear in storage order. Values round-trip bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use super::{FreezeConfig, PolicyDims, PolicyParams, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "hybridrl-checkpoint v1";

pub fn render_checkpoint(p: &PolicyParams) -> String {
    let d = &p.dims;
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    for (k, v) in [
        ("vocab", d.vocab),
        ("visual", d.visual),
        ("encoder", d.encoder),
        ("context", d.context),
        ("history", d.history),
        ("hidden", d.hidden),
    ] {
        let _ = writeln!(s, "{k} {v}");
    }
    let _ = writeln!(s, "seed {}", p.seed);
    let _ = writeln!(s, "freeze {}", p.freeze);
    let _ = writeln!(s, "step {}", p.step);
    for t in Tensor::ALL {
        let (r, c) = t.shape(d);
        let _ = writeln!(s, "tensor {} {r} {c}", t.name());
        for row in p.tensor(t).chunks(c) {
            let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    s.push_str("end\n");
    s
}

pub fn save_checkpoint(p: &PolicyParams, path: &Path) -> Result<()> {
    std::fs::write(path, render_checkpoint(p)).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(text: &str, origin: &Path) -> Result<PolicyParams> {
    let bad = |m: String| Error::Parse {
        path: origin.to_path_buf(),
        message: m,
    };
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing checkpoint header".into()));
    }
    let mut header = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing `{key}` line")))?;
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
        if k != key {
            return Err(bad(format!("expected `{key}`, found `{k}`")));
        }
        Ok(v.to_string())
    };
    let num = |s: String, key: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| bad(format!("`{key}` is not an integer: {s}")))
    };
    let dims = PolicyDims {
        vocab: num(header("vocab")?, "vocab")?,
        visual: num(header("visual")?, "visual")?,
        encoder: num(header("encoder")?, "encoder")?,
        context: num(header("context")?, "context")?,
        history: num(header("history")?, "history")?,
        hidden: num(header("hidden")?, "hidden")?,
    };
    let seed = num(header("seed")?, "seed")? as u64;
    let freeze: FreezeConfig = header("freeze")?.parse()?;
    let step = num(header("step")?, "step")? as u64;

    let mut data = Vec::new();
    for t in Tensor::ALL {
        let (r, c) = t.shape(&dims);
        let line = lines.next().ok_or_else(|| bad("truncated tensor list".into()))?;
        let expect = format!("tensor {} {r} {c}", t.name());
        if line != expect {
            return Err(bad(format!("expected `{expect}`, found `{line}`")));
        }
        for _ in 0..r {
            let row = lines.next().ok_or_else(|| bad("truncated tensor".into()))?;
            let vals: std::result::Result<Vec<f64>, _> =
                row.split(' ').map(|v| v.parse::<f64>()).collect();
            let vals = vals.map_err(|e| bad(format!("bad value in {}: {e}", t.name())))?;
            if vals.len() != c {
                return Err(bad(format!("row of {} has {} values", t.name(), vals.len())));
            }
            data.extend(vals);
        }
    }
    if lines.next() != Some("end") {
        return Err(bad("missing `end` marker".into()));
    }
    PolicyParams::from_raw(dims, freeze, seed, step, data)
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, path)
}
