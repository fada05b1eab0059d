//! Plain-text checkpoints.
//!
//! ```text
//! causalrm-checkpoint 1
//! dims 64 8 16
//! ablation factorized=true use_reconstruction=true use_adversary=true use_kl_c=true use_kl_nc=true identity_encoder=false
//! weights pred=1.0e0 kl_c=1.0e-3 kl_nc=1.0e-3 adv=5.0e-2 rec=1.0e-3 grl=1.0e0
//! seed 1
//! step 1875
//! tensor w_mu_c 8 64
//! <one line per row, 17 significant digits>
//! ...
//! end
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{AblationConfig, Dims, ModelError, ModelParams};
use crate::datagen::fmt_f64;
use crate::losses::LossWeights;
use crate::numkernel::{Matrix, ParamSet};

const MAGIC: &str = "causalrm-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub ablation: AblationConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = self.params.dims;
        let a = &self.ablation;
        let w = &self.weights;
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "dims {} {} {}", d.embed, d.d_c, d.d_nc);
        let _ = writeln!(
            s,
            "ablation factorized={} use_reconstruction={} use_adversary={} use_kl_c={} use_kl_nc={} identity_encoder={}",
            a.factorized, a.use_reconstruction, a.use_adversary, a.use_kl_c, a.use_kl_nc, a.identity_encoder
        );
        let _ = writeln!(
            s,
            "weights pred={} kl_c={} kl_nc={} adv={} rec={} grl={}",
            fmt_f64(w.pred),
            fmt_f64(w.kl_c),
            fmt_f64(w.kl_nc),
            fmt_f64(w.adv),
            fmt_f64(w.rec),
            fmt_f64(w.grl)
        );
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "step {}", self.step);
        for (name, m) in self.params.tensors() {
            let _ = writeln!(s, "tensor {name} {} {}", m.rows(), m.cols());
            for r in 0..m.rows() {
                let row: Vec<String> = m.row_slice(r).iter().map(|x| fmt_f64(*x)).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Checkpoint, ModelError> {
        let err = |line: usize, msg: String| ModelError::Checkpoint {
            path: source.to_string(),
            msg: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next =
            |what: &str| lines.next().ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")));

        let (n, l) = next("header")?;
        if l != MAGIC {
            return Err(err(n, format!("expected `{MAGIC}`")));
        }

        let (n, l) = next("dims")?;
        let dims: Vec<usize> = keyword(l, "dims")
            .ok_or_else(|| err(n, "expected `dims`".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| err(n, format!("bad dim `{t}`: {e}"))))
            .collect::<Result<_, _>>()?;
        if dims.len() != 3 {
            return Err(err(n, "dims needs three values".into()));
        }
        let dims = Dims::new(dims[0], dims[1], dims[2]);

        let (n, l) = next("ablation")?;
        let kv = key_values(keyword(l, "ablation").ok_or_else(|| err(n, "expected `ablation`".into()))?);
        let flag = |k: &str| -> Result<bool, ModelError> {
            kv.iter()
                .find(|(key, _)| *key == k)
                .ok_or_else(|| err(n, format!("missing ablation flag {k}")))?
                .1
                .parse()
                .map_err(|e| err(n, format!("ablation flag {k}: {e}")))
        };
        let ablation = AblationConfig {
            factorized: flag("factorized")?,
            use_reconstruction: flag("use_reconstruction")?,
            use_adversary: flag("use_adversary")?,
            use_kl_c: flag("use_kl_c")?,
            use_kl_nc: flag("use_kl_nc")?,
            identity_encoder: flag("identity_encoder")?,
        };

        let (n, l) = next("weights")?;
        let kv = key_values(keyword(l, "weights").ok_or_else(|| err(n, "expected `weights`".into()))?);
        let val = |k: &str| -> Result<f64, ModelError> {
            kv.iter()
                .find(|(key, _)| *key == k)
                .ok_or_else(|| err(n, format!("missing weight {k}")))?
                .1
                .parse()
                .map_err(|e| err(n, format!("weight {k}: {e}")))
        };
        let weights = LossWeights {
            pred: val("pred")?,
            kl_c: val("kl_c")?,
            kl_nc: val("kl_nc")?,
            adv: val("adv")?,
            rec: val("rec")?,
            grl: val("grl")?,
        };

        let (n, l) = next("seed")?;
        let seed = keyword(l, "seed")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| err(n, "expected `seed <u64>`".into()))?;
        let (n, l) = next("step")?;
        let step = keyword(l, "step")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| err(n, "expected `step <u64>`".into()))?;

        let mut params = ModelParams::zeros(dims);
        let expected: Vec<(String, (usize, usize))> =
            params.tensors().into_iter().map(|(name, m)| (name.to_string(), m.shape())).collect();
        let mut read: Vec<Matrix> = Vec::with_capacity(expected.len());
        for (name, (rows, cols)) in &expected {
            let (n, l) = next("tensor")?;
            let rest = keyword(l, "tensor").ok_or_else(|| err(n, format!("expected `tensor {name}`")))?;
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != name {
                return Err(err(n, format!("expected tensor `{name}`, found `{rest}`")));
            }
            let (r, c): (usize, usize) = (
                parts[1].parse().map_err(|_| err(n, "bad row count".into()))?,
                parts[2].parse().map_err(|_| err(n, "bad column count".into()))?,
            );
            if (r, c) != (*rows, *cols) {
                return Err(err(n, format!("tensor {name} is {r}x{c} but dims require {rows}x{cols}")));
            }
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r {
                let (n, l) = next("tensor row")?;
                let row: Vec<f64> = l
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| err(n, format!("bad float `{t}`: {e}"))))
                    .collect::<Result<_, _>>()?;
                if row.len() != c {
                    return Err(err(n, format!("row of {name} has {} entries, expected {c}", row.len())));
                }
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(err(n, format!("non-finite entry in {name}")));
                }
                data.extend(row);
            }
            read.push(Matrix::from_vec(r, c, data)?);
        }
        let (n, l) = next("end")?;
        if l != "end" {
            return Err(err(n, "expected `end`".into()));
        }
        for ((_, slot), m) in params.tensors_mut().into_iter().zip(read) {
            *slot = m;
        }
        params.validate()?;
        ablation.validate()?;
        Ok(Checkpoint { params, ablation, weights, seed, step })
    }
}

fn keyword<'a>(line: &'a str, kw: &str) -> Option<&'a str> {
    line.strip_prefix(kw).and_then(|r| r.strip_prefix(' '))
}

fn key_values(s: &str) -> Vec<(&str, &str)> {
    s.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, ck.to_text())?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    Checkpoint::from_text(&text, &path.display().to_string())
}
