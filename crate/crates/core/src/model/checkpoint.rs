//! Self-describing text checkpoints.
//!
//! ```text
//! MUSE-CHECKPOINT v1
//! [config]      the canonical config text
//! [dims]        k_t, d_t, k_v, d_v
//! [structure]   mode, then `<path> edge(i,j) ops=A,B[ chosen=A]`
//! [genotype]    genotype text, each line indented by two spaces
//! [rng]         model seed
//! [params]      name <TAB> shape <TAB> group <TAB> trainable <TAB> f64 bits in hex
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::{ParamGroup, Tensor};
use crate::cells::{ChainKind, EdgeId};
use crate::config::Config;
use crate::error::{MuseError, Result};
use crate::paths::Dims;

use super::{EdgeStructure, Mode, Muse, Structure};

const HEADER: &str = "MUSE-CHECKPOINT v1";

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub model: Muse,
    pub genotype: String,
}

fn bad(line: usize, msg: impl Into<String>) -> MuseError {
    MuseError::Parse {
        offset: line as u64,
        message: format!("checkpoint line {line}: {}", msg.into()),
    }
}

pub fn checkpoint_text(config: &Config, model: &Muse) -> String {
    let mut s = String::new();
    s.push_str(HEADER);
    s.push('\n');
    s.push_str("[config]\n");
    s.push_str(&config.to_text());
    let d = model.dims;
    let _ = writeln!(s, "[dims]\nk_t = {}\nd_t = {}\nk_v = {}\nd_v = {}", d.k_t, d.d_t, d.k_v, d.d_v);
    let st = model.structure();
    let _ = writeln!(s, "[structure]\nmode = {}", st.mode.as_str());
    for e in &st.edges {
        let _ = write!(s, "{} {} ops={}", e.path.as_str(), e.id, e.ops.join(","));
        if let Some(c) = &e.chosen {
            let _ = write!(s, " chosen={c}");
        }
        s.push('\n');
    }
    s.push_str("[genotype]\n");
    for line in model.genotype().lines() {
        let _ = writeln!(s, "  {line}");
    }
    let _ = writeln!(s, "[rng]\nseed = {}", model.seed);
    s.push_str("[params]\n");
    for (_, p) in model.store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        let bits: Vec<String> = p.value.data().iter().map(|x| format!("{:016x}", x.to_bits())).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            p.name,
            shape.join(","),
            p.group.as_str(),
            p.requires_grad,
            bits.join(" ")
        );
    }
    s
}

pub fn save_checkpoint(path: &Path, config: &Config, model: &Muse) -> Result<()> {
    std::fs::write(path, checkpoint_text(config, model))?;
    Ok(())
}

fn parse_edge(line: usize, s: &str) -> Result<EdgeId> {
    let inner = s
        .strip_prefix("edge(")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| bad(line, format!("bad edge `{s}`")))?;
    let (a, b) = inner.split_once(',').ok_or_else(|| bad(line, format!("bad edge `{s}`")))?;
    let from = a.trim().parse().map_err(|_| bad(line, format!("bad edge `{s}`")))?;
    let to = b.trim().parse().map_err(|_| bad(line, format!("bad edge `{s}`")))?;
    Ok(EdgeId { from, to })
}

fn parse_structure(lines: &[(usize, &str)]) -> Result<Structure> {
    let mut mode = None;
    let mut edges = Vec::new();
    for &(n, l) in lines {
        if let Some(m) = l.strip_prefix("mode = ") {
            mode = Some(match m {
                "search" => Mode::Search,
                "discrete" => Mode::Discrete,
                _ => return Err(bad(n, format!("unknown mode `{m}`"))),
            });
            continue;
        }
        let mut parts = l.split_whitespace();
        let path = match parts.next() {
            Some("linear") => ChainKind::Linear,
            Some("sequence") => ChainKind::Sequence,
            other => return Err(bad(n, format!("unknown path {other:?}"))),
        };
        let id = parse_edge(n, parts.next().unwrap_or(""))?;
        let ops = parts
            .next()
            .and_then(|p| p.strip_prefix("ops="))
            .ok_or_else(|| bad(n, "missing ops="))?
            .split(',')
            .map(str::to_string)
            .collect();
        let chosen = match parts.next() {
            Some(c) => Some(c.strip_prefix("chosen=").ok_or_else(|| bad(n, "expected chosen="))?.to_string()),
            None => None,
        };
        edges.push(EdgeStructure { path, id, ops, chosen });
    }
    Ok(Structure {
        mode: mode.ok_or_else(|| bad(0, "structure has no mode"))?,
        edges,
    })
}

fn kv(lines: &[(usize, &str)], key: &str) -> Result<u64> {
    for &(n, l) in lines {
        if let Some((k, v)) = l.split_once('=') {
            if k.trim() == key {
                return v.trim().parse().map_err(|_| bad(n, format!("bad value for `{key}`")));
            }
        }
    }
    Err(bad(0, format!("missing `{key}`")))
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, HEADER)) => {}
        _ => return Err(bad(1, format!("expected `{HEADER}`"))),
    }
    let mut sections: Vec<(String, Vec<(usize, &str)>)> = Vec::new();
    for (n, l) in lines {
        if l.starts_with('[') {
            sections.push((l.trim_matches(|c| c == '[' || c == ']').to_string(), Vec::new()));
        } else if let Some(last) = sections.last_mut() {
            last.1.push((n, l));
        } else if !l.trim().is_empty() {
            return Err(bad(n, "content before first section"));
        }
    }
    let section = |name: &str| -> Result<&Vec<(usize, &str)>> {
        sections
            .iter()
            .find(|(s, _)| s == name)
            .map(|(_, v)| v)
            .ok_or_else(|| bad(0, format!("missing [{name}] section")))
    };
    let config_text: String = section("config")?.iter().map(|(_, l)| format!("{l}\n")).collect();
    let config = Config::parse(&config_text)?;
    let d = section("dims")?;
    let dims = Dims {
        k_t: kv(d, "k_t")? as usize,
        d_t: kv(d, "d_t")? as usize,
        k_v: kv(d, "k_v")? as usize,
        d_v: kv(d, "d_v")? as usize,
    };
    let structure = parse_structure(section("structure")?)?;
    let genotype: String = section("genotype")?
        .iter()
        .map(|(_, l)| format!("{}\n", l.strip_prefix("  ").unwrap_or(l)))
        .collect();
    let seed = kv(section("rng")?, "seed")?;
    let mut model = Muse::with_structure(&config.model, dims, seed, &structure)?;

    let params = section("params")?;
    let mut seen = vec![false; model.store.len()];
    for &(n, l) in params {
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(n, "expected 5 tab-separated fields"));
        }
        let id = model
            .store
            .find(f[0])
            .ok_or_else(|| bad(n, format!("unknown parameter `{}`", f[0])))?;
        let shape: Vec<usize> = if f[1].is_empty() {
            Vec::new()
        } else {
            f[1].split(',')
                .map(|x| x.parse().map_err(|_| bad(n, "bad shape")))
                .collect::<Result<_>>()?
        };
        if ParamGroup::parse(f[2]) != Some(model.store.get(id).group) {
            return Err(bad(n, format!("`{}`: group mismatch", f[0])));
        }
        let trainable = match f[3] {
            "true" => true,
            "false" => false,
            _ => return Err(bad(n, "bad trainable flag")),
        };
        let data: Vec<f64> = f[4]
            .split(' ')
            .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits).map_err(|_| bad(n, "bad value bits")))
            .collect::<Result<_>>()?;
        let value = Tensor::new(shape, data).map_err(|e| bad(n, e.to_string()))?;
        if value.shape() != model.store.value(id).shape() {
            return Err(bad(
                n,
                format!(
                    "`{}`: shape {:?} does not match model {:?}",
                    f[0],
                    value.shape(),
                    model.store.value(id).shape()
                ),
            ));
        }
        model.store.set_value(id, value);
        model.store.set_requires_grad(id, trainable);
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = &model.store.iter().nth(missing).expect("in range").1.name;
        return Err(bad(0, format!("parameter `{name}` missing from checkpoint")));
    }
    Ok(Checkpoint {
        config,
        model,
        genotype,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&std::fs::read_to_string(path)?)
}
