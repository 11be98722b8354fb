//! Binary checkpoint container.
//!
//! Layout: the magic bytes `SBRL`, a little-endian `u32` format version, then
//! a fixed sequence of sections. Each section is a `u16` name length, the
//! UTF-8 name, a `u64` payload length and the payload. Floats are stored as
//! their IEEE-754 bits, so a round trip is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::barrier::BarrierNet;
use crate::diffcore::Tensor;
use crate::envs::Trajectory;
use crate::error::{Error, Result};
use crate::nn::{AdamState, Mlp, ParamSet, Policy};
use crate::rng::RngState;
use crate::sdegen::ModelOptimizer;

use super::config::TrainConfig;
use super::train::{Checkpoint, Layouts, Metrics, RngStates};

pub const MAGIC: &[u8; 4] = b"SBRL";
pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&str; 13] = [
    "config",
    "iteration",
    "policy",
    "drift",
    "diffusion",
    "barrier",
    "adam.policy",
    "adam.drift",
    "adam.diffusion",
    "adam.barrier",
    "rng",
    "replay",
    "metrics",
];

type W = Vec<u8>;

fn put_f64s(w: &mut W, v: &[f64]) {
    for x in v {
        w.write_f64::<LittleEndian>(*x).unwrap();
    }
}

fn put_params(w: &mut W, p: &ParamSet) {
    w.write_u32::<LittleEndian>(p.len() as u32).unwrap();
    for (name, t) in p.iter() {
        w.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        w.extend_from_slice(name.as_bytes());
        w.write_u8(t.shape().len() as u8).unwrap();
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        put_f64s(w, t.data());
    }
}

fn put_adam(w: &mut W, a: &AdamState) {
    put_f64s(w, &[a.lr, a.beta1, a.beta2, a.eps]);
    w.write_u64::<LittleEndian>(a.step).unwrap();
    put_params(w, &a.m);
    put_params(w, &a.v);
}

fn put_rng(w: &mut W, r: &RngState) {
    w.extend_from_slice(&r.seed);
    w.write_u64::<LittleEndian>(r.stream).unwrap();
    w.write_u128::<LittleEndian>(r.word_pos).unwrap();
}

fn put_rows(w: &mut W, rows: &[Vec<f64>], width: usize) {
    for r in rows {
        debug_assert_eq!(r.len(), width);
        put_f64s(w, r);
    }
}

fn put_replay(w: &mut W, replay: &[Trajectory]) {
    w.write_u64::<LittleEndian>(replay.len() as u64).unwrap();
    for tr in replay {
        let n = tr.states.first().map_or(0, Vec::len);
        let m = tr.actions.first().map_or(0, Vec::len);
        w.write_u64::<LittleEndian>(tr.states.len() as u64).unwrap();
        w.write_u32::<LittleEndian>(n as u32).unwrap();
        w.write_u32::<LittleEndian>(m as u32).unwrap();
        put_rows(w, &tr.states, n);
        put_rows(w, &tr.actions, m);
        put_f64s(w, &tr.rewards);
        w.write_i64::<LittleEndian>(tr.unsafe_hit.map_or(-1, |h| h as i64)).unwrap();
    }
}

fn section(out: &mut W, name: &str, payload: W) {
    out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
    out.extend_from_slice(name.as_bytes());
    out.write_u64::<LittleEndian>(payload.len() as u64).unwrap();
    out.extend_from_slice(&payload);
}

/// Serializes a checkpoint.
pub fn encode(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    let diffusion = c
        .model
        .diffusion
        .as_ref()
        .ok_or_else(|| Error::contract("training models always carry a diffusion network"))?;
    let diffusion_opt = c
        .model_opt
        .diffusion
        .as_ref()
        .ok_or_else(|| Error::contract("missing diffusion optimizer state"))?;
    let mut p;
    for name in SECTIONS {
        p = Vec::new();
        match name {
            "config" => p = serde_json::to_vec(&c.config)?,
            "iteration" => p.write_u64::<LittleEndian>(c.iteration as u64)?,
            "policy" => put_params(&mut p, &c.policy.net.params),
            "drift" => put_params(&mut p, &c.model.drift.params),
            "diffusion" => put_params(&mut p, &diffusion.params),
            "barrier" => put_params(&mut p, &c.barrier.net.params),
            "adam.policy" => put_adam(&mut p, &c.policy_opt),
            "adam.drift" => put_adam(&mut p, &c.model_opt.drift),
            "adam.diffusion" => put_adam(&mut p, diffusion_opt),
            "adam.barrier" => put_adam(&mut p, &c.barrier_opt),
            "rng" => {
                for r in [&c.rngs.env, &c.rngs.model, &c.rngs.synth, &c.rngs.barrier] {
                    put_rng(&mut p, r);
                }
            }
            "replay" => put_replay(&mut p, &c.replay),
            "metrics" => p = serde_json::to_vec(&c.metrics)?,
            _ => unreachable!(),
        }
        section(&mut out, name, p);
    }
    Ok(out)
}

/// Cursor over the file that reports failures with their byte offset.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated while reading {what} ({n} bytes needed, {} left)",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2, what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(LittleEndian::read_i64(self.take(8, what)?))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(LittleEndian::read_u128(self.take(16, what)?))
    }

    fn count(&mut self, what: &str, elem_bytes: usize) -> Result<usize> {
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_bytes.max(1) as u64) > left {
            return Err(self.corrupt(format!("{what} count {n} exceeds the remaining data")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("size overflow"))?, what)?;
        Ok(bytes.chunks_exact(8).map(LittleEndian::read_f64).collect())
    }

    fn params(&mut self, what: &str) -> Result<ParamSet> {
        let count = self.u32(what)? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = self.u16(what)? as usize;
            let start = self.pos;
            let name = std::str::from_utf8(self.take(len, what)?)
                .map_err(|_| Error::Corrupt {
                    offset: start,
                    detail: format!("{what}: parameter name is not UTF-8"),
                })?
                .to_string();
            let rank = self.u8(what)? as usize;
            if rank > 2 {
                return Err(self.corrupt(format!("{what}: tensor rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64(what)? as usize);
            }
            let len: usize = shape.iter().product();
            let start = self.pos;
            let data = self.f64s(len, what)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt {
                offset: start,
                detail: format!("{what}: {e}"),
            })?;
            entries.push((name, t));
        }
        Ok(ParamSet::new(entries))
    }

    fn adam(&mut self, what: &str) -> Result<AdamState> {
        let h = self.f64s(4, what)?;
        let step = self.u64(what)?;
        let m = self.params(what)?;
        let v = self.params(what)?;
        Ok(AdamState {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
            step,
            m,
            v,
        })
    }

    fn rng(&mut self) -> Result<RngState> {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(self.take(32, "rng seed")?);
        Ok(RngState {
            seed,
            stream: self.u64("rng stream")?,
            word_pos: self.u128("rng position")?,
        })
    }

    fn rows(&mut self, count: usize, width: usize, what: &str) -> Result<Vec<Vec<f64>>> {
        let flat = self.f64s(count * width, what)?;
        Ok(if width == 0 {
            vec![Vec::new(); count]
        } else {
            flat.chunks_exact(width).map(<[f64]>::to_vec).collect()
        })
    }

    fn replay(&mut self) -> Result<Vec<Trajectory>> {
        let count = self.count("replay", 24)?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = self.count("trajectory length", 8)?;
            let n = self.u32("state width")? as usize;
            let m = self.u32("action width")? as usize;
            let states = self.rows(len, n, "states")?;
            let actions = self.rows(len, m, "actions")?;
            let rewards = self.f64s(len, "rewards")?;
            let hit = self.i64("unsafe index")?;
            out.push(Trajectory {
                states,
                actions,
                rewards,
                unsafe_hit: usize::try_from(hit).ok(),
            });
        }
        Ok(out)
    }

    fn done(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupt(format!("{} unexpected bytes in {what}", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Parses a checkpoint produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            detail: "not a checkpoint (bad magic bytes)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut payloads = Vec::with_capacity(SECTIONS.len());
    for expected in SECTIONS {
        let len = r.u16("section name")? as usize;
        let start = r.pos;
        let name = r.take(len, "section name")?;
        if name != expected.as_bytes() {
            return Err(Error::Corrupt {
                offset: start,
                detail: format!("expected section `{expected}`"),
            });
        }
        let size = r.count("section length", 1)?;
        let offset = r.pos;
        payloads.push((expected, offset, r.take(size, expected)?));
    }
    r.done("file")?;

    let json_err = |i: usize, e: serde_json::Error| Error::Corrupt {
        offset: payloads[i].1,
        detail: format!("section `{}`: {e}", payloads[i].0),
    };

    let config: TrainConfig = serde_json::from_slice(payloads[0].2).map_err(|e| json_err(0, e))?;
    config.validate().map_err(|e| Error::Corrupt {
        offset: payloads[0].1,
        detail: format!("invalid config: {e}"),
    })?;
    let iteration = parse(&payloads[1], |r| r.u64("iteration"))? as usize;
    let params = |i: usize| parse(&payloads[i], |r| r.params(payloads[i].0));
    let adam = |i: usize| parse(&payloads[i], |r| r.adam(payloads[i].0));
    let (policy_p, drift_p, diffusion_p, barrier_p) = (params(2)?, params(3)?, params(4)?, params(5)?);
    let (policy_opt, drift_opt, diffusion_opt, barrier_opt) = (adam(6)?, adam(7)?, adam(8)?, adam(9)?);
    let rngs = parse(&payloads[10], |r| {
        Ok(RngStates {
            env: r.rng()?,
            model: r.rng()?,
            synth: r.rng()?,
            barrier: r.rng()?,
        })
    })?;
    let replay = parse(&payloads[11], |r| r.replay())?;
    let metrics: Metrics = serde_json::from_slice(payloads[12].2).map_err(|e| json_err(12, e))?;

    // Rebuild the networks from the config's layouts.
    let env = config.env_spec()?;
    let lay = Layouts::new(&config, &env)?;
    let layout_err = |i: usize, e: Error| Error::Corrupt {
        offset: payloads[i].1,
        detail: format!("section `{}` does not fit the configured network: {e}", payloads[i].0),
    };
    let policy = Policy::new(
        Mlp::from_parts(lay.policy, policy_p).map_err(|e| layout_err(2, e))?,
        lay.action_bound,
    )?;
    let mut model = lay.model;
    model.drift = Mlp::from_parts(model.drift.spec.clone(), drift_p).map_err(|e| layout_err(3, e))?;
    let diff_spec = model.diffusion.as_ref().expect("configured diffusion").spec.clone();
    model.diffusion = Some(Mlp::from_parts(diff_spec, diffusion_p).map_err(|e| layout_err(4, e))?);
    let barrier = BarrierNet::from_mlp(Mlp::from_parts(lay.barrier, barrier_p).map_err(|e| layout_err(5, e))?)?;
    if metrics.len() != iteration {
        return Err(Error::Corrupt {
            offset: payloads[12].1,
            detail: format!("{} metric rows for {iteration} iterations", metrics.len()),
        });
    }
    Ok(Checkpoint {
        config,
        iteration,
        policy,
        model,
        barrier,
        policy_opt,
        model_opt: ModelOptimizer {
            drift: drift_opt,
            diffusion: Some(diffusion_opt),
        },
        barrier_opt,
        rngs,
        replay,
        metrics,
    })
}

/// Runs `f` over one section's payload; offsets in errors are file-relative.
fn parse<T>(
    (name, offset, bytes): &(&str, usize, &[u8]),
    f: impl FnOnce(&mut Reader<'_>) -> Result<T>,
) -> Result<T> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let rebase = |e: Error| match e {
        Error::Corrupt { offset: o, detail } => Error::Corrupt {
            offset: offset + o,
            detail: format!("section `{name}`: {detail}"),
        },
        other => other,
    };
    let v = f(&mut r).map_err(rebase)?;
    r.done(name).map_err(rebase)?;
    Ok(v)
}

/// Writes atomically: to a temporary sibling, then renamed into place.
pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let bytes = encode(c)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
