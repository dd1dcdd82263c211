//! Single-file binary checkpoints: magic, version, embedded config JSON with
//! its own hash, parameters and optimizer moments by visitation name, random
//! stream positions, and (optionally) the full environment and replay state
//! for bit-exact resume. The file ends with a SHA-256 of everything before
//! it; any mismatch loads as `Error::Corrupt`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RngSet, RunConfig};
use super::train::Trainer;
use crate::error::{Error, Result};
use crate::nn::{Adam, Net};
use crate::replay::{Record, ReplayBuffer};
use crate::toyenv::{EnvMode, SceneState};

const MAGIC: &[u8; 4] = b"VFCP";
const VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.raw(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.raw(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.raw(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.raw(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.raw(s.as_bytes());
    }

    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.raw(&x.to_le_bytes());
        }
    }

    fn dims(&mut self, shape: &[usize]) {
        self.u64(shape.len() as u64);
        for &d in shape {
            self.u64(d as u64);
        }
    }

    fn arr3_u8(&mut self, a: &Array3<u8>) {
        let (c, h, w) = a.dim();
        self.dims(&[c, h, w]);
        self.raw(a.as_slice().expect("frame arrays are standard layout"));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Corrupt("non-utf8 string field".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Corrupt("implausible array length".into()))?;
        let bytes = self.take(len)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u64()? as usize;
        if n > 8 {
            return Err(Error::Corrupt(format!("implausible tensor rank {n}")));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.u64()? as usize);
        }
        Ok(out)
    }

    fn arr3_u8(&mut self) -> Result<Array3<u8>> {
        let dims = self.dims()?;
        if dims.len() != 3 {
            return Err(Error::Corrupt("frame tensor is not rank 3".into()));
        }
        let total = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Corrupt("implausible frame shape".into()))?;
        let bytes = self.take(total)?.to_vec();
        Array3::from_shape_vec((dims[0], dims[1], dims[2]), bytes)
            .map_err(|e| Error::Corrupt(e.to_string()))
    }
}

fn sha256(bytes: &[u8]) -> [u8; HASH_LEN] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

#[derive(Serialize, Deserialize)]
struct EnvSnapshot {
    mode: EnvMode,
    state: SceneState,
    params: BTreeMap<String, f64>,
}

fn write_net(w: &mut Writer, name: &str, net: &mut dyn Net) {
    w.str(name);
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    net.visit_params("", &mut |pname, p| {
        let data = p.v.as_slice().expect("params are standard layout").to_vec();
        entries.push((pname.to_string(), p.v.shape().to_vec(), data));
    });
    w.u64(entries.len() as u64);
    for (pname, shape, data) in entries {
        w.str(&pname);
        w.dims(&shape);
        w.f64s(&data);
    }
}

fn read_net(r: &mut Reader<'_>, expect_name: &str, net: &mut dyn Net) -> Result<()> {
    let name = r.str()?;
    if name != expect_name {
        return Err(Error::Corrupt(format!(
            "expected network section '{expect_name}', found '{name}'"
        )));
    }
    let n = r.u64()? as usize;
    let mut stored = Vec::with_capacity(n);
    for _ in 0..n {
        let pname = r.str()?;
        let shape = r.dims()?;
        let data = r.f64s()?;
        stored.push((pname, shape, data));
    }
    let mut idx = 0usize;
    let mut failure: Option<String> = None;
    net.visit_params("", &mut |pname, mut p| {
        if failure.is_some() {
            return;
        }
        match stored.get(idx) {
            None => failure = Some(format!("missing parameter '{pname}' in '{expect_name}'")),
            Some((sname, shape, data)) => {
                if sname != pname {
                    failure = Some(format!(
                        "parameter order mismatch in '{expect_name}': stored '{sname}', live '{pname}'"
                    ));
                } else if p.v.shape() != shape.as_slice() {
                    failure = Some(format!(
                        "shape mismatch for '{pname}': stored {shape:?}, live {:?}",
                        p.v.shape()
                    ));
                } else {
                    p.v.as_slice_mut()
                        .expect("params are standard layout")
                        .copy_from_slice(data);
                }
            }
        }
        idx += 1;
    });
    if let Some(msg) = failure {
        return Err(Error::Corrupt(msg));
    }
    if idx != stored.len() {
        return Err(Error::Corrupt(format!(
            "network '{expect_name}' has {idx} parameters but checkpoint stores {}",
            stored.len()
        )));
    }
    Ok(())
}

fn write_opt(w: &mut Writer, name: &str, opt: &Adam) {
    w.str(name);
    w.u64(opt.t);
    let slots: Vec<_> = opt.state().collect();
    w.u64(slots.len() as u64);
    for (sname, m, v) in slots {
        w.str(sname);
        w.dims(m.shape());
        w.f64s(m.as_slice().expect("moments are standard layout"));
        w.f64s(v.as_slice().expect("moments are standard layout"));
    }
}

fn read_opt(r: &mut Reader<'_>, expect_name: &str, opt: &mut Adam) -> Result<()> {
    let name = r.str()?;
    if name != expect_name {
        return Err(Error::Corrupt(format!(
            "expected optimizer section '{expect_name}', found '{name}'"
        )));
    }
    opt.t = r.u64()?;
    let n = r.u64()? as usize;
    for _ in 0..n {
        let sname = r.str()?;
        let shape = r.dims()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        let dim = IxDyn(&shape);
        let m = ArrayD::from_shape_vec(dim.clone(), m)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        let v = ArrayD::from_shape_vec(dim, v).map_err(|e| Error::Corrupt(e.to_string()))?;
        if !opt.restore_slot(&sname, m, v) {
            return Err(Error::Corrupt(format!(
                "optimizer '{expect_name}' has no slot '{sname}' of that shape"
            )));
        }
    }
    Ok(())
}

/// Serializes the whole trainer. Environment, frame history, and replay
/// contents are included only when the run config enables exact resume.
pub fn save(tr: &mut Trainer, path: &Path) -> Result<()> {
    let exact = tr.cfg.exact_resume;
    let mut w = Writer::default();
    w.raw(MAGIC);
    w.u32(VERSION);
    let cfg_json = tr.cfg.canonical_json()?;
    w.str(&cfg_json);
    w.raw(&sha256(cfg_json.as_bytes()));
    w.u64(tr.ts.step);
    w.u64(tr.episodes);
    w.f64(tr.episode_return);
    w.u8(tr.schedule.enabled as u8);
    w.u64(tr.schedule.episodes_since_enable);
    w.u64(tr.rngs.seed);
    for p in tr.rngs.word_positions() {
        w.u128(p);
    }
    write_net(&mut w, "encoder", &mut tr.ts.encoder);
    write_net(&mut w, "actor", &mut tr.ts.actor);
    write_net(&mut w, "critic", &mut tr.ts.critic);
    write_net(&mut w, "critic_target", &mut tr.ts.critic_target);
    match tr.ts.decoder.as_mut() {
        Some(dec) => {
            w.u8(1);
            write_net(&mut w, "decoder", dec);
        }
        None => w.u8(0),
    }
    write_opt(&mut w, "opt_encoder", &tr.ts.opt_encoder);
    write_opt(&mut w, "opt_actor", &tr.ts.opt_actor);
    write_opt(&mut w, "opt_critic", &tr.ts.opt_critic);
    match tr.ts.opt_decoder.as_ref() {
        Some(opt) => {
            w.u8(1);
            write_opt(&mut w, "opt_decoder", opt);
        }
        None => w.u8(0),
    }
    w.u8(exact as u8);
    if exact {
        let snap = EnvSnapshot {
            mode: tr.env.mode,
            state: tr.env.state.clone(),
            params: tr.env.params.clone(),
        };
        let snap_json =
            serde_json::to_string(&snap).map_err(|e| Error::config(e.to_string()))?;
        w.str(&snap_json);
        let (frames, depth) = tr.env.frame_history();
        w.u64(frames.len() as u64);
        for f in frames {
            w.arr3_u8(f);
        }
        w.arr3_u8(depth);
        let (ep_counter, ep_open) = tr.replay.state();
        w.u64(ep_counter);
        w.u8(ep_open as u8);
        let records: Vec<&Record> = tr.replay.records().collect();
        w.u64(records.len() as u64);
        for rec in records {
            w.u64(rec.episode);
            w.u8(rec.done as u8);
            w.f64(rec.reward);
            match rec.action.as_ref() {
                Some(a) => {
                    w.u8(1);
                    w.f64s(a.as_slice().expect("actions are contiguous"));
                }
                None => w.u8(0),
            }
            w.arr3_u8(&rec.rgb);
            w.arr3_u8(&rec.depth);
        }
    }
    let digest = sha256(&w.buf);
    w.raw(&digest);
    let tmp = path.with_extension("ckpt.tmp");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&tmp, &w.buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn verified_body(raw: &[u8]) -> Result<&[u8]> {
    if raw.len() < MAGIC.len() + 4 + HASH_LEN {
        return Err(Error::Corrupt("file too short to be a checkpoint".into()));
    }
    let (body, tail) = raw.split_at(raw.len() - HASH_LEN);
    if sha256(body)[..] != *tail {
        return Err(Error::Corrupt("integrity hash mismatch".into()));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    Ok(body)
}

fn read_header(r: &mut Reader<'_>) -> Result<RunConfig> {
    let magic = r.take(4)?;
    debug_assert_eq!(magic, MAGIC);
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let cfg_json = r.str()?;
    let stored = r.take(HASH_LEN)?;
    if sha256(cfg_json.as_bytes())[..] != *stored {
        return Err(Error::Corrupt("embedded config hash mismatch".into()));
    }
    RunConfig::from_json(&cfg_json)
}

/// Reads only the embedded run configuration.
pub fn peek_config(path: &Path) -> Result<RunConfig> {
    let raw = std::fs::read(path)?;
    let body = verified_body(&raw)?;
    let mut r = Reader::new(body);
    read_header(&mut r)
}

/// Rebuilds a trainer from a checkpoint. With an exact-resume section the
/// continuation is bit-identical to the run that wrote it; without one the
/// parameters, counters, and stream positions are restored but the
/// environment restarts and the replay buffer refills.
pub fn load(path: &Path, out_override: Option<&Path>) -> Result<Trainer> {
    let raw = std::fs::read(path)?;
    let body = verified_body(&raw)?;
    let mut r = Reader::new(body);
    let cfg = read_header(&mut r)?;
    let step = r.u64()?;
    let episodes = r.u64()?;
    let episode_return = r.f64()?;
    let enabled = r.u8()? != 0;
    let episodes_since_enable = r.u64()?;
    let seed = r.u64()?;
    let mut positions = [0u128; 6];
    for p in positions.iter_mut() {
        *p = r.u128()?;
    }
    let mut tr = Trainer::new(cfg, out_override)?;
    read_net(&mut r, "encoder", &mut tr.ts.encoder)?;
    read_net(&mut r, "actor", &mut tr.ts.actor)?;
    read_net(&mut r, "critic", &mut tr.ts.critic)?;
    read_net(&mut r, "critic_target", &mut tr.ts.critic_target)?;
    let has_decoder = r.u8()? != 0;
    match (has_decoder, tr.ts.decoder.as_mut()) {
        (true, Some(dec)) => read_net(&mut r, "decoder", dec)?,
        (false, None) => {}
        _ => {
            return Err(Error::Corrupt(
                "decoder presence disagrees with the embedded config".into(),
            ))
        }
    }
    read_opt(&mut r, "opt_encoder", &mut tr.ts.opt_encoder)?;
    read_opt(&mut r, "opt_actor", &mut tr.ts.opt_actor)?;
    read_opt(&mut r, "opt_critic", &mut tr.ts.opt_critic)?;
    let has_opt_decoder = r.u8()? != 0;
    match (has_opt_decoder, tr.ts.opt_decoder.as_mut()) {
        (true, Some(opt)) => read_opt(&mut r, "opt_decoder", opt)?,
        (false, None) => {}
        _ => {
            return Err(Error::Corrupt(
                "decoder optimizer presence disagrees with the embedded config".into(),
            ))
        }
    }
    tr.ts.step = step;
    tr.episodes = episodes;
    tr.episode_return = episode_return;
    tr.schedule.enabled = enabled;
    tr.schedule.episodes_since_enable = episodes_since_enable;
    tr.rngs = RngSet::restore(seed, positions);
    let exact = r.u8()? != 0;
    if exact {
        let snap_json = r.str()?;
        let snap: EnvSnapshot = serde_json::from_str(&snap_json)
            .map_err(|e| Error::Corrupt(format!("env snapshot: {e}")))?;
        tr.env.mode = snap.mode;
        tr.env.state = snap.state;
        tr.env.params = snap.params;
        let n_frames = r.u64()? as usize;
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            frames.push(r.arr3_u8()?);
        }
        let depth = r.arr3_u8()?;
        tr.env
            .restore_frames(frames, depth)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        let ep_counter = r.u64()?;
        let ep_open = r.u8()? != 0;
        let n_records = r.u64()? as usize;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let episode = r.u64()?;
            let done = r.u8()? != 0;
            let reward = r.f64()?;
            let action = if r.u8()? != 0 {
                Some(ndarray::Array1::from_vec(r.f64s()?))
            } else {
                None
            };
            let rgb = r.arr3_u8()?;
            let depth = r.arr3_u8()?;
            records.push(Record { episode, rgb, depth, action, reward, done });
        }
        tr.replay = ReplayBuffer::restore(
            &tr.cfg.replay,
            tr.cfg.agent.n_step,
            tr.cfg.agent.gamma,
            tr.cfg.env.frame_stack,
            records,
            ep_counter,
            ep_open,
        )?;
        tr.obs = tr.env.observation();
    } else {
        // approximate resume: restart an episode at the restored stream
        // position so collection continues from a well-defined state
        tr.obs = tr.env.reset(&mut tr.rngs.env, &tr.schedule);
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after checkpoint payload",
            body.len() - r.pos
        )));
    }
    Ok(tr)
}
